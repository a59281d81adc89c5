#include "mblm/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <openssl/evp.h>

#include "json.hpp"
#include "mblm/errors.hpp"
#include "mblm/rng.hpp"

namespace mblm {

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open \"" + path + "\"");
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write \"" + path + "\"");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to \"" + path + "\"");
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw DataError("sha-256 digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

std::string segment_filename(std::int64_t index) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "segment-%03lld.jsonl", static_cast<long long>(index));
    return buf;
}

}  // namespace

// -------------------- tokenizer --------------------

std::string_view to_string(TokenizerKind kind) {
    return kind == TokenizerKind::byte_level ? "byte_level" : "external_vocab";
}

TokenizerKind tokenizer_kind_from_string(std::string_view s) {
    if (s == "byte_level") return TokenizerKind::byte_level;
    if (s == "external_vocab") return TokenizerKind::external_vocab;
    throw ConfigError("unknown tokenizer kind \"" + std::string(s) + "\"");
}

TokenizerSpec TokenizerSpec::bytes() {
    TokenizerSpec spec;
    spec.kind = TokenizerKind::byte_level;
    spec.vocab_size = 259;
    return spec;
}

TokenizerSpec TokenizerSpec::external(std::vector<std::string> entries) {
    if (entries.size() < 4) {
        throw DataError("external vocabulary needs the three specials plus at least one token");
    }
    TokenizerSpec spec;
    spec.kind = TokenizerKind::external_vocab;
    spec.vocab_size = static_cast<std::int64_t>(entries.size());
    spec.entries = std::move(entries);
    return spec;
}

TokenizerSpec TokenizerSpec::load_external(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("vocabulary file \"" + path + "\" is not valid JSON: " + e.what());
    }
    if (!j.is_array()) throw DataError("vocabulary file must be a JSON array of strings");
    std::vector<std::string> entries;
    entries.reserve(j.size());
    for (const auto& item : j) {
        if (!item.is_string()) throw DataError("vocabulary entries must be strings");
        entries.push_back(item.get<std::string>());
    }
    return external(std::move(entries));
}

std::vector<TokenId> encode(const TokenizerSpec& spec, std::string_view text) {
    std::vector<TokenId> ids;
    if (spec.kind == TokenizerKind::byte_level) {
        ids.reserve(text.size());
        for (unsigned char b : text) ids.push_back(static_cast<TokenId>(b) + 3);
        return ids;
    }
    if (spec.entries.empty()) throw DataError("external tokenizer has no loaded vocabulary");
    // greedy longest match against the non-special entries
    std::unordered_map<std::string_view, TokenId> table;
    std::size_t longest = 1;
    for (std::size_t i = 0; i < spec.entries.size(); ++i) {
        const auto id = static_cast<TokenId>(i);
        if (id == spec.bos || id == spec.eos || id == spec.pad) continue;
        if (spec.entries[i].empty()) continue;
        table.emplace(spec.entries[i], id);
        longest = std::max(longest, spec.entries[i].size());
    }
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t len = std::min(longest, text.size() - pos);
        for (; len >= 1; --len) {
            auto it = table.find(text.substr(pos, len));
            if (it != table.end()) {
                ids.push_back(it->second);
                pos += len;
                break;
            }
        }
        if (len == 0) {
            throw DataError("no vocabulary entry matches input at byte " + std::to_string(pos));
        }
    }
    return ids;
}

std::string decode(const TokenizerSpec& spec, std::span<const TokenId> ids) {
    std::string out;
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::int64_t>(id) >= spec.vocab_size) {
            throw std::out_of_range("decode: id " + std::to_string(id) + " outside vocab of " +
                                    std::to_string(spec.vocab_size));
        }
        if (id == spec.bos || id == spec.eos || id == spec.pad) continue;
        if (spec.kind == TokenizerKind::byte_level) {
            out.push_back(static_cast<char>(id - 3));
        } else {
            out += spec.entries[static_cast<std::size_t>(id)];
        }
    }
    return out;
}

// -------------------- packing --------------------

std::vector<PackedSample> pack(const TokenizerSpec& spec, const std::vector<Document>& docs,
                               std::int64_t sample_len) {
    if (sample_len < 2) throw ConfigError("sample_len must be at least 2");
    // concatenate per source, in order of first appearance
    std::vector<std::string> source_order;
    std::unordered_map<std::string, std::vector<TokenId>> streams;
    for (const Document& doc : docs) {
        auto [it, fresh] = streams.try_emplace(doc.source);
        if (fresh) source_order.push_back(doc.source);
        auto& stream = it->second;
        for (TokenId id : doc.token_ids) {
            if (id < 0 || static_cast<std::int64_t>(id) >= spec.vocab_size) {
                throw DataError("document token " + std::to_string(id) + " outside vocab of " +
                                std::to_string(spec.vocab_size));
            }
            stream.push_back(id);
        }
        stream.push_back(spec.eos);
    }
    std::vector<PackedSample> samples;
    for (const std::string& source : source_order) {
        const auto& stream = streams[source];
        const std::int64_t full =
            static_cast<std::int64_t>(stream.size()) / sample_len;  // partial tail dropped
        for (std::int64_t c = 0; c < full; ++c) {
            PackedSample s;
            s.source = source;
            s.token_ids.assign(stream.begin() + c * sample_len,
                               stream.begin() + (c + 1) * sample_len);
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

// -------------------- segment files --------------------

namespace {

std::string sample_to_line(const PackedSample& s) {
    nlohmann::json j;
    j["source"] = s.source;
    j["token_ids"] = s.token_ids;
    return j.dump() + "\n";
}

PackedSample line_to_sample(const std::string& line, const std::string& file, std::size_t lineno) {
    const std::string where = "segment " + file + " line " + std::to_string(lineno);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(where + ": " + e.what());
    }
    if (!j.is_object() || j.size() != 2 || !j.contains("source") || !j.contains("token_ids")) {
        throw DataError(where + ": expected exactly {\"source\", \"token_ids\"}");
    }
    if (!j["source"].is_string() || !j["token_ids"].is_array()) {
        throw DataError(where + ": wrong field types");
    }
    PackedSample s;
    s.source = j["source"].get<std::string>();
    s.token_ids.reserve(j["token_ids"].size());
    for (const auto& item : j["token_ids"]) {
        if (!item.is_number_integer()) throw DataError(where + ": token ids must be integers");
        s.token_ids.push_back(item.get<TokenId>());
    }
    return s;
}

}  // namespace

Manifest write_segments(const std::vector<PackedSample>& samples, std::int64_t n_segments,
                        const std::string& directory, const TokenizerSpec& spec) {
    if (n_segments < 1) throw ConfigError("n_segments must be at least 1");
    const auto n = static_cast<std::int64_t>(samples.size());
    if (n < n_segments) {
        throw ConfigError("cannot spread " + std::to_string(n) + " samples over " +
                          std::to_string(n_segments) + " segments without empty ones");
    }
    std::int64_t width = -1;
    for (const PackedSample& s : samples) {
        const auto w = static_cast<std::int64_t>(s.token_ids.size());
        if (width < 0) width = w;
        if (w != width) throw DataError("samples have mixed widths");
        for (TokenId id : s.token_ids) {
            if (id < 0 || static_cast<std::int64_t>(id) >= spec.vocab_size) {
                throw DataError("sample token " + std::to_string(id) + " outside vocab of " +
                                std::to_string(spec.vocab_size));
            }
        }
    }

    std::filesystem::create_directories(directory);
    Manifest manifest;
    manifest.tokenizer_kind = std::string(to_string(spec.kind));
    manifest.vocab_size = spec.vocab_size;
    for (std::int64_t seg = 0; seg < n_segments; ++seg) {
        std::string content;
        std::int64_t count = 0;
        for (std::int64_t i = seg; i < n; i += n_segments) {
            content += sample_to_line(samples[static_cast<std::size_t>(i)]);
            ++count;
        }
        const std::string name = segment_filename(seg);
        write_file(directory + "/" + name, content);
        manifest.segments.push_back({name, count, sha256_hex(content)});
    }

    nlohmann::json j;
    j["tokenizer_kind"] = manifest.tokenizer_kind;
    j["vocab_size"] = manifest.vocab_size;
    j["segments"] = nlohmann::json::array();
    for (const auto& e : manifest.segments) {
        j["segments"].push_back({{"file", e.file}, {"n_samples", e.n_samples}, {"sha256", e.sha256}});
    }
    write_file(directory + "/manifest.json", j.dump(2) + "\n");
    return manifest;
}

DataSegment load_segment(const std::string& path) {
    const std::string content = read_file(path);
    DataSegment seg;
    std::size_t lineno = 0;
    std::size_t start = 0;
    std::int64_t width = -1;
    while (start < content.size()) {
        std::size_t end = content.find('\n', start);
        if (end == std::string::npos) {
            throw DataError("segment " + path + ": missing trailing newline");
        }
        ++lineno;
        PackedSample s = line_to_sample(content.substr(start, end - start), path, lineno);
        const auto w = static_cast<std::int64_t>(s.token_ids.size());
        if (width < 0) width = w;
        if (w != width) {
            throw DataError("segment " + path + " line " + std::to_string(lineno) +
                            ": width " + std::to_string(w) + " differs from " +
                            std::to_string(width));
        }
        seg.samples.push_back(std::move(s));
        start = end + 1;
    }
    if (seg.samples.empty()) throw DataError("segment " + path + " is empty");
    return seg;
}

Manifest load_manifest(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("manifest \"" + path + "\" is not valid JSON: " + e.what());
    }
    Manifest m;
    try {
        m.tokenizer_kind = j.at("tokenizer_kind").get<std::string>();
        m.vocab_size = j.at("vocab_size").get<std::int64_t>();
        for (const auto& e : j.at("segments")) {
            m.segments.push_back({e.at("file").get<std::string>(),
                                  e.at("n_samples").get<std::int64_t>(),
                                  e.at("sha256").get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest \"" + path + "\": " + e.what());
    }
    return m;
}

std::vector<PackedSample> load_dataset(const std::string& directory) {
    Manifest manifest = load_manifest(directory + "/manifest.json");
    const auto n_segments = static_cast<std::int64_t>(manifest.segments.size());
    std::int64_t total = 0;
    for (const auto& entry : manifest.segments) total += entry.n_samples;
    // undo the round-robin distribution so loading inverts writing exactly
    std::vector<PackedSample> samples(static_cast<std::size_t>(total));
    for (std::int64_t s = 0; s < n_segments; ++s) {
        const auto& entry = manifest.segments[static_cast<std::size_t>(s)];
        const std::string path = directory + "/" + entry.file;
        const std::string content = read_file(path);
        const std::string digest = sha256_hex(content);
        if (digest != entry.sha256) {
            throw DataError("segment " + entry.file + " failed its checksum (manifest " +
                            entry.sha256 + ", file " + digest + ")");
        }
        DataSegment seg = load_segment(path);
        if (static_cast<std::int64_t>(seg.samples.size()) != entry.n_samples) {
            throw DataError("segment " + entry.file + " has " +
                            std::to_string(seg.samples.size()) + " samples, manifest says " +
                            std::to_string(entry.n_samples));
        }
        for (std::size_t j = 0; j < seg.samples.size(); ++j) {
            for (TokenId id : seg.samples[j].token_ids) {
                if (id < 0 || static_cast<std::int64_t>(id) >= manifest.vocab_size) {
                    throw DataError("segment " + entry.file + ": token " + std::to_string(id) +
                                    " outside vocab of " + std::to_string(manifest.vocab_size));
                }
            }
            const std::int64_t original = static_cast<std::int64_t>(j) * n_segments + s;
            if (original >= total) {
                throw DataError("segment sizes do not form a round-robin layout");
            }
            samples[static_cast<std::size_t>(original)] = std::move(seg.samples[j]);
        }
    }
    return samples;
}

// -------------------- batching --------------------

BatchIterator::BatchIterator(std::vector<PackedSample> samples, std::int64_t batch_size,
                             std::uint64_t seed)
    : samples_(std::move(samples)), batch_size_(batch_size) {
    if (batch_size_ < 1) throw ConfigError("batch_size must be at least 1");
    if (n_samples() < batch_size_) {
        throw ConfigError("need at least batch_size samples, have " +
                          std::to_string(n_samples()) + " for batch_size " +
                          std::to_string(batch_size_));
    }
    width_ = static_cast<std::int64_t>(samples_.front().token_ids.size());
    for (const PackedSample& s : samples_) {
        if (static_cast<std::int64_t>(s.token_ids.size()) != width_) {
            throw DataError("samples have mixed widths");
        }
    }
    cursor_.seed = seed;
    reshuffle();
}

void BatchIterator::reshuffle() {
    order_.resize(samples_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(mix_seed(cursor_.seed, static_cast<std::uint64_t>(cursor_.epoch)));
    rng.shuffle(order_);
}

BatchIterator::Batch BatchIterator::next() {
    if (cursor_.index >= batches_per_epoch()) {
        ++cursor_.epoch;
        cursor_.index = 0;
        reshuffle();
    }
    Batch batch;
    batch.rows = batch_size_;
    batch.cols = width_;
    batch.ids.reserve(static_cast<std::size_t>(batch_size_ * width_));
    const std::int64_t base = cursor_.index * batch_size_;
    for (std::int64_t r = 0; r < batch_size_; ++r) {
        const auto& ids = samples_[order_[static_cast<std::size_t>(base + r)]].token_ids;
        batch.ids.insert(batch.ids.end(), ids.begin(), ids.end());
    }
    ++cursor_.index;
    return batch;
}

void BatchIterator::seek(const Cursor& c) {
    if (c.index < 0 || c.index > batches_per_epoch() || c.epoch < 0) {
        throw ConfigError("batch cursor out of range");
    }
    cursor_ = c;
    reshuffle();
}

std::string cursor_to_json(const BatchIterator::Cursor& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["epoch"] = c.epoch;
    j["index"] = c.index;
    return j.dump();
}

BatchIterator::Cursor cursor_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("batch cursor is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("seed") || !j.contains("epoch") || !j.contains("index")) {
        throw DataError("batch cursor needs seed, epoch and index");
    }
    BatchIterator::Cursor c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.epoch = j.at("epoch").get<std::int64_t>();
    c.index = j.at("index").get<std::int64_t>();
    return c;
}

}  // namespace mblm
