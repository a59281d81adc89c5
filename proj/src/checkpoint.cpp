#include "mblm/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "mblm/errors.hpp"

namespace mblm {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are memcpy'd as little-endian floats");

namespace {

constexpr char kMagic[4] = {'M', 'B', 'L', 'M'};
constexpr int kDtypeF32 = 0;

struct PayloadRef {
    const float* data = nullptr;
    Shape dims;
    std::int64_t numel = 0;
};

/// std::map keeps the table sorted by name; offsets and payload order
/// both follow that ordering, which is what makes a save-load-save
/// round trip byte-identical.
std::map<std::string, PayloadRef> collect_tensors(const TransformerModel<float>& model,
                                                  const OptimizerState<float>* opt) {
    std::map<std::string, PayloadRef> table;
    const auto params = model.params();
    for (const auto& p : params) {
        table.emplace(p.name,
                      PayloadRef{p.tensor.data().data(), p.tensor.shape(), p.tensor.numel()});
    }
    if (opt != nullptr) {
        if (opt->slots.size() != params.size()) {
            throw std::invalid_argument("save_checkpoint: optimizer state does not match model");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& p = params[i];
            const auto& slot = opt->slots[i];
            table.emplace("opt.m." + p.name,
                          PayloadRef{slot.m.data(), p.tensor.shape(), p.tensor.numel()});
            table.emplace("opt.v." + p.name,
                          PayloadRef{slot.v.data(), p.tensor.shape(), p.tensor.numel()});
        }
    }
    return table;
}

void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t take_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

std::uint64_t take_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

struct Header {
    nlohmann::json json;
    std::uint64_t payload_start = 0;
};

Header read_header(std::istream& in, const std::string& path) {
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError("\"" + path + "\" is not a checkpoint file");
    }
    const std::uint32_t version = take_u32(in);
    if (version != kCheckpointVersion) {
        throw DataError("\"" + path + "\": unsupported checkpoint version " +
                        std::to_string(version));
    }
    const std::uint64_t header_len = take_u64(in);
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw DataError("\"" + path + "\": truncated checkpoint header");
    Header h;
    try {
        h.json = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("\"" + path + "\": bad checkpoint header: " + e.what());
    }
    for (const char* key : {"config", "step", "tokens_seen", "rng_state", "tensors"}) {
        if (!h.json.contains(key)) {
            throw DataError("\"" + path + "\": checkpoint header lacks \"" + key + "\"");
        }
    }
    h.payload_start = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t) + header_len;
    return h;
}

CheckpointMeta meta_from_header(const Header& h, const std::string& path) {
    CheckpointMeta meta;
    try {
        meta.config = parse_model_config(h.json.at("config").dump());
        meta.step = h.json.at("step").get<std::int64_t>();
        meta.tokens_seen = h.json.at("tokens_seen").get<std::int64_t>();
        meta.rng_state_json = h.json.at("rng_state").dump();
        for (const auto& [name, entry] : h.json.at("tensors").items()) {
            CheckpointMeta::TensorEntry te;
            te.name = name;
            te.dims = entry.at("dims").get<Shape>();
            te.offset = entry.at("offset").get<std::int64_t>();
            meta.tensors.push_back(std::move(te));
            if (name.starts_with("opt.")) meta.has_optimizer = true;
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("\"" + path + "\": bad checkpoint header: " + e.what());
    }
    return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerModel<float>& model,
                     const OptimizerState<float>* opt, std::int64_t step,
                     std::int64_t tokens_seen, const std::string& rng_state_json) {
    const auto table = collect_tensors(model, opt);

    nlohmann::json header;
    header["config"] = nlohmann::json::parse(model_config_to_json(model.config));
    header["step"] = step;
    header["tokens_seen"] = tokens_seen;
    if (rng_state_json.empty()) {
        header["rng_state"] = nlohmann::json::object();
    } else {
        try {
            header["rng_state"] = nlohmann::json::parse(rng_state_json);
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument(std::string("save_checkpoint: rng state is not JSON: ") +
                                        e.what());
        }
    }

    std::uint64_t offset = 0;  // relative to the start of the payload region
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, ref] : table) {
        nlohmann::json entry;
        entry["dtype"] = kDtypeF32;
        entry["dims"] = ref.dims;
        entry["offset"] = offset;
        tensors[name] = std::move(entry);
        offset += static_cast<std::uint64_t>(ref.numel) * sizeof(float);
    }
    header["tensors"] = std::move(tensors);
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write \"" + path + "\"");
    out.write(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, ref] : table) {
        (void)name;
        out.write(reinterpret_cast<const char*>(ref.data),
                  static_cast<std::streamsize>(ref.numel) * sizeof(float));
    }
    if (!out) throw DataError("short write to \"" + path + "\"");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open \"" + path + "\"");
    const Header header = read_header(in, path);

    LoadedCheckpoint loaded;
    loaded.meta = meta_from_header(header, path);
    loaded.model = TransformerModel<float>::build(loaded.meta.config);
    loaded.opt.step = loaded.meta.step;

    in.seekg(0, std::ios::end);
    const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
    if (file_size < header.payload_start) throw DataError("\"" + path + "\": truncated payload");
    const std::uint64_t payload_size = file_size - header.payload_start;

    const nlohmann::json& tensors = header.json.at("tensors");
    auto read_into = [&](const std::string& name, float* dst, const Shape& dims,
                         std::int64_t numel) {
        if (!tensors.contains(name)) {
            throw DataError("\"" + path + "\": checkpoint lacks tensor \"" + name + "\"");
        }
        const nlohmann::json& entry = tensors.at(name);
        std::uint64_t offset = 0;
        Shape dims_in_file;
        try {
            if (entry.at("dtype").get<int>() != kDtypeF32) {
                throw DataError("\"" + path + "\": tensor \"" + name +
                                "\" has an unsupported dtype");
            }
            dims_in_file = entry.at("dims").get<Shape>();
            offset = entry.at("offset").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError("\"" + path + "\": bad table entry for \"" + name + "\": " +
                            e.what());
        }
        if (dims_in_file != dims) {
            throw DataError("\"" + path + "\": tensor \"" + name + "\" has shape " +
                            shape_str(dims_in_file) + ", expected " + shape_str(dims));
        }
        const std::uint64_t bytes = static_cast<std::uint64_t>(numel) * sizeof(float);
        if (offset + bytes > payload_size) {
            throw DataError("\"" + path + "\": tensor \"" + name + "\" overruns the file");
        }
        in.seekg(static_cast<std::streamoff>(header.payload_start + offset));
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
        if (!in) throw DataError("\"" + path + "\": truncated tensor \"" + name + "\"");
    };

    const auto params = loaded.model.params();
    std::size_t consumed = 0;
    for (const auto& p : params) {
        Tensor<float> t = p.tensor;
        read_into(p.name, t.data().data(), t.shape(), t.numel());
        ++consumed;
    }
    if (loaded.meta.has_optimizer) {
        loaded.opt.slots.reserve(params.size());
        for (const auto& p : params) {
            OptimizerState<float>::Slot slot;
            slot.m = Buffer<float>(p.tensor.numel());
            slot.v = Buffer<float>(p.tensor.numel());
            read_into("opt.m." + p.name, slot.m.data(), p.tensor.shape(), p.tensor.numel());
            read_into("opt.v." + p.name, slot.v.data(), p.tensor.shape(), p.tensor.numel());
            consumed += 2;
            loaded.opt.slots.push_back(std::move(slot));
        }
    }
    if (consumed != header.json.at("tensors").size()) {
        for (const auto& [name, entry] : header.json.at("tensors").items()) {
            (void)entry;
            const bool known =
                std::any_of(params.begin(), params.end(), [&](const NamedParam<float>& p) {
                    return p.name == name || name == "opt.m." + p.name ||
                           name == "opt.v." + p.name;
                });
            if (!known) {
                throw DataError("\"" + path + "\": unexpected tensor \"" + name + "\"");
            }
        }
        throw DataError("\"" + path + "\": incomplete optimizer moment set");
    }
    return loaded;
}

CheckpointMeta inspect_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open \"" + path + "\"");
    const Header header = read_header(in, path);
    return meta_from_header(header, path);
}

}  // namespace mblm
