#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mblm/tensor.hpp"

namespace mblm {

// -------------------- tokenizer --------------------

enum class TokenizerKind { byte_level, external_vocab };

std::string_view to_string(TokenizerKind kind);
TokenizerKind tokenizer_kind_from_string(std::string_view s);

/// byte_level maps byte b to id b+3 behind three specials (bos 0, eos 1,
/// pad 2) for a vocab of 259; it is self-contained and lossless on any byte
/// string. external_vocab wraps a vocabulary loaded from disk and encodes by
/// greedy longest match; it stands in for a pretrained subword tokenizer
/// without retraining one.
struct TokenizerSpec {
    TokenizerKind kind = TokenizerKind::byte_level;
    std::int64_t vocab_size = 259;
    TokenId bos = 0;
    TokenId eos = 1;
    TokenId pad = 2;
    std::vector<std::string> entries;  // external_vocab only: token string per id

    static TokenizerSpec bytes();
    static TokenizerSpec external(std::vector<std::string> entries);
    /// Reads a JSON array of token strings; ids 0..2 are the specials.
    static TokenizerSpec load_external(const std::string& path);
};

std::vector<TokenId> encode(const TokenizerSpec& spec, std::string_view text);
std::string decode(const TokenizerSpec& spec, std::span<const TokenId> ids);

// -------------------- packing --------------------

/// One tokenized input document, before packing.
struct Document {
    std::string source;
    std::vector<TokenId> token_ids;
};

/// A fixed-width training sample (2049 ids at full scale: 2048 inputs plus
/// one trailing target column).
struct PackedSample {
    std::vector<TokenId> token_ids;
    std::string source;
};

/// Concatenates documents per source with a single eos after each one, then
/// chunks each source stream into consecutive sample_len-wide samples. The
/// trailing partial chunk is dropped. Sources are emitted in order of first
/// appearance; order within a source is preserved.
std::vector<PackedSample> pack(const TokenizerSpec& spec, const std::vector<Document>& docs,
                               std::int64_t sample_len = 2049);

// -------------------- segment files --------------------

constexpr std::int64_t kDefaultSegments = 360;

struct DataSegment {
    std::vector<PackedSample> samples;
    std::int64_t segment_index = 0;
};

struct ManifestEntry {
    std::string file;  // relative to the manifest's directory
    std::int64_t n_samples = 0;
    std::string sha256;
};

struct Manifest {
    std::vector<ManifestEntry> segments;
    std::string tokenizer_kind;
    std::int64_t vocab_size = 0;
};

/// Distributes samples round-robin into n_segments jsonl files under
/// directory (sample i lands in segment i mod n_segments), writes
/// manifest.json with a sha-256 per segment, and returns the manifest.
/// Every segment must end up non-empty, so n_segments cannot exceed the
/// sample count.
Manifest write_segments(const std::vector<PackedSample>& samples, std::int64_t n_segments,
                        const std::string& directory, const TokenizerSpec& spec);

DataSegment load_segment(const std::string& path);
Manifest load_manifest(const std::string& path);

/// Loads every segment listed in directory/manifest.json, verifying the
/// checksums and that all ids fall below the manifest's vocab_size. The
/// round-robin split is undone, so samples come back in the order they
/// were passed to write_segments.
std::vector<PackedSample> load_dataset(const std::string& directory);

// -------------------- batching --------------------

/// Deterministic epoch shuffler over packed samples. Each epoch draws a
/// fresh permutation from (seed, epoch); only full batches are yielded, so
/// up to batch_size - 1 trailing samples sit out any given epoch. The
/// cursor is everything needed to resume the stream exactly.
class BatchIterator {
public:
    struct Batch {
        std::vector<TokenId> ids;  // row-major [rows, cols]
        std::int64_t rows = 0;
        std::int64_t cols = 0;
    };

    struct Cursor {
        std::uint64_t seed = 0;
        std::int64_t epoch = 0;
        std::int64_t index = 0;  // next batch within the epoch
    };

    BatchIterator(std::vector<PackedSample> samples, std::int64_t batch_size, std::uint64_t seed);

    Batch next();
    std::int64_t batches_per_epoch() const { return n_samples() / batch_size_; }
    std::int64_t n_samples() const { return static_cast<std::int64_t>(samples_.size()); }
    std::int64_t sample_width() const { return width_; }
    std::int64_t batch_size() const { return batch_size_; }

    Cursor cursor() const { return cursor_; }
    void seek(const Cursor& c);

private:
    void reshuffle();

    std::vector<PackedSample> samples_;
    std::vector<std::size_t> order_;
    std::int64_t batch_size_ = 0;
    std::int64_t width_ = 0;
    Cursor cursor_;
};

std::string cursor_to_json(const BatchIterator::Cursor& c);
BatchIterator::Cursor cursor_from_json(const std::string& text);

}  // namespace mblm
