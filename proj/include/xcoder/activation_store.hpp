#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xcoder/numerics.hpp"

namespace xcoder {

// On-disk layout of a paired activation shard ("XCAS"):
//   magic[4] | format_version u32 | d_model u32 | n_tokens u64 | dtype u32
//   base block      n_tokens * d_model f32 LE
//   reasoning block n_tokens * d_model f32 LE
// Token metadata lives in a JSONL sidecar next to the shard.

inline constexpr char kShardMagic[4] = {'X', 'C', 'A', 'S'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::uint32_t kDtypeF32LE = 1;
inline constexpr std::size_t kShardHeaderBytes = 4 + 4 + 4 + 8 + 4;

struct ShardHeader {
  std::uint32_t format_version = kShardVersion;
  std::uint32_t d_model = 0;
  std::uint64_t n_tokens = 0;
  std::uint32_t dtype_code = kDtypeF32LE;
};

struct TokenMetadata {
  std::uint64_t sequence_id = 0;
  std::uint64_t position = 0;      // position within the sequence
  std::uint32_t token_id = 0;
  std::string token_text;
};

struct ActivationShard {
  ShardHeader header;
  Tensor2D base;       // n_tokens x d_model, model B residual stream
  Tensor2D reasoning;  // n_tokens x d_model, model R, row-aligned with base
  std::vector<TokenMetadata> metadata;
};

std::filesystem::path sidecar_path(const std::filesystem::path& shard_path);

// Writes shard + sidecar. Requires base/reasoning blocks of equal shape and
// one metadata record per row. Round-trips bit-exactly through read_shard.
void write_shard(const std::filesystem::path& path, const Tensor2D& base,
                 const Tensor2D& reasoning,
                 const std::vector<TokenMetadata>& metadata);

ShardHeader read_shard_header(const std::filesystem::path& path);
ActivationShard read_shard(const std::filesystem::path& path,
                           bool load_metadata = true);
// Reads rows [row_begin, row_end) of one block without loading the rest.
Tensor2D read_shard_rows(const std::filesystem::path& path, bool reasoning,
                         std::uint64_t row_begin, std::uint64_t row_end);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::string sha256;
  std::uint64_t n_tokens = 0;
};

struct DatasetManifest {
  std::uint32_t d_model = 0;
  std::int32_t hook_layer = -1;
  std::string base_model;
  std::string reasoning_model;
  std::uint64_t total_tokens = 0;
  std::vector<ManifestEntry> shards;
  std::filesystem::path root;  // directory of the manifest file; not serialized

  std::filesystem::path shard_path(std::size_t i) const {
    return root / shards[i].path;
  }
};

// Hashes and validates the given shards (equal d_model, readable headers).
DatasetManifest build_manifest(const std::vector<std::filesystem::path>& shards,
                               std::int32_t hook_layer,
                               const std::string& base_model,
                               const std::string& reasoning_model,
                               const std::filesystem::path& root);

void write_manifest(const std::filesystem::path& path,
                    const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Re-hashes every shard and checks headers against the manifest.
void verify_manifest(const DatasetManifest& manifest);

// Whole dataset resident in memory; fine at desk scale.
struct PairedActivations {
  std::uint32_t d_model = 0;
  Tensor2D base;
  Tensor2D reasoning;
  std::vector<TokenMetadata> metadata;

  std::uint64_t n_tokens() const { return base.rows; }
};

PairedActivations load_dataset(const DatasetManifest& manifest,
                               bool with_metadata = true);

struct Batch {
  Tensor2D base;
  Tensor2D reasoning;
  std::vector<std::uint64_t> indices;  // dataset-global token indices
};

// One epoch over [begin, end): manifest order without an rng, a seeded
// permutation with one. Every token appears in exactly one batch.
class BatchStream {
 public:
  BatchStream(const PairedActivations& data, std::size_t batch_size,
              RngState* rng, std::uint64_t begin = 0,
              std::uint64_t end = UINT64_MAX);

  std::optional<Batch> next();

 private:
  const PairedActivations& data_;
  std::size_t batch_size_;
  std::vector<std::uint64_t> order_;
  std::size_t cursor_ = 0;
};

BatchStream iterate_batches(const PairedActivations& data,
                            std::size_t batch_size, RngState* rng = nullptr);

}  // namespace xcoder
