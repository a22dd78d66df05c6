#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "xcoder/activation_store.hpp"
#include "xcoder/crosscoder.hpp"

namespace xcoder {

struct MaxActEntry {
  std::size_t feature = 0;
  real activation = 0;  // strictly positive
  std::uint64_t sequence_id = 0;
  std::uint64_t position = 0;
  std::vector<std::uint32_t> window_tokens;  // context around the position
  std::vector<real> window_activations;      // this feature, same window
  std::size_t window_mark = 0;               // activating token's window slot
};

struct MaxActIndex {
  std::size_t top_n = 100;
  std::size_t context_radius = 32;
  std::vector<std::vector<MaxActEntry>> per_feature;  // descending activation
};

// Exact top-n per feature over every token in the manifest, streamed shard
// by shard with per-feature bounded heaps. Ordering is by activation
// descending with ties broken toward the lower (sequence, position); only
// strictly positive activations qualify. Shards may be scanned in parallel;
// results merge in manifest order, so the index does not depend on thread
// count.
MaxActIndex scan_max_activations(const DatasetManifest& manifest,
                                 const CrosscoderParams& cc,
                                 std::size_t top_n = 100,
                                 std::size_t context_radius = 32,
                                 std::size_t n_threads = 1);

// (sequence, position) -> metadata record lookup.
class MetadataIndex {
 public:
  explicit MetadataIndex(const std::vector<TokenMetadata>& records);
  const TokenMetadata* find(std::uint64_t seq, std::uint64_t pos) const;

 private:
  std::unordered_map<std::uint64_t, std::unordered_map<std::uint64_t,
                                                       const TokenMetadata*>>
      by_seq_;
};

// Plain-text snippet: header line, the window text with the activating
// token marked, and the per-token activation values.
std::string render_snippet(const MaxActEntry& entry,
                           const MetadataIndex& metadata);

// JSONL export, one entry per line, feature-major in index order.
std::string maxact_index_jsonl(const MaxActIndex& index);

}  // namespace xcoder
