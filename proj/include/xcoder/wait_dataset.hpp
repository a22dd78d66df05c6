#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xcoder/toy_model.hpp"

namespace xcoder {

struct Rollout {
  std::string source_id;
  std::vector<int> tokens;
  std::string text;  // always equals decode(tokens)
};

// Builds a rollout from text (canonical greedy encoding).
Rollout make_rollout(const ToyTokenizer& tok, const std::string& source_id,
                     const std::string& text);
// Builds a rollout from explicit token ids; text is derived.
Rollout rollout_from_tokens(const ToyTokenizer& tok,
                            const std::string& source_id,
                            std::vector<int> tokens);

enum class PrefixScheme { SentenceStart, RolloutStart };

const char* prefix_scheme_name(PrefixScheme s);

struct WaitPrefix {
  std::string source_id;
  std::size_t wait_position = 0;  // token index of the wait occurrence
  std::vector<int> tokens;        // ends at the token right before the wait
  std::string text;               // decoded prefix
  PrefixScheme scheme = PrefixScheme::RolloutStart;
};

// All token positions whose id is in the wait set, ascending.
std::vector<std::size_t> find_wait_positions(const Rollout& rollout,
                                             const WaitSet& wait);

// Prefix of everything before the first wait occurrence; nullopt when the
// rollout has no wait token or the prefix would be empty.
std::optional<WaitPrefix> truncate_before_first_wait(const Rollout& rollout,
                                                     const WaitSet& wait,
                                                     const ToyTokenizer& tok);

// One prefix per wait occurrence with a nonempty preceding stretch, running
// from the most recent sentence boundary (a '.', '!' or '?' followed by
// whitespace in the decoded text, mapped back to token space) to the token
// before the wait. Occurrences whose sentence starts at the wait itself are
// dropped.
std::vector<WaitPrefix> extract_sentence_prefixes(const Rollout& rollout,
                                                  const WaitSet& wait,
                                                  const ToyTokenizer& tok);

// JSONL containers: one rollout / prefix record per line.
std::vector<Rollout> read_rollouts_jsonl(const std::filesystem::path& path,
                                         const ToyTokenizer& tok);
void write_rollouts_jsonl(const std::filesystem::path& path,
                          const std::vector<Rollout>& rollouts);
void write_prefixes_jsonl(const std::filesystem::path& path,
                          const std::vector<WaitPrefix>& prefixes);
std::vector<WaitPrefix> read_prefixes_jsonl(const std::filesystem::path& path);

}  // namespace xcoder
