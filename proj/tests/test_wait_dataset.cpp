#include <doctest.h>

#include <optional>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "xcoder/io_util.hpp"
#include "xcoder/wait_dataset.hpp"

using namespace xcoder;

namespace {

struct FixtureCase {
  std::string text;
  std::size_t wait_count;
  std::optional<std::string> truncate_text;  // nullopt = no prefix emitted
  std::vector<std::string> sentence_prefixes;
};

// Hand-worked expectations. Token spans follow greedy longest-match
// encoding; the space before a wait belongs to the wait token.
const std::vector<FixtureCase>& fixture_corpus() {
  static const std::vector<FixtureCase> cases = {
      {"I think x=2. Wait, no", 1, "I think x=2.", {}},
      {"Wait wait", 2, std::nullopt, {"Wait"}},
      {"no waits here", 1, "no", {"no"}},
      {"nothing to see.", 0, std::nullopt, {}},
      {"One. Two wait three", 1, "One. Two", {" Two"}},
      {"Hi.Wait now", 1, "Hi.", {"Hi."}},
      {"a b wait. c wait", 2, "a b", {"a b", " c"}},
      {" wait starts", 1, std::nullopt, {}},
      {"end with wait", 1, "end with", {"end with"}},
      {"Stop! Wait here", 1, "Stop!", {}},
      {"Is it? yes wait", 1, "Is it? yes", {" yes"}},
      {"wait", 1, std::nullopt, {}},
      {"Waiting games", 1, std::nullopt, {}},
      {"We wait and wait and wait", 3, "We",
       {"We", "We wait and", "We wait and wait and"}},
      {"One two. Three wait? Four wait", 2, "One two. Three",
       {" Three", " Four"}},
      {"A.B. wait", 1, "A.B.", {}},
      {"Now then. wait more", 1, "Now then.", {}},
      {"five wait4 wait", 2, "five", {"five", "five wait4"}},
      {"Mixed. Case Wait and wait here.", 2, "Mixed. Case",
       {" Case", " Case Wait and"}},
      {"", 0, std::nullopt, {}},
  };
  return cases;
}

// Character-level scan oracle: leftmost, longest-form-first matching of the
// wait surface forms over the decoded text, mapped back to token indices.
std::vector<std::size_t> wait_positions_regex_oracle(const Rollout& r,
                                                     const ToyTokenizer& tok) {
  const std::vector<std::string> forms = {" Wait", " wait", "Wait", "wait"};
  std::vector<std::size_t> char_hits;
  std::size_t i = 0;
  while (i < r.text.size()) {
    bool matched = false;
    for (const auto& f : forms) {
      if (r.text.compare(i, f.size(), f) == 0) {
        char_hits.push_back(i);
        i += f.size();
        matched = true;
        break;
      }
    }
    if (!matched) ++i;
  }
  // Map char offsets to token positions via cumulative token lengths.
  std::vector<std::size_t> starts(r.tokens.size() + 1, 0);
  for (std::size_t t = 0; t < r.tokens.size(); ++t) {
    starts[t + 1] = starts[t] + tok.token_text(r.tokens[t]).size();
  }
  std::vector<std::size_t> out;
  for (const std::size_t ch : char_hits) {
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
      if (starts[t] == ch) {
        out.push_back(t);
        break;
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("wait_dataset") {

TEST_CASE("find positions basic cases") {
  ToyTokenizer tok;
  const WaitSet w = WaitSet::from_tokenizer(tok);
  CHECK(find_wait_positions(make_rollout(tok, "r0", "no such token."), w)
            .empty());
  const auto two = make_rollout(tok, "r1", "Wait wait");
  const auto positions = find_wait_positions(two, w);
  CHECK(positions == std::vector<std::size_t>{0, 1});
}

TEST_CASE("fixture corpus matches hand-built expectations exactly") {
  ToyTokenizer tok;
  const WaitSet w = WaitSet::from_tokenizer(tok);
  const auto& corpus = fixture_corpus();
  REQUIRE(corpus.size() == 20);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& c = corpus[i];
    CAPTURE(c.text);
    const Rollout r = make_rollout(tok, "fx" + std::to_string(i), c.text);
    CHECK(r.text == tok.decode(r.tokens));

    const auto positions = find_wait_positions(r, w);
    CHECK(positions.size() == c.wait_count);
    for (const auto p : positions) CHECK(w.contains(r.tokens[p]));

    const auto trunc = truncate_before_first_wait(r, w, tok);
    if (c.truncate_text.has_value()) {
      REQUIRE(trunc.has_value());
      CHECK(trunc->text == *c.truncate_text);
      CHECK(trunc->scheme == PrefixScheme::RolloutStart);
      CHECK(trunc->wait_position == positions.front());
    } else {
      CHECK_FALSE(trunc.has_value());
    }

    const auto prefixes = extract_sentence_prefixes(r, w, tok);
    REQUIRE(prefixes.size() == c.sentence_prefixes.size());
    for (std::size_t j = 0; j < prefixes.size(); ++j) {
      CHECK(prefixes[j].text == c.sentence_prefixes[j]);
      CHECK(prefixes[j].scheme == PrefixScheme::SentenceStart);
      CHECK_FALSE(prefixes[j].tokens.empty());
    }
  }
}

TEST_CASE("fixture corpus positions match the character-scan oracle") {
  ToyTokenizer tok;
  const WaitSet w = WaitSet::from_tokenizer(tok);
  for (const auto& c : fixture_corpus()) {
    const Rollout r = make_rollout(tok, "rx", c.text);
    CHECK(find_wait_positions(r, w) == wait_positions_regex_oracle(r, tok));
  }
}

TEST_CASE("prefix plus wait token is a contiguous subsequence of the source") {
  ToyTokenizer tok;
  const WaitSet w = WaitSet::from_tokenizer(tok);
  for (const auto& c : fixture_corpus()) {
    const Rollout r = make_rollout(tok, "rx", c.text);
    auto check_prefix = [&](const WaitPrefix& p) {
      REQUIRE(p.wait_position < r.tokens.size());
      CHECK(w.contains(r.tokens[p.wait_position]));
      REQUIRE(p.tokens.size() <= p.wait_position);
      const std::size_t start = p.wait_position - p.tokens.size();
      for (std::size_t j = 0; j < p.tokens.size(); ++j) {
        CHECK(p.tokens[j] == r.tokens[start + j]);
      }
    };
    if (auto t = truncate_before_first_wait(r, w, tok)) check_prefix(*t);
    for (const auto& p : extract_sentence_prefixes(r, w, tok)) check_prefix(p);
  }
}

TEST_CASE("adding a wait occurrence never decreases prefix count") {
  ToyTokenizer tok;
  const WaitSet w = WaitSet::from_tokenizer(tok);
  RngState rng(7);
  const std::vector<std::string> words = {"so", "then", "x=1", "done", "Yes"};
  for (int trial = 0; trial < 30; ++trial) {
    std::string text;
    for (std::size_t i = 0; i < 4 + rng.uniform_index(5); ++i) {
      if (!text.empty()) text += ' ';
      text += words[rng.uniform_index(words.size())];
      if (rng.uniform() < 0.3) text += '.';
    }
    const Rollout base = make_rollout(tok, "a", text);
    const Rollout more = make_rollout(tok, "b", text + " wait");
    CHECK(extract_sentence_prefixes(more, w, tok).size() >=
          extract_sentence_prefixes(base, w, tok).size());
    CHECK(find_wait_positions(more, w).size() ==
          find_wait_positions(base, w).size() + 1);
  }
}

TEST_CASE("rollout jsonl round trip and validation") {
  testing::TempDir tmp("waitds");
  ToyTokenizer tok;
  std::vector<Rollout> rollouts = {
      make_rollout(tok, "a", "One. Two wait"),
      make_rollout(tok, "b", "Wait wait"),
  };
  const auto path = tmp / "rollouts.jsonl";
  write_rollouts_jsonl(path, rollouts);
  const auto loaded = read_rollouts_jsonl(path, tok);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].tokens == rollouts[0].tokens);
  CHECK(loaded[1].text == "Wait wait");

  // text-only records are encoded on load
  write_text_file(path, "{\"source_id\":\"c\",\"text\":\"ab wait\"}\n");
  const auto text_only = read_rollouts_jsonl(path, tok);
  REQUIRE(text_only.size() == 1);
  CHECK(text_only[0].tokens == tok.encode("ab wait"));

  // mismatched text/tokens are rejected
  write_text_file(path, "{\"source_id\":\"d\",\"text\":\"zz\",\"tokens\":[0]}\n");
  CHECK_THROWS_AS(read_rollouts_jsonl(path, tok), ValidationError);
}

TEST_CASE("prefix jsonl round trip") {
  testing::TempDir tmp("waitds_prefix");
  ToyTokenizer tok;
  const WaitSet w = WaitSet::from_tokenizer(tok);
  const Rollout r = make_rollout(tok, "src", "One two. Three wait? Four wait");
  const auto prefixes = extract_sentence_prefixes(r, w, tok);
  const auto path = tmp / "prefixes.jsonl";
  write_prefixes_jsonl(path, prefixes);
  const auto loaded = read_prefixes_jsonl(path);
  REQUIRE(loaded.size() == prefixes.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].tokens == prefixes[i].tokens);
    CHECK(loaded[i].text == prefixes[i].text);
    CHECK(loaded[i].wait_position == prefixes[i].wait_position);
    CHECK(loaded[i].scheme == prefixes[i].scheme);
  }
}

}  // TEST_SUITE
