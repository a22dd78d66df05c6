#include "xcoder/wait_dataset.hpp"

#include <json.hpp>

#include <sstream>

#include "xcoder/io_util.hpp"

namespace xcoder {

using nlohmann::json;

Rollout make_rollout(const ToyTokenizer& tok, const std::string& source_id,
                     const std::string& text) {
  Rollout r;
  r.source_id = source_id;
  r.tokens = tok.encode(text);
  r.text = text;
  return r;
}

Rollout rollout_from_tokens(const ToyTokenizer& tok,
                            const std::string& source_id,
                            std::vector<int> tokens) {
  Rollout r;
  r.source_id = source_id;
  r.text = tok.decode(tokens);
  r.tokens = std::move(tokens);
  return r;
}

const char* prefix_scheme_name(PrefixScheme s) {
  return s == PrefixScheme::SentenceStart ? "sentence_start" : "rollout_start";
}

std::vector<std::size_t> find_wait_positions(const Rollout& rollout,
                                             const WaitSet& wait) {
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < rollout.tokens.size(); ++i) {
    if (wait.contains(rollout.tokens[i])) positions.push_back(i);
  }
  return positions;
}

std::optional<WaitPrefix> truncate_before_first_wait(const Rollout& rollout,
                                                     const WaitSet& wait,
                                                     const ToyTokenizer& tok) {
  const auto positions = find_wait_positions(rollout, wait);
  if (positions.empty() || positions.front() == 0) return std::nullopt;
  WaitPrefix prefix;
  prefix.source_id = rollout.source_id;
  prefix.wait_position = positions.front();
  prefix.tokens.assign(rollout.tokens.begin(),
                       rollout.tokens.begin() +
                           static_cast<std::ptrdiff_t>(positions.front()));
  prefix.text = tok.decode(prefix.tokens);
  prefix.scheme = PrefixScheme::RolloutStart;
  return prefix;
}

namespace {

bool is_sentence_punct(char c) { return c == '.' || c == '!' || c == '?'; }
bool is_whitespace(char c) { return c == ' ' || c == '\n' || c == '\t'; }

}  // namespace

std::vector<WaitPrefix> extract_sentence_prefixes(const Rollout& rollout,
                                                  const WaitSet& wait,
                                                  const ToyTokenizer& tok) {
  // Character span start of every token.
  std::vector<std::size_t> starts(rollout.tokens.size() + 1, 0);
  for (std::size_t i = 0; i < rollout.tokens.size(); ++i) {
    starts[i + 1] = starts[i] + tok.token_text(rollout.tokens[i]).size();
  }
  // Sentence-start characters: the position right after each boundary punct.
  std::vector<std::size_t> sentence_start_chars;
  for (std::size_t c = 0; c + 1 < rollout.text.size(); ++c) {
    if (is_sentence_punct(rollout.text[c]) && is_whitespace(rollout.text[c + 1])) {
      sentence_start_chars.push_back(c + 1);
    }
  }
  auto token_at_char = [&](std::size_t ch) {
    // Unique token t with starts[t] <= ch < starts[t+1].
    std::size_t lo = 0, hi = rollout.tokens.size();
    while (lo + 1 < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (starts[mid] <= ch) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    return lo;
  };

  std::vector<WaitPrefix> out;
  for (const std::size_t p : find_wait_positions(rollout, wait)) {
    const std::size_t wait_char = starts[p];
    std::size_t start_char = 0;
    for (const std::size_t sc : sentence_start_chars) {
      if (sc <= wait_char) {
        start_char = sc;
      } else {
        break;
      }
    }
    const std::size_t s = rollout.tokens.empty() ? 0 : token_at_char(start_char);
    if (s >= p) continue;  // no preceding stretch within the sentence
    WaitPrefix prefix;
    prefix.source_id = rollout.source_id;
    prefix.wait_position = p;
    prefix.tokens.assign(rollout.tokens.begin() + static_cast<std::ptrdiff_t>(s),
                         rollout.tokens.begin() + static_cast<std::ptrdiff_t>(p));
    prefix.text = tok.decode(prefix.tokens);
    prefix.scheme = PrefixScheme::SentenceStart;
    out.push_back(std::move(prefix));
  }
  return out;
}

std::vector<Rollout> read_rollouts_jsonl(const std::filesystem::path& path,
                                         const ToyTokenizer& tok) {
  std::istringstream lines(read_text_file(path));
  std::vector<Rollout> rollouts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("bad rollout record at " + path.string() + ":" +
                        std::to_string(line_no) + ": " + e.what());
    }
    const std::string id = rec.contains("source_id")
                               ? rec.at("source_id").get<std::string>()
                               : std::to_string(line_no - 1);
    if (rec.contains("tokens")) {
      Rollout r =
          rollout_from_tokens(tok, id, rec.at("tokens").get<std::vector<int>>());
      if (rec.contains("text") && rec.at("text").get<std::string>() != r.text) {
        throw ValidationError("rollout text does not match its tokens at " +
                              path.string() + ":" + std::to_string(line_no));
      }
      rollouts.push_back(std::move(r));
    } else if (rec.contains("text")) {
      rollouts.push_back(make_rollout(tok, id, rec.at("text").get<std::string>()));
    } else {
      throw FormatError("rollout record needs text or tokens at " +
                        path.string() + ":" + std::to_string(line_no));
    }
  }
  return rollouts;
}

void write_rollouts_jsonl(const std::filesystem::path& path,
                          const std::vector<Rollout>& rollouts) {
  std::ostringstream out;
  for (const auto& r : rollouts) {
    out << json{{"source_id", r.source_id},
                {"text", r.text},
                {"tokens", r.tokens}}
               .dump()
        << '\n';
  }
  write_text_file(path, out.str());
}

void write_prefixes_jsonl(const std::filesystem::path& path,
                          const std::vector<WaitPrefix>& prefixes) {
  std::ostringstream out;
  for (const auto& p : prefixes) {
    out << json{{"source_id", p.source_id},
                {"wait_position", p.wait_position},
                {"tokens", p.tokens},
                {"text", p.text},
                {"scheme", prefix_scheme_name(p.scheme)}}
               .dump()
        << '\n';
  }
  write_text_file(path, out.str());
}

std::vector<WaitPrefix> read_prefixes_jsonl(const std::filesystem::path& path) {
  std::istringstream lines(read_text_file(path));
  std::vector<WaitPrefix> prefixes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      WaitPrefix p;
      p.source_id = rec.at("source_id").get<std::string>();
      p.wait_position = rec.at("wait_position").get<std::size_t>();
      p.tokens = rec.at("tokens").get<std::vector<int>>();
      p.text = rec.at("text").get<std::string>();
      p.scheme = rec.at("scheme").get<std::string>() == "sentence_start"
                     ? PrefixScheme::SentenceStart
                     : PrefixScheme::RolloutStart;
      prefixes.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw FormatError("bad prefix record at " + path.string() + ":" +
                        std::to_string(line_no) + ": " + e.what());
    }
  }
  return prefixes;
}

}  // namespace xcoder
