#include "xcoder/activation_store.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <sstream>

#include "xcoder/io_util.hpp"

namespace xcoder {

using nlohmann::json;

std::filesystem::path sidecar_path(const std::filesystem::path& shard_path) {
  std::filesystem::path p = shard_path;
  p += ".meta.jsonl";
  return p;
}

namespace {

void write_header(std::ostream& out, const ShardHeader& h) {
  out.write(kShardMagic, 4);
  write_le<std::uint32_t>(out, h.format_version);
  write_le<std::uint32_t>(out, h.d_model);
  write_le<std::uint64_t>(out, h.n_tokens);
  write_le<std::uint32_t>(out, h.dtype_code);
}

ShardHeader parse_header(std::istream& in, const std::string& name) {
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kShardMagic, 4) != 0) {
    throw FormatError("not an activation shard (bad magic): " + name);
  }
  ShardHeader h;
  h.format_version = read_le<std::uint32_t>(in);
  h.d_model = read_le<std::uint32_t>(in);
  h.n_tokens = read_le<std::uint64_t>(in);
  h.dtype_code = read_le<std::uint32_t>(in);
  if (h.format_version != kShardVersion) {
    throw FormatError("unsupported shard version " +
                      std::to_string(h.format_version) + ": " + name);
  }
  if (h.dtype_code != kDtypeF32LE) {
    throw FormatError("unsupported shard dtype " +
                      std::to_string(h.dtype_code) + ": " + name);
  }
  if (h.d_model == 0) {
    throw FormatError("shard declares d_model = 0: " + name);
  }
  return h;
}

json metadata_to_json(const TokenMetadata& m) {
  return json{{"seq", m.sequence_id},
              {"pos", m.position},
              {"token", m.token_id},
              {"text", m.token_text}};
}

TokenMetadata metadata_from_json(const json& j) {
  TokenMetadata m;
  m.sequence_id = j.at("seq").get<std::uint64_t>();
  m.position = j.at("pos").get<std::uint64_t>();
  m.token_id = j.at("token").get<std::uint32_t>();
  m.token_text = j.at("text").get<std::string>();
  return m;
}

}  // namespace

void write_shard(const std::filesystem::path& path, const Tensor2D& base,
                 const Tensor2D& reasoning,
                 const std::vector<TokenMetadata>& metadata) {
  if (base.rows != reasoning.rows || base.cols != reasoning.cols) {
    throw InvalidInputError("write_shard: base/reasoning blocks differ in shape");
  }
  if (base.cols == 0) {
    throw InvalidInputError("write_shard: d_model must be positive");
  }
  if (metadata.size() != base.rows) {
    throw InvalidInputError("write_shard: one metadata record per token required");
  }

  ShardHeader h;
  h.d_model = static_cast<std::uint32_t>(base.cols);
  h.n_tokens = base.rows;

  auto out = open_binary_out(path);
  write_header(out, h);
  write_f32_block(out, base.data);
  write_f32_block(out, reasoning.data);
  if (!out) throw StorageError("write failed: " + path.string());
  out.close();

  std::ostringstream side;
  for (const auto& m : metadata) {
    side << metadata_to_json(m).dump() << '\n';
  }
  write_text_file(sidecar_path(path), side.str());
}

ShardHeader read_shard_header(const std::filesystem::path& path) {
  auto in = open_binary_in(path);
  return parse_header(in, path.string());
}

ActivationShard read_shard(const std::filesystem::path& path,
                           bool load_metadata) {
  auto in = open_binary_in(path);
  ActivationShard shard;
  shard.header = parse_header(in, path.string());
  const std::size_t n = static_cast<std::size_t>(shard.header.n_tokens);
  const std::size_t d = shard.header.d_model;

  shard.base = Tensor2D(n, d);
  shard.reasoning = Tensor2D(n, d);
  try {
    read_f32_block(in, n * d, shard.base.data);
    read_f32_block(in, n * d, shard.reasoning.data);
  } catch (const CorruptionError& e) {
    throw CorruptionError(std::string(e.what()) + " in " + path.string());
  }
  require_finite(shard.base.data, "shard base block");
  require_finite(shard.reasoning.data, "shard reasoning block");

  if (load_metadata) {
    const auto side = sidecar_path(path);
    std::istringstream lines(read_text_file(side));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      try {
        shard.metadata.push_back(metadata_from_json(json::parse(line)));
      } catch (const json::exception& e) {
        throw FormatError("bad sidecar record in " + side.string() + ": " +
                          e.what());
      }
    }
    if (shard.metadata.size() != n) {
      throw ValidationError("sidecar record count " +
                            std::to_string(shard.metadata.size()) +
                            " != n_tokens " + std::to_string(n) + " for " +
                            path.string());
    }
  }
  return shard;
}

Tensor2D read_shard_rows(const std::filesystem::path& path, bool reasoning,
                         std::uint64_t row_begin, std::uint64_t row_end) {
  auto in = open_binary_in(path);
  const ShardHeader h = parse_header(in, path.string());
  if (row_end > h.n_tokens || row_begin > row_end) {
    throw InvalidInputError("read_shard_rows: row range out of bounds");
  }
  const std::uint64_t d = h.d_model;
  std::uint64_t offset = kShardHeaderBytes + row_begin * d * sizeof(float);
  if (reasoning) offset += h.n_tokens * d * sizeof(float);
  in.seekg(static_cast<std::streamoff>(offset));
  Tensor2D out(static_cast<std::size_t>(row_end - row_begin),
               static_cast<std::size_t>(d));
  read_f32_block(in, out.size(), out.data);
  return out;
}

DatasetManifest build_manifest(const std::vector<std::filesystem::path>& shards,
                               std::int32_t hook_layer,
                               const std::string& base_model,
                               const std::string& reasoning_model,
                               const std::filesystem::path& root) {
  if (shards.empty()) {
    throw InvalidInputError("build_manifest: no shard files given");
  }
  DatasetManifest m;
  m.hook_layer = hook_layer;
  m.base_model = base_model;
  m.reasoning_model = reasoning_model;
  m.root = root;
  for (const auto& p : shards) {
    const ShardHeader h = read_shard_header(p);
    if (m.d_model == 0) {
      m.d_model = h.d_model;
    } else if (m.d_model != h.d_model) {
      throw ValidationError("shard d_model mismatch: " + p.string() + " has " +
                            std::to_string(h.d_model) + ", manifest has " +
                            std::to_string(m.d_model));
    }
    ManifestEntry e;
    e.path = std::filesystem::relative(p, root).generic_string();
    e.sha256 = sha256_file(p);
    e.n_tokens = h.n_tokens;
    m.total_tokens += h.n_tokens;
    m.shards.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const std::filesystem::path& path,
                    const DatasetManifest& manifest) {
  json shards = json::array();
  for (const auto& e : manifest.shards) {
    shards.push_back(
        {{"path", e.path}, {"sha256", e.sha256}, {"n_tokens", e.n_tokens}});
  }
  json doc{{"format_version", 1},
           {"d_model", manifest.d_model},
           {"hook_layer", manifest.hook_layer},
           {"base_model", manifest.base_model},
           {"reasoning_model", manifest.reasoning_model},
           {"total_tokens", manifest.total_tokens},
           {"shards", shards}};
  write_text_file(path, doc.dump(2) + "\n");
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError("bad manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.d_model = doc.at("d_model").get<std::uint32_t>();
    m.hook_layer = doc.at("hook_layer").get<std::int32_t>();
    m.base_model = doc.at("base_model").get<std::string>();
    m.reasoning_model = doc.at("reasoning_model").get<std::string>();
    m.total_tokens = doc.at("total_tokens").get<std::uint64_t>();
    for (const auto& e : doc.at("shards")) {
      m.shards.push_back({e.at("path").get<std::string>(),
                          e.at("sha256").get<std::string>(),
                          e.at("n_tokens").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest field missing or mistyped in " +
                      path.string() + ": " + e.what());
  }
  m.root = path.parent_path();
  return m;
}

void verify_manifest(const DatasetManifest& manifest) {
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < manifest.shards.size(); ++i) {
    const auto& e = manifest.shards[i];
    const auto p = manifest.shard_path(i);
    const ShardHeader h = read_shard_header(p);
    if (h.d_model != manifest.d_model) {
      throw ValidationError("manifest d_model " +
                            std::to_string(manifest.d_model) +
                            " != shard d_model " + std::to_string(h.d_model) +
                            " for " + e.path);
    }
    if (h.n_tokens != e.n_tokens) {
      throw ValidationError("manifest n_tokens mismatch for " + e.path);
    }
    const std::string digest = sha256_file(p);
    if (digest != e.sha256) {
      throw ValidationError("checksum mismatch for " + e.path + ": manifest " +
                            e.sha256 + ", file " + digest);
    }
    total += h.n_tokens;
  }
  if (total != manifest.total_tokens) {
    throw ValidationError("manifest total_tokens " +
                          std::to_string(manifest.total_tokens) +
                          " != sum of shard tokens " + std::to_string(total));
  }
}

PairedActivations load_dataset(const DatasetManifest& manifest,
                               bool with_metadata) {
  PairedActivations data;
  data.d_model = manifest.d_model;
  data.base = Tensor2D(static_cast<std::size_t>(manifest.total_tokens),
                       manifest.d_model);
  data.reasoning = Tensor2D(static_cast<std::size_t>(manifest.total_tokens),
                            manifest.d_model);
  std::uint64_t row = 0;
  for (std::size_t i = 0; i < manifest.shards.size(); ++i) {
    ActivationShard shard = read_shard(manifest.shard_path(i), with_metadata);
    if (shard.header.d_model != manifest.d_model ||
        shard.header.n_tokens != manifest.shards[i].n_tokens) {
      throw ValidationError("shard does not match manifest: " +
                            manifest.shards[i].path);
    }
    const std::size_t n = static_cast<std::size_t>(shard.header.n_tokens);
    std::copy(shard.base.data.begin(), shard.base.data.end(),
              data.base.data.begin() + row * manifest.d_model);
    std::copy(shard.reasoning.data.begin(), shard.reasoning.data.end(),
              data.reasoning.data.begin() + row * manifest.d_model);
    if (with_metadata) {
      data.metadata.insert(data.metadata.end(), shard.metadata.begin(),
                           shard.metadata.end());
    }
    row += n;
  }
  return data;
}

BatchStream::BatchStream(const PairedActivations& data, std::size_t batch_size,
                         RngState* rng, std::uint64_t begin, std::uint64_t end)
    : data_(data), batch_size_(batch_size) {
  if (batch_size == 0) {
    throw InvalidInputError("iterate_batches: batch_size must be positive");
  }
  const std::uint64_t n = data.n_tokens();
  const std::uint64_t lo = std::min(begin, n);
  const std::uint64_t hi = std::min(end, n);
  const std::uint64_t count = hi > lo ? hi - lo : 0;
  order_.resize(static_cast<std::size_t>(count));
  if (rng) {
    auto perm = rng->permutation(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < perm.size(); ++i) order_[i] = lo + perm[i];
  } else {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = lo + i;
  }
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t take = std::min(batch_size_, order_.size() - cursor_);
  Batch b;
  b.base = Tensor2D(take, data_.d_model);
  b.reasoning = Tensor2D(take, data_.d_model);
  b.indices.resize(take);
  for (std::size_t i = 0; i < take; ++i) {
    const std::uint64_t idx = order_[cursor_ + i];
    b.indices[i] = idx;
    auto src_b = data_.base.row(static_cast<std::size_t>(idx));
    auto src_r = data_.reasoning.row(static_cast<std::size_t>(idx));
    std::copy(src_b.begin(), src_b.end(), b.base.row(i).begin());
    std::copy(src_r.begin(), src_r.end(), b.reasoning.row(i).begin());
  }
  cursor_ += take;
  return b;
}

BatchStream iterate_batches(const PairedActivations& data,
                            std::size_t batch_size, RngState* rng) {
  return BatchStream(data, batch_size, rng);
}

}  // namespace xcoder
