// SPDX-License-Identifier: Apache-2.0
#include "dha/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "json.hpp"

#include "dha/errors.hpp"

namespace dha {

namespace {

using json = nlohmann::ordered_json;

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string crc_string(const char* data, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in slices.
  while (len > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    len -= chunk;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return std::string("crc32:") + buf;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

json config_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},     {"n_query_heads", c.n_query_heads},
              {"head_dim", c.head_dim},     {"vocab_size", c.vocab_size},
              {"max_seq", c.max_seq},       {"ffn_dim", c.ffn_dim}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_query_heads = j.at("n_query_heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  return c;
}

json task_json(const TaskConfig& t) {
  return json{{"vocab_size", t.vocab_size},       {"seq_len", t.seq_len},
              {"train_sequences", t.train_sequences}, {"val_sequences", t.val_sequences},
              {"sharpness", t.sharpness},         {"seed", t.seed}};
}

TaskConfig task_from(const json& j) {
  TaskConfig t;
  t.vocab_size = j.at("vocab_size").get<std::size_t>();
  t.seq_len = j.at("seq_len").get<std::size_t>();
  t.train_sequences = j.at("train_sequences").get<std::size_t>();
  t.val_sequences = j.at("val_sequences").get<std::size_t>();
  t.sharpness = j.at("sharpness").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

std::string fusion_name(std::size_t l, HeadKind kind) {
  return "fusion.layers." + std::to_string(l) + (kind == HeadKind::kKey ? ".key" : ".value") +
         ".omega";
}

TensorRecord record_of(const std::string& name, const Matrix& m) {
  TensorRecord r{name, {m.rows(), m.cols()}, {}};
  r.data.reserve(m.values().size());
  for (double v : m.values()) r.data.push_back(static_cast<float>(v));
  return r;
}

void fill_from(Matrix& m, const TensorRecord& r) {
  if (r.shape.size() != 2 || r.shape[0] != m.rows() || r.shape[1] != m.cols())
    throw BoundsError("tensor '" + r.name + "' has shape mismatching the model (expected " +
                      m.shape_string() + ")");
  auto dst = m.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(r.data[i]);
}

ToyModel skeleton(const ModelConfig& c, AttentionVariant variant, const DhaTopology& topo) {
  const std::size_t dm = c.d_model();
  ToyModel m;
  m.config = c;
  m.variant = variant;
  m.topology = topo;
  m.token_embedding = Matrix(c.vocab_size, dm);
  m.position_embedding = Matrix(c.max_seq, dm);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    AttentionLayer a;
    a.w_q.assign(c.n_query_heads, Matrix(dm, c.head_dim));
    a.w_k.assign(topo.layers[l].key_heads, Matrix(dm, c.head_dim));
    a.w_v.assign(topo.layers[l].value_heads, Matrix(dm, c.head_dim));
    a.w_o = Matrix(dm, dm);
    m.attention.push_back(std::move(a));
    m.ffn.push_back({Matrix(dm, c.ffn_dim), Matrix(c.ffn_dim, dm)});
  }
  m.output = Matrix(dm, c.vocab_size);
  return m;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string payload;
  json tensors = json::array();
  for (const auto& t : ckpt.tensors) {
    if (t.data.size() != element_count(t.shape))
      throw BoundsError("tensor '" + t.name + "' holds " + std::to_string(t.data.size()) +
                        " values but its shape needs " + std::to_string(element_count(t.shape)));
    const std::size_t offset = payload.size();
    for (float v : t.data) put_u32_le(payload, std::bit_cast<std::uint32_t>(v));
    tensors.push_back(json{{"name", t.name},
                           {"dtype", "f32"},
                           {"shape", t.shape},
                           {"byte_offset", offset},
                           {"byte_length", payload.size() - offset}});
  }

  json manifest;
  manifest["format_version"] = ckpt.format_version;
  manifest["config"] = config_json(ckpt.config);
  manifest["variant"] = to_string(ckpt.variant);
  json topo = json::array();
  for (const auto& lt : ckpt.topology.layers) {
    topo.push_back(json{{"key_heads", lt.key_heads},
                        {"value_heads", lt.value_heads},
                        {"key_map", lt.key_map},
                        {"value_map", lt.value_map}});
  }
  manifest["topology"] = topo;
  if (ckpt.task) manifest["task"] = task_json(*ckpt.task);
  if (ckpt.fusion) {
    json layers = json::array();
    for (std::size_t l = 0; l < ckpt.fusion->key_groups.size(); ++l) {
      layers.push_back(json{{"key_groups", ckpt.fusion->key_groups[l]},
                            {"value_groups", ckpt.fusion->value_groups.at(l)}});
    }
    manifest["fusion"] = json{{"per_channel", ckpt.fusion->per_channel}, {"layers", layers}};
  }
  manifest["tensors"] = tensors;
  manifest["payload_bytes"] = payload.size();
  manifest["checksum"] = crc_string(payload.data(), payload.size());

  const std::string header = manifest.dump(2);
  std::string out;
  out.reserve(8 + header.size() + payload.size());
  const auto len = static_cast<std::uint64_t>(header.size());
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  out += header;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw CheckpointError("checkpoint truncated: missing header length");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(raw[i]) << (8 * i);
  if (header_len > bytes.size() - 8)
    throw CheckpointError("checkpoint truncated: manifest needs " + std::to_string(header_len) +
                          " bytes, file has " + std::to_string(bytes.size() - 8));

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed manifest: ") + e.what());
  }

  try {
    Checkpoint ckpt;
    ckpt.format_version = manifest.at("format_version").get<int>();
    if (ckpt.format_version != kCheckpointVersion)
      throw UnsupportedVersionError("unsupported checkpoint format version " +
                                    std::to_string(ckpt.format_version) + " (supported: " +
                                    std::to_string(kCheckpointVersion) + ")");

    const std::size_t payload_start = 8 + header_len;
    const std::size_t payload_size = bytes.size() - payload_start;
    const auto declared = manifest.at("payload_bytes").get<std::size_t>();
    if (declared != payload_size)
      throw CheckpointError("checkpoint payload is " + std::to_string(payload_size) +
                            " bytes, manifest declares " + std::to_string(declared) +
                            (payload_size < declared ? " (truncated)" : ""));
    const std::string checksum = crc_string(bytes.data() + payload_start, payload_size);
    if (checksum != manifest.at("checksum").get<std::string>())
      throw ChecksumError("checkpoint checksum mismatch: manifest " +
                          manifest.at("checksum").get<std::string>() + ", payload " + checksum);

    ckpt.config = config_from(manifest.at("config"));
    ckpt.variant = parse_variant(manifest.at("variant").get<std::string>());
    for (const auto& lt : manifest.at("topology")) {
      LayerTopology t;
      t.key_heads = lt.at("key_heads").get<std::size_t>();
      t.value_heads = lt.at("value_heads").get<std::size_t>();
      t.key_map = lt.at("key_map").get<std::vector<std::size_t>>();
      t.value_map = lt.at("value_map").get<std::vector<std::size_t>>();
      ckpt.topology.layers.push_back(std::move(t));
    }
    if (manifest.contains("task")) ckpt.task = task_from(manifest.at("task"));
    if (manifest.contains("fusion")) {
      FusionLayout f;
      f.per_channel = manifest.at("fusion").at("per_channel").get<bool>();
      for (const auto& l : manifest.at("fusion").at("layers")) {
        f.key_groups.push_back(l.at("key_groups").get<HeadGroups>());
        f.value_groups.push_back(l.at("value_groups").get<HeadGroups>());
      }
      ckpt.fusion = std::move(f);
    }

    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& t : manifest.at("tensors")) {
      TensorRecord r;
      r.name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f32")
        throw CheckpointError("tensor '" + r.name + "' has unsupported dtype " +
                              t.at("dtype").get<std::string>());
      r.shape = t.at("shape").get<std::vector<std::size_t>>();
      const auto offset = t.at("byte_offset").get<std::size_t>();
      const auto length = t.at("byte_length").get<std::size_t>();
      if (length != 4 * element_count(r.shape))
        throw BoundsError("tensor '" + r.name + "' byte length " + std::to_string(length) +
                          " does not match its shape");
      if (offset > payload_size || length > payload_size - offset)
        throw BoundsError("tensor '" + r.name + "' [" + std::to_string(offset) + ", +" +
                          std::to_string(length) + ") lies outside the " +
                          std::to_string(payload_size) + "-byte payload");
      spans.emplace_back(offset, length);
      r.data.resize(length / 4);
      const auto* p = raw + payload_start + offset;
      for (std::size_t i = 0; i < r.data.size(); ++i)
        r.data[i] = std::bit_cast<float>(get_u32_le(p + 4 * i));
      ckpt.tensors.push_back(std::move(r));
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
      if (spans[i - 1].first + spans[i - 1].second > spans[i].first)
        throw BoundsError("tensor byte ranges overlap");
    return ckpt;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed manifest: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::string checkpoint_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8) throw CheckpointError("checkpoint truncated: missing header length");
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(raw[i]) << (8 * i);
  if (header_len > bytes.size() - 8) throw CheckpointError("checkpoint truncated");
  try {
    return json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_len))
        .at("checksum")
        .get<std::string>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed manifest: ") + e.what());
  }
}

Checkpoint to_checkpoint(const ToyModel& model, const FusionOperator* op, const TaskConfig* task) {
  model.validate();
  Checkpoint ckpt;
  ckpt.config = model.config;
  ckpt.variant = model.variant;
  ckpt.topology = model.topology;
  if (task) ckpt.task = *task;
  model.for_each_parameter(
      [&](const std::string& name, const Matrix& m) { ckpt.tensors.push_back(record_of(name, m)); });
  if (op) {
    FusionLayout f;
    f.per_channel = op->per_channel;
    for (std::size_t l = 0; l < op->layers.size(); ++l) {
      f.key_groups.push_back(op->layers[l].key.groups);
      f.value_groups.push_back(op->layers[l].value.groups);
      ckpt.tensors.push_back(record_of(fusion_name(l, HeadKind::kKey), op->layers[l].key.omega));
      ckpt.tensors.push_back(
          record_of(fusion_name(l, HeadKind::kValue), op->layers[l].value.omega));
    }
    ckpt.fusion = std::move(f);
  }
  return ckpt;
}

LoadedModel from_checkpoint(const Checkpoint& ckpt, std::optional<AttentionVariant> expected) {
  if (expected && *expected != ckpt.variant)
    throw VariantMismatchError("checkpoint holds a " + to_string(ckpt.variant) +
                               " model, expected " + to_string(*expected));
  ckpt.config.validate();
  if (ckpt.topology.layers.size() != ckpt.config.n_layers)
    throw CheckpointError("checkpoint topology has " + std::to_string(ckpt.topology.layers.size()) +
                          " layers, config has " + std::to_string(ckpt.config.n_layers));
  ckpt.topology.validate(ckpt.config.n_query_heads);

  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& t : ckpt.tensors)
    if (!by_name.emplace(t.name, &t).second)
      throw CheckpointError("tensor '" + t.name + "' appears twice");
  auto take = [&](const std::string& name) -> const TensorRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    const TensorRecord& r = *it->second;
    by_name.erase(it);
    return r;
  };

  LoadedModel out{skeleton(ckpt.config, ckpt.variant, ckpt.topology), std::nullopt, ckpt.task};
  out.model.for_each_parameter([&](const std::string& name, Matrix& m) { fill_from(m, take(name)); });
  out.model.validate();

  if (ckpt.fusion) {
    if (ckpt.variant != AttentionVariant::kMha)
      throw VariantMismatchError("fusion coefficients require an mha model");
    if (ckpt.fusion->key_groups.size() != ckpt.config.n_layers ||
        ckpt.fusion->value_groups.size() != ckpt.config.n_layers)
      throw CheckpointError("fusion layout does not cover every layer");
    FusionOperator op = init_identity(out.model.attention, ckpt.fusion->key_groups,
                                      ckpt.fusion->value_groups, ckpt.fusion->per_channel);
    for (std::size_t l = 0; l < op.layers.size(); ++l) {
      fill_from(op.layers[l].key.omega, take(fusion_name(l, HeadKind::kKey)));
      fill_from(op.layers[l].value.omega, take(fusion_name(l, HeadKind::kValue)));
    }
    out.op = std::move(op);
  }
  if (!by_name.empty())
    throw CheckpointError("checkpoint has unexpected tensor '" + by_name.begin()->first + "'");
  return out;
}

void save_model(const std::filesystem::path& path, const ToyModel& model, const FusionOperator* op,
                const TaskConfig* task) {
  save_checkpoint(to_checkpoint(model, op, task), path);
}

LoadedModel load_model(const std::filesystem::path& path, std::optional<AttentionVariant> expected) {
  return from_checkpoint(read_checkpoint(path), expected);
}

}  // namespace dha
