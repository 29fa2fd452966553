#include "checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace memvit {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'V', 'C', 'K'};
constexpr std::size_t kHeader = 16;

json config_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},       {"patch_size", c.patch_size},
          {"depth", c.depth},           {"width", c.width},             {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}, {"mem_counts", c.mem_counts},
          {"variant", std::string(to_string(c.variant))}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.mem_counts = j.at("mem_counts").get<std::vector<std::size_t>>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.validate();
  return c;
}

json task_json(const TaskParams<float>& t, MaskPolicy trained, const std::vector<std::string>& prereq) {
  std::vector<std::size_t> mem;
  for (std::size_t l = 0; l < t.memory.size(); ++l) mem.push_back(t.mem_count(l));
  return {{"name", t.name},
          {"variant", std::string(to_string(t.variant))},
          {"has_cls", t.has_cls()},
          {"num_classes", t.num_classes()},
          {"mem_counts", mem},
          {"trained_policy", std::string(to_string(trained))},
          {"prerequisites", prereq}};
}

// Zero-filled task with the shapes recorded in the manifest.
TaskParams<float> task_skeleton(const json& j, std::size_t width, std::size_t depth) {
  TaskParams<float> t;
  t.name = j.at("name").get<std::string>();
  t.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.at("has_cls").get<bool>()) t.cls = Tensor<float>::zeros({1, width});
  const auto mem = j.at("mem_counts").get<std::vector<std::size_t>>();
  if (mem.size() != depth) throw FormatError("checkpoint: task '" + t.name + "' memory does not list every layer");
  for (std::size_t m : mem) t.memory.push_back(m ? Tensor<float>::zeros({m, width}) : Tensor<float>());
  const auto k = j.at("num_classes").get<std::size_t>();
  t.head_w = Tensor<float>::zeros({width, k});
  t.head_b = Tensor<float>::zeros({k});
  return t;
}

std::vector<std::uint8_t> encode(json manifest, const std::vector<NamedParam<float>>& params) {
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    const std::uint64_t len = p.tensor.numel() * sizeof(float);
    dir.push_back({{"name", p.name}, {"dtype", "f32"}, {"shape", p.tensor.shape()}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  manifest["tensors"] = std::move(dir);
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kHeader);
  std::memcpy(out.data(), kMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t mlen = text.size();
  std::memcpy(out.data() + 4, &version, 4);
  std::memcpy(out.data() + 8, &mlen, 8);
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& p : params) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(p.tensor.data().data());
    out.insert(out.end(), b, b + p.tensor.numel() * sizeof(float));
  }
  return out;
}

struct Parsed {
  json manifest;
  std::vector<TensorEntry> entries;
  const std::uint8_t* blob = nullptr;
};

Parsed parse(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeader) throw FormatError("checkpoint: truncated header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic at offset 0");
  std::uint32_t version;
  std::uint64_t mlen;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&mlen, bytes.data() + 8, 8);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  if (mlen > bytes.size() - kHeader) throw FormatError("checkpoint: manifest runs past end of file");
  Parsed p;
  try {
    p.manifest = json::parse(bytes.begin() + kHeader, bytes.begin() + std::ptrdiff_t(kHeader + mlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  const std::uint64_t blob_size = bytes.size() - kHeader - mlen;
  p.blob = bytes.data() + kHeader + mlen;
  try {
    std::uint64_t expect = 0;
    for (const auto& t : p.manifest.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<std::vector<std::size_t>>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.length = t.at("length").get<std::uint64_t>();
      if (t.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: tensor " + e.name + " is not f32");
      std::uint64_t numel = 1;
      for (auto s : e.shape) numel *= s;
      if (e.length != numel * sizeof(float)) throw FormatError("checkpoint: tensor " + e.name + " length disagrees with shape");
      if (e.offset != expect) throw FormatError("checkpoint: tensor " + e.name + " is not contiguous with its predecessor");
      expect += e.length;
      p.entries.push_back(std::move(e));
    }
    if (expect != blob_size) {
      throw FormatError("checkpoint: blob holds " + std::to_string(blob_size) + " bytes, directory lists " +
                        std::to_string(expect));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed tensor directory: ") + e.what());
  }
  return p;
}

void fill(const Parsed& p, const std::vector<NamedParam<float>>& params) {
  if (params.size() != p.entries.size()) {
    throw FormatError("checkpoint: directory lists " + std::to_string(p.entries.size()) + " tensors, expected " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = p.entries[i];
    auto t = params[i].tensor;
    if (e.name != params[i].name || e.shape != t.shape()) {
      throw FormatError("checkpoint: entry " + std::to_string(i) + " is " + e.name + " " + shape_str(e.shape) +
                        ", expected " + params[i].name + " " + shape_str(t.shape()));
    }
    std::memcpy(t.data().data(), p.blob + e.offset, e.length);
  }
}

template <typename F>
auto guarded(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
}

CheckpointKind kind_of(const json& m) {
  const auto k = m.at("kind").get<std::string>();
  if (k == "model") return CheckpointKind::model;
  if (k == "task_pack") return CheckpointKind::task_pack;
  throw FormatError("checkpoint: unknown kind '" + k + "'");
}

}  // namespace

std::vector<std::uint8_t> encode_model(const ModelCheckpoint& ckpt) {
  const auto& c = ckpt.composite;
  if (c.trained_policies.size() != c.model.tasks.size() || c.prerequisites.size() != c.model.tasks.size()) {
    throw UsageError("encode_model: composite task annotations do not match its tasks");
  }
  json tasks = json::array();
  for (std::size_t j = 0; j < c.model.tasks.size(); ++j) {
    tasks.push_back(task_json(c.model.tasks[j], c.trained_policies[j], c.prerequisites[j]));
  }
  json m = {{"format", "memvit"},
            {"version", kCheckpointVersion},
            {"kind", "model"},
            {"config", config_json(c.model.config)},
            {"policy", std::string(to_string(c.policy))},
            {"tasks", std::move(tasks)},
            {"fingerprint", backbone_fingerprint(c.model.backbone)},
            {"run_config", ckpt.run_config}};
  return encode(std::move(m), named_parameters(c.model));
}

std::vector<std::uint8_t> encode_pack(const PackCheckpoint& ckpt) {
  const auto& p = ckpt.pack;
  TaskParams<float> t;
  t.name = p.task_name;
  t.variant = p.variant;
  t.cls = p.cls;
  t.memory = p.memory;
  t.head_w = p.head_w;
  t.head_b = p.head_b;
  if (t.memory.size() != ckpt.config.depth) throw UsageError("encode_pack: pack depth does not match the config");
  json m = {{"format", "memvit"},
            {"version", kCheckpointVersion},
            {"kind", "task_pack"},
            {"config", config_json(ckpt.config)},
            {"task", task_json(t, p.trained_policy, p.prerequisites)},
            {"fingerprint", p.base_fingerprint},
            {"run_config", ckpt.run_config}};
  return encode(std::move(m), task_parameters(t, 1));
}

ModelCheckpoint decode_model(const std::vector<std::uint8_t>& bytes) {
  const auto p = parse(bytes);
  return guarded([&] {
    if (kind_of(p.manifest) != CheckpointKind::model) throw FormatError("checkpoint: expected kind model, found task_pack");
    ModelCheckpoint out;
    auto& c = out.composite;
    c.model = init_model<float>(config_from(p.manifest.at("config")), 0);
    c.policy = parse_policy(p.manifest.at("policy").get<std::string>());
    for (const auto& t : p.manifest.at("tasks")) {
      c.model.tasks.push_back(task_skeleton(t, c.model.config.width, c.model.config.depth));
      c.trained_policies.push_back(parse_policy(t.at("trained_policy").get<std::string>()));
      c.prerequisites.push_back(t.at("prerequisites").get<std::vector<std::string>>());
    }
    fill(p, named_parameters(c.model));
    const auto fp = p.manifest.at("fingerprint").get<std::string>();
    if (fp != backbone_fingerprint(c.model.backbone)) {
      throw FingerprintError("checkpoint: backbone bytes do not match the recorded fingerprint");
    }
    out.run_config = p.manifest.at("run_config").get<std::string>();
    return out;
  });
}

PackCheckpoint decode_pack(const std::vector<std::uint8_t>& bytes) {
  const auto p = parse(bytes);
  return guarded([&] {
    if (kind_of(p.manifest) != CheckpointKind::task_pack) throw FormatError("checkpoint: expected kind task_pack, found model");
    PackCheckpoint out;
    out.config = config_from(p.manifest.at("config"));
    const auto& tj = p.manifest.at("task");
    auto t = task_skeleton(tj, out.config.width, out.config.depth);
    fill(p, task_parameters(t, 1));
    auto& pk = out.pack;
    pk.task_name = t.name;
    pk.variant = t.variant;
    pk.cls = t.cls;
    pk.memory = t.memory;
    pk.head_w = t.head_w;
    pk.head_b = t.head_b;
    pk.trained_policy = parse_policy(tj.at("trained_policy").get<std::string>());
    pk.prerequisites = tj.at("prerequisites").get<std::vector<std::string>>();
    pk.base_fingerprint = p.manifest.at("fingerprint").get<std::string>();
    out.run_config = p.manifest.at("run_config").get<std::string>();
    return out;
  });
}

CheckpointKind peek_kind(const std::vector<std::uint8_t>& bytes) {
  const auto p = parse(bytes);
  return guarded([&] { return kind_of(p.manifest); });
}

std::string manifest_text(const std::vector<std::uint8_t>& bytes) { return parse(bytes).manifest.dump(2); }

std::vector<TensorEntry> tensor_directory(const std::vector<std::uint8_t>& bytes) { return parse(bytes).entries; }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void save_model(const std::filesystem::path& path, const ModelCheckpoint& ckpt) { write_file(path, encode_model(ckpt)); }
void save_pack(const std::filesystem::path& path, const PackCheckpoint& ckpt) { write_file(path, encode_pack(ckpt)); }
ModelCheckpoint load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }
PackCheckpoint load_pack(const std::filesystem::path& path) { return decode_pack(read_file(path)); }

}  // namespace memvit
