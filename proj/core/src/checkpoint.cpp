#include "fedcrfd/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/tensor_io.hpp"

namespace fedcrfd {

namespace {

using nlohmann::json;

std::filesystem::path stem_of(const std::filesystem::path& p) {
  const auto ext = p.extension();
  if (ext == ".bin" || ext == ".json") return p.parent_path() / p.stem();
  return p;
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  return std::filesystem::path(stem.string() + ext);
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void Checkpoint::add(const std::string& prefix, const ParamSet& params) {
  for (const Parameter& p : params) tensors.emplace_back(prefix + p.name, p.value);
}

void Checkpoint::restore(const std::string& prefix, ParamSet& params) const {
  for (Parameter& p : params) {
    const Tensor* t = find(prefix + p.name);
    if (t == nullptr) throw ConfigError("checkpoint has no tensor '" + prefix + p.name + "'");
    if (t->shape() != p.value.shape()) {
      throw ConfigError("checkpoint tensor '" + prefix + p.name + "' has shape " + shape_str(t->shape()) +
                        ", model expects " + shape_str(p.value.shape()));
    }
    p.value = *t;
  }
}

void save_checkpoint(const std::filesystem::path& stem_in, const Checkpoint& ckpt) {
  const auto stem = stem_of(stem_in);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  const auto bin = with_ext(stem, ".bin");
  std::ofstream out(bin, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + bin.string());
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    write_tensor(out, t);
    entries.push_back({{"name", name}, {"offset", offset}, {"shape", t.shape()}});
    offset += encoded_size(t);
  }
  out.close();
  if (!out) throw IoError("failed writing " + bin.string());

  json manifest = {
      {"format", 1},
      {"method", ckpt.method},
      {"round", ckpt.round},
      {"clients", ckpt.clients},
      {"use_fusion", ckpt.use_fusion},
      {"bin", bin.filename().string()},
      {"arch",
       {{"image_size", ckpt.arch.image_size},
        {"channels", ckpt.arch.channels},
        {"classifier_hidden", ckpt.arch.classifier_hidden},
        {"num_modalities", ckpt.arch.num_modalities}}},
      {"tensors", entries},
  };
  const auto js = with_ext(stem, ".json");
  std::ofstream mo(js, std::ios::trunc);
  if (!mo) throw IoError("cannot write " + js.string());
  mo << manifest.dump(2) << '\n';
  if (!mo) throw IoError("failed writing " + js.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto stem = stem_of(path);
  const auto js = with_ext(stem, ".json");
  std::ifstream mi(js);
  if (!mi) throw MissingInputError("checkpoint manifest not found: " + js.string());
  json manifest;
  try {
    manifest = json::parse(mi);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest " + js.string() + ": " + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.method = manifest.at("method").get<std::string>();
    ckpt.round = manifest.at("round").get<std::size_t>();
    ckpt.clients = manifest.at("clients").get<std::size_t>();
    ckpt.use_fusion = manifest.value("use_fusion", true);
    const json& a = manifest.at("arch");
    ckpt.arch.image_size = a.at("image_size").get<std::size_t>();
    ckpt.arch.channels = a.at("channels").get<std::vector<std::size_t>>();
    ckpt.arch.classifier_hidden = a.at("classifier_hidden").get<std::size_t>();
    ckpt.arch.num_modalities = a.at("num_modalities").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError("checkpoint manifest " + js.string() + " is missing fields: " + e.what());
  }
  const auto bin = stem.parent_path() / manifest.value("bin", stem.filename().string() + ".bin");
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw MissingInputError("checkpoint data not found: " + bin.string());
  for (const json& e : manifest.at("tensors")) {
    const auto offset = e.at("offset").get<std::size_t>();
    in.seekg(static_cast<std::streamoff>(offset));
    if (!in) throw IoError("checkpoint offset out of range in " + bin.string());
    Tensor t = read_tensor(in);
    if (t.shape() != e.at("shape").get<Shape>()) {
      throw IoError("checkpoint tensor '" + e.at("name").get<std::string>() + "' disagrees with its manifest shape");
    }
    ckpt.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

}  // namespace fedcrfd
