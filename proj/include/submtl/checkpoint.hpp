#ifndef SUBMTL_CHECKPOINT_HPP
#define SUBMTL_CHECKPOINT_HPP

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "submtl/model.hpp"
#include "submtl/volume.hpp"

namespace submtl {

inline constexpr const char* kCheckpointFormat = "submtl-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},
          {"depth", c.depth},
          {"n_heads", c.n_heads},
          {"mlp_ratio", c.mlp_ratio},
          {"head_hidden", c.head_hidden},
          {"n_tasks", c.n_tasks},
          {"input_dims", {c.input_dims.d, c.input_dims.h, c.input_dims.w}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.patch_size = j.at("patch_size").get<std::uint32_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.head_hidden = j.at("head_hidden").get<std::size_t>();
    c.n_tasks = j.at("n_tasks").get<std::size_t>();
    const auto dims = j.at("input_dims").get<std::vector<std::uint32_t>>();
    require(dims.size() == 3, ErrorKind::data, "input_dims needs 3 entries");
    c.input_dims = {dims[0], dims[1], dims[2]};
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, std::string("malformed model config: ") + e.what());
  }
}

/// Writes `<path>` (JSON manifest) and `<path>.bin` (f32 little-endian
/// values in manifest order).
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& p) {
  nlohmann::json m;
  m["format"] = kCheckpointFormat;
  m["version"] = kCheckpointVersion;
  m["config"] = to_json(p.cfg);
  m["seed"] = p.seed;
  const auto blob = std::filesystem::path(path.string() + ".bin");
  m["blob"] = blob.filename().string();
  m["dtype"] = "float32-le";
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : p.layout->tensors())
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  m["tensors"] = std::move(tensors);
  m["total"] = p.layout->total();

  std::vector<char> buf;
  buf.reserve(4 * p.values.size());
  for (T v : p.values) detail::put_f32_le(buf, static_cast<float>(v));

  std::ofstream bs(blob, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(bs), ErrorKind::data, "cannot write '" + blob.string() + "'");
  bs.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  std::ofstream ms(path, std::ios::trunc);
  require(static_cast<bool>(ms), ErrorKind::data, "cannot write '" + path.string() + "'");
  ms << m.dump(2) << '\n';
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream ms(path);
  require(static_cast<bool>(ms), ErrorKind::data, "checkpoint '" + path.string() + "' not found");
  nlohmann::json m;
  try {
    ms >> m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "checkpoint '" + path.string() + "': " + e.what());
  }
  require(m.value("format", "") == kCheckpointFormat, ErrorKind::data,
          "checkpoint '" + path.string() + "': unknown format");
  const auto cfg = model_config_from_json(m.at("config"));
  auto p = init_params<float>(cfg, m.at("seed").get<std::uint64_t>());

  // The manifest must describe exactly the layout this build produces.
  const auto& tensors = m.at("tensors");
  const auto& expect = p.layout->tensors();
  require(tensors.size() == expect.size(), ErrorKind::data,
          "checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < expect.size(); ++i) {
    require(tensors[i].at("name").get<std::string>() == expect[i].name &&
                tensors[i].at("shape").get<std::vector<std::size_t>>() == expect[i].shape &&
                tensors[i].at("offset").get<std::size_t>() == expect[i].offset,
            ErrorKind::data, "checkpoint: tensor '" + expect[i].name + "' does not match layout");
  }

  const auto blob = path.parent_path() / m.at("blob").get<std::string>();
  std::ifstream bs(blob, std::ios::binary);
  require(static_cast<bool>(bs), ErrorKind::data, "checkpoint blob '" + blob.string() + "' missing");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(bs)),
                                 std::istreambuf_iterator<char>());
  require(buf.size() == 4 * p.values.size(), ErrorKind::data, "checkpoint blob has wrong size");
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    p.values[i] = detail::get_f32_le(buf.data() + 4 * i);
    require(std::isfinite(p.values[i]), ErrorKind::data, "checkpoint holds a non-finite value");
  }
  return p;
}

}  // namespace submtl

#endif  // SUBMTL_CHECKPOINT_HPP
