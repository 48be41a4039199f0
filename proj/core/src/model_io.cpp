#include "icl_lab/model_io.hpp"

#include <json.hpp>

#include "binary_io.hpp"

namespace icl {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "TWB1";

json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}, {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.norm_eps = j.value("norm_eps", 1e-5);
  return c;
}

}  // namespace

std::vector<char> serialize_model(const ModelBundle& model) {
  model.validate();
  json manifest = json::object();
  std::vector<char> payload;
  model.weights.for_each([&](const std::string& name, const TensorF& t) {
    const auto bytes = t.size() * sizeof(float);
    manifest[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", payload.size()}, {"length", bytes}};
    detail::put_bytes(payload, t.data(), bytes);
  });
  json header = {{"config", config_to_json(model.config)}, {"tensors", manifest}, {"vocab", model.vocab}};
  header["task"] = model.task_json.empty() ? json(nullptr) : json::parse(model.task_json);
  const std::string text = header.dump();

  std::vector<char> out(kMagic.begin(), kMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

ModelBundle deserialize_model(const std::vector<char>& bytes) {
  detail::Reader<TruncatedPayload> in(bytes, "model container");
  if (bytes.size() < kMagic.size() || std::string_view(bytes.data(), kMagic.size()) != kMagic) {
    throw MagicMismatch("model container: bad magic (expected TWB1)");
  }
  in.take(kMagic.size());
  const auto header_len = in.u32();
  json header;
  try {
    header = json::parse(in.take(header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("model container: bad JSON header: ") + e.what());
  }
  const std::size_t payload_start = in.pos();
  const std::size_t payload_size = in.remaining();

  ModelBundle model;
  try {
    model.config = config_from_json(header.at("config"));
    model.vocab = header.value("vocab", std::vector<std::string>{});
    if (header.contains("task") && !header["task"].is_null()) model.task_json = header["task"].dump();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model container: bad header field: ") + e.what());
  }
  model.config.validate();

  const auto shapes = expected_shapes(model.config);
  const json& manifest = header.at("tensors");
  model.weights = ModelWeights<float>::zeros_like(model.config);
  model.weights.for_each([&](const std::string& name, TensorF& t) {
    if (!manifest.contains(name)) throw ShapeMismatch("model container: tensor " + name + " missing");
    const json& entry = manifest.at(name);
    if (entry.value("dtype", "") != "f32") throw FormatError("model container: " + name + " is not f32");
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != shapes.at(name)) {
      throw ShapeMismatch("model container: " + name + " has shape " + shape_string(shape) +
                          " but config implies " + shape_string(shapes.at(name)));
    }
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto length = entry.at("length").get<std::size_t>();
    if (length != shape_numel(shape) * sizeof(float)) {
      throw ShapeMismatch("model container: " + name + " byte length disagrees with its shape");
    }
    if (offset > payload_size || length > payload_size - offset) {
      throw TruncatedPayload("model container: payload ends before tensor " + name);
    }
    std::memcpy(t.data(), bytes.data() + payload_start + offset, length);
  });
  model.validate();
  return model;
}

void save_model(const ModelBundle& model, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(model));
}

ModelBundle load_model(const std::filesystem::path& path) { return deserialize_model(detail::read_file(path)); }

}  // namespace icl
