#include "icl_lab/filter.hpp"

#include <json.hpp>

#include "binary_io.hpp"

namespace icl {

using nlohmann::json;

void TVSFilter::validate() const {
  if (w_enc.rank() != 2 || b_enc.rank() != 1 || w_dec.rank() != 2) {
    throw ShapeMismatch("filter: W_enc and W_dec must be 2-D, b_enc 1-D");
  }
  const auto d = w_enc.dim(0);
  const auto r = w_enc.dim(1);
  if (b_enc.dim(0) != r || w_dec.dim(0) != r || w_dec.dim(1) != d) {
    throw ShapeMismatch("filter: inconsistent shapes W_enc " + shape_string(w_enc.shape()) + ", b_enc " +
                        shape_string(b_enc.shape()) + ", W_dec " + shape_string(w_dec.shape()));
  }
  if (r > d || r == 0) throw ShapeMismatch("filter: rank must be in [1, d]");
  if (layer < 0) throw SpecError("filter: negative layer");
}

TensorD TVSFilter::map_matrix() const {
  validate();
  return TensorD::from_matrix(w_enc.mat().cast<double>() * w_dec.mat().cast<double>());
}

TVSFilter TVSFilter::identity(int d, int layer) {
  TVSFilter f = zero(d, d, layer);
  for (int i = 0; i < d; ++i) {
    f.w_enc(std::size_t(i), std::size_t(i)) = 1.0f;
    f.w_dec(std::size_t(i), std::size_t(i)) = 1.0f;
  }
  return f;
}

TVSFilter TVSFilter::zero(int d, int r, int layer) {
  TVSFilter f;
  f.w_enc = TensorF(Shape{std::size_t(d), std::size_t(r)});
  f.b_enc = TensorF(Shape{std::size_t(r)});
  f.w_dec = TensorF(Shape{std::size_t(r), std::size_t(d)});
  f.layer = layer;
  return f;
}

TVSFilter TVSFilter::random(int d, int r, int layer, std::mt19937_64& rng, double stddev) {
  TVSFilter f = zero(d, r, layer);
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : f.w_enc.span()) v = static_cast<float>(normal(rng));
  for (auto& v : f.w_dec.span()) v = static_cast<float>(normal(rng));
  return f;
}

namespace {
constexpr std::string_view kMagic = "TVS1";
}

void save_filter(const TVSFilter& filter, const std::filesystem::path& path) {
  filter.validate();
  json header = {{"d", filter.d()}, {"r", filter.r()}, {"layer", filter.layer}, {"label_map", filter.label_map}};
  const std::string text = header.dump();
  std::vector<char> out(kMagic.begin(), kMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  detail::put_bytes(out, filter.w_enc.data(), filter.w_enc.size() * sizeof(float));
  detail::put_bytes(out, filter.b_enc.data(), filter.b_enc.size() * sizeof(float));
  detail::put_bytes(out, filter.w_dec.data(), filter.w_dec.size() * sizeof(float));
  detail::write_file(path, out);
}

TVSFilter load_filter(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < kMagic.size() || std::string_view(bytes.data(), kMagic.size()) != kMagic) {
    throw MagicMismatch("filter file: bad magic (expected TVS1)");
  }
  detail::Reader<TruncatedPayload> in(bytes, "filter file");
  in.take(kMagic.size());
  const auto len = in.u32();
  json header;
  try {
    header = json::parse(in.take(len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("filter file: bad JSON header: ") + e.what());
  }
  const int d = header.at("d").get<int>();
  const int r = header.at("r").get<int>();
  if (d < 1 || r < 1) throw ShapeMismatch("filter file: non-positive d or r");
  TVSFilter f = TVSFilter::zero(d, r, header.at("layer").get<int>());
  f.label_map = header.value("label_map", decltype(f.label_map){});
  auto fill = [&](TensorF& t) {
    const auto raw = in.take(t.size() * sizeof(float));
    std::memcpy(t.data(), raw.data(), raw.size());
  };
  fill(f.w_enc);
  fill(f.b_enc);
  fill(f.w_dec);
  if (in.remaining() != 0) throw ShapeMismatch("filter file: trailing bytes after payload");
  f.validate();
  return f;
}

}  // namespace icl
