#include "icl_lab/dump_io.hpp"

#include <cstring>

#include "binary_io.hpp"

namespace icl {

namespace {
constexpr std::string_view kMagic = "HSC1";
}

void HiddenCloud::validate() const {
  if (points.rank() != 2) throw ShapeMismatch("hidden cloud must be N×d");
  if (points.dim(0) < 2) throw DegenerateCloud("hidden cloud needs at least 2 points");
  points.require_finite("hidden cloud");
  if (!labels.empty() && labels.size() != points.dim(0)) throw ShapeMismatch("hidden cloud: one label per point");
}

HiddenCloud HiddenCloud::from_rows(const std::vector<std::vector<float>>& rows, int layer, int shots,
                                   std::string mode) {
  if (rows.empty()) throw DegenerateCloud("hidden cloud: no points");
  const auto d = rows.front().size();
  HiddenCloud c;
  c.points = TensorD(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw ShapeMismatch("hidden cloud: ragged rows");
    std::copy(rows[i].begin(), rows[i].end(), c.points.row(i).begin());
  }
  c.layer = layer;
  c.shots = shots;
  c.mode = std::move(mode);
  return c;
}

void write_dump(const HiddenCloud& cloud, const std::filesystem::path& path) {
  if (cloud.points.rank() != 2) throw ShapeMismatch("write_dump: cloud must be N×d");
  std::vector<char> out(kMagic.begin(), kMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(cloud.points.dim(0)));
  detail::put_u32(out, static_cast<std::uint32_t>(cloud.points.dim(1)));
  detail::put_u32(out, static_cast<std::uint32_t>(cloud.layer));
  detail::put_u32(out, static_cast<std::uint32_t>(cloud.shots));
  detail::put_u32(out, static_cast<std::uint32_t>(cloud.mode.size()));
  out.insert(out.end(), cloud.mode.begin(), cloud.mode.end());
  const auto f = cloud.points.cast<float>();
  detail::put_bytes(out, f.data(), f.size() * sizeof(float));
  detail::write_file(path, out);
}

HiddenCloud read_dump(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < kMagic.size() || std::string_view(bytes.data(), kMagic.size()) != kMagic) {
    throw MagicMismatch("hidden dump: bad magic (expected HSC1)");
  }
  detail::Reader<TruncatedDump> in(bytes, "hidden dump");
  in.take(kMagic.size());
  const auto n = in.u32();
  const auto d = in.u32();
  HiddenCloud c;
  c.layer = static_cast<int>(in.u32());
  c.shots = static_cast<int>(in.u32());
  const auto tag = in.take(in.u32());
  c.mode.assign(tag.begin(), tag.end());
  if (std::uint64_t(n) * d * sizeof(float) > in.remaining()) {
    throw TruncatedDump("hidden dump: payload shorter than " + std::to_string(n) + "×" + std::to_string(d) + " floats");
  }
  TensorF f(Shape{n, d});
  const auto raw = in.take(f.size() * sizeof(float));
  std::memcpy(f.data(), raw.data(), raw.size());
  if (in.remaining() != 0) throw ShapeMismatch("hidden dump: header counts disagree with payload length");
  c.points = f.cast<double>();
  return c;
}

}  // namespace icl
