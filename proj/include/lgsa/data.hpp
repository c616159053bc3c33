// Synthetic volumes, normalization, triplet extraction, splitting and file I/O.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgsa/config.hpp"
#include "lgsa/params.hpp"
#include "lgsa/rng.hpp"

namespace lgsa {

struct Volume {
  std::string id;
  std::size_t depth = 0, height = 0, width = 0;
  std::size_t num_classes = 1;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};  // z, y, x
  std::vector<float> voxels;                    // D*H*W
  std::vector<std::uint8_t> labels;             // 0 background, 1..num_classes

  std::size_t slice_size() const { return height * width; }
  std::span<const float> slice(std::size_t z) const {
    return std::span<const float>(voxels).subspan(z * slice_size(), slice_size());
  }
  std::span<const std::uint8_t> label_slice(std::size_t z) const {
    return std::span<const std::uint8_t>(labels).subspan(z * slice_size(), slice_size());
  }

  void validate() const {
    if (depth < 3) throw std::invalid_argument("volume " + id + ": depth must be at least 3");
    if (voxels.size() != depth * height * width || labels.size() != voxels.size()) {
      throw std::invalid_argument("volume " + id + ": buffer size does not match D*H*W");
    }
    for (float v : voxels)
      if (!std::isfinite(v)) throw std::invalid_argument("volume " + id + ": non-finite voxel");
    for (auto l : labels)
      if (l > num_classes) throw std::invalid_argument("volume " + id + ": label exceeds class count");
  }

  bool operator==(const Volume&) const = default;
};

struct SynthSpec {
  std::size_t volumes = 40;
  std::size_t depth = 12, height = 64, width = 64;
  std::size_t classes = 1;
  std::size_t ellipses_min = 1, ellipses_max = 1;  // per class
  double axis_min = 0.10, axis_max = 0.22;          // semi-axes, fraction of height
  double drift = 0.01;                              // random-walk step length, fraction of height
  double background = 0.2;
  double contrast = 0.3;  // class c sits at background + c * contrast
  double noise = 0.35;
  std::size_t blur = 1;  // box-blur radius in pixels
  std::uint64_t seed = 1234;

  void validate() const {
    if (depth < 3) throw ConfigError("depth must be at least 3");
    if (height < 8 || width < 8) throw ConfigError("height and width must be at least 8");
    if (classes < 1 || classes > 255) throw ConfigError("classes must be in [1, 255]");
    if (ellipses_min < 1 || ellipses_max < ellipses_min) throw ConfigError("bad ellipse count range");
    if (!(axis_min > 0 && axis_max >= axis_min && axis_max < 0.5)) {
      throw ConfigError("axis range must satisfy 0 < axis_min <= axis_max < 0.5");
    }
    if (!(drift >= 0 && drift <= 0.1)) throw ConfigError("drift must be in [0, 0.1]");
    if (!(noise >= 0)) throw ConfigError("noise must be non-negative");
  }
};

inline KeyValues to_kv(const SynthSpec& s) {
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  return {{"volumes", std::to_string(s.volumes)},       {"depth", std::to_string(s.depth)},
          {"height", std::to_string(s.height)},         {"width", std::to_string(s.width)},
          {"classes", std::to_string(s.classes)},       {"ellipses_min", std::to_string(s.ellipses_min)},
          {"ellipses_max", std::to_string(s.ellipses_max)}, {"axis_min", num(s.axis_min)},
          {"axis_max", num(s.axis_max)},                {"drift", num(s.drift)},
          {"background", num(s.background)},            {"contrast", num(s.contrast)},
          {"noise", num(s.noise)},                      {"blur", std::to_string(s.blur)},
          {"data_seed", std::to_string(s.seed)}};
}

/// Reads whichever generator keys are present, leaving others at `base`.
inline SynthSpec synth_spec_from_kv(const KeyValues& kv, SynthSpec base = {}) {
  auto size = [&](const char* k, std::size_t& dst) {
    if (!kv.count(k)) return;
    const auto v = kv_int(kv, k);
    if (v < 0) throw ConfigError(std::string(k) + " must be non-negative");
    dst = static_cast<std::size_t>(v);
  };
  auto real = [&](const char* k, double& dst) {
    if (kv.count(k)) dst = kv_double(kv, k);
  };
  size("volumes", base.volumes);
  size("depth", base.depth);
  size("height", base.height);
  size("width", base.width);
  size("classes", base.classes);
  size("ellipses_min", base.ellipses_min);
  size("ellipses_max", base.ellipses_max);
  real("axis_min", base.axis_min);
  real("axis_max", base.axis_max);
  real("drift", base.drift);
  real("background", base.background);
  real("contrast", base.contrast);
  real("noise", base.noise);
  size("blur", base.blur);
  if (kv.count("data_seed")) base.seed = static_cast<std::uint64_t>(kv_int(kv, "data_seed"));
  base.validate();
  return base;
}

namespace detail {

struct Ellipse {
  double cy, cx, ay, ax, angle;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
  }
};

inline void box_blur(std::vector<float>& img, std::size_t H, std::size_t W, std::size_t r) {
  if (r == 0) return;
  const auto R = static_cast<long>(r);
  std::vector<float> tmp(img.size());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0;
      int n = 0;
      for (long d = -R; d <= R; ++d) {
        const long xx = static_cast<long>(x) + d;
        if (xx < 0 || xx >= static_cast<long>(W)) continue;
        s += img[y * W + xx];
        ++n;
      }
      tmp[y * W + x] = static_cast<float>(s / n);
    }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0;
      int n = 0;
      for (long d = -R; d <= R; ++d) {
        const long yy = static_cast<long>(y) + d;
        if (yy < 0 || yy >= static_cast<long>(H)) continue;
        s += tmp[yy * W + x];
        ++n;
      }
      img[y * W + x] = static_cast<float>(s / n);
    }
}

}  // namespace detail

/// One synthetic volume. Each class owns one or more ellipses whose center,
/// semi-axes and rotation follow a clamped random walk along z; intensities
/// are background + class contrast + Gaussian noise, then box-blurred.
/// Labels are the ellipse interiors before noise. Deterministic per
/// (spec.seed, index).
inline Volume generate_volume(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  CounterRng rng(derive_stream(spec.seed, index));
  Volume v;
  v.id = "vol" + std::to_string(index);
  v.depth = spec.depth;
  v.height = spec.height;
  v.width = spec.width;
  v.num_classes = spec.classes;
  v.voxels.assign(spec.depth * spec.height * spec.width, 0.f);
  v.labels.assign(v.voxels.size(), 0);

  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
  const double amin = std::max(1.0, spec.axis_min * H), amax = std::max(amin, spec.axis_max * H);
  const double step = spec.drift * H;

  struct Walker {
    std::size_t cls;
    detail::Ellipse e;
  };
  std::vector<Walker> walkers;
  for (std::size_t c = 1; c <= spec.classes; ++c) {
    const auto n = spec.ellipses_min + rng.below(spec.ellipses_max - spec.ellipses_min + 1);
    for (std::size_t k = 0; k < n; ++k) {
      detail::Ellipse e;
      e.ay = rng.uniform(amin, amax);
      e.ax = rng.uniform(amin, amax);
      e.cy = rng.uniform(amax + 1, H - amax - 1);
      e.cx = rng.uniform(amax + 1, W - amax - 1);
      e.angle = rng.uniform(0, std::numbers::pi);
      walkers.push_back({c, e});
    }
  }

  const std::size_t HW = spec.height * spec.width;
  std::vector<float> img(HW);
  for (std::size_t z = 0; z < spec.depth; ++z) {
    if (z > 0) {
      for (auto& w : walkers) {
        auto& e = w.e;
        const double dir = rng.uniform(0, 2 * std::numbers::pi);
        e.cy = std::clamp(e.cy + step * std::sin(dir), amax + 1, H - amax - 1);
        e.cx = std::clamp(e.cx + step * std::cos(dir), amax + 1, W - amax - 1);
        e.ay = std::clamp(e.ay + (rng.uniform(0, 1) < 0.5 ? -0.5 : 0.5) * step, amin, amax);
        e.ax = std::clamp(e.ax + (rng.uniform(0, 1) < 0.5 ? -0.5 : 0.5) * step, amin, amax);
      }
    }
    std::uint8_t* lab = v.labels.data() + z * HW;
    for (const auto& w : walkers)
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x)
          if (w.e.contains(static_cast<double>(y), static_cast<double>(x))) {
            lab[y * spec.width + x] = static_cast<std::uint8_t>(w.cls);
          }
    for (std::size_t i = 0; i < HW; ++i) {
      img[i] = static_cast<float>(spec.background + spec.contrast * lab[i] +
                                  (spec.noise > 0 ? spec.noise * rng.normal() : 0.0));
    }
    detail::box_blur(img, spec.height, spec.width, spec.blur);
    std::copy(img.begin(), img.end(), v.voxels.begin() + z * HW);
  }
  return v;
}

inline std::vector<Volume> generate_corpus(const SynthSpec& spec) {
  std::vector<Volume> out;
  out.reserve(spec.volumes);
  for (std::size_t i = 0; i < spec.volumes; ++i) out.push_back(generate_volume(spec, i));
  return out;
}

/// (I - min) / (max - min) over the whole input; a constant input maps to zeros.
template <typename T>
std::vector<T> minmax_normalize(std::span<const T> values) {
  std::vector<T> out(values.size(), T(0));
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const T mn = *lo, mx = *hi;
  if (!(mx > mn)) return out;
  const T range = mx - mn;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mn) / range;
  return out;
}

struct SliceTriplet {
  std::string volume;
  std::size_t center = 0;  // z of S2
  std::size_t height = 0, width = 0, num_classes = 1;
  std::vector<float> x;  // 3*H*W, normalized
  std::vector<float> y;  // 3*C*H*W, one-hot foreground per class
};

/// Bilinear (half-pixel) resampling of one image.
inline std::vector<float> resize_bilinear(std::span<const float> img, std::size_t H, std::size_t W,
                                          std::size_t Ho, std::size_t Wo) {
  std::vector<float> out(Ho * Wo);
  for (std::size_t y = 0; y < Ho; ++y) {
    double sy = (y + 0.5) * static_cast<double>(H) / Ho - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = sy - y0;
    for (std::size_t x = 0; x < Wo; ++x) {
      double sx = (x + 0.5) * static_cast<double>(W) / Wo - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = sx - x0;
      const double top = img[y0 * W + x0] * (1 - wx) + img[y0 * W + x1] * wx;
      const double bot = img[y1 * W + x0] * (1 - wx) + img[y1 * W + x1] * wx;
      out[y * Wo + x] = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

inline std::vector<std::uint8_t> resize_nearest(std::span<const std::uint8_t> img, std::size_t H,
                                                std::size_t W, std::size_t Ho, std::size_t Wo) {
  std::vector<std::uint8_t> out(Ho * Wo);
  for (std::size_t y = 0; y < Ho; ++y) {
    const std::size_t sy = std::min(H - 1, static_cast<std::size_t>((y + 0.5) * H / Ho));
    for (std::size_t x = 0; x < Wo; ++x) {
      const std::size_t sx = std::min(W - 1, static_cast<std::size_t>((x + 0.5) * W / Wo));
      out[y * Wo + x] = img[sy * W + sx];
    }
  }
  return out;
}

/// Resamples every slice to size x size (images bilinear, labels nearest).
inline Volume resize_volume(const Volume& v, std::size_t size) {
  if (v.height == size && v.width == size) return v;
  Volume r = v;
  r.height = r.width = size;
  r.spacing[1] = v.spacing[1] * static_cast<float>(v.height) / static_cast<float>(size);
  r.spacing[2] = v.spacing[2] * static_cast<float>(v.width) / static_cast<float>(size);
  r.voxels.clear();
  r.labels.clear();
  for (std::size_t z = 0; z < v.depth; ++z) {
    auto img = resize_bilinear(v.slice(z), v.height, v.width, size, size);
    auto lab = resize_nearest(v.label_slice(z), v.height, v.width, size, size);
    r.voxels.insert(r.voxels.end(), img.begin(), img.end());
    r.labels.insert(r.labels.end(), lab.begin(), lab.end());
  }
  return r;
}

/// One triplet per interior slice z in [1, D-2]; intensities are min-max
/// normalized over the whole volume.
inline std::vector<SliceTriplet> make_triplets(const Volume& v) {
  v.validate();
  const auto norm = minmax_normalize<float>(v.voxels);
  const std::size_t HW = v.slice_size(), C = v.num_classes;
  std::vector<SliceTriplet> out;
  for (std::size_t z = 1; z + 1 < v.depth; ++z) {
    SliceTriplet t;
    t.volume = v.id;
    t.center = z;
    t.height = v.height;
    t.width = v.width;
    t.num_classes = C;
    t.x.assign(norm.begin() + (z - 1) * HW, norm.begin() + (z + 2) * HW);
    t.y.assign(3 * C * HW, 0.f);
    for (std::size_t s = 0; s < 3; ++s) {
      const auto lab = v.label_slice(z - 1 + s);
      for (std::size_t i = 0; i < HW; ++i)
        if (lab[i] > 0) t.y[(s * C + lab[i] - 1) * HW + i] = 1.f;
    }
    out.push_back(std::move(t));
  }
  return out;
}

struct SplitRatios {
  double train = 7, val = 1, test = 2;
};

struct Split {
  std::vector<std::size_t> train, val, test;  // indices into the volume list
};

/// Volume-level split after a seeded shuffle. Validation and test sizes are
/// rounded from the ratios; training takes the remainder.
inline Split split_dataset(std::size_t n, SplitRatios r = {}, std::uint64_t seed = 0) {
  const double total = r.train + r.val + r.test;
  if (!(total > 0)) throw std::invalid_argument("split ratios must be positive");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  CounterRng rng(derive_stream(seed, 0x5u));
  shuffle(idx, rng);
  const auto n_test = static_cast<std::size_t>(std::llround(n * r.test / total));
  const auto n_val = std::min(n - n_test, static_cast<std::size_t>(std::llround(n * r.val / total)));
  Split s;
  s.test.assign(idx.begin(), idx.begin() + n_test);
  s.val.assign(idx.begin() + n_test, idx.begin() + n_test + n_val);
  s.train.assign(idx.begin() + n_test + n_val, idx.end());
  return s;
}

inline constexpr std::uint32_t kVolumeVersion = 1;

inline void write_volume(const std::string& path, const Volume& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("LGSV", 4);
  io::put<std::uint32_t>(os, kVolumeVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.depth));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.height));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.width));
  for (float s : v.spacing) io::put<float>(os, s);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v.num_classes));
  os.write(reinterpret_cast<const char*>(v.voxels.data()),
           static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  os.write(reinterpret_cast<const char*>(v.labels.data()), static_cast<std::streamsize>(v.labels.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Volume read_volume(const std::string& path) {
  auto bytes = io::read_file(path);
  const std::size_t actual = bytes.size();
  io::Reader r(std::move(bytes), path);
  if (r.str(4) != "LGSV") throw FormatError(path + ": bad magic, not an LGSV volume");
  const auto version = r.get<std::uint32_t>();
  if (version != kVolumeVersion) throw FormatError(path + ": unsupported volume version " + std::to_string(version));
  Volume v;
  v.id = std::filesystem::path(path).stem().string();
  v.depth = r.get<std::uint32_t>();
  v.height = r.get<std::uint32_t>();
  v.width = r.get<std::uint32_t>();
  for (auto& s : v.spacing) s = r.get<float>();
  v.num_classes = r.get<std::uint32_t>();
  const std::size_t n = v.depth * v.height * v.width;
  const std::size_t expected = 4 + 4 * 4 + 3 * 4 + 4 + n * 5;
  if (actual != expected) {
    throw FormatError(path + ": expected " + std::to_string(expected) + " bytes, found " + std::to_string(actual));
  }
  v.voxels.resize(n);
  v.labels.resize(n);
  r.array(v.voxels.data(), n);
  r.array(v.labels.data(), n);
  return v;
}

/// Sorted list of *.lgsv files in a directory.
inline std::vector<std::string> list_volumes(const std::string& dir) {
  std::vector<std::string> files;
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".lgsv") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  return files;
}

/// Binary 8-bit PGM: "P5\n<W> <H>\n255\n" followed by W*H bytes.
inline void write_pgm(const std::string& path, std::size_t height, std::size_t width,
                      std::span<const std::uint8_t> pixels) {
  if (pixels.size() != height * width) throw std::invalid_argument("PGM pixel count does not match size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

/// Binary mask as a 0/255 PGM.
inline void export_mask(const std::string& path, std::size_t height, std::size_t width,
                        std::span<const std::uint8_t> mask) {
  std::vector<std::uint8_t> px(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) px[i] = mask[i] ? 255 : 0;
  write_pgm(path, height, width, px);
}

}  // namespace lgsa
