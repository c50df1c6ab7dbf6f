#include "encvit/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "encvit/bytes.hpp"
#include "encvit/rng.hpp"

namespace encvit {
namespace {

constexpr const char* kModule = "dataset";
constexpr std::uint16_t kDatasetVersion = 1;
constexpr std::uint32_t kSide = 32;

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double x = c * (1 - std::abs(std::fmod(h / 60.0, 2.0) - 1));
  const double m = v - c;
  Rgb out{0, 0, 0};
  switch (static_cast<int>(h / 60.0)) {
    case 0: out = {c, x, 0}; break;
    case 1: out = {x, c, 0}; break;
    case 2: out = {0, c, x}; break;
    case 3: out = {0, x, c}; break;
    case 4: out = {x, 0, c}; break;
    default: out = {c, 0, x}; break;
  }
  return {out.r + m, out.g + m, out.b + m};
}

// Hue in degrees and saturation of an RGB triple.
std::pair<double, double> rgb_to_hs(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double c = mx - mn;
  if (c <= 1e-9 || mx <= 1e-9) return {0.0, 0.0};
  double h;
  if (mx == r)
    h = 60.0 * std::fmod((g - b) / c, 6.0);
  else if (mx == g)
    h = 60.0 * ((b - r) / c + 2.0);
  else
    h = 60.0 * ((r - g) / c + 4.0);
  if (h < 0) h += 360.0;
  return {h, c / mx};
}

bool inside(int shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0:  // disk
      return dx * dx + dy * dy <= r * r;
    case 1:  // horizontal bar
      return ax <= r && ay <= 0.38 * r;
    case 2: {  // upward triangle with apex at -r, base at +0.7r
      if (dy < -r || dy > 0.7 * r) return false;
      const double half = (dy + r) / 1.7 * 0.95;
      return ax <= half;
    }
    case 3: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    default:  // cross
      return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
  }
}

void render(Rng& rng, int cls, float* out) {
  const int shape = cls % 5;
  const int family = cls / 5;

  // Background: random muted color with a linear gradient.
  const Rgb bg = hsv_to_rgb(rng.uniform(0, 360), rng.uniform(0.0, 0.4),
                            rng.uniform(0.15, 0.45));
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);

  const double hue = family == 0 ? rng.uniform(10, 70) : rng.uniform(150, 210);
  const Rgb fg = hsv_to_rgb(hue, rng.uniform(0.4, 0.75), rng.uniform(0.55, 0.85));

  const double r = rng.uniform(7.0, 11.0);
  const double cx = 15.5 + rng.uniform(-3.5, 3.5);
  const double cy = 15.5 + rng.uniform(-3.5, 3.5);
  const double noise = 0.02;

  for (std::uint32_t y = 0; y < kSide; ++y) {
    for (std::uint32_t x = 0; x < kSide; ++x) {
      // 2x2 supersampled coverage for anti-aliased edges.
      int hits = 0;
      for (double sy : {0.25, 0.75})
        for (double sx : {0.25, 0.75})
          hits += inside(shape, x + sx - cx, y + sy - cy, r);
      const double a = hits / 4.0;
      const double shade = gx * (x / 31.0 - 0.5) + gy * (y / 31.0 - 0.5);
      const std::array<double, 3> px{bg.r + shade, bg.g + shade, bg.b + shade};
      const std::array<double, 3> pf{fg.r, fg.g, fg.b};
      for (int c = 0; c < 3; ++c) {
        double v = px[c] * (1 - a) + pf[c] * a + noise * rng.normal();
        v = std::clamp(v, 0.0, 1.0);
        out[(c * kSide + y) * kSide + x] =
            static_cast<float>(std::lround(v * 255.0)) / 255.0f;
      }
    }
  }
}

Dataset make_split(std::uint64_t seed, std::uint64_t stream, std::size_t n,
                   const std::string& split) {
  detail::require(n > 0, kModule, "split size must be positive");
  Dataset ds;
  ds.split = split;
  ds.num_classes = kSyntheticClasses;
  ds.provenance = "synthetic-shapes:v1:seed=" + std::to_string(seed);
  ds.images = Tensor<float>({n, 3, kSide, kSide});
  ds.labels.resize(n);
  std::vector<Label> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<Label>(i % kSyntheticClasses);
  Rng shuffle(derive_seed(seed, stream, ~std::uint64_t{0}));
  shuffle.shuffle(order.begin(), order.end());
  const std::size_t pixels = 3 * kSide * kSide;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, stream, i));
    ds.labels[i] = order[i];
    render(rng, order[i], ds.images.data().data() + i * pixels);
  }
  return ds;
}

}  // namespace

ImageGeometry Dataset::geometry() const {
  detail::require(images.rank() == 4, kModule, "images must be {N,C,H,W}");
  return {static_cast<std::uint32_t>(images.extent(1)),
          static_cast<std::uint32_t>(images.extent(2)),
          static_cast<std::uint32_t>(images.extent(3))};
}

Dataset Dataset::subset(std::size_t begin, std::size_t count) const {
  detail::require(count > 0 && begin + count <= size(), kModule,
                  "subset out of range");
  const std::size_t pixels = geometry().pixels();
  Dataset out;
  out.num_classes = num_classes;
  out.split = split;
  out.provenance = provenance + ":subset=" + std::to_string(begin) + "+" +
                   std::to_string(count);
  Shape shape = images.shape();
  shape[0] = count;
  out.images = Tensor<float>(
      shape, AlignedVector<float>(images.values().begin() + begin * pixels,
                                  images.values().begin() + (begin + count) * pixels));
  out.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
  return out;
}

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (Label y : labels) ++h.at(static_cast<std::size_t>(y));
  return h;
}

void Dataset::validate() const {
  detail::require(!labels.empty(), kModule, "dataset is empty");
  detail::require(images.rank() == 4 && images.extent(0) == labels.size(),
                  kModule, "image count does not match label count");
  detail::require(num_classes > 0, kModule, "num_classes must be positive");
  for (Label y : labels)
    detail::require(y >= 0 && static_cast<std::uint32_t>(y) < num_classes,
                    kModule, "label " + std::to_string(y) + " >= num_classes");
  for (float v : images.data())
    detail::require(v >= 0.0f && v <= 1.0f, kModule, "pixel outside [0,1]");
}

DatasetSplits gen_synthetic_dataset(std::uint64_t seed, std::size_t n_train,
                                    std::size_t n_test) {
  return {make_split(seed, 1, n_train, "train"), make_split(seed, 2, n_test, "test")};
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ds.validate();
  const ImageGeometry g = ds.geometry();
  ByteWriter w;
  w.raw("DSET");
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(g.channels);
  w.u32(g.height);
  w.u32(g.width);
  w.u16(static_cast<std::uint16_t>(ds.num_classes));
  w.u8(ds.split == "train" ? 0 : ds.split == "test" ? 1 : 2);
  w.u16(static_cast<std::uint16_t>(ds.provenance.size()));
  w.raw(ds.provenance);
  for (float v : ds.images.data())
    w.u8(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  for (Label y : ds.labels) w.u16(static_cast<std::uint16_t>(y));
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "dataset");
  if (r.str(4) != "DSET") throw ParseError("dataset: bad magic");
  if (r.u16() != kDatasetVersion) throw ParseError("dataset: unsupported version");
  const std::size_t n = r.u32();
  const ImageGeometry g{r.u32(), r.u32(), r.u32()};
  Dataset ds;
  ds.num_classes = r.u16();
  const std::uint8_t split = r.u8();
  ds.split = split == 0 ? "train" : split == 1 ? "test" : "other";
  ds.provenance = r.str(r.u16());
  if (n == 0 || g.pixels() == 0) throw ParseError("dataset: empty dataset");
  if (r.remaining() != n * g.pixels() + 2 * n)
    throw ParseError("dataset: truncated or oversized payload");
  AlignedVector<float> pixels(n * g.pixels());
  for (float& v : pixels) v = static_cast<float>(r.u8()) / 255.0f;
  ds.images = Tensor<float>({n, g.channels, g.height, g.width}, std::move(pixels));
  ds.labels.resize(n);
  for (Label& y : ds.labels) y = r.u16();
  for (Label y : ds.labels)
    if (static_cast<std::uint32_t>(y) >= ds.num_classes)
      throw InvalidInput("dataset: label " + std::to_string(y) + " >= num_classes " +
                         std::to_string(ds.num_classes));
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_dataset(ds));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path));
}

double hue_centroid_baseline(const Dataset& train, const Dataset& test) {
  constexpr int kBins = 12;
  auto features = [](const Dataset& ds, std::size_t i) {
    const ImageGeometry g = ds.geometry();
    detail::require(g.channels == 3, kModule, "hue baseline needs RGB images");
    const std::size_t hw = std::size_t{g.height} * g.width;
    const float* img = ds.images.data().data() + i * g.pixels();
    std::array<double, kBins> hist{};
    double total = 0;
    for (std::size_t p = 0; p < hw; ++p) {
      const auto [h, s] = rgb_to_hs(img[p], img[hw + p], img[2 * hw + p]);
      if (s < 0.45) continue;
      hist[static_cast<std::size_t>(h / (360.0 / kBins)) % kBins] += 1;
      total += 1;
    }
    // Majority hue as a one-hot vector.
    std::array<double, kBins> out{};
    if (total > 0)
      out[static_cast<std::size_t>(std::max_element(hist.begin(), hist.end()) -
                                   hist.begin())] = 1.0;
    return out;
  };
  std::vector<std::array<double, kBins>> centroid(train.num_classes);
  std::vector<double> count(train.num_classes, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto f = features(train, i);
    const auto y = static_cast<std::size_t>(train.labels[i]);
    for (int b = 0; b < kBins; ++b) centroid[y][b] += f[b];
    count[y] += 1;
  }
  for (std::size_t c = 0; c < centroid.size(); ++c)
    for (double& v : centroid[c]) v /= std::max(count[c], 1.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto f = features(test, i);
    double best = INFINITY;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < centroid.size(); ++c) {
      double d = 0;
      for (int b = 0; b < kBins; ++b) d += (f[b] - centroid[c][b]) * (f[b] - centroid[c][b]);
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    correct += static_cast<Label>(arg) == test.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace encvit
