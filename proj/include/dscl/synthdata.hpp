#pragma once

// Procedural long-tailed image sets. Each class owns one identity motif and borrows
// `sharing_degree` part motifs from a common pool, so visual patterns recur across
// classes and tail classes can inherit features learned on head classes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dscl/box.hpp"
#include "dscl/errors.hpp"
#include "dscl/parallel.hpp"
#include "dscl/rng.hpp"
#include "dscl/tensor.hpp"

namespace dscl {

using ClassId = std::size_t;

struct Motif {
  std::size_t size = 8;
  std::size_t channels = 3;
  std::vector<double> pixels;  // size x size x channels
  std::vector<double> alpha;   // size x size, blending mask
};

struct PatternBank {
  std::vector<Motif> motifs;
  // class -> motif ids; entry 0 is the class's own motif.
  std::vector<std::vector<std::size_t>> sharing_map;
  std::size_t head_classes = 0;
  std::size_t sharing_degree = 0;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return sharing_map.size(); }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const Motif& m : motifs) {
      mix(m.pixels.data(), m.pixels.size() * sizeof(double));
      mix(m.alpha.data(), m.alpha.size() * sizeof(double));
    }
    for (const auto& ids : sharing_map) {
      for (std::size_t id : ids) {
        const std::uint64_t v = id;
        mix(&v, sizeof v);
      }
      const std::uint64_t sep = ~0ULL;
      mix(&sep, sizeof sep);
    }
    return h;
  }
};

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

inline Motif make_motif(std::size_t size, std::size_t channels, Rng& rng) {
  Motif m;
  m.size = size;
  m.channels = channels;
  m.pixels.resize(size * size * channels);
  m.alpha.resize(size * size);
  std::vector<double> ca(channels), cb(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    ca[c] = rng.uniform();
    cb[c] = rng.uniform();
  }
  const auto pattern = rng.index(4);
  const auto shape = rng.index(4);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(1.0, 3.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double half = 0.5 * static_cast<double>(size - 1);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) - half) / (half + 0.5);
      const double v = (static_cast<double>(y) - half) / (half + 0.5);
      double t = 0.0;
      switch (pattern) {
        case 0:  // stripes
          t = 0.5 + 0.5 * std::sin(std::numbers::pi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
          break;
        case 1:  // checker
          t = ((static_cast<int>(std::floor((u + 1.0) * freq)) + static_cast<int>(std::floor((v + 1.0) * freq))) % 2)
                  ? 1.0
                  : 0.0;
          break;
        case 2:  // rings
          t = 0.5 + 0.5 * std::cos(std::numbers::pi * freq * std::hypot(u, v) * 1.5 + phase);
          break;
        default:  // linear ramp
          t = std::clamp(0.5 + 0.5 * (u * std::cos(theta) + v * std::sin(theta)), 0.0, 1.0);
          break;
      }
      double a = 1.0;
      switch (shape) {
        case 1:
          a = std::hypot(u, v) <= 1.0 ? 1.0 : 0.0;
          break;
        case 2:
          a = std::abs(u) + std::abs(v) <= 1.0 ? 1.0 : 0.0;
          break;
        case 3:
          a = (std::abs(u) <= 0.35 || std::abs(v) <= 0.35) ? 1.0 : 0.0;
          break;
        default:
          break;
      }
      m.alpha[y * size + x] = a;
      for (std::size_t c = 0; c < channels; ++c) {
        m.pixels[(y * size + x) * channels + c] = std::clamp(ca[c] + (cb[c] - ca[c]) * t, 0.0, 1.0);
      }
    }
  }
  return m;
}

}  // namespace detail

inline PatternBank build_pattern_bank(std::size_t num_motifs, std::size_t num_classes, std::size_t sharing_degree,
                                      std::uint64_t seed, std::size_t motif_size = 8, std::size_t channels = 3) {
  if (num_classes < 2) throw SpecError("pattern bank needs at least 2 classes");
  if (num_classes > num_motifs) {
    throw SpecError("infeasible pattern bank: " + std::to_string(num_classes) + " classes need their own motif but only " +
                    std::to_string(num_motifs) + " motifs exist");
  }
  const std::size_t pool = num_motifs - num_classes;
  if (sharing_degree > pool) {
    throw SpecError("infeasible pattern bank: sharing degree " + std::to_string(sharing_degree) + " exceeds the " +
                    std::to_string(pool) + " shared part motifs");
  }
  PatternBank bank;
  bank.seed = seed;
  bank.sharing_degree = sharing_degree;
  bank.head_classes = (num_classes + 1) / 2;
  Rng rng(derive_seed(seed, {0x6d6f74}));
  for (std::size_t i = 0; i < num_motifs; ++i) bank.motifs.push_back(detail::make_motif(motif_size, channels, rng));

  std::vector<char> head_parts(num_motifs, 0);
  bank.sharing_map.resize(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto& ids = bank.sharing_map[k];
    const bool tail = k >= bank.head_classes;
    for (int attempt = 0;; ++attempt) {
      ids.assign(1, k);
      std::vector<std::size_t> parts(pool);
      for (std::size_t i = 0; i < pool; ++i) parts[i] = num_classes + i;
      for (std::size_t j = 0; j < sharing_degree; ++j) {
        const std::size_t pick = j + static_cast<std::size_t>(rng.index(pool - j));
        std::swap(parts[j], parts[pick]);
        ids.push_back(parts[j]);
      }
      if (!tail || sharing_degree == 0) break;
      if (std::any_of(ids.begin() + 1, ids.end(), [&](std::size_t id) { return head_parts[id] != 0; })) break;
      if (attempt > 1000) throw SpecError("could not link tail class " + std::to_string(k) + " to any head class");
    }
    if (!tail)
      for (std::size_t j = 1; j < ids.size(); ++j) head_parts[ids[j]] = 1;
  }
  return bank;
}

// Mean |A ∩ B| over class pairs for independent uniform draws of `degree` parts from the pool.
inline double expected_pairwise_overlap(std::size_t num_motifs, std::size_t num_classes, std::size_t sharing_degree) {
  const double pool = static_cast<double>(num_motifs - num_classes);
  return pool > 0 ? static_cast<double>(sharing_degree * sharing_degree) / pool : 0.0;
}

struct DatasetSpec {
  std::vector<std::size_t> class_counts;  // n^k, non-increasing
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t test_per_class = 20;
  std::uint64_t seed = 0;
  std::size_t num_motifs = 40;
  std::size_t sharing_degree = 2;
  std::size_t motif_size = 12;

  std::size_t num_classes() const { return class_counts.size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : class_counts) n += c;
    return n;
  }
  double imbalance_ratio() const {
    return static_cast<double>(class_counts.front()) / static_cast<double>(class_counts.back());
  }

  // n^k = round(n^1 * ratio^(-(k-1)/(K-1))); the last class is pinned to n^1/ratio.
  static DatasetSpec exponential(std::size_t num_classes, std::size_t head_count, double ratio) {
    if (num_classes < 2 || head_count < 1 || !(ratio >= 1.0)) {
      throw SpecError("exponential profile needs K >= 2, n1 >= 1, ratio >= 1");
    }
    DatasetSpec s;
    s.class_counts.resize(num_classes);
    for (std::size_t k = 0; k < num_classes; ++k) {
      const double e = static_cast<double>(k) / static_cast<double>(num_classes - 1);
      s.class_counts[k] = static_cast<std::size_t>(std::llround(static_cast<double>(head_count) * std::pow(ratio, -e)));
    }
    s.class_counts.back() = static_cast<std::size_t>(std::llround(static_cast<double>(head_count) / ratio));
    s.validate();
    return s;
  }

  static DatasetSpec desk_default() {
    DatasetSpec s = exponential(20, 500, 100.0);
    return s;
  }

  void validate() const {
    if (class_counts.size() < 2) throw SpecError("dataset needs at least 2 classes");
    for (std::size_t k = 0; k < class_counts.size(); ++k) {
      if (class_counts[k] == 0) throw SpecError("class " + std::to_string(k) + " has no samples");
      if (k > 0 && class_counts[k] > class_counts[k - 1]) {
        throw SpecError("class cardinalities must be non-increasing (class " + std::to_string(k) + ")");
      }
    }
    if (channels == 0) throw SpecError("channels must be positive");
    if (image_size < motif_size) {
      throw SpecError("image size " + std::to_string(image_size) + " cannot hold a " + std::to_string(motif_size) +
                      "-pixel motif");
    }
  }
};

struct MotifPlacement {
  std::size_t motif = 0;
  PatchBox box;
};

struct SynthImage {
  Tensor pixels;  // H x W x C in [0, 1]
  ClassId label = 0;
  std::vector<MotifPlacement> placements;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
  std::size_t channels() const { return pixels.dim(2); }
};

struct SynthDataset {
  DatasetSpec spec;
  std::uint64_t bank_hash = 0;
  std::vector<SynthImage> train;
  std::vector<SynthImage> test;

  std::vector<ClassId> train_labels() const {
    std::vector<ClassId> y;
    y.reserve(train.size());
    for (const auto& im : train) y.push_back(im.label);
    return y;
  }
};

namespace detail {

// Two octaves of smoothly interpolated lattice noise per channel.
inline void paint_background(Tensor& px, Rng& rng) {
  const std::size_t H = px.dim(0), W = px.dim(1), C = px.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    const double base = rng.uniform(0.4, 0.6);
    for (const auto& [cells, amp] : {std::pair<std::size_t, double>{4, 0.15}, {8, 0.08}}) {
      std::vector<double> lattice((cells + 1) * (cells + 1));
      for (double& v : lattice) v = rng.uniform(-amp, amp);
      for (std::size_t y = 0; y < H; ++y) {
        const double gy = static_cast<double>(y) * static_cast<double>(cells) / static_cast<double>(H);
        const std::size_t iy = static_cast<std::size_t>(gy);
        const double ty = smoothstep(gy - static_cast<double>(iy));
        for (std::size_t x = 0; x < W; ++x) {
          const double gx = static_cast<double>(x) * static_cast<double>(cells) / static_cast<double>(W);
          const std::size_t ix = static_cast<std::size_t>(gx);
          const double tx = smoothstep(gx - static_cast<double>(ix));
          const double a = lattice[iy * (cells + 1) + ix], b = lattice[iy * (cells + 1) + ix + 1];
          const double d = lattice[(iy + 1) * (cells + 1) + ix], e = lattice[(iy + 1) * (cells + 1) + ix + 1];
          const double top = a + (b - a) * tx, bot = d + (e - d) * tx;
          px[(y * W + x) * C + c] += top + (bot - top) * ty;
        }
      }
    }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) px[(y * W + x) * C + c] += base;
  }
}

inline SynthImage compose_image(const PatternBank& bank, const DatasetSpec& spec, ClassId label, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t S = spec.image_size, C = spec.channels;
  SynthImage img;
  img.label = label;
  img.pixels = Tensor(Shape{S, S, C}, 0.0);
  paint_background(img.pixels, rng);
  std::vector<std::size_t> ids = bank.sharing_map.at(label);
  rng.shuffle(ids);
  for (std::size_t id : ids) {
    const Motif& m = bank.motifs[id];
    const std::size_t top = static_cast<std::size_t>(rng.index(S - m.size + 1));
    const std::size_t left = static_cast<std::size_t>(rng.index(S - m.size + 1));
    for (std::size_t y = 0; y < m.size; ++y)
      for (std::size_t x = 0; x < m.size; ++x) {
        const double a = m.alpha[y * m.size + x];
        for (std::size_t c = 0; c < C; ++c) {
          double& p = img.pixels[((top + y) * S + left + x) * C + c];
          p = (1.0 - a) * p + a * m.pixels[(y * m.size + x) * m.channels + (c % m.channels)];
        }
      }
    const double s = static_cast<double>(S);
    img.placements.push_back({id, PatchBox{(static_cast<double>(left) + 0.5 * static_cast<double>(m.size)) / s,
                                           (static_cast<double>(top) + 0.5 * static_cast<double>(m.size)) / s,
                                           static_cast<double>(m.size) / s, static_cast<double>(m.size) / s}});
  }
  for (double& p : img.pixels.values()) {
    p = std::clamp(p + 0.03 * rng.normal(), 0.0, 1.0);
    p = static_cast<double>(static_cast<float>(p));  // storage precision
  }
  return img;
}

}  // namespace detail

// Pure function of (spec, bank): every image draws from its own (seed, split, index) stream,
// so the thread count never changes the output.
inline SynthDataset generate_dataset(const DatasetSpec& spec, const PatternBank& bank, std::size_t threads = 1) {
  spec.validate();
  if (bank.num_classes() != spec.num_classes()) {
    throw SpecError("pattern bank has " + std::to_string(bank.num_classes()) + " classes, spec has " +
                    std::to_string(spec.num_classes()));
  }
  for (const Motif& m : bank.motifs)
    if (m.size > spec.image_size) throw SpecError("image too small for motif of size " + std::to_string(m.size));

  SynthDataset ds;
  ds.spec = spec;
  ds.bank_hash = bank.hash();
  std::vector<ClassId> train_labels, test_labels;
  for (ClassId k = 0; k < spec.num_classes(); ++k) {
    train_labels.insert(train_labels.end(), spec.class_counts[k], k);
    test_labels.insert(test_labels.end(), spec.test_per_class, k);
  }
  ds.train.resize(train_labels.size());
  ds.test.resize(test_labels.size());
  parallel_for(ds.train.size(), threads, [&](std::size_t i) {
    ds.train[i] = detail::compose_image(bank, spec, train_labels[i], derive_seed(spec.seed, {1, i}));
  });
  parallel_for(ds.test.size(), threads, [&](std::size_t i) {
    ds.test[i] = detail::compose_image(bank, spec, test_labels[i], derive_seed(spec.seed, {2, i}));
  });
  return ds;
}

inline PatternBank bank_for(const DatasetSpec& spec) {
  return build_pattern_bank(spec.num_motifs, spec.num_classes(), spec.sharing_degree, spec.seed, spec.motif_size,
                            spec.channels);
}

// Raw-pixel nearest-centroid accuracy on the test split; a separability sanity figure.
inline double nearest_centroid_accuracy(const SynthDataset& ds) {
  const std::size_t K = ds.spec.num_classes();
  const std::size_t D = ds.train.front().pixels.size();
  std::vector<std::vector<double>> centroids(K, std::vector<double>(D, 0.0));
  std::vector<double> counts(K, 0.0);
  for (const auto& im : ds.train) {
    for (std::size_t i = 0; i < D; ++i) centroids[im.label][i] += im.pixels[i];
    counts[im.label] += 1.0;
  }
  for (std::size_t k = 0; k < K; ++k)
    for (double& v : centroids[k]) v /= counts[k];
  std::size_t correct = 0;
  for (const auto& im : ds.test) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < D; ++i) d += (im.pixels[i] - centroids[k][i]) * (im.pixels[i] - centroids[k][i]);
      if (d < best) {
        best = d;
        arg = k;
      }
    }
    correct += arg == im.label;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.test.size());
}

// ---------------------------------------------------------------------------
// Cropping, patch boxes and augmentation

// Bilinear resample of `box` to out_size x out_size (pixel centers, edge-clamped).
inline Tensor crop_resize(const Tensor& pixels, const PatchBox& box, std::size_t out_size) {
  require_rank(pixels, 3, "crop_resize");
  const std::size_t H = pixels.dim(0), W = pixels.dim(1), C = pixels.dim(2);
  Tensor out(Shape{out_size, out_size, C});
  const double sx = box.w * static_cast<double>(W) / static_cast<double>(out_size);
  const double sy = box.h * static_cast<double>(H) / static_cast<double>(out_size);
  const double ox = box.x0() * static_cast<double>(W);
  const double oy = box.y0() * static_cast<double>(H);
  for (std::size_t i = 0; i < out_size; ++i) {
    const double fy = std::clamp(oy + (static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t j = 0; j < out_size; ++j) {
      const double fx = std::clamp(ox + (static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double a = pixels[(y0 * W + x0) * C + c], b = pixels[(y0 * W + x1) * C + c];
        const double d = pixels[(y1 * W + x0) * C + c], e = pixels[(y1 * W + x1) * C + c];
        const double top = a + (b - a) * tx;
        const double bot = d + (e - d) * tx;
        out[(i * out_size + j) * C + c] = std::clamp(top + (bot - top) * ty, 0.0, 1.0);
      }
    }
  }
  return out;
}

inline SynthImage crop_resize(const SynthImage& image, const PatchBox& box, std::size_t out_size) {
  SynthImage out;
  out.pixels = crop_resize(image.pixels, box, out_size);
  out.label = image.label;
  return out;
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

namespace detail {
inline std::optional<PatchBox> try_box(Rng& rng, Range scale, Range aspect) {
  const double s = rng.uniform(scale.lo, scale.hi);
  const double r = std::exp(rng.uniform(std::log(aspect.lo), std::log(aspect.hi)));
  const double w = std::sqrt(s * r);
  const double h = std::sqrt(s / r);
  if (w > 1.0 || h > 1.0) return std::nullopt;
  return PatchBox{rng.uniform(0.5 * w, 1.0 - 0.5 * w), rng.uniform(0.5 * h, 1.0 - 0.5 * h), w, h};
}

inline void check_ranges(Range scale, Range aspect) {
  if (!(scale.lo > 0.0) || scale.lo > scale.hi || scale.hi > 1.0) {
    throw SamplingError("box scale range must satisfy 0 < min <= max <= 1");
  }
  if (!(aspect.lo > 0.0) || aspect.lo > aspect.hi) throw SamplingError("aspect range must satisfy 0 < min <= max");
}
}  // namespace detail

inline std::vector<PatchBox> sample_patch_boxes(std::size_t count, Range scale, Range aspect, Rng& rng) {
  if (count == 0) throw SamplingError("need at least one patch box");
  detail::check_ranges(scale, aspect);
  std::vector<PatchBox> boxes;
  boxes.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    std::optional<PatchBox> b;
    for (int attempt = 0; attempt < 100 && !b; ++attempt) b = detail::try_box(rng, scale, aspect);
    if (!b) throw SamplingError("no box fits the unit square after 100 attempts");
    boxes.push_back(*b);
  }
  return boxes;
}

inline std::vector<PatchBox> sample_patch_boxes(std::size_t count, Range scale, Range aspect, std::uint64_t seed) {
  Rng rng(seed);
  return sample_patch_boxes(count, scale, aspect, rng);
}

struct AugmentationPolicy {
  Range crop_scale{0.2, 1.0};
  Range crop_aspect{3.0 / 4.0, 4.0 / 3.0};
  double flip_probability = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  std::size_t out_size = 32;

  static AugmentationPolicy identity(std::size_t out_size) {
    return {{1.0, 1.0}, {1.0, 1.0}, 0.0, 0.0, 0.0, out_size};
  }
};

struct ViewParams {
  PatchBox crop;
  bool flipped = false;
  double brightness = 1.0;
  double contrast = 1.0;
};

struct View {
  Tensor pixels;  // out x out x C
  ViewParams params;
};

inline Tensor mirror_horizontal(const Tensor& px) {
  const std::size_t H = px.dim(0), W = px.dim(1), C = px.dim(2);
  Tensor out(px.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) out[(y * W + x) * C + c] = px[(y * W + (W - 1 - x)) * C + c];
  return out;
}

inline View augment_view(const SynthImage& image, const AugmentationPolicy& policy, Rng& rng) {
  detail::check_ranges(policy.crop_scale, policy.crop_aspect);
  View v;
  std::optional<PatchBox> crop;
  for (int attempt = 0; attempt < 10 && !crop; ++attempt) crop = detail::try_box(rng, policy.crop_scale, policy.crop_aspect);
  v.params.crop = crop.value_or(PatchBox::full());
  v.pixels = crop_resize(image.pixels, v.params.crop, policy.out_size);
  v.params.flipped = policy.flip_probability > 0.0 && rng.bernoulli(policy.flip_probability);
  if (v.params.flipped) v.pixels = mirror_horizontal(v.pixels);
  if (policy.brightness > 0.0) {
    v.params.brightness = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness);
    for (double& p : v.pixels.values()) p = std::clamp(p * v.params.brightness, 0.0, 1.0);
  }
  if (policy.contrast > 0.0) {
    v.params.contrast = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast);
    double m = 0.0;
    for (double p : v.pixels.values()) m += p;
    m /= static_cast<double>(v.pixels.size());
    for (double& p : v.pixels.values()) p = std::clamp((p - m) * v.params.contrast + m, 0.0, 1.0);
  }
  return v;
}

inline std::pair<View, View> augment_two_views(const SynthImage& image, const AugmentationPolicy& policy,
                                               std::uint64_t seed) {
  Rng ra(derive_seed(seed, {0}));
  Rng rb(derive_seed(seed, {1}));
  View a = augment_view(image, policy, ra);
  View b = augment_view(image, policy, rb);
  return {std::move(a), std::move(b)};
}

}  // namespace dscl
