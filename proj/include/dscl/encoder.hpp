#pragma once

// Backbone f (three strided 3x3 convs with relu), global mean pooling to v, and a
// two-layer projection head g shared by global and ROI-pooled features.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dscl/autograd.hpp"
#include "dscl/dataset_io.hpp"
#include "dscl/json_util.hpp"
#include "dscl/rng.hpp"
#include "dscl/synthdata.hpp"

namespace dscl {

struct EncoderConfig {
  std::size_t input_size = 32;
  std::size_t channels = 3;
  std::vector<std::size_t> conv_channels{16, 32, 64};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t head_hidden = 64;
  std::size_t d_proj = 32;
  std::size_t patch_size = 16;

  std::size_t feature_dim() const { return conv_channels.back(); }
  std::size_t total_stride() const {
    std::size_t s = 1;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) s *= stride;
    return s;
  }
  std::size_t map_size(std::size_t in) const {
    for (std::size_t i = 0; i < conv_channels.size(); ++i) in = (in + 2 * pad() - kernel) / stride + 1;
    return in;
  }
  std::size_t pad() const { return kernel / 2; }

  void validate() const {
    if (conv_channels.empty()) throw ConfigError("encoder: need at least one conv layer");
    if (kernel == 0 || kernel % 2 == 0) throw ConfigError("encoder: kernel must be odd");
    if (stride == 0) throw ConfigError("encoder: stride must be positive");
    if (d_proj == 0 || head_hidden == 0) throw ConfigError("encoder: head widths must be positive");
    if (input_size % total_stride() != 0) {
      throw ConfigError("encoder: input_size " + std::to_string(input_size) + " not divisible by total stride " +
                        std::to_string(total_stride()));
    }
    if (patch_size == 0 || patch_size % total_stride() != 0) {
      throw ConfigError("encoder: patch_size must be a positive multiple of the total stride");
    }
  }
};

inline Json encoder_config_to_json(const EncoderConfig& c) {
  return Json{{"input_size", c.input_size}, {"channels", c.channels},       {"conv_channels", c.conv_channels},
              {"kernel", c.kernel},         {"stride", c.stride},           {"head_hidden", c.head_hidden},
              {"d_proj", c.d_proj},         {"patch_size", c.patch_size}};
}

inline EncoderConfig encoder_config_from_json(const Json& j) {
  require_known_keys(j, "encoder",
                     {"input_size", "channels", "conv_channels", "kernel", "stride", "head_hidden", "d_proj", "patch_size"});
  EncoderConfig c;
  read_opt(j, "input_size", c.input_size, "encoder");
  read_opt(j, "channels", c.channels, "encoder");
  read_opt(j, "conv_channels", c.conv_channels, "encoder");
  read_opt(j, "kernel", c.kernel, "encoder");
  read_opt(j, "stride", c.stride, "encoder");
  read_opt(j, "head_hidden", c.head_hidden, "encoder");
  read_opt(j, "d_proj", c.d_proj, "encoder");
  read_opt(j, "patch_size", c.patch_size, "encoder");
  c.validate();
  return c;
}

struct EncoderParams {
  EncoderConfig config;
  std::uint64_t seed = 0;
  std::vector<Var> conv_w, conv_b;
  Var fc1_w, fc1_b, fc2_w, fc2_b;  // weights stored [in, out]

  // Fixed order used by optimizers, EMA and checkpoints.
  std::vector<Var> backbone() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      out.push_back(conv_w[i]);
      out.push_back(conv_b[i]);
    }
    return out;
  }
  std::vector<Var> head() const { return {fc1_w, fc1_b, fc2_w, fc2_b}; }
  std::vector<Var> all() const {
    auto out = backbone();
    for (auto& v : head()) out.push_back(v);
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      out.push_back("conv" + std::to_string(i) + ".weight");
      out.push_back("conv" + std::to_string(i) + ".bias");
    }
    for (const char* n : {"head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"}) out.emplace_back(n);
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : all()) n += v.size();
    return n;
  }

  void zero_grad() const {
    for (auto v : all()) v.zero_grad();
  }

  // Independent copy; `trainable` decides whether the copy records gradients.
  EncoderParams clone(bool trainable) const {
    EncoderParams c;
    c.config = config;
    c.seed = seed;
    auto mk = [&](const Var& v) { return Var(v.value(), trainable); };
    for (const auto& v : conv_w) c.conv_w.push_back(mk(v));
    for (const auto& v : conv_b) c.conv_b.push_back(mk(v));
    c.fc1_w = mk(fc1_w);
    c.fc1_b = mk(fc1_b);
    c.fc2_w = mk(fc2_w);
    c.fc2_b = mk(fc2_b);
    return c;
  }
};

namespace detail {
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}
}  // namespace detail

// Kaiming-uniform (fan-in, relu gain) weights, zero biases.
inline EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderParams p;
  p.config = config;
  p.seed = seed;
  Rng rng(derive_seed(seed, {0xE0}));
  std::size_t in = config.channels;
  const std::size_t k = config.kernel;
  for (std::size_t out : config.conv_channels) {
    p.conv_w.push_back(Var::parameter(detail::kaiming_uniform(Shape{out, in, k, k}, in * k * k, rng)));
    p.conv_b.push_back(Var::parameter(Tensor(Shape{out}, 0.0)));
    in = out;
  }
  p.fc1_w = Var::parameter(detail::kaiming_uniform(Shape{in, config.head_hidden}, in, rng));
  p.fc1_b = Var::parameter(Tensor(Shape{config.head_hidden}, 0.0));
  p.fc2_w = Var::parameter(detail::kaiming_uniform(Shape{config.head_hidden, config.d_proj}, config.head_hidden, rng));
  p.fc2_b = Var::parameter(Tensor(Shape{config.d_proj}, 0.0));
  return p;
}

// Stacks H x W x C images into an [N, C, H, W] batch.
inline Tensor to_batch(std::span<const Tensor* const> images) {
  if (images.empty()) throw StructuralError("to_batch: empty image list");
  require_rank(*images[0], 3, "to_batch");
  const std::size_t H = images[0]->dim(0), W = images[0]->dim(1), C = images[0]->dim(2);
  Tensor out(Shape{images.size(), C, H, W});
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->shape() != images[0]->shape()) {
      throw StructuralError("to_batch: image " + shape_str(images[n]->shape()) + " vs " + shape_str(images[0]->shape()));
    }
    const double* src = images[n]->data();
    double* dst = out.data() + n * C * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c) dst[(c * H + y) * W + x] = src[(y * W + x) * C + c];
  }
  return out;
}

inline Tensor to_batch(const std::vector<Tensor>& images) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& t : images) ptrs.push_back(&t);
  return to_batch(std::span<const Tensor* const>(ptrs));
}

inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelScale = 0.25;

struct Encoded {
  Var u;  // [N, d_feat, H', W'] last conv activation
  Var v;  // [N, d_feat] spatial mean of u
};

// `batch` is [N, C, S, S]; S must equal the configured input or patch size.
inline Encoded encode(const EncoderParams& p, const Var& batch) {
  const Tensor& x = batch.value();
  require_rank(x, 4, "encode");
  const auto& cfg = p.config;
  if (x.dim(1) != cfg.channels || x.dim(2) != x.dim(3) || (x.dim(2) != cfg.input_size && x.dim(2) != cfg.patch_size)) {
    throw StructuralError("encode: batch " + shape_str(x.shape()) + " does not match encoder input [N x " +
                          std::to_string(cfg.channels) + " x " + std::to_string(cfg.input_size) + " x " +
                          std::to_string(cfg.input_size) + "]");
  }
  // Pixels in [0, 1] are recentred to roughly unit scale; the input never carries gradient.
  Tensor centred = x;
  for (double& q : centred.values()) q = (q - kPixelMean) / kPixelScale;
  Var h = Var::constant(std::move(centred));
  for (std::size_t i = 0; i < p.conv_w.size(); ++i) {
    h = relu(conv2d(h, p.conv_w[i], p.conv_b[i], ConvGeometry{cfg.stride, cfg.pad()}));
  }
  return {h, mean_pool(h)};
}

inline Var head_forward(const EncoderParams& p, const Var& v) {
  return add_row(matmul(relu(add_row(matmul(v, p.fc1_w), p.fc1_b)), p.fc2_w), p.fc2_b);
}

// z = l2_normalize(g(v)), row-wise for [N, d_feat].
inline Var project(const EncoderParams& p, const Var& v) { return l2_normalize(head_forward(p, v)); }

// c = l2_normalize(g(ROI average of u)), one row per ROI.
inline Var roi_pool_project(const EncoderParams& p, const Var& u, std::span<const Roi> rois) {
  return project(p, roi_average_pool(u, rois));
}

// Embeds images end to end: rows of l2-normalized g(f(x)).
inline Var embed_images(const EncoderParams& p, const Tensor& batch) {
  return project(p, encode(p, Var::constant(batch)).v);
}

// s = project(encode(crop_resize(image, box, out)).v) for every (image, box) pair.
inline Var embed_patches(const EncoderParams& p, std::span<const Tensor* const> images, std::span<const PatchBox> boxes,
                         std::size_t out_size) {
  if (images.size() != boxes.size()) throw StructuralError("embed_patches: image/box count mismatch");
  std::vector<Tensor> crops;
  crops.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) crops.push_back(crop_resize(*images[i], boxes[i], out_size));
  return embed_images(p, to_batch(crops));
}

inline Var embed_patch(const EncoderParams& p, const Tensor& image, const PatchBox& box, std::size_t out_size) {
  const Tensor* img = &image;
  return embed_patches(p, std::span<const Tensor* const>(&img, 1), std::span<const PatchBox>(&box, 1), out_size);
}

// Shadow copy that never records gradients.
class EmaEncoder {
 public:
  EmaEncoder(const EncoderParams& online, double momentum) : shadow_(online.clone(false)), momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("ema momentum must lie in [0, 1]");
  }

  const EncoderParams& params() const { return shadow_; }
  EncoderParams& params() { return shadow_; }
  double momentum() const { return momentum_; }

  // shadow <- m * shadow + (1 - m) * online
  void update(const EncoderParams& online) {
    auto dst = shadow_.all();
    const auto src = online.all();
    if (dst.size() != src.size()) throw StructuralError("ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      require_same_shape(dst[i].value(), src[i].value(), "ema_update");
      Tensor& s = dst[i].value_mut();
      const Tensor& o = src[i].value();
      for (std::size_t k = 0; k < s.size(); ++k) s[k] = momentum_ * s[k] + (1.0 - momentum_) * o[k];
    }
  }

 private:
  EncoderParams shadow_;
  double momentum_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "DSCK" | u64 header length | JSON header | f64 LE blob (online, then EMA if present).

struct Checkpoint {
  EncoderParams online;
  std::optional<EncoderParams> ema;
  double ema_momentum = 0.0;
  std::uint64_t step = 0;
  Json extra = Json::object();
};

inline Json params_layout(const EncoderParams& p) {
  Json layers = Json::array();
  const auto names = p.names();
  const auto vars = p.all();
  for (std::size_t i = 0; i < vars.size(); ++i) layers.push_back({{"name", names[i]}, {"shape", vars[i].shape()}});
  return layers;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Json header{{"format", "dscl-checkpoint"},
              {"version", 1},
              {"encoder", encoder_config_to_json(ck.online.config)},
              {"d_proj", ck.online.config.d_proj},
              {"seed", ck.online.seed},
              {"step", ck.step},
              {"layers", params_layout(ck.online)},
              {"has_ema", ck.ema.has_value()},
              {"ema_momentum", ck.ema_momentum},
              {"extra", ck.extra}};
  const std::string h = header.dump();
  std::string buf = "DSCK";
  detail::put_le<std::uint64_t>(buf, h.size());
  buf += h;
  auto put = [&](const EncoderParams& p) {
    for (const auto& v : p.all())
      for (double x : v.value().values()) detail::put_le<double>(buf, x);
  };
  put(ck.online);
  if (ck.ema) put(*ck.ema);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, buf);
}

// `expected` (if given) must match the stored architecture exactly.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig* expected = nullptr) {
  const std::string buf = detail::read_file(path);
  if (buf.size() < 12 || buf.compare(0, 4, "DSCK") != 0) throw FormatError("not a checkpoint: " + path.string());
  std::size_t pos = 4;
  const auto hlen = detail::get_le<std::uint64_t>(buf, pos);
  if (pos + hlen > buf.size()) throw FormatError("truncated checkpoint header");
  const Json header = Json::parse(buf.substr(pos, hlen));
  pos += hlen;
  Checkpoint ck;
  const EncoderConfig cfg = encoder_config_from_json(header.at("encoder"));
  ck.online = init_encoder(cfg, header.at("seed").get<std::uint64_t>());
  if (header.at("layers") != params_layout(ck.online)) {
    throw StructuralError("checkpoint layer shapes do not match its encoder config");
  }
  if (expected && encoder_config_to_json(*expected) != encoder_config_to_json(cfg)) {
    throw StructuralError("checkpoint encoder " + header.at("encoder").dump() + " does not match expected " +
                          encoder_config_to_json(*expected).dump());
  }
  ck.step = header.at("step").get<std::uint64_t>();
  ck.ema_momentum = header.at("ema_momentum").get<double>();
  ck.extra = header.value("extra", Json::object());
  auto get = [&](EncoderParams& p) {
    for (auto v : p.all())
      for (double& x : v.value_mut().values()) x = detail::get_le<double>(buf, pos);
  };
  get(ck.online);
  if (header.at("has_ema").get<bool>()) {
    ck.ema = ck.online.clone(false);
    get(*ck.ema);
  }
  if (pos != buf.size()) throw FormatError("checkpoint blob size does not match its layer shapes");
  return ck;
}

}  // namespace dscl
