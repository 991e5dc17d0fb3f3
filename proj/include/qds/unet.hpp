#pragma once

// Small UNet used for both CorrDiff stages.
//
// Encoder levels halve the resolution with 2x2 average pooling followed by a
// stride-1 conv; decoder levels double it with nearest upsampling plus conv and
// concatenate the matching skip. One block sits at the bottleneck; when the
// hybrid config is enabled its conv0/conv1 become hybrid quantum-classical
// vertices, which requires a 2x2 bottleneck.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qds/ansatz.hpp"
#include "qds/checkpoint.hpp"
#include "qds/errors.hpp"
#include "qds/hybrid.hpp"
#include "qds/tensor.hpp"

namespace qds {

struct UNetConfig {
  std::size_t in_channels = 2;
  std::size_t out_channels = 2;
  /// Channels per resolution level; the last entry is the bottleneck.
  std::vector<std::size_t> channels{8, 8, 16, 16, 16};
  /// Width of the timestep embedding; 0 disables embedding injection.
  std::size_t emb_dim = 0;
  std::size_t groups = 4;
  HybridBottleneckConfig hybrid{};

  std::size_t levels() const { return channels.size() - 1; }
  std::size_t bottleneck_channels() const { return channels.back(); }
};

class UNet {
 public:
  UNet() = default;

  UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.channels.size() < 2) throw ConfigError("unet: need at least one down level");
    for (std::size_t c : cfg_.channels)
      if (c % cfg_.groups != 0)
        throw ConfigError("unet: channel count " + std::to_string(c) + " not divisible by " +
                          std::to_string(cfg_.groups) + " norm groups");
    cfg_.hybrid.validate(cfg_.bottleneck_channels());
    if (cfg_.hybrid.enabled) tmpl_ = quantum::build(cfg_.hybrid.ansatz);
    std::mt19937_64 rng(seed);
    const auto& ch = cfg_.channels;
    in_conv_ = conv(rng, "in_conv", cfg_.in_channels, ch[0], 3);
    if (cfg_.emb_dim) {
      emb_w_ = param("emb.w", {cfg_.emb_dim, cfg_.emb_dim}, rng, cfg_.emb_dim);
      emb_b_ = param("emb.b", {cfg_.emb_dim});
    }
    for (std::size_t l = 0; l < cfg_.levels(); ++l) {
      enc_.push_back(block(rng, "enc" + std::to_string(l), ch[l], ch[l], false));
      down_.push_back(conv(rng, "down" + std::to_string(l), ch[l], ch[l + 1], 3));
    }
    mid_ = block(rng, "mid", ch.back(), ch.back(), cfg_.hybrid.enabled);
    for (std::size_t l = 0; l < cfg_.levels(); ++l) {
      up_.push_back(conv(rng, "up" + std::to_string(l), ch[l + 1], ch[l], 3));
      dec_.push_back(block(rng, "dec" + std::to_string(l), 2 * ch[l], ch[l], false));
    }
    out_norm_ = norm("out_norm", ch[0]);
    out_conv_ = conv(rng, "out_conv", ch[0], cfg_.out_channels, 3, /*zero=*/true);
  }

  const UNetConfig& config() const { return cfg_; }
  bool is_hybrid() const { return cfg_.hybrid.enabled; }

  /// x: [B, in_channels, H, W]; emb: [B, emb_dim] raw sinusoidal features or undefined.
  Tensor forward(const Tensor& x, const Tensor& emb, QuantumContext& qctx) const {
    detail::require_rank(x, 4, "unet input");
    if (x.dim(1) != cfg_.in_channels)
      throw ConfigError("unet: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                        std::to_string(x.dim(1)));
    const std::size_t factor = std::size_t{1} << cfg_.levels();
    if (x.dim(2) % factor || x.dim(3) % factor)
      throw ConfigError("unet: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                        " not divisible by " + std::to_string(factor));
    if (cfg_.hybrid.enabled && (x.dim(2) / factor != 2 || x.dim(3) / factor != 2))
      throw ConfigError("unet: hybrid bottleneck needs 2x2, input gives " + std::to_string(x.dim(2) / factor) + "x" +
                        std::to_string(x.dim(3) / factor));
    Tensor e;
    if (cfg_.emb_dim) {
      if (!emb.defined() || emb.rank() != 2 || emb.dim(1) != cfg_.emb_dim || emb.dim(0) != x.dim(0))
        throw ConfigError("unet: missing or mis-shaped timestep embedding");
      e = silu(linear(emb, emb_w_, emb_b_));
    }
    Tensor h = conv2d(x, in_conv_.w, in_conv_.b);
    std::vector<Tensor> skips;
    for (std::size_t l = 0; l < cfg_.levels(); ++l) {
      h = run_block(enc_[l], h, e, qctx);
      skips.push_back(h);
      h = conv2d(avgpool2x(h), down_[l].w, down_[l].b);
    }
    h = run_block(mid_, h, e, qctx);
    for (std::size_t l = cfg_.levels(); l-- > 0;) {
      h = conv2d(upsample2x(h), up_[l].w, up_[l].b);
      h = run_block(dec_[l], concat_channels({h, skips[l]}), e, qctx);
    }
    h = silu(group_norm(h, out_norm_.gamma, out_norm_.beta, cfg_.groups));
    return conv2d(h, out_conv_.w, out_conv_.b);
  }

  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

  std::vector<Tensor> quantum_parameters() const {
    std::vector<Tensor> q = mid_.q0;
    q.insert(q.end(), mid_.q1.begin(), mid_.q1.end());
    return q;
  }

  /// Copies values from a checkpoint; every parameter must be present with a matching shape.
  void load(const Checkpoint& ck, const std::string& prefix = "") {
    for (auto& [name, t] : params_) {
      const Tensor* src = ck.find(prefix + name);
      if (!src) throw FormatError("checkpoint lacks parameter '" + prefix + name + "'");
      if (src->shape() != t.shape())
        throw FormatError("checkpoint parameter '" + prefix + name + "' has shape " + shape_str(src->shape()) +
                          ", model expects " + shape_str(t.shape()));
      std::copy(src->data().begin(), src->data().end(), t.mutable_data().begin());
    }
  }

  void append_to(Checkpoint& ck, const std::string& prefix = "") const {
    for (const auto& [name, t] : params_) ck.tensors.emplace_back(prefix + name, t);
  }

 private:
  struct Conv {
    Tensor w, b;
  };
  struct Norm {
    Tensor gamma, beta;
  };
  struct Block {
    Norm n0, n1;
    Conv c0, c1;
    std::optional<Conv> skip;
    Tensor emb_w, emb_b;
    bool hybrid = false;
    std::vector<Tensor> q0, q1;
  };

  Tensor param(const std::string& name, Shape shape, std::mt19937_64& rng, std::size_t fan_in) {
    const double a = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    Tensor t = Tensor::from(std::move(shape), std::move(v), true);
    params_.emplace_back(name, t);
    return t;
  }

  Tensor param(const std::string& name, Shape shape, double fill = 0.0) {
    Tensor t = Tensor::full(std::move(shape), fill, true);
    params_.emplace_back(name, t);
    return t;
  }

  Conv conv(std::mt19937_64& rng, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
            bool zero = false) {
    Conv c;
    c.w = zero ? param(name + ".w", {cout, cin, k, k}) : param(name + ".w", {cout, cin, k, k}, rng, cin * k * k);
    c.b = param(name + ".b", {cout});
    return c;
  }

  Norm norm(const std::string& name, std::size_t ch) {
    return Norm{param(name + ".gamma", {ch}, 1.0), param(name + ".beta", {ch})};
  }

  Block block(std::mt19937_64& rng, const std::string& name, std::size_t cin, std::size_t cout, bool hybrid) {
    Block b;
    b.hybrid = hybrid;
    b.n0 = norm(name + ".norm0", cin);
    const std::size_t q = hybrid ? cfg_.hybrid.quantum_channels() : 0;
    b.c0 = conv(rng, name + ".conv0", cin - q, cout - q, 3);
    if (cfg_.emb_dim) {
      b.emb_w = param(name + ".emb.w", {cout, cfg_.emb_dim}, rng, cfg_.emb_dim);
      b.emb_b = param(name + ".emb.b", {cout});
    }
    b.n1 = norm(name + ".norm1", cout);
    b.c1 = conv(rng, name + ".conv1", cout - q, cout - q, 3);
    if (cin != cout) b.skip = conv(rng, name + ".skip", cin, cout, 1);
    if (hybrid) {
      const auto seed0 = rng(), seed1 = rng();
      b.q0 = init_quantum_weights(cfg_.hybrid, seed0);
      b.q1 = init_quantum_weights(cfg_.hybrid, seed1);
      for (std::size_t c = 0; c < b.q0.size(); ++c) {
        params_.emplace_back(name + ".conv0.quantum" + std::to_string(c), b.q0[c]);
        params_.emplace_back(name + ".conv1.quantum" + std::to_string(c), b.q1[c]);
      }
    }
    return b;
  }

  Tensor vertex(const Block& b, const Conv& c, const std::vector<Tensor>& q, const Tensor& x,
                QuantumContext& qctx) const {
    if (!b.hybrid) return conv2d(x, c.w, c.b);
    return hybrid_conv_vertex_forward(x, cfg_.hybrid, &*tmpl_, q, c.w, c.b, qctx);
  }

  Tensor run_block(const Block& b, const Tensor& x, const Tensor& e, QuantumContext& qctx) const {
    Tensor h = silu(group_norm(x, b.n0.gamma, b.n0.beta, cfg_.groups));
    h = vertex(b, b.c0, b.q0, h, qctx);
    if (e.defined()) h = broadcast_add(h, linear(e, b.emb_w, b.emb_b));
    h = silu(group_norm(h, b.n1.gamma, b.n1.beta, cfg_.groups));
    h = vertex(b, b.c1, b.q1, h, qctx);
    const Tensor skip = b.skip ? conv2d(x, b.skip->w, b.skip->b) : x;
    return add(h, skip);
  }

  UNetConfig cfg_;
  std::optional<quantum::CircuitTemplate> tmpl_;
  std::vector<std::pair<std::string, Tensor>> params_;
  Conv in_conv_, out_conv_;
  Tensor emb_w_, emb_b_;
  Norm out_norm_;
  std::vector<Block> enc_, dec_;
  std::vector<Conv> down_, up_;
  Block mid_;
};

}  // namespace qds
