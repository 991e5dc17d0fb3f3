#pragma once

// Quantum branch of the hybrid bottleneck convolution.
//
// QuantumLayer:        [B, N/4, 2, 2] -> flatten -> circuit -> N <Z> values -> [B, N/4, 2, 2]
// QuantumChannelLayer: n_circuits independent QuantumLayers over consecutive channel groups
// HybridConvVertex:    first n_circuits*N/4 channels through the quantum layer, the rest
//                      through a classical conv, outputs concatenated along channels

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "qds/ansatz.hpp"
#include "qds/errors.hpp"
#include "qds/parallel.hpp"
#include "qds/qsim.hpp"
#include "qds/tensor.hpp"

namespace qds {

struct HybridBottleneckConfig {
  bool enabled = false;
  quantum::AnsatzSpec ansatz{};
  std::size_t n_circuits = 1;

  std::size_t channels_per_circuit() const { return ansatz.n_qubits / 4; }
  std::size_t quantum_channels() const { return enabled ? n_circuits * channels_per_circuit() : 0; }

  void validate(std::size_t total_channels) const {
    if (!enabled) return;
    ansatz.validate();
    if (n_circuits < 1) throw ConfigError("hybrid: n_circuits must be >= 1");
    if (quantum_channels() > total_channels)
      throw ConfigError("hybrid: " + std::to_string(quantum_channels()) + " quantum channels exceed " +
                        std::to_string(total_channels) + " bottleneck channels");
  }
};

/// Backend plus a per-call seed stream, so noisy runs are reproducible for a
/// fixed call order. Training always uses the exact backend.
struct QuantumContext {
  quantum::Backend backend = quantum::Backend::exact();
  std::uint64_t stream = 0;
  std::uint64_t calls = 0;

  quantum::Backend next() {
    quantum::Backend b = backend;
    if (b.noise) b.noise->seed = mix_seed(mix_seed(b.noise->seed, stream), calls++);
    return b;
  }
};

namespace detail {
inline void require_2x2(const Tensor& x, const char* who) {
  require_rank(x, 4, who);
  if (x.dim(2) != 2 || x.dim(3) != 2)
    throw ConfigError(std::string(who) + ": quantum layers need a 2x2 bottleneck, got " + std::to_string(x.dim(2)) +
                      "x" + std::to_string(x.dim(3)));
}
}  // namespace detail

/// One circuit per batch element. Gradients w.r.t. encoded inputs and
/// weights come from the parameter-shift rule on the same backend.
inline Tensor quantum_layer_forward(const Tensor& x, const quantum::CircuitTemplate& tmpl, const Tensor& weights,
                                    QuantumContext& ctx) {
  detail::require_2x2(x, "quantum layer");
  const std::size_t n = tmpl.n_qubits();
  if (x.dim(1) != n / 4)
    throw ConfigError("quantum layer: expected " + std::to_string(n / 4) + " channels, got " +
                      std::to_string(x.dim(1)));
  if (weights.numel() != tmpl.n_weight_slots)
    throw ContractError("quantum layer: expected " + std::to_string(tmpl.n_weight_slots) + " weights, got " +
                        std::to_string(weights.numel()));
  const std::size_t batch = x.dim(0);
  std::vector<quantum::BoundCircuit> circuits;
  std::vector<quantum::Backend> backends;
  circuits.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    circuits.push_back(quantum::bind(tmpl, x.data().subspan(b * n, n), weights.data()));
    backends.push_back(ctx.next());
  }
  std::vector<double> out(batch * n);
  parallel_for(batch, [&](std::size_t b) {
    const auto z = quantum::run(circuits[b], backends[b]);
    std::copy(z.begin(), z.end(), out.begin() + static_cast<std::ptrdiff_t>(b * n));
  });
  return custom_op(x.shape(), std::move(out), {x, weights},
                   [circuits = std::move(circuits), backends = std::move(backends), input_gate = tmpl.input_gate,
                    weight_gate = tmpl.weight_gate, n, batch](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    std::vector<double> gx(batch * n, 0.0);
    std::vector<std::vector<double>> gw(batch, std::vector<double>(weight_gate.size(), 0.0));
    parallel_for(batch, [&](std::size_t b) {
      const double* up = self.grad.data() + b * n;
      auto contract = [&](std::size_t gate) {
        const auto d = quantum::parameter_shift_grad(circuits[b], backends[b], gate);
        double s = 0.0;
        for (std::size_t q = 0; q < n; ++q) s += up[q] * d[q];
        return s;
      };
      if (px.requires_grad)
        for (std::size_t i = 0; i < n; ++i) gx[b * n + i] = contract(input_gate[i]);
      if (pw.requires_grad)
        for (std::size_t w = 0; w < weight_gate.size(); ++w) gw[b][w] = contract(weight_gate[w]);
    });
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gx[i];
    }
    if (pw.requires_grad) {
      auto& g = pw.grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t w = 0; w < g.size(); ++w) g[w] += gw[b][w];
    }
  });
}

/// Splits channels evenly across independent circuits and concatenates the results.
inline Tensor quantum_channel_layer_forward(const Tensor& x, const quantum::CircuitTemplate& tmpl,
                                            const std::vector<Tensor>& weights, QuantumContext& ctx) {
  detail::require_2x2(x, "quantum channel layer");
  const std::size_t per = tmpl.n_qubits() / 4;
  if (weights.empty() || x.dim(1) % weights.size() != 0 || x.dim(1) / weights.size() != per)
    throw ConfigError("quantum channel layer: " + std::to_string(x.dim(1)) + " channels cannot be split into " +
                      std::to_string(weights.size()) + " circuits of " + std::to_string(per) + " channels");
  std::vector<Tensor> parts;
  for (std::size_t c = 0; c < weights.size(); ++c)
    parts.push_back(quantum_layer_forward(slice_channels(x, c * per, (c + 1) * per), tmpl, weights[c], ctx));
  return parts.size() == 1 ? parts[0] : concat_channels(parts);
}

/// Hybrid replacement for a stride-1 conv at the bottleneck. `kernel` maps the
/// C_in - q classical channels to C_out - q channels.
inline Tensor hybrid_conv_vertex_forward(const Tensor& x, const HybridBottleneckConfig& cfg,
                                         const quantum::CircuitTemplate* tmpl, const std::vector<Tensor>& qweights,
                                         const Tensor& kernel, const Tensor& bias, QuantumContext& ctx) {
  detail::require_rank(x, 4, "hybrid conv");
  const std::size_t q = cfg.quantum_channels();
  const std::size_t cin = x.dim(1);
  if (q > cin)
    throw ConfigError("hybrid conv: " + std::to_string(q) + " quantum channels exceed " + std::to_string(cin) +
                      " input channels");
  if (q == 0) return conv2d(x, kernel, bias);
  if (!tmpl || qweights.size() != cfg.n_circuits) throw ContractError("hybrid conv: quantum weights missing");
  Tensor quantum_out = quantum_channel_layer_forward(slice_channels(x, 0, q), *tmpl, qweights, ctx);
  if (q == cin) {
    if (kernel.defined() && kernel.dim(0) != 0)
      throw ConfigError("hybrid conv: all channels are quantum but the classical branch expects output channels");
    return quantum_out;
  }
  Tensor classical = conv2d(slice_channels(x, q, cin), kernel, bias);
  return concat_channels({quantum_out, classical});
}

/// Uniform(-pi, pi) initial weights, one independent vector per circuit.
inline std::vector<Tensor> init_quantum_weights(const HybridBottleneckConfig& cfg, std::uint64_t seed) {
  std::vector<Tensor> w;
  if (!cfg.enabled) return w;
  const std::size_t n = quantum::param_count(cfg.ansatz);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-3.141592653589793, 3.141592653589793);
  for (std::size_t c = 0; c < cfg.n_circuits; ++c) {
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    w.push_back(Tensor::from({n}, std::move(v), true));
  }
  return w;
}

}  // namespace qds
