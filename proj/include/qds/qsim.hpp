#pragma once

// Statevector simulation of small circuits (up to 16 qubits) with per-qubit
// Pauli-Z readout, a Monte Carlo trajectory noise model, and parameter-shift
// gradients.
//
// Qubit ordering is little-endian: qubit q is bit q of the basis index.
// Rotations follow R_P(theta) = exp(-i theta P / 2).

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qds/errors.hpp"

namespace qds::quantum {

using Amplitude = std::complex<double>;

inline constexpr std::size_t kMaxQubits = 16;
inline constexpr std::size_t kNoQubit = std::numeric_limits<std::size_t>::max();

enum class GateKind { H, RX, RY, RZ, CNOT, CZ };

inline bool is_rotation(GateKind k) { return k == GateKind::RX || k == GateKind::RY || k == GateKind::RZ; }
inline bool is_two_qubit(GateKind k) { return k == GateKind::CNOT || k == GateKind::CZ; }

inline const char* gate_name(GateKind k) {
  switch (k) {
    case GateKind::H: return "H";
    case GateKind::RX: return "RX";
    case GateKind::RY: return "RY";
    case GateKind::RZ: return "RZ";
    case GateKind::CNOT: return "CNOT";
    case GateKind::CZ: return "CZ";
  }
  return "?";
}

enum class SlotKind { constant, weight, input };

/// Where a rotation angle comes from.
struct ParamSlot {
  SlotKind kind = SlotKind::constant;
  std::size_t index = 0;  // weight or input index
  double angle = 0.0;     // used when kind == constant
};

struct Gate {
  GateKind kind;
  std::size_t q0;               // target, or control for CNOT
  std::size_t q1 = kNoQubit;    // target for CNOT, partner for CZ
  ParamSlot slot{};
};

enum class Pauli { X, Y, Z };

class StateVector {
 public:
  explicit StateVector(std::size_t n_qubits) : n_(n_qubits) {
    if (n_qubits == 0 || n_qubits > kMaxQubits)
      throw ConfigError("statevector: qubit count " + std::to_string(n_qubits) + " outside [1, 16]");
    amps_.assign(std::size_t{1} << n_qubits, Amplitude{0.0, 0.0});
    amps_[0] = 1.0;
  }

  std::size_t n_qubits() const { return n_; }
  const std::vector<Amplitude>& amplitudes() const { return amps_; }

  double norm_squared() const {
    double s = 0.0;
    for (const auto& a : amps_) s += std::norm(a);
    return s;
  }

  /// Applies gate with the given rotation angle (ignored for fixed gates).
  void apply(const Gate& g, double angle = 0.0) {
    check_qubit(g.q0);
    if (is_two_qubit(g.kind)) {
      check_qubit(g.q1);
      if (g.q0 == g.q1) throw ConfigError(std::string(gate_name(g.kind)) + ": control and target coincide");
    }
    switch (g.kind) {
      case GateKind::H: {
        const double r = std::numbers::sqrt2 / 2.0;
        apply_1q(g.q0, r, r, r, -r);
        break;
      }
      case GateKind::RX: {
        const double c = std::cos(angle / 2), s = std::sin(angle / 2);
        apply_1q(g.q0, Amplitude{c, 0}, Amplitude{0, -s}, Amplitude{0, -s}, Amplitude{c, 0});
        break;
      }
      case GateKind::RY: {
        const double c = std::cos(angle / 2), s = std::sin(angle / 2);
        apply_1q(g.q0, c, -s, s, c);
        break;
      }
      case GateKind::RZ: {
        const Amplitude p0 = std::polar(1.0, -angle / 2), p1 = std::polar(1.0, angle / 2);
        const std::size_t m = std::size_t{1} << g.q0;
        for (std::size_t i = 0; i < amps_.size(); ++i) amps_[i] *= (i & m) ? p1 : p0;
        break;
      }
      case GateKind::CNOT: {
        const std::size_t c = std::size_t{1} << g.q0, t = std::size_t{1} << g.q1;
        for (std::size_t i = 0; i < amps_.size(); ++i)
          if ((i & c) && !(i & t)) std::swap(amps_[i], amps_[i | t]);
        break;
      }
      case GateKind::CZ: {
        const std::size_t m = (std::size_t{1} << g.q0) | (std::size_t{1} << g.q1);
        for (std::size_t i = 0; i < amps_.size(); ++i)
          if ((i & m) == m) amps_[i] = -amps_[i];
        break;
      }
    }
  }

  void apply_pauli(std::size_t q, Pauli p) {
    check_qubit(q);
    const std::size_t m = std::size_t{1} << q;
    for (std::size_t i = 0; i < amps_.size(); ++i) {
      if (i & m) continue;
      Amplitude& a = amps_[i];
      Amplitude& b = amps_[i | m];
      switch (p) {
        case Pauli::X: std::swap(a, b); break;
        case Pauli::Y: {
          const Amplitude a0 = a;
          a = Amplitude{0, -1} * b;
          b = Amplitude{0, 1} * a0;
          break;
        }
        case Pauli::Z: b = -b; break;
      }
    }
  }

  /// <Z_q> for every qubit q.
  std::vector<double> expectations_z() const {
    std::vector<double> z(n_, 0.0);
    for (std::size_t i = 0; i < amps_.size(); ++i) {
      const double p = std::norm(amps_[i]);
      for (std::size_t q = 0; q < n_; ++q) z[q] += ((i >> q) & 1u) ? -p : p;
    }
    return z;
  }

 private:
  void check_qubit(std::size_t q) const {
    if (q >= n_)
      throw ConfigError("qubit index " + std::to_string(q) + " out of range for " + std::to_string(n_) + " qubits");
  }

  void apply_1q(std::size_t q, Amplitude m00, Amplitude m01, Amplitude m10, Amplitude m11) {
    const std::size_t m = std::size_t{1} << q;
    for (std::size_t block = 0; block < amps_.size(); block += 2 * m)
      for (std::size_t i = block; i < block + m; ++i) {
        const Amplitude a = amps_[i], b = amps_[i + m];
        amps_[i] = m00 * a + m01 * b;
        amps_[i + m] = m10 * a + m11 * b;
      }
  }

  std::size_t n_;
  std::vector<Amplitude> amps_;
};

/// Gate list with every rotation angle resolved. NaN marks an unbound angle.
struct BoundCircuit {
  std::size_t n_qubits = 0;
  std::vector<Gate> gates;
  std::vector<double> angles;  // one per gate

  explicit BoundCircuit(std::size_t n = 0) : n_qubits(n) {}

  BoundCircuit& add(GateKind k, std::size_t q0, std::size_t q1 = kNoQubit, double angle = 0.0) {
    gates.push_back(Gate{k, q0, q1, ParamSlot{SlotKind::constant, 0, angle}});
    angles.push_back(angle);
    return *this;
  }
  BoundCircuit& h(std::size_t q) { return add(GateKind::H, q); }
  BoundCircuit& rx(std::size_t q, double a) { return add(GateKind::RX, q, kNoQubit, a); }
  BoundCircuit& ry(std::size_t q, double a) { return add(GateKind::RY, q, kNoQubit, a); }
  BoundCircuit& rz(std::size_t q, double a) { return add(GateKind::RZ, q, kNoQubit, a); }
  BoundCircuit& cnot(std::size_t c, std::size_t t) { return add(GateKind::CNOT, c, t); }
  BoundCircuit& cz(std::size_t a, std::size_t b) { return add(GateKind::CZ, a, b); }
};

struct NoiseParams {
  double p_dep = 0.0;
  double p_ro = 0.0;
  std::size_t shots = 1000;
  std::uint64_t seed = 0;
};

/// Exact statevector, or Monte Carlo trajectories with depolarizing and readout noise.
struct Backend {
  std::optional<NoiseParams> noise;

  static Backend exact() { return {}; }
  static Backend noisy(NoiseParams p) {
    if (p.p_dep < 0 || p.p_dep > 1 || p.p_ro < 0 || p.p_ro > 1)
      throw ConfigError("noise probabilities must lie in [0,1]");
    if (p.shots < 1) throw ConfigError("noisy backend needs shots >= 1");
    return Backend{p};
  }
  bool is_exact() const { return !noise.has_value(); }
};

namespace detail {

inline void check_bound(const BoundCircuit& c) {
  if (c.angles.size() != c.gates.size()) throw ContractError("bound circuit: angle/gate count mismatch");
  for (std::size_t i = 0; i < c.gates.size(); ++i)
    if (is_rotation(c.gates[i].kind) && std::isnan(c.angles[i]))
      throw ContractError("circuit gate " + std::to_string(i) + " (" + gate_name(c.gates[i].kind) +
                          ") has an unbound parameter slot");
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

struct PauliError {
  std::size_t after_gate;
  std::size_t qubit;
  Pauli pauli;
};

}  // namespace detail

inline StateVector simulate(const BoundCircuit& c) {
  StateVector s(c.n_qubits);
  for (std::size_t i = 0; i < c.gates.size(); ++i) s.apply(c.gates[i], c.angles[i]);
  return s;
}

/// Per-qubit <Z> after executing the circuit on |0...0>.
///
/// The noisy backend averages `shots` trajectories. After every gate each
/// touched qubit receives a uniformly random Pauli with probability p_dep, and
/// each qubit's readout sign flips with probability p_ro. Error-free
/// trajectories share one exact simulation, so p_dep = p_ro = 0 reproduces the
/// exact result bit-for-bit.
inline std::vector<double> run(const BoundCircuit& c, const Backend& backend) {
  detail::check_bound(c);
  const std::vector<double> exact = simulate(c).expectations_z();
  if (backend.is_exact()) return exact;

  const NoiseParams& np = *backend.noise;
  const std::size_t n = c.n_qubits;
  std::mt19937_64 rng(np.seed);
  std::vector<long long> clean_sign(n, 0);
  std::vector<double> noisy_sum(n, 0.0);
  std::vector<detail::PauliError> errors;
  // Faulty trajectories resume from a cached error-free state; keep the cache
  // near 8 MiB.
  const std::size_t state_bytes = (std::size_t{1} << n) * sizeof(Amplitude);
  const std::size_t stride = std::max<std::size_t>(1, c.gates.size() * state_bytes / (std::size_t{8} << 20));
  std::vector<StateVector> prefix;
  for (std::size_t shot = 0; shot < np.shots; ++shot) {
    errors.clear();
    if (np.p_dep > 0.0) {
      for (std::size_t gi = 0; gi < c.gates.size(); ++gi) {
        const Gate& g = c.gates[gi];
        const std::size_t touched[2] = {g.q0, g.q1};
        for (std::size_t t = 0; t < (is_two_qubit(g.kind) ? 2u : 1u); ++t)
          if (detail::uniform01(rng) < np.p_dep)
            errors.push_back({gi, touched[t], static_cast<Pauli>(rng() % 3)});
      }
    }
    std::vector<double> z;
    if (!errors.empty()) {
      if (prefix.empty()) {
        // Exact states after gates 0, stride, 2*stride, ... (state before gate 0 is |0...0>).
        StateVector s(n);
        for (std::size_t gi = 0; gi < c.gates.size(); ++gi) {
          if (gi % stride == 0) prefix.push_back(s);
          s.apply(c.gates[gi], c.angles[gi]);
        }
      }
      const std::size_t start = errors[0].after_gate / stride * stride;
      StateVector s = prefix[start / stride];
      std::size_t next = 0;
      for (std::size_t gi = start; gi < c.gates.size(); ++gi) {
        s.apply(c.gates[gi], c.angles[gi]);
        while (next < errors.size() && errors[next].after_gate == gi) {
          s.apply_pauli(errors[next].qubit, errors[next].pauli);
          ++next;
        }
      }
      z = s.expectations_z();
    }
    for (std::size_t q = 0; q < n; ++q) {
      const bool flip = np.p_ro > 0.0 && detail::uniform01(rng) < np.p_ro;
      if (errors.empty()) {
        clean_sign[q] += flip ? -1 : 1;
      } else {
        noisy_sum[q] += flip ? -z[q] : z[q];
      }
    }
  }
  std::vector<double> out(n);
  const double shots = static_cast<double>(np.shots);
  for (std::size_t q = 0; q < n; ++q)
    out[q] = exact[q] * (static_cast<double>(clean_sign[q]) / shots) + noisy_sum[q] / shots;
  return out;
}

/// d<Z_i>/d(angle of gate `slot`) for all i via the two-term shift rule.
inline std::vector<double> parameter_shift_grad(const BoundCircuit& c, const Backend& backend, std::size_t slot) {
  if (slot >= c.gates.size()) throw ContractError("parameter shift: slot " + std::to_string(slot) + " out of range");
  if (!is_rotation(c.gates[slot].kind))
    throw ContractError(std::string("parameter shift: gate ") + std::to_string(slot) + " is " +
                        gate_name(c.gates[slot].kind) + ", not a rotation");
  BoundCircuit shifted = c;
  const double theta = c.angles[slot];
  shifted.angles[slot] = theta + std::numbers::pi / 2;
  const auto plus = run(shifted, backend);
  shifted.angles[slot] = theta - std::numbers::pi / 2;
  const auto minus = run(shifted, backend);
  std::vector<double> g(plus.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 0.5 * (plus[i] - minus[i]);
  return g;
}

}  // namespace qds::quantum
