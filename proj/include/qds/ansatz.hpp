#pragma once

// HQConv-style circuit templates.
//
// Qubits are grouped in fours; group g encodes the 2x2 pixels of input
// channel g, qubit 4g+p holding pixel p. The template is
//
//   encoding:  H(q), RZ(input_q)                    for every qubit
//   block A:   RY(w) x4, CZ ring, RZ(w) x4          per group (intra-channel)
//   block B:   CNOT 4g+p -> 4(g+1)+p chain, RY(w)   per pixel offset p (cross-channel)
//
// with the variational part repeated `layers` times. The exact gate content
// of blocks A and B is our convention; only their roles are fixed.

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qds/errors.hpp"
#include "qds/qsim.hpp"

namespace qds::quantum {

enum class AnsatzVariant { A, B, AB };

inline std::string variant_name(AnsatzVariant v) {
  switch (v) {
    case AnsatzVariant::A: return "A";
    case AnsatzVariant::B: return "B";
    case AnsatzVariant::AB: return "A+B";
  }
  return "?";
}

inline AnsatzVariant parse_variant(const std::string& s) {
  if (s == "A") return AnsatzVariant::A;
  if (s == "B") return AnsatzVariant::B;
  if (s == "A+B" || s == "AB") return AnsatzVariant::AB;
  throw ConfigError("unknown ansatz variant '" + s + "' (expected A, B or A+B)");
}

inline bool uses_block_a(AnsatzVariant v) { return v != AnsatzVariant::B; }
inline bool uses_block_b(AnsatzVariant v) { return v != AnsatzVariant::A; }

struct AnsatzSpec {
  std::size_t n_qubits = 12;
  AnsatzVariant variant = AnsatzVariant::B;
  std::size_t layers = 2;

  std::size_t channels() const { return n_qubits / 4; }

  void validate() const {
    if (n_qubits == 0 || n_qubits % 4 != 0)
      throw ConfigError("ansatz: n_qubits must be a positive multiple of 4, got " + std::to_string(n_qubits));
    if (n_qubits > kMaxQubits)
      throw ConfigError("ansatz: n_qubits " + std::to_string(n_qubits) + " exceeds simulator limit");
    if (layers < 1) throw ConfigError("ansatz: layers must be >= 1");
    if (uses_block_b(variant) && channels() < 2)
      throw ConfigError("ansatz: variant " + variant_name(variant) + " at " + std::to_string(n_qubits) +
                        " qubits: block B requires at least two channels; use variant A");
  }
};

inline std::size_t param_count(const AnsatzSpec& spec) {
  std::size_t per_layer = 0;
  if (uses_block_a(spec.variant)) per_layer += 8 * spec.channels();
  if (uses_block_b(spec.variant)) per_layer += spec.n_qubits;
  return spec.layers * per_layer;
}

struct CircuitTemplate {
  AnsatzSpec spec;
  std::vector<Gate> gates;
  std::size_t n_weight_slots = 0;
  std::size_t n_input_slots = 0;
  std::vector<std::size_t> weight_gate;  // slot -> gate index
  std::vector<std::size_t> input_gate;

  std::size_t n_qubits() const { return spec.n_qubits; }
};

inline CircuitTemplate build(const AnsatzSpec& spec) {
  spec.validate();
  CircuitTemplate t;
  t.spec = spec;
  const std::size_t n = spec.n_qubits, groups = spec.channels();
  auto fixed = [&](GateKind k, std::size_t a, std::size_t b = kNoQubit) { t.gates.push_back(Gate{k, a, b}); };
  auto weighted = [&](GateKind k, std::size_t q) {
    t.weight_gate.push_back(t.gates.size());
    t.gates.push_back(Gate{k, q, kNoQubit, ParamSlot{SlotKind::weight, t.n_weight_slots++, 0.0}});
  };

  for (std::size_t q = 0; q < n; ++q) {
    fixed(GateKind::H, q);
    t.input_gate.push_back(t.gates.size());
    t.gates.push_back(Gate{GateKind::RZ, q, kNoQubit, ParamSlot{SlotKind::input, t.n_input_slots++, 0.0}});
  }
  for (std::size_t layer = 0; layer < spec.layers; ++layer) {
    if (uses_block_a(spec.variant)) {
      for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t b = 4 * g;
        for (std::size_t p = 0; p < 4; ++p) weighted(GateKind::RY, b + p);
        for (std::size_t p = 0; p < 4; ++p) fixed(GateKind::CZ, b + p, b + (p + 1) % 4);
        for (std::size_t p = 0; p < 4; ++p) weighted(GateKind::RZ, b + p);
      }
    }
    if (uses_block_b(spec.variant)) {
      for (std::size_t p = 0; p < 4; ++p) {
        for (std::size_t g = 0; g + 1 < groups; ++g) fixed(GateKind::CNOT, 4 * g + p, 4 * (g + 1) + p);
        for (std::size_t g = 0; g < groups; ++g) weighted(GateKind::RY, 4 * g + p);
      }
    }
  }
  return t;
}

/// Resolves input and weight slots to concrete angles. Inputs are used as
/// RZ angles without rescaling.
inline BoundCircuit bind(const CircuitTemplate& t, std::span<const double> inputs, std::span<const double> weights) {
  if (inputs.size() != t.n_input_slots)
    throw ContractError("bind: expected " + std::to_string(t.n_input_slots) + " inputs, got " +
                        std::to_string(inputs.size()));
  if (weights.size() != t.n_weight_slots)
    throw ContractError("bind: expected " + std::to_string(t.n_weight_slots) + " weights, got " +
                        std::to_string(weights.size()));
  BoundCircuit c(t.n_qubits());
  c.gates = t.gates;
  c.angles.resize(t.gates.size());
  for (std::size_t i = 0; i < t.gates.size(); ++i) {
    const ParamSlot& s = t.gates[i].slot;
    switch (s.kind) {
      case SlotKind::constant: c.angles[i] = s.angle; break;
      case SlotKind::weight: c.angles[i] = weights[s.index]; break;
      case SlotKind::input: c.angles[i] = inputs[s.index]; break;
    }
  }
  return c;
}

}  // namespace qds::quantum
