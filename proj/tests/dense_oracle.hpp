#pragma once

// Brute-force reference for the statevector simulator: every gate is expanded
// to a full 2^n x 2^n matrix and applied by dense matrix-vector product.

#include <cmath>
#include <complex>
#include <vector>

#include "qds/qsim.hpp"

namespace oracle {

using C = std::complex<double>;
using Matrix = std::vector<std::vector<C>>;

inline Matrix gate_matrix(const qds::quantum::Gate& g, double angle, std::size_t n) {
  using qds::quantum::GateKind;
  const std::size_t dim = std::size_t{1} << n;
  Matrix u(dim, std::vector<C>(dim, 0.0));
  C m[2][2];
  const double c = std::cos(angle / 2), s = std::sin(angle / 2), r = 1 / std::sqrt(2.0);
  switch (g.kind) {
    case GateKind::H: m[0][0] = r; m[0][1] = r; m[1][0] = r; m[1][1] = -r; break;
    case GateKind::RX: m[0][0] = c; m[0][1] = C(0, -s); m[1][0] = C(0, -s); m[1][1] = c; break;
    case GateKind::RY: m[0][0] = c; m[0][1] = -s; m[1][0] = s; m[1][1] = c; break;
    case GateKind::RZ: m[0][0] = std::exp(C(0, -angle / 2)); m[0][1] = 0; m[1][0] = 0; m[1][1] = std::exp(C(0, angle / 2)); break;
    case GateKind::CNOT:
      for (std::size_t j = 0; j < dim; ++j) {
        const std::size_t i = ((j >> g.q0) & 1) ? j ^ (std::size_t{1} << g.q1) : j;
        u[i][j] = 1.0;
      }
      return u;
    case GateKind::CZ:
      for (std::size_t j = 0; j < dim; ++j) u[j][j] = (((j >> g.q0) & 1) && ((j >> g.q1) & 1)) ? -1.0 : 1.0;
      return u;
  }
  const std::size_t mask = std::size_t{1} << g.q0;
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j)
      if ((i & ~mask) == (j & ~mask)) u[i][j] = m[(i >> g.q0) & 1][(j >> g.q0) & 1];
  return u;
}

inline std::vector<C> simulate(const qds::quantum::BoundCircuit& circ) {
  const std::size_t dim = std::size_t{1} << circ.n_qubits;
  std::vector<C> psi(dim, 0.0);
  psi[0] = 1.0;
  for (std::size_t k = 0; k < circ.gates.size(); ++k) {
    const Matrix u = gate_matrix(circ.gates[k], circ.angles[k], circ.n_qubits);
    std::vector<C> next(dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) next[i] += u[i][j] * psi[j];
    psi = next;
  }
  return psi;
}

inline std::vector<double> expectations(const qds::quantum::BoundCircuit& circ) {
  const auto psi = oracle::simulate(circ);
  std::vector<double> z(circ.n_qubits, 0.0);
  for (std::size_t i = 0; i < psi.size(); ++i)
    for (std::size_t q = 0; q < circ.n_qubits; ++q) z[q] += (((i >> q) & 1) ? -1.0 : 1.0) * std::norm(psi[i]);
  return z;
}

}  // namespace oracle
