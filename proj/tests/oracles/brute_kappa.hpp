#pragma once

#include <cmath>
#include <cstdlib>
#include <vector>

namespace oracle {

// Definitional linear weighted kappa by pair enumeration:
//   p_o = 1/n   sum_k   w(t_k, p_k)
//   p_e = 1/n^2 sum_k,l w(t_k, p_l)
// with w(i, j) = 1 - |i - j| / (C - 1). No confusion matrix, no marginals.
inline double brute_kappa(const std::vector<int>& t, const std::vector<int>& p, int classes = 4) {
  auto w = [&](int i, int j) { return 1.0 - std::abs(i - j) / static_cast<double>(classes - 1); };
  const double n = static_cast<double>(t.size());
  double po = 0, pe = 0;
  for (std::size_t k = 0; k < t.size(); ++k) po += w(t[k], p[k]);
  for (std::size_t k = 0; k < t.size(); ++k) {
    for (std::size_t l = 0; l < p.size(); ++l) pe += w(t[k], p[l]);
  }
  po /= n;
  pe /= n * n;
  return (po - pe) / (1.0 - pe);
}

}  // namespace oracle
