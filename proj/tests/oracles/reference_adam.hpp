#pragma once

// Textbook Adam (Kingma & Ba) with decoupled weight decay, written as a plain
// loop over doubles for comparison against the library optimizer.

#include <cmath>
#include <vector>

namespace oracle {

struct RefAdam {
  double lr, wd, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m{}, v{};
  int t = 0;

  void step(std::vector<double>& x, const std::vector<double>& g) {
    if (m.empty()) {
      m.assign(x.size(), 0.0);
      v.assign(x.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] *= 1.0 - lr * wd;
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      x[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

}  // namespace oracle
