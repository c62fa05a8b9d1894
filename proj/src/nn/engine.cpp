#include "engine.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedkappa/common/error.hpp"

namespace fedkappa::nn::detail {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

// Column layout: row r = (c * K + ky) * K + kx, column p = oy * OW + ox.
template <typename Real>
void im2col(const Geom& g, const Real* in, Real* col) {
  const int K = g.kernel;
  const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.in_c; ++c) {
    const Real* plane = in + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        Real* row = col + (static_cast<std::size_t>(c * K + ky) * K + kx) * P;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          Real* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, Real(0));
            continue;
          }
          const Real* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : Real(0);
          }
        }
      }
    }
  }
}

void col2im_add(const Geom& g, const double* col, double* din) {
  const int K = g.kernel;
  const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.in_c; ++c) {
    double* plane = din + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        const double* row = col + (static_cast<std::size_t>(c * K + ky) * K + kx) * P;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.out_w;
          double* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename A, typename B>
double dot(const A* a, const B* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    s1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
    s2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
    s3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
  }
  for (; i < n; ++i) s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (s0 + s1) + (s2 + s3);
}

template <typename Real>
void conv_forward(const Geom& g, const Real* w, const Real* b, const Real* in, Real* out,
                  std::vector<Real>& col, std::vector<double>& acc) {
  const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t R = static_cast<std::size_t>(g.in_c) * g.kernel * g.kernel;
  col.resize(R * P);
  acc.resize(P);
  im2col(g, in, col.data());
  for (int o = 0; o < g.out_c; ++o) {
    std::fill(acc.begin(), acc.end(), static_cast<double>(b[o]));
    const Real* wo = w + static_cast<std::size_t>(o) * R;
    for (std::size_t r = 0; r < R; ++r) {
      const double wr = static_cast<double>(wo[r]);
      const Real* cr = col.data() + r * P;
      double* a = acc.data();
      for (std::size_t p = 0; p < P; ++p) a[p] += wr * static_cast<double>(cr[p]);
    }
    Real* dst = out + static_cast<std::size_t>(o) * P;
    for (std::size_t p = 0; p < P; ++p) dst[p] = static_cast<Real>(acc[p]);
  }
}

template <typename Real>
void dense_forward(const Geom& g, const Real* w, const Real* b, const Real* in, Real* out) {
  const std::size_t n_in = g.in_size();
  for (int j = 0; j < g.out_c; ++j) {
    const double s = static_cast<double>(b[j]) + dot(w + static_cast<std::size_t>(j) * n_in, in, n_in);
    out[j] = static_cast<Real>(s);
  }
}

template <typename Real>
void gap_forward(const Geom& g, const Real* in, Real* out) {
  const std::size_t hw = static_cast<std::size_t>(g.in_h) * g.in_w;
  for (int c = 0; c < g.in_c; ++c) {
    const Real* plane = in + static_cast<std::size_t>(c) * hw;
    double s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(plane[i]);
    out[c] = static_cast<Real>(s / static_cast<double>(hw));
  }
}

// Mean cross-entropy of one row of logits; writes d(loss_row)/d(logits) if
// dlogits is non-null.
template <typename Real>
double softmax_xent(const Real* logits, int num_classes, int label, double* dlogits) {
  double m = static_cast<double>(logits[0]);
  for (int c = 1; c < num_classes; ++c) m = std::max(m, static_cast<double>(logits[c]));
  double z = 0;
  for (int c = 0; c < num_classes; ++c) z += std::exp(static_cast<double>(logits[c]) - m);
  const double lse = m + std::log(z);
  if (dlogits != nullptr) {
    for (int c = 0; c < num_classes; ++c) {
      dlogits[c] = std::exp(static_cast<double>(logits[c]) - lse) - (c == label ? 1.0 : 0.0);
    }
  }
  return lse - static_cast<double>(logits[label]);
}

void check_labels(std::span<const int> labels, std::size_t batch, int num_classes) {
  if (labels.size() != batch) {
    throw Error(ErrorCode::InvalidShape, "label count " + std::to_string(labels.size()) +
                                             " != batch " + std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw Error(ErrorCode::InvalidLabel, "label " + std::to_string(y) + " outside [0, " +
                                               std::to_string(num_classes) + ")");
    }
  }
}

}  // namespace

std::vector<Geom> plan(const ModelSpec& spec) {
  if (spec.input_resolution < 1) throw Error(ErrorCode::InvalidShape, "input_resolution must be >= 1");
  if (spec.num_classes < 2) throw Error(ErrorCode::InvalidShape, "num_classes must be >= 2");
  if (spec.layers.empty()) throw Error(ErrorCode::InvalidShape, "model has no layers");

  std::vector<Geom> out;
  int c = 1, h = spec.input_resolution, w = spec.input_resolution;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    Geom g;
    g.in_c = c;
    g.in_h = h;
    g.in_w = w;
    std::visit(Overloaded{
                   [&](const ConvLayer& l) {
                     if (l.out_channels < 1 || l.kernel < 1 || l.stride < 1) {
                       throw Error(ErrorCode::InvalidShape, "conv layer " + std::to_string(i) +
                                                                " needs positive channels/kernel/stride");
                     }
                     g.kind = Kind::Conv;
                     g.kernel = l.kernel;
                     g.stride = l.stride;
                     g.pad = l.kernel / 2;
                     g.out_c = l.out_channels;
                     g.out_h = (h + 2 * g.pad - l.kernel) / l.stride + 1;
                     g.out_w = (w + 2 * g.pad - l.kernel) / l.stride + 1;
                     if (g.out_h < 1 || g.out_w < 1) {
                       throw Error(ErrorCode::InvalidShape, "conv layer " + std::to_string(i) +
                                                                " produces an empty feature map");
                     }
                     g.w_count = static_cast<std::size_t>(l.out_channels) * c * l.kernel * l.kernel;
                     g.b_count = static_cast<std::size_t>(l.out_channels);
                   },
                   [&](const DenseLayer& l) {
                     if (l.out_features < 1) {
                       throw Error(ErrorCode::InvalidShape, "dense layer " + std::to_string(i) +
                                                                " needs out_features >= 1");
                     }
                     g.kind = Kind::Dense;
                     g.out_c = l.out_features;
                     g.out_h = 1;
                     g.out_w = 1;
                     g.w_count = static_cast<std::size_t>(l.out_features) * g.in_size();
                     g.b_count = static_cast<std::size_t>(l.out_features);
                   },
                   [&](const ReluLayer&) {
                     g.kind = Kind::Relu;
                     g.out_c = c;
                     g.out_h = h;
                     g.out_w = w;
                   },
                   [&](const GlobalAvgPoolLayer&) {
                     g.kind = Kind::Gap;
                     g.out_c = c;
                     g.out_h = 1;
                     g.out_w = 1;
                   },
               },
               spec.layers[i]);
    g.w_offset = offset;
    offset += g.w_count;
    g.b_offset = offset;
    offset += g.b_count;
    c = g.out_c;
    h = g.out_h;
    w = g.out_w;
    out.push_back(g);
  }
  const auto& last = out.back();
  if (last.kind != Kind::Dense || last.out_c != spec.num_classes) {
    throw Error(ErrorCode::InvalidShape, "final layer must be dense with num_classes outputs");
  }
  return out;
}

std::size_t plan_param_count(const std::vector<Geom>& geoms) {
  std::size_t n = 0;
  for (const auto& g : geoms) n += g.w_count + g.b_count;
  return n;
}

template <typename Real>
void forward_batch(const std::vector<Geom>& geoms, std::span<const Real> params,
                   std::span<const float> input, std::size_t batch,
                   std::vector<std::vector<Real>>& acts) {
  acts.resize(geoms.size() + 1);
  acts[0].assign(input.begin(), input.end());
  std::vector<Real> col;
  std::vector<double> acc;
  for (std::size_t l = 0; l < geoms.size(); ++l) {
    const Geom& g = geoms[l];
    const std::size_t in_n = g.in_size();
    const std::size_t out_n = g.out_size();
    acts[l + 1].assign(batch * out_n, Real(0));
    const Real* w = params.data() + g.w_offset;
    const Real* b = params.data() + g.b_offset;
    for (std::size_t s = 0; s < batch; ++s) {
      const Real* in = acts[l].data() + s * in_n;
      Real* out = acts[l + 1].data() + s * out_n;
      switch (g.kind) {
        case Kind::Conv: conv_forward(g, w, b, in, out, col, acc); break;
        case Kind::Dense: dense_forward(g, w, b, in, out); break;
        case Kind::Relu:
          for (std::size_t i = 0; i < in_n; ++i) out[i] = in[i] > Real(0) ? in[i] : Real(0);
          break;
        case Kind::Gap: gap_forward(g, in, out); break;
      }
    }
  }
}

template <typename Real>
double loss_batch(const std::vector<Geom>& geoms, std::span<const Real> params,
                  std::span<const float> input, std::size_t batch, std::span<const int> labels) {
  const int C = geoms.back().out_c;
  check_labels(labels, batch, C);
  std::vector<std::vector<Real>> acts;
  forward_batch<Real>(geoms, params, input, batch, acts);
  double total = 0;
  for (std::size_t s = 0; s < batch; ++s) {
    total += softmax_xent(acts.back().data() + s * C, C, labels[s], nullptr);
  }
  return total / static_cast<double>(batch);
}

template <typename Real>
double loss_and_grad_batch(const std::vector<Geom>& geoms, std::span<const Real> params,
                           std::span<const float> input, std::size_t batch,
                           std::span<const int> labels, std::span<double> grad) {
  const int C = geoms.back().out_c;
  check_labels(labels, batch, C);
  std::vector<std::vector<Real>> acts;
  forward_batch<Real>(geoms, params, input, batch, acts);

  const double inv_batch = 1.0 / static_cast<double>(batch);
  std::vector<double> dcur(batch * static_cast<std::size_t>(C));
  double total = 0;
  for (std::size_t s = 0; s < batch; ++s) {
    total += softmax_xent(acts.back().data() + s * C, C, labels[s], dcur.data() + s * C);
  }
  for (auto& d : dcur) d *= inv_batch;

  std::vector<double> dprev;
  std::vector<Real> col;
  std::vector<double> dcol;
  for (std::size_t li = geoms.size(); li-- > 0;) {
    const Geom& g = geoms[li];
    const std::size_t in_n = g.in_size();
    const std::size_t out_n = g.out_size();
    const bool need_din = li > 0;
    if (need_din) dprev.assign(batch * in_n, 0.0);
    const Real* w = params.data() + g.w_offset;
    double* gw = grad.data() + g.w_offset;
    double* gb = grad.data() + g.b_offset;

    for (std::size_t s = 0; s < batch; ++s) {
      const Real* in = acts[li].data() + s * in_n;
      const double* dout = dcur.data() + s * out_n;
      double* din = need_din ? dprev.data() + s * in_n : nullptr;
      switch (g.kind) {
        case Kind::Conv: {
          const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
          const std::size_t R = static_cast<std::size_t>(g.in_c) * g.kernel * g.kernel;
          col.resize(R * P);
          im2col(g, in, col.data());
          for (int o = 0; o < g.out_c; ++o) {
            const double* d_o = dout + static_cast<std::size_t>(o) * P;
            double bsum = 0;
            for (std::size_t p = 0; p < P; ++p) bsum += d_o[p];
            gb[o] += bsum;
            for (std::size_t r = 0; r < R; ++r) {
              gw[static_cast<std::size_t>(o) * R + r] += dot(d_o, col.data() + r * P, P);
            }
          }
          if (need_din) {
            dcol.assign(R * P, 0.0);
            for (int o = 0; o < g.out_c; ++o) {
              const double* d_o = dout + static_cast<std::size_t>(o) * P;
              const Real* wo = w + static_cast<std::size_t>(o) * R;
              for (std::size_t r = 0; r < R; ++r) {
                const double wr = static_cast<double>(wo[r]);
                double* dc = dcol.data() + r * P;
                for (std::size_t p = 0; p < P; ++p) dc[p] += wr * d_o[p];
              }
            }
            col2im_add(g, dcol.data(), din);
          }
          break;
        }
        case Kind::Dense: {
          for (int j = 0; j < g.out_c; ++j) {
            const double dj = dout[j];
            gb[j] += dj;
            double* gwj = gw + static_cast<std::size_t>(j) * in_n;
            for (std::size_t i = 0; i < in_n; ++i) gwj[i] += dj * static_cast<double>(in[i]);
            if (need_din) {
              const Real* wj = w + static_cast<std::size_t>(j) * in_n;
              for (std::size_t i = 0; i < in_n; ++i) din[i] += dj * static_cast<double>(wj[i]);
            }
          }
          break;
        }
        case Kind::Relu:
          if (need_din) {
            for (std::size_t i = 0; i < in_n; ++i) din[i] = in[i] > Real(0) ? dout[i] : 0.0;
          }
          break;
        case Kind::Gap:
          if (need_din) {
            const std::size_t hw = static_cast<std::size_t>(g.in_h) * g.in_w;
            for (int c = 0; c < g.in_c; ++c) {
              const double v = dout[c] / static_cast<double>(hw);
              std::fill(din + static_cast<std::size_t>(c) * hw, din + static_cast<std::size_t>(c + 1) * hw, v);
            }
          }
          break;
      }
    }
    if (need_din) dcur.swap(dprev);
  }
  return total * inv_batch;
}

template void forward_batch<float>(const std::vector<Geom>&, std::span<const float>,
                                   std::span<const float>, std::size_t,
                                   std::vector<std::vector<float>>&);
template void forward_batch<double>(const std::vector<Geom>&, std::span<const double>,
                                    std::span<const float>, std::size_t,
                                    std::vector<std::vector<double>>&);
template double loss_batch<float>(const std::vector<Geom>&, std::span<const float>,
                                  std::span<const float>, std::size_t, std::span<const int>);
template double loss_batch<double>(const std::vector<Geom>&, std::span<const double>,
                                   std::span<const float>, std::size_t, std::span<const int>);
template double loss_and_grad_batch<float>(const std::vector<Geom>&, std::span<const float>,
                                           std::span<const float>, std::size_t,
                                           std::span<const int>, std::span<double>);
template double loss_and_grad_batch<double>(const std::vector<Geom>&, std::span<const double>,
                                            std::span<const float>, std::size_t,
                                            std::span<const int>, std::span<double>);

}  // namespace fedkappa::nn::detail
