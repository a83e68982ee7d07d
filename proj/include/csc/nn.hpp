#pragma once
// Small building blocks on top of the tape: column-broadcast affine maps,
// layer normalization, and a gated recurrent cell batched over columns.

#include <vector>

#include "csc/common.hpp"
#include "csc/tensor.hpp"

namespace csc {

// w[out x in] * x[in x B] + b[out x 1] broadcast over the B columns.
// The bias broadcast is materialized explicitly via b * ones(1 x B).
inline Tensor affine_cols(Tape& tp, const Tensor& w, const Tensor& x, const Tensor& b) {
  Tensor wx = tp.matmul(w, x);
  Tensor ones_row = Tensor::full({1, x.extent(1)}, 1.0);
  return tp.add(wx, tp.matmul(b, ones_row));
}

// Per-column layer norm over the leading (feature) axis of x[D x B],
// followed by learned per-feature gain and bias (both [D x 1]).
inline Tensor layer_norm_cols(Tape& tp, const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-6) {
  const int d = x.extent(0), b = x.extent(1);
  Tensor ones_row_d = Tensor::full({1, d}, 1.0);
  Tensor ones_col_d = Tensor::full({d, 1}, 1.0);
  Tensor ones_row_b = Tensor::full({1, b}, 1.0);

  Tensor mean = tp.scale(tp.matmul(ones_row_d, x), 1.0 / d);           // [1 x B]
  Tensor centered = tp.sub(x, tp.matmul(ones_col_d, mean));            // [D x B]
  Tensor var = tp.scale(tp.matmul(ones_row_d, tp.mul(centered, centered)), 1.0 / d);
  Tensor inv_std = tp.pow_scalar(tp.add_const(var, eps), -0.5);        // [1 x B]
  Tensor normed = tp.mul(centered, tp.matmul(ones_col_d, inv_std));
  Tensor scaled = tp.mul(normed, tp.matmul(gain, ones_row_b));
  return tp.add(scaled, tp.matmul(bias, ones_row_b));
}

// GRU cell over column batches: x[in x B], h[hidden x B] -> new h.
// Separate input/hidden weights per gate; biases broadcast over columns.
struct GruCell {
  Tensor wr_x, wr_h, br;
  Tensor wu_x, wu_h, bu;
  Tensor wc_x, wc_h, bc;

  static GruCell init(int in_dim, int hidden, Rng& rng) {
    GruCell c;
    auto mat = [&](int rows, int cols) {
      std::vector<double> v(static_cast<std::size_t>(rows) * cols);
      const double s = 1.0 / std::sqrt(static_cast<double>(cols));
      for (auto& e : v) e = rng.normal(0.0, s);
      return Tensor::param({rows, cols}, std::move(v));
    };
    c.wr_x = mat(hidden, in_dim);
    c.wr_h = mat(hidden, hidden);
    c.br = Tensor::param({hidden, 1}, std::vector<double>(static_cast<std::size_t>(hidden), 0.0));
    c.wu_x = mat(hidden, in_dim);
    c.wu_h = mat(hidden, hidden);
    c.bu = Tensor::param({hidden, 1}, std::vector<double>(static_cast<std::size_t>(hidden), 0.0));
    c.wc_x = mat(hidden, in_dim);
    c.wc_h = mat(hidden, hidden);
    c.bc = Tensor::param({hidden, 1}, std::vector<double>(static_cast<std::size_t>(hidden), 0.0));
    return c;
  }

  Tensor step(Tape& tp, const Tensor& x, const Tensor& h) const {
    Tensor ones_row = Tensor::full({1, x.extent(1)}, 1.0);
    auto gate = [&](const Tensor& wx, const Tensor& wh, const Tensor& b, const Tensor& hin) {
      return tp.add(tp.add(tp.matmul(wx, x), tp.matmul(wh, hin)), tp.matmul(b, ones_row));
    };
    Tensor r = tp.sigmoid(gate(wr_x, wr_h, br, h));
    Tensor u = tp.sigmoid(gate(wu_x, wu_h, bu, h));
    Tensor cand = tp.tanh_(gate(wc_x, wc_h, bc, tp.mul(r, h)));
    // h' = u*h + (1-u)*cand
    return tp.add(tp.mul(u, h), tp.sub(cand, tp.mul(u, cand)));
  }

  std::vector<Tensor*> params() {
    return {&wr_x, &wr_h, &br, &wu_x, &wu_h, &bu, &wc_x, &wc_h, &bc};
  }
};

}  // namespace csc
