#include "qlstm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qlstm {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t SeededRng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("SeededRng::below: n must be positive");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = engine_();
  while (v >= limit) v = engine_();
  return v % n;
}

void affine_into(const Matrix& w, std::span<const double> x, bool with_bias_one, std::span<double> out) {
  const std::size_t expected = x.size() + (with_bias_one ? 1 : 0);
  if (w.cols() != expected) {
    throw std::invalid_argument("affine: matrix has " + std::to_string(w.cols()) + " columns, input needs " +
                                std::to_string(expected));
  }
  if (out.size() != w.rows()) throw std::invalid_argument("affine: output size mismatch");
  const std::size_t n = x.size();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double* row = w.row(r).data();
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) acc += row[c] * x[c];
    if (with_bias_one) acc += row[n];
    out[r] = acc;
  }
}

Vector affine(const Matrix& w, std::span<const double> x, bool with_bias_one) {
  Vector out(w.rows());
  affine_into(w, x, with_bias_one, out);
  return out;
}

double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

Vector softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  const double peak = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - peak);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

SoftmaxCe softmax_ce(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw std::out_of_range("softmax_ce: target " + std::to_string(target) + " out of range for " +
                            std::to_string(logits.size()) + " classes");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  SoftmaxCe out;
  out.dlogits.resize(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.dlogits[i] = std::exp(logits[i] - peak);
    total += out.dlogits[i];
  }
  // -log p_t = log(sum exp(z - peak)) - (z_t - peak)
  out.loss = std::log(total) - (logits[target] - peak);
  for (double& v : out.dlogits) v /= total;
  out.dlogits[target] -= 1.0;
  return out;
}

}  // namespace qlstm
