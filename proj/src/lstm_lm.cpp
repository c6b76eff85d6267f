#include "qlstm/lstm_lm.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "binary_io.hpp"

namespace qlstm {

namespace {

constexpr std::string_view kFpMagic = "QLSTMFP1";
constexpr std::uint32_t kFpVersion = 1;

void check_token(TokenId id, const ModelDims& dims) {
  if (id >= dims.vocab) {
    throw std::out_of_range("token id " + std::to_string(id) + " out of range for vocabulary of " +
                            std::to_string(dims.vocab));
  }
}

// Gate math shared by lstm_step and forward_sentence. `joint` is [x; h].
void gate_step(const LstmLmParams& p, std::span<const double> joint, std::span<const double> c_prev, double* f,
               double* i, double* g, double* o, double* c, double* c_tanh, double* h) {
  const std::size_t d = p.dims.hidden;
  affine_into(p.forget_gate, joint, true, {f, d});
  affine_into(p.input_gate, joint, true, {i, d});
  affine_into(p.cell_gate, joint, true, {g, d});
  affine_into(p.output_gate, joint, true, {o, d});
  for (std::size_t k = 0; k < d; ++k) {
    f[k] = sigmoid(f[k]);
    i[k] = sigmoid(i[k]);
    g[k] = std::tanh(g[k]);
    o[k] = sigmoid(o[k]);
    c[k] = f[k] * c_prev[k] + i[k] * g[k];
    c_tanh[k] = std::tanh(c[k]);
    h[k] = o[k] * c_tanh[k];
  }
}

void joint_input(const LstmLmParams& p, TokenId token, std::span<const double> h, std::vector<double>& joint) {
  const std::size_t m = p.dims.embed;
  joint.resize(m + p.dims.hidden);
  for (std::size_t r = 0; r < m; ++r) joint[r] = p.embedding(r, token);
  std::copy(h.begin(), h.end(), joint.begin() + static_cast<std::ptrdiff_t>(m));
}

// dW += dz ⊗ [in; 1]; din += Wᵀ dz (din covers the non-bias columns).
void gate_backward(const Matrix& w, std::span<const double> dz, std::span<const double> in, double weight,
                   Matrix& dw, std::span<double> din) {
  const std::size_t n = in.size();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double dzr = dz[r];
    if (dzr == 0.0) continue;
    const double* wrow = w.row(r).data();
    double* grow = dw.row(r).data();
    const double s = weight * dzr;
    for (std::size_t c = 0; c < n; ++c) {
      grow[c] += s * in[c];
      din[c] += wrow[c] * dzr;
    }
    grow[n] += s;
  }
}

}  // namespace

std::size_t parameter_count(const ModelDims& d) {
  return d.embed * d.vocab + 4 * d.hidden * (d.embed + d.hidden + 1) + d.vocab * (d.hidden + 1);
}

LstmLmParams LstmLmParams::zeros(const ModelDims& dims) {
  const std::size_t gate_cols = dims.embed + dims.hidden + 1;
  LstmLmParams p;
  p.dims = dims;
  p.embedding = Matrix(dims.embed, dims.vocab);
  p.forget_gate = Matrix(dims.hidden, gate_cols);
  p.input_gate = Matrix(dims.hidden, gate_cols);
  p.cell_gate = Matrix(dims.hidden, gate_cols);
  p.output_gate = Matrix(dims.hidden, gate_cols);
  p.output_layer = Matrix(dims.vocab, dims.hidden + 1);
  return p;
}

LstmLmParams LstmLmParams::random(const ModelDims& dims, SeededRng& rng, double scale) {
  LstmLmParams p = zeros(dims);
  auto blocks = p.blocks();
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    Matrix& m = *blocks[b];
    const std::size_t weight_cols = block_has_bias(b) ? m.cols() - 1 : m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < weight_cols; ++c) m(r, c) = rng.uniform(-scale, scale);
    }
  }
  return p;
}

std::array<Matrix*, kBlockCount> LstmLmParams::blocks() {
  return {&embedding, &forget_gate, &input_gate, &cell_gate, &output_gate, &output_layer};
}

std::array<const Matrix*, kBlockCount> LstmLmParams::blocks() const {
  return {&embedding, &forget_gate, &input_gate, &cell_gate, &output_gate, &output_layer};
}

bool LstmLmParams::same_shape(const LstmLmParams& other) const {
  if (dims != other.dims) return false;
  auto a = blocks();
  auto b = other.blocks();
  for (std::size_t i = 0; i < kBlockCount; ++i) {
    if (!a[i]->same_shape(*b[i])) return false;
  }
  return true;
}

bool LstmLmParams::all_finite() const {
  for (const Matrix* m : blocks()) {
    if (!m->all_finite()) return false;
  }
  return true;
}

void LstmLmParams::set_zero() {
  for (Matrix* m : blocks()) m->fill(0.0);
}

void LstmLmParams::scale(double a) {
  for (Matrix* m : blocks()) {
    for (double& v : m->values()) v *= a;
  }
}

void LstmLmParams::axpy(double a, const LstmLmParams& x) {
  if (!same_shape(x)) throw std::invalid_argument("axpy: parameter shape mismatch");
  auto dst = blocks();
  auto src = x.blocks();
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    auto d = dst[b]->values();
    auto s = src[b]->values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += a * s[i];
  }
}

double LstmLmParams::dot(const LstmLmParams& other) const {
  if (!same_shape(other)) throw std::invalid_argument("dot: parameter shape mismatch");
  auto a = blocks();
  auto b = other.blocks();
  double acc = 0.0;
  for (std::size_t k = 0; k < kBlockCount; ++k) {
    auto x = a[k]->values();
    auto y = b[k]->values();
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  }
  return acc;
}

std::vector<double> LstmLmParams::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const Matrix* m : blocks()) out.insert(out.end(), m->values().begin(), m->values().end());
  return out;
}

LstmLmParams LstmLmParams::unflatten(const ModelDims& dims, std::span<const double> flat) {
  LstmLmParams p = zeros(dims);
  if (flat.size() != p.parameter_count()) throw std::invalid_argument("unflatten: wrong parameter count");
  std::size_t offset = 0;
  for (Matrix* m : p.blocks()) {
    auto v = m->values();
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
              flat.begin() + static_cast<std::ptrdiff_t>(offset + v.size()), v.begin());
    offset += v.size();
  }
  return p;
}

Vector embed(TokenId word_id, const LstmLmParams& params) {
  check_token(word_id, params.dims);
  Vector x(params.dims.embed);
  for (std::size_t r = 0; r < x.size(); ++r) x[r] = params.embedding(r, word_id);
  return x;
}

LstmStep lstm_step(std::span<const double> x_prev, std::span<const double> h_prev, std::span<const double> c_prev,
                   const LstmLmParams& params) {
  const ModelDims& d = params.dims;
  if (x_prev.size() != d.embed || h_prev.size() != d.hidden || c_prev.size() != d.hidden) {
    throw std::invalid_argument("lstm_step: input shapes do not match the model dimensions");
  }
  Vector joint(x_prev.begin(), x_prev.end());
  joint.insert(joint.end(), h_prev.begin(), h_prev.end());
  LstmStep s;
  for (Vector* v : {&s.hidden, &s.cell, &s.forget, &s.input, &s.candidate, &s.output}) v->resize(d.hidden);
  Vector c_tanh(d.hidden);
  gate_step(params, joint, c_prev, s.forget.data(), s.input.data(), s.candidate.data(), s.output.data(),
            s.cell.data(), c_tanh.data(), s.hidden.data());
  return s;
}

ForwardResult forward_sentence(std::span<const TokenId> sentence, const LstmLmParams& params) {
  if (sentence.empty()) throw std::invalid_argument("forward_sentence: empty sentence");
  const ModelDims& d = params.dims;
  for (TokenId t : sentence) check_token(t, d);
  check_token(kEosId, d);

  ForwardResult out;
  out.cache.sentence.assign(sentence.begin(), sentence.end());
  out.cache.steps.resize(sentence.size());

  Vector h(d.hidden, 0.0);
  Vector c(d.hidden, 0.0);
  Vector joint;
  for (std::size_t t = 0; t < sentence.size(); ++t) {
    StepRecord& s = out.cache.steps[t];
    s.input_token = t == 0 ? kEosId : sentence[t - 1];
    joint_input(params, s.input_token, h, joint);
    s.x.assign(joint.begin(), joint.begin() + static_cast<std::ptrdiff_t>(d.embed));
    s.h_prev = h;
    s.c_prev = c;
    for (Vector* v : {&s.forget, &s.input, &s.candidate, &s.output, &s.cell, &s.cell_tanh, &s.hidden}) {
      v->resize(d.hidden);
    }
    gate_step(params, joint, c, s.forget.data(), s.input.data(), s.candidate.data(), s.output.data(),
              s.cell.data(), s.cell_tanh.data(), s.hidden.data());
    s.logits.resize(d.vocab);
    affine_into(params.output_layer, s.hidden, true, s.logits);
    out.total_nll += softmax_ce(s.logits, sentence[t]).loss;
    h = s.hidden;
    c = s.cell;
  }
  return out;
}

double sentence_nll(std::span<const TokenId> sentence, const LstmLmParams& params) {
  if (sentence.empty()) throw std::invalid_argument("sentence_nll: empty sentence");
  const ModelDims& d = params.dims;
  for (TokenId t : sentence) check_token(t, d);
  check_token(kEosId, d);

  Vector h(d.hidden, 0.0), c(d.hidden, 0.0), c_next(d.hidden), h_next(d.hidden);
  Vector f(d.hidden), i(d.hidden), g(d.hidden), o(d.hidden), c_tanh(d.hidden), logits(d.vocab), joint;
  double total = 0.0;
  for (std::size_t t = 0; t < sentence.size(); ++t) {
    joint_input(params, t == 0 ? kEosId : sentence[t - 1], h, joint);
    gate_step(params, joint, c, f.data(), i.data(), g.data(), o.data(), c_next.data(), c_tanh.data(),
              h_next.data());
    affine_into(params.output_layer, h_next, true, logits);
    total += softmax_ce(logits, sentence[t]).loss;
    std::swap(h, h_next);
    std::swap(c, c_next);
  }
  return total;
}

void backward_bptt_into(const LstmStateCache& cache, std::span<const TokenId> sentence,
                        const LstmLmParams& params, double weight, Gradients& grads) {
  if (cache.steps.size() != sentence.size() ||
      !std::equal(sentence.begin(), sentence.end(), cache.sentence.begin(), cache.sentence.end())) {
    throw std::invalid_argument("backward_bptt: cache does not belong to this sentence");
  }
  if (!grads.same_shape(params)) throw std::invalid_argument("backward_bptt: gradient shape mismatch");
  const ModelDims& d = params.dims;
  const std::size_t m = d.embed;
  const std::size_t hd = d.hidden;

  Vector dh_next(hd, 0.0), dc_next(hd, 0.0), dh(hd), dc(hd);
  Vector dzf(hd), dzi(hd), dzg(hd), dzo(hd);
  Vector joint(m + hd), djoint(m + hd);

  for (std::size_t step = sentence.size(); step-- > 0;) {
    const StepRecord& s = cache.steps[step];
    SoftmaxCe ce = softmax_ce(s.logits, sentence[step]);

    // Output layer.
    dh = dh_next;
    for (std::size_t r = 0; r < d.vocab; ++r) {
      const double dl = ce.dlogits[r];
      const double* wrow = params.output_layer.row(r).data();
      double* grow = grads.output_layer.row(r).data();
      const double s_dl = weight * dl;
      for (std::size_t k = 0; k < hd; ++k) {
        grow[k] += s_dl * s.hidden[k];
        dh[k] += wrow[k] * dl;
      }
      grow[hd] += s_dl;
    }

    for (std::size_t k = 0; k < hd; ++k) {
      const double o = s.output[k];
      const double ct = s.cell_tanh[k];
      dzo[k] = dh[k] * ct * o * (1.0 - o);
      dc[k] = dh[k] * o * (1.0 - ct * ct) + dc_next[k];
      const double f = s.forget[k];
      const double i = s.input[k];
      const double g = s.candidate[k];
      dzf[k] = dc[k] * s.c_prev[k] * f * (1.0 - f);
      dzi[k] = dc[k] * g * i * (1.0 - i);
      dzg[k] = dc[k] * i * (1.0 - g * g);
      dc_next[k] = dc[k] * f;
    }

    std::copy(s.x.begin(), s.x.end(), joint.begin());
    std::copy(s.h_prev.begin(), s.h_prev.end(), joint.begin() + static_cast<std::ptrdiff_t>(m));
    std::fill(djoint.begin(), djoint.end(), 0.0);
    gate_backward(params.forget_gate, dzf, joint, weight, grads.forget_gate, djoint);
    gate_backward(params.input_gate, dzi, joint, weight, grads.input_gate, djoint);
    gate_backward(params.cell_gate, dzg, joint, weight, grads.cell_gate, djoint);
    gate_backward(params.output_gate, dzo, joint, weight, grads.output_gate, djoint);

    for (std::size_t r = 0; r < m; ++r) grads.embedding(r, s.input_token) += weight * djoint[r];
    std::copy(djoint.begin() + static_cast<std::ptrdiff_t>(m), djoint.end(), dh_next.begin());
  }
}

Gradients backward_bptt(const LstmStateCache& cache, std::span<const TokenId> sentence, const LstmLmParams& params) {
  Gradients g = LstmLmParams::zeros(params.dims);
  backward_bptt_into(cache, sentence, params, 1.0, g);
  return g;
}

LossStats accumulate_batch_gradient(const LstmLmParams& params, const Batch& batch, Gradients& grads) {
  LossStats stats;
  if (batch.sentences.empty()) return stats;
  const double weight = 1.0 / static_cast<double>(batch.sentences.size());
  for (const Sentence& s : batch.sentences) {
    ForwardResult fwd = forward_sentence(s, params);
    backward_bptt_into(fwd.cache, s, params, weight, grads);
    stats.nll += fwd.total_nll;
    stats.tokens += s.size();
    ++stats.sentences;
  }
  return stats;
}

double batch_loss(const LstmLmParams& params, const Batch& batch) {
  if (batch.sentences.empty()) return 0.0;
  double total = 0.0;
  for (const Sentence& s : batch.sentences) total += sentence_nll(s, params);
  return total / static_cast<double>(batch.sentences.size());
}

double clip_global_norm(Gradients& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm && norm > 0.0) grads.scale(max_norm / norm);
  return norm;
}

void write_params(std::ostream& os, const LstmLmParams& params) {
  detail::write_magic(os, kFpMagic);
  detail::write_u32(os, kFpVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(params.dims.vocab));
  detail::write_u32(os, static_cast<std::uint32_t>(params.dims.embed));
  detail::write_u32(os, static_cast<std::uint32_t>(params.dims.hidden));
  for (const Matrix* m : params.blocks()) {
    for (double v : m->values()) detail::write_f64(os, v);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint");
}

LstmLmParams read_params(std::istream& is) {
  detail::expect_magic(is, kFpMagic, "full-precision");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kFpVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  ModelDims dims;
  dims.vocab = detail::read_u32(is);
  dims.embed = detail::read_u32(is);
  dims.hidden = detail::read_u32(is);
  if (dims.vocab == 0 || dims.embed == 0 || dims.hidden == 0) throw std::runtime_error("checkpoint has zero dims");
  LstmLmParams p = LstmLmParams::zeros(dims);
  for (Matrix* m : p.blocks()) {
    for (double& v : m->values()) v = detail::read_f64(is);
  }
  return p;
}

void save_params(const std::filesystem::path& path, const LstmLmParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_params(os, params);
}

LstmLmParams load_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file " + path.string());
  LstmLmParams p = read_params(is);
  detail::expect_end(is);
  return p;
}

}  // namespace qlstm
