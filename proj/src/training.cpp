#include "qlstm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "qlstm/report.hpp"

namespace qlstm {

namespace {

using Clock = std::chrono::steady_clock;

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(Clock::now()) {}
  double seconds() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double>(Clock::now() - start_).count();
  }

 private:
  bool enabled_;
  Clock::time_point start_;
};

std::vector<Batch> epoch_batches(std::vector<Sentence>& order, const TrainConfig& config, SeededRng& rng) {
  if (config.shuffle) shuffle_sentences(order, rng);
  return batchify(order, config.batch_size);
}

double ppl_of(const LossStats& s) {
  return s.tokens == 0 ? 0.0 : std::exp(s.nll / static_cast<double>(s.tokens));
}

void add_stats(LossStats& acc, const LossStats& s) {
  acc.nll += s.nll;
  acc.tokens += s.tokens;
  acc.sentences += s.sentences;
}

std::string alpha_summary(std::span<const double> alpha) {
  if (alpha.empty()) return {};
  double lo = alpha[0], hi = alpha[0], sum = 0.0;
  for (double a : alpha) {
    lo = std::min(lo, a);
    hi = std::max(hi, a);
    sum += a;
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.4g/%.4g/%.4g", lo, sum / static_cast<double>(alpha.size()), hi);
  return buf;
}

[[noreturn]] void diverged(std::string_view where, std::size_t k, std::size_t batch, double loss,
                           const LstmLmParams& theta, const LstmLmParams* lambda, double lr) {
  std::ostringstream ss;
  ss << "diverged in " << where << ": iteration=" << k << " batch=" << batch << " loss=" << loss
     << " lr=" << lr << " |theta|=" << std::sqrt(theta.squared_norm());
  if (lambda) ss << " |lambda|=" << std::sqrt(lambda->squared_norm());
  throw DivergenceError(ss.str());
}

void check_corpora(std::span<const Sentence> train, std::span<const Sentence> valid) {
  if (train.empty()) throw std::invalid_argument("training corpus is empty");
  if (valid.empty()) throw std::invalid_argument("validation corpus is empty");
}

}  // namespace

void TrainConfig::validate() const {
  if (embed == 0 || hidden == 0) throw std::invalid_argument("embedding and hidden sizes must be positive");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
  if (eta1 && !(*eta1 >= 0.0)) throw std::invalid_argument("eta1 must be non-negative");
  if (eta2 && !(*eta2 >= 0.0)) throw std::invalid_argument("eta2 must be non-negative");
  if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be non-negative");
  if (epochs == 0) throw std::invalid_argument("epochs must be at least 1");
  if (admm_iterations == 0) throw std::invalid_argument("admm iterations must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
  if (!(init_scale >= 0.0)) throw std::invalid_argument("init scale must be non-negative");
}

// ---------------------------------------------------------------------------
// Curves

void write_curve_csv(std::ostream& os, const Curve& curve) {
  os << "iteration,train_ppl,valid_ppl,quantized_valid_ppl,alpha_summary,wallclock_s\n";
  char buf[256];
  for (const CurvePoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,", p.iteration, p.train_ppl, p.valid_ppl,
                  p.quantized_valid_ppl);
    os << buf << p.alpha_summary;
    std::snprintf(buf, sizeof buf, ",%.17g\n", p.wallclock_s);
    os << buf;
  }
}

Curve read_curve_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("iteration,", 0) != 0) throw std::runtime_error("not a curve CSV file");
  Curve curve;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw std::runtime_error("curve CSV row has " + std::to_string(f.size()) + " fields");
    CurvePoint p;
    try {
      p.iteration = std::stoul(f[0]);
      p.train_ppl = std::stod(f[1]);
      p.valid_ppl = std::stod(f[2]);
      p.quantized_valid_ppl = std::stod(f[3]);
      p.alpha_summary = f[4];
      p.wallclock_s = std::stod(f[5]);
    } catch (const std::logic_error&) {
      throw std::runtime_error("malformed curve CSV row: " + line);
    }
    curve.push_back(p);
  }
  return curve;
}

void save_curve(const std::filesystem::path& path, const Curve& curve) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_curve_csv(os, curve);
}

Curve load_curve(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open curve file " + path.string());
  return read_curve_csv(is);
}

std::size_t epochs_to_converge(std::span<const double> values, double rel_tol) {
  if (values.empty()) throw std::invalid_argument("epochs_to_converge: empty curve");
  const double final_value = values.back();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (std::abs(values[i] - final_value) <= rel_tol * std::abs(final_value)) return i + 1;
  }
  return values.size();
}

// ---------------------------------------------------------------------------
// ADMM

AdmmState init_admm_state(const ModelDims& dims, const TrainConfig& config, SeededRng& rng) {
  AdmmState s{LstmLmParams::random(dims, rng, config.init_scale), LstmLmParams::zeros(dims), config.gamma,
              QuantState::initial(ClusterLayout(dims, config.tying, config.bias), config.table), 0};
  s.quant = quantize_model(s.theta, s.lambda, s.quant);
  return s;
}

double augmented_loss(const LstmLmParams& theta, const QuantState& quant, const LstmLmParams& lambda, double gamma,
                      const Batch& batch) {
  const LstmLmParams f = quant.dequantize();
  if (!theta.same_shape(f) || !theta.same_shape(lambda)) throw std::invalid_argument("augmented_loss: shape mismatch");
  LstmLmParams residual = theta;
  residual.axpy(-1.0, f);
  residual.axpy(1.0, lambda);
  return batch_loss(theta, batch) + 0.5 * gamma * residual.squared_norm() - 0.5 * gamma * lambda.squared_norm();
}

LossStats augmented_gradient(const LstmLmParams& theta, const LstmLmParams& quantized, const LstmLmParams& lambda,
                             double gamma, const Batch& batch, Gradients& grads, double ce_weight) {
  grads.set_zero();
  LossStats stats;
  if (ce_weight != 0.0) {
    stats = accumulate_batch_gradient(theta, batch, grads);
    if (ce_weight != 1.0) grads.scale(ce_weight);
  }
  if (gamma != 0.0) {
    grads.axpy(gamma, theta);
    grads.axpy(-gamma, quantized);
    grads.axpy(gamma, lambda);
  }
  return stats;
}

LossStats admm_weight_stage(AdmmState& state, const TrainConfig& config, std::span<const Batch> batches,
                            double learning_rate, double ce_weight) {
  const double eta1 = config.eta1.value_or(learning_rate);
  const double eta2 = config.eta2.value_or(learning_rate);
  const LstmLmParams quantized = state.quant.dequantize();
  Gradients grads = LstmLmParams::zeros(state.theta.dims);
  LstmLmParams lookahead = state.theta;
  LossStats epoch;

  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Batch& batch = batches[b];
    LossStats stats = augmented_gradient(state.theta, quantized, state.lambda, state.gamma, batch, grads, ce_weight);
    if (!std::isfinite(stats.nll)) diverged("weight stage", state.k, b, stats.nll, state.theta, &state.lambda, learning_rate);
    add_stats(epoch, stats);
    clip_global_norm(grads, config.clip_norm);
    lookahead = state.theta;
    lookahead.axpy(-eta1, grads);

    stats = augmented_gradient(lookahead, quantized, state.lambda, state.gamma, batch, grads, ce_weight);
    if (!std::isfinite(stats.nll)) diverged("weight stage (extra-gradient)", state.k, b, stats.nll, lookahead, &state.lambda, learning_rate);
    clip_global_norm(grads, config.clip_norm);
    state.theta.axpy(-eta2, grads);
  }
  if (!state.theta.all_finite()) diverged("weight stage", state.k, batches.size(), NAN, state.theta, &state.lambda, learning_rate);
  return epoch;
}

LossStats admm_iteration(AdmmState& state, const TrainConfig& config, std::span<const Batch> batches,
                         double learning_rate) {
  LossStats stats = admm_weight_stage(state, config, batches, learning_rate);
  state.quant = quantize_model(state.theta, state.lambda, state.quant);
  const LstmLmParams quantized = state.quant.dequantize();
  state.lambda.axpy(1.0, state.theta);
  state.lambda.axpy(-1.0, quantized);
  ++state.k;
  return stats;
}

AdmmResult train_admm(const TrainConfig& config, std::span<const Sentence> train, std::span<const Sentence> valid,
                      std::size_t vocab_size) {
  config.validate();
  check_corpora(train, valid);
  SeededRng rng(config.seed);
  AdmmResult result{QuantState::initial(ClusterLayout(config.dims(vocab_size), config.tying, config.bias), config.table),
                    0, {}, false, init_admm_state(config.dims(vocab_size), config, rng)};
  AdmmState& state = result.final_state;
  std::vector<Sentence> order(train.begin(), train.end());
  double lr = config.learning_rate;
  double best_ppl = std::numeric_limits<double>::infinity();
  const Stopwatch clock(config.record_wallclock);

  for (std::size_t it = 1; it <= config.admm_iterations; ++it) {
    const std::vector<Batch> batches = epoch_batches(order, config, rng);
    LossStats stats;
    try {
      stats = admm_iteration(state, config, batches, lr);
    } catch (const DivergenceError&) {
      if (result.curve.empty()) throw;
      result.diverged = true;
      break;
    }
    CurvePoint p;
    p.iteration = it;
    p.train_ppl = ppl_of(stats);
    p.valid_ppl = perplexity(state.theta, valid);
    p.quantized_valid_ppl = perplexity(state.quant, valid);
    p.alpha_summary = alpha_summary(state.quant.alpha);
    p.wallclock_s = clock.seconds();
    result.curve.push_back(p);
    if (!std::isfinite(p.quantized_valid_ppl)) {
      result.diverged = true;
      break;
    }
    if (p.quantized_valid_ppl < best_ppl) {
      best_ppl = p.quantized_valid_ppl;
      result.best = state.quant;
      result.best_iteration = it;
    } else if (config.lr_schedule == LrSchedule::HalveOnPlateau) {
      lr *= 0.5;
    }
  }
  if (result.best_iteration == 0) throw DivergenceError("ADMM training produced no finite quantized model");
  return result;
}

// ---------------------------------------------------------------------------
// Full precision

FullPrecisionResult train_full_precision(const TrainConfig& config, std::span<const Sentence> train,
                                         std::span<const Sentence> valid, std::size_t vocab_size) {
  config.validate();
  check_corpora(train, valid);
  SeededRng rng(config.seed);
  const ModelDims dims = config.dims(vocab_size);
  LstmLmParams params = LstmLmParams::random(dims, rng, config.init_scale);
  FullPrecisionResult result{params, 0, {}};
  double best_ppl = perplexity(params, valid);
  std::vector<Sentence> order(train.begin(), train.end());
  Gradients grads = LstmLmParams::zeros(dims);
  double lr = config.learning_rate;
  const Stopwatch clock(config.record_wallclock);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::vector<Batch> batches = epoch_batches(order, config, rng);
    LossStats total;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      grads.set_zero();
      const LossStats stats = accumulate_batch_gradient(params, batches[b], grads);
      if (!std::isfinite(stats.nll)) diverged("SGD", epoch, b, stats.nll, params, nullptr, lr);
      add_stats(total, stats);
      clip_global_norm(grads, config.clip_norm);
      params.axpy(-lr, grads);
    }
    if (!params.all_finite()) diverged("SGD", epoch, batches.size(), NAN, params, nullptr, lr);

    CurvePoint p;
    p.iteration = epoch;
    p.train_ppl = ppl_of(total);
    p.valid_ppl = perplexity(params, valid);
    p.quantized_valid_ppl = p.valid_ppl;
    p.wallclock_s = clock.seconds();
    result.curve.push_back(p);
    if (p.valid_ppl < best_ppl) {
      best_ppl = p.valid_ppl;
      result.best = params;
      result.best_epoch = epoch;
    } else if (config.lr_schedule == LrSchedule::HalveOnPlateau) {
      lr *= 0.5;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Binarized baseline

LstmLmParams BinarizedModel::effective() const {
  LstmLmParams out = shadow;
  const double magnitude = 1.0 / std::sqrt(static_cast<double>(shadow.dims.hidden));
  auto dst = out.blocks();
  auto src = shadow.blocks();
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    const Matrix& w = *src[b];
    Matrix& e = *dst[b];
    const bool fp_bias = with_linear && block_has_bias(b);
    const double s = (with_linear ? scale[b] : 1.0) * magnitude;
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < w.cols(); ++c) {
        if (fp_bias && c + 1 == w.cols()) continue;
        e(r, c) = w(r, c) >= 0.0 ? s : -s;
      }
    }
  }
  return out;
}

BinarizedResult train_binarized(const TrainConfig& config, std::span<const Sentence> train,
                                std::span<const Sentence> valid, std::size_t vocab_size, bool with_linear) {
  config.validate();
  check_corpora(train, valid);
  SeededRng rng(config.seed);
  const ModelDims dims = config.dims(vocab_size);
  BinarizedModel model{LstmLmParams::random(dims, rng, std::min(config.init_scale, 1.0)), {1, 1, 1, 1, 1, 1},
                       with_linear};
  BinarizedResult result{model, 0, {}};
  double best_ppl = perplexity(model.effective(), valid);
  std::vector<Sentence> order(train.begin(), train.end());
  Gradients grads = LstmLmParams::zeros(dims);
  const double magnitude = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
  double lr = config.learning_rate;
  const Stopwatch clock(config.record_wallclock);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::vector<Batch> batches = epoch_batches(order, config, rng);
    LossStats total;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const LstmLmParams eff = model.effective();
      grads.set_zero();
      const LossStats stats = accumulate_batch_gradient(eff, batches[b], grads);
      if (!std::isfinite(stats.nll)) diverged("binarized SGD", epoch, b, stats.nll, model.shadow, nullptr, lr);
      add_stats(total, stats);
      clip_global_norm(grads, config.clip_norm);

      auto w = model.shadow.blocks();
      auto g = grads.blocks();
      for (std::size_t k = 0; k < kBlockCount; ++k) {
        Matrix& wk = *w[k];
        const Matrix& gk = *g[k];
        const bool fp_bias = with_linear && block_has_bias(k);
        double dscale = 0.0;
        for (std::size_t r = 0; r < wk.rows(); ++r) {
          for (std::size_t c = 0; c < wk.cols(); ++c) {
            if (fp_bias && c + 1 == wk.cols()) {
              wk(r, c) -= lr * gk(r, c);
              continue;
            }
            // Straight-through: the binarized weight's gradient drives the shadow weight.
            dscale += gk(r, c) * (wk(r, c) >= 0.0 ? magnitude : -magnitude);
            wk(r, c) = std::clamp(wk(r, c) - lr * gk(r, c), -1.0, 1.0);
          }
        }
        if (with_linear) model.scale[k] -= lr * dscale;
      }
    }
    if (!model.shadow.all_finite()) diverged("binarized SGD", epoch, batches.size(), NAN, model.shadow, nullptr, lr);

    CurvePoint p;
    p.iteration = epoch;
    p.train_ppl = ppl_of(total);
    p.valid_ppl = perplexity(model.effective(), valid);
    p.quantized_valid_ppl = p.valid_ppl;
    if (with_linear) p.alpha_summary = alpha_summary(model.scale);
    p.wallclock_s = clock.seconds();
    result.curve.push_back(p);
    if (p.valid_ppl < best_ppl) {
      best_ppl = p.valid_ppl;
      result.best = model;
      result.best_epoch = epoch;
    } else if (config.lr_schedule == LrSchedule::HalveOnPlateau) {
      lr *= 0.5;
    }
  }
  return result;
}

}  // namespace qlstm
