#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qlstm/corpus.hpp"
#include "qlstm/lstm_lm.hpp"
#include "qlstm/quantizer.hpp"

namespace qlstm {

enum class LrSchedule { Constant, HalveOnPlateau };

struct TrainConfig {
  std::size_t embed = 200;
  std::size_t hidden = 200;
  double learning_rate = 1.0;
  // Extra-gradient step sizes; unset means "the current learning rate".
  std::optional<double> eta1;
  std::optional<double> eta2;
  double gamma = 1e-3;
  std::size_t epochs = 10;
  std::size_t admm_iterations = 50;
  std::size_t batch_size = 10;
  std::uint64_t seed = 1;
  bool shuffle = false;
  TyingScope tying = TyingScope::PerLayer;
  QuantTable table = QuantTable({-1, 1});
  BiasPolicy bias = BiasPolicy::Quantized;
  LrSchedule lr_schedule = LrSchedule::HalveOnPlateau;
  double clip_norm = 5.0;
  double init_scale = 0.1;
  bool record_wallclock = false;

  /// Throws std::invalid_argument on negative rates, zero sizes or zero iteration counts.
  void validate() const;
  ModelDims dims(std::size_t vocab_size) const { return {vocab_size, embed, hidden}; }
};

/// Thrown when a loss or parameter becomes non-finite. what() carries a state dump.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CurvePoint {
  std::size_t iteration = 0;
  double train_ppl = 0.0;
  double valid_ppl = 0.0;
  double quantized_valid_ppl = 0.0;
  std::string alpha_summary;  // "min/mean/max" of the scaling factors, empty when not quantized
  double wallclock_s = 0.0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

using Curve = std::vector<CurvePoint>;

void write_curve_csv(std::ostream& os, const Curve& curve);
Curve read_curve_csv(std::istream& is);
void save_curve(const std::filesystem::path& path, const Curve& curve);
Curve load_curve(const std::filesystem::path& path);

/// First 1-based position whose value lies within rel_tol of the last value.
std::size_t epochs_to_converge(std::span<const double> values, double rel_tol = 0.05);

// ---------------------------------------------------------------------------
// ADMM

struct AdmmState {
  LstmLmParams theta;   // full-precision weights
  LstmLmParams lambda;  // accumulated quantization error (scaled multipliers)
  double gamma = 1e-3;
  QuantState quant;     // f(theta)
  std::size_t k = 0;
};

/// Random theta, zero lambda, and quant fitted to theta from alpha = 1.
AdmmState init_admm_state(const ModelDims& dims, const TrainConfig& config, SeededRng& rng);

/// F_ce(batch) + gamma/2 ||theta - f + lambda||² - gamma/2 ||lambda||²,
/// with F_ce the mean per-sentence NLL of the batch.
double augmented_loss(const LstmLmParams& theta, const QuantState& quant, const LstmLmParams& lambda, double gamma,
                      const Batch& batch);

/// grads = ce_weight * ∇F_ce(theta) + gamma (theta - quantized + lambda), unclipped.
LossStats augmented_gradient(const LstmLmParams& theta, const LstmLmParams& quantized, const LstmLmParams& lambda,
                             double gamma, const Batch& batch, Gradients& grads, double ce_weight = 1.0);

/// One epoch of extra-gradient steps on the augmented loss with quant and
/// lambda frozen. Returns the training loss statistics at the look-behind points.
LossStats admm_weight_stage(AdmmState& state, const TrainConfig& config, std::span<const Batch> batches,
                            double learning_rate, double ce_weight = 1.0);

/// Weight stage, then quantization refit, then lambda += theta - f(theta).
LossStats admm_iteration(AdmmState& state, const TrainConfig& config, std::span<const Batch> batches,
                         double learning_rate);

struct AdmmResult {
  QuantState best;
  std::size_t best_iteration = 0;  // 1-based
  Curve curve;
  bool diverged = false;
  AdmmState final_state;
};

AdmmResult train_admm(const TrainConfig& config, std::span<const Sentence> train, std::span<const Sentence> valid,
                      std::size_t vocab_size);

// ---------------------------------------------------------------------------
// Baselines

struct FullPrecisionResult {
  LstmLmParams best;
  std::size_t best_epoch = 0;  // 1-based, 0 when no epoch improved on the start
  Curve curve;
};

FullPrecisionResult train_full_precision(const TrainConfig& config, std::span<const Sentence> train,
                                         std::span<const Sentence> valid, std::size_t vocab_size);

/// Binarized LM: forward passes use scale * sign(w) / sqrt(hidden); gradients
/// update full-precision shadow weights kept in [-1, 1].
struct BinarizedModel {
  LstmLmParams shadow;
  std::array<double, kBlockCount> scale{1, 1, 1, 1, 1, 1};
  bool with_linear = false;  // full-precision bias columns and trainable per-matrix scales

  LstmLmParams effective() const;
};

struct BinarizedResult {
  BinarizedModel best;
  std::size_t best_epoch = 0;
  Curve curve;
};

BinarizedResult train_binarized(const TrainConfig& config, std::span<const Sentence> train,
                                std::span<const Sentence> valid, std::size_t vocab_size, bool with_linear);

}  // namespace qlstm
