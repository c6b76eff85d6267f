#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "qlstm/corpus.hpp"
#include "qlstm/numerics.hpp"

namespace qlstm {

struct ModelDims {
  std::size_t vocab = 0;   // N
  std::size_t embed = 0;   // M
  std::size_t hidden = 0;  // D

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// M·N + 4·D·(M+D+1) + N·(D+1).
std::size_t parameter_count(const ModelDims& dims);

inline constexpr std::size_t kBlockCount = 6;
inline constexpr std::array<std::string_view, kBlockCount> kBlockNames = {
    "embedding", "forget_gate", "input_gate", "cell_gate", "output_gate", "output_layer"};

/// Every block except the embedding carries a trailing bias column.
constexpr bool block_has_bias(std::size_t block) { return block != 0; }

/// Single-layer LSTM LM weights. Also used for gradients and multipliers,
/// which share the shape set.
struct LstmLmParams {
  ModelDims dims;
  Matrix embedding;     // M x N, column j is the vector of word j
  Matrix forget_gate;   // D x (M+D+1), input layout [x, h, 1]
  Matrix input_gate;    // D x (M+D+1)
  Matrix cell_gate;     // D x (M+D+1)
  Matrix output_gate;   // D x (M+D+1)
  Matrix output_layer;  // N x (D+1), input layout [h, 1]

  static LstmLmParams zeros(const ModelDims& dims);
  /// uniform(-scale, scale) weights, zero bias columns.
  static LstmLmParams random(const ModelDims& dims, SeededRng& rng, double scale = 0.1);

  std::array<Matrix*, kBlockCount> blocks();
  std::array<const Matrix*, kBlockCount> blocks() const;

  std::size_t parameter_count() const { return qlstm::parameter_count(dims); }
  bool same_shape(const LstmLmParams& other) const;
  bool all_finite() const;

  void set_zero();
  void scale(double a);
  /// this += a * x
  void axpy(double a, const LstmLmParams& x);
  double dot(const LstmLmParams& other) const;
  double squared_norm() const { return dot(*this); }

  /// Block-major, row-major concatenation of all parameters.
  std::vector<double> flatten() const;
  static LstmLmParams unflatten(const ModelDims& dims, std::span<const double> flat);

  friend bool operator==(const LstmLmParams&, const LstmLmParams&) = default;
};

using Gradients = LstmLmParams;

/// Column word_id of the embedding matrix.
Vector embed(TokenId word_id, const LstmLmParams& params);

struct LstmStep {
  Vector hidden;
  Vector cell;
  Vector forget;
  Vector input;
  Vector candidate;
  Vector output;
};

/// One gated recurrence step from (x_{t-1}, h_{t-1}, c_{t-1}).
LstmStep lstm_step(std::span<const double> x_prev, std::span<const double> h_prev, std::span<const double> c_prev,
                   const LstmLmParams& params);

struct StepRecord {
  TokenId input_token = 0;  // word whose embedding fed this step
  Vector x;                 // x_{t-1}
  Vector h_prev;
  Vector c_prev;
  Vector forget;
  Vector input;
  Vector candidate;
  Vector output;
  Vector cell;
  Vector cell_tanh;
  Vector hidden;
  Vector logits;
};

struct LstmStateCache {
  Sentence sentence;
  std::vector<StepRecord> steps;
};

struct ForwardResult {
  double total_nll = 0.0;
  LstmStateCache cache;
};

/// Predicts every token of the sentence, starting from h = c = 0 with the
/// </s> embedding as the first input.
ForwardResult forward_sentence(std::span<const TokenId> sentence, const LstmLmParams& params);

/// Same loss as forward_sentence without keeping intermediates.
double sentence_nll(std::span<const TokenId> sentence, const LstmLmParams& params);

/// d(total_nll)/d(params) by backpropagation through the whole sentence.
Gradients backward_bptt(const LstmStateCache& cache, std::span<const TokenId> sentence,
                        const LstmLmParams& params);

/// grads += weight * d(total_nll)/d(params).
void backward_bptt_into(const LstmStateCache& cache, std::span<const TokenId> sentence,
                        const LstmLmParams& params, double weight, Gradients& grads);

struct LossStats {
  double nll = 0.0;
  std::size_t tokens = 0;
  std::size_t sentences = 0;
};

/// Adds the gradient of the mean per-sentence NLL of the batch to grads.
LossStats accumulate_batch_gradient(const LstmLmParams& params, const Batch& batch, Gradients& grads);

/// Mean per-sentence NLL of a batch (the loss whose gradient the above accumulates).
double batch_loss(const LstmLmParams& params, const Batch& batch);

/// Rescales grads so that its global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(Gradients& grads, double max_norm);

// Full-precision checkpoint: "QLSTMFP1", u32 version, u32 N, u32 M, u32 D,
// then the six blocks in kBlockNames order, row-major little-endian f64.
void write_params(std::ostream& os, const LstmLmParams& params);
LstmLmParams read_params(std::istream& is);
void save_params(const std::filesystem::path& path, const LstmLmParams& params);
LstmLmParams load_params(const std::filesystem::path& path);

}  // namespace qlstm
