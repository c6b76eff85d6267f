#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qlstm/corpus.hpp"
#include "qlstm/lstm_lm.hpp"
#include "qlstm/quantizer.hpp"

namespace qlstm {

/// exp(total NLL / token count); </s> counts as a token.
double perplexity(const LstmLmParams& params, std::span<const Sentence> sentences);
double perplexity(const QuantState& state, std::span<const Sentence> sentences);

/// Storage accounting. Sizes are in MiB (2^20 bytes); the full-precision
/// reference stores every parameter as a 32-bit float.
///
/// A quantized model costs, per cluster, its decode table (one 32-bit entry
/// per table code), table.bits() per quantized parameter, and 32 bits per
/// excluded parameter. Header bytes are not counted.
struct SizeReport {
  std::size_t parameter_count = 0;
  std::size_t cluster_count = 0;
  std::uint64_t full_bits = 0;
  std::uint64_t quant_bits = 0;
  double compression_ratio = 1.0;
  double size_mib = 0.0;
  double full_size_mib = 0.0;
};

double bits_to_mib(std::uint64_t bits);

SizeReport size_report(const ModelDims& dims, TyingScope scope, const QuantTable& table,
                       BiasPolicy bias = BiasPolicy::Quantized);
SizeReport full_precision_size(const ModelDims& dims);
/// One bit per binarized weight; Bin+Lin adds 32-bit bias columns and a 32-bit scale per matrix.
SizeReport binarized_size(const ModelDims& dims, bool with_linear);

struct SummaryRow {
  std::string mode;
  std::string tying;
  std::string table;
  double size_mib = 0.0;
  double ratio = 1.0;
  std::optional<double> valid_ppl;
  std::optional<double> test_ppl;
};

/// Aligned text table: mode, tying, table, size_MiB, ratio, valid_ppl, test_ppl.
std::string format_summary(std::span<const SummaryRow> rows);

}  // namespace qlstm
