#include "qlstm/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace qlstm {

namespace {

std::size_t bias_entry_count(const ModelDims& d) { return 4 * d.hidden + d.vocab; }

SizeReport finish(const ModelDims& dims, std::size_t clusters, std::uint64_t quant_bits) {
  SizeReport r;
  r.parameter_count = parameter_count(dims);
  r.cluster_count = clusters;
  r.full_bits = 32ull * r.parameter_count;
  r.quant_bits = quant_bits;
  r.compression_ratio = static_cast<double>(r.full_bits) / static_cast<double>(quant_bits);
  r.size_mib = bits_to_mib(quant_bits);
  r.full_size_mib = bits_to_mib(r.full_bits);
  return r;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace

double perplexity(const LstmLmParams& params, std::span<const Sentence> sentences) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const Sentence& s : sentences) {
    nll += sentence_nll(s, params);
    tokens += s.size();
  }
  if (tokens == 0) throw std::invalid_argument("perplexity: empty corpus");
  return std::exp(nll / static_cast<double>(tokens));
}

double perplexity(const QuantState& state, std::span<const Sentence> sentences) {
  return perplexity(state.dequantize(), sentences);
}

double bits_to_mib(std::uint64_t bits) { return static_cast<double>(bits) / 8.0 / 1048576.0; }

SizeReport size_report(const ModelDims& dims, TyingScope scope, const QuantTable& table, BiasPolicy bias) {
  const ClusterLayout layout(dims, scope, bias);
  const std::uint64_t bits = 32ull * layout.cluster_count() * table.size() +
                             static_cast<std::uint64_t>(table.bits()) * layout.quantized_count() +
                             32ull * layout.excluded_count();
  return finish(dims, layout.cluster_count(), bits);
}

SizeReport full_precision_size(const ModelDims& dims) { return finish(dims, 0, 32ull * parameter_count(dims)); }

SizeReport binarized_size(const ModelDims& dims, bool with_linear) {
  const std::uint64_t params = parameter_count(dims);
  if (!with_linear) return finish(dims, 0, params);
  const std::uint64_t biases = bias_entry_count(dims);
  return finish(dims, kBlockCount, (params - biases) + 32ull * biases + 32ull * kBlockCount);
}

std::string format_summary(std::span<const SummaryRow> rows) {
  const std::vector<std::string> header = {"mode", "tying", "table", "size_MiB", "ratio", "valid_ppl", "test_ppl"};
  std::vector<std::vector<std::string>> cells;
  cells.push_back(header);
  for (const SummaryRow& r : rows) {
    cells.push_back({r.mode, r.tying, r.table, fixed(r.size_mib, 2), fixed(r.ratio, 1),
                     r.valid_ppl ? fixed(*r.valid_ppl, 2) : "-", r.test_ppl ? fixed(*r.test_ppl, 2) : "-"});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      const std::size_t pad = width[c] - row[c].size();
      // Text columns left-aligned, numbers right-aligned.
      if (c < 3) {
        out += row[c] + std::string(pad, ' ');
      } else {
        out += std::string(pad, ' ') + row[c];
      }
      out += c + 1 < row.size() ? "  " : "\n";
    }
  }
  return out;
}

}  // namespace qlstm
