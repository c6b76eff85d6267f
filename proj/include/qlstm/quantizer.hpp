#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qlstm/lstm_lm.hpp"

namespace qlstm {

/// Sorted set of signed integer base codes; a cluster's representable values
/// are alpha * code. Codes are restricted to 0 and ±2^k (k <= 30).
class QuantTable {
 public:
  /// Throws std::invalid_argument for empty, duplicate, all-zero or non power-of-two codes.
  explicit QuantTable(std::vector<std::int32_t> codes);

  /// "pm1", "z-pm1", "pm1-2", "pm1-2-4", or a comma list such as "-2,-1,1,2".
  static QuantTable parse(std::string_view spec);

  std::span<const std::int32_t> codes() const { return codes_; }
  std::size_t size() const { return codes_.size(); }
  /// ceil(log2(size())); zero for a single-code table.
  unsigned bits() const { return bits_; }
  bool sign_symmetric() const;
  bool contains(std::int32_t code) const;
  /// Position of code in codes(); throws std::invalid_argument when absent.
  std::size_t index_of(std::int32_t code) const;
  /// Set notation, e.g. "{-2,-1,+1,+2}".
  std::string label() const;
  /// Named form when one exists, else the comma list accepted by parse().
  std::string spec() const;

  friend bool operator==(const QuantTable&, const QuantTable&) = default;

 private:
  std::vector<std::int32_t> codes_;
  unsigned bits_ = 0;
};

enum class TyingScope : std::uint32_t { Global = 0, PerLayer = 1, PerNode = 2, PerParameter = 3 };

/// Accepts global, layer, node, none/param/notie.
TyingScope parse_tying(std::string_view name);
std::string_view tying_name(TyingScope scope);

enum class BiasPolicy : std::uint32_t {
  Quantized = 0,      // bias columns share their matrix's clusters
  FullPrecision = 1,  // bias columns excluded and kept as 32-bit reals
};

/// Assignment of every parameter (flat index, see LstmLmParams::flatten) to a
/// quantization cluster. Layer: one cluster per matrix. Node: one per matrix
/// row, except the embedding where each word (column) is a node.
class ClusterLayout {
 public:
  static constexpr std::size_t kExcluded = static_cast<std::size_t>(-1);

  ClusterLayout(const ModelDims& dims, TyingScope scope, BiasPolicy bias = BiasPolicy::Quantized);

  const ModelDims& dims() const { return dims_; }
  TyingScope scope() const { return scope_; }
  BiasPolicy bias_policy() const { return bias_; }

  std::size_t parameter_count() const { return parameter_count_; }
  std::size_t excluded_count() const { return excluded_count_; }
  std::size_t quantized_count() const { return parameter_count_ - excluded_count_; }
  std::size_t cluster_count() const { return cluster_count_; }

  /// Cluster id, or kExcluded for a full-precision parameter.
  std::size_t cluster_of(std::size_t flat_index) const;
  /// Flat indices of each cluster, ascending.
  std::vector<std::vector<std::size_t>> members() const;

  friend bool operator==(const ClusterLayout& a, const ClusterLayout& b) {
    return a.dims_ == b.dims_ && a.scope_ == b.scope_ && a.bias_ == b.bias_;
  }

 private:
  struct BlockInfo {
    std::size_t offset = 0;  // first flat index
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool excludes_last_column = false;
    std::size_t cluster_base = 0;
    std::size_t quantized_base = 0;  // quantized ordinal of the first entry
  };

  ModelDims dims_;
  TyingScope scope_;
  BiasPolicy bias_;
  std::array<BlockInfo, kBlockCount> blocks_{};
  std::size_t parameter_count_ = 0;
  std::size_t excluded_count_ = 0;
  std::size_t cluster_count_ = 0;
};

/// Code q in table minimizing |value - alpha*q|. Ties go to the smaller |q|,
/// then to the negative code. Throws std::invalid_argument when alpha <= 0.
std::int32_t project_scalar(double value, const QuantTable& table, double alpha);

std::vector<std::int32_t> project_codes(std::span<const double> values, const QuantTable& table, double alpha);

/// Least-squares scale (v·V)/(V·V). Throws std::domain_error("all-zero codes") when V·V = 0.
double fit_alpha(std::span<const double> values, std::span<const std::int32_t> codes);

/// ||v - alpha*V||².
double cluster_objective(std::span<const double> values, double alpha, std::span<const std::int32_t> codes);

struct ClusterFit {
  double alpha = 1.0;
  std::vector<std::int32_t> codes;
  /// Objective after the initial projection and after every completed round.
  std::vector<double> objective_trace;
};

inline constexpr std::size_t kMaxFitRounds = 100;
inline constexpr double kAlphaTolerance = 1e-10;

/// Alternates code projection and the closed-form alpha update until the
/// codes stop changing, alpha moves less than kAlphaTolerance, or
/// kMaxFitRounds rounds. If every value of a non-zero cluster projects to
/// code 0, alpha restarts at max|v| / max|q|. A non-positive or undefined
/// alpha update stops the alternation with the current alpha. Single-code tables are fitted in one
/// step and may yield any alpha, including non-positive ones.
ClusterFit fit_cluster(std::span<const double> values, const QuantTable& table, double alpha_init);

/// Per-cluster scales and per-parameter codes of a quantized model.
struct QuantState {
  ClusterLayout layout;
  QuantTable table;
  std::vector<double> alpha;                   // one per cluster
  std::vector<std::int32_t> codes;             // one per parameter, 0 where excluded
  std::vector<double> full_precision_values;   // excluded parameters in flat order

  /// alpha = 1 everywhere, codes from projecting zeros, excluded values zero.
  static QuantState initial(const ClusterLayout& layout, const QuantTable& table);

  std::vector<double> dequantize_flat() const;
  LstmLmParams dequantize() const;
  /// Codes of the quantized (non-excluded) parameters, in flat order.
  std::vector<std::int32_t> quantized_codes() const;

  friend bool operator==(const QuantState&, const QuantState&) = default;
};

/// Fits every cluster to theta + lambda, warm-starting alpha from prev.
/// Excluded parameters take theta's values.
QuantState quantize_model(const LstmLmParams& theta, const LstmLmParams& lambda, const QuantState& prev);

/// Table index of each code in table.bits() bits, LSB-first within bytes.
std::vector<std::uint8_t> pack_codes(std::span<const std::int32_t> codes, const QuantTable& table);
std::vector<std::int32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                       const QuantTable& table);

// Quantized checkpoint, little-endian:
//   "QLSTMQT1" u32 version u32 N u32 M u32 D u32 scope u32 bias_policy
//   u32 table_size i32 codes[table_size] u32 bits
//   u64 clusters f32 decode_table[clusters][table_size]   (alpha * code)
//   u64 code_count u64 packed_bytes u8 packed[packed_bytes]
//   u64 excluded_count f32 excluded[excluded_count]
void write_quant_state(std::ostream& os, const QuantState& state);
QuantState read_quant_state(std::istream& is);
void save_quant_state(const std::filesystem::path& path, const QuantState& state);
QuantState load_quant_state(const std::filesystem::path& path);

}  // namespace qlstm
