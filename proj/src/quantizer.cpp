#include "qlstm/quantizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>

#include "binary_io.hpp"

namespace qlstm {

namespace {

constexpr std::string_view kQuantMagic = "QLSTMQT1";
constexpr std::uint32_t kQuantVersion = 1;

struct NamedTable {
  std::string_view name;
  std::vector<std::int32_t> codes;
};

const std::vector<NamedTable>& named_tables() {
  static const std::vector<NamedTable> tables = {
      {"pm1", {-1, 1}},
      {"z-pm1", {-1, 0, 1}},
      {"pm1-2", {-2, -1, 1, 2}},
      {"pm1-2-4", {-4, -2, -1, 1, 2, 4}},
  };
  return tables;
}

bool valid_code(std::int32_t q) {
  if (q == 0) return true;
  const std::uint32_t mag = static_cast<std::uint32_t>(std::abs(static_cast<std::int64_t>(q)));
  return mag <= (1u << 30) && std::has_single_bit(mag);
}

std::int64_t parse_int(std::string_view s) {
  std::string buf(s);
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(buf.c_str(), &end, 10);
  if (buf.empty() || end != buf.c_str() + buf.size() || errno != 0) {
    throw std::invalid_argument("bad quantization code '" + buf + "'");
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// QuantTable

QuantTable::QuantTable(std::vector<std::int32_t> codes) : codes_(std::move(codes)) {
  if (codes_.empty()) throw std::invalid_argument("quantization table is empty");
  std::sort(codes_.begin(), codes_.end());
  if (std::adjacent_find(codes_.begin(), codes_.end()) != codes_.end()) {
    throw std::invalid_argument("quantization table has duplicate codes");
  }
  for (std::int32_t q : codes_) {
    if (!valid_code(q)) {
      throw std::invalid_argument("quantization code " + std::to_string(q) + " is not 0 or a signed power of two");
    }
  }
  if (codes_.size() == 1 && codes_[0] == 0) throw std::invalid_argument("quantization table {0} has no scale");
  bits_ = codes_.size() <= 1 ? 0u : static_cast<unsigned>(std::bit_width(codes_.size() - 1));
}

QuantTable QuantTable::parse(std::string_view spec) {
  for (const NamedTable& t : named_tables()) {
    if (spec == t.name) return QuantTable(t.codes);
  }
  std::vector<std::int32_t> codes;
  std::size_t start = 0;
  while (start <= spec.size()) {
    std::size_t end = spec.find(',', start);
    if (end == std::string_view::npos) end = spec.size();
    std::string_view item = spec.substr(start, end - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty() && item.front() == '+') item.remove_prefix(1);
    const std::int64_t v = parse_int(item);
    if (v < INT32_MIN || v > INT32_MAX) throw std::invalid_argument("quantization code out of range");
    codes.push_back(static_cast<std::int32_t>(v));
    start = end + 1;
  }
  return QuantTable(std::move(codes));
}

bool QuantTable::sign_symmetric() const {
  for (std::int32_t q : codes_) {
    if (!contains(-q)) return false;
  }
  return true;
}

bool QuantTable::contains(std::int32_t code) const { return std::binary_search(codes_.begin(), codes_.end(), code); }

std::size_t QuantTable::index_of(std::int32_t code) const {
  auto it = std::lower_bound(codes_.begin(), codes_.end(), code);
  if (it == codes_.end() || *it != code) {
    throw std::invalid_argument("code " + std::to_string(code) + " is not in table " + label());
  }
  return static_cast<std::size_t>(it - codes_.begin());
}

std::string QuantTable::label() const {
  std::string out = "{";
  for (std::size_t i = 0; i < codes_.size(); ++i) {
    if (i) out += ',';
    if (codes_[i] > 0 && codes_.size() > 1) out += '+';
    out += std::to_string(codes_[i]);
  }
  return out + "}";
}

std::string QuantTable::spec() const {
  for (const NamedTable& t : named_tables()) {
    if (t.codes == codes_) return std::string(t.name);
  }
  std::string out;
  for (std::size_t i = 0; i < codes_.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(codes_[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tying

TyingScope parse_tying(std::string_view name) {
  if (name == "global") return TyingScope::Global;
  if (name == "layer") return TyingScope::PerLayer;
  if (name == "node") return TyingScope::PerNode;
  if (name == "none" || name == "notie" || name == "param") return TyingScope::PerParameter;
  throw std::invalid_argument("unknown tying scope '" + std::string(name) + "'");
}

std::string_view tying_name(TyingScope scope) {
  switch (scope) {
    case TyingScope::Global: return "global";
    case TyingScope::PerLayer: return "layer";
    case TyingScope::PerNode: return "node";
    case TyingScope::PerParameter: return "none";
  }
  return "?";
}

ClusterLayout::ClusterLayout(const ModelDims& dims, TyingScope scope, BiasPolicy bias)
    : dims_(dims), scope_(scope), bias_(bias) {
  if (dims.vocab == 0 || dims.embed == 0 || dims.hidden == 0) {
    throw std::invalid_argument("cluster layout needs non-zero model dimensions");
  }
  const std::size_t gate_cols = dims.embed + dims.hidden + 1;
  const std::array<std::pair<std::size_t, std::size_t>, kBlockCount> shapes = {{
      {dims.embed, dims.vocab},
      {dims.hidden, gate_cols},
      {dims.hidden, gate_cols},
      {dims.hidden, gate_cols},
      {dims.hidden, gate_cols},
      {dims.vocab, dims.hidden + 1},
  }};
  std::size_t offset = 0;
  std::size_t clusters = 0;
  std::size_t quantized = 0;
  for (std::size_t b = 0; b < kBlockCount; ++b) {
    BlockInfo& info = blocks_[b];
    info.offset = offset;
    info.rows = shapes[b].first;
    info.cols = shapes[b].second;
    info.excludes_last_column = block_has_bias(b) && bias == BiasPolicy::FullPrecision;
    info.cluster_base = clusters;
    info.quantized_base = quantized;
    const std::size_t qcols = info.cols - (info.excludes_last_column ? 1 : 0);
    const std::size_t block_quantized = info.rows * qcols;
    switch (scope) {
      case TyingScope::Global: clusters = 1; break;
      case TyingScope::PerLayer: clusters += 1; break;
      case TyingScope::PerNode: clusters += (b == 0 ? info.cols : info.rows); break;
      case TyingScope::PerParameter: clusters += block_quantized; break;
    }
    offset += info.rows * info.cols;
    quantized += block_quantized;
  }
  parameter_count_ = offset;
  excluded_count_ = offset - quantized;
  cluster_count_ = clusters;
}

std::size_t ClusterLayout::cluster_of(std::size_t flat_index) const {
  if (flat_index >= parameter_count_) throw std::out_of_range("parameter index out of range");
  std::size_t b = kBlockCount - 1;
  while (blocks_[b].offset > flat_index) --b;
  const BlockInfo& info = blocks_[b];
  const std::size_t local = flat_index - info.offset;
  const std::size_t r = local / info.cols;
  const std::size_t c = local % info.cols;
  if (info.excludes_last_column && c + 1 == info.cols) return kExcluded;
  switch (scope_) {
    case TyingScope::Global: return 0;
    case TyingScope::PerLayer: return info.cluster_base;
    case TyingScope::PerNode: return info.cluster_base + (b == 0 ? c : r);
    case TyingScope::PerParameter: {
      const std::size_t qcols = info.cols - (info.excludes_last_column ? 1 : 0);
      return info.cluster_base + r * qcols + c;
    }
  }
  return kExcluded;
}

std::vector<std::vector<std::size_t>> ClusterLayout::members() const {
  std::vector<std::vector<std::size_t>> out(cluster_count_);
  for (std::size_t i = 0; i < parameter_count_; ++i) {
    const std::size_t c = cluster_of(i);
    if (c != kExcluded) out[c].push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projection and fitting

std::int32_t project_scalar(double value, const QuantTable& table, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("project_scalar: alpha must be positive");
  std::int32_t best = table.codes().front();
  double best_dist = std::abs(value - alpha * best);
  for (std::int32_t q : table.codes().subspan(1)) {
    const double dist = std::abs(value - alpha * q);
    if (dist < best_dist) {
      best = q;
      best_dist = dist;
    } else if (dist == best_dist) {
      // Codes ascend, so an equal-|q| rival is positive and loses to best.
      if (std::abs(q) < std::abs(best)) best = q;
    }
  }
  return best;
}

std::vector<std::int32_t> project_codes(std::span<const double> values, const QuantTable& table, double alpha) {
  std::vector<std::int32_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = project_scalar(values[i], table, alpha);
  return out;
}

double fit_alpha(std::span<const double> values, std::span<const std::int32_t> codes) {
  if (values.size() != codes.size()) throw std::invalid_argument("fit_alpha: length mismatch");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double q = codes[i];
    num += values[i] * q;
    den += q * q;
  }
  if (den == 0.0) throw std::domain_error("all-zero codes");
  return num / den;
}

double cluster_objective(std::span<const double> values, double alpha, std::span<const std::int32_t> codes) {
  if (values.size() != codes.size()) throw std::invalid_argument("cluster_objective: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double r = values[i] - alpha * codes[i];
    acc += r * r;
  }
  return acc;
}

ClusterFit fit_cluster(std::span<const double> values, const QuantTable& table, double alpha_init) {
  ClusterFit fit;
  fit.alpha = alpha_init;
  if (table.size() == 1) {
    fit.codes.assign(values.size(), table.codes().front());
    fit.objective_trace.push_back(cluster_objective(values, fit.alpha, fit.codes));
    if (!values.empty()) {
      fit.alpha = fit_alpha(values, fit.codes);
      fit.objective_trace.push_back(cluster_objective(values, fit.alpha, fit.codes));
    }
    return fit;
  }

  if (!(alpha_init > 0.0) || !std::isfinite(alpha_init)) {
    throw std::invalid_argument("fit_cluster: initial alpha must be positive and finite");
  }
  fit.codes = project_codes(values, table, fit.alpha);
  fit.objective_trace.push_back(cluster_objective(values, fit.alpha, fit.codes));
  if (std::all_of(fit.codes.begin(), fit.codes.end(), [](std::int32_t c) { return c == 0; })) {
    // Every value rounded to zero, so the alpha update is undefined. Restart
    // from the scale that maps the largest value onto the largest code.
    double vmax = 0.0;
    for (double v : values) vmax = std::max(vmax, std::abs(v));
    std::int32_t qmax = 0;
    for (std::int32_t q : table.codes()) qmax = std::max(qmax, q < 0 ? -q : q);
    if (vmax > 0.0 && std::isfinite(vmax)) {
      fit.alpha = vmax / qmax;
      fit.codes = project_codes(values, table, fit.alpha);
      fit.objective_trace.push_back(cluster_objective(values, fit.alpha, fit.codes));
    }
  }
  for (std::size_t round = 0; round < kMaxFitRounds; ++round) {
    double next = 0.0;
    try {
      next = fit_alpha(values, fit.codes);
    } catch (const std::domain_error&) {
      break;
    }
    if (!(next > 0.0) || !std::isfinite(next)) break;
    std::vector<std::int32_t> next_codes = project_codes(values, table, next);
    const bool codes_stable = next_codes == fit.codes;
    const double step = std::abs(next - fit.alpha);
    fit.alpha = next;
    fit.codes = std::move(next_codes);
    fit.objective_trace.push_back(cluster_objective(values, fit.alpha, fit.codes));
    if (codes_stable || step < kAlphaTolerance) break;
  }
  return fit;
}

// ---------------------------------------------------------------------------
// QuantState

QuantState QuantState::initial(const ClusterLayout& layout, const QuantTable& table) {
  QuantState s{layout, table, {}, {}, {}};
  s.alpha.assign(layout.cluster_count(), 1.0);
  const std::int32_t zero_code = table.size() == 1 ? table.codes().front() : project_scalar(0.0, table, 1.0);
  s.codes.assign(layout.parameter_count(), zero_code);
  for (std::size_t i = 0; i < layout.parameter_count(); ++i) {
    if (layout.cluster_of(i) == ClusterLayout::kExcluded) s.codes[i] = 0;
  }
  s.full_precision_values.assign(layout.excluded_count(), 0.0);
  return s;
}

std::vector<double> QuantState::dequantize_flat() const {
  std::vector<double> out(layout.parameter_count());
  std::size_t next_excluded = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = layout.cluster_of(i);
    out[i] = c == ClusterLayout::kExcluded ? full_precision_values.at(next_excluded++) : alpha[c] * codes[i];
  }
  return out;
}

LstmLmParams QuantState::dequantize() const { return LstmLmParams::unflatten(layout.dims(), dequantize_flat()); }

std::vector<std::int32_t> QuantState::quantized_codes() const {
  std::vector<std::int32_t> out;
  out.reserve(layout.quantized_count());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (layout.cluster_of(i) != ClusterLayout::kExcluded) out.push_back(codes[i]);
  }
  return out;
}

QuantState quantize_model(const LstmLmParams& theta, const LstmLmParams& lambda, const QuantState& prev) {
  if (!theta.same_shape(lambda)) throw std::invalid_argument("quantize_model: theta/lambda shape mismatch");
  if (theta.dims != prev.layout.dims()) throw std::invalid_argument("quantize_model: model does not match layout");

  const std::vector<double> weights = theta.flatten();
  std::vector<double> target = weights;
  {
    const std::vector<double> mult = lambda.flatten();
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += mult[i];
  }

  QuantState next{prev.layout, prev.table, prev.alpha, std::vector<std::int32_t>(target.size(), 0), {}};
  const auto members = prev.layout.members();
  std::vector<double> values;
  for (std::size_t c = 0; c < members.size(); ++c) {
    values.clear();
    for (std::size_t i : members[c]) values.push_back(target[i]);
    ClusterFit fit = fit_cluster(values, prev.table, prev.alpha[c]);
    next.alpha[c] = fit.alpha;
    for (std::size_t k = 0; k < members[c].size(); ++k) next.codes[members[c][k]] = fit.codes[k];
  }
  next.full_precision_values.reserve(prev.layout.excluded_count());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (prev.layout.cluster_of(i) == ClusterLayout::kExcluded) next.full_precision_values.push_back(weights[i]);
  }
  return next;
}

// ---------------------------------------------------------------------------
// Bit packing

std::vector<std::uint8_t> pack_codes(std::span<const std::int32_t> codes, const QuantTable& table) {
  const unsigned bits = table.bits();
  std::vector<std::uint8_t> out((codes.size() * bits + 7) / 8, 0);
  std::size_t bit_pos = 0;
  for (std::int32_t q : codes) {
    const std::size_t index = table.index_of(q);
    for (unsigned b = 0; b < bits; ++b, ++bit_pos) {
      if ((index >> b) & 1u) out[bit_pos / 8] |= static_cast<std::uint8_t>(1u << (bit_pos % 8));
    }
  }
  return out;
}

std::vector<std::int32_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count,
                                       const QuantTable& table) {
  const unsigned bits = table.bits();
  const std::size_t used_bits = count * bits;
  if (packed.size() != (used_bits + 7) / 8) {
    throw std::invalid_argument("packed code blob has " + std::to_string(packed.size()) + " bytes, expected " +
                                std::to_string((used_bits + 7) / 8));
  }
  for (std::size_t bit = used_bits; bit < packed.size() * 8; ++bit) {
    if ((packed[bit / 8] >> (bit % 8)) & 1u) throw std::invalid_argument("packed code blob has non-zero padding");
  }
  std::vector<std::int32_t> out(count);
  std::size_t bit_pos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t index = 0;
    for (unsigned b = 0; b < bits; ++b, ++bit_pos) {
      index |= static_cast<std::size_t>((packed[bit_pos / 8] >> (bit_pos % 8)) & 1u) << b;
    }
    if (index >= table.size()) throw std::invalid_argument("packed code index out of table range");
    out[i] = table.codes()[index];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint

void write_quant_state(std::ostream& os, const QuantState& s) {
  const ClusterLayout& layout = s.layout;
  if (s.alpha.size() != layout.cluster_count() || s.codes.size() != layout.parameter_count() ||
      s.full_precision_values.size() != layout.excluded_count()) {
    throw std::invalid_argument("quantized state is inconsistent with its layout");
  }
  detail::write_magic(os, kQuantMagic);
  detail::write_u32(os, kQuantVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(layout.dims().vocab));
  detail::write_u32(os, static_cast<std::uint32_t>(layout.dims().embed));
  detail::write_u32(os, static_cast<std::uint32_t>(layout.dims().hidden));
  detail::write_u32(os, static_cast<std::uint32_t>(layout.scope()));
  detail::write_u32(os, static_cast<std::uint32_t>(layout.bias_policy()));
  detail::write_u32(os, static_cast<std::uint32_t>(s.table.size()));
  for (std::int32_t q : s.table.codes()) detail::write_i32(os, q);
  detail::write_u32(os, s.table.bits());

  detail::write_u64(os, s.alpha.size());
  for (double a : s.alpha) {
    for (std::int32_t q : s.table.codes()) detail::write_f32(os, static_cast<float>(a * q));
  }

  const std::vector<std::uint8_t> packed = pack_codes(s.quantized_codes(), s.table);
  detail::write_u64(os, layout.quantized_count());
  detail::write_u64(os, packed.size());
  os.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));

  detail::write_u64(os, s.full_precision_values.size());
  for (double v : s.full_precision_values) detail::write_f32(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("failed writing quantized checkpoint");
}

QuantState read_quant_state(std::istream& is) {
  detail::expect_magic(is, kQuantMagic, "quantized");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kQuantVersion) throw std::runtime_error("unsupported quantized checkpoint version");
  ModelDims dims;
  dims.vocab = detail::read_u32(is);
  dims.embed = detail::read_u32(is);
  dims.hidden = detail::read_u32(is);
  const std::uint32_t scope = detail::read_u32(is);
  const std::uint32_t bias = detail::read_u32(is);
  if (scope > 3 || bias > 1) throw std::runtime_error("quantized checkpoint has an unknown tying or bias policy");
  const std::uint32_t table_size = detail::read_u32(is);
  if (table_size == 0 || table_size > 64) throw std::runtime_error("quantized checkpoint has a bad table size");
  std::vector<std::int32_t> codes(table_size);
  for (auto& q : codes) q = detail::read_i32(is);
  QuantTable table(codes);
  if (table.codes().size() != codes.size() || !std::equal(codes.begin(), codes.end(), table.codes().begin())) {
    throw std::runtime_error("quantized checkpoint table is not sorted");
  }
  if (detail::read_u32(is) != table.bits()) throw std::runtime_error("quantized checkpoint bit width mismatch");

  ClusterLayout layout(dims, static_cast<TyingScope>(scope), static_cast<BiasPolicy>(bias));
  QuantState s = QuantState::initial(layout, table);

  if (detail::read_u64(is) != layout.cluster_count()) throw std::runtime_error("quantized checkpoint cluster count mismatch");
  // The largest-magnitude code recovers alpha exactly (codes are powers of two).
  std::size_t pivot = 0;
  for (std::size_t j = 1; j < table.size(); ++j) {
    if (std::abs(table.codes()[j]) >= std::abs(table.codes()[pivot])) pivot = j;
  }
  std::vector<float> entries(table.size());
  for (double& a : s.alpha) {
    for (float& e : entries) e = detail::read_f32(is);
    a = static_cast<double>(entries[pivot]) / table.codes()[pivot];
    for (std::size_t j = 0; j < table.size(); ++j) {
      if (static_cast<float>(a * table.codes()[j]) != entries[j]) {
        throw std::runtime_error("quantized checkpoint decode table is not a scaled copy of the base codes");
      }
    }
  }

  const std::uint64_t code_count = detail::read_u64(is);
  if (code_count != layout.quantized_count()) throw std::runtime_error("quantized checkpoint code count mismatch");
  const std::uint64_t packed_bytes = detail::read_u64(is);
  if (packed_bytes != (code_count * table.bits() + 7) / 8) throw std::runtime_error("quantized checkpoint blob size mismatch");
  std::vector<std::uint8_t> packed(packed_bytes);
  detail::read_exact(is, reinterpret_cast<char*>(packed.data()), packed.size());
  const std::vector<std::int32_t> qcodes = unpack_codes(packed, code_count, table);
  std::size_t k = 0;
  for (std::size_t i = 0; i < s.codes.size(); ++i) {
    if (layout.cluster_of(i) != ClusterLayout::kExcluded) s.codes[i] = qcodes[k++];
  }

  if (detail::read_u64(is) != layout.excluded_count()) throw std::runtime_error("quantized checkpoint excluded count mismatch");
  for (double& v : s.full_precision_values) v = detail::read_f32(is);
  return s;
}

void save_quant_state(const std::filesystem::path& path, const QuantState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_quant_state(os, state);
}

QuantState load_quant_state(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file " + path.string());
  QuantState s = read_quant_state(is);
  detail::expect_end(is);
  return s;
}

}  // namespace qlstm
