#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "qlstm/quantizer.hpp"

using namespace qlstm;

TEST(QuantTableTest, NamedTables) {
  EXPECT_EQ(QuantTable::parse("pm1").codes().size(), 2u);
  EXPECT_EQ(QuantTable::parse("pm1").bits(), 1u);
  EXPECT_EQ(QuantTable::parse("z-pm1").bits(), 2u);
  EXPECT_EQ(QuantTable::parse("pm1-2").bits(), 2u);
  EXPECT_EQ(QuantTable::parse("pm1-2-4").bits(), 3u);
  EXPECT_EQ(QuantTable::parse("pm1-2-4"), QuantTable({4, 2, 1, -1, -2, -4}));
  EXPECT_EQ(QuantTable::parse("-2,+1,-1,2"), QuantTable::parse("pm1-2"));
  EXPECT_EQ(QuantTable::parse("1").bits(), 0u);
  EXPECT_EQ(QuantTable::parse("z-pm1").label(), "{-1,0,+1}");
  EXPECT_EQ(QuantTable::parse("-1,0,1").spec(), "z-pm1");
}

TEST(QuantTableTest, RejectsInvalidCodes) {
  EXPECT_THROW(QuantTable({}), std::invalid_argument);
  EXPECT_THROW(QuantTable({1, 1}), std::invalid_argument);
  EXPECT_THROW(QuantTable({0}), std::invalid_argument);
  EXPECT_THROW(QuantTable({-3, 3}), std::invalid_argument);
  EXPECT_THROW(QuantTable::parse("pm7"), std::invalid_argument);
  EXPECT_THROW(QuantTable::parse("1,,2"), std::invalid_argument);
}

TEST(ProjectScalar, SpecExamples) {
  EXPECT_EQ(project_scalar(0.4, QuantTable::parse("z-pm1"), 1.0), 0);
  EXPECT_EQ(project_scalar(-1.6, QuantTable::parse("pm1-2"), 1.0), -2);
  EXPECT_EQ(project_scalar(0.5, QuantTable::parse("z-pm1"), 1.0), 0);
  EXPECT_EQ(project_scalar(0.0, QuantTable::parse("pm1"), 1.0), -1);
  EXPECT_EQ(project_scalar(1.5, QuantTable::parse("pm1-2"), 1.0), 1);
}

TEST(ProjectScalar, NonPositiveAlphaThrows) {
  EXPECT_THROW(project_scalar(1.0, QuantTable::parse("pm1"), 0.0), std::invalid_argument);
  EXPECT_THROW(project_scalar(1.0, QuantTable::parse("pm1"), -0.5), std::invalid_argument);
}

TEST(ProjectScalar, MatchesBruteForce) {
  SeededRng rng(21);
  for (const char* name : {"pm1", "z-pm1", "pm1-2", "pm1-2-4"}) {
    const QuantTable t = QuantTable::parse(name);
    for (int k = 0; k < 2000; ++k) {
      const double alpha = rng.uniform(0.01, 2.0);
      // Exercise exact midpoints as well as generic values.
      const double v = k % 5 == 0 ? alpha * 0.5 * static_cast<double>(static_cast<int>(rng.below(17)) - 8)
                                  : rng.uniform(-10, 10);
      EXPECT_EQ(project_scalar(v, t, alpha), oracle::brute_force_project(v, t.codes(), alpha)) << name << " " << v;
    }
  }
}

TEST(FitAlpha, HandExamples) {
  const std::vector<double> v{0.9, -1.1};
  const std::vector<std::int32_t> q{1, -1};
  EXPECT_DOUBLE_EQ(fit_alpha(v, q), 1.0);
  const std::vector<std::int32_t> codes{2, -1, 0, 4};
  std::vector<double> scaled;
  for (auto c : codes) scaled.push_back(0.37 * c);
  EXPECT_NEAR(fit_alpha(scaled, codes), 0.37, 1e-15);
}

TEST(FitAlpha, AllZeroCodesThrow) {
  const std::vector<double> v{1, 2};
  const std::vector<std::int32_t> q{0, 0};
  try {
    fit_alpha(v, q);
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_STREQ(e.what(), "all-zero codes");
  }
}

TEST(FitAlpha, BeatsNeighbouringGrid) {
  SeededRng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(12);
    std::vector<std::int32_t> q(12);
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = rng.uniform(-2, 2);
      q[k] = static_cast<std::int32_t>(rng.below(5)) - 2;
    }
    q[0] = 1;
    const double a = fit_alpha(v, q);
    const double best = oracle::objective(v, a, q);
    for (int s = -50; s <= 50; ++s) EXPECT_LE(best, oracle::objective(v, a + s * 1e-3, q) + 1e-12);
  }
}

TEST(FitCluster, SignsFixedSingleStep) {
  const std::vector<double> v{0.5, 2.0};
  const ClusterFit f = fit_cluster(v, QuantTable::parse("pm1"), 1.0);
  EXPECT_EQ(f.codes, (std::vector<std::int32_t>{1, 1}));
  EXPECT_DOUBLE_EQ(f.alpha, 1.25);
}

TEST(FitCluster, RepresentableInputHasZeroResidual) {
  const QuantTable t = QuantTable::parse("pm1-2-4");
  const std::vector<std::int32_t> codes{-4, 2, 1, -1, 4, -2};
  std::vector<double> v;
  for (auto c : codes) v.push_back(0.7 * c);
  const ClusterFit f = fit_cluster(v, t, 0.7);
  EXPECT_NEAR(f.alpha, 0.7, 1e-15);
  EXPECT_EQ(f.codes, codes);
  EXPECT_NEAR(f.objective_trace.back(), 0.0, 1e-24);
}

TEST(FitCluster, ResultIsAlternationFixedPoint) {
  // Alternating minimization need not find the exhaustive optimum over all
  // 3^6 code vectors; it must end at a point where neither step improves.
  SeededRng rng(23);
  const QuantTable t = QuantTable::parse("z-pm1");
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> v(6);
    for (double& x : v) x = rng.uniform(-1, 1);
    const ClusterFit f = fit_cluster(v, t, rng.uniform(0.05, 1.0));
    for (std::size_t k = 1; k < f.objective_trace.size(); ++k) {
      EXPECT_LE(f.objective_trace[k], f.objective_trace[k - 1] + 1e-12);
    }
    bool all_zero = true;
    for (auto c : f.codes) all_zero = all_zero && c == 0;
    if (all_zero) continue;
    EXPECT_NEAR(f.alpha, fit_alpha(v, f.codes), 1e-9);
    EXPECT_EQ(project_codes(v, t, f.alpha), f.codes);

    // The exhaustive optimum bounds the fixed point from below.
    double exhaustive = oracle::objective(v, 0.0, std::vector<std::int32_t>(6, 0));
    for (int mask = 0; mask < 729; ++mask) {
      std::vector<std::int32_t> q(6);
      int m = mask;
      bool nonzero = false;
      for (auto& c : q) {
        c = m % 3 - 1;
        m /= 3;
        nonzero = nonzero || c != 0;
      }
      if (nonzero) exhaustive = std::min(exhaustive, oracle::objective(v, fit_alpha(v, q), q));
    }
    EXPECT_GE(f.objective_trace.back(), exhaustive - 1e-9);
  }
}

TEST(FitCluster, SingleCodeTableFitsAnySign) {
  const std::vector<double> v{-0.3};
  const ClusterFit f = fit_cluster(v, QuantTable({1}), 1.0);
  EXPECT_EQ(f.alpha, -0.3);
  EXPECT_EQ(f.codes, (std::vector<std::int32_t>{1}));
}

TEST(ClusterLayoutTest, CountsPerScope) {
  const ModelDims dims{10, 3, 4};
  const std::size_t p = parameter_count(dims);
  EXPECT_EQ(ClusterLayout(dims, TyingScope::Global).cluster_count(), 1u);
  EXPECT_EQ(ClusterLayout(dims, TyingScope::PerLayer).cluster_count(), 6u);
  EXPECT_EQ(ClusterLayout(dims, TyingScope::PerNode).cluster_count(), 10u + 4 * 4 + 10);
  EXPECT_EQ(ClusterLayout(dims, TyingScope::PerParameter).cluster_count(), p);
  const ClusterLayout fp(dims, TyingScope::PerLayer, BiasPolicy::FullPrecision);
  EXPECT_EQ(fp.excluded_count(), 4u * 4 + 10);
  EXPECT_EQ(fp.quantized_count(), p - 26);
}

TEST(ClusterLayoutTest, MembersAgreeWithClusterOf) {
  const ModelDims dims{5, 2, 3};
  for (auto scope : {TyingScope::Global, TyingScope::PerLayer, TyingScope::PerNode, TyingScope::PerParameter}) {
    for (auto bias : {BiasPolicy::Quantized, BiasPolicy::FullPrecision}) {
      const ClusterLayout layout(dims, scope, bias);
      const auto members = layout.members();
      ASSERT_EQ(members.size(), layout.cluster_count());
      std::size_t covered = 0;
      for (std::size_t c = 0; c < members.size(); ++c) {
        EXPECT_FALSE(members[c].empty());
        for (std::size_t i : members[c]) EXPECT_EQ(layout.cluster_of(i), c);
        covered += members[c].size();
      }
      EXPECT_EQ(covered, layout.quantized_count());
    }
  }
  // Embedding nodes are word columns: entries (0, j) and (1, j) share a cluster.
  const ClusterLayout node(dims, TyingScope::PerNode);
  EXPECT_EQ(node.cluster_of(0), node.cluster_of(dims.vocab));
  EXPECT_NE(node.cluster_of(0), node.cluster_of(1));
}

TEST(QuantizeModel, PerParameterIdentityIsExact) {
  const ModelDims dims{7, 3, 3};
  SeededRng rng(24);
  const LstmLmParams theta = LstmLmParams::random(dims, rng, 0.5);
  const ClusterLayout layout(dims, TyingScope::PerParameter);
  const QuantTable one({1});
  const QuantState q = quantize_model(theta, LstmLmParams::zeros(dims), QuantState::initial(layout, one));
  EXPECT_EQ(q.dequantize(), theta);
}

TEST(QuantizeModel, ZeroThetaKeepsPreviousAlpha) {
  const ModelDims dims{4, 2, 2};
  const ClusterLayout layout(dims, TyingScope::PerLayer);
  QuantState prev = QuantState::initial(layout, QuantTable::parse("pm1"));
  for (std::size_t c = 0; c < prev.alpha.size(); ++c) prev.alpha[c] = 0.25 + 0.1 * c;
  const QuantState q = quantize_model(LstmLmParams::zeros(dims), LstmLmParams::zeros(dims), prev);
  EXPECT_EQ(q.alpha, prev.alpha);
  for (auto c : q.codes) EXPECT_EQ(c, -1);
}

TEST(QuantizeModel, ObjectiveNeverIncreasesAgainstPrevious) {
  const ModelDims dims{8, 3, 4};
  SeededRng rng(25);
  for (auto scope : {TyingScope::PerLayer, TyingScope::PerNode}) {
    const ClusterLayout layout(dims, scope);
    const QuantTable t = QuantTable::parse("pm1-2");
    QuantState prev = QuantState::initial(layout, t);
    for (int round = 0; round < 5; ++round) {
      const LstmLmParams theta = LstmLmParams::random(dims, rng, 1.0);
      const LstmLmParams lambda = LstmLmParams::random(dims, rng, 0.2);
      const QuantState next = quantize_model(theta, lambda, prev);
      std::vector<double> target = theta.flatten();
      const auto l = lambda.flatten();
      for (std::size_t k = 0; k < target.size(); ++k) target[k] += l[k];
      const auto members = layout.members();
      for (std::size_t c = 0; c < members.size(); ++c) {
        std::vector<double> v;
        std::vector<std::int32_t> old_codes, new_codes;
        for (std::size_t i : members[c]) {
          v.push_back(target[i]);
          old_codes.push_back(prev.codes[i]);
          new_codes.push_back(next.codes[i]);
        }
        EXPECT_LE(oracle::objective(v, next.alpha[c], new_codes),
                  oracle::objective(v, prev.alpha[c], old_codes) + 1e-12);
      }
      prev = next;
    }
  }
}

TEST(QuantizeModel, FullPrecisionBiasesCopyTheta) {
  const ModelDims dims{5, 2, 3};
  SeededRng rng(26);
  LstmLmParams theta = LstmLmParams::random(dims, rng, 0.5);
  theta.output_layer(2, dims.hidden) = 0.123;
  const ClusterLayout layout(dims, TyingScope::PerLayer, BiasPolicy::FullPrecision);
  const QuantState q = quantize_model(theta, LstmLmParams::zeros(dims), QuantState::initial(layout, QuantTable::parse("pm1")));
  EXPECT_EQ(q.dequantize().output_layer(2, dims.hidden), 0.123);
  EXPECT_EQ(q.full_precision_values.size(), layout.excluded_count());
}

TEST(Packing, ByteCountsAndStatedEncoding) {
  const QuantTable bin = QuantTable::parse("pm1");
  EXPECT_EQ(pack_codes(std::vector<std::int32_t>(8, 1), bin).size(), 1u);
  const auto packed = pack_codes(std::vector<std::int32_t>{-1, 1, 1, -1}, bin);
  ASSERT_EQ(packed.size(), 1u);
  EXPECT_EQ(packed[0], 0b0110);
}

TEST(Packing, RandomRoundTrip) {
  SeededRng rng(27);
  const QuantTable t = QuantTable::parse("pm1-2-4");
  std::vector<std::int32_t> codes(1000);
  for (auto& c : codes) c = t.codes()[rng.below(t.size())];
  const auto packed = pack_codes(codes, t);
  EXPECT_EQ(packed.size(), 375u);
  EXPECT_EQ(unpack_codes(packed, codes.size(), t), codes);
}

TEST(Packing, MalformedInputsThrow) {
  const QuantTable t = QuantTable::parse("z-pm1");
  EXPECT_THROW(pack_codes(std::vector<std::int32_t>{2}, t), std::invalid_argument);
  EXPECT_THROW(unpack_codes(std::vector<std::uint8_t>{0, 0}, 3, t), std::invalid_argument);
  // 3 codes use 6 bits; the top two must be zero.
  EXPECT_THROW(unpack_codes(std::vector<std::uint8_t>{0xC0}, 3, t), std::invalid_argument);
  // Index 3 does not exist in a three-code table.
  EXPECT_THROW(unpack_codes(std::vector<std::uint8_t>{0x03}, 3, t), std::invalid_argument);
}

TEST(QuantCheckpoint, RoundTripIsBitExact) {
  const ModelDims dims{6, 3, 2};
  SeededRng rng(28);
  for (auto bias : {BiasPolicy::Quantized, BiasPolicy::FullPrecision}) {
    const ClusterLayout layout(dims, TyingScope::PerNode, bias);
    const QuantTable t = QuantTable::parse("pm1-2-4");
    QuantState q = quantize_model(LstmLmParams::random(dims, rng, 1.0), LstmLmParams::zeros(dims),
                                  QuantState::initial(layout, t));
    // Stored decode tables are 32-bit, so use alphas that survive the trip.
    for (double& a : q.alpha) a = static_cast<float>(a);
    for (double& v : q.full_precision_values) v = static_cast<float>(v);
    std::stringstream ss;
    write_quant_state(ss, q);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 8), "QLSTMQT1");
    const QuantState back = read_quant_state(ss);
    EXPECT_EQ(back, q);
    std::stringstream again;
    write_quant_state(again, back);
    EXPECT_EQ(again.str(), bytes);
  }
}

TEST(QuantCheckpoint, RejectsTruncationAndInconsistentTables) {
  const ModelDims dims{4, 2, 2};
  const ClusterLayout layout(dims, TyingScope::PerLayer);
  const QuantState q = QuantState::initial(layout, QuantTable::parse("pm1"));
  std::stringstream ss;
  write_quant_state(ss, q);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(read_quant_state(truncated), std::runtime_error);
  // Header: magic 8 + 6 u32 + table size u32 + 2 codes + bits u32 + u64 clusters = 56 bytes.
  // Corrupt the first decode-table entry so it no longer equals -alpha.
  bytes[56] ^= 0x01;
  std::stringstream corrupt(bytes);
  EXPECT_THROW(read_quant_state(corrupt), std::runtime_error);
}
