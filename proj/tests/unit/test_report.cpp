#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "qlstm/report.hpp"

using namespace qlstm;

namespace {
const ModelDims kPaper{10000, 200, 200};
}

TEST(Perplexity, UniformModelGivesVocabSize) {
  const LstmLmParams p = LstmLmParams::zeros({13, 4, 3});
  const std::vector<Sentence> data{{2, 3, 0}, {5, 0}};
  EXPECT_NEAR(perplexity(p, data), 13.0, 1e-10);
}

TEST(Perplexity, SingleWordVocabularyGivesOne) {
  SeededRng rng(1);
  const LstmLmParams p = LstmLmParams::random({1, 2, 2}, rng);
  EXPECT_EQ(perplexity(p, std::vector<Sentence>{{0}, {0}}), 1.0);
}

TEST(Perplexity, MatchesSummedOracleLosses) {
  SeededRng rng(2);
  const ModelDims dims{9, 3, 4};
  const LstmLmParams p = LstmLmParams::random(dims, rng, 0.7);
  const std::vector<Sentence> data{{2, 8, 1, 0}, {4, 0}, {7, 7, 7, 3, 0}};
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const Sentence& s : data) {
    nll += oracle::sentence_nll(s, p);
    tokens += s.size();
  }
  EXPECT_NEAR(perplexity(p, data), std::exp(nll / tokens), 1e-10);
}

TEST(Perplexity, EmptyCorpusThrows) {
  EXPECT_THROW(perplexity(LstmLmParams::zeros({3, 2, 2}), std::vector<Sentence>{}), std::invalid_argument);
}

TEST(Perplexity, QuantStateIsDequantizedFirst) {
  SeededRng rng(3);
  const ModelDims dims{6, 2, 3};
  const LstmLmParams theta = LstmLmParams::random(dims, rng, 0.5);
  const QuantState q = quantize_model(theta, LstmLmParams::zeros(dims),
                                      QuantState::initial(ClusterLayout(dims, TyingScope::PerParameter), QuantTable({1})));
  const std::vector<Sentence> data{{2, 3, 0}, {5, 1, 0}};
  EXPECT_EQ(perplexity(q, data), perplexity(theta, data));
}

TEST(SizeReportTest, FullPrecisionSize) {
  const SizeReport r = full_precision_size(kPaper);
  EXPECT_EQ(r.parameter_count, 4330800u);
  EXPECT_EQ(r.full_bits, 32u * 4330800u);
  EXPECT_NEAR(r.full_size_mib, 16.52, 0.005);
  EXPECT_EQ(r.compression_ratio, 1.0);
}

TEST(SizeReportTest, LayerTiedRatios) {
  EXPECT_NEAR(size_report(kPaper, TyingScope::PerLayer, QuantTable::parse("pm1")).compression_ratio, 31.8, 0.5);
  EXPECT_NEAR(size_report(kPaper, TyingScope::PerLayer, QuantTable::parse("pm1-2")).compression_ratio, 15.6, 0.5);
  EXPECT_NEAR(size_report(kPaper, TyingScope::PerLayer, QuantTable::parse("pm1-2-4")).compression_ratio, 10.5, 0.5);
}

TEST(SizeReportTest, QuantBitsFollowDecodeTableAccounting) {
  const ModelDims dims{10, 3, 4};
  const QuantTable t = QuantTable::parse("z-pm1");
  const SizeReport r = size_report(dims, TyingScope::PerNode, t, BiasPolicy::FullPrecision);
  const ClusterLayout layout(dims, TyingScope::PerNode, BiasPolicy::FullPrecision);
  EXPECT_EQ(r.quant_bits, 32u * layout.cluster_count() * 3 + 2u * layout.quantized_count() + 32u * layout.excluded_count());
  EXPECT_DOUBLE_EQ(r.compression_ratio, static_cast<double>(r.full_bits) / static_cast<double>(r.quant_bits));
}

TEST(SizeReportTest, NoTieSingleCodeIsRatioOne) {
  const SizeReport r = size_report(kPaper, TyingScope::PerParameter, QuantTable({1}));
  EXPECT_EQ(r.compression_ratio, 1.0);
  EXPECT_NEAR(r.size_mib, 16.52, 0.005);
}

TEST(SizeReportTest, BinarizedBaselines) {
  const SizeReport bin = binarized_size(kPaper, false);
  EXPECT_EQ(bin.quant_bits, 4330800u);
  EXPECT_EQ(bin.compression_ratio, 32.0);
  const SizeReport lin = binarized_size(kPaper, true);
  EXPECT_LT(lin.compression_ratio, 32.0);
  EXPECT_GT(lin.compression_ratio, 25.0);
}

TEST(Summary, AlignedColumnsWithPlaceholders) {
  const std::vector<SummaryRow> rows{
      {"std", "-", "-", 16.52, 1.0, 114.5, 110.25},
      {"admm", "layer", "{-1,+1}", 0.52, 31.8, std::nullopt, std::nullopt},
  };
  const std::string text = format_summary(rows);
  EXPECT_NE(text.find("mode"), std::string::npos);
  EXPECT_NE(text.find("16.52"), std::string::npos);
  EXPECT_NE(text.find("31.8"), std::string::npos);
  EXPECT_NE(text.find("110.25"), std::string::npos);
  const auto first = text.find('\n');
  const auto second = text.find('\n', first + 1);
  const auto third = text.find('\n', second + 1);
  EXPECT_EQ(first + 1, second - first);
  EXPECT_EQ(second - first, third - second);
}
