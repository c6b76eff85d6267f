#include "qlstm/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "qlstm/corpus.hpp"
#include "qlstm/lstm_lm.hpp"
#include "qlstm/quantizer.hpp"
#include "qlstm/report.hpp"
#include "qlstm/training.hpp"

namespace fs = std::filesystem;

namespace qlstm {

namespace {

struct TrainArgs {
  std::string mode;
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  std::string out_dir = ".";
  std::size_t min_count = 1;
  std::string tying = "layer";
  std::string table = "pm1";
  std::string schedule = "plateau";
  bool fp_bias = false;
  double eta1 = -1.0;
  double eta2 = -1.0;
  TrainConfig config;
};

struct EvalArgs {
  std::string model;
  std::string vocab;
  std::string data;
};

struct SizeArgs {
  std::size_t vocab = 10000;
  std::size_t embed = 200;
  std::size_t hidden = 200;
  std::string tying = "layer";
  std::string table = "pm1";
  std::string mode = "admm";
  bool fp_bias = false;
};

struct CurveArgs {
  std::vector<std::string> curves;
  std::string column = "quantized_valid_ppl";
  std::string out;
  double tolerance = 0.05;
};

std::vector<Sentence> load_corpus(const std::string& path, const Vocabulary& vocab) {
  std::vector<Sentence> s = encode_corpus(read_text_file(path), vocab);
  if (s.empty()) throw std::runtime_error("corpus " + path + " has no sentences");
  return s;
}

std::string peek_magic(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file " + path);
  std::string magic(8, '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  magic.resize(static_cast<std::size_t>(is.gcount()));
  return magic;
}

int run_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = a.config;
  cfg.tying = parse_tying(a.tying);
  cfg.table = QuantTable::parse(a.table);
  cfg.bias = a.fp_bias ? BiasPolicy::FullPrecision : BiasPolicy::Quantized;
  if (a.schedule == "plateau") {
    cfg.lr_schedule = LrSchedule::HalveOnPlateau;
  } else if (a.schedule == "constant") {
    cfg.lr_schedule = LrSchedule::Constant;
  } else {
    throw std::invalid_argument("unknown lr schedule '" + a.schedule + "'");
  }
  if (a.eta1 >= 0.0) cfg.eta1 = a.eta1;
  if (a.eta2 >= 0.0) cfg.eta2 = a.eta2;
  cfg.validate();

  const Vocabulary vocab = build_vocab(read_text_file(a.train_path), a.min_count);
  const std::vector<Sentence> train = load_corpus(a.train_path, vocab);
  const std::vector<Sentence> valid = load_corpus(a.valid_path, vocab);
  std::vector<Sentence> test;
  if (!a.test_path.empty()) test = load_corpus(a.test_path, vocab);
  const ModelDims dims = cfg.dims(vocab.size());

  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  vocab.save(dir / "vocab.txt");

  SummaryRow row;
  row.mode = a.mode;
  Curve curve;
  std::size_t best = 0;
  if (a.mode == "std") {
    FullPrecisionResult r = train_full_precision(cfg, train, valid, vocab.size());
    save_params(dir / "model.bin", r.best);
    const SizeReport size = full_precision_size(dims);
    row.tying = "-";
    row.table = "-";
    row.size_mib = size.size_mib;
    row.ratio = size.compression_ratio;
    row.valid_ppl = perplexity(r.best, valid);
    if (!test.empty()) row.test_ppl = perplexity(r.best, test);
    curve = std::move(r.curve);
    best = r.best_epoch;
  } else if (a.mode == "bin" || a.mode == "binlin") {
    const bool with_linear = a.mode == "binlin";
    BinarizedResult r = train_binarized(cfg, train, valid, vocab.size(), with_linear);
    const LstmLmParams eff = r.best.effective();
    save_params(dir / "model.bin", eff);
    const SizeReport size = binarized_size(dims, with_linear);
    row.tying = "-";
    row.table = "{+-1/sqrt(H)}";
    row.size_mib = size.size_mib;
    row.ratio = size.compression_ratio;
    row.valid_ppl = perplexity(eff, valid);
    if (!test.empty()) row.test_ppl = perplexity(eff, test);
    curve = std::move(r.curve);
    best = r.best_epoch;
  } else if (a.mode == "admm") {
    AdmmResult r = train_admm(cfg, train, valid, vocab.size());
    save_quant_state(dir / "model.qbin", r.best);
    const SizeReport size = size_report(dims, cfg.tying, cfg.table, cfg.bias);
    row.tying = std::string(tying_name(cfg.tying));
    row.table = cfg.table.label();
    row.size_mib = size.size_mib;
    row.ratio = size.compression_ratio;
    row.valid_ppl = perplexity(r.best, valid);
    if (!test.empty()) row.test_ppl = perplexity(r.best, test);
    curve = std::move(r.curve);
    best = r.best_iteration;
    if (r.diverged) out << "warning: training diverged; best model so far was kept\n";
  } else {
    throw std::invalid_argument("unknown mode '" + a.mode + "' (expected std, bin, binlin or admm)");
  }
  save_curve(dir / "curve.csv", curve);
  const std::vector<SummaryRow> rows{row};
  out << format_summary(rows);
  out << "best iteration: " << best << " of " << curve.size() << "\n";
  return 0;
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  const Vocabulary vocab = Vocabulary::load(a.vocab);
  const std::vector<Sentence> data = load_corpus(a.data, vocab);
  const std::string magic = peek_magic(a.model);
  LstmLmParams params = magic == "QLSTMQT1" ? load_quant_state(a.model).dequantize() : load_params(a.model);
  if (params.dims.vocab != vocab.size()) {
    throw std::runtime_error("model vocabulary size " + std::to_string(params.dims.vocab) +
                             " does not match vocabulary file (" + std::to_string(vocab.size()) + ")");
  }
  std::size_t tokens = 0;
  for (const Sentence& s : data) tokens += s.size();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", perplexity(params, data));
  out << "perplexity " << buf << "\n" << "tokens " << tokens << "\n";
  return 0;
}

int run_report_size(const SizeArgs& a, std::ostream& out) {
  const ModelDims dims{a.vocab, a.embed, a.hidden};
  SummaryRow row;
  row.mode = a.mode;
  SizeReport size;
  if (a.mode == "admm") {
    const QuantTable table = QuantTable::parse(a.table);
    const TyingScope scope = parse_tying(a.tying);
    size = size_report(dims, scope, table, a.fp_bias ? BiasPolicy::FullPrecision : BiasPolicy::Quantized);
    row.tying = std::string(tying_name(scope));
    row.table = table.label();
  } else if (a.mode == "std") {
    size = full_precision_size(dims);
    row.tying = "-";
    row.table = "-";
  } else if (a.mode == "bin" || a.mode == "binlin") {
    size = binarized_size(dims, a.mode == "binlin");
    row.tying = "-";
    row.table = "{+-1/sqrt(H)}";
  } else {
    throw std::invalid_argument("unknown mode '" + a.mode + "'");
  }
  row.size_mib = size.size_mib;
  row.ratio = size.compression_ratio;
  const std::vector<SummaryRow> rows{row};
  out << format_summary(rows);
  char buf[160];
  std::snprintf(buf, sizeof buf, "parameters %zu, clusters %zu, full precision %.2f MiB, compression ratio %.2f\n",
                size.parameter_count, size.cluster_count, size.full_size_mib, size.compression_ratio);
  out << buf;
  return 0;
}

double curve_column(const CurvePoint& p, const std::string& column) {
  if (column == "train_ppl") return p.train_ppl;
  if (column == "valid_ppl") return p.valid_ppl;
  if (column == "quantized_valid_ppl") return p.quantized_valid_ppl;
  if (column == "wallclock_s") return p.wallclock_s;
  throw std::invalid_argument("unknown curve column '" + column + "'");
}

int run_export_curves(const CurveArgs& a, std::ostream& out) {
  std::vector<std::pair<std::string, Curve>> curves;
  for (const std::string& spec : a.curves) {
    const auto eq = spec.find('=');
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    const std::string label = eq == std::string::npos ? fs::path(spec).stem().string() : spec.substr(0, eq);
    curves.emplace_back(label, load_curve(path));
    if (curves.back().second.empty()) throw std::runtime_error("curve " + path + " is empty");
  }
  std::size_t rows = 0;
  for (const auto& [label, c] : curves) rows = std::max(rows, c.size());

  std::ostringstream csv;
  csv << "iteration";
  for (const auto& [label, c] : curves) csv << ',' << label;
  csv << '\n';
  char buf[64];
  for (std::size_t i = 0; i < rows; ++i) {
    csv << i + 1;
    for (const auto& [label, c] : curves) {
      csv << ',';
      if (i < c.size()) {
        std::snprintf(buf, sizeof buf, "%.6f", curve_column(c[i], a.column));
        csv << buf;
      }
    }
    csv << '\n';
  }
  if (a.out.empty()) {
    out << csv.str();
    return 0;
  }
  std::ofstream os(a.out, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + a.out);
  os << csv.str();
  for (const auto& [label, c] : curves) {
    std::vector<double> values;
    for (const CurvePoint& p : c) values.push_back(curve_column(p, a.column));
    std::snprintf(buf, sizeof buf, "%.2f", values.back());
    out << label << ": final " << a.column << " " << buf << ", within " << a.tolerance * 100
        << "% of final after " << epochs_to_converge(values, a.tolerance) << " of " << values.size() << " epochs\n";
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantized LSTM language models trained with ADMM", "qlstm"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value file; options of a subcommand go under a [train]-style section");

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Train a full-precision, binarized or ADMM-quantized LM");
  train->add_option("--mode", ta.mode, "std | bin | binlin | admm")->required()
      ->check(CLI::IsMember({"std", "bin", "binlin", "admm"}));
  train->add_option("--train", ta.train_path, "Training text, one sentence per line")->required()->check(CLI::ExistingFile);
  train->add_option("--valid", ta.valid_path, "Validation text")->required()->check(CLI::ExistingFile);
  train->add_option("--test", ta.test_path, "Optional test text")->check(CLI::ExistingFile);
  train->add_option("--out", ta.out_dir, "Output directory for vocab.txt, model and curve.csv")->capture_default_str();
  train->add_option("--min-count", ta.min_count, "Minimum word count for the vocabulary")->capture_default_str();
  train->add_option("--embed", ta.config.embed, "Embedding size M")->capture_default_str();
  train->add_option("--hidden", ta.config.hidden, "Hidden size D")->capture_default_str();
  train->add_option("--epochs", ta.config.epochs, "Epochs for std/bin/binlin")->capture_default_str();
  train->add_option("--iters", ta.config.admm_iterations, "ADMM iterations (one epoch each)")->capture_default_str();
  train->add_option("--batch-size", ta.config.batch_size, "Sentences per batch")->capture_default_str();
  train->add_option("--lr", ta.config.learning_rate, "Initial learning rate")->capture_default_str();
  train->add_option("--eta1", ta.eta1, "Extra-gradient look-ahead step (default: learning rate)");
  train->add_option("--eta2", ta.eta2, "Extra-gradient update step (default: learning rate)");
  train->add_option("--gamma", ta.config.gamma, "ADMM penalty")->capture_default_str();
  train->add_option("--seed", ta.config.seed, "Random seed")->capture_default_str();
  train->add_option("--tying", ta.tying, "global | layer | node | none")->capture_default_str();
  train->add_option("--table", ta.table, "pm1 | z-pm1 | pm1-2 | pm1-2-4 | comma list")->capture_default_str();
  train->add_option("--lr-schedule", ta.schedule, "plateau | constant")->capture_default_str();
  train->add_option("--clip", ta.config.clip_norm, "Global gradient norm clip")->capture_default_str();
  train->add_option("--init-scale", ta.config.init_scale, "Uniform init half-width")->capture_default_str();
  train->add_flag("--shuffle", ta.config.shuffle, "Shuffle sentences every epoch");
  train->add_flag("--fp-bias", ta.fp_bias, "Keep bias columns at full precision");
  train->add_flag("--wallclock", ta.config.record_wallclock, "Record elapsed seconds in the curve file");

  EvalArgs ea;
  CLI::App* eval = app.add_subcommand("eval", "Perplexity of a checkpoint on a text file");
  eval->add_option("--model", ea.model, "model.bin or model.qbin")->required();
  eval->add_option("--vocab", ea.vocab, "Vocabulary file")->required();
  eval->add_option("--data", ea.data, "Text to score")->required();

  SizeArgs sa;
  CLI::App* size = app.add_subcommand("report-size", "Model size and compression ratio");
  size->add_option("--vocab", sa.vocab, "Vocabulary size N")->capture_default_str();
  size->add_option("--embed", sa.embed, "Embedding size M")->capture_default_str();
  size->add_option("--hidden", sa.hidden, "Hidden size D")->capture_default_str();
  size->add_option("--tying", sa.tying, "global | layer | node | none")->capture_default_str();
  size->add_option("--table", sa.table, "Quantization table")->capture_default_str();
  size->add_option("--mode", sa.mode, "admm | std | bin | binlin")->capture_default_str();
  size->add_flag("--fp-bias", sa.fp_bias, "Keep bias columns at full precision");

  CurveArgs ca;
  CLI::App* curves = app.add_subcommand("export-curves", "Merge curve files into one convergence table");
  curves->add_option("--curve", ca.curves, "label=path (repeatable)")->required();
  curves->add_option("--column", ca.column, "Curve column to export")->capture_default_str();
  curves->add_option("--out", ca.out, "Output CSV (default: stdout)");
  curves->add_option("--tolerance", ca.tolerance, "Relative convergence tolerance")->capture_default_str();

  std::vector<std::string> argv_storage{"qlstm"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const std::string& s : argv_storage) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*train) return run_train(ta, out);
    if (*eval) return run_eval(ea, out);
    if (*size) return run_report_size(sa, out);
    if (*curves) return run_export_curves(ca, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace qlstm
