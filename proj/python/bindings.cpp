#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "qlstm/cli.hpp"
#include "qlstm/corpus.hpp"
#include "qlstm/lstm_lm.hpp"
#include "qlstm/quantizer.hpp"
#include "qlstm/report.hpp"
#include "qlstm/training.hpp"

namespace py = pybind11;
using namespace qlstm;

namespace {

py::tuple cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_qlstm, m) {
  m.doc() = "Low-bit quantized LSTM language models trained with ADMM";

  // corpus
  py::class_<Vocabulary>(m, "Vocabulary")
      .def(py::init<std::vector<std::string>>(), py::arg("words"))
      .def("__len__", &Vocabulary::size)
      .def("id", &Vocabulary::id)
      .def("word", &Vocabulary::word)
      .def("__contains__", &Vocabulary::contains)
      .def("words", [](const Vocabulary& v) { return std::vector<std::string>(v.words().begin(), v.words().end()); })
      .def("encode_line", &Vocabulary::encode_line)
      .def("decode", [](const Vocabulary& v, const Sentence& s) { return v.decode(s); })
      .def("save", &Vocabulary::save)
      .def_static("load", &Vocabulary::load);
  m.attr("EOS_ID") = kEosId;
  m.attr("UNK_ID") = kUnkId;
  m.def("build_vocab", &build_vocab, py::arg("text"), py::arg("min_count") = 1);
  m.def("encode_corpus", &encode_corpus, py::arg("text"), py::arg("vocab"));

  // model
  py::class_<ModelDims>(m, "ModelDims")
      .def(py::init<std::size_t, std::size_t, std::size_t>(), py::arg("vocab"), py::arg("embed"), py::arg("hidden"))
      .def_readwrite("vocab", &ModelDims::vocab)
      .def_readwrite("embed", &ModelDims::embed)
      .def_readwrite("hidden", &ModelDims::hidden)
      .def("__eq__", [](const ModelDims& a, const ModelDims& b) { return a == b; })
      .def("__repr__", [](const ModelDims& d) {
        return "ModelDims(vocab=" + std::to_string(d.vocab) + ", embed=" + std::to_string(d.embed) +
               ", hidden=" + std::to_string(d.hidden) + ")";
      });
  m.def("parameter_count", py::overload_cast<const ModelDims&>(&parameter_count));

  py::class_<LstmLmParams>(m, "LstmLmParams")
      .def_static("zeros", &LstmLmParams::zeros)
      .def_static("random", [](const ModelDims& d, std::uint64_t seed, double scale) {
        SeededRng rng(seed);
        return LstmLmParams::random(d, rng, scale);
      }, py::arg("dims"), py::arg("seed"), py::arg("scale") = 0.1)
      .def_readonly("dims", &LstmLmParams::dims)
      .def("flatten", &LstmLmParams::flatten)
      .def_static("unflatten", [](const ModelDims& d, const std::vector<double>& v) { return LstmLmParams::unflatten(d, v); })
      .def("__eq__", [](const LstmLmParams& a, const LstmLmParams& b) { return a == b; })
      .def("save", [](const LstmLmParams& p, const std::filesystem::path& path) { save_params(path, p); })
      .def_static("load", &load_params);
  m.def("sentence_nll", [](const Sentence& s, const LstmLmParams& p) { return sentence_nll(s, p); });
  m.def("gradient", [](const Sentence& s, const LstmLmParams& p) {
    return backward_bptt(forward_sentence(s, p).cache, s, p).flatten();
  }, "Flattened d(sentence NLL)/d(params).");

  // quantizer
  py::class_<QuantTable>(m, "QuantTable")
      .def(py::init<std::vector<std::int32_t>>())
      .def_static("parse", &QuantTable::parse)
      .def_property_readonly("codes", [](const QuantTable& t) { return std::vector<std::int32_t>(t.codes().begin(), t.codes().end()); })
      .def_property_readonly("bits", &QuantTable::bits)
      .def("label", &QuantTable::label)
      .def("__repr__", [](const QuantTable& t) { return "QuantTable(" + t.label() + ")"; });
  py::enum_<TyingScope>(m, "TyingScope")
      .value("GLOBAL", TyingScope::Global)
      .value("LAYER", TyingScope::PerLayer)
      .value("NODE", TyingScope::PerNode)
      .value("NONE", TyingScope::PerParameter);
  m.def("parse_tying", &parse_tying);
  py::enum_<BiasPolicy>(m, "BiasPolicy")
      .value("QUANTIZED", BiasPolicy::Quantized)
      .value("FULL_PRECISION", BiasPolicy::FullPrecision);

  m.def("project_scalar", &project_scalar, py::arg("value"), py::arg("table"), py::arg("alpha"));
  m.def("fit_alpha", [](const std::vector<double>& v, const std::vector<std::int32_t>& q) { return fit_alpha(v, q); });
  m.def("fit_cluster", [](const std::vector<double>& v, const QuantTable& t, double alpha_init) {
    const ClusterFit f = fit_cluster(v, t, alpha_init);
    return py::make_tuple(f.alpha, f.codes, f.objective_trace);
  }, py::arg("values"), py::arg("table"), py::arg("alpha_init") = 1.0, "Returns (alpha, codes, objective_trace).");
  m.def("pack_codes", [](const std::vector<std::int32_t>& codes, const QuantTable& t) {
    const auto bytes = pack_codes(codes, t);
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  m.def("unpack_codes", [](py::bytes packed, std::size_t count, const QuantTable& t) {
    const std::string s = packed;
    const std::vector<std::uint8_t> bytes(s.begin(), s.end());
    return unpack_codes(bytes, count, t);
  });

  py::class_<QuantState>(m, "QuantState")
      .def_static("initial", [](const ModelDims& d, TyingScope scope, const QuantTable& t, BiasPolicy bias) {
        return QuantState::initial(ClusterLayout(d, scope, bias), t);
      }, py::arg("dims"), py::arg("tying"), py::arg("table"), py::arg("bias") = BiasPolicy::Quantized)
      .def_readonly("alpha", &QuantState::alpha)
      .def_readonly("codes", &QuantState::codes)
      .def_property_readonly("cluster_count", [](const QuantState& q) { return q.layout.cluster_count(); })
      .def("dequantize", &QuantState::dequantize)
      .def("__eq__", [](const QuantState& a, const QuantState& b) { return a == b; })
      .def("save", [](const QuantState& q, const std::filesystem::path& path) { save_quant_state(path, q); })
      .def_static("load", &load_quant_state);
  m.def("quantize_model", &quantize_model, py::arg("theta"), py::arg("lambda_"), py::arg("prev"));

  // report
  py::class_<SizeReport>(m, "SizeReport")
      .def_readonly("parameter_count", &SizeReport::parameter_count)
      .def_readonly("cluster_count", &SizeReport::cluster_count)
      .def_readonly("full_bits", &SizeReport::full_bits)
      .def_readonly("quant_bits", &SizeReport::quant_bits)
      .def_readonly("compression_ratio", &SizeReport::compression_ratio)
      .def_readonly("size_mib", &SizeReport::size_mib)
      .def_readonly("full_size_mib", &SizeReport::full_size_mib);
  m.def("size_report", &size_report, py::arg("dims"), py::arg("tying"), py::arg("table"),
        py::arg("bias") = BiasPolicy::Quantized);
  m.def("perplexity", [](const LstmLmParams& p, const std::vector<Sentence>& s) { return perplexity(p, s); });
  m.def("perplexity", [](const QuantState& q, const std::vector<Sentence>& s) { return perplexity(q, s); });

  // training
  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("embed", &TrainConfig::embed)
      .def_readwrite("hidden", &TrainConfig::hidden)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("eta1", &TrainConfig::eta1)
      .def_readwrite("eta2", &TrainConfig::eta2)
      .def_readwrite("gamma", &TrainConfig::gamma)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("admm_iterations", &TrainConfig::admm_iterations)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("shuffle", &TrainConfig::shuffle)
      .def_readwrite("tying", &TrainConfig::tying)
      .def_readwrite("table", &TrainConfig::table)
      .def_readwrite("bias", &TrainConfig::bias)
      .def_readwrite("clip_norm", &TrainConfig::clip_norm)
      .def_readwrite("init_scale", &TrainConfig::init_scale);

  py::class_<CurvePoint>(m, "CurvePoint")
      .def_readonly("iteration", &CurvePoint::iteration)
      .def_readonly("train_ppl", &CurvePoint::train_ppl)
      .def_readonly("valid_ppl", &CurvePoint::valid_ppl)
      .def_readonly("quantized_valid_ppl", &CurvePoint::quantized_valid_ppl)
      .def_readonly("alpha_summary", &CurvePoint::alpha_summary)
      .def_readonly("wallclock_s", &CurvePoint::wallclock_s);

  m.def("train_admm", [](const TrainConfig& c, const std::vector<Sentence>& train, const std::vector<Sentence>& valid,
                         std::size_t vocab_size) {
    AdmmResult r = train_admm(c, train, valid, vocab_size);
    return py::make_tuple(r.best, r.best_iteration, r.curve, r.diverged);
  }, "Returns (best QuantState, best iteration, curve, diverged).");
  m.def("train_full_precision", [](const TrainConfig& c, const std::vector<Sentence>& train,
                                   const std::vector<Sentence>& valid, std::size_t vocab_size) {
    FullPrecisionResult r = train_full_precision(c, train, valid, vocab_size);
    return py::make_tuple(r.best, r.best_epoch, r.curve);
  });
  m.def("train_binarized", [](const TrainConfig& c, const std::vector<Sentence>& train,
                              const std::vector<Sentence>& valid, std::size_t vocab_size, bool with_linear) {
    BinarizedResult r = train_binarized(c, train, valid, vocab_size, with_linear);
    return py::make_tuple(r.best.effective(), r.best_epoch, r.curve);
  }, py::arg("config"), py::arg("train"), py::arg("valid"), py::arg("vocab_size"), py::arg("with_linear") = false);
  m.def("epochs_to_converge", [](const std::vector<double>& v, double tol) { return epochs_to_converge(v, tol); },
        py::arg("values"), py::arg("rel_tol") = 0.05);

  m.def("cli", &cli, "Run the qlstm command line; returns (exit code, stdout, stderr).");

  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);
}
