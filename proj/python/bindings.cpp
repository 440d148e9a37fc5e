// Copyright (c) 2026, The tristream authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "json.hpp"
#include "tristream/checkpoint.hpp"
#include "tristream/codec.hpp"
#include "tristream/corpus.hpp"
#include "tristream/ctc.hpp"
#include "tristream/error.hpp"
#include "tristream/eval.hpp"
#include "tristream/gradcheck.hpp"
#include "tristream/streaming.hpp"

namespace py = pybind11;
using namespace tristream;

namespace {

Tensor<double> matrix_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor<double>({rows, cols}, std::vector<double>(a.data(), a.data() + rows * cols));
}

// Loaded checkpoint with streaming inference.
class PyModel {
 public:
  explicit PyModel(const std::string& path) : ck_(load_checkpoint(path)) {
    model_ = std::make_unique<Model<double>>(ck_.config, checkpoint_params<double>(ck_, ck_.config));
  }

  std::uint32_t stage() const { return ck_.stage; }
  std::string config() const { return config_to_json(ck_.config); }

  // Event records of one session as dicts with keys step, kind, payload, wall_ns.
  py::list stream(std::vector<TokenId> input_units, std::vector<TokenId> input_text,
                  std::optional<std::vector<float>> vision, bool speech_output,
                  std::optional<std::int64_t> wait_k) const {
    SessionRequest req{std::move(vision), std::move(input_units), std::move(input_text)};
    auto opt = session_options(model_->config(), speech_output);
    if (wait_k) opt.wait_k = *wait_k;
    ModelBackend<double> backend(*model_);
    std::vector<StreamEvent> events;
    {
      py::gil_scoped_release release;
      events = Session(backend, std::move(req), opt).run();
    }
    auto loads = py::module_::import("json").attr("loads");
    py::list out;
    for (const auto& e : events) out.append(loads(to_json_line(e, false)));
    return out;
  }

 private:
  Checkpoint ck_;
  std::unique_ptr<Model<double>> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "tristream native core";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<SchedulingError>(m, "SchedulingError", base.ptr());

  py::class_<MultimodalVocab>(m, "Vocab")
      .def(py::init<std::int64_t, std::int64_t>(), py::arg("text_size"), py::arg("unit_size"))
      .def_property_readonly("text_size", &MultimodalVocab::text_size)
      .def_property_readonly("unit_size", &MultimodalVocab::unit_size)
      .def_property_readonly("total_size", &MultimodalVocab::total_size)
      .def_property_readonly("blank_id", &MultimodalVocab::blank_id)
      .def("classify", [](const MultimodalVocab& v, TokenId id) { return to_string(v.classify(id)); })
      .def("unit_id", &MultimodalVocab::unit_id);
  m.def("build_vocab", &build_vocab, py::arg("text_size"), py::arg("unit_size"));

  py::class_<SyntheticSpeechCodec>(m, "Codec")
      .def(py::init<const MultimodalVocab&, std::uint64_t>(), py::arg("vocab"), py::arg("seed"))
      .def("expansion",
           [](const SyntheticSpeechCodec& c, TokenId t) {
             auto w = c.expansion(t);
             return std::vector<TokenId>(w.begin(), w.end());
           })
      .def("tokenize", [](const SyntheticSpeechCodec& c, const std::vector<TokenId>& text) {
        return c.tokenize(text);
      })
      .def("decode", [](const SyntheticSpeechCodec& c, const std::vector<TokenId>& units) {
        return c.decode(units);
      });

  m.def("collapse", [](const std::vector<TokenId>& path, TokenId blank) { return collapse(path, blank); },
        py::arg("path"), py::arg("blank"));
  m.def(
      "ctc_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
         const std::vector<TokenId>& target, TokenId blank) {
        auto x = matrix_from(logits);
        x.set_requires_grad(true);
        auto loss = ctc_loss(x, target, blank);
        const double value = loss.item();
        py::array_t<double> grad({x.dim(0), x.dim(1)});
        auto* g = grad.mutable_data();
        if (loss.requires_grad()) {
          loss.backward();
          std::copy(x.grad().begin(), x.grad().end(), g);
        } else {
          std::fill(g, g + x.size(), 0.0);
        }
        return py::make_tuple(value, grad);
      },
      py::arg("logits"), py::arg("target"), py::arg("blank"),
      "Returns (loss, d loss / d logits).");
  m.def(
      "ctc_greedy_decode",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& logits,
         std::int64_t num_labels, TokenId blank) {
        auto al = ctc_greedy_decode(matrix_from(logits), num_labels, blank);
        py::dict d;
        d["path"] = al.path();
        d["prefix_counts"] = al.prefix_counts();
        d["text"] = al.text();
        return d;
      },
      py::arg("logits"), py::arg("num_labels"), py::arg("blank"));
  m.def(
      "fusion_window",
      [](std::int64_t aligned, std::int64_t window, std::int64_t text_len) {
        auto r = fusion_window(aligned, window, text_len);
        return py::make_tuple(r.first, r.last);
      },
      py::arg("aligned"), py::arg("window"), py::arg("text_len"));
  m.def(
      "edit_distance",
      [](const std::vector<TokenId>& ref, const std::vector<TokenId>& hyp) {
        auto e = edit_distance(ref, hyp);
        py::dict d;
        d["substitutions"] = e.substitutions;
        d["deletions"] = e.deletions;
        d["insertions"] = e.insertions;
        d["reference"] = e.reference;
        return d;
      },
      py::arg("ref"), py::arg("hyp"));
  m.def(
      "word_error_rate",
      [](const std::vector<TokenId>& ref, const std::vector<TokenId>& hyp) {
        return word_error_rate(edit_distance(ref, hyp));
      },
      py::arg("ref"), py::arg("hyp"));
  m.def(
      "generate_records",
      [](std::uint64_t seed, const std::string& split, std::int64_t n) {
        CorpusSpec spec;
        spec.seed = seed;
        spec.n_train = spec.n_dev = spec.n_test = 0;
        Split s;
        if (split == "train") {
          s = Split::Train;
          spec.n_train = n;
        } else if (split == "dev") {
          s = Split::Dev;
          spec.n_dev = n;
        } else if (split == "test") {
          s = Split::Test;
          spec.n_test = n;
        } else {
          throw ConfigError("split must be train, dev or test");
        }
        SyntheticWorld world(spec);
        auto loads = py::module_::import("json").attr("loads");
        py::list out;
        for (const auto& r : generate_split(world, s)) out.append(loads(record_to_json(r)));
        return out;
      },
      py::arg("seed"), py::arg("split"), py::arg("n"),
      "Corpus records as dicts (same schema as the JSONL files).");
  m.def(
      "gradcheck",
      [](std::uint64_t seed, int instances) {
        auto ctc = gradcheck_ctc(seed, instances);
        auto full = gradcheck_model(ModelConfig::tiny(), seed, instances);
        py::dict groups;
        for (const auto& g : full.groups) groups[py::str(g.group)] = g.max_rel_error;
        for (const auto& g : ctc.groups) groups[py::str(g.group)] = g.max_rel_error;
        return py::make_tuple(ctc.passed && full.passed, groups);
      },
      py::arg("seed") = 1, py::arg("instances") = 3,
      "Finite-difference checks on the tiny config: (passed, {group: max_rel_error}).");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("stage", &PyModel::stage)
      .def_property_readonly("config_json", &PyModel::config)
      .def("stream", &PyModel::stream, py::arg("input_units") = std::vector<TokenId>{},
           py::arg("input_text") = std::vector<TokenId>{}, py::arg("vision") = py::none(),
           py::arg("speech_output") = false, py::arg("wait_k") = py::none());
}
