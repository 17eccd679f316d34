#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <string>
#include <vector>

#include "parafill/annotate.hpp"
#include "parafill/corpus.hpp"
#include "parafill/decode.hpp"
#include "parafill/metrics.hpp"
#include "parafill/pipeline.hpp"
#include "parafill/service.hpp"
#include "parafill/text.hpp"
#include "parafill/tokenizer.hpp"
#include "parafill/types.hpp"

namespace py = pybind11;
using namespace parafill;

namespace {

// JSON crosses the boundary as text; the Python side gets plain dicts.
py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::tuple reply(const service::Reply& r) { return py::make_tuple(r.status, to_python(r.body)); }

std::string body_text(const py::object& body) {
  return py::isinstance<py::str>(body) ? body.cast<std::string>() : from_python(body).dump();
}

}  // namespace

PYBIND11_MODULE(_parafill, m) {
  m.doc() = "Controllable paragraph infilling";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<train::NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<tokenizer::Vocab>(m, "Vocab")
      .def_static("load", &tokenizer::Vocab::load, py::arg("directory"))
      .def_static(
          "train",
          [](const std::vector<std::string>& texts, std::size_t target_vocab) {
            return tokenizer::train_bpe(texts, tokenizer::TrainConfig{target_vocab});
          },
          py::arg("texts"), py::arg("target_vocab") = 8192)
      .def("save", &tokenizer::Vocab::save, py::arg("directory"))
      .def("encode", &tokenizer::Vocab::encode, py::arg("text"))
      .def("decode", &tokenizer::Vocab::decode, py::arg("ids"), py::arg("skip_specials") = false)
      .def("hash", &tokenizer::Vocab::hash)
      .def("__len__", &tokenizer::Vocab::size);

  m.def(
      "extract_entities",
      [](const std::string& text, const py::object& gazetteer) {
        const auto g = gazetteer.is_none() ? annotate::Gazetteer{} : annotate::Gazetteer::from_json(from_python(gazetteer));
        return to_python(nlohmann::json(annotate::extract_entities(text, g)));
      },
      py::arg("text"), py::arg("gazetteer") = py::none(),
      "Entities by category; `gazetteer` is a dict of name lists per category.");
  m.def(
      "keywords", [](const std::string& text, std::size_t n) { return annotate::textrank_keywords(text, n); },
      py::arg("text"), py::arg("n") = 10);
  m.def(
      "key_sentence", [](const std::string& text) { return annotate::extract_key_sentence(text); }, py::arg("text"));
  m.def(
      "split_paragraphs", [](const std::string& text) { return to_python(nlohmann::json(corpus::split_paragraphs(text).paragraphs)); },
      py::arg("text"));
  m.def(
      "size_class", [](const std::string& text) { return std::string(to_string(classify_size(text::utf8_length(text)))); },
      py::arg("text"));

  m.def(
      "bleu",
      [](const std::string& candidate, const std::vector<std::string>& references, std::size_t max_n) {
        std::vector<metrics::Tokens> refs;
        for (const auto& r : references) refs.push_back(text::normalized_words(r));
        return metrics::bleu(text::normalized_words(candidate), refs, max_n);
      },
      py::arg("candidate"), py::arg("references"), py::arg("max_n") = 4);
  m.def(
      "rouge_n",
      [](const std::string& candidate, const std::string& reference, std::size_t n) {
        const auto r = metrics::rouge_n(text::normalized_words(candidate), text::normalized_words(reference), n);
        return py::dict(py::arg("precision") = r.precision, py::arg("recall") = r.recall, py::arg("f1") = r.f1);
      },
      py::arg("candidate"), py::arg("reference"), py::arg("n") = 1);

  m.def("nucleus_filter", &decode::nucleus_filter, py::arg("probs"), py::arg("top_p"));
  m.def("top_k_filter", &decode::top_k_filter, py::arg("probs"), py::arg("k"));

  py::class_<service::Service>(m, "Service")
      .def(py::init([](const py::object& checkpoint, const py::object& vocab, const std::string& role,
                       const py::object& gazetteer) {
             std::shared_ptr<const pipeline::Engine> engine;
             if (!checkpoint.is_none()) {
               if (vocab.is_none()) throw UsageError("a checkpoint needs its vocabulary directory");
               engine = std::make_shared<const pipeline::Engine>(
                   pipeline::load_engine(checkpoint.cast<std::string>(), vocab.cast<std::string>()));
             }
             const auto g = gazetteer.is_none() ? annotate::Gazetteer{} : annotate::Gazetteer::from_json(from_python(gazetteer));
             const auto r = service::parse_role(role);
             if (r == service::Role::Master) throw UsageError("a master needs compute nodes; run it from the CLI");
             return std::make_unique<service::Service>(service::ServiceConfig{r}, g, engine);
           }),
           py::arg("checkpoint") = py::none(), py::arg("vocab") = py::none(), py::arg("role") = "all",
           py::arg("gazetteer") = py::none())
      .def(
          "generate", [](service::Service& s, const py::object& body) { return reply(s.generate(body_text(body))); },
          py::arg("body"), "(status, reply) for a /api/generate body given as dict or JSON text.")
      .def(
          "ner", [](service::Service& s, const py::object& body) { return reply(s.ner(body_text(body))); }, py::arg("body"))
      .def("health", [](service::Service& s) { return reply(s.health()); });
}
