// Python bindings for the main pipeline operations: corpus annotation,
// embedding store, translation-embedding training, the text-to-KG mapper,
// the frozen LM + adapter, and the statement-judging harness.

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "kgmod/cli.hpp"
#include "kgmod/corpus.hpp"
#include "kgmod/evalharness.hpp"
#include "kgmod/kgstore.hpp"
#include "kgmod/modality.hpp"
#include "kgmod/rng.hpp"
#include "kgmod/selftest.hpp"
#include "kgmod/text2graph.hpp"
#include "kgmod/tokenize.hpp"
#include "kgmod/transe.hpp"

#include <sstream>

namespace py = pybind11;
using namespace kgmod;

namespace {

transe::KgFamily family_from(const std::string& name) {
  if (name == "chain_offsets") return transe::KgFamily::chain_offsets;
  if (name == "tree") return transe::KgFamily::tree;
  if (name == "bipartite") return transe::KgFamily::bipartite;
  if (name == "capital_mix") return transe::KgFamily::capital_mix;
  throw ConfigError("unknown kg family: " + name);
}

py::dict report_to_dict(const evalharness::EvalReport& r) {
  py::dict d;
  d["mode"] = r.mode;
  d["items"] = r.items;
  py::dict topics;
  for (const auto& [topic, acc] : r.topic_accuracy) topics[py::str(topic)] = acc;
  d["topic_accuracy"] = topics;
  d["average"] = r.average;
  d["unparsable"] = r.unparsable;
  d["failures"] = r.failures;
  d["kg_vectors_used"] = r.kg_vectors_used;
  return d;
}

}  // namespace

PYBIND11_MODULE(_kgmod, m) {
  m.doc() = "KG-embedding modality pipeline: annotate wikitext, train translation "
            "embeddings, map text into the KG space, and inject it into a frozen toy LM";

  py::register_exception<ConfigError>(m, "KgmodConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "KgmodFormatError", PyExc_ValueError);
  py::register_exception<LookupError>(m, "KgmodLookupError", PyExc_KeyError);
  py::register_exception<NumericError>(m, "KgmodNumericError", PyExc_ArithmeticError);

  m.def("tokenize", [](const std::string& text) { return tokenize(text); }, py::arg("text"));
  m.def("stage_seed", &stage_seed, py::arg("global_seed"), py::arg("stage"));

  // corpus -------------------------------------------------------------
  py::class_<corpus::WikiLink>(m, "WikiLink")
      .def_readonly("target_title", &corpus::WikiLink::target_title)
      .def_readonly("anchor_text", &corpus::WikiLink::anchor_text)
      .def_readonly("begin", &corpus::WikiLink::begin)
      .def_readonly("end", &corpus::WikiLink::end);

  py::class_<corpus::ParseResult>(m, "ParseResult")
      .def_readonly("text", &corpus::ParseResult::text)
      .def_readonly("links", &corpus::ParseResult::links)
      .def_readonly("warnings", &corpus::ParseResult::warnings)
      .def_readonly("malformed", &corpus::ParseResult::malformed);

  m.def("parse_wikitext",
        [](const std::string& source) { return corpus::parse_wikitext(source); },
        py::arg("source"));

  py::class_<kgstore::TitleIndex>(m, "TitleIndex")
      .def(py::init<>())
      .def("add_title", &kgstore::TitleIndex::add_title)
      .def("add_redirect", &kgstore::TitleIndex::add_redirect)
      .def("resolve",
           [](const kgstore::TitleIndex& idx, const std::string& title) -> py::object {
             const auto qid = idx.resolve(title);
             return qid ? py::cast(*qid) : py::none();
           })
      .def("__len__", &kgstore::TitleIndex::size)
      .def_static("load", &kgstore::TitleIndex::load)
      .def("save", &kgstore::TitleIndex::save);

  py::class_<corpus::EntityMention>(m, "EntityMention")
      .def_readonly("qid", &corpus::EntityMention::qid)
      .def_readonly("spans", &corpus::EntityMention::spans);

  py::class_<corpus::AnnotatedDocument>(m, "AnnotatedDocument")
      .def_readonly("doc_id", &corpus::AnnotatedDocument::doc_id)
      .def_readonly("text", &corpus::AnnotatedDocument::text)
      .def_readonly("mentions", &corpus::AnnotatedDocument::mentions)
      .def("to_json", &corpus::to_json_line)
      .def_static("from_json", &corpus::from_json_line);

  m.def("annotate",
        [](const std::string& doc_id, const std::string& source,
           const kgstore::TitleIndex& index) {
          auto res = corpus::annotate(doc_id, source, index);
          return py::make_tuple(res.doc, res.warnings, res.dropped_links);
        },
        py::arg("doc_id"), py::arg("source"), py::arg("index"),
        "returns (document, warnings, dropped_link_count)");

  m.def("corpus_stats", [](const std::vector<corpus::AnnotatedDocument>& docs) {
    const auto s = corpus::corpus_stats(docs);
    py::dict d;
    d["num_texts"] = s.num_texts;
    auto put = [&](const char* key, const std::optional<std::uint64_t>& v) {
      d[key] = v ? py::cast(*v) : py::object(py::none());
    };
    put("words_avg", s.words_avg);
    put("words_max", s.words_max);
    put("words_min", s.words_min);
    put("entities_avg", s.entities_avg);
    put("entities_max", s.entities_max);
    put("entities_min", s.entities_min);
    return d;
  });
  m.def("load_annotated_jsonl", &corpus::load_jsonl, py::arg("path"));
  m.def("save_annotated_jsonl", &corpus::save_jsonl, py::arg("path"), py::arg("docs"));

  // kgstore ------------------------------------------------------------
  py::class_<kgstore::EntityEmbeddingTable>(m, "EntityEmbeddingTable")
      .def(py::init<>())
      .def("put", &kgstore::EntityEmbeddingTable::put)
      .def("get", &kgstore::EntityEmbeddingTable::get)
      .def("contains", &kgstore::EntityEmbeddingTable::contains)
      .def("nearest", &kgstore::EntityEmbeddingTable::nearest, py::arg("query"),
           py::arg("k"))
      .def_property_readonly("dim", &kgstore::EntityEmbeddingTable::dim)
      .def("__len__", &kgstore::EntityEmbeddingTable::size)
      .def("save", &kgstore::EntityEmbeddingTable::save)
      .def_static("load", &kgstore::EntityEmbeddingTable::load);

  py::class_<kgstore::TripleStore>(m, "TripleStore")
      .def(py::init<>())
      .def("add",
           [](kgstore::TripleStore& s, const std::string& h, const std::string& r,
              const std::string& t) { s.add(kgstore::Triple{h, r, t}); })
      .def("contains",
           [](const kgstore::TripleStore& s, const std::string& h, const std::string& r,
              const std::string& t) { return s.contains(kgstore::Triple{h, r, t}); })
      .def("triples",
           [](const kgstore::TripleStore& s) {
             std::vector<std::tuple<std::string, std::string, std::string>> out;
             for (const auto& t : s.triples()) out.emplace_back(t.head, t.relation, t.tail);
             return out;
           })
      .def("entities", &kgstore::TripleStore::entities)
      .def("relations", &kgstore::TripleStore::relations)
      .def("__len__", [](const kgstore::TripleStore& s) { return s.triples().size(); })
      .def("save", &kgstore::TripleStore::save)
      .def_static("load", &kgstore::TripleStore::load);

  // transe ---------------------------------------------------------------
  py::class_<transe::Model>(m, "TranseModel")
      .def("score", &transe::Model::score, py::arg("head"), py::arg("relation"),
           py::arg("tail"))
      .def_property_readonly("dim", &transe::Model::dim)
      .def_property_readonly("entities", &transe::Model::entities)
      .def_property_readonly("relations", &transe::Model::relations)
      .def("save", &transe::Model::save)
      .def_static("load", &transe::Model::load);

  m.def("make_synthetic_kg",
        [](std::size_t entities, std::size_t relations, const std::string& family,
           std::uint64_t seed) {
          return transe::make_synthetic_kg(entities, relations, family_from(family), seed);
        },
        py::arg("entities") = 50, py::arg("relations") = 5,
        py::arg("family") = "capital_mix", py::arg("seed") = 42);

  m.def("split_triples",
        [](const kgstore::TripleStore& store, double test_fraction, std::uint64_t seed) {
          auto split = transe::split_triples(store, test_fraction, seed);
          std::vector<std::tuple<std::string, std::string, std::string>> test;
          for (const auto& t : split.test) test.emplace_back(t.head, t.relation, t.tail);
          return py::make_tuple(std::move(split.train), std::move(test));
        },
        py::arg("store"), py::arg("test_fraction") = 0.2, py::arg("seed") = 42);

  m.def("train_transe",
        [](const kgstore::TripleStore& store, std::size_t dim, double margin,
           int norm_order, std::size_t epochs, std::size_t batch, double lr,
           std::size_t negatives, std::uint64_t seed) {
          transe::Config cfg;
          cfg.dim = dim;
          cfg.margin = margin;
          cfg.norm_order = norm_order;
          cfg.epochs = epochs;
          cfg.batch = batch;
          cfg.lr = lr;
          cfg.negatives = negatives;
          cfg.seed = seed;
          std::vector<double> trace;
          auto model = transe::train(store, cfg, &trace);
          return py::make_tuple(std::move(model), std::move(trace));
        },
        py::arg("store"), py::arg("dim") = 64, py::arg("margin") = 1.0,
        py::arg("norm_order") = 2, py::arg("epochs") = 100, py::arg("batch") = 32,
        py::arg("lr") = 0.01, py::arg("negatives") = 1, py::arg("seed") = 42,
        "returns (model, per-epoch loss trace)");

  m.def("link_prediction",
        [](const transe::Model& model, const kgstore::TripleStore& known,
           const std::vector<std::tuple<std::string, std::string, std::string>>& test) {
          std::vector<kgstore::Triple> triples;
          for (const auto& [h, r, t] : test) triples.push_back(kgstore::Triple{h, r, t});
          const auto res = transe::link_prediction(model, known, triples);
          py::dict d;
          d["mean_rank"] = res.mean_rank;
          d["hits_at_10"] = res.hits_at_10;
          d["queries"] = res.queries;
          return d;
        },
        py::arg("model"), py::arg("known"), py::arg("test"));

  m.def("export_table", &transe::export_table, py::arg("model"));

  // text2graph -----------------------------------------------------------
  py::class_<text2graph::SpanExample>(m, "SpanExample")
      .def(py::init([](std::vector<std::string> tokens, std::string qid,
                       std::vector<double> vec) {
             return text2graph::SpanExample{std::move(tokens), std::move(qid),
                                            std::move(vec)};
           }),
           py::arg("tokens"), py::arg("qid"), py::arg("target_vec"))
      .def_readonly("tokens", &text2graph::SpanExample::tokens)
      .def_readonly("qid", &text2graph::SpanExample::target_qid)
      .def_readonly("target_vec", &text2graph::SpanExample::target_vec);

  py::class_<text2graph::Mapper>(m, "Mapper")
      .def(py::init([](std::size_t kg_dim, std::size_t buckets, std::size_t hidden,
                       std::size_t window, std::size_t context, std::uint64_t seed) {
             text2graph::MapperConfig cfg;
             cfg.buckets = buckets;
             cfg.hidden = hidden;
             cfg.window = window;
             cfg.context = context;
             cfg.seed = seed;
             return text2graph::Mapper(cfg, kg_dim);
           }),
           py::arg("kg_dim"), py::arg("buckets") = 4096, py::arg("hidden") = 128,
           py::arg("window") = 20, py::arg("context") = 512, py::arg("seed") = 42)
      .def("encode",
           [](const text2graph::Mapper& mapper, const std::vector<std::string>& tokens) {
             return mapper.encode(tokens);
           })
      .def_property_readonly("kg_dim", &text2graph::Mapper::kg_dim)
      .def("save", &text2graph::Mapper::save)
      .def_static("load", &text2graph::Mapper::load);

  m.def("extract_spans",
        [](const corpus::AnnotatedDocument& doc, const kgstore::EntityEmbeddingTable& table,
           std::size_t window) {
          std::size_t skipped = 0;
          auto spans = text2graph::extract_spans(doc, table, window, &skipped);
          return py::make_tuple(std::move(spans), skipped);
        },
        py::arg("doc"), py::arg("table"), py::arg("window") = 20);

  m.def("train_mapper",
        [](text2graph::Mapper& mapper, const std::vector<text2graph::SpanExample>& examples,
           std::size_t epochs, std::size_t batch, double lr, double weight_decay,
           std::uint64_t seed) {
          text2graph::MapperConfig cfg = mapper.config();
          cfg.epochs = epochs;
          cfg.batch = batch;
          cfg.lr = lr;
          cfg.weight_decay = weight_decay;
          cfg.seed = seed;
          return text2graph::train_mapper(mapper, examples, cfg);
        },
        py::arg("mapper"), py::arg("examples"), py::arg("epochs") = 1,
        py::arg("batch") = 32, py::arg("lr") = 1e-4, py::arg("weight_decay") = 1e-3,
        py::arg("seed") = 42, "returns the per-batch mse trace");

  m.def("map_text",
        [](const text2graph::Mapper& mapper, const std::string& text,
           std::size_t context_len) {
          return text2graph::map_text(mapper, text, context_len);
        },
        py::arg("mapper"), py::arg("text"), py::arg("context_len") = 512);

  m.def("linking_eval",
        [](const text2graph::Mapper& mapper,
           const std::vector<text2graph::SpanExample>& heldout,
           const kgstore::EntityEmbeddingTable& table, std::size_t k) {
          return text2graph::linking_eval(mapper, heldout, table, k);
        },
        py::arg("mapper"), py::arg("heldout"), py::arg("table"), py::arg("k") = 1);

  // modality ---------------------------------------------------------------
  py::class_<modality::ToyLm>(m, "ToyLm")
      .def_property_readonly("frozen", &modality::ToyLm::frozen)
      .def_property_readonly("d_model", &modality::ToyLm::d_model)
      .def_property_readonly("vocab_size",
                             [](const modality::ToyLm& lm) { return lm.vocab().size(); })
      .def("encode",
           [](const modality::ToyLm& lm, const std::string& text) {
             std::vector<std::size_t> ids = {modality::Vocab::kBos};
             for (auto id : lm.vocab().encode(text)) ids.push_back(id);
             return ids;
           })
      .def("decode",
           [](const modality::ToyLm& lm, const std::vector<std::size_t>& ids) {
             return lm.vocab().decode(ids);
           })
      .def("params_sha256", &modality::ToyLm::params_sha256)
      .def("save", &modality::ToyLm::save)
      .def_static("load", &modality::ToyLm::load);

  m.def("pretrain_toy_lm",
        [](const std::vector<std::string>& texts, std::size_t d_model, std::size_t blocks,
           std::size_t heads, std::size_t context, std::size_t vocab_max,
           std::size_t epochs, std::size_t batch, double lr, double weight_decay,
           std::uint64_t seed) {
          modality::LmConfig cfg;
          cfg.d_model = d_model;
          cfg.n_blocks = blocks;
          cfg.n_heads = heads;
          cfg.context = context;
          cfg.vocab_max = vocab_max;
          cfg.epochs = epochs;
          cfg.batch = batch;
          cfg.lr = lr;
          cfg.weight_decay = weight_decay;
          cfg.seed = seed;
          modality::PretrainResult trace;
          auto lm = modality::pretrain_toy_lm(texts, cfg, &trace);
          return py::make_tuple(std::move(lm),
                                py::make_tuple(trace.train_loss, trace.val_loss));
        },
        py::arg("texts"), py::arg("d_model") = 64, py::arg("blocks") = 2,
        py::arg("heads") = 4, py::arg("context") = 128, py::arg("vocab_max") = 2000,
        py::arg("epochs") = 10, py::arg("batch") = 8, py::arg("lr") = 1e-3,
        py::arg("weight_decay") = 0.01, py::arg("seed") = 42);

  py::class_<modality::AdapterModel>(m, "AdapterModel")
      .def(py::init<std::size_t, std::size_t, std::uint64_t>(), py::arg("kg_dim"),
           py::arg("d_model"), py::arg("seed") = 42)
      .def_property_readonly("kg_dim", &modality::AdapterModel::kg_dim)
      .def_property_readonly("d_model", &modality::AdapterModel::d_model)
      .def("save", &modality::AdapterModel::save)
      .def_static("load", &modality::AdapterModel::load);

  m.def("inject",
        [](const modality::ToyLm& lm, const modality::AdapterModel& adapter,
           const modality::KgVectors& kg, const std::vector<std::size_t>& text_tokens) {
          const auto seq = modality::inject(lm, adapter, kg, text_tokens);
          py::dict d;
          d["rows"] = seq.embeddings.shape[0];
          d["cols"] = seq.embeddings.shape[1];
          d["kg_begin"] = seq.kg_begin;
          d["kg_end"] = seq.kg_end;
          return d;
        },
        py::arg("lm"), py::arg("adapter"), py::arg("kg"), py::arg("text_tokens"));

  py::class_<modality::AdapterExample>(m, "AdapterExample")
      .def_readonly("doc", &modality::AdapterExample::doc)
      .def_readonly("gold", &modality::AdapterExample::gold);
  m.def("make_adapter_example", &modality::make_adapter_example, py::arg("doc"),
        py::arg("table"), py::arg("max_kg") = 16);

  m.def("adapter_train",
        [](const modality::ToyLm& lm, modality::AdapterModel& adapter,
           const std::vector<modality::AdapterExample>& dataset, double lr,
           double weight_decay, std::size_t epochs, std::size_t batch, std::size_t max_kg,
           std::uint64_t seed) {
          modality::AdapterTrainConfig cfg;
          cfg.lr = lr;
          cfg.weight_decay = weight_decay;
          cfg.epochs = epochs;
          cfg.batch = batch;
          cfg.max_kg = max_kg;
          cfg.seed = seed;
          return modality::adapter_train(lm, adapter, dataset, cfg);
        },
        py::arg("lm"), py::arg("adapter"), py::arg("dataset"), py::arg("lr") = 5e-3,
        py::arg("weight_decay") = 1e-3, py::arg("epochs") = 1, py::arg("batch") = 1,
        py::arg("max_kg") = 16, py::arg("seed") = 42);

  m.def("generate",
        [](const modality::ToyLm& lm, const modality::AdapterModel* adapter,
           const modality::KgVectors& kg, const std::string& prompt, std::size_t max_new,
           const std::string& mode) {
          std::vector<std::size_t> ids = {modality::Vocab::kBos};
          for (auto id : lm.vocab().encode(prompt)) ids.push_back(id);
          const auto out = modality::generate(
              lm, adapter, kg, ids, max_new,
              mode == "with_kg" ? modality::GenerateMode::with_kg
                                : modality::GenerateMode::plain);
          return lm.vocab().decode(out);
        },
        py::arg("lm"), py::arg("adapter") = nullptr,
        py::arg("kg") = modality::KgVectors{}, py::arg("prompt") = std::string(),
        py::arg("max_new") = 32, py::arg("mode") = "plain");

  m.def("document_ce",
        [](const modality::ToyLm& lm, const modality::AdapterModel* adapter,
           const modality::AdapterExample& ex, bool with_kg, bool entity_tokens_only) {
          modality::CeOptions opts;
          opts.with_kg = with_kg;
          opts.entity_tokens_only = entity_tokens_only;
          return modality::document_ce(lm, adapter, ex, opts);
        },
        py::arg("lm"), py::arg("adapter"), py::arg("example"), py::arg("with_kg") = false,
        py::arg("entity_tokens_only") = false);

  // evalharness --------------------------------------------------------
  m.def("prompt_preamble", [](const std::string& name) {
    return evalharness::PromptTemplate::by_name(name).preamble;
  });
  m.def("build_prompt",
        [](const std::string& template_name, const std::string& statement) {
          return evalharness::build_prompt(
              evalharness::PromptTemplate::by_name(template_name), statement);
        },
        py::arg("template_name"), py::arg("statement"));
  m.def("parse_verdict",
        [](const std::string& generation, const std::string& template_name) {
          switch (evalharness::parse_verdict(
              generation, evalharness::PromptTemplate::by_name(template_name))) {
            case evalharness::Verdict::positive: return "positive";
            case evalharness::Verdict::negative: return "negative";
            default: return "unparsable";
          }
        },
        py::arg("generation"), py::arg("template_name"));
  m.def("judge",
        [](const py::function& model_fn,
           const std::vector<std::tuple<std::string, bool, std::string>>& items,
           const std::string& template_name, const py::object& kg_provider) {
          std::vector<evalharness::EvalItem> eval_items;
          for (const auto& [statement, gold, topic] : items) {
            eval_items.push_back({statement, gold, topic});
          }
          evalharness::ModelFn fn = [&](const std::string& prompt,
                                        const std::vector<std::vector<double>>& kg) {
            return model_fn(prompt, kg).cast<std::string>();
          };
          evalharness::KgProvider provider;
          if (!kg_provider.is_none()) {
            provider = [&](const std::string& statement) {
              return kg_provider(statement).cast<std::vector<std::vector<double>>>();
            };
          }
          const auto report = evalharness::judge(
              fn, eval_items, evalharness::PromptTemplate::by_name(template_name),
              kg_provider.is_none() ? nullptr : &provider);
          return report_to_dict(report);
        },
        py::arg("model_fn"), py::arg("items"), py::arg("template_name"),
        py::arg("kg_provider") = py::none(),
        "items are (statement, gold_label, topic) tuples; model_fn(prompt, kg) -> text");
  m.def("load_truefalse", &evalharness::load_truefalse, py::arg("path"));
  m.def("load_fever",
        [](const std::string& path) {
          std::size_t skipped = 0;
          const auto items = evalharness::load_fever(path, &skipped);
          std::vector<std::tuple<std::string, bool, std::string>> out;
          for (const auto& item : items) {
            out.emplace_back(item.statement, item.gold, item.topic);
          }
          return py::make_tuple(out, skipped);
        },
        py::arg("path"));

  py::class_<evalharness::EvalItem>(m, "EvalItem")
      .def_readonly("statement", &evalharness::EvalItem::statement)
      .def_readonly("gold", &evalharness::EvalItem::gold)
      .def_readonly("topic", &evalharness::EvalItem::topic);

  // cli ------------------------------------------------------------------
  m.def("cli_run",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          const int code = cli::run(args, out, err);
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "returns (exit_code, stdout, stderr)");

  m.attr("TRUEFALSE_PREAMBLE_SHA256") = selftest::kTrueFalsePreambleSha256;
  m.attr("FEVER_PREAMBLE_SHA256") = selftest::kFeverPreambleSha256;
  m.attr("__version__") = "0.1.0";
}
