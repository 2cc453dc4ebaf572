#include <doctest.h>

#include <cmath>

#include "kgmod/corpus.hpp"
#include "kgmod/rng.hpp"
#include "kgmod/serialize.hpp"
#include "kgmod/text2graph.hpp"
#include "kgmod/tokenize.hpp"
#include "support/finite_diff.hpp"
#include "support/tmpdir.hpp"
#include "support/world.hpp"

using namespace kgmod;
using corpus::AnnotatedDocument;
using text2graph::Mapper;
using text2graph::MapperConfig;
using text2graph::SpanExample;

namespace {

kgstore::EntityEmbeddingTable random_table(std::size_t entities, std::size_t dim,
                                           std::uint64_t seed) {
  Rng rng(seed);
  kgstore::EntityEmbeddingTable table;
  for (std::size_t i = 0; i < entities; ++i) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    table.put("Q" + std::to_string(i + 1), std::move(v));
  }
  return table;
}

MapperConfig small_config() {
  MapperConfig cfg;
  cfg.buckets = 256;
  cfg.hidden = 16;
  return cfg;
}

}  // namespace

TEST_CASE("extract_spans clips windows at document bounds") {
  kgstore::EntityEmbeddingTable table;
  table.put("Q1", {1.0, 2.0});
  AnnotatedDocument doc;
  doc.doc_id = "d";
  std::string text = "anchor";
  for (int i = 0; i < 30; ++i) text += " w" + std::to_string(i);
  doc.text = text;
  doc.mentions = {{"Q1", {{0, 6}}}};

  const auto spans = text2graph::extract_spans(doc, table, 20);
  REQUIRE(spans.size() == 1);
  CHECK(spans[0].tokens.front() == "anchor");  // no left context to include
  CHECK(spans[0].tokens.size() == 21);         // entity token + 20 right context
  CHECK(spans[0].target_qid == "Q1");
  CHECK(spans[0].target_vec == std::vector<double>{1.0, 2.0});
}

TEST_CASE("extract_spans emits one example per span and skips missing entities") {
  const auto index =
      kgstore::TitleIndex::load(std::string(KGMOD_DATA_DIR) + "/fixtures/patent.titles.tsv");
  const auto source = read_file_text(std::string(KGMOD_DATA_DIR) + "/fixtures/patent-abstract.wiki");
  const auto doc = corpus::annotate("patent-abstract", source, index).doc;

  kgstore::EntityEmbeddingTable table;
  table.put("Q3039740", {0.5, -0.5});
  table.put("Q1459541", {0.25, 0.75});
  std::size_t skipped = 0;
  const auto spans = text2graph::extract_spans(doc, table, 20, &skipped);
  CHECK(spans.size() == 3);  // two mentions of the first qid, one of the second
  CHECK(skipped == 0);
  for (const auto& ex : spans) {
    // window always contains the mention surface
    bool found_united = false;
    for (const auto& tok : ex.tokens) {
      if (tok == "united") found_united = true;
    }
    CHECK(found_united);
  }

  kgstore::EntityEmbeddingTable partial;
  partial.put("Q1459541", {0.25, 0.75});
  skipped = 0;
  const auto fewer = text2graph::extract_spans(doc, partial, 20, &skipped);
  CHECK(fewer.size() == 1);
  CHECK(skipped == 1);

  AnnotatedDocument bare;
  bare.text = "no entities at all";
  CHECK(text2graph::extract_spans(bare, table, 20).empty());
}

TEST_CASE("encode is order-insensitive and zero weights give a zero vector") {
  Mapper mapper(small_config(), 4);
  const std::vector<std::string> toks = {"alpha", "beta", "gamma"};
  const std::vector<std::string> permuted = {"gamma", "alpha", "beta"};
  CHECK(mapper.encode(toks) == mapper.encode(permuted));

  for (autodiff::Parameter* p : mapper.params()) p->value.fill(0.0);
  const auto out = mapper.encode(toks);
  CHECK(out == std::vector<double>(4, 0.0));

  CHECK_THROWS_AS(mapper.encode(std::vector<std::string>{}), ShapeError);
}

TEST_CASE("encode on a fixed seed-42 model matches an independent evaluation") {
  MapperConfig cfg = small_config();
  cfg.seed = 42;
  Mapper mapper(cfg, 3);
  const std::vector<std::string> toks = {"law", "patent", "office", "law"};

  // independent pipeline: rebuild features and run the two layers with plain
  // loops against the raw weight buffers
  std::vector<double> x(cfg.buckets, 0.0);
  for (const auto& tok : toks) {
    x[fnv1a(tok, cfg.seed ^ 0x9e3779b97f4a7c15ull) % cfg.buckets] +=
        1.0 / std::sqrt(static_cast<double>(toks.size()));
  }
  std::vector<double> hidden(cfg.hidden, 0.0);
  for (std::size_t b = 0; b < cfg.buckets; ++b) {
    for (std::size_t j = 0; j < cfg.hidden; ++j) {
      hidden[j] += x[b] * mapper.w_hidden().value.at(b, j);
    }
  }
  std::vector<double> expected(3, 0.0);
  for (std::size_t j = 0; j < cfg.hidden; ++j) {
    const double a = autodiff::gelu_scalar(hidden[j] + mapper.b_hidden().value.data[j]);
    for (std::size_t d = 0; d < 3; ++d) expected[d] += a * mapper.w_out().value.at(j, d);
  }
  for (std::size_t d = 0; d < 3; ++d) expected[d] += mapper.b_out().value.data[d];

  const auto got = mapper.encode(toks);
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(got[d] == doctest::Approx(expected[d]).epsilon(1e-12));
  }
}

TEST_CASE("mapper training gradient matches finite differences on one example") {
  // same two-layer wiring train_mapper builds, checked against the oracle
  MapperConfig cfg = small_config();
  cfg.buckets = 32;
  cfg.hidden = 8;
  Mapper mapper(cfg, 4);
  const std::vector<std::string> toks = {"one", "two", "three"};
  const auto feats = mapper.features(toks);

  using autodiff::Graph;
  using autodiff::Tensor;
  std::vector<Tensor> inputs = {
      Tensor::matrix(1, cfg.buckets, feats),
      mapper.w_hidden().value,
      mapper.b_hidden().value,
      mapper.w_out().value,
      mapper.b_out().value,
      Tensor::matrix(1, 4, {0.3, -0.2, 0.9, 0.1}),
  };
  inputs[0].requires_grad = false;
  inputs[5].requires_grad = false;
  const double err =
      testsupport::max_grad_rel_error(inputs, [](Graph& g, const auto&) {
        const auto h = g.gelu(g.add(g.matmul(0, 1), 2));
        return g.mse(g.add(g.matmul(h, 3), 4), 5);
      });
  CHECK(err < 1e-4);
}

TEST_CASE("training overfits a single example when epochs allow") {
  MapperConfig cfg = small_config();
  cfg.epochs = 300;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  cfg.batch = 1;
  Mapper mapper(cfg, 4);
  std::vector<SpanExample> examples = {
      {{"solo", "entity", "context"}, "Q1", {0.5, -0.25, 0.75, 0.0}}};
  const auto trace = text2graph::train_mapper(mapper, examples, cfg);
  REQUIRE_FALSE(trace.empty());
  CHECK(trace.back() < 1e-3);
}

TEST_CASE("zero epochs leave the model untouched; seeds fix the trace") {
  MapperConfig cfg = small_config();
  cfg.epochs = 0;
  Mapper mapper(cfg, 4);
  const auto before = mapper.w_hidden().value.data;
  std::vector<SpanExample> examples = {{{"a"}, "Q1", {0, 0, 0, 0}}};
  const auto trace = text2graph::train_mapper(mapper, examples, cfg);
  CHECK(trace.empty());
  CHECK(mapper.w_hidden().value.data == before);

  MapperConfig cfg2 = small_config();
  cfg2.epochs = 2;
  const auto table = random_table(6, 4, 8);
  const auto spans = testsupport::make_synthetic_spans(table, 10, 77);
  Mapper m1(cfg2, 4), m2(cfg2, 4);
  const auto t1 = text2graph::train_mapper(m1, spans, cfg2);
  const auto t2 = text2graph::train_mapper(m2, spans, cfg2);
  CHECK(t1 == t2);
  CHECK(m1.w_out().value.data == m2.w_out().value.data);
}

TEST_CASE("map_text chunking follows ceil(n / context)") {
  Mapper mapper(small_config(), 4);

  std::string long_text;
  for (int i = 0; i < 1000; ++i) long_text += "tok" + std::to_string(i) + " ";
  CHECK(text2graph::map_text(mapper, long_text, 512).size() == 2);

  std::string short_text = "just a few tokens here now then done ok yes";
  CHECK(text2graph::map_text(mapper, short_text, 512).size() == 1);

  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.below(900);
    const std::size_t c = 1 + rng.below(300);
    std::string text;
    for (std::size_t i = 0; i < n; ++i) text += "w ";
    CHECK(text2graph::map_text(mapper, text, c).size() == (n + c - 1) / c);
  }

  // chunking is positional: concatenating chunk-aligned texts concatenates
  // the results
  std::string a, b;
  for (int i = 0; i < 8; ++i) a += "alpha" + std::to_string(i) + " ";
  for (int i = 0; i < 8; ++i) b += "beta" + std::to_string(i) + " ";
  const auto va = text2graph::map_text(mapper, a, 8);
  const auto vb = text2graph::map_text(mapper, b, 8);
  auto vab = text2graph::map_text(mapper, a + b, 8);
  REQUIRE(vab.size() == va.size() + vb.size());
  CHECK(vab[0] == va[0]);
  CHECK(vab[1] == vb[0]);

  CHECK_THROWS_AS(text2graph::map_text(mapper, "", 8), ShapeError);
}

TEST_CASE("linking recall: overfit model hits, random model stays near chance") {
  // overfit on one entity's spans -> recall@1 = 1.0 against a 2-entry table
  kgstore::EntityEmbeddingTable tiny;
  tiny.put("Q1", {1.0, 0.0, 0.0, 0.0});
  tiny.put("Q2", {-1.0, 0.0, 0.0, 0.0});
  MapperConfig cfg = small_config();
  cfg.epochs = 200;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  Mapper mapper(cfg, 4);
  std::vector<SpanExample> ex = {{{"q", "one"}, "Q1", tiny.get("Q1")}};
  text2graph::train_mapper(mapper, ex, cfg);
  CHECK(text2graph::linking_eval(mapper, ex, tiny, 1) == doctest::Approx(1.0));

  // untrained model: predictions barely move, so recall@1 behaves like a
  // uniform guess; 3-sigma binomial band around 1/100 over 1000 examples
  const auto table = random_table(100, 8, 5);
  Mapper random_mapper(small_config(), 8);
  const auto spans = testsupport::make_synthetic_spans(table, 10, 6);
  const double recall = text2graph::linking_eval(random_mapper, spans, table, 1);
  const double n = static_cast<double>(spans.size());
  const double sigma = std::sqrt(0.01 * 0.99 / n);
  CHECK(recall <= 0.01 + 3 * sigma + 1e-12);

  // recall@k is nondecreasing in k
  double prev = 0.0;
  for (std::size_t k = 1; k <= 10; k += 3) {
    const double r = text2graph::linking_eval(random_mapper, spans, table, k);
    CHECK(r >= prev - 1e-12);
    prev = r;
  }
}

TEST_CASE("checkpoint roundtrips bit-exactly") {
  testsupport::TempDir tmp("t2g");
  MapperConfig cfg = small_config();
  cfg.seed = 9;
  Mapper mapper(cfg, 4);
  mapper.save(tmp.path("m.t2g"));
  const auto loaded = Mapper::load(tmp.path("m.t2g"));
  CHECK(loaded.config().buckets == cfg.buckets);
  CHECK(loaded.w_hidden().value.data == mapper.w_hidden().value.data);
  loaded.save(tmp.path("m2.t2g"));
  CHECK(read_file_bytes(tmp.path("m.t2g")) == read_file_bytes(tmp.path("m2.t2g")));

  const std::vector<std::string> toks = {"check", "tokens"};
  CHECK(loaded.encode(toks) == mapper.encode(toks));

  auto bytes = read_file_bytes(tmp.path("m.t2g"));
  bytes.resize(bytes.size() / 2);
  write_file_bytes(tmp.path("broken.t2g"), bytes);
  CHECK_THROWS_AS(Mapper::load(tmp.path("broken.t2g")), FormatError);
}

TEST_CASE("dropout and gradient clipping are seeded and optional") {
  const auto table = random_table(6, 4, 8);
  const auto spans = testsupport::make_synthetic_spans(table, 10, 77);

  MapperConfig base = small_config();
  base.epochs = 2;

  // p = 0 must reproduce the no-dropout run bit for bit
  Mapper plain_a(base, 4), plain_b(base, 4);
  MapperConfig zero = base;
  zero.dropout = 0.0;
  const auto ta = text2graph::train_mapper(plain_a, spans, base);
  const auto tb = text2graph::train_mapper(plain_b, spans, zero);
  CHECK(ta == tb);
  CHECK(plain_a.w_out().value.data == plain_b.w_out().value.data);

  // p > 0 changes the run but stays deterministic under the seed
  MapperConfig dropped = base;
  dropped.dropout = 0.5;
  Mapper da(dropped, 4), db(dropped, 4);
  const auto tda = text2graph::train_mapper(da, spans, dropped);
  const auto tdb = text2graph::train_mapper(db, spans, dropped);
  CHECK(tda == tdb);
  CHECK(tda != ta);

  // a tiny clip bound must alter the trajectory
  MapperConfig clipped = base;
  clipped.grad_clip = 1e-4;
  Mapper ca(clipped, 4);
  const auto tca = text2graph::train_mapper(ca, spans, clipped);
  CHECK(tca != ta);
  CHECK(ca.w_out().value.data != plain_a.w_out().value.data);
}

TEST_CASE("span cache roundtrips through jsonl") {
  testsupport::TempDir tmp("cache");
  const auto table = random_table(4, 4, 11);
  const auto spans = testsupport::make_synthetic_spans(table, 3, 12);
  text2graph::save_span_cache(tmp.path("spans.jsonl"), spans);
  std::size_t skipped = 0;
  const auto loaded = text2graph::load_span_cache(tmp.path("spans.jsonl"), table, &skipped);
  REQUIRE(loaded.size() == spans.size());
  CHECK(skipped == 0);
  CHECK(loaded[0].tokens == spans[0].tokens);
  CHECK(loaded[0].target_qid == spans[0].target_qid);
  CHECK(loaded[0].target_vec == spans[0].target_vec);
}
