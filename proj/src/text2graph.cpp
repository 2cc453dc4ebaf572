#include "kgmod/text2graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "kgmod/rng.hpp"
#include "kgmod/serialize.hpp"
#include "kgmod/tokenize.hpp"

namespace kgmod::text2graph {

using autodiff::Graph;
using autodiff::NodeId;
using autodiff::Tensor;

namespace {
constexpr char kMagic[4] = {'T', '2', 'G', '1'};
}

Mapper::Mapper(const MapperConfig& cfg, std::size_t kg_dim) : cfg_(cfg), kg_dim_(kg_dim) {
  if (cfg.buckets == 0 || cfg.hidden == 0 || kg_dim == 0) {
    throw ConfigError("mapper sizes must be positive");
  }
  Rng rng(cfg.seed);
  auto init = [&](std::vector<std::size_t> shape, double scale) {
    Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    for (double& v : t.data) v = rng.uniform(-scale, scale);
    return t;
  };
  // feature rows are sparse with near-unit norm, so the hidden weights start
  // wide enough to put activations in gelu's responsive range
  const double s1 = 0.3;
  const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  w_hidden_ = autodiff::Parameter("w_hidden", init({cfg.buckets, cfg.hidden}, s1));
  b_hidden_ = autodiff::Parameter("b_hidden", Tensor::zeros({cfg.hidden}, true));
  w_out_ = autodiff::Parameter("w_out", init({cfg.hidden, kg_dim}, s2));
  b_out_ = autodiff::Parameter("b_out", Tensor::zeros({kg_dim}, true));
}

std::vector<autodiff::Parameter*> Mapper::params() {
  return {&w_hidden_, &b_hidden_, &w_out_, &b_out_};
}

std::vector<const autodiff::Parameter*> Mapper::params() const {
  return {&w_hidden_, &b_hidden_, &w_out_, &b_out_};
}

std::vector<double> Mapper::features(std::span<const std::string> tokens) const {
  if (tokens.empty()) throw ShapeError("cannot encode an empty token list");
  std::vector<double> x(cfg_.buckets, 0.0);
  // 1/sqrt(n) keeps the feature norm near 1 for any window or chunk length
  const double w = 1.0 / std::sqrt(static_cast<double>(tokens.size()));
  for (const std::string& tok : tokens) {
    x[fnv1a(tok, cfg_.seed ^ 0x9e3779b97f4a7c15ull) % cfg_.buckets] += w;
  }
  return x;
}

std::vector<double> Mapper::encode(std::span<const std::string> tokens) const {
  const std::vector<double> x = features(tokens);
  std::vector<double> h(cfg_.hidden, 0.0);
  for (std::size_t b = 0; b < cfg_.buckets; ++b) {
    const double xv = x[b];
    if (xv == 0.0) continue;
    const double* row = w_hidden_.value.data.data() + b * cfg_.hidden;
    for (std::size_t j = 0; j < cfg_.hidden; ++j) h[j] += xv * row[j];
  }
  for (std::size_t j = 0; j < cfg_.hidden; ++j) {
    h[j] = autodiff::gelu_scalar(h[j] + b_hidden_.value.data[j]);
  }
  std::vector<double> out(kg_dim_, 0.0);
  for (std::size_t j = 0; j < cfg_.hidden; ++j) {
    const double hv = h[j];
    const double* row = w_out_.value.data.data() + j * kg_dim_;
    for (std::size_t d = 0; d < kg_dim_; ++d) out[d] += hv * row[d];
  }
  for (std::size_t d = 0; d < kg_dim_; ++d) out[d] += b_out_.value.data[d];
  return out;
}

void Mapper::save(const std::string& path) const {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(static_cast<std::uint32_t>(cfg_.buckets));
  w.u32(static_cast<std::uint32_t>(cfg_.hidden));
  w.u32(static_cast<std::uint32_t>(cfg_.window));
  w.u32(static_cast<std::uint32_t>(cfg_.context));
  w.u64(cfg_.seed);
  w.u32(static_cast<std::uint32_t>(kg_dim_));
  for (const autodiff::Parameter* p : params()) {
    w.f64_span(p->value.data.data(), p->value.size());
  }
  write_file_bytes(path, w.take());
}

Mapper Mapper::load(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  char magic[4];
  r.raw_into(magic, 4);
  if (std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw FormatError("bad magic for mapper checkpoint (offset 0)");
  }
  MapperConfig cfg;
  cfg.buckets = r.u32();
  cfg.hidden = r.u32();
  cfg.window = r.u32();
  cfg.context = r.u32();
  cfg.seed = r.u64();
  const std::size_t kg_dim = r.u32();
  Mapper m(cfg, kg_dim);
  for (autodiff::Parameter* p : m.params()) {
    r.f64_into(p->value.data.data(), p->value.size());
  }
  r.expect_end("mapper checkpoint");
  return m;
}

std::vector<SpanExample> extract_spans(const corpus::AnnotatedDocument& doc,
                                       const kgstore::EntityEmbeddingTable& table,
                                       std::size_t window, std::size_t* skipped) {
  const auto tokens = tokenize_with_spans(doc.text);
  std::vector<SpanExample> out;
  std::size_t missing = 0;
  for (const corpus::EntityMention& mention : doc.mentions) {
    if (!table.contains(mention.qid)) {
      ++missing;
      continue;
    }
    const std::vector<double>& gold = table.get(mention.qid);
    for (const auto& [begin, end] : mention.spans) {
      // tokens overlapping the mention's byte span
      std::size_t first = tokens.size(), last = tokens.size();
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i].begin < end && tokens[i].end > begin) {
          if (first == tokens.size()) first = i;
          last = i;
        }
      }
      if (first == tokens.size()) continue;  // span lies entirely in punctuation
      const std::size_t lo = first >= window ? first - window : 0;
      const std::size_t hi = std::min(tokens.size(), last + 1 + window);
      SpanExample ex;
      ex.tokens.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) ex.tokens.push_back(tokens[i].text);
      ex.target_qid = mention.qid;
      ex.target_vec = gold;
      out.push_back(std::move(ex));
    }
  }
  if (skipped) *skipped = missing;
  return out;
}

std::vector<double> train_mapper(Mapper& mapper, std::span<const SpanExample> examples,
                                 const MapperConfig& cfg) {
  if (examples.empty()) throw ShapeError("cannot train mapper on zero examples");
  if (cfg.lr <= 0 || cfg.weight_decay < 0) throw ConfigError("bad mapper lr/weight decay");

  const std::size_t kg_dim = mapper.kg_dim();
  std::vector<double> trace;
  if (cfg.epochs == 0) return trace;

  const std::size_t batches_per_epoch = (examples.size() + cfg.batch - 1) / cfg.batch;
  autodiff::AdamWConfig opt_cfg;
  opt_cfg.base_lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.total_steps = cfg.epochs * batches_per_epoch;
  autodiff::AdamW opt(opt_cfg, mapper.params());

  if (cfg.dropout < 0 || cfg.dropout >= 1) throw ConfigError("mapper dropout must be in [0, 1)");
  Rng rng(cfg.seed ^ 0x5bf03a9eull);
  Rng mask_rng(cfg.seed ^ 0xd70ull);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - start);
      std::vector<double> feats;
      std::vector<double> targets;
      feats.reserve(count * cfg.buckets);
      targets.reserve(count * kg_dim);
      for (std::size_t b = 0; b < count; ++b) {
        const SpanExample& ex = examples[order[start + b]];
        const auto row = mapper.features(ex.tokens);
        feats.insert(feats.end(), row.begin(), row.end());
        targets.insert(targets.end(), ex.target_vec.begin(), ex.target_vec.end());
      }

      Graph g;
      const NodeId x = g.leaf(Tensor::matrix(count, cfg.buckets, std::move(feats)));
      const NodeId w1 = g.leaf(mapper.w_hidden().value);
      const NodeId b1 = g.leaf(mapper.b_hidden().value);
      const NodeId w2 = g.leaf(mapper.w_out().value);
      const NodeId b2 = g.leaf(mapper.b_out().value);
      const NodeId y = g.leaf(Tensor::matrix(count, kg_dim, std::move(targets)));

      NodeId hidden = g.gelu(g.add(g.matmul(x, w1), b1));
      if (cfg.dropout > 0) {
        const double keep = 1.0 - cfg.dropout;
        Tensor mask = Tensor::zeros({count, cfg.hidden});
        for (double& v : mask.data) v = mask_rng.uniform() < keep ? 1.0 / keep : 0.0;
        hidden = g.mul(hidden, g.leaf(std::move(mask)));
      }
      const NodeId pred = g.add(g.matmul(hidden, w2), b2);
      const NodeId loss = g.mse(pred, y);
      g.backward(loss);

      const double batch_loss = g.value(loss).data[0];
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite mapper loss in batch " + std::to_string(trace.size()));
      }
      trace.push_back(batch_loss);

      mapper.w_hidden().accumulate(g.grad(w1));
      mapper.b_hidden().accumulate(g.grad(b1));
      mapper.w_out().accumulate(g.grad(w2));
      mapper.b_out().accumulate(g.grad(b2));
      autodiff::clip_gradients(mapper.params(), cfg.grad_clip);
      opt.step();
      for (autodiff::Parameter* p : mapper.params()) p->clear_grad();
    }
  }
  return trace;
}

std::vector<std::vector<double>> map_text(const Mapper& mapper, const std::string& text,
                                          std::size_t context_len) {
  if (text.empty()) throw ShapeError("cannot map empty text");
  if (context_len == 0) throw ConfigError("context length must be positive");
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw ShapeError("text has no tokens");
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < tokens.size(); start += context_len) {
    const std::size_t end = std::min(tokens.size(), start + context_len);
    out.push_back(mapper.encode(
        std::span<const std::string>(tokens.data() + start, end - start)));
  }
  return out;
}

double linking_eval(const Mapper& mapper, std::span<const SpanExample> heldout,
                    const kgstore::EntityEmbeddingTable& table, std::size_t k) {
  if (heldout.empty()) throw ShapeError("linking_eval needs examples");
  std::size_t hit = 0;
  for (const SpanExample& ex : heldout) {
    const auto pred = mapper.encode(ex.tokens);
    for (const auto& [qid, dist] : table.nearest(pred, k)) {
      if (qid == ex.target_qid) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(heldout.size());
}

void save_span_cache(const std::string& path, std::span<const SpanExample> examples) {
  std::ostringstream out;
  for (const SpanExample& ex : examples) {
    nlohmann::ordered_json j;
    j["tokens"] = ex.tokens;
    j["qid"] = ex.target_qid;
    out << j.dump() << '\n';
  }
  write_file_text(path, out.str());
}

std::vector<SpanExample> load_span_cache(const std::string& path,
                                         const kgstore::EntityEmbeddingTable& table,
                                         std::size_t* skipped) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open span cache: " + path);
  std::vector<SpanExample> out;
  std::string line;
  std::size_t lineno = 0, missing = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      SpanExample ex;
      ex.tokens = j.at("tokens").get<std::vector<std::string>>();
      ex.target_qid = j.at("qid").get<std::string>();
      if (!table.contains(ex.target_qid)) {
        ++missing;
        continue;
      }
      ex.target_vec = table.get(ex.target_qid);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (skipped) *skipped = missing;
  return out;
}

}  // namespace kgmod::text2graph
