#include "kgmod/transe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "kgmod/serialize.hpp"

namespace kgmod::transe {

using autodiff::Graph;
using autodiff::NodeId;
using autodiff::Tensor;
using kgstore::Triple;
using kgstore::TripleStore;

Model::Model(std::vector<std::string> entities, std::vector<std::string> relations,
             const Config& cfg)
    : dim_(cfg.dim),
      margin_(cfg.margin),
      norm_order_(cfg.norm_order),
      entities_(std::move(entities)),
      relations_(std::move(relations)) {
  if (dim_ == 0) throw ConfigError("transe dim must be positive");
  if (margin_ <= 0) throw ConfigError("transe margin must be positive");
  if (norm_order_ != 1 && norm_order_ != 2) throw ConfigError("transe norm must be 1 or 2");
  if (entities_.empty() || relations_.empty()) {
    throw ShapeError("transe model needs entities and relations");
  }
  for (std::size_t i = 0; i < entities_.size(); ++i) entity_ids_[entities_[i]] = i;
  for (std::size_t i = 0; i < relations_.size(); ++i) relation_ids_[relations_[i]] = i;
  entity_emb_ = autodiff::Parameter(
      "entity_emb", Tensor::zeros({entities_.size(), dim_}, /*requires_grad=*/true));
  relation_emb_ = autodiff::Parameter(
      "relation_emb", Tensor::zeros({relations_.size(), dim_}, /*requires_grad=*/true));
}

std::size_t Model::entity_id(const std::string& qid) const {
  auto it = entity_ids_.find(qid);
  if (it == entity_ids_.end()) throw LookupError("unknown entity: " + qid);
  return it->second;
}

std::size_t Model::relation_id(const std::string& rel) const {
  auto it = relation_ids_.find(rel);
  if (it == relation_ids_.end()) throw LookupError("unknown relation: " + rel);
  return it->second;
}

double Model::score_ids(std::size_t h, std::size_t r, std::size_t t) const {
  const double* eh = entity_emb_.value.data.data() + h * dim_;
  const double* er = relation_emb_.value.data.data() + r * dim_;
  const double* et = entity_emb_.value.data.data() + t * dim_;
  double s = 0.0;
  if (norm_order_ == 2) {
    for (std::size_t i = 0; i < dim_; ++i) {
      const double d = eh[i] + er[i] - et[i];
      s += d * d;
    }
    return std::sqrt(s);
  }
  for (std::size_t i = 0; i < dim_; ++i) s += std::fabs(eh[i] + er[i] - et[i]);
  return s;
}

double Model::score(const std::string& head, const std::string& relation,
                    const std::string& tail) const {
  return score_ids(entity_id(head), relation_id(relation), entity_id(tail));
}

void Model::normalize_entities() {
  double* data = entity_emb_.value.data.data();
  for (std::size_t e = 0; e < entities_.size(); ++e) {
    double* row = data + e * dim_;
    double norm = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) norm += row[i] * row[i];
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (std::size_t i = 0; i < dim_; ++i) row[i] /= norm;
    }
  }
}

void Model::save(const std::string& path) const {
  ByteWriter w;
  w.bytes("TRE1", 4);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.f64(margin_);
  w.u32(static_cast<std::uint32_t>(norm_order_));
  w.u64(entities_.size());
  w.u64(relations_.size());
  for (const std::string& e : entities_) w.str16(e);
  for (const std::string& r : relations_) w.str16(r);
  w.f64_span(entity_emb_.value.data.data(), entity_emb_.value.size());
  w.f64_span(relation_emb_.value.data.data(), relation_emb_.value.size());
  write_file_bytes(path, w.take());
}

Model Model::load(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  char magic[4];
  r.raw_into(magic, 4);
  if (std::string_view(magic, 4) != "TRE1") {
    throw FormatError("bad magic for transe checkpoint (offset 0)");
  }
  Config cfg;
  cfg.dim = r.u32();
  cfg.margin = r.f64();
  cfg.norm_order = static_cast<int>(r.u32());
  const std::uint64_t ne = r.u64();
  const std::uint64_t nr = r.u64();
  std::vector<std::string> entities, relations;
  entities.reserve(ne);
  relations.reserve(nr);
  for (std::uint64_t i = 0; i < ne; ++i) entities.push_back(r.str16());
  for (std::uint64_t i = 0; i < nr; ++i) relations.push_back(r.str16());
  Model model(std::move(entities), std::move(relations), cfg);
  r.f64_into(model.entity_emb_.value.data.data(), model.entity_emb_.value.size());
  r.f64_into(model.relation_emb_.value.data.data(), model.relation_emb_.value.size());
  r.expect_end("transe checkpoint");
  return model;
}

Triple negative_sample(const TripleStore& store, const Triple& triple, Rng& rng) {
  const auto& entities = store.entities();
  if (entities.size() < 2) throw ShapeError("negative sampling needs >= 2 entities");
  const bool corrupt_head = rng.coin();
  Triple corrupted = triple;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const std::string& candidate = entities[rng.below(entities.size())];
    if (corrupt_head) corrupted.head = candidate;
    else corrupted.tail = candidate;
    if (!store.contains(corrupted)) return corrupted;
  }
  return corrupted;  // tiny vocabularies may leave no clean negative
}

namespace {

// Distance column for a batch: rows of `diff` reduced to one scalar node per
// example. L2 rows go through l2_norm directly; L1 rows sum |x| via
// relu(x) + relu(-x) against a ones column, then take l2_norm of the 1x1
// slice, which is abs of a single nonnegative value, i.e. the value itself.
std::vector<NodeId> row_distances(Graph& g, NodeId diff, std::size_t rows,
                                  int norm_order, NodeId ones_col) {
  std::vector<NodeId> out;
  out.reserve(rows);
  if (norm_order == 2) {
    for (std::size_t i = 0; i < rows; ++i) {
      out.push_back(g.l2_norm(g.slice_rows(diff, i, i + 1)));
    }
    return out;
  }
  const NodeId abs = g.add(g.relu(diff), g.relu(g.scale(diff, -1.0)));
  const NodeId sums = g.matmul(abs, ones_col);  // rows x 1
  for (std::size_t i = 0; i < rows; ++i) {
    out.push_back(g.l2_norm(g.slice_rows(sums, i, i + 1)));
  }
  return out;
}

}  // namespace

Model train(const TripleStore& store, const Config& cfg, std::vector<double>* epoch_loss) {
  if (store.triples().empty()) throw ShapeError("cannot train on an empty triple store");
  if (cfg.lr <= 0) throw ConfigError("transe lr must be positive");
  if (cfg.batch == 0) throw ConfigError("transe batch must be positive");
  if (cfg.negatives == 0) throw ConfigError("transe negatives must be positive");

  Model model(store.entities(), store.relations(), cfg);
  Rng rng(cfg.seed);

  // init uniform in [-6/sqrt(dim), 6/sqrt(dim)], then project to unit norm
  const double bound = 6.0 / std::sqrt(static_cast<double>(cfg.dim));
  for (double& v : model.entity_embeddings().value.data) v = rng.uniform(-bound, bound);
  for (double& v : model.relation_embeddings().value.data) v = rng.uniform(-bound, bound);
  model.normalize_entities();
  {
    double* data = model.relation_embeddings().value.data.data();
    for (std::size_t r = 0; r < store.relations().size(); ++r) {
      double norm = 0.0;
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        norm += data[r * cfg.dim + i] * data[r * cfg.dim + i];
      }
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (std::size_t i = 0; i < cfg.dim; ++i) data[r * cfg.dim + i] /= norm;
      }
    }
  }

  const auto& triples = store.triples();
  std::vector<std::size_t> order(triples.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - start);
      std::vector<std::size_t> hs, rs, ts, nhs, nts;
      for (std::size_t b = 0; b < count; ++b) {
        const Triple& pos = triples[order[start + b]];
        for (std::size_t k = 0; k < cfg.negatives; ++k) {
          const Triple neg = negative_sample(store, pos, rng);
          hs.push_back(model.entity_id(pos.head));
          rs.push_back(model.relation_id(pos.relation));
          ts.push_back(model.entity_id(pos.tail));
          nhs.push_back(model.entity_id(neg.head));
          nts.push_back(model.entity_id(neg.tail));
        }
      }
      const std::size_t rows = hs.size();

      Graph g;
      const NodeId ent = g.leaf(model.entity_embeddings().value);
      const NodeId rel = g.leaf(model.relation_embeddings().value);
      const NodeId ones_col =
          g.leaf(Tensor::matrix(cfg.dim, 1, std::vector<double>(cfg.dim, 1.0)));
      const NodeId margin = g.leaf(Tensor::scalar(model.margin()));

      const NodeId h = g.embedding_lookup(ent, hs);
      const NodeId r = g.embedding_lookup(rel, rs);
      const NodeId t = g.embedding_lookup(ent, ts);
      const NodeId nh = g.embedding_lookup(ent, nhs);
      const NodeId nt = g.embedding_lookup(ent, nts);

      const NodeId pos_diff = g.add(g.add(h, r), g.scale(t, -1.0));
      const NodeId neg_diff = g.add(g.add(nh, r), g.scale(nt, -1.0));
      const auto pos_d = row_distances(g, pos_diff, rows, cfg.norm_order, ones_col);
      const auto neg_d = row_distances(g, neg_diff, rows, cfg.norm_order, ones_col);

      NodeId total = g.leaf(Tensor::scalar(0.0));
      for (std::size_t i = 0; i < rows; ++i) {
        const NodeId hinge =
            g.relu(g.add(g.add(pos_d[i], g.scale(neg_d[i], -1.0)), margin));
        total = g.add(total, hinge);
      }
      const NodeId loss = g.scale(total, 1.0 / static_cast<double>(rows));
      g.backward(loss);

      const double batch_loss = g.value(loss).data[0];
      if (!std::isfinite(batch_loss)) throw NumericError("non-finite transe loss");
      loss_sum += batch_loss * static_cast<double>(rows);
      loss_count += rows;

      model.entity_embeddings().accumulate(g.grad(ent));
      model.relation_embeddings().accumulate(g.grad(rel));
      autodiff::clip_gradients({&model.entity_embeddings(), &model.relation_embeddings()},
                               cfg.grad_clip);
      autodiff::sgd_step({&model.entity_embeddings(), &model.relation_embeddings()}, cfg.lr);
      model.entity_embeddings().clear_grad();
      model.relation_embeddings().clear_grad();
      model.normalize_entities();
    }
    if (epoch_loss) {
      epoch_loss->push_back(loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0);
    }
  }
  return model;
}

namespace {

// rank of the true candidate among all entities by (score, qid); strictly
// better scores and equal scores with lexicographically smaller qid count
// ahead. Known-true candidates other than the target are filtered out.
std::size_t ranked_position(const Model& model, const TripleStore& known, const Triple& query,
                            bool replace_tail) {
  const std::size_t true_id =
      model.entity_id(replace_tail ? query.tail : query.head);
  const double true_score = model.score(query.head, query.relation, query.tail);
  const std::string& true_qid = model.entities()[true_id];
  const std::size_t h = model.entity_id(query.head);
  const std::size_t r = model.relation_id(query.relation);
  const std::size_t t = model.entity_id(query.tail);

  std::size_t rank = 1;
  for (std::size_t e = 0; e < model.entities().size(); ++e) {
    if (e == true_id) continue;
    const std::string& qid = model.entities()[e];
    Triple candidate = query;
    if (replace_tail) candidate.tail = qid;
    else candidate.head = qid;
    if (known.contains(candidate)) continue;  // filtered setting
    const double s = replace_tail ? model.score_ids(h, r, e) : model.score_ids(e, r, t);
    if (s < true_score || (s == true_score && qid < true_qid)) ++rank;
  }
  return rank;
}

}  // namespace

LinkPredictionResult link_prediction(const Model& model, const TripleStore& known,
                                     std::span<const Triple> test) {
  LinkPredictionResult res;
  if (test.empty()) return res;
  std::uint64_t rank_sum = 0;
  std::size_t hits = 0;
  for (const Triple& q : test) {
    for (const bool replace_tail : {true, false}) {
      const std::size_t rank = ranked_position(model, known, q, replace_tail);
      rank_sum += rank;
      if (rank <= 10) ++hits;
      ++res.queries;
    }
  }
  res.mean_rank = static_cast<double>(rank_sum) / static_cast<double>(res.queries);
  res.hits_at_10 = static_cast<double>(hits) / static_cast<double>(res.queries);
  return res;
}

kgstore::EntityEmbeddingTable export_table(const Model& model) {
  kgstore::EntityEmbeddingTable table(model.dim());
  const auto& data = model.entity_embeddings().value.data;
  for (std::size_t e = 0; e < model.entities().size(); ++e) {
    std::vector<double> vec(data.begin() + static_cast<long>(e * model.dim()),
                            data.begin() + static_cast<long>((e + 1) * model.dim()));
    table.put(model.entities()[e], std::move(vec));
  }
  return table;
}

void write_loss_csv(const std::string& path, std::span<const double> epoch_loss) {
  std::ostringstream out;
  out << "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6g\n", i, epoch_loss[i]);
    out << buf;
  }
  write_file_text(path, out.str());
}

namespace {

std::string entity_name(std::size_t i) { return "Q" + std::to_string(1000 + i); }

}  // namespace

kgstore::TripleStore make_synthetic_kg(std::size_t entities, std::size_t relations,
                                       KgFamily family, std::uint64_t seed) {
  if (entities < 2 || relations == 0) {
    throw ConfigError("synthetic kg needs >= 2 entities and >= 1 relation");
  }
  (void)seed;  // structures are deterministic; seed reserved for sampled variants
  TripleStore store;
  switch (family) {
    case KgFamily::chain_offsets: {
      // Relations are constant index offsets, plus one bipartite pairing when
      // five or more are requested; every relation is consistent with a
      // single linear arrangement of the entities, so a translation model can
      // fit held-out edges from the rest.
      static constexpr std::size_t kOffsets[] = {1, 2, 3, 5};
      const std::size_t n_offsets = std::min<std::size_t>(relations, 4);
      for (std::size_t k = 0; k < n_offsets; ++k) {
        const std::size_t off = kOffsets[k];
        for (std::size_t i = 0; i + off < entities; ++i) {
          store.add(Triple{entity_name(i), "P" + std::to_string(k + 1), entity_name(i + off)});
        }
      }
      if (relations >= 5) {
        const std::size_t half = entities / 2;
        for (std::size_t i = 0; i < half && half + i < entities; ++i) {
          store.add(Triple{entity_name(i), "P5", entity_name(half + i)});
        }
      }
      break;
    }
    case KgFamily::tree: {
      for (std::size_t i = 1; i < entities; ++i) {
        store.add(Triple{entity_name(i), "P1", entity_name((i - 1) / 2)});
      }
      break;
    }
    case KgFamily::bipartite: {
      const std::size_t half = entities / 2;
      for (std::size_t r = 0; r < relations; ++r) {
        for (std::size_t i = 0; i < half && half + i < entities; ++i) {
          store.add(Triple{entity_name(i), "P" + std::to_string(r + 1),
                           entity_name(half + (i + r) % half)});
        }
      }
      break;
    }
    case KgFamily::capital_mix: {
      const std::size_t half = entities / 2;
      std::size_t rel = 0;
      auto name = [&] { return "P" + std::to_string(++rel); };
      if (rel < relations) {  // capital-of pairing
        const std::string p = name();
        for (std::size_t i = 0; i < half; ++i) {
          store.add(Triple{entity_name(i), p, entity_name(half + i)});
        }
      }
      if (rel < relations) {  // chain through the lower half
        const std::string p = name();
        for (std::size_t i = 0; i + 1 < half; ++i) {
          store.add(Triple{entity_name(i), p, entity_name(i + 1)});
        }
      }
      if (rel < relations) {  // chain through the upper half
        const std::string p = name();
        for (std::size_t i = 0; i + 1 < half; ++i) {
          store.add(Triple{entity_name(half + i), p, entity_name(half + i + 1)});
        }
      }
      std::size_t diag = 1;
      while (rel < relations) {  // diagonal pairings +d, then -d
        const std::string fwd = name();
        for (std::size_t i = 0; i + diag < half; ++i) {
          store.add(Triple{entity_name(i), fwd, entity_name(half + i + diag)});
        }
        if (rel < relations) {
          const std::string back = name();
          for (std::size_t i = diag; i < half; ++i) {
            store.add(Triple{entity_name(i), back, entity_name(half + i - diag)});
          }
        }
        ++diag;
      }
      break;
    }
  }
  return store;
}

KgSplit split_triples(const kgstore::TripleStore& store, double test_fraction,
                      std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) {
    throw ConfigError("test_fraction must be in [0, 1)");
  }
  std::vector<std::size_t> order(store.triples().size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_test = static_cast<std::size_t>(
      std::floor(test_fraction * static_cast<double>(order.size())));
  KgSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const kgstore::Triple& t = store.triples()[order[i]];
    if (i < order.size() - n_test) split.train.add(t);
    else split.test.push_back(t);
  }
  return split;
}

}  // namespace kgmod::transe
