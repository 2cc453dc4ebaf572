#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kgmod/kgstore.hpp"
#include "kgmod/optim.hpp"
#include "kgmod/rng.hpp"

namespace kgmod::transe {

struct Config {
  std::size_t dim = 64;
  double margin = 1.0;
  int norm_order = 2;  // 1 or 2
  std::size_t epochs = 100;
  std::size_t batch = 32;
  double lr = 0.01;  // plain SGD, the classic choice for this trainer
  std::size_t negatives = 1;
  double grad_clip = 0.0;  // global grad-norm cap, 0 = off
  std::uint64_t seed = 42;
};

// Translation model: a triple (h, r, t) scores ||e_h + e_r - e_t||_p, lower
// meaning more plausible. Entity embeddings are projected back to unit norm
// after every update.
class Model {
 public:
  Model(std::vector<std::string> entities, std::vector<std::string> relations,
        const Config& cfg);

  std::size_t dim() const { return dim_; }
  double margin() const { return margin_; }
  int norm_order() const { return norm_order_; }
  const std::vector<std::string>& entities() const { return entities_; }
  const std::vector<std::string>& relations() const { return relations_; }

  double score(const std::string& head, const std::string& relation,
               const std::string& tail) const;
  double score_ids(std::size_t h, std::size_t r, std::size_t t) const;

  autodiff::Parameter& entity_embeddings() { return entity_emb_; }
  autodiff::Parameter& relation_embeddings() { return relation_emb_; }
  const autodiff::Parameter& entity_embeddings() const { return entity_emb_; }
  const autodiff::Parameter& relation_embeddings() const { return relation_emb_; }

  std::size_t entity_id(const std::string& qid) const;
  std::size_t relation_id(const std::string& rel) const;

  void normalize_entities();  // project every entity row to unit L2 norm

  // Checkpoint: magic "TRE1", dims/margin/norm, vocab, entity and relation
  // tensors, f64 little-endian.
  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  std::size_t dim_;
  double margin_;
  int norm_order_;
  std::vector<std::string> entities_, relations_;
  std::unordered_map<std::string, std::size_t> entity_ids_, relation_ids_;
  autodiff::Parameter entity_emb_, relation_emb_;
};

// Head-or-tail corruption with filtered resampling: up to 100 redraws avoid
// corrupted triples that are actually true in the store.
kgstore::Triple negative_sample(const kgstore::TripleStore& store,
                                const kgstore::Triple& triple, Rng& rng);

// Minibatch SGD on the margin ranking loss sum(max(0, margin + d(pos) -
// d(neg))), gradients via the autodiff tape, entity renormalization after
// every step. Returns the model and appends one mean-loss value per epoch.
Model train(const kgstore::TripleStore& store, const Config& cfg,
            std::vector<double>* epoch_loss = nullptr);

struct LinkPredictionResult {
  double mean_rank = 0.0;
  double hits_at_10 = 0.0;
  std::size_t queries = 0;
};

// Filtered ranking protocol: for each test triple rank the true tail against
// all entities (head fixed) and symmetrically the true head; candidates that
// form other known-true triples are skipped.
LinkPredictionResult link_prediction(const Model& model, const kgstore::TripleStore& known,
                                     std::span<const kgstore::Triple> test);

kgstore::EntityEmbeddingTable export_table(const Model& model);

void write_loss_csv(const std::string& path, std::span<const double> epoch_loss);

// Synthetic KGs for desk-scale training runs.
enum class KgFamily { chain_offsets, tree, bipartite, capital_mix };

// chain_offsets: relations translate entity i to i + offset_k;
// tree: child -> parent over a binary heap layout;
// bipartite: shifted i -> half + (i + k) pairings;
// capital_mix: two halves with a "capital-of" pairing, a chain inside each
//   half, and diagonal cross pairings; every relation is a near-constant
//   translation, which is what a translation model can fit tightly.
kgstore::TripleStore make_synthetic_kg(std::size_t entities, std::size_t relations,
                                       KgFamily family, std::uint64_t seed);

// Seeded shuffle split; first (1 - test_fraction) of triples become the
// training store.
struct KgSplit {
  kgstore::TripleStore train;
  std::vector<kgstore::Triple> test;
};
KgSplit split_triples(const kgstore::TripleStore& store, double test_fraction,
                      std::uint64_t seed);

}  // namespace kgmod::transe
