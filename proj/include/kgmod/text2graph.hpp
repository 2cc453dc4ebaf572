#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kgmod/corpus.hpp"
#include "kgmod/kgstore.hpp"
#include "kgmod/optim.hpp"

namespace kgmod::text2graph {

struct MapperConfig {
  std::size_t buckets = 4096;   // feature-hash buckets
  std::size_t hidden = 128;
  std::size_t window = 20;      // context tokens each side of an entity
  std::size_t context = 512;    // inference chunk length
  std::size_t batch = 32;
  std::size_t epochs = 1;
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double dropout = 0.0;    // hidden-layer dropout during training
  double grad_clip = 0.0;  // global grad-norm cap, 0 = off
  std::uint64_t seed = 42;
};

// One training example: the token window around an entity mention and the
// entity's gold KG vector.
struct SpanExample {
  std::vector<std::string> tokens;
  std::string target_qid;
  std::vector<double> target_vec;
};

// Trainable text -> KG-vector encoder: feature-hashed bag of words, one
// hidden layer, linear output head sized to the embedding table.
class Mapper {
 public:
  Mapper() = default;
  Mapper(const MapperConfig& cfg, std::size_t kg_dim);

  const MapperConfig& config() const { return cfg_; }
  std::size_t kg_dim() const { return kg_dim_; }

  autodiff::Parameter& w_hidden() { return w_hidden_; }
  const autodiff::Parameter& w_hidden() const { return w_hidden_; }
  autodiff::Parameter& b_hidden() { return b_hidden_; }
  const autodiff::Parameter& b_hidden() const { return b_hidden_; }
  autodiff::Parameter& w_out() { return w_out_; }
  const autodiff::Parameter& w_out() const { return w_out_; }
  autodiff::Parameter& b_out() { return b_out_; }
  const autodiff::Parameter& b_out() const { return b_out_; }
  std::vector<autodiff::Parameter*> params();
  std::vector<const autodiff::Parameter*> params() const;

  // Bag-of-hashed-tokens feature row, counts scaled by 1/token_count.
  std::vector<double> features(std::span<const std::string> tokens) const;
  // Deterministic, order-insensitive forward pass.
  std::vector<double> encode(std::span<const std::string> tokens) const;

  // Checkpoint: magic "T2G1", config block, weight tensors in declaration
  // order, f64 little-endian; roundtrips bit-exactly.
  void save(const std::string& path) const;
  static Mapper load(const std::string& path);

 private:
  MapperConfig cfg_;
  std::size_t kg_dim_ = 0;
  autodiff::Parameter w_hidden_, b_hidden_, w_out_, b_out_;
};

// Entity-centered windows: the mention's tokens plus up to `window` context
// tokens on each side, clipped at document bounds. Mentions whose qid has no
// table embedding are skipped and counted.
std::vector<SpanExample> extract_spans(const corpus::AnnotatedDocument& doc,
                                       const kgstore::EntityEmbeddingTable& table,
                                       std::size_t window = 20,
                                       std::size_t* skipped = nullptr);

// AdamW + MSE against gold vectors; per-batch loss trace returned.
std::vector<double> train_mapper(Mapper& mapper, std::span<const SpanExample> examples,
                                 const MapperConfig& cfg);

// Splits the tokenized text into ceil(n / context_len) consecutive chunks and
// predicts one KG vector per chunk.
std::vector<std::vector<double>> map_text(const Mapper& mapper, const std::string& text,
                                          std::size_t context_len);

// Fraction of held-out examples whose gold qid appears among the k nearest
// table entries to the predicted vector.
double linking_eval(const Mapper& mapper, std::span<const SpanExample> heldout,
                    const kgstore::EntityEmbeddingTable& table, std::size_t k);

// Span-example dataset cache, one {"tokens": [...], "qid": ...} per line.
void save_span_cache(const std::string& path, std::span<const SpanExample> examples);
std::vector<SpanExample> load_span_cache(const std::string& path,
                                         const kgstore::EntityEmbeddingTable& table,
                                         std::size_t* skipped = nullptr);

}  // namespace kgmod::text2graph
