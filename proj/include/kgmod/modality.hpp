#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgmod/autodiff.hpp"
#include "kgmod/corpus.hpp"
#include "kgmod/kgstore.hpp"
#include "kgmod/optim.hpp"

namespace kgmod::modality {

// Word-level vocabulary with reserved control ids. The graph-boundary tokens
// have ids here, but their *input* embeddings come from the adapter when a
// modality block is injected.
class Vocab {
 public:
  static constexpr std::size_t kBos = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr std::size_t kUnk = 2;
  static constexpr std::size_t kGraphStart = 3;
  static constexpr std::size_t kGraphEnd = 4;
  static constexpr std::size_t kReserved = 5;

  static Vocab build(std::span<const std::string> texts, std::size_t max_size);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t id(const std::string& tok) const;  // kUnk fallback
  std::vector<std::size_t> encode(const std::string& text) const;
  std::string decode(std::span<const std::size_t> ids) const;

  const std::vector<std::string>& tokens() const { return tokens_; }
  static Vocab from_tokens(std::vector<std::string> tokens);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct LmConfig {
  std::size_t d_model = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 4;
  std::size_t context = 128;
  std::size_t vocab_max = 2000;
  std::size_t epochs = 10;
  std::size_t batch = 8;  // sequences per optimizer step (gradient accumulation)
  double lr = 1e-3;
  double weight_decay = 0.01;
  double dropout = 0.0;    // input and MLP dropout during pretraining
  double grad_clip = 0.0;  // global grad-norm cap, 0 = off
  std::uint64_t seed = 42;
  std::size_t val_every = 10;  // every n-th document goes to the validation split
};

// Small decoder-only transformer (pre-norm, causal, tied output projection).
// Heads use separate per-head projection matrices; the per-head output
// projections sum into the residual stream, which equals the usual
// concat-then-project form.
class ToyLm {
 public:
  ToyLm() = default;
  ToyLm(LmConfig cfg, Vocab vocab);

  const LmConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  std::size_t d_model() const { return cfg_.d_model; }
  bool frozen() const { return frozen_; }
  void freeze();

  struct Block {
    autodiff::Parameter ln1_gain, ln1_bias;
    std::vector<autodiff::Parameter> w_q, w_k, w_v, w_o;  // per head
    autodiff::Parameter ln2_gain, ln2_bias;
    autodiff::Parameter w_up, b_up, w_down, b_down;
  };

  autodiff::Parameter& token_embeddings() { return tok_emb_; }
  const autodiff::Parameter& token_embeddings() const { return tok_emb_; }
  autodiff::Parameter& position_embeddings() { return pos_emb_; }
  const autodiff::Parameter& position_embeddings() const { return pos_emb_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  autodiff::Parameter& final_gain() { return lnf_gain_; }
  const autodiff::Parameter& final_gain() const { return lnf_gain_; }
  autodiff::Parameter& final_bias() { return lnf_bias_; }
  const autodiff::Parameter& final_bias() const { return lnf_bias_; }

  // declaration order, stable; defines checkpoint layout and hashing
  std::vector<autodiff::Parameter*> params();
  std::vector<const autodiff::Parameter*> params() const;
  std::string params_sha256() const;

  // Checkpoint: magic "TLM1", config, vocab, tensors in declaration order,
  // then a SHA-256 trailer over the tensor bytes.
  void save(const std::string& path) const;
  static ToyLm load(const std::string& path);

 private:
  LmConfig cfg_;
  Vocab vocab_;
  autodiff::Parameter tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  autodiff::Parameter lnf_gain_, lnf_bias_;
  bool frozen_ = false;
};

// Single linear KG->LM projection plus the two trainable boundary embeddings.
class AdapterModel {
 public:
  AdapterModel() = default;
  AdapterModel(std::size_t kg_dim, std::size_t d_model, std::uint64_t seed);

  std::size_t kg_dim() const { return kg_dim_; }
  std::size_t d_model() const { return d_model_; }

  autodiff::Parameter& w_adapt() { return w_adapt_; }
  const autodiff::Parameter& w_adapt() const { return w_adapt_; }
  autodiff::Parameter& bias() { return bias_; }
  const autodiff::Parameter& bias() const { return bias_; }
  autodiff::Parameter& e_start() { return e_start_; }
  const autodiff::Parameter& e_start() const { return e_start_; }
  autodiff::Parameter& e_end() { return e_end_; }
  const autodiff::Parameter& e_end() const { return e_end_; }
  std::vector<autodiff::Parameter*> params();
  std::vector<const autodiff::Parameter*> params() const;

  // Checkpoint: magic "ADP1", same conventions as the LM checkpoint.
  void save(const std::string& path) const;
  static AdapterModel load(const std::string& path);

 private:
  std::size_t kg_dim_ = 0, d_model_ = 0;
  autodiff::Parameter w_adapt_, bias_, e_start_, e_end_;
};

using KgVectors = std::vector<std::vector<double>>;

// Input-embedding sequence with the modality block in front:
// [e_start][adapted kg vectors...][e_end][text token embeddings...].
struct InjectedSequence {
  autodiff::Tensor embeddings;  // (n_text + n_kg + 2) x d_model
  std::size_t kg_begin = 0;     // modality block range, including the
  std::size_t kg_end = 0;       // boundary embeddings; text starts at kg_end
};

InjectedSequence inject(const ToyLm& lm, const AdapterModel& adapter, const KgVectors& kg,
                        std::span<const std::size_t> text_tokens);

struct PretrainResult {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;    // per epoch (train value when no val split)
};

// Next-token training of every LM parameter from random init; the returned
// model is frozen.
ToyLm pretrain_toy_lm(std::span<const std::string> texts, const LmConfig& cfg,
                      PretrainResult* trace = nullptr);

struct AdapterTrainConfig {
  double lr = 5e-3;
  double weight_decay = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch = 1;      // documents per optimizer step
  std::size_t max_kg = 16;    // injected vectors per document cap
  double grad_clip = 0.0;     // global grad-norm cap, 0 = off
  std::uint64_t seed = 42;
};

struct AdapterExample {
  corpus::AnnotatedDocument doc;
  KgVectors gold;  // deduplicated by qid, first-appearance order, capped
};

AdapterExample make_adapter_example(const corpus::AnnotatedDocument& doc,
                                    const kgstore::EntityEmbeddingTable& table,
                                    std::size_t max_kg = 16);

// Trains exactly {w_adapt, bias, e_start, e_end} with cross-entropy over text
// positions; the LM hash is verified unchanged. Returns the per-step loss
// trace.
std::vector<double> adapter_train(const ToyLm& lm, AdapterModel& adapter,
                                  std::span<const AdapterExample> dataset,
                                  const AdapterTrainConfig& cfg);

// Gradients of the per-document training loss w.r.t. the four adapter
// tensors, through the whole frozen transformer; same forward as
// adapter_train uses.
std::vector<std::pair<std::string, autodiff::Tensor>> adapter_gradients(
    const ToyLm& lm, const AdapterModel& adapter, const AdapterExample& ex);

enum class GenerateMode { plain, with_kg };

// Greedy decoding; plain mode ignores kg entirely (no modality block).
std::vector<std::size_t> generate(const ToyLm& lm, const AdapterModel* adapter,
                                  const KgVectors& kg,
                                  std::span<const std::size_t> prompt_tokens,
                                  std::size_t max_new, GenerateMode mode);

// Mean next-token cross-entropy, optionally restricted to target tokens lying
// inside entity mention spans. Forward only.
struct CeOptions {
  bool with_kg = false;
  bool entity_tokens_only = false;
};
double document_ce(const ToyLm& lm, const AdapterModel* adapter, const AdapterExample& ex,
                   const CeOptions& opts);

}  // namespace kgmod::modality
