#include "kgmod/modality.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "kgmod/rng.hpp"
#include "kgmod/serialize.hpp"
#include "kgmod/sha256.hpp"
#include "kgmod/tokenize.hpp"

namespace kgmod::modality {

using autodiff::Graph;
using autodiff::NodeId;
using autodiff::Parameter;
using autodiff::Tensor;

// ---------------------------------------------------------------------------
// Vocab

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = i;
  return v;
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t max_size) {
  if (max_size < kReserved + 1) throw ConfigError("vocab max_size too small");
  std::map<std::string, std::size_t> freq;
  for (const std::string& text : texts) {
    for (const std::string& tok : tokenize(text)) ++freq[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens = {"<bos>", "<eos>", "<unk>", "<graph_start>",
                                     "<graph_end>"};
  for (const auto& [tok, count] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(tok);
  }
  return from_tokens(std::move(tokens));
}

std::size_t Vocab::id(const std::string& tok) const {
  auto it = index_.find(tok);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocab::encode(const std::string& text) const {
  std::vector<std::size_t> out;
  for (const std::string& tok : tokenize(text)) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(std::span<const std::size_t> ids) const {
  std::string out;
  for (std::size_t id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ToyLm

ToyLm::ToyLm(LmConfig cfg, Vocab vocab) : cfg_(cfg), vocab_(std::move(vocab)) {
  if (cfg_.d_model == 0 || cfg_.n_blocks == 0 || cfg_.n_heads == 0 || cfg_.context == 0) {
    throw ConfigError("lm sizes must be positive");
  }
  if (cfg_.d_model % cfg_.n_heads != 0) {
    throw ConfigError("lm d_model must be divisible by n_heads");
  }
  const std::size_t d = cfg_.d_model;
  const std::size_t dh = d / cfg_.n_heads;
  Rng rng(cfg_.seed);
  auto normal_init = [&](std::vector<std::size_t> shape, double scale) {
    Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
  };
  auto ones = [&](std::size_t n) {
    Tensor t = Tensor::zeros({n}, /*requires_grad=*/true);
    t.fill(1.0);
    return t;
  };
  const double s = 0.08;

  tok_emb_ = Parameter("tok_emb", normal_init({vocab_.size(), d}, s));
  pos_emb_ = Parameter("pos_emb", normal_init({cfg_.context, d}, s));
  blocks_.resize(cfg_.n_blocks);
  for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
    Block& blk = blocks_[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    blk.ln1_gain = Parameter(prefix + "ln1_gain", ones(d));
    blk.ln1_bias = Parameter(prefix + "ln1_bias", Tensor::zeros({d}, true));
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
      const std::string hp = prefix + "h" + std::to_string(h) + ".";
      blk.w_q.push_back(Parameter(hp + "w_q", normal_init({d, dh}, s)));
      blk.w_k.push_back(Parameter(hp + "w_k", normal_init({d, dh}, s)));
      blk.w_v.push_back(Parameter(hp + "w_v", normal_init({d, dh}, s)));
      blk.w_o.push_back(Parameter(hp + "w_o", normal_init({dh, d}, s)));
    }
    blk.ln2_gain = Parameter(prefix + "ln2_gain", ones(d));
    blk.ln2_bias = Parameter(prefix + "ln2_bias", Tensor::zeros({d}, true));
    blk.w_up = Parameter(prefix + "w_up", normal_init({d, 4 * d}, s));
    blk.b_up = Parameter(prefix + "b_up", Tensor::zeros({4 * d}, true));
    blk.w_down = Parameter(prefix + "w_down", normal_init({4 * d, d}, s));
    blk.b_down = Parameter(prefix + "b_down", Tensor::zeros({d}, true));
  }
  lnf_gain_ = Parameter("lnf_gain", ones(d));
  lnf_bias_ = Parameter("lnf_bias", Tensor::zeros({d}, true));
}

std::vector<Parameter*> ToyLm::params() {
  std::vector<Parameter*> out = {&tok_emb_, &pos_emb_};
  for (Block& b : blocks_) {
    out.push_back(&b.ln1_gain);
    out.push_back(&b.ln1_bias);
    for (auto& p : b.w_q) out.push_back(&p);
    for (auto& p : b.w_k) out.push_back(&p);
    for (auto& p : b.w_v) out.push_back(&p);
    for (auto& p : b.w_o) out.push_back(&p);
    out.push_back(&b.ln2_gain);
    out.push_back(&b.ln2_bias);
    out.push_back(&b.w_up);
    out.push_back(&b.b_up);
    out.push_back(&b.w_down);
    out.push_back(&b.b_down);
  }
  out.push_back(&lnf_gain_);
  out.push_back(&lnf_bias_);
  return out;
}

std::vector<const Parameter*> ToyLm::params() const {
  auto mutable_params = const_cast<ToyLm*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

void ToyLm::freeze() {
  for (Parameter* p : params()) p->trainable = false;
  frozen_ = true;
}

namespace {

std::vector<std::uint8_t> tensor_section(const std::vector<const Parameter*>& params) {
  ByteWriter w;
  for (const Parameter* p : params) w.f64_span(p->value.data.data(), p->value.size());
  return w.take();
}

}  // namespace

std::string ToyLm::params_sha256() const {
  const auto bytes = tensor_section(params());
  return sha256_hex(bytes);
}

void ToyLm::save(const std::string& path) const {
  ByteWriter w;
  w.bytes("TLM1", 4);
  w.u32(static_cast<std::uint32_t>(cfg_.d_model));
  w.u32(static_cast<std::uint32_t>(cfg_.n_blocks));
  w.u32(static_cast<std::uint32_t>(cfg_.n_heads));
  w.u32(static_cast<std::uint32_t>(cfg_.context));
  w.u32(static_cast<std::uint32_t>(cfg_.vocab_max));
  w.u32(static_cast<std::uint32_t>(cfg_.epochs));
  w.u32(static_cast<std::uint32_t>(cfg_.batch));
  w.u32(static_cast<std::uint32_t>(cfg_.val_every));
  w.f64(cfg_.lr);
  w.f64(cfg_.weight_decay);
  w.u64(cfg_.seed);
  w.u8(frozen_ ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(vocab_.size()));
  for (const std::string& tok : vocab_.tokens()) w.str16(tok);
  const auto tensors = tensor_section(params());
  w.bytes(tensors.data(), tensors.size());
  Sha256 h;
  h.update(tensors.data(), tensors.size());
  const auto digest = h.digest();
  w.bytes(digest.data(), digest.size());
  write_file_bytes(path, w.take());
}

ToyLm ToyLm::load(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  char magic[4];
  r.raw_into(magic, 4);
  if (std::string_view(magic, 4) != "TLM1") {
    throw FormatError("bad magic for lm checkpoint (offset 0)");
  }
  LmConfig cfg;
  cfg.d_model = r.u32();
  cfg.n_blocks = r.u32();
  cfg.n_heads = r.u32();
  cfg.context = r.u32();
  cfg.vocab_max = r.u32();
  cfg.epochs = r.u32();
  cfg.batch = r.u32();
  cfg.val_every = r.u32();
  cfg.lr = r.f64();
  cfg.weight_decay = r.f64();
  cfg.seed = r.u64();
  const bool frozen = r.u8() != 0;
  const std::size_t vocab_size = r.u32();
  std::vector<std::string> tokens;
  tokens.reserve(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) tokens.push_back(r.str16());
  ToyLm lm(cfg, Vocab::from_tokens(std::move(tokens)));
  const std::size_t tensor_offset = r.offset();
  for (Parameter* p : lm.params()) {
    r.f64_into(p->value.data.data(), p->value.size());
  }
  const std::size_t tensor_len = r.offset() - tensor_offset;
  std::array<std::uint8_t, 32> stored{};
  r.raw_into(stored.data(), stored.size());
  r.expect_end("lm checkpoint");
  Sha256 h;
  h.update(bytes.data() + tensor_offset, tensor_len);
  if (h.digest() != stored) {
    throw FormatError("lm checkpoint hash trailer mismatch: " + path);
  }
  if (frozen) lm.freeze();
  return lm;
}

// ---------------------------------------------------------------------------
// AdapterModel

AdapterModel::AdapterModel(std::size_t kg_dim, std::size_t d_model, std::uint64_t seed)
    : kg_dim_(kg_dim), d_model_(d_model) {
  if (kg_dim == 0 || d_model == 0) throw ConfigError("adapter dims must be positive");
  Rng rng(seed);
  auto normal_init = [&](std::vector<std::size_t> shape, double scale) {
    Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
  };
  w_adapt_ = Parameter("w_adapt", normal_init({kg_dim, d_model}, 0.08));
  bias_ = Parameter("adapter_bias", Tensor::zeros({d_model}, true));
  e_start_ = Parameter("e_graph_start", normal_init({1, d_model}, 0.08));
  e_end_ = Parameter("e_graph_end", normal_init({1, d_model}, 0.08));
}

std::vector<Parameter*> AdapterModel::params() {
  return {&w_adapt_, &bias_, &e_start_, &e_end_};
}

std::vector<const Parameter*> AdapterModel::params() const {
  auto mutable_params = const_cast<AdapterModel*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

void AdapterModel::save(const std::string& path) const {
  ByteWriter w;
  w.bytes("ADP1", 4);
  w.u32(static_cast<std::uint32_t>(kg_dim_));
  w.u32(static_cast<std::uint32_t>(d_model_));
  const auto tensors = tensor_section(params());
  w.bytes(tensors.data(), tensors.size());
  Sha256 h;
  h.update(tensors.data(), tensors.size());
  const auto digest = h.digest();
  w.bytes(digest.data(), digest.size());
  write_file_bytes(path, w.take());
}

AdapterModel AdapterModel::load(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  char magic[4];
  r.raw_into(magic, 4);
  if (std::string_view(magic, 4) != "ADP1") {
    throw FormatError("bad magic for adapter checkpoint (offset 0)");
  }
  const std::size_t kg_dim = r.u32();
  const std::size_t d_model = r.u32();
  AdapterModel a(kg_dim, d_model, /*seed=*/0);
  const std::size_t tensor_offset = r.offset();
  for (Parameter* p : a.params()) r.f64_into(p->value.data.data(), p->value.size());
  const std::size_t tensor_len = r.offset() - tensor_offset;
  std::array<std::uint8_t, 32> stored{};
  r.raw_into(stored.data(), stored.size());
  r.expect_end("adapter checkpoint");
  Sha256 h;
  h.update(bytes.data() + tensor_offset, tensor_len);
  if (h.digest() != stored) {
    throw FormatError("adapter checkpoint hash trailer mismatch: " + path);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Forward graph

namespace {

struct ForwardGraph {
  Graph g;
  NodeId logits = 0;
  std::vector<std::pair<const Parameter*, NodeId>> leaves;
  std::size_t kg_begin = 0, kg_end = 0;  // modality block, boundaries included
  std::size_t text_begin = 0;
  std::size_t total = 0;
};

struct DropoutPlan {
  double p = 0.0;
  Rng* rng = nullptr;
};

// Builds the full forward pass. With an adapter the input layout is
// [e_start][adapted kg...][e_end][text embeddings...]; without one it is the
// text alone. A dropout plan applies inverted-dropout masks during training
// passes only.
ForwardGraph build_forward(const ToyLm& lm, const AdapterModel* adapter,
                           const KgVectors& kg, std::span<const std::size_t> text_tokens,
                           const DropoutPlan* drop = nullptr) {
  if (text_tokens.empty()) throw ShapeError("lm forward needs at least one text token");
  for (std::size_t id : text_tokens) {
    if (id >= lm.vocab().size()) {
      throw LookupError("token id " + std::to_string(id) + " outside vocab");
    }
  }
  const std::size_t n_kg = adapter ? kg.size() : 0;
  const std::size_t d = lm.d_model();
  ForwardGraph fg;
  Graph& g = fg.g;

  auto leaf_of = [&](const Parameter& p) {
    const NodeId id = g.leaf(p.value);
    fg.leaves.emplace_back(&p, id);
    return id;
  };

  const NodeId tok_emb = leaf_of(lm.token_embeddings());
  const NodeId pos_emb = leaf_of(lm.position_embeddings());

  const NodeId text_embs = g.embedding_lookup(tok_emb, {text_tokens.begin(), text_tokens.end()});
  NodeId seq;
  if (adapter) {
    if (adapter->d_model() != d) throw ShapeError("adapter d_model mismatch");
    const NodeId e_start = leaf_of(adapter->e_start());
    const NodeId e_end = leaf_of(adapter->e_end());
    std::vector<NodeId> parts;
    parts.push_back(e_start);
    if (n_kg > 0) {
      std::vector<double> kg_data;
      kg_data.reserve(n_kg * adapter->kg_dim());
      for (const auto& vec : kg) {
        if (vec.size() != adapter->kg_dim()) {
          throw ShapeError("kg vector length " + std::to_string(vec.size()) +
                           " does not match adapter kg_dim " +
                           std::to_string(adapter->kg_dim()));
        }
        kg_data.insert(kg_data.end(), vec.begin(), vec.end());
      }
      const NodeId kg_leaf = g.leaf(Tensor::matrix(n_kg, adapter->kg_dim(), std::move(kg_data)));
      const NodeId w = leaf_of(adapter->w_adapt());
      const NodeId b = leaf_of(adapter->bias());
      parts.push_back(g.add(g.matmul(kg_leaf, w), b));
    } else {
      leaf_of(adapter->w_adapt());  // keep the leaf set stable for trainers
      leaf_of(adapter->bias());
    }
    parts.push_back(e_end);
    parts.push_back(text_embs);
    seq = g.concat_rows(std::move(parts));
    fg.kg_begin = 0;
    fg.kg_end = n_kg + 2;
  } else {
    seq = text_embs;
    fg.kg_begin = fg.kg_end = 0;
  }
  fg.text_begin = fg.kg_end;
  fg.total = fg.kg_end + text_tokens.size();
  if (fg.total > lm.config().context) {
    throw ShapeError("sequence length " + std::to_string(fg.total) + " exceeds context " +
                     std::to_string(lm.config().context));
  }

  // positions index the text relative to its own start; modality rows carry
  // no positional term, so injecting a block never displaces the text
  // patterns the frozen model learned
  std::vector<std::size_t> positions(text_tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  NodeId pos_rows = g.embedding_lookup(pos_emb, positions);
  if (fg.kg_end > 0) {
    const NodeId block_zeros = g.leaf(Tensor::zeros({fg.kg_end, d}));
    pos_rows = g.concat_rows({block_zeros, pos_rows});
  }
  auto dropout = [&](NodeId node, std::size_t rows, std::size_t cols) {
    if (drop == nullptr || drop->p <= 0.0) return node;
    const double keep = 1.0 - drop->p;
    Tensor mask = Tensor::zeros({rows, cols});
    for (double& v : mask.data) v = drop->rng->uniform() < keep ? 1.0 / keep : 0.0;
    return g.mul(node, g.leaf(std::move(mask)));
  };
  NodeId x = dropout(g.add(seq, pos_rows), fg.total, d);

  // causal mask: finite large negative keeps every forward value finite
  Tensor mask = Tensor::zeros({fg.total, fg.total});
  for (std::size_t i = 0; i < fg.total; ++i) {
    for (std::size_t j = i + 1; j < fg.total; ++j) mask.at(i, j) = -1e30;
  }
  const NodeId mask_leaf = g.leaf(std::move(mask));

  const std::size_t dh = d / lm.config().n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (const ToyLm::Block& blk : lm.blocks()) {
    const NodeId ln1 =
        g.add(g.mul(g.layer_norm(x), leaf_of(blk.ln1_gain)), leaf_of(blk.ln1_bias));
    NodeId attn = 0;
    bool have_attn = false;
    for (std::size_t h = 0; h < lm.config().n_heads; ++h) {
      const NodeId q = g.matmul(ln1, leaf_of(blk.w_q[h]));
      const NodeId k = g.matmul(ln1, leaf_of(blk.w_k[h]));
      const NodeId v = g.matmul(ln1, leaf_of(blk.w_v[h]));
      const NodeId scores = g.scale(g.matmul(q, k, false, true), inv_sqrt_dh);
      const NodeId probs = g.softmax(g.add(scores, mask_leaf));
      const NodeId head = g.matmul(probs, v);
      const NodeId proj = g.matmul(head, leaf_of(blk.w_o[h]));
      attn = have_attn ? g.add(attn, proj) : proj;
      have_attn = true;
    }
    x = g.add(x, attn);
    const NodeId ln2 =
        g.add(g.mul(g.layer_norm(x), leaf_of(blk.ln2_gain)), leaf_of(blk.ln2_bias));
    const NodeId up = dropout(
        g.gelu(g.add(g.matmul(ln2, leaf_of(blk.w_up)), leaf_of(blk.b_up))), fg.total, 4 * d);
    const NodeId down = g.add(g.matmul(up, leaf_of(blk.w_down)), leaf_of(blk.b_down));
    x = g.add(x, down);
  }
  const NodeId final_norm =
      g.add(g.mul(g.layer_norm(x), leaf_of(lm.final_gain())), leaf_of(lm.final_bias()));
  fg.logits = g.matmul(final_norm, tok_emb, false, true);
  return fg;
}

// Next-token targets: position p predicts text_tokens[p - text_begin + 1].
// Modality positions and the position before the first text token never
// become loss targets.
std::vector<long> next_token_targets(const ForwardGraph& fg,
                                     std::span<const std::size_t> text_tokens) {
  std::vector<long> targets(fg.total, -1);
  for (std::size_t k = 0; k + 1 < text_tokens.size(); ++k) {
    targets[fg.text_begin + k] = static_cast<long>(text_tokens[k + 1]);
  }
  return targets;
}

double accumulate_trainable(ForwardGraph& fg) {
  std::size_t touched = 0;
  for (auto& [cp, id] : fg.leaves) {
    auto* p = const_cast<Parameter*>(cp);
    if (!p->trainable) continue;
    p->accumulate(fg.g.grad(id));
    ++touched;
  }
  return static_cast<double>(touched);
}

std::vector<std::size_t> clip_text(std::vector<std::size_t> ids, std::size_t budget) {
  if (ids.size() > budget) ids.resize(budget);
  return ids;
}

}  // namespace

InjectedSequence inject(const ToyLm& lm, const AdapterModel& adapter, const KgVectors& kg,
                        std::span<const std::size_t> text_tokens) {
  if (adapter.d_model() != lm.d_model()) throw ShapeError("adapter d_model mismatch");
  for (std::size_t id : text_tokens) {
    if (id >= lm.vocab().size()) {
      throw LookupError("token id " + std::to_string(id) + " outside vocab");
    }
  }
  for (const auto& vec : kg) {
    if (vec.size() != adapter.kg_dim()) {
      throw ShapeError("kg vector length " + std::to_string(vec.size()) +
                       " does not match adapter kg_dim " + std::to_string(adapter.kg_dim()));
    }
  }
  InjectedSequence out;
  out.kg_begin = 0;
  out.kg_end = kg.size() + 2;
  const std::size_t total = out.kg_end + text_tokens.size();
  const std::size_t d = lm.d_model();
  out.embeddings = Tensor::zeros({total, d});
  const auto& e_start = adapter.e_start().value.data;
  const auto& e_end = adapter.e_end().value.data;
  std::copy(e_start.begin(), e_start.end(), out.embeddings.data.begin());
  for (std::size_t i = 0; i < kg.size(); ++i) {
    double* row = out.embeddings.data.data() + (1 + i) * d;
    for (std::size_t c = 0; c < d; ++c) {
      double acc = adapter.bias().value.data[c];
      for (std::size_t kdim = 0; kdim < adapter.kg_dim(); ++kdim) {
        acc += kg[i][kdim] * adapter.w_adapt().value.at(kdim, c);
      }
      row[c] = acc;
    }
  }
  std::copy(e_end.begin(), e_end.end(),
            out.embeddings.data.begin() + static_cast<long>((1 + kg.size()) * d));
  for (std::size_t t = 0; t < text_tokens.size(); ++t) {
    const double* src = lm.token_embeddings().value.data.data() + text_tokens[t] * d;
    std::copy_n(src, d, out.embeddings.data.begin() +
                            static_cast<long>((out.kg_end + t) * d));
  }
  if (!out.embeddings.all_finite()) throw NumericError("non-finite injected sequence");
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining

ToyLm pretrain_toy_lm(std::span<const std::string> texts, const LmConfig& cfg,
                      PretrainResult* trace) {
  if (texts.empty()) throw ShapeError("pretraining needs a nonempty corpus");
  if (cfg.lr <= 0) throw ConfigError("lm lr must be positive");
  if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("lm batch/epochs must be positive");
  if (cfg.dropout < 0 || cfg.dropout >= 1) throw ConfigError("lm dropout must be in [0, 1)");

  std::vector<std::string> text_copy(texts.begin(), texts.end());
  Vocab vocab = Vocab::build(text_copy, cfg.vocab_max);
  ToyLm lm(cfg, std::move(vocab));

  std::vector<std::vector<std::size_t>> train_seqs, val_seqs;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::vector<std::size_t> ids;
    ids.push_back(Vocab::kBos);
    for (std::size_t id : lm.vocab().encode(texts[i])) ids.push_back(id);
    ids.push_back(Vocab::kEos);
    if (ids.size() < 2) continue;
    ids = clip_text(std::move(ids), cfg.context);
    const bool to_val =
        texts.size() >= 2 * cfg.val_every && (i % cfg.val_every) == cfg.val_every - 1;
    (to_val ? val_seqs : train_seqs).push_back(std::move(ids));
  }
  if (train_seqs.empty()) throw ShapeError("no usable training sequences");

  Rng drop_rng(cfg.seed ^ 0xd0ull);
  auto doc_loss = [&](const std::vector<std::size_t>& ids, bool backward) -> double {
    DropoutPlan plan{cfg.dropout, &drop_rng};
    ForwardGraph fg = build_forward(lm, nullptr, {}, ids, backward ? &plan : nullptr);
    const auto targets = next_token_targets(fg, ids);
    const NodeId loss = fg.g.cross_entropy_with_logits(fg.logits, targets);
    const double value = fg.g.value(loss).data[0];
    if (backward) {
      fg.g.backward(loss);
      accumulate_trainable(fg);
    }
    return value;
  };

  const std::size_t steps_per_epoch = (train_seqs.size() + cfg.batch - 1) / cfg.batch;
  autodiff::AdamWConfig opt_cfg;
  opt_cfg.base_lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.total_steps = cfg.epochs * steps_per_epoch;
  autodiff::AdamW opt(opt_cfg, lm.params());

  Rng rng(cfg.seed ^ 0x70c1ea5ull);
  std::vector<std::size_t> order(train_seqs.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - start);
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < count; ++b) {
        batch_loss += doc_loss(train_seqs[order[start + b]], true);
      }
      if (!std::isfinite(batch_loss)) throw NumericError("non-finite lm loss");
      for (Parameter* p : lm.params()) {
        p->ensure_grad();
        p->scale_grad(1.0 / static_cast<double>(count));
      }
      autodiff::clip_gradients(lm.params(), cfg.grad_clip);
      opt.step();
      for (Parameter* p : lm.params()) p->clear_grad();
      epoch_loss += batch_loss;
    }
    const double train_mean = epoch_loss / static_cast<double>(train_seqs.size());
    double val_mean = train_mean;
    if (!val_seqs.empty()) {
      double v = 0.0;
      for (const auto& ids : val_seqs) v += doc_loss(ids, false);
      val_mean = v / static_cast<double>(val_seqs.size());
    }
    if (trace) {
      trace->train_loss.push_back(train_mean);
      trace->val_loss.push_back(val_mean);
    }
  }
  lm.freeze();
  return lm;
}

// ---------------------------------------------------------------------------
// Adapter training

AdapterExample make_adapter_example(const corpus::AnnotatedDocument& doc,
                                    const kgstore::EntityEmbeddingTable& table,
                                    std::size_t max_kg) {
  AdapterExample ex;
  ex.doc = doc;
  // mentions already come ordered by first span start; that is the
  // first-appearance order of distinct qids
  for (const corpus::EntityMention& m : doc.mentions) {
    if (ex.gold.size() >= max_kg) break;
    if (!table.contains(m.qid)) continue;
    ex.gold.push_back(table.get(m.qid));
  }
  return ex;
}

namespace {

std::vector<std::size_t> document_ids(const ToyLm& lm, const AdapterExample& ex,
                                      bool with_kg) {
  std::vector<std::size_t> ids;
  ids.push_back(Vocab::kBos);
  for (std::size_t id : lm.vocab().encode(ex.doc.text)) ids.push_back(id);
  ids.push_back(Vocab::kEos);
  const std::size_t overhead = with_kg ? ex.gold.size() + 2 : 0;
  if (overhead + 2 > lm.config().context) throw ShapeError("kg block exceeds context");
  return clip_text(std::move(ids), lm.config().context - overhead);
}

}  // namespace

std::vector<double> adapter_train(const ToyLm& lm, AdapterModel& adapter,
                                  std::span<const AdapterExample> dataset,
                                  const AdapterTrainConfig& cfg) {
  if (!lm.frozen()) throw Error("adapter_train requires a frozen lm");
  if (dataset.empty()) throw ShapeError("adapter_train needs a dataset");
  if (cfg.lr <= 0) throw ConfigError("adapter lr must be positive");
  if (cfg.batch == 0) throw ConfigError("adapter batch must be positive");

  const std::string lm_hash_before = lm.params_sha256();

  std::vector<double> trace;
  if (cfg.epochs == 0) return trace;

  const std::size_t steps_per_epoch = (dataset.size() + cfg.batch - 1) / cfg.batch;
  autodiff::AdamWConfig opt_cfg;
  opt_cfg.base_lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.total_steps = cfg.epochs * steps_per_epoch;
  autodiff::AdamW opt(opt_cfg, adapter.params());

  Rng rng(cfg.seed ^ 0xada97e4ull);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - start);
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < count; ++b) {
        const AdapterExample& ex = dataset[order[start + b]];
        const auto ids = document_ids(lm, ex, /*with_kg=*/true);
        ForwardGraph fg = build_forward(lm, &adapter, ex.gold, ids);
        const auto targets = next_token_targets(fg, ids);
        const NodeId loss = fg.g.cross_entropy_with_logits(fg.logits, targets);
        batch_loss += fg.g.value(loss).data[0];
        fg.g.backward(loss);
        accumulate_trainable(fg);
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite adapter loss at step " + std::to_string(trace.size()));
      }
      for (Parameter* p : adapter.params()) {
        p->ensure_grad();
        p->scale_grad(1.0 / static_cast<double>(count));
      }
      autodiff::clip_gradients(adapter.params(), cfg.grad_clip);
      opt.step();
      for (Parameter* p : adapter.params()) p->clear_grad();
      trace.push_back(batch_loss / static_cast<double>(count));
    }
  }

  if (lm.params_sha256() != lm_hash_before) {
    throw Error("frozen lm contract violated: parameter hash changed during adapter training");
  }
  return trace;
}

std::vector<std::pair<std::string, autodiff::Tensor>> adapter_gradients(
    const ToyLm& lm, const AdapterModel& adapter, const AdapterExample& ex) {
  const auto ids = document_ids(lm, ex, /*with_kg=*/true);
  ForwardGraph fg = build_forward(lm, &adapter, ex.gold, ids);
  const auto targets = next_token_targets(fg, ids);
  const NodeId loss = fg.g.cross_entropy_with_logits(fg.logits, targets);
  fg.g.backward(loss);
  const std::vector<const Parameter*> wanted = adapter.params();
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [p, id] : fg.leaves) {
    if (std::find(wanted.begin(), wanted.end(), p) != wanted.end()) {
      out.emplace_back(p->name, fg.g.grad_tensor(id));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generation and evaluation

std::vector<std::size_t> generate(const ToyLm& lm, const AdapterModel* adapter,
                                  const KgVectors& kg,
                                  std::span<const std::size_t> prompt_tokens,
                                  std::size_t max_new, GenerateMode mode) {
  if (prompt_tokens.empty()) throw ShapeError("generate needs a nonempty prompt");
  const AdapterModel* active = mode == GenerateMode::with_kg ? adapter : nullptr;
  if (mode == GenerateMode::with_kg && adapter == nullptr) {
    throw ShapeError("with_kg generation needs an adapter");
  }
  const KgVectors empty;
  const KgVectors& kg_used = mode == GenerateMode::with_kg ? kg : empty;

  std::vector<std::size_t> ids(prompt_tokens.begin(), prompt_tokens.end());
  std::vector<std::size_t> out;
  const std::size_t overhead = active ? kg_used.size() + 2 : 0;
  for (std::size_t step = 0; step < max_new; ++step) {
    if (overhead + ids.size() >= lm.config().context) break;
    ForwardGraph fg = build_forward(lm, active, kg_used, ids);
    const Tensor& logits = fg.g.value(fg.logits);
    const std::size_t vsize = logits.shape[1];
    const double* row = logits.data.data() + (logits.shape[0] - 1) * vsize;
    std::size_t best = 0;
    for (std::size_t i = 1; i < vsize; ++i) {
      if (row[i] > row[best]) best = i;
    }
    ids.push_back(best);
    out.push_back(best);
    if (best == Vocab::kEos) break;
  }
  return out;
}

double document_ce(const ToyLm& lm, const AdapterModel* adapter, const AdapterExample& ex,
                   const CeOptions& opts) {
  const AdapterModel* active = opts.with_kg ? adapter : nullptr;
  if (opts.with_kg && adapter == nullptr) throw ShapeError("with_kg eval needs an adapter");

  // token-aligned encoding so entity spans can be tied to target positions
  const auto token_spans = tokenize_with_spans(ex.doc.text);
  std::vector<std::size_t> ids;
  std::vector<bool> is_entity;  // parallel to text ids
  ids.push_back(Vocab::kBos);
  is_entity.push_back(false);
  for (const auto& ts : token_spans) {
    ids.push_back(lm.vocab().id(ts.text));
    bool inside = false;
    for (const corpus::EntityMention& m : ex.doc.mentions) {
      for (const auto& [b, e] : m.spans) {
        if (ts.begin < e && ts.end > b) {
          inside = true;
          break;
        }
      }
      if (inside) break;
    }
    is_entity.push_back(inside);
  }
  ids.push_back(Vocab::kEos);
  is_entity.push_back(false);

  const std::size_t overhead = active ? ex.gold.size() + 2 : 0;
  const std::size_t budget = lm.config().context - overhead;
  if (ids.size() > budget) {
    ids.resize(budget);
    is_entity.resize(budget);
  }

  ForwardGraph fg = build_forward(lm, active, ex.gold, ids);
  const Tensor& logits = fg.g.value(fg.logits);
  const std::size_t vsize = logits.shape[1];

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k + 1 < ids.size(); ++k) {
    if (opts.entity_tokens_only && !is_entity[k + 1]) continue;
    const std::size_t pos = fg.text_begin + k;
    const double* row = logits.data.data() + pos * vsize;
    const double lse = autodiff::log_sum_exp({row, vsize});
    total += lse - row[ids[k + 1]];
    ++count;
  }
  if (count == 0) throw ShapeError("document has no loss positions for the requested mode");
  return total / static_cast<double>(count);
}

}  // namespace kgmod::modality
