#pragma once

// Decoder-only toy language model with residual-stream hooks.
//
// Architecture: learned token + absolute position embeddings, pre-layer-norm
// blocks (attention then ReLU MLP, residual adds), final layer norm, untied
// linear head. The "residual stream at layer l" is the block output after the
// MLP residual add, layers indexed 1..n_layers; index 0 is the embedding
// stream. A hook is a function applied to the stream right after its block, so
// recorded activations always reflect what downstream layers actually saw.
//
// Forward passes run under whatever Tape is active (none means pure values);
// generation is value-only and uses per-layer KV caches so decoding a sequence
// costs one block pass per new token.

#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "psr/common.hpp"
#include "psr/tensor.hpp"

namespace psr {

struct ModelConfig {
  int vocab_size = 64;
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int ffn_mult = 4;
  int max_context = 64;
  double ln_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  void validate() const {
    if (vocab_size < 4) throw ValidationError("model config: vocab_size must be at least 4");
    if (n_layers < 1) throw ValidationError("model config: n_layers must be positive");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw ValidationError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                            std::to_string(n_heads));
    if (ffn_mult < 1) throw ValidationError("model config: ffn_mult must be positive");
    if (max_context < 2) throw ValidationError("model config: max_context must be at least 2");
  }
};

// Reserved token ids; the synthetic world builds its vocab around them.
constexpr int kEosToken = 0;
constexpr int kSepToken = 1;

template <class S>
struct Hook {
  int layer = 0;  // 1-based
  // acts: rows of the residual stream; row0_pos: absolute position of row 0.
  std::function<Tensor<S>(const Tensor<S>& acts, int row0_pos)> fn;
};

template <class S>
using HookSet = std::vector<Hook<S>>;

template <class S>
struct ForwardRecord {
  std::vector<int> tokens;
  std::vector<Tensor<S>> acts;  // size n_layers + 1; acts[0] is the embedding stream
  Tensor<S> logits;             // (T x V)

  const Tensor<S>& layer(int l) const {
    if (l < 1 || l >= int(acts.size()))
      throw ValidationError("forward record: layer " + std::to_string(l) + " out of range 1.." +
                            std::to_string(int(acts.size()) - 1));
    return acts[size_t(l)];
  }
  const Tensor<S>& embedding_stream() const { return acts[0]; }
};

template <class S>
struct GenResult {
  std::vector<int> tokens;  // response tokens, end-of-sequence excluded
  bool hit_eos = false;
  bool hit_context_limit = false;
};

// Value-level nucleus sampler shared by generation paths. temperature <= 0
// means greedy (first argmax).
template <class S>
int sample_token(const S* logits, int v, double temperature, double top_p, Rng& rng) {
  if (temperature <= 0.0) {
    int best = 0;
    for (int j = 1; j < v; ++j)
      if (double(logits[j]) > double(logits[best])) best = j;
    return best;
  }
  std::vector<double> p(static_cast<size_t>(v));
  double mx = double(logits[0]);
  for (int j = 1; j < v; ++j) mx = std::max(mx, double(logits[j]));
  double z = 0;
  for (int j = 0; j < v; ++j) {
    p[size_t(j)] = std::exp((double(logits[j]) - mx) / temperature);
    z += p[size_t(j)];
  }
  for (auto& x : p) x /= z;
  if (top_p < 1.0) {
    std::vector<int> idx(static_cast<size_t>(v));
    for (int j = 0; j < v; ++j) idx[size_t(j)] = j;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return p[size_t(a)] > p[size_t(b)]; });
    double cum = 0;
    size_t keep = 0;
    for (; keep < idx.size(); ++keep) {
      cum += p[size_t(idx[keep])];
      if (cum >= top_p) {
        ++keep;
        break;
      }
    }
    std::vector<double> q(size_t(v), 0.0);
    double z2 = 0;
    for (size_t k = 0; k < keep; ++k) z2 += p[size_t(idx[k])];
    for (size_t k = 0; k < keep; ++k) q[size_t(idx[k])] = p[size_t(idx[k])] / z2;
    p.swap(q);
  }
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double u = u01(rng);
  double cdf = 0;
  for (int j = 0; j < v; ++j) {
    cdf += p[size_t(j)];
    if (u <= cdf) return j;
  }
  return v - 1;  // guard against accumulated rounding in the cdf
}

template <class S>
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    Model m(cfg);
    Rng rng(derive_seed(seed, {seed_tag("model-init")}));
    int d = cfg.d_model, v = cfg.vocab_size, f = cfg.d_model * cfg.ffn_mult;
    const double w_std = 0.05;
    m.wte_ = Tensor<S>::randn({v, d}, rng, w_std);
    m.wpe_ = Tensor<S>::randn({cfg.max_context, d}, rng, w_std);
    m.blocks_.resize(size_t(cfg.n_layers));
    for (auto& b : m.blocks_) {
      b.ln1_g = Tensor<S>::full({d}, S(1));
      b.ln1_b = Tensor<S>::zeros({d});
      b.wq = Tensor<S>::randn({d, d}, rng, w_std);
      b.bq = Tensor<S>::zeros({d});
      b.wk = Tensor<S>::randn({d, d}, rng, w_std);
      b.bk = Tensor<S>::zeros({d});
      b.wv = Tensor<S>::randn({d, d}, rng, w_std);
      b.bv = Tensor<S>::zeros({d});
      b.wo = Tensor<S>::randn({d, d}, rng, w_std);
      b.bo = Tensor<S>::zeros({d});
      b.ln2_g = Tensor<S>::full({d}, S(1));
      b.ln2_b = Tensor<S>::zeros({d});
      b.w1 = Tensor<S>::randn({d, f}, rng, w_std);
      b.b1 = Tensor<S>::zeros({f});
      b.w2 = Tensor<S>::randn({f, d}, rng, w_std);
      b.b2 = Tensor<S>::zeros({d});
    }
    m.lnf_g = Tensor<S>::full({d}, S(1));
    m.lnf_b = Tensor<S>::zeros({d});
    // Zero head: a fresh model emits exactly uniform logits, a handy base case.
    m.head_ = Tensor<S>::zeros({d, v});
    return m;
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> ps{&wte_, &wpe_};
    for (auto& b : blocks_)
      for (auto* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_g,
                      &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
        ps.push_back(t);
    ps.push_back(&lnf_g);
    ps.push_back(&lnf_b);
    ps.push_back(&head_);
    return ps;
  }
  std::vector<const Tensor<S>*> parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return std::vector<const Tensor<S>*>(ps.begin(), ps.end());
  }

  void set_trainable(bool b) {
    for (auto* p : parameters()) p->set_requires_grad(b);
  }

  uint64_t weights_fingerprint() const {
    uint64_t h = 1469598103934665603ULL;
    for (const auto* p : parameters())
      for (size_t i = 0; i < p->numel(); ++i) {
        double d = double(p->data()[i]);
        uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        for (int k = 0; k < 8; ++k) h = (h ^ ((bits >> (8 * k)) & 0xff)) * 1099511628211ULL;
      }
    return h;
  }

  // ---- teacher-forced forward ----

  ForwardRecord<S> forward(const std::vector<int>& tokens, const HookSet<S>* hooks = nullptr) const {
    validate_tokens(tokens);
    validate_hooks(hooks);
    int t = int(tokens.size());
    std::vector<int> pos(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) pos[size_t(i)] = i;

    ForwardRecord<S> rec;
    rec.tokens = tokens;
    Tensor<S> x = add(embedding(wte_, tokens), embedding(wpe_, pos));
    rec.acts.push_back(x);

    Tensor<S> mask = causal_mask(t);
    for (int l = 1; l <= cfg_.n_layers; ++l) {
      x = block_forward(l, x, nullptr, &mask);
      if (hooks)
        for (const auto& h : *hooks)
          if (h.layer == l) x = h.fn(x, 0);
      rec.acts.push_back(x);
    }
    Tensor<S> hf = layer_norm(x, lnf_g, lnf_b, cfg_.ln_eps);
    rec.logits = matmul(hf, head_);
    return rec;
  }

  // One block applied to an arbitrary stream state. `allowed_cols` additionally
  // bans attention to chosen key positions (used to probe a layer's own
  // contribution with some positions excised); causality always applies.
  Tensor<S> block_forward(int l, const Tensor<S>& h, const std::vector<uint8_t>* allowed_cols = nullptr,
                          const Tensor<S>* prebuilt_mask = nullptr) const {
    if (l < 1 || l > cfg_.n_layers)
      throw ValidationError("block_forward: layer " + std::to_string(l) + " out of range");
    if (h.rank() != 2 || h.dim(1) != cfg_.d_model)
      throw ShapeError("block_forward: stream shape " + join_ints(h.shape()));
    int t = h.dim(0);
    if (allowed_cols && int(allowed_cols->size()) != t)
      throw ShapeError("block_forward: allowed_cols length " + std::to_string(allowed_cols->size()) +
                       " vs sequence length " + std::to_string(t));
    Tensor<S> mask = prebuilt_mask ? *prebuilt_mask : causal_mask(t, allowed_cols);

    const Block& b = blocks_[size_t(l - 1)];
    int hd = cfg_.head_dim();
    Tensor<S> a = layer_norm(h, b.ln1_g, b.ln1_b, cfg_.ln_eps);
    Tensor<S> q = add_rowwise(matmul(a, b.wq), b.bq);
    Tensor<S> k = add_rowwise(matmul(a, b.wk), b.bk);
    Tensor<S> v = add_rowwise(matmul(a, b.wv), b.bv);
    std::vector<Tensor<S>> ctx_heads;
    ctx_heads.reserve(size_t(cfg_.n_heads));
    for (int head = 0; head < cfg_.n_heads; ++head) {
      Tensor<S> qh = slice(q, 1, head * hd, hd);
      Tensor<S> kh = slice(k, 1, head * hd, hd);
      Tensor<S> vh = slice(v, 1, head * hd, hd);
      Tensor<S> scores = scale(matmul(qh, transpose(kh)), S(1.0 / std::sqrt(double(hd))));
      Tensor<S> probs = softmax(add(scores, mask));
      ctx_heads.push_back(matmul(probs, vh));
    }
    Tensor<S> ctx = concat(ctx_heads, 1);
    Tensor<S> x = add(h, add_rowwise(matmul(ctx, b.wo), b.bo));
    Tensor<S> m = layer_norm(x, b.ln2_g, b.ln2_b, cfg_.ln_eps);
    Tensor<S> up = relu(add_rowwise(matmul(m, b.w1), b.b1));
    return add(x, add_rowwise(matmul(up, b.w2), b.b2));
  }

  // Sum of log p(continuation_i | prefix, continuation_<i); differentiable
  // through any hooks. Teacher-forced: hooks see the full concatenated text.
  Tensor<S> loglikelihood(const std::vector<int>& prefix, const std::vector<int>& continuation,
                          const HookSet<S>* hooks = nullptr) const {
    if (prefix.empty()) throw ValidationError("loglikelihood: empty prefix");
    if (continuation.empty()) throw ValidationError("loglikelihood: empty continuation");
    std::vector<int> all = prefix;
    all.insert(all.end(), continuation.begin(), continuation.end());
    ForwardRecord<S> rec = forward(all, hooks);
    Tensor<S> rows = slice(rec.logits, 0, int(prefix.size()) - 1, int(continuation.size()));
    return sum(log_prob_of(rows, continuation));
  }

  // ---- incremental generation ----

  struct DecodeState {
    std::vector<std::vector<S>> kcache, vcache;  // per layer, t * d_model flat
    int t = 0;
  };

  DecodeState make_state() const {
    DecodeState st;
    st.kcache.resize(size_t(cfg_.n_layers));
    st.vcache.resize(size_t(cfg_.n_layers));
    return st;
  }

  // Feed one token at absolute position st.t; returns the logits row.
  std::vector<S> decode_step(DecodeState& st, int token, const HookSet<S>* hooks = nullptr) const {
    if (token < 0 || token >= cfg_.vocab_size)
      throw ValidationError("decode_step: token " + std::to_string(token) + " out of vocab");
    if (st.t >= cfg_.max_context)
      throw ValidationError("decode_step: position " + std::to_string(st.t) + " exceeds max context " +
                            std::to_string(cfg_.max_context));
    int d = cfg_.d_model, hd = cfg_.head_dim();
    int pos = st.t;
    Tensor<S> x = add(embedding(wte_, std::vector<int>{token}), embedding(wpe_, std::vector<int>{pos}));
    for (int l = 1; l <= cfg_.n_layers; ++l) {
      const Block& b = blocks_[size_t(l - 1)];
      Tensor<S> a = layer_norm(x, b.ln1_g, b.ln1_b, cfg_.ln_eps);
      Tensor<S> q = add_rowwise(matmul(a, b.wq), b.bq);
      Tensor<S> k = add_rowwise(matmul(a, b.wk), b.bk);
      Tensor<S> v = add_rowwise(matmul(a, b.wv), b.bv);
      auto& kc = st.kcache[size_t(l - 1)];
      auto& vc = st.vcache[size_t(l - 1)];
      kc.insert(kc.end(), k.data(), k.data() + d);
      vc.insert(vc.end(), v.data(), v.data() + d);
      int ctx_len = pos + 1;
      Tensor<S> km = Tensor<S>::from({ctx_len, d}, kc);
      Tensor<S> vm = Tensor<S>::from({ctx_len, d}, vc);
      std::vector<Tensor<S>> ctx_heads;
      ctx_heads.reserve(size_t(cfg_.n_heads));
      for (int head = 0; head < cfg_.n_heads; ++head) {
        Tensor<S> qh = slice(q, 1, head * hd, hd);
        Tensor<S> kh = slice(km, 1, head * hd, hd);
        Tensor<S> vh = slice(vm, 1, head * hd, hd);
        Tensor<S> scores = scale(matmul(qh, transpose(kh)), S(1.0 / std::sqrt(double(hd))));
        ctx_heads.push_back(matmul(softmax(scores), vh));
      }
      Tensor<S> ctx = concat(ctx_heads, 1);
      x = add(x, add_rowwise(matmul(ctx, b.wo), b.bo));
      Tensor<S> m = layer_norm(x, b.ln2_g, b.ln2_b, cfg_.ln_eps);
      Tensor<S> up = relu(add_rowwise(matmul(m, b.w1), b.b1));
      x = add(x, add_rowwise(matmul(up, b.w2), b.b2));
      if (hooks)
        for (const auto& h : *hooks)
          if (h.layer == l) x = h.fn(x, pos);
    }
    Tensor<S> hf = layer_norm(x, lnf_g, lnf_b, cfg_.ln_eps);
    Tensor<S> logits = matmul(hf, head_);
    st.t += 1;
    return logits.values();
  }

  GenResult<S> generate(const std::vector<int>& prompt, int max_new, double temperature, double top_p, Rng& rng,
                        const HookSet<S>* hooks = nullptr) const {
    validate_tokens(prompt);
    validate_hooks(hooks);
    if (max_new < 0) throw ValidationError("generate: negative max_new");
    DecodeState st = make_state();
    std::vector<S> logits;
    for (int tok : prompt) logits = decode_step(st, tok, hooks);
    GenResult<S> out;
    for (int i = 0; i < max_new; ++i) {
      int tok = sample_token(logits.data(), cfg_.vocab_size, temperature, top_p, rng);
      if (tok == kEosToken) {
        out.hit_eos = true;
        break;
      }
      out.tokens.push_back(tok);
      if (i + 1 == max_new) break;
      if (st.t >= cfg_.max_context) {
        out.hit_context_limit = true;
        break;
      }
      logits = decode_step(st, tok, hooks);
    }
    return out;
  }

  // ---- persistence ----

  void save(const std::string& path) const {
    nlohmann::json j;
    j["format"] = "psr-checkpoint";
    j["version"] = 1;
    j["config"] = {{"vocab_size", cfg_.vocab_size}, {"n_layers", cfg_.n_layers},   {"d_model", cfg_.d_model},
                   {"n_heads", cfg_.n_heads},       {"ffn_mult", cfg_.ffn_mult},   {"max_context", cfg_.max_context},
                   {"ln_eps", cfg_.ln_eps}};
    nlohmann::json w;
    w["wte"] = dump_tensor(wte_);
    w["wpe"] = dump_tensor(wpe_);
    w["lnf_g"] = dump_tensor(lnf_g);
    w["lnf_b"] = dump_tensor(lnf_b);
    w["head"] = dump_tensor(head_);
    nlohmann::json bl = nlohmann::json::array();
    for (const auto& b : blocks_) {
      nlohmann::json e;
      e["ln1_g"] = dump_tensor(b.ln1_g);
      e["ln1_b"] = dump_tensor(b.ln1_b);
      e["wq"] = dump_tensor(b.wq);
      e["bq"] = dump_tensor(b.bq);
      e["wk"] = dump_tensor(b.wk);
      e["bk"] = dump_tensor(b.bk);
      e["wv"] = dump_tensor(b.wv);
      e["bv"] = dump_tensor(b.bv);
      e["wo"] = dump_tensor(b.wo);
      e["bo"] = dump_tensor(b.bo);
      e["ln2_g"] = dump_tensor(b.ln2_g);
      e["ln2_b"] = dump_tensor(b.ln2_b);
      e["w1"] = dump_tensor(b.w1);
      e["b1"] = dump_tensor(b.b1);
      e["w2"] = dump_tensor(b.w2);
      e["b2"] = dump_tensor(b.b2);
      bl.push_back(std::move(e));
    }
    w["blocks"] = std::move(bl);
    j["weights"] = std::move(w);
    std::ofstream f(path);
    if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
    f << j.dump();
    if (!f) throw IoError("checkpoint: write failed for " + path);
  }

  static Model load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw ValidationError("checkpoint: malformed json in " + path + ": " + e.what());
    }
    if (!j.contains("format") || j["format"] != "psr-checkpoint")
      throw ValidationError("checkpoint: " + path + " is not a model checkpoint");
    if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != 1)
      throw ValidationError("checkpoint: unsupported version in " + path);
    ModelConfig cfg;
    const auto& jc = j.at("config");
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.ffn_mult = jc.at("ffn_mult").get<int>();
    cfg.max_context = jc.at("max_context").get<int>();
    cfg.ln_eps = jc.at("ln_eps").get<double>();
    Model m(cfg);
    int d = cfg.d_model, v = cfg.vocab_size, fdim = cfg.d_model * cfg.ffn_mult;
    const auto& w = j.at("weights");
    m.wte_ = read_tensor(w, "wte", {v, d});
    m.wpe_ = read_tensor(w, "wpe", {cfg.max_context, d});
    m.lnf_g = read_tensor(w, "lnf_g", {d});
    m.lnf_b = read_tensor(w, "lnf_b", {d});
    m.head_ = read_tensor(w, "head", {d, v});
    const auto& bl = w.at("blocks");
    if (!bl.is_array() || int(bl.size()) != cfg.n_layers)
      throw ValidationError("checkpoint: expected " + std::to_string(cfg.n_layers) + " blocks");
    m.blocks_.resize(size_t(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
      auto& b = m.blocks_[size_t(l)];
      const auto& e = bl[size_t(l)];
      b.ln1_g = read_tensor(e, "ln1_g", {d});
      b.ln1_b = read_tensor(e, "ln1_b", {d});
      b.wq = read_tensor(e, "wq", {d, d});
      b.bq = read_tensor(e, "bq", {d});
      b.wk = read_tensor(e, "wk", {d, d});
      b.bk = read_tensor(e, "bk", {d});
      b.wv = read_tensor(e, "wv", {d, d});
      b.bv = read_tensor(e, "bv", {d});
      b.wo = read_tensor(e, "wo", {d, d});
      b.bo = read_tensor(e, "bo", {d});
      b.ln2_g = read_tensor(e, "ln2_g", {d});
      b.ln2_b = read_tensor(e, "ln2_b", {d});
      b.w1 = read_tensor(e, "w1", {d, fdim});
      b.b1 = read_tensor(e, "b1", {fdim});
      b.w2 = read_tensor(e, "w2", {fdim, d});
      b.b2 = read_tensor(e, "b2", {d});
    }
    return m;
  }

 private:
  struct Block {
    Tensor<S> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  void validate_tokens(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw ValidationError("model: empty token sequence");
    if (int(tokens.size()) > cfg_.max_context)
      throw ValidationError("model: sequence length " + std::to_string(tokens.size()) + " exceeds max context " +
                            std::to_string(cfg_.max_context));
    for (int t : tokens)
      if (t < 0 || t >= cfg_.vocab_size)
        throw ValidationError("model: token " + std::to_string(t) + " out of vocab");
  }

  void validate_hooks(const HookSet<S>* hooks) const {
    if (!hooks) return;
    std::vector<char> seen(size_t(cfg_.n_layers) + 1, 0);
    for (const auto& h : *hooks) {
      if (h.layer < 1 || h.layer > cfg_.n_layers)
        throw ValidationError("hooks: layer " + std::to_string(h.layer) + " out of range 1.." +
                              std::to_string(cfg_.n_layers));
      if (seen[size_t(h.layer)]) throw ValidationError("hooks: duplicate hook at layer " + std::to_string(h.layer));
      if (!h.fn) throw ValidationError("hooks: empty intervention at layer " + std::to_string(h.layer));
      seen[size_t(h.layer)] = 1;
    }
  }

  // Additive attention mask: 0 where attending is allowed, a large negative
  // number where banned. exp(-1e30 - max) underflows to exactly 0, so banned
  // positions carry zero weight without NaN risk.
  Tensor<S> causal_mask(int t, const std::vector<uint8_t>* allowed_cols = nullptr) const {
    Tensor<S> m = Tensor<S>::zeros({t, t});
    const S banned = S(-1e30);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j)
        if (j > i || (allowed_cols && !(*allowed_cols)[size_t(j)] && j != i))
          m.data()[size_t(i) * t + j] = banned;
    return m;
  }

  ModelConfig cfg_;
  Tensor<S> wte_, wpe_, lnf_g, lnf_b, head_;
  std::vector<Block> blocks_;

  template <class T>
  static nlohmann::json dump_tensor(const Tensor<T>& t) {
    nlohmann::json arr = nlohmann::json::array();
    for (size_t i = 0; i < t.numel(); ++i) arr.push_back(double(t.data()[i]));
    return arr;
  }
  static Tensor<S> read_tensor(const nlohmann::json& holder, const char* key, std::vector<int> shape) {
    if (!holder.contains(key)) throw ValidationError(std::string("checkpoint: missing weight ") + key);
    const auto& arr = holder.at(key);
    size_t n = 1;
    for (int s : shape) n *= size_t(s);
    if (!arr.is_array() || arr.size() != n)
      throw ValidationError(std::string("checkpoint: weight ") + key + " has " + std::to_string(arr.size()) +
                            " values, expected " + std::to_string(n));
    std::vector<S> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = S(arr[i].get<double>());
    return Tensor<S>::from(std::move(shape), std::move(v));
  }
};

}  // namespace psr
