#include "ng/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "ng/kernels.hpp"
#include "ng/rng.hpp"
#include "ng/sha256.hpp"

namespace ng {

using nlohmann::json;

void ModelConfig::validate() const {
  if (num_layers < 1 || model_dim < 1 || mlp_hidden < 1 || num_heads < 1 || vocab_size < 1 ||
      context_len < 1)
    throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  if (model_dim % num_heads != 0)
    throw std::invalid_argument("ModelConfig: model_dim must be divisible by num_heads");
}

// --- parameters ---------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::vector<int64_t>>> param_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::vector<int64_t>>> out;
  out.push_back({"tok_emb", {c.vocab_size, c.model_dim}});
  out.push_back({"pos_emb", {c.context_len, c.model_dim}});
  for (int l = 0; l < c.num_layers; ++l) {
    std::string p = "l" + std::to_string(l) + ".";
    out.push_back({p + "ln1.g", {c.model_dim}});
    out.push_back({p + "ln1.b", {c.model_dim}});
    out.push_back({p + "attn.wq", {c.model_dim, c.model_dim}});
    out.push_back({p + "attn.bq", {c.model_dim}});
    out.push_back({p + "attn.wk", {c.model_dim, c.model_dim}});
    out.push_back({p + "attn.bk", {c.model_dim}});
    out.push_back({p + "attn.wv", {c.model_dim, c.model_dim}});
    out.push_back({p + "attn.bv", {c.model_dim}});
    out.push_back({p + "attn.wo", {c.model_dim, c.model_dim}});
    out.push_back({p + "attn.bo", {c.model_dim}});
    out.push_back({p + "ln2.g", {c.model_dim}});
    out.push_back({p + "ln2.b", {c.model_dim}});
    out.push_back({p + "mlp.w_in", {c.model_dim, c.mlp_hidden}});
    out.push_back({p + "mlp.b_in", {c.mlp_hidden}});
    out.push_back({p + "mlp.w_out", {c.mlp_hidden, c.model_dim}});
    out.push_back({p + "mlp.b_out", {c.model_dim}});
  }
  out.push_back({"lnf.g", {c.model_dim}});
  out.push_back({"lnf.b", {c.model_dim}});
  out.push_back({"head.w", {c.model_dim, c.vocab_size}});
  out.push_back({"head.b", {c.vocab_size}});
  return out;
}

}  // namespace

Checkpoint zero_checkpoint(const ModelConfig& config) {
  config.validate();
  Checkpoint ckpt;
  ckpt.config = config;
  for (const auto& [name, shape] : param_shapes(config)) ckpt.params[name] = Tensor::zeros(shape);
  return ckpt;
}

Checkpoint init_checkpoint(const ModelConfig& config) {
  config.validate();
  Checkpoint ckpt;
  ckpt.config = config;
  Rng rng = Rng::stream(config.seed, "init");
  double wstd = 1.0 / std::sqrt(static_cast<double>(config.model_dim));
  double out_std = wstd / std::sqrt(2.0 * config.num_layers);
  double mlp_in_std = config.mlp_init_scale / std::sqrt(static_cast<double>(config.model_dim));
  double mlp_out_std = config.mlp_init_scale / std::sqrt(static_cast<double>(config.mlp_hidden)) /
                       std::sqrt(2.0 * config.num_layers);
  for (const auto& [name, shape] : param_shapes(config)) {
    bool is_gain = name.size() > 2 && name.substr(name.size() - 2) == ".g" && name.find("ln") != std::string::npos;
    bool is_bias = !is_gain && name.find(".b") != std::string::npos;
    if (is_gain) {
      ckpt.params[name] = Tensor::full(shape, 1.0);
    } else if (is_bias) {
      ckpt.params[name] = Tensor::zeros(shape);
    } else if (name == "tok_emb" || name == "pos_emb") {
      ckpt.params[name] = Tensor::randn(shape, rng, 0.02);
    } else if (name.find("attn.wo") != std::string::npos) {
      ckpt.params[name] = Tensor::randn(shape, rng, out_std);
    } else if (name.find("mlp.w_out") != std::string::npos) {
      ckpt.params[name] = Tensor::randn(shape, rng, mlp_out_std);
    } else if (name.find("mlp.w_in") != std::string::npos) {
      ckpt.params[name] = Tensor::randn(shape, rng, mlp_in_std);
    } else {
      ckpt.params[name] = Tensor::randn(shape, rng, wstd);
    }
  }
  return ckpt;
}

// --- checkpoint container -------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'N', 'G', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json header;
  header["version"] = 1;
  header["config"] = {{"num_layers", ckpt.config.num_layers},   {"model_dim", ckpt.config.model_dim},
                      {"mlp_hidden", ckpt.config.mlp_hidden},   {"num_heads", ckpt.config.num_heads},
                      {"vocab_size", ckpt.config.vocab_size},   {"context_len", ckpt.config.context_len},
                      {"mlp_init_scale", ckpt.config.mlp_init_scale}, {"mlp_topk", ckpt.config.mlp_topk},
                      {"seed", ckpt.config.seed}};
  header["meta"] = {{"steps", ckpt.meta.steps},
                    {"final_train_loss", ckpt.meta.final_train_loss},
                    {"final_val_loss", ckpt.meta.final_val_loss},
                    {"corpus_digest", ckpt.meta.corpus_digest}};
  json tensors = json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : ckpt.params) {
    tensors.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel();
  }
  header["tensors"] = tensors;
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.params) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("short write on checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  json header = json::parse(hs);
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version in " + path);

  Checkpoint ckpt;
  const auto& cj = header.at("config");
  ckpt.config.num_layers = cj.at("num_layers").get<int>();
  ckpt.config.model_dim = cj.at("model_dim").get<int>();
  ckpt.config.mlp_hidden = cj.at("mlp_hidden").get<int>();
  ckpt.config.num_heads = cj.at("num_heads").get<int>();
  ckpt.config.vocab_size = cj.at("vocab_size").get<int>();
  ckpt.config.context_len = cj.at("context_len").get<int>();
  ckpt.config.mlp_init_scale = cj.at("mlp_init_scale").get<double>();
  ckpt.config.mlp_topk = cj.at("mlp_topk").get<int>();
  ckpt.config.seed = cj.at("seed").get<uint64_t>();
  const auto& mj = header.at("meta");
  ckpt.meta.steps = mj.at("steps").get<int64_t>();
  ckpt.meta.final_train_loss = mj.at("final_train_loss").get<double>();
  ckpt.meta.final_val_loss = mj.at("final_val_loss").get<double>();
  ckpt.meta.corpus_digest = mj.at("corpus_digest").get<std::string>();

  for (const auto& tj : header.at("tensors")) {
    Tensor t(tj.at("shape").get<std::vector<int64_t>>());
    if (t.numel() != tj.at("count").get<int64_t>())
      throw std::runtime_error("checkpoint tensor directory inconsistent in " + path);
    ckpt.params[tj.at("name").get<std::string>()] = std::move(t);
  }
  for (auto& [name, t] : ckpt.params) {
    (void)name;
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!in) throw std::runtime_error("truncated checkpoint blob: " + path);

  // parameter shapes must match the config
  auto expect = param_shapes(ckpt.config);
  if (expect.size() != ckpt.params.size())
    throw std::runtime_error("checkpoint parameter set does not match config in " + path);
  for (const auto& [name, shape] : expect) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end() || it->second.shape != shape)
      throw std::runtime_error("checkpoint parameter " + name + " missing or misshaped in " + path);
  }
  return ckpt;
}

// --- forward ------------------------------------------------------------------

namespace {

void check_tokens(const ModelConfig& c, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > c.context_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds context_len " + std::to_string(c.context_len));
  for (int t : tokens)
    if (t < 0 || t >= c.vocab_size)
      throw std::invalid_argument("forward: token id " + std::to_string(t) + " out of range");
}

Tensor causal_mask(int64_t t) {
  Tensor m({t, t});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = i + 1; j < t; ++j) m.at(i, j) = -1e30;
  return m;
}

// matmul + row-broadcast bias, the projection idiom of both forward paths
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y({x.rows(), w.cols()});
  kernels::active().matmul(x.data.data(), w.data.data(), y.data.data(), static_cast<int>(x.rows()),
                           static_cast<int>(x.cols()), static_cast<int>(w.cols()), false);
  for (int64_t r = 0; r < y.rows(); ++r)
    kernels::active().add(y.data.data() + r * y.cols(), b.data.data(), y.data.data() + r * y.cols(),
                          static_cast<size_t>(y.cols()));
  return y;
}

Tensor slice_cols_copy(const Tensor& x, int64_t c0, int64_t c1) {
  Tensor y({x.rows(), c1 - c0});
  for (int64_t r = 0; r < x.rows(); ++r)
    std::copy_n(x.data.data() + r * x.cols() + c0, c1 - c0, y.data.data() + r * (c1 - c0));
  return y;
}

// Runs the transformer blocks, returning the final pre-head hidden states.
// The same kernel-call sequence as the tape path, so logits agree bitwise.
Tensor run_blocks(const Checkpoint& ckpt, const std::vector<int>& tokens, const ActivationHook* hook,
                  ActivationTrace* trace) {
  const ModelConfig& c = ckpt.config;
  const auto& P = ckpt.params;
  int64_t t = static_cast<int64_t>(tokens.size());
  int64_t d = c.model_dim;
  int hd = c.head_dim();
  const auto& K = kernels::active();

  Tensor x({t, d});
  {
    const Tensor& te = P.at("tok_emb");
    const Tensor& pe = P.at("pos_emb");
    Tensor tokx({t, d});
    for (int64_t i = 0; i < t; ++i)
      std::copy_n(te.data.data() + static_cast<int64_t>(tokens[static_cast<size_t>(i)]) * d, d,
                  tokx.data.data() + i * d);
    K.add(tokx.data.data(), pe.data.data(), x.data.data(), static_cast<size_t>(t * d));
  }

  Tensor mask = causal_mask(t);
  if (trace) trace->layers.clear();

  for (int l = 0; l < c.num_layers; ++l) {
    std::string p = "l" + std::to_string(l) + ".";
    Tensor ln1({t, d});
    fwd::layer_norm(x.data.data(), P.at(p + "ln1.g").data.data(), P.at(p + "ln1.b").data.data(),
                    ln1.data.data(), t, d, 1e-5);
    Tensor q = linear(ln1, P.at(p + "attn.wq"), P.at(p + "attn.bq"));
    Tensor kk = linear(ln1, P.at(p + "attn.wk"), P.at(p + "attn.bk"));
    Tensor vv = linear(ln1, P.at(p + "attn.wv"), P.at(p + "attn.bv"));

    Tensor cat({t, d});
    for (int h = 0; h < c.num_heads; ++h) {
      int64_t c0 = static_cast<int64_t>(h) * hd, c1 = c0 + hd;
      Tensor qh = slice_cols_copy(q, c0, c1);
      Tensor kh = slice_cols_copy(kk, c0, c1);
      Tensor vh = slice_cols_copy(vv, c0, c1);
      Tensor scores({t, t});
      kernels::matmul_a_bt(qh.data.data(), kh.data.data(), scores.data.data(), static_cast<int>(t), hd,
                           static_cast<int>(t), false);
      Tensor scaled({t, t});
      K.scale(scores.data.data(), 1.0 / std::sqrt(static_cast<double>(hd)), scaled.data.data(),
              scores.data.size());
      Tensor masked({t, t});
      K.add(scaled.data.data(), mask.data.data(), masked.data.data(), masked.data.size());
      Tensor probs({t, t});
      fwd::row_softmax(masked.data.data(), probs.data.data(), t, t);
      Tensor oh({t, hd});
      K.matmul(probs.data.data(), vh.data.data(), oh.data.data(), static_cast<int>(t), static_cast<int>(t),
               hd, false);
      for (int64_t r = 0; r < t; ++r)
        std::copy_n(oh.data.data() + r * hd, hd, cat.data.data() + r * d + c0);
    }
    Tensor attn_out = linear(cat, P.at(p + "attn.wo"), P.at(p + "attn.bo"));
    Tensor x2({t, d});
    K.add(x.data.data(), attn_out.data.data(), x2.data.data(), x2.data.size());

    Tensor ln2({t, d});
    fwd::layer_norm(x2.data.data(), P.at(p + "ln2.g").data.data(), P.at(p + "ln2.b").data.data(),
                    ln2.data.data(), t, d, 1e-5);
    Tensor pre = linear(ln2, P.at(p + "mlp.w_in"), P.at(p + "mlp.b_in"));
    Tensor hidden({t, c.mlp_hidden});
    fwd::gelu(pre.data.data(), hidden.data.data(), pre.data.size());
    if (c.mlp_topk > 0)
      fwd::row_topk(hidden.data.data(), hidden.data.data(), t, c.mlp_hidden, c.mlp_topk);
    if (hook && *hook) (*hook)(l, hidden);
    if (trace) trace->layers.push_back(hidden);
    Tensor mlp_out = linear(hidden, P.at(p + "mlp.w_out"), P.at(p + "mlp.b_out"));
    Tensor x3({t, d});
    K.add(x2.data.data(), mlp_out.data.data(), x3.data.data(), x3.data.size());
    x = std::move(x3);
  }
  return x;
}

}  // namespace

ForwardResult forward(const Checkpoint& ckpt, const std::vector<int>& tokens, const ActivationHook* hook,
                      bool want_trace) {
  check_tokens(ckpt.config, tokens);
  ForwardResult res;
  Tensor x = run_blocks(ckpt, tokens, hook, want_trace ? &res.trace : nullptr);
  int64_t t = x.rows(), d = x.cols();
  Tensor lnf({t, d});
  fwd::layer_norm(x.data.data(), ckpt.params.at("lnf.g").data.data(), ckpt.params.at("lnf.b").data.data(),
                  lnf.data.data(), t, d, 1e-5);
  res.logits = linear(lnf, ckpt.params.at("head.w"), ckpt.params.at("head.b"));
  return res;
}

Tensor forward_last_logits(const Checkpoint& ckpt, const std::vector<int>& tokens,
                           const ActivationHook* hook) {
  check_tokens(ckpt.config, tokens);
  Tensor x = run_blocks(ckpt, tokens, hook, nullptr);
  int64_t d = x.cols();
  Tensor last({static_cast<int64_t>(1), d});
  std::copy_n(x.data.data() + (x.rows() - 1) * d, d, last.data.data());
  Tensor lnf({static_cast<int64_t>(1), d});
  fwd::layer_norm(last.data.data(), ckpt.params.at("lnf.g").data.data(),
                  ckpt.params.at("lnf.b").data.data(), lnf.data.data(), 1, d, 1e-5);
  Tensor logits = linear(lnf, ckpt.params.at("head.w"), ckpt.params.at("head.b"));
  logits.shape = {logits.cols()};
  return logits;
}

Tensor next_token_log_probs(const Checkpoint& ckpt, const std::vector<int>& tokens,
                            const ActivationHook* hook) {
  Tensor logits = forward_last_logits(ckpt, tokens, hook);
  Tensor out({logits.numel()});
  fwd::row_log_softmax(logits.data.data(), out.data.data(), 1, logits.numel());
  return out;
}

// --- tape forward ----------------------------------------------------------------

namespace {

// Builds the forward graph against existing parameter leaves; returns the
// logits node and (optionally) the per-layer hidden activation nodes.
int build_graph(Tape& tp, const ModelConfig& c, const std::map<std::string, int>& pnodes,
                const std::vector<int>& tokens, std::vector<int>* hidden_nodes,
                const std::vector<Tensor>* clamp_hidden) {
  auto pn = [&](const std::string& name) { return pnodes.at(name); };
  int64_t t = static_cast<int64_t>(tokens.size());
  int hd = c.head_dim();
  std::vector<int64_t> tok_ids(tokens.begin(), tokens.end());
  std::vector<int64_t> pos_ids(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) pos_ids[static_cast<size_t>(i)] = i;

  int x = tp.add(tp.embed(pn("tok_emb"), tok_ids), tp.embed(pn("pos_emb"), pos_ids));
  int mask = tp.leaf(causal_mask(t), "causal_mask");

  for (int l = 0; l < c.num_layers; ++l) {
    std::string p = "l" + std::to_string(l) + ".";
    int ln1 = tp.layer_norm(x, pn(p + "ln1.g"), pn(p + "ln1.b"));
    int q = tp.add_rowvec(tp.matmul(ln1, pn(p + "attn.wq")), pn(p + "attn.bq"));
    int kk = tp.add_rowvec(tp.matmul(ln1, pn(p + "attn.wk")), pn(p + "attn.bk"));
    int vv = tp.add_rowvec(tp.matmul(ln1, pn(p + "attn.wv")), pn(p + "attn.bv"));
    std::vector<int> heads;
    for (int h = 0; h < c.num_heads; ++h) {
      int64_t c0 = static_cast<int64_t>(h) * hd, c1 = c0 + hd;
      int qh = tp.slice_cols(q, c0, c1);
      int kh = tp.slice_cols(kk, c0, c1);
      int vh = tp.slice_cols(vv, c0, c1);
      int scores = tp.scale(tp.matmul_bt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd)));
      int probs = tp.row_softmax(tp.add(scores, mask));
      heads.push_back(tp.matmul(probs, vh));
    }
    int cat = tp.concat_cols(heads);
    x = tp.add(x, tp.add_rowvec(tp.matmul(cat, pn(p + "attn.wo")), pn(p + "attn.bo")));

    int ln2 = tp.layer_norm(x, pn(p + "ln2.g"), pn(p + "ln2.b"));
    int pre = tp.add_rowvec(tp.matmul(ln2, pn(p + "mlp.w_in")), pn(p + "mlp.b_in"));
    int hidden;
    if (clamp_hidden) {
      const Tensor& ch = (*clamp_hidden)[static_cast<size_t>(l)];
      if (ch.rank() != 2 || ch.rows() != t || ch.cols() != c.mlp_hidden)
        throw std::invalid_argument("forward_tape: clamp tensor for layer " + std::to_string(l) +
                                    " has shape " + ch.shape_str());
      hidden = tp.leaf(ch, "hidden." + std::to_string(l));
    } else {
      hidden = tp.gelu(pre);
      if (c.mlp_topk > 0) hidden = tp.row_topk(hidden, c.mlp_topk);
    }
    if (hidden_nodes) hidden_nodes->push_back(hidden);
    x = tp.add(x, tp.add_rowvec(tp.matmul(hidden, pn(p + "mlp.w_out")), pn(p + "mlp.b_out")));
  }
  int lnf = tp.layer_norm(x, pn("lnf.g"), pn("lnf.b"));
  return tp.add_rowvec(tp.matmul(lnf, pn("head.w")), pn("head.b"));
}

}  // namespace

TapeForward forward_tape(const Checkpoint& ckpt, const std::vector<int>& tokens,
                         const std::vector<Tensor>* clamp_hidden) {
  check_tokens(ckpt.config, tokens);
  if (clamp_hidden && static_cast<int>(clamp_hidden->size()) != ckpt.config.num_layers)
    throw std::invalid_argument("forward_tape: clamp_hidden needs one tensor per layer");
  TapeForward tf;
  for (const auto& [name, t] : ckpt.params) tf.param_nodes[name] = tf.tape.leaf(t, name);
  tf.logits = build_graph(tf.tape, ckpt.config, tf.param_nodes, tokens, &tf.hidden, clamp_hidden);
  return tf;
}

// --- generation --------------------------------------------------------------------

int sample_token(const Tensor& logits, const DecodeParams& decode, Rng& rng,
                 const std::vector<int>& banned, bool* fell_back) {
  if (fell_back) *fell_back = false;
  Tensor masked = logits;
  for (int b : banned) masked.at(b) = -1e30;
  int64_t n = masked.numel();

  auto argmax = [&]() {
    int64_t best = -1;
    for (int64_t i = 0; i < n; ++i) {
      if (!std::isfinite(masked.at(i))) continue;
      if (best < 0 || masked.at(i) > masked.at(best)) best = i;
    }
    return static_cast<int>(best < 0 ? 0 : best);
  };
  if (decode.temperature < 1e-9) return argmax();  // greedy limit

  Tensor probs({n});
  Tensor scaled({n});
  kernels::active().scale(masked.data.data(), 1.0 / decode.temperature, scaled.data.data(),
                          scaled.data.size());
  fwd::row_log_softmax(scaled.data.data(), probs.data.data(), 1, n);
  for (int64_t i = 0; i < n; ++i) probs.at(i) = std::exp(probs.at(i));

  // nucleus filter: smallest prefix of (prob desc, id asc) covering top_p
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (probs.at(a) != probs.at(b)) return probs.at(a) > probs.at(b);
    return a < b;
  });
  double cum = 0.0;
  size_t kept = 0;
  for (; kept < order.size(); ++kept) {
    cum += probs.at(order[kept]);
    if (cum >= decode.top_p) {
      ++kept;
      break;
    }
  }
  if (kept == 0 || !(cum > 0.0) || !std::isfinite(cum)) {
    // degenerate distribution after filtering: fall back to argmax
    if (fell_back) *fell_back = true;
    return argmax();
  }
  double u = rng.uniform() * cum;
  double acc = 0.0;
  int tok = static_cast<int>(order[kept - 1]);
  for (size_t i = 0; i < kept; ++i) {
    acc += probs.at(order[i]);
    if (u < acc) {
      tok = static_cast<int>(order[i]);
      break;
    }
  }
  return tok;
}

GenerateResult generate_turn(const Checkpoint& ckpt, const Vocab& v, const DialogueHistory& history,
                             const GateState* gate, const DecodeParams& decode, uint64_t rng_seed) {
  if (history.turns.empty() || !history.turns.back().model.empty())
    throw std::invalid_argument("generate_turn: last history turn must await a model response");
  if (decode.max_tokens < 1) throw std::invalid_argument("generate_turn: max_tokens must be >= 1");

  int budget = ckpt.config.context_len - decode.max_tokens - 1;
  if (budget < 4) throw std::invalid_argument("generate_turn: context too small for decode budget");
  std::vector<int> cur = serialize_dialogue(v, history, budget, true);

  ActivationHook hook;
  const ActivationHook* hook_ptr = nullptr;
  if (gate && gate->mode() != GateMode::kOff) {
    hook = [gate](int layer, Tensor& hidden) { gate->apply(layer, hidden); };
    hook_ptr = &hook;
  }

  Rng rng(rng_seed);
  GenerateResult res;
  const std::vector<int> banned = {v.pad, v.bos, v.usr, v.mdl};

  for (int step = 0; step < decode.max_tokens; ++step) {
    Tensor logits = forward_last_logits(ckpt, cur, hook_ptr);
    bool fell_back = false;
    int tok = sample_token(logits, decode, rng, banned, &fell_back);
    if (fell_back) ++res.fallback_count;
    if (tok == v.sep) break;
    res.tokens.push_back(tok);
    cur.push_back(tok);
  }
  return res;
}

// --- training ------------------------------------------------------------------------

TrainResult train(const ModelConfig& config, const std::vector<std::vector<int>>& train_seqs,
                  const std::vector<std::vector<int>>& val_seqs, const TrainParams& params) {
  config.validate();
  std::vector<size_t> usable;
  for (size_t i = 0; i < train_seqs.size(); ++i)
    if (train_seqs[i].size() >= 2) usable.push_back(i);
  if (usable.empty()) throw std::invalid_argument("train: no sequence with at least two tokens");
  for (size_t i : usable)
    check_tokens(config, train_seqs[i]);

  TrainResult result;
  result.checkpoint = init_checkpoint(config);
  Checkpoint& ckpt = result.checkpoint;

  // Adam state, keyed in the params map's (sorted) order
  std::vector<std::string> names;
  for (const auto& [name, t] : ckpt.params) {
    (void)t;
    names.push_back(name);
  }
  std::map<std::string, Tensor> m1, m2;
  for (const auto& n : names) {
    m1[n] = Tensor::zeros(ckpt.params[n].shape);
    m2[n] = Tensor::zeros(ckpt.params[n].shape);
  }

  int64_t step = 0;
  double last_loss = 0.0;
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    Rng shuffle_rng = Rng::stream(params.seed, "train.epoch." + std::to_string(epoch));
    std::vector<size_t> order = usable;
    shuffle_rng.shuffle(order);

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(params.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(params.batch_size));
      Tape tape;
      std::map<std::string, int> pnodes;
      for (const auto& n : names) pnodes[n] = tape.leaf(ckpt.params[n], n);

      int total_nll = -1;
      int64_t total_targets = 0;
      int sparsity = -1;
      for (size_t bi = start; bi < end; ++bi) {
        const std::vector<int>& seq = train_seqs[order[bi]];
        std::vector<int> inputs(seq.begin(), seq.end() - 1);
        std::vector<int64_t> targets(seq.begin() + 1, seq.end());
        std::vector<int> hidden_nodes;
        int logits = build_graph(tape, config, pnodes, inputs,
                                 params.activation_l1 > 0.0 ? &hidden_nodes : nullptr, nullptr);
        int ls = tape.row_log_softmax(logits);
        int picked = tape.pick(ls, targets);
        int nll = tape.scale(tape.sum(picked), -1.0);
        total_nll = total_nll < 0 ? nll : tape.add(total_nll, nll);
        total_targets += static_cast<int64_t>(inputs.size());
        for (int h : hidden_nodes) {
          int m = tape.mean(tape.abs_(h));
          sparsity = sparsity < 0 ? m : tape.add(sparsity, m);
        }
      }

      int loss = tape.scale(total_nll, 1.0 / static_cast<double>(total_targets));
      if (sparsity >= 0) {
        double norm = params.activation_l1 / static_cast<double>((end - start) * config.num_layers);
        loss = tape.add(loss, tape.scale(sparsity, norm));
      }
      last_loss = tape.value(loss).item();
      ++step;
      if (!std::isfinite(last_loss))
        throw std::runtime_error("train: loss diverged (non-finite) at step " + std::to_string(step));
      result.log.push_back({step, last_loss});

      std::vector<Tensor> grads = tape.backward(loss);

      // global-norm clip
      double sq = 0.0;
      for (const auto& n : names) {
        const Tensor& g = grads[static_cast<size_t>(pnodes.at(n))];
        for (double v : g.data) sq += v * v;
      }
      double norm = std::sqrt(sq);
      double gscale = (params.clip_norm > 0 && norm > params.clip_norm) ? params.clip_norm / norm : 1.0;

      double lr_t = params.lr;
      if (params.warmup_steps > 0 && step < params.warmup_steps)
        lr_t = params.lr * static_cast<double>(step) / static_cast<double>(params.warmup_steps);
      double bc1 = 1.0 - std::pow(params.beta1, static_cast<double>(step));
      double bc2 = 1.0 - std::pow(params.beta2, static_cast<double>(step));

      for (const auto& n : names) {
        const Tensor& g = grads[static_cast<size_t>(pnodes.at(n))];
        Tensor& p = ckpt.params[n];
        Tensor& m = m1[n];
        Tensor& v2 = m2[n];
        bool decay = params.weight_decay > 0.0 && n.find(".w") != std::string::npos;
        for (size_t i = 0; i < p.data.size(); ++i) {
          double gi = g.data[i] * gscale;
          m.data[i] = params.beta1 * m.data[i] + (1.0 - params.beta1) * gi;
          v2.data[i] = params.beta2 * v2.data[i] + (1.0 - params.beta2) * gi * gi;
          double mhat = m.data[i] / bc1;
          double vhat = v2.data[i] / bc2;
          p.data[i] -= lr_t * mhat / (std::sqrt(vhat) + params.adam_eps);
          if (decay) p.data[i] -= lr_t * params.weight_decay * p.data[i];
        }
      }
    }
  }

  ckpt.meta.steps = step;
  ckpt.meta.final_train_loss = last_loss;
  ckpt.meta.final_val_loss = val_seqs.empty() ? last_loss : mean_nll(ckpt, val_seqs, nullptr);
  if (params.target_val_loss > 0.0 && ckpt.meta.final_val_loss > params.target_val_loss)
    throw std::runtime_error("train: validation loss " + std::to_string(ckpt.meta.final_val_loss) +
                             " above target " + std::to_string(params.target_val_loss));
  return result;
}

// --- likelihoods ----------------------------------------------------------------------

double mean_nll(const Checkpoint& ckpt, const std::vector<std::vector<int>>& seqs, const GateState* gate) {
  ActivationHook hook;
  const ActivationHook* hook_ptr = nullptr;
  if (gate && gate->mode() != GateMode::kOff) {
    hook = [gate](int layer, Tensor& hidden) { gate->apply(layer, hidden); };
    hook_ptr = &hook;
  }
  double total = 0.0;
  int64_t count = 0;
  for (const auto& seq : seqs) {
    if (seq.size() < 2) continue;
    ForwardResult fr = forward(ckpt, std::vector<int>(seq.begin(), seq.end() - 1), hook_ptr, false);
    int64_t t = fr.logits.rows();
    Tensor ls(fr.logits.shape);
    fwd::row_log_softmax(fr.logits.data.data(), ls.data.data(), t, fr.logits.cols());
    for (int64_t i = 0; i < t; ++i) {
      total -= ls.at(i, seq[static_cast<size_t>(i) + 1]);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("mean_nll: empty dataset");
  return total / static_cast<double>(count);
}

double perplexity(const Checkpoint& ckpt, const std::vector<std::vector<int>>& seqs, const GateState* gate) {
  return std::exp(mean_nll(ckpt, seqs, gate));
}

double answer_probability(const Checkpoint& ckpt, const std::vector<int>& prefix,
                          const std::vector<int>& answer, const GateState* gate) {
  if (prefix.empty() || answer.empty())
    throw std::invalid_argument("answer_probability: prefix and answer must be non-empty");
  ActivationHook hook;
  const ActivationHook* hook_ptr = nullptr;
  if (gate && gate->mode() != GateMode::kOff) {
    hook = [gate](int layer, Tensor& hidden) { gate->apply(layer, hidden); };
    hook_ptr = &hook;
  }
  std::vector<int> full = prefix;
  full.insert(full.end(), answer.begin(), answer.end());
  std::vector<int> inputs(full.begin(), full.end() - 1);
  ForwardResult fr = forward(ckpt, inputs, hook_ptr, false);
  Tensor ls(fr.logits.shape);
  fwd::row_log_softmax(fr.logits.data.data(), ls.data.data(), fr.logits.rows(), fr.logits.cols());
  double logp = 0.0;
  for (size_t i = 0; i < answer.size(); ++i) {
    int64_t row = static_cast<int64_t>(prefix.size()) - 1 + static_cast<int64_t>(i);
    logp += ls.at(row, answer[i]);
  }
  return std::exp(logp);
}

}  // namespace ng
