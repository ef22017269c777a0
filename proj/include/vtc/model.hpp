// Small pre-norm decoder transformer over [visual patches; prompt tokens].
//
// Layers are 1-based. Attention a^(l), queries q^(l) and keys k^(l) belong to
// layer l; a hook installed at layer l sees a^(l) and may drop visual rows of
// layer l's output, i.e. the input to layer l+1. The causal mask lets every
// text position attend to all visual positions (visual tokens come first) and
// causally to earlier text.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "vtc/dataset.hpp"
#include "vtc/random.hpp"
#include "vtc/tape.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

struct ModelConfig {
  int grid_side = 8;
  int patch_dim = 12;
  int model_dim = 32;
  int heads = 4;
  int layers = 8;
  int ffn_dim = 64;
  int text_vocab = 11;  // 8 class tokens + BOS, SEP, QRY
  int prompt_len = kPromptLen;

  int n_visual() const { return grid_side * grid_side; }
  int head_dim() const { return model_dim / heads; }

  void validate() const {
    if (grid_side < 2 || patch_dim < 1 || model_dim < 1 || layers < 1)
      throw std::invalid_argument("model: bad dimensions");
    if (heads < 1 || model_dim % heads != 0)
      throw std::invalid_argument("model: heads must divide model dim");
    if (ffn_dim < 1 || text_vocab < 1 || prompt_len < 1)
      throw std::invalid_argument("model: bad dimensions");
  }
};

struct ModelWeights {
  ModelConfig cfg;
  Tensor patch_proj;  // patch_dim x d
  Tensor text_embed;  // vocab x d
  Tensor pos_visual;  // n_V x d
  Tensor pos_text;    // prompt_len x d
  struct Layer {
    Tensor wq, wk, wv, wo;  // d x d
    Tensor w1, w2;          // d x ffn, ffn x d
    Tensor norm1, norm2;    // 1 x d
  };
  std::vector<Layer> layers;
  Tensor norm_final;   // 1 x d
  Tensor answer_head;  // d x 2, column 0 = "yes", column 1 = "no"
};

// Initialization notes.
//
// Deep-enough models (>= 4 layers, head_dim >= 8, model_dim >= 32) start
// with three cooperating structures; smaller models get a plain variant
// (full-strength shared query/key diagonal, nothing reserved).
//
// Ranking structure. Class-token embeddings start as copies of their patch
// projection rows and every layer shares its query/key matrix, so
// query-to-template attention logits order visual tokens by content
// similarity before any training. The first two layers only order (tiny
// query/key seed, scaled-down outputs); layers three and up read attended
// content into the text stream at full strength. Dropping visual tokens
// after layer two therefore changes exactly what the later layers can read.
// Feed-forward output columns are centered to sum to zero: softplus sits
// near a positive constant for small inputs, and without centering every
// layer adds the same large vector to all tokens, washing out the cosine
// structure the logits depend on.
//
// Answer channel. RMS norm inflates near-empty background rows (tiny norm,
// positive mean), so any linear per-token functional reads background
// louder than objects and no linear head can tell "template attended" from
// "background attended". The escape is bounded and nonlinear: the first
// layer's FFN holds one softplus unit per class that scores a token's
// cosine against that class template minus penalties on two constant
// marker coordinates (one on visual positions, one on text positions).
// Background rows inflate their own visual marker, which drives the unit
//'s input negative exactly when the content match is spurious; softplus
// then pins the output near zero, bounded, and the inflation multiplies
// nothing. Object patches alone end up with an "objectness" write on a
// reserved residual coordinate. Reader layers move it with attention: the
// value matrix maps objectness to a second reserved coordinate that the
// output matrix passes through one-to-one, so the class token accumulates
// attention-pooled objectness of exactly the patches it attends. Four code
// coordinates in the last head's span give each class a sign pattern
// (copied into its text embedding), which makes that head's pooling
// class-selective. The zero-initialized answer head then has a linearly
// separable coordinate to latch onto in the first epochs. All reserved
// coordinates have zero query/key diagonal (invisible to logits), nothing
// recycles them (value rows, FFN input rows zeroed), and every matrix
// stays trainable.
inline ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto gauss = [&](int r, int c, double std) {
    Tensor t(r, c);
    for (double& x : t.v) x = rng.normal(0.0, std);
    return t;
  };
  const int d = cfg.model_dim;
  const double std_attn = 1.0 / std::sqrt(static_cast<double>(d));
  const double std_ffn_out = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim));
  const int n_class_tokens = std::max(0, std::min(cfg.text_vocab - 3, cfg.patch_dim));
  const bool deep = cfg.layers >= 4 && d >= 32 && cfg.head_dim() >= 8 &&
                    cfg.ffn_dim >= 16 && n_class_tokens >= 2;

  // Reserved coordinates (top of the last head's span) and code block.
  const int mark_text = d - 4;   // constant on text positions
  const int mark_vis = d - 3;    // constant on visual positions
  const int obj_coord = d - 2;   // per-patch objectness, written once by FFN 1
  const int pool_coord = d - 1;  // attention-pooled objectness on readers
  const int code_lo = d - 8;     // four sign-code coordinates per class
  auto is_reserved = [&](int j) { return deep && j >= d - 4; };
  // Even-parity 4-bit codes: pairwise distinct, mostly orthogonal as
  // +/-1 patterns.
  static constexpr int kCodes[8] = {0x0, 0x3, 0x5, 0x6, 0x9, 0xA, 0xC, 0xF};

  ModelWeights w;
  w.cfg = cfg;
  w.patch_proj = gauss(cfg.patch_dim, d, 0.4);
  if (deep) {
    for (int r = 0; r < cfg.patch_dim; ++r)
      for (int j = d - 4; j < d; ++j) w.patch_proj.at(r, j) = 0.0;
    for (int c = 0; c < n_class_tokens; ++c)
      for (int b = 0; b < 4; ++b)
        w.patch_proj.at(c, code_lo + b) =
            (kCodes[c % 8] >> b & 1) ? 0.8 : -0.8;
  }
  w.text_embed = gauss(cfg.text_vocab, d, 0.4);
  for (int c = 0; c < n_class_tokens; ++c)
    for (int j = 0; j < d; ++j) w.text_embed.at(c, j) = w.patch_proj.at(c, j);
  w.pos_visual = gauss(cfg.n_visual(), d, 0.05);
  w.pos_text = gauss(cfg.prompt_len, d, 0.05);
  if (deep) {
    for (int r = 0; r < cfg.text_vocab; ++r)
      for (int j = d - 4; j < d; ++j) w.text_embed.at(r, j) = 0.0;
    for (int r = 0; r < w.pos_visual.rows; ++r)
      for (int j = d - 4; j < d; ++j)
        w.pos_visual.at(r, j) = (j == mark_vis) ? 0.3 : 0.0;
    for (int r = 0; r < w.pos_text.rows; ++r)
      for (int j = d - 4; j < d; ++j)
        w.pos_text.at(r, j) = (j == mark_text) ? 1.0 : 0.0;
  }

  // Unit content directions of the class templates, for the detector bank.
  std::vector<std::vector<double>> t_hat(deep ? n_class_tokens : 0);
  for (int c = 0; c < static_cast<int>(t_hat.size()); ++c) {
    t_hat[c].assign(d, 0.0);
    double nrm = 0.0;
    for (int j = 0; j < d - 4; ++j) nrm += w.patch_proj.at(c, j) * w.patch_proj.at(c, j);
    nrm = std::sqrt(std::max(nrm, 1e-12));
    for (int j = 0; j < d - 4; ++j) t_hat[c][j] = w.patch_proj.at(c, j) / nrm;
  }
  const int n_detect = deep ? std::min(n_class_tokens, cfg.ffn_dim) : 0;
  const double detect_route = 0.18;  // objectness written per fired detector

  w.layers.resize(cfg.layers);
  for (int li = 0; li < cfg.layers; ++li) {
    auto& l = w.layers[li];
    const bool rank_only = deep && li < 2;
    const bool reader = deep && !rank_only;
    const double diag = deep ? 1.5 : 1.0;
    const double out_scale = rank_only ? 0.05 : 1.0;
    l.wq = gauss(d, d, 0.02 * diag);
    for (int j = 0; j < d; ++j)
      if (!is_reserved(j)) l.wq.at(j, j) += diag;
    l.wk = l.wq;
    l.wv = gauss(d, d, std_attn);
    l.wo = gauss(d, d, std_attn * out_scale);
    l.w1 = gauss(d, cfg.ffn_dim, std_attn);
    l.w2 = gauss(cfg.ffn_dim, d, std_ffn_out * out_scale);
    if (deep) {
      // Isolate the reserved coordinates: values and FFN features neither
      // read nor write them, except for the objectness transport below.
      for (int i = 0; i < d; ++i)
        for (int j = d - 4; j < d; ++j) l.wv.at(i, j) = 0.0;
      for (int i = d - 4; i < d; ++i)
        for (int j = 0; j < d; ++j) l.wv.at(i, j) = 0.0;
      for (int i = 0; i < d; ++i)
        for (int j = d - 4; j < d; ++j) l.wo.at(i, j) = 0.0;
      for (int i = d - 4; i < d; ++i)
        for (int j = 0; j < d; ++j) l.wo.at(i, j) = 0.0;
      for (int i = d - 4; i < d; ++i)
        for (int k = 0; k < cfg.ffn_dim; ++k) l.w1.at(i, k) = 0.0;
      for (int k = 0; k < cfg.ffn_dim; ++k)
        for (int j = d - 4; j < d; ++j) l.w2.at(k, j) = 0.0;
      if (reader) l.wv.at(obj_coord, pool_coord) = 1.0;
      l.wo.at(pool_coord, pool_coord) = 1.0;
    }
    if (deep && li == 0) {
      for (int k = 0; k < n_detect; ++k) {
        for (int j = 0; j < d; ++j) l.w1.at(j, k) = 2.0 * t_hat[k][j];
        l.w1.at(mark_vis, k) = -3.0;
        l.w1.at(mark_text, k) = -8.0;
        for (int j = 0; j < d; ++j) l.w2.at(k, j) = 0.0;
      }
    }
    // Zero-sum output columns (see note above); crafted entries come after.
    for (int j = 0; j < d; ++j) {
      double mean = 0.0;
      for (int i = 0; i < cfg.ffn_dim; ++i) mean += l.w2.at(i, j);
      mean /= static_cast<double>(cfg.ffn_dim);
      for (int i = 0; i < cfg.ffn_dim; ++i) l.w2.at(i, j) -= mean;
    }
    if (deep && li == 0)
      for (int k = 0; k < n_detect; ++k) l.w2.at(k, obj_coord) = detect_route;
    l.norm1 = Tensor::full(1, d, 1.0);
    l.norm2 = Tensor::full(1, d, 1.0);
  }
  w.norm_final = Tensor::full(1, d, 1.0);
  w.answer_head = Tensor(d, 2);
  return w;
}

// Per-layer view handed to a compression hook.
struct HookContext {
  int layer = 0;                            // 1-based
  const std::vector<Tensor>* head_attn;     // H tensors, each n x n
  const std::vector<int>* visual_index_map; // original patch id per surviving row
  int n_visual = 0;
  int n_text = 0;
};

// Returns the visual rows to keep (strictly increasing positions into the
// current visual block) or nullopt to leave the sequence unchanged.
using LayerHook = std::function<std::optional<std::vector<int>>(const HookContext&)>;

struct ForwardOptions {
  int up_to_layer = -1;  // -1: run all layers and the answer head
  LayerHook hook;
};

// Tape node ids for one layer of the forward graph.
struct LayerNodes {
  int x_in = -1;
  int x_out = -1;               // after the hook, if one fired
  int x_out_prehook = -1;       // before the hook
  int q = -1, k = -1;           // n x d
  std::vector<int> attn;        // per head, n x n
};

struct WeightNodes {
  int patch_proj, text_embed, pos_visual, pos_text, norm_final, answer_head;
  struct Layer {
    int wq, wk, wv, wo, w1, w2, norm1, norm2;
  };
  std::vector<Layer> layers;

  std::vector<int> all() const {
    std::vector<int> ids{patch_proj, text_embed, pos_visual, pos_text};
    for (const Layer& l : layers)
      for (int id : {l.wq, l.wk, l.wv, l.wo, l.w1, l.w2, l.norm1, l.norm2})
        ids.push_back(id);
    ids.push_back(norm_final);
    ids.push_back(answer_head);
    return ids;
  }
};

inline WeightNodes bind_weights(Tape& tape, const ModelWeights& w, bool needs_grad) {
  WeightNodes n;
  n.patch_proj = tape.leaf(w.patch_proj, needs_grad);
  n.text_embed = tape.leaf(w.text_embed, needs_grad);
  n.pos_visual = tape.leaf(w.pos_visual, needs_grad);
  n.pos_text = tape.leaf(w.pos_text, needs_grad);
  for (const auto& l : w.layers) {
    WeightNodes::Layer ln;
    ln.wq = tape.leaf(l.wq, needs_grad);
    ln.wk = tape.leaf(l.wk, needs_grad);
    ln.wv = tape.leaf(l.wv, needs_grad);
    ln.wo = tape.leaf(l.wo, needs_grad);
    ln.w1 = tape.leaf(l.w1, needs_grad);
    ln.w2 = tape.leaf(l.w2, needs_grad);
    ln.norm1 = tape.leaf(l.norm1, needs_grad);
    ln.norm2 = tape.leaf(l.norm2, needs_grad);
    n.layers.push_back(ln);
  }
  n.norm_final = tape.leaf(w.norm_final, needs_grad);
  n.answer_head = tape.leaf(w.answer_head, needs_grad);
  return n;
}

struct ForwardGraph {
  int image = -1;   // the image node the graph consumed
  int x0 = -1;
  std::vector<LayerNodes> layers;            // [0] is layer 1
  int logits = -1;                           // 1 x 2; -1 if stopped early
  int n_text = 0;
  std::vector<std::vector<int>> vis_map;     // surviving original patch ids after each layer
};

namespace detail {

inline Tensor causal_mask(int n) {
  Tensor m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.at(i, j) = -1e30;
  return m;
}

inline Tensor one_hot_rows(const std::vector<int>& ids, int vocab) {
  Tensor t(static_cast<int>(ids.size()), vocab);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab)
      throw std::invalid_argument("model: prompt token out of vocabulary");
    t.at(static_cast<int>(i), ids[i]) = 1.0;
  }
  return t;
}

}  // namespace detail

// Builds the forward graph on `tape` starting from an existing image node
// (n_V x patch_dim). The hook, when present, is consulted after every layer.
inline ForwardGraph build_forward(Tape& tape, const WeightNodes& wn, const ModelConfig& cfg,
                                  int image_node, const std::vector<int>& prompt,
                                  const ForwardOptions& opt = {}) {
  cfg.validate();
  if (static_cast<int>(prompt.size()) != cfg.prompt_len)
    throw std::invalid_argument("model: prompt length mismatch");
  if (tape.val(image_node).rows != cfg.n_visual() ||
      tape.val(image_node).cols != cfg.patch_dim)
    throw std::invalid_argument("model: image shape mismatch");
  const int last_layer = opt.up_to_layer < 0 ? cfg.layers : opt.up_to_layer;
  if (last_layer < 1 || last_layer > cfg.layers)
    throw std::invalid_argument("model: up_to_layer out of range");

  ForwardGraph g;
  g.image = image_node;
  g.n_text = cfg.prompt_len;

  const int vis = tape.add(tape.matmul(image_node, wn.patch_proj), wn.pos_visual);
  const int txt = tape.add(tape.matmul(tape.leaf(detail::one_hot_rows(prompt, cfg.text_vocab)),
                                       wn.text_embed),
                           wn.pos_text);
  g.x0 = tape.concat(vis, txt, 0);

  std::vector<int> vis_map(cfg.n_visual());
  for (int i = 0; i < cfg.n_visual(); ++i) vis_map[i] = i;

  const int dk = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  int x = g.x0;

  for (int layer = 1; layer <= last_layer; ++layer) {
    const WeightNodes::Layer& lw = wn.layers[layer - 1];
    LayerNodes ln;
    ln.x_in = x;
    const int n = tape.val(x).rows;

    const int h1 = tape.rms_norm_row(x, lw.norm1);
    ln.q = tape.matmul(h1, lw.wq);
    ln.k = tape.matmul(h1, lw.wk);
    const int v = tape.matmul(h1, lw.wv);
    const int mask = tape.leaf(detail::causal_mask(n), false);

    int heads_out = -1;
    for (int h = 0; h < cfg.heads; ++h) {
      const int qh = tape.slice_cols(ln.q, h * dk, (h + 1) * dk);
      const int kh = tape.slice_cols(ln.k, h * dk, (h + 1) * dk);
      const int vh = tape.slice_cols(v, h * dk, (h + 1) * dk);
      const int logits_h = tape.add(tape.scale(tape.matmul(qh, kh, false, true), attn_scale), mask);
      const int a = tape.softmax_row(logits_h);
      ln.attn.push_back(a);
      const int oh = tape.matmul(a, vh);
      heads_out = (h == 0) ? oh : tape.concat(heads_out, oh, 1);
    }
    const int attn_out = tape.matmul(heads_out, lw.wo);
    const int x_mid = tape.add(x, attn_out);

    const int h2 = tape.rms_norm_row(x_mid, lw.norm2);
    const int f = tape.matmul(tape.softplus(tape.matmul(h2, lw.w1)), lw.w2);
    int x_out = tape.add(x_mid, f);
    ln.x_out_prehook = x_out;

    if (opt.hook) {
      std::vector<Tensor> head_attn;
      head_attn.reserve(ln.attn.size());
      for (int a : ln.attn) head_attn.push_back(tape.val(a));
      HookContext ctx;
      ctx.layer = layer;
      ctx.head_attn = &head_attn;
      ctx.visual_index_map = &vis_map;
      ctx.n_visual = static_cast<int>(vis_map.size());
      ctx.n_text = cfg.prompt_len;
      if (auto kept = opt.hook(ctx)) {
        const std::vector<int>& keep = *kept;
        if (keep.empty())
          throw std::invalid_argument("model: hook returned an empty visual set");
        std::vector<int> rows;
        std::vector<int> new_map;
        int prev = -1;
        for (int p : keep) {
          if (p <= prev || p >= ctx.n_visual)
            throw std::invalid_argument("model: hook indices must be strictly increasing and in range");
          prev = p;
          rows.push_back(p);
          new_map.push_back(vis_map[p]);
        }
        for (int t = 0; t < cfg.prompt_len; ++t)
          rows.push_back(ctx.n_visual + t);
        x_out = tape.gather_rows(x_out, rows);
        vis_map = std::move(new_map);
      }
    }

    ln.x_out = x_out;
    g.layers.push_back(ln);
    g.vis_map.push_back(vis_map);
    x = x_out;
  }

  if (opt.up_to_layer < 0) {
    const int n = tape.val(x).rows;
    const int last = tape.slice_rows(x, n - 1, n);
    const int normed = tape.rms_norm_row(last, wn.norm_final);
    g.logits = tape.matmul(normed, wn.answer_head);
  }
  return g;
}

inline constexpr int kAnswerYes = 0;
inline constexpr int kAnswerNo = 1;

// Argmax over the two answer logits; exact ties resolve to "no".
inline int decode_answer(const Tensor& logits) {
  if (logits.numel() != 2) throw std::invalid_argument("model: decode expects two logits");
  return logits.v[kAnswerYes] > logits.v[kAnswerNo] ? kAnswerYes : kAnswerNo;
}

struct ForwardResult {
  Tensor logits;
  int answer = kAnswerNo;
  std::vector<std::vector<int>> vis_map;
};

inline ForwardResult forward(const ModelWeights& w, const Tensor& image,
                             const std::vector<int>& prompt, const ForwardOptions& opt = {}) {
  Tape tape;
  const WeightNodes wn = bind_weights(tape, w, false);
  const ForwardGraph g = build_forward(tape, wn, w.cfg, tape.leaf(image), prompt, opt);
  ForwardResult r;
  r.logits = tape.val(g.logits);
  r.answer = decode_answer(r.logits);
  r.vis_map = g.vis_map;
  return r;
}

// label: 1 = yes, 0 = no.
inline bool sample_correct(const ModelWeights& w, const SyntheticSample& s,
                           const ForwardOptions& opt = {}) {
  const ForwardResult r = forward(w, s.image, s.prompt, opt);
  return r.answer == (s.label == 1 ? kAnswerYes : kAnswerNo);
}

// Hook factories are invoked once per sample so stateful hooks never leak
// state across samples.
using HookFactory = std::function<LayerHook()>;

inline double accuracy(const ModelWeights& w, const std::vector<SyntheticSample>& samples,
                       const HookFactory& hook_factory = nullptr) {
  if (samples.empty()) throw std::invalid_argument("model: accuracy over empty set");
  int correct = 0;
  for (const SyntheticSample& s : samples) {
    ForwardOptions opt;
    if (hook_factory) opt.hook = hook_factory();
    correct += sample_correct(w, s, opt) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace vtc
