// Compression-aware attack: sign-PGD over a patch-restricted perturbation
// that rewrites the importance ranking at the compression layer, plus the
// random-noise and answer-flipping baselines it is compared against.
//
// The attack never runs compression: it optimizes against the full-sequence
// scores at the target layer, which is exactly what a later compression
// stage consumes. Perturbations live only on the least-important patches of
// the CLEAN image, so the visible content the model is supposed to read
// stays untouched.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vtc/compressor.hpp"
#include "vtc/model.hpp"
#include "vtc/random.hpp"
#include "vtc/tape.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

struct AttackConfig {
  double epsilon = 32.0 / 255.0;  // l-inf budget, pixel units
  double step = 2.0 / 255.0;      // sign-PGD step
  int iterations = 100;
  int layer = 2;        // the layer whose scores the attack rewrites
  int n_least = -1;     // -1: ceil(0.2 * n_V)
  int n_most = -1;      // -1: ceil(0.2 * n_V)
  int groups = 4;
  double alpha = 1.0;        // least-vs-most pressure
  double beta = 0.5;         // within-least ordering pressure
  double lambda_erase = 0.1;
  double lambda_key = 0.5;
  std::vector<int> ref_prompt_indices;  // empty: final text token
  std::uint64_t seed = 0;

  AttackConfig resolved(int n_visual) const {
    AttackConfig c = *this;
    if (c.n_least < 0) c.n_least = (n_visual * 2 + 9) / 10;
    if (c.n_most < 0) c.n_most = (n_visual * 2 + 9) / 10;
    return c;
  }

  void validate(int n_visual, int depth) const {
    const AttackConfig c = resolved(n_visual);
    if (!(c.epsilon > 0.0 && c.epsilon <= 1.0))
      throw std::invalid_argument("attack: epsilon outside (0, 1]");
    if (c.step <= 0.0) throw std::invalid_argument("attack: non-positive step");
    if (c.iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
    if (c.layer < 1 || c.layer > depth)
      throw std::invalid_argument("attack: target layer outside the model");
    if (c.n_least < 1 || c.n_most < 0 || c.n_least + c.n_most > n_visual)
      throw std::invalid_argument("attack: region sizes exceed the token budget");
    if (c.groups < 1 || c.groups > c.n_least)
      throw std::invalid_argument("attack: group count outside [1, n_least]");
  }
};

struct RegionPartition {
  std::vector<int> omega_least;  // patch ids, ascending
  std::vector<int> omega_most;   // patch ids, ascending
  // Slices of omega_least ordered by descending clean score; group 0 holds
  // the highest-informativeness members, the last group absorbs any
  // remainder.
  std::vector<std::vector<int>> least_groups;
};

struct PairSets {
  // p_lm[g]: (least member of group g, most member) preference pairs.
  std::vector<std::vector<std::pair<int, int>>> p_lm;
  // (member of a later group, member of an earlier group): the later, less
  // informative group must come out ranked higher.
  std::vector<std::pair<int, int>> p_ll;

  std::size_t lm_count() const {
    std::size_t n = 0;
    for (const auto& g : p_lm) n += g.size();
    return n;
  }
};

struct Perturbation {
  Tensor delta;                     // same shape as the image
  std::vector<char> patch_support;  // 1 where the patch may carry signal
  double epsilon = 0.0;

  Tensor apply(const Tensor& image) const {
    if (!image.same_shape(delta)) throw std::invalid_argument("perturbation: shape mismatch");
    Tensor out = image;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += delta.v[i];
    return out;
  }
};

struct AttackResult {
  Perturbation pert;
  std::vector<double> loss_history;  // loss at the initial delta and after every step
  RegionPartition partition;
};

namespace detail {

// Clean-input importance scores and layer output at the target layer.
struct CleanLayerState {
  std::vector<double> scores;
  Tensor layer_out;  // full hidden-state matrix leaving the layer
};

inline CleanLayerState clean_layer_state(const ModelWeights& w, const Tensor& image,
                                         const std::vector<int>& prompt, int layer,
                                         const std::vector<int>& ref_prompt_indices) {
  Tape tape;
  const WeightNodes wn = bind_weights(tape, w, false);
  ForwardOptions opt;
  opt.up_to_layer = layer;
  const ForwardGraph g = build_forward(tape, wn, w.cfg, tape.leaf(image), prompt, opt);
  const LayerNodes& ln = g.layers[layer - 1];
  std::vector<Tensor> attn;
  attn.reserve(ln.attn.size());
  for (int a : ln.attn) attn.push_back(tape.val(a));
  const auto refs = ref_rows(ref_prompt_indices, w.cfg.n_visual(), w.cfg.prompt_len);
  CleanLayerState st;
  st.scores = importance_scores(attn, refs, w.cfg.n_visual());
  st.layer_out = tape.val(ln.x_out_prehook);
  return st;
}

inline Tensor gather_rows_value(const Tensor& t, const std::vector<int>& rows) {
  Tensor out(static_cast<int>(rows.size()), t.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < t.cols; ++c) out.at(static_cast<int>(i), c) = t.at(rows[i], c);
  return out;
}

}  // namespace detail

// Partition the patches by clean informativeness at the target layer: the
// n_most highest scorers, the n_least lowest, and the least set sliced into
// `groups` score-ordered groups (group 0 = most informative of the least).
inline RegionPartition select_regions(const ModelWeights& w, const Tensor& image,
                                      const std::vector<int>& prompt, int layer, int n_least,
                                      int n_most, int groups,
                                      const std::vector<int>& ref_prompt_indices = {}) {
  const int n_v = w.cfg.n_visual();
  if (n_least < 1 || n_most < 0 || n_least + n_most > n_v)
    throw std::invalid_argument("select_regions: region sizes exceed the token budget");
  if (groups < 1 || groups > n_least)
    throw std::invalid_argument("select_regions: group count outside [1, n_least]");
  const auto st = detail::clean_layer_state(w, image, prompt, layer, ref_prompt_indices);

  RegionPartition part;
  if (n_most > 0)
    part.omega_most = compress(st.scores, static_cast<double>(n_most) / n_v, n_v,
                               SelectionMode::top);
  part.omega_least =
      compress(st.scores, static_cast<double>(n_least) / n_v, n_v, SelectionMode::bottom);

  // Groups slice the least set in descending clean-score order.
  std::vector<int> by_score = part.omega_least;
  std::sort(by_score.begin(), by_score.end(), [&](int a, int b) {
    if (st.scores[a] != st.scores[b]) return st.scores[a] > st.scores[b];
    return a < b;
  });
  const int base = n_least / groups;
  part.least_groups.resize(groups);
  int cursor = 0;
  for (int g = 0; g < groups; ++g) {
    const int take = (g + 1 < groups) ? base : n_least - cursor;  // remainder to the last
    part.least_groups[g].assign(by_score.begin() + cursor, by_score.begin() + cursor + take);
    cursor += take;
  }
  return part;
}

inline PairSets make_pair_sets(const RegionPartition& part) {
  PairSets ps;
  ps.p_lm.resize(part.least_groups.size());
  for (std::size_t g = 0; g < part.least_groups.size(); ++g)
    for (int l : part.least_groups[g])
      for (int m : part.omega_most) ps.p_lm[g].push_back({l, m});
  for (std::size_t a = 0; a < part.least_groups.size(); ++a)
    for (std::size_t b = a + 1; b < part.least_groups.size(); ++b)
      for (int lb : part.least_groups[b])
        for (int la : part.least_groups[a]) ps.p_ll.push_back({lb, la});
  return ps;
}

// Pairwise logistic ranking loss: every least token should outscore every
// most token, and later (less informative) least groups should outscore
// earlier ones.
inline double loss_rank(const std::vector<double>& s, const PairSets& ps, double alpha,
                        double beta) {
  double lm = 0.0;
  for (const auto& g : ps.p_lm)
    for (const auto& [l, m] : g) lm += log_sigmoid_scalar(s.at(l) - s.at(m));
  double ll = 0.0;
  for (const auto& [lb, la] : ps.p_ll) ll += log_sigmoid_scalar(s.at(lb) - s.at(la));
  return -alpha * lm - beta * ll;
}

// Mean query-key alignment between reference rows and the least patches,
// negated: minimizing drives the keys toward the reference queries.
inline double loss_key(const Tensor& q, const Tensor& k, const std::vector<int>& least,
                       const std::vector<int>& refs) {
  if (least.empty() || refs.empty()) throw std::invalid_argument("loss_key: empty index set");
  if (q.cols != k.cols) throw std::invalid_argument("loss_key: width mismatch");
  double total = 0.0;
  for (int r : refs)
    for (int l : least)
      for (int c = 0; c < q.cols; ++c) total += q.at(r, c) * k.at(l, c);
  return -total / (static_cast<double>(least.size()) * refs.size());
}

// Mean squared deviation of the least tokens from their clean hidden states,
// negated: minimizing pushes the perturbed states away.
inline double loss_erase(const Tensor& pert_tokens, const Tensor& clean_tokens,
                         const std::vector<int>& least) {
  if (least.empty()) throw std::invalid_argument("loss_erase: empty index set");
  if (!pert_tokens.same_shape(clean_tokens))
    throw std::invalid_argument("loss_erase: shape mismatch");
  double total = 0.0;
  for (int l : least)
    for (int c = 0; c < pert_tokens.cols; ++c) {
      const double d = pert_tokens.at(l, c) - clean_tokens.at(l, c);
      total += d * d;
    }
  return -total / static_cast<double>(least.size());
}

namespace detail {

inline int pair_diff_node(Tape& tape, int scores, const std::vector<std::pair<int, int>>& pairs) {
  std::vector<int> hi, lo;
  hi.reserve(pairs.size());
  lo.reserve(pairs.size());
  for (const auto& [a, b] : pairs) {
    hi.push_back(a);
    lo.push_back(b);
  }
  const int sh = tape.slice(scores, std::move(hi), 1, static_cast<int>(pairs.size()));
  const int sl = tape.slice(scores, std::move(lo), 1, static_cast<int>(pairs.size()));
  return tape.sub(sh, sl);
}

}  // namespace detail

// Tape forms of the three loss terms; `scores` is a 1 x n_V node.
inline int loss_rank_node(Tape& tape, int scores, const PairSets& ps, double alpha,
                          double beta) {
  int total = tape.leaf(Tensor::scalar(0.0), false);
  std::vector<std::pair<int, int>> lm_flat;
  for (const auto& g : ps.p_lm) lm_flat.insert(lm_flat.end(), g.begin(), g.end());
  if (!lm_flat.empty() && alpha != 0.0) {
    const int term = tape.sum(tape.log_sigmoid(detail::pair_diff_node(tape, scores, lm_flat)));
    total = tape.add(total, tape.scale(term, -alpha));
  }
  if (!ps.p_ll.empty() && beta != 0.0) {
    const int term = tape.sum(tape.log_sigmoid(detail::pair_diff_node(tape, scores, ps.p_ll)));
    total = tape.add(total, tape.scale(term, -beta));
  }
  return total;
}

inline int loss_key_node(Tape& tape, int q, int k, const std::vector<int>& least,
                         const std::vector<int>& refs) {
  if (least.empty() || refs.empty()) throw std::invalid_argument("loss_key: empty index set");
  const int qr = tape.gather_rows(q, refs);
  const int kl = tape.gather_rows(k, least);
  return tape.neg(tape.mean(tape.matmul(qr, kl, false, true)));
}

inline int loss_erase_node(Tape& tape, int pert_tokens, const Tensor& clean_tokens,
                           const std::vector<int>& least) {
  if (least.empty()) throw std::invalid_argument("loss_erase: empty index set");
  const int pl = tape.gather_rows(pert_tokens, least);
  const int cl = tape.leaf(detail::gather_rows_value(clean_tokens, least), false);
  const int sq = tape.squared_norm(tape.sub(pl, cl));
  return tape.scale(sq, -1.0 / static_cast<double>(least.size()));
}

namespace detail {

struct DeltaState {
  Tensor delta;
  std::vector<char> support;  // per patch
};

inline DeltaState init_delta(const Tensor& image, const std::vector<int>& patches, double eps,
                             std::uint64_t seed, int n_patches) {
  DeltaState st;
  st.delta = Tensor::zeros(image.rows, image.cols);
  st.support.assign(n_patches, 0);
  Rng rng(seed);
  for (int p : patches) {
    st.support[p] = 1;
    for (int c = 0; c < image.cols; ++c)
      st.delta.at(p, c) = std::clamp(rng.normal(0.0, 1.0), -eps, eps);
  }
  return st;
}

inline void signed_step(DeltaState& st, const Tensor& grad, double step, double eps) {
  for (int p = 0; p < st.delta.rows; ++p) {
    if (!st.support[p]) continue;
    for (int c = 0; c < st.delta.cols; ++c) {
      const double g = grad.at(p, c);
      const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
      st.delta.at(p, c) = std::clamp(st.delta.at(p, c) - step * s, -eps, eps);
    }
  }
}

// Fold the [0,1] clamp into the stored perturbation so image + delta is the
// exact tensor the optimization evaluated. Clamping only ever shrinks a
// pixel's deviation, so the budget survives.
inline Perturbation fold(const Tensor& image, const DeltaState& st, double eps) {
  Perturbation p;
  p.delta = Tensor::zeros(image.rows, image.cols);
  p.patch_support = st.support;
  p.epsilon = eps;
  for (std::size_t i = 0; i < image.v.size(); ++i)
    p.delta.v[i] = std::clamp(image.v[i] + st.delta.v[i], 0.0, 1.0) - image.v[i];
  return p;
}

}  // namespace detail

// Sign-PGD on the ranking/key/erase objective, perturbing only the least
// important patches. Gaussian init clipped to the budget; every step stays
// inside the epsilon ball and off-support entries stay exactly zero.
inline AttackResult caa_attack(const ModelWeights& w, const Tensor& image,
                               const std::vector<int>& prompt, const AttackConfig& cfg_in) {
  const int n_v = w.cfg.n_visual();
  cfg_in.validate(n_v, w.cfg.layers);
  const AttackConfig cfg = cfg_in.resolved(n_v);
  if (image.rows != n_v || image.cols != w.cfg.patch_dim)
    throw std::invalid_argument("caa: image shape mismatch");

  AttackResult res;
  res.partition = select_regions(w, image, prompt, cfg.layer, cfg.n_least, cfg.n_most,
                                 cfg.groups, cfg.ref_prompt_indices);
  const PairSets pairs = make_pair_sets(res.partition);
  const auto clean =
      detail::clean_layer_state(w, image, prompt, cfg.layer, cfg.ref_prompt_indices);
  const auto refs = detail::ref_rows(cfg.ref_prompt_indices, n_v, w.cfg.prompt_len);

  auto st = detail::init_delta(image, res.partition.omega_least, cfg.epsilon, cfg.seed, n_v);

  auto evaluate = [&](bool with_grad, Tensor* grad_out) {
    Tape tape;
    const WeightNodes wn = bind_weights(tape, w, false);
    const int delta = tape.leaf(st.delta, with_grad);
    const int adv = tape.clip_pass(tape.add(tape.leaf(image, false), delta), 0.0, 1.0);
    ForwardOptions opt;
    opt.up_to_layer = cfg.layer;
    const ForwardGraph g = build_forward(tape, wn, w.cfg, adv, prompt, opt);
    const LayerNodes& ln = g.layers[cfg.layer - 1];
    const int scores = importance_scores_node(tape, ln.attn, refs, n_v);
    int total = loss_rank_node(tape, scores, pairs, cfg.alpha, cfg.beta);
    total = tape.add(
        total, tape.scale(loss_erase_node(tape, ln.x_out_prehook, clean.layer_out,
                                          res.partition.omega_least),
                          cfg.lambda_erase));
    total = tape.add(total, tape.scale(loss_key_node(tape, ln.q, ln.k,
                                                     res.partition.omega_least, refs),
                                       cfg.lambda_key));
    const double value = tape.val(total).item();
    if (with_grad) *grad_out = tape.gradient_single(total, delta);
    return value;
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor grad;
    const double loss = evaluate(true, &grad);
    if (!std::isfinite(loss))
      throw std::runtime_error("caa: non-finite loss at iteration " + std::to_string(it));
    res.loss_history.push_back(loss);
    detail::signed_step(st, grad, cfg.step, cfg.epsilon);
  }
  const double final_loss = evaluate(false, nullptr);
  if (!std::isfinite(final_loss))
    throw std::runtime_error("caa: non-finite loss at iteration " +
                             std::to_string(cfg.iterations));
  res.loss_history.push_back(final_loss);
  res.pert = detail::fold(image, st, cfg.epsilon);
  return res;
}

// Uniform noise over the whole image, the weakest baseline.
inline Perturbation random_attack(const Tensor& image, double epsilon, std::uint64_t seed) {
  if (epsilon < 0.0 || epsilon > 1.0)
    throw std::invalid_argument("random_attack: epsilon outside [0, 1]");
  detail::DeltaState st;
  st.delta = Tensor::zeros(image.rows, image.cols);
  st.support.assign(image.rows, 1);
  Rng rng(seed);
  for (double& x : st.delta.v) x = rng.uniform(-epsilon, epsilon);
  if (epsilon == 0.0) std::fill(st.delta.v.begin(), st.delta.v.end(), 0.0);
  return detail::fold(image, st, epsilon);
}

struct BaselineConfig {
  std::vector<int> correct_answers = {kAnswerYes};  // Y_cor
  std::vector<int> wrong_answers = {kAnswerNo};     // Y_wro
  double epsilon = 32.0 / 255.0;
  double step = 2.0 / 255.0;
  int iterations = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (correct_answers.empty() || wrong_answers.empty())
      throw std::invalid_argument("vanilla: empty answer set");
    for (int c : correct_answers)
      for (int w : wrong_answers)
        if (c == w) throw std::invalid_argument("vanilla: answer sets overlap");
    for (int y : correct_answers)
      if (y != kAnswerYes && y != kAnswerNo)
        throw std::invalid_argument("vanilla: unknown answer token");
    for (int y : wrong_answers)
      if (y != kAnswerYes && y != kAnswerNo)
        throw std::invalid_argument("vanilla: unknown answer token");
    if (!(epsilon > 0.0 && epsilon <= 1.0))
      throw std::invalid_argument("vanilla: epsilon outside (0, 1]");
    if (step <= 0.0) throw std::invalid_argument("vanilla: non-positive step");
    if (iterations < 0) throw std::invalid_argument("vanilla: negative iterations");
  }
};

inline BaselineConfig baseline_for_label(bool label) {
  BaselineConfig c;
  c.correct_answers = {label ? kAnswerYes : kAnswerNo};
  c.wrong_answers = {label ? kAnswerNo : kAnswerYes};
  return c;
}

// Answer-flipping PGD over the whole image: raise the wrong answers' log
// probability, lower the right ones'. Compression plays no part in the
// objective.
inline AttackResult vanilla_attack(const ModelWeights& w, const Tensor& image,
                                   const std::vector<int>& prompt, const BaselineConfig& cfg) {
  cfg.validate();
  const int n_v = w.cfg.n_visual();
  if (image.rows != n_v || image.cols != w.cfg.patch_dim)
    throw std::invalid_argument("vanilla: image shape mismatch");

  AttackResult res;
  detail::DeltaState st;
  st.delta = Tensor::zeros(image.rows, image.cols);
  st.support.assign(n_v, 1);
  Rng rng(cfg.seed);
  for (double& x : st.delta.v) x = std::clamp(rng.normal(0.0, 1.0), -cfg.epsilon, cfg.epsilon);

  auto evaluate = [&](bool with_grad, Tensor* grad_out) {
    Tape tape;
    const WeightNodes wn = bind_weights(tape, w, false);
    const int delta = tape.leaf(st.delta, with_grad);
    const int adv = tape.clip_pass(tape.add(tape.leaf(image, false), delta), 0.0, 1.0);
    const ForwardGraph g = build_forward(tape, wn, w.cfg, adv, prompt);
    const int z_yes = tape.slice(g.logits, {kAnswerYes}, 1, 1);
    const int z_no = tape.slice(g.logits, {kAnswerNo}, 1, 1);
    const int margin = tape.sub(z_yes, z_no);
    const int lp_yes = tape.log_sigmoid(margin);
    const int lp_no = tape.log_sigmoid(tape.neg(margin));
    auto side_mean = [&](const std::vector<int>& ys, double sign) {
      int acc = tape.leaf(Tensor::scalar(0.0), false);
      for (int y : ys) acc = tape.add(acc, y == kAnswerYes ? lp_yes : lp_no);
      return tape.scale(acc, sign / static_cast<double>(ys.size()));
    };
    const int total =
        tape.add(side_mean(cfg.wrong_answers, -1.0), side_mean(cfg.correct_answers, 1.0));
    const double value = tape.val(total).item();
    if (with_grad) *grad_out = tape.gradient_single(total, delta);
    return value;
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor grad;
    const double loss = evaluate(true, &grad);
    if (!std::isfinite(loss))
      throw std::runtime_error("vanilla: non-finite loss at iteration " + std::to_string(it));
    res.loss_history.push_back(loss);
    detail::signed_step(st, grad, cfg.step, cfg.epsilon);
  }
  const double final_loss = evaluate(false, nullptr);
  if (!std::isfinite(final_loss))
    throw std::runtime_error("vanilla: non-finite loss at iteration " +
                             std::to_string(cfg.iterations));
  res.loss_history.push_back(final_loss);
  res.pert = detail::fold(image, st, cfg.epsilon);
  return res;
}

// One perturbation as a self-contained JSON line. %.17g round-trips doubles
// exactly, keeping replays bit-identical.
inline std::string perturbation_jsonl(const Perturbation& p, int sample_id,
                                      const std::string& config_digest,
                                      const std::vector<double>& loss_history) {
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  std::string line = "{\"sample\":" + std::to_string(sample_id) + ",\"digest\":\"" +
                     config_digest + "\",\"epsilon\":" + num(p.epsilon) +
                     ",\"rows\":" + std::to_string(p.delta.rows) +
                     ",\"cols\":" + std::to_string(p.delta.cols) + ",\"support\":[";
  for (std::size_t i = 0; i < p.patch_support.size(); ++i) {
    if (i) line += ",";
    line += p.patch_support[i] ? "1" : "0";
  }
  line += "],\"delta\":[";
  for (std::size_t i = 0; i < p.delta.v.size(); ++i) {
    if (i) line += ",";
    line += num(p.delta.v[i]);
  }
  line += "],\"loss\":[";
  for (std::size_t i = 0; i < loss_history.size(); ++i) {
    if (i) line += ",";
    line += num(loss_history[i]);
  }
  return line + "]}";
}

}  // namespace vtc
