// Transferable attack built from two universal patch templates: a raise
// template tiled over an added uninformative border frame and a down
// template tiled over the original patches. The pair is optimized once on a
// surrogate model across a range of candidate compression layers, then
// assembled onto images without further access to the deployed model.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vtc/caa.hpp"
#include "vtc/compressor.hpp"
#include "vtc/model.hpp"
#include "vtc/random.hpp"
#include "vtc/tape.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

// Geometry of a border-augmented image: a frame of `width` uninformative
// patches wrapped around the original grid, which sits at offset
// (width, width).
struct BorderLayout {
  int side = 0;             // augmented grid side
  int width = 0;            // frame thickness
  double fill = 0.5;        // constant pixel value of the clean frame
  std::vector<int> border;  // augmented patch ids in the frame, ascending

  int interior_side() const { return side - 2 * width; }

  // Augmented patch id of original grid cell (row, col).
  int to_augmented(int row, int col) const { return (row + width) * side + (col + width); }

  bool is_border(int patch) const {
    return std::binary_search(border.begin(), border.end(), patch);
  }

  void validate() const {
    if (width < 1 || side <= 2 * width)
      throw std::invalid_argument("border layout: frame leaves no interior");
    if (!(fill >= 0.0 && fill <= 1.0))
      throw std::invalid_argument("border layout: fill outside [0, 1]");
    const int g = interior_side();
    if (static_cast<int>(border.size()) != side * side - g * g)
      throw std::invalid_argument("border layout: frame size mismatch");
    for (std::size_t i = 0; i < border.size(); ++i) {
      const int p = border[i];
      if (p < 0 || p >= side * side || (i > 0 && border[i - 1] >= p))
        throw std::invalid_argument("border layout: malformed frame set");
      const int r = p / side, c = p % side;
      if (r >= width && r < side - width && c >= width && c < side - width)
        throw std::invalid_argument("border layout: frame id inside the interior");
    }
  }
};

// One perturbation pattern per role; each is a single patch row tiled over
// every patch of its region at application time.
struct TemplatePair {
  Tensor delta_raise;  // 1 x patch_dim, applied to every border patch
  Tensor delta_down;   // 1 x patch_dim, applied to every interior patch
  double eps_raise = 0.0;
  double eps_down = 0.0;
};

// Clean-ranking split of the augmented image's tokens on the surrogate:
// the shared least/most important sets, each halved by mean clean score.
struct TransferPartition {
  std::vector<int> least_high;  // better-scoring half of the least set
  std::vector<int> least_low;
  std::vector<int> most_high;
  std::vector<int> most_low;

  std::vector<int> omega_least() const {
    std::vector<int> out = least_high;
    out.insert(out.end(), least_low.begin(), least_low.end());
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<int> omega_most() const {
    std::vector<int> out = most_high;
    out.insert(out.end(), most_low.begin(), most_low.end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

struct TransferConfig {
  double eps_raise = 1.0;          // frame budget; the frame carries no content
  double eps_down = 16.0 / 255.0;  // interior budget, kept small on purpose
  double step_raise = 4.0 / 255.0;
  double step_down = 1.0 / 255.0;
  int iterations = 200;
  std::vector<int> candidate_layers;  // empty: 1 .. min(11, depth - 1)
  int n_least = -1;                   // -1: ceil(0.2 * augmented token count)
  int n_most = -1;
  double alpha_raise = 1.0;
  double gamma_raise = 0.5;
  double alpha_down = 1.0;
  double gamma_down = 0.5;
  int border_width = 1;
  double fill = 0.5;
  std::vector<int> ref_prompt_indices;  // empty: final text token
  std::uint64_t seed = 0;
  // Optional explicit region split, applied to every image in the batch.
  // All four sets empty: compute the split per image from the clean ranking.
  // An experiment that knows the frame geometry a priori can pin the frame
  // as the least set here instead of inferring it from scores.
  TransferPartition partition_override;

  bool has_partition_override() const {
    return !(partition_override.least_high.empty() && partition_override.least_low.empty() &&
             partition_override.most_high.empty() && partition_override.most_low.empty());
  }

  TransferConfig resolved(int n_visual_aug, int depth) const {
    TransferConfig c = *this;
    if (c.candidate_layers.empty())
      for (int l = 1; l <= std::min(11, depth - 1); ++l) c.candidate_layers.push_back(l);
    if (c.n_least < 0) c.n_least = (n_visual_aug * 2 + 9) / 10;
    if (c.n_most < 0) c.n_most = (n_visual_aug * 2 + 9) / 10;
    return c;
  }

  void validate(int n_visual_aug, int depth) const {
    const TransferConfig c = resolved(n_visual_aug, depth);
    if (!(c.eps_raise >= 0.0 && c.eps_raise <= 1.0) ||
        !(c.eps_down >= 0.0 && c.eps_down <= 1.0))
      throw std::invalid_argument("transfer: budget outside [0, 1]");
    if (c.step_raise <= 0.0 || c.step_down <= 0.0)
      throw std::invalid_argument("transfer: non-positive step");
    if (c.iterations < 0) throw std::invalid_argument("transfer: negative iterations");
    if (c.candidate_layers.empty())
      throw std::invalid_argument("transfer: no candidate layers");
    for (std::size_t i = 0; i < c.candidate_layers.size(); ++i) {
      const int l = c.candidate_layers[i];
      if (l < 1 || l > depth)
        throw std::invalid_argument("transfer: candidate layer outside the model");
      if (i > 0 && c.candidate_layers[i - 1] >= l)
        throw std::invalid_argument("transfer: candidate layers must be ascending");
    }
    if (c.n_least < 1 || c.n_most < 1 || c.n_least + c.n_most > n_visual_aug)
      throw std::invalid_argument("transfer: region sizes exceed the token budget");
    if (c.alpha_raise < 0.0 || c.gamma_raise < 0.0 || c.alpha_down < 0.0 ||
        c.gamma_down < 0.0)
      throw std::invalid_argument("transfer: negative loss weight");
    if (c.border_width < 1) throw std::invalid_argument("transfer: border width must be >= 1");
    if (!(c.fill >= 0.0 && c.fill <= 1.0))
      throw std::invalid_argument("transfer: fill outside [0, 1]");
    if (has_partition_override()) {
      const auto& po = partition_override;
      if (po.least_low.empty() || po.most_low.empty())
        throw std::invalid_argument("transfer: override needs nonempty low halves");
      std::vector<int> all;
      for (const auto* set : {&po.least_high, &po.least_low, &po.most_high, &po.most_low}) {
        for (std::size_t i = 0; i < set->size(); ++i) {
          const int p = (*set)[i];
          if (p < 0 || p >= n_visual_aug)
            throw std::invalid_argument("transfer: override id outside the token range");
          if (i > 0 && (*set)[i - 1] >= p)
            throw std::invalid_argument("transfer: override sets must be ascending");
        }
        all.insert(all.end(), set->begin(), set->end());
      }
      std::sort(all.begin(), all.end());
      if (std::adjacent_find(all.begin(), all.end()) != all.end())
        throw std::invalid_argument("transfer: override sets overlap");
    }
  }
};

struct TransferResult {
  TemplatePair templates;
  std::vector<double> loss_history;  // mean objective at init and after every step
  BorderLayout layout;
  std::vector<TransferPartition> partitions;  // one per optimized image
};

// Wrap the image in a constant-fill frame. The original content lands at
// offset (width, width) byte-identical; every frame patch is the fill value.
inline std::pair<Tensor, BorderLayout> augment_border(const Tensor& image, int width,
                                                      double fill) {
  if (width < 1) throw std::invalid_argument("augment_border: width must be >= 1");
  if (!(fill >= 0.0 && fill <= 1.0))
    throw std::invalid_argument("augment_border: fill outside [0, 1]");
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(image.rows))));
  if (g < 2 || g * g != image.rows)
    throw std::invalid_argument("augment_border: image is not a square grid");

  BorderLayout layout;
  layout.side = g + 2 * width;
  layout.width = width;
  layout.fill = fill;

  Tensor out(layout.side * layout.side, image.cols);
  for (double& x : out.v) x = fill;
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      const int src = r * g + c, dst = layout.to_augmented(r, c);
      for (int j = 0; j < image.cols; ++j) out.at(dst, j) = image.at(src, j);
    }
  for (int p = 0; p < layout.side * layout.side; ++p) {
    const int r = p / layout.side, c = p % layout.side;
    const bool interior = r >= width && r < layout.side - width && c >= width &&
                          c < layout.side - width;
    if (!interior) layout.border.push_back(p);
  }
  layout.validate();
  return {std::move(out), layout};
}

// Rank every token by its mean per-layer rank across the candidate layers
// (rank 0 = most important at that layer), take the bottom slice as the
// shared least set and the top slice as the most set, then halve each by
// mean clean score. Ties fall back to the smaller index, except that the
// boundary between the two slices sends equal mean ranks to the least set
// by larger index, keeping the slices disjoint.
inline TransferPartition partition_regions(const ModelWeights& w, const Tensor& image_aug,
                                           const std::vector<int>& prompt,
                                           const std::vector<int>& layers, int n_least,
                                           int n_most,
                                           const std::vector<int>& ref_prompt_indices = {}) {
  const int n_v = w.cfg.n_visual();
  if (image_aug.rows != n_v)
    throw std::invalid_argument("partition_regions: image does not match the model grid");
  if (layers.empty()) throw std::invalid_argument("partition_regions: no candidate layers");
  for (int l : layers)
    if (l < 1 || l > w.cfg.layers)
      throw std::invalid_argument("partition_regions: layer outside the model");
  if (n_least < 1 || n_most < 1 || n_least + n_most > n_v)
    throw std::invalid_argument("partition_regions: region sizes exceed the token budget");

  const auto traces = scores_by_layer(w, image_aug, prompt, ref_prompt_indices);
  std::vector<double> mean_rank(n_v, 0.0), mean_score(n_v, 0.0);
  std::vector<int> order(n_v);
  for (int l : layers) {
    const auto& s = traces[l - 1];
    for (int j = 0; j < n_v; ++j) order[j] = j;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (s[a] != s[b]) return s[a] > s[b];
      return a < b;
    });
    for (int pos = 0; pos < n_v; ++pos) mean_rank[order[pos]] += pos;
    for (int j = 0; j < n_v; ++j) mean_score[j] += s[j];
  }
  for (int j = 0; j < n_v; ++j) {
    mean_rank[j] /= static_cast<double>(layers.size());
    mean_score[j] /= static_cast<double>(layers.size());
  }

  for (int j = 0; j < n_v; ++j) order[j] = j;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (mean_rank[a] != mean_rank[b]) return mean_rank[a] < mean_rank[b];
    return a < b;
  });
  std::vector<int> most(order.begin(), order.begin() + n_most);
  std::vector<int> least(order.end() - n_least, order.end());

  auto halve = [&](std::vector<int> set, std::vector<int>& high, std::vector<int>& low) {
    std::sort(set.begin(), set.end(), [&](int a, int b) {
      if (mean_score[a] != mean_score[b]) return mean_score[a] > mean_score[b];
      return a < b;
    });
    const int cut = static_cast<int>(set.size()) / 2;
    high.assign(set.begin(), set.begin() + cut);
    low.assign(set.begin() + cut, set.end());
    std::sort(high.begin(), high.end());
    std::sort(low.begin(), low.end());
  };
  TransferPartition part;
  halve(std::move(least), part.least_high, part.least_low);
  halve(std::move(most), part.most_high, part.most_low);
  return part;
}

// Pairwise term pushing the weakest least tokens above the strongest most
// tokens, plus a reference-alignment pull on their keys.
inline double loss_raise(const std::vector<double>& s, const Tensor& q, const Tensor& k,
                         const TransferPartition& part, const std::vector<int>& refs,
                         double alpha, double gamma) {
  double pairs = 0.0;
  for (int l : part.least_low)
    for (int m : part.most_high) pairs += log_sigmoid_scalar(s.at(l) - s.at(m));
  double total = -alpha * pairs;
  if (gamma != 0.0) total += gamma * loss_key(q, k, part.least_low, refs);
  return total;
}

// Pairwise term keeping the weaker most tokens above the stronger least
// tokens while the alignment term, entering with the opposite sign, pushes
// their keys away from the reference queries.
inline double loss_down(const std::vector<double>& s, const Tensor& q, const Tensor& k,
                        const TransferPartition& part, const std::vector<int>& refs,
                        double alpha, double gamma) {
  double pairs = 0.0;
  for (int m : part.most_low)
    for (int l : part.least_high) pairs += log_sigmoid_scalar(s.at(m) - s.at(l));
  double total = -alpha * pairs;
  if (gamma != 0.0) total -= gamma * loss_key(q, k, part.most_low, refs);
  return total;
}

inline int loss_raise_node(Tape& tape, int scores, int q, int k,
                           const TransferPartition& part, const std::vector<int>& refs,
                           double alpha, double gamma) {
  int total = tape.leaf(Tensor::scalar(0.0), false);
  std::vector<std::pair<int, int>> pairs;
  for (int l : part.least_low)
    for (int m : part.most_high) pairs.push_back({l, m});
  if (!pairs.empty() && alpha != 0.0) {
    const int term = tape.sum(tape.log_sigmoid(detail::pair_diff_node(tape, scores, pairs)));
    total = tape.add(total, tape.scale(term, -alpha));
  }
  if (gamma != 0.0)
    total = tape.add(total, tape.scale(loss_key_node(tape, q, k, part.least_low, refs), gamma));
  return total;
}

inline int loss_down_node(Tape& tape, int scores, int q, int k, const TransferPartition& part,
                          const std::vector<int>& refs, double alpha, double gamma) {
  int total = tape.leaf(Tensor::scalar(0.0), false);
  std::vector<std::pair<int, int>> pairs;
  for (int m : part.most_low)
    for (int l : part.least_high) pairs.push_back({m, l});
  if (!pairs.empty() && alpha != 0.0) {
    const int term = tape.sum(tape.log_sigmoid(detail::pair_diff_node(tape, scores, pairs)));
    total = tape.add(total, tape.scale(term, -alpha));
  }
  if (gamma != 0.0)
    total = tape.add(total, tape.scale(loss_key_node(tape, q, k, part.most_low, refs), -gamma));
  return total;
}

namespace detail {

inline Tensor init_template(Rng& rng, int cols, double eps) {
  Tensor t = Tensor::zeros(1, cols);
  for (int c = 0; c < cols; ++c) t.at(0, c) = std::clamp(rng.normal(0.0, 1.0), -eps, eps);
  return t;
}

inline void template_step(Tensor& t, const Tensor& grad, double step, double eps) {
  for (std::size_t i = 0; i < t.v.size(); ++i) {
    const double g = grad.v[i];
    const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    t.v[i] = std::clamp(t.v[i] - step * s, -eps, eps);
  }
}

}  // namespace detail

// Joint sign-PGD over the two templates. Every loss evaluation tiles the
// raise template onto all frame patches and the down template onto all
// interior patches, so one gradient step aggregates evidence from every
// placement; the objective is the arithmetic mean over the candidate layers
// (and over the batch, when more than one image is given).
inline TransferResult tcaa_optimize_batch(const ModelWeights& w,
                                          const std::vector<Tensor>& images,
                                          const std::vector<std::vector<int>>& prompts,
                                          const TransferConfig& cfg_in) {
  if (images.empty() || images.size() != prompts.size())
    throw std::invalid_argument("transfer: batch images and prompts must align");
  const int n_v = w.cfg.n_visual();
  cfg_in.validate(n_v, w.cfg.layers);
  const TransferConfig cfg = cfg_in.resolved(n_v, w.cfg.layers);

  TransferResult res;
  std::vector<Tensor> bases;  // augmented clean images
  for (const auto& img : images) {
    if (img.cols != w.cfg.patch_dim)
      throw std::invalid_argument("transfer: patch width mismatch");
    auto [aug, layout] = augment_border(img, cfg.border_width, cfg.fill);
    if (layout.side * layout.side != n_v)
      throw std::invalid_argument("transfer: surrogate grid does not fit the augmented image");
    res.layout = layout;
    bases.push_back(std::move(aug));
  }
  for (std::size_t i = 0; i < bases.size(); ++i)
    res.partitions.push_back(cfg.has_partition_override()
                                 ? cfg.partition_override
                                 : partition_regions(w, bases[i], prompts[i],
                                                     cfg.candidate_layers, cfg.n_least,
                                                     cfg.n_most, cfg.ref_prompt_indices));

  const auto refs = detail::ref_rows(cfg.ref_prompt_indices, n_v, w.cfg.prompt_len);
  Tensor frame_mask = Tensor::zeros(n_v, 1), interior_mask = Tensor::zeros(n_v, 1);
  for (int p = 0; p < n_v; ++p)
    (res.layout.is_border(p) ? frame_mask : interior_mask).at(p, 0) = 1.0;

  Rng rng(cfg.seed);
  res.templates.eps_raise = cfg.eps_raise;
  res.templates.eps_down = cfg.eps_down;
  res.templates.delta_raise = detail::init_template(rng, w.cfg.patch_dim, cfg.eps_raise);
  res.templates.delta_down = detail::init_template(rng, w.cfg.patch_dim, cfg.eps_down);

  const int up_to = cfg.candidate_layers.back();
  const double norm =
      1.0 / (static_cast<double>(images.size()) * cfg.candidate_layers.size());

  auto evaluate = [&](bool with_grad, Tensor* grad_raise, Tensor* grad_down) {
    Tape tape;
    const WeightNodes wn = bind_weights(tape, w, false);
    const int d_raise = tape.leaf(res.templates.delta_raise, with_grad);
    const int d_down = tape.leaf(res.templates.delta_down, with_grad);
    const int tiled_raise = tape.matmul(tape.leaf(frame_mask, false), d_raise);
    const int tiled_down = tape.matmul(tape.leaf(interior_mask, false), d_down);
    int total = tape.leaf(Tensor::scalar(0.0), false);
    for (std::size_t i = 0; i < bases.size(); ++i) {
      const int adv = tape.clip_pass(
          tape.add(tape.add(tape.leaf(bases[i], false), tiled_raise), tiled_down), 0.0, 1.0);
      ForwardOptions opt;
      opt.up_to_layer = up_to;
      const ForwardGraph g = build_forward(tape, wn, w.cfg, adv, prompts[i], opt);
      for (int l : cfg.candidate_layers) {
        const LayerNodes& ln = g.layers[l - 1];
        const int scores = importance_scores_node(tape, ln.attn, refs, n_v);
        total = tape.add(total, loss_raise_node(tape, scores, ln.q, ln.k, res.partitions[i],
                                                refs, cfg.alpha_raise, cfg.gamma_raise));
        total = tape.add(total, loss_down_node(tape, scores, ln.q, ln.k, res.partitions[i],
                                               refs, cfg.alpha_down, cfg.gamma_down));
      }
    }
    total = tape.scale(total, norm);
    const double value = tape.val(total).item();
    if (with_grad) {
      const std::array<int, 2> wrt{d_raise, d_down};
      const auto grads = tape.gradient(total, wrt);
      *grad_raise = grads.at(d_raise);
      *grad_down = grads.at(d_down);
    }
    return value;
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor gr, gd;
    const double loss = evaluate(true, &gr, &gd);
    if (!std::isfinite(loss))
      throw std::runtime_error("transfer: non-finite loss at iteration " + std::to_string(it));
    res.loss_history.push_back(loss);
    detail::template_step(res.templates.delta_raise, gr, cfg.step_raise, cfg.eps_raise);
    detail::template_step(res.templates.delta_down, gd, cfg.step_down, cfg.eps_down);
  }
  const double final_loss = evaluate(false, nullptr, nullptr);
  if (!std::isfinite(final_loss))
    throw std::runtime_error("transfer: non-finite loss at iteration " +
                             std::to_string(cfg.iterations));
  res.loss_history.push_back(final_loss);
  return res;
}

inline TransferResult tcaa_optimize(const ModelWeights& w, const Tensor& image,
                                    const std::vector<int>& prompt,
                                    const TransferConfig& cfg) {
  return tcaa_optimize_batch(w, {image}, {prompt}, cfg);
}

// Tile the optimized pair onto a fresh image: frame patches become
// fill + raise template, interior patches keep their content plus the down
// template, everything clipped back to pixel range.
inline Tensor assemble_adversarial(const Tensor& image, const BorderLayout& layout,
                                   const TemplatePair& templates) {
  layout.validate();
  const int g = layout.interior_side();
  if (image.rows != g * g)
    throw std::invalid_argument("assemble: image does not fit the layout interior");
  if (templates.delta_raise.rows != 1 || templates.delta_down.rows != 1 ||
      templates.delta_raise.cols != image.cols || templates.delta_down.cols != image.cols)
    throw std::invalid_argument("assemble: template shape mismatch");

  auto [out, check] = augment_border(image, layout.width, layout.fill);
  if (check.side != layout.side)
    throw std::invalid_argument("assemble: layout side mismatch");
  for (int p = 0; p < out.rows; ++p) {
    const Tensor& t = layout.is_border(p) ? templates.delta_raise : templates.delta_down;
    for (int c = 0; c < out.cols; ++c)
      out.at(p, c) = std::clamp(out.at(p, c) + t.at(0, c), 0.0, 1.0);
  }
  return out;
}

// Self-contained JSON record of a template pair and the frame geometry it
// was optimized for; %.17g keeps doubles bit-exact across a round trip.
inline std::string templates_json(const TemplatePair& templates, const BorderLayout& layout) {
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  auto arr = [&](const Tensor& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.v.size(); ++i) {
      if (i) s += ",";
      s += num(t.v[i]);
    }
    return s + "]";
  };
  std::string s = "{\"grid_side\":" + std::to_string(layout.side) +
                  ",\"border_width\":" + std::to_string(layout.width) +
                  ",\"fill\":" + num(layout.fill) +
                  ",\"patch_dim\":" + std::to_string(templates.delta_raise.cols) +
                  ",\"eps_raise\":" + num(templates.eps_raise) +
                  ",\"eps_down\":" + num(templates.eps_down) + ",\"border\":[";
  for (std::size_t i = 0; i < layout.border.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(layout.border[i]);
  }
  s += "],\"delta_raise\":" + arr(templates.delta_raise) +
       ",\"delta_down\":" + arr(templates.delta_down) + "}";
  return s;
}

}  // namespace vtc
