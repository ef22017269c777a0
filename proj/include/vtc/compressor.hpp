// Attention-based visual token selection.
//
// A compression stage (layer l, rate r) ranks the surviving visual tokens by
// the mean attention they receive from reference text positions at layer l,
// keeps ceil(r * n_V) of them (n_V is always the ORIGINAL visual count), and
// restores index order. Stages compose: later stages see only the survivors
// of earlier ones but still budget against the original count.
//
// Also houses the configuration enumerator: a depth-first search over
// (layer, rate) schedules under the deployment constraints (first layer >= 2,
// inter-stage gap >= 4, each rate the floored half of its predecessor), with
// exact rational average-retention arithmetic so equal averages sort stably.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vtc/model.hpp"
#include "vtc/tape.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

enum class SelectionMode { top, bottom };

struct CompressionStage {
  int layer = 0;      // 1-based; drops rows of this layer's output
  double rate = 1.0;  // retained fraction of the ORIGINAL visual count
};

// Tokens kept at a stage: ceil(rate * n_V original). The epsilon absorbs
// binary representation error in rates like 0.1 without changing any
// genuinely fractional ceiling.
inline int retained_count(double rate, int n_v_original) {
  return static_cast<int>(std::ceil(rate * n_v_original - 1e-9));
}

struct CompressionConfig {
  std::vector<CompressionStage> stages;  // layers strictly increasing
  // Prompt positions whose attention rows are averaged into the importance
  // score. Empty selects the final text token.
  std::vector<int> ref_prompt_indices;
  SelectionMode mode = SelectionMode::top;
  // Externally supplied score vectors, one entry per stage when non-empty.
  // A non-empty entry replaces attention-derived scores at that stage and
  // must match the surviving token count when the stage fires; an empty
  // entry scores normally.
  std::vector<std::vector<double>> ranking_override;

  // n_text < 0 skips the reference-index check (prompt length unknown yet).
  void validate(int n_v_original, int n_text = -1, int depth = 0) const {
    if (n_v_original < 1) throw std::invalid_argument("compression: no visual tokens");
    int prev_layer = 0;
    int prev_count = n_v_original;
    for (const CompressionStage& s : stages) {
      if (s.layer <= prev_layer)
        throw std::invalid_argument("compression: stage layers must be strictly increasing");
      if (depth > 0 && s.layer > depth)
        throw std::invalid_argument("compression: stage layer exceeds model depth");
      if (!(s.rate > 0.0 && s.rate <= 1.0))
        throw std::invalid_argument("compression: rate must lie in (0, 1]");
      const int count = retained_count(s.rate, n_v_original);
      if (count >= prev_count)
        throw std::invalid_argument("compression: stage does not reduce the retained count");
      prev_layer = s.layer;
      prev_count = count;
    }
    if (!ranking_override.empty() && ranking_override.size() != stages.size())
      throw std::invalid_argument("compression: ranking override must cover every stage");
    if (n_text >= 0)
      for (int i : ref_prompt_indices)
        if (i < 0 || i >= n_text)
          throw std::invalid_argument("compression: reference index outside the prompt");
  }
};

namespace detail {

// Absolute attention-row indices of the scoring references.
inline std::vector<int> ref_rows(const std::vector<int>& ref_prompt_indices, int n_visual,
                                 int n_text) {
  if (ref_prompt_indices.empty()) return {n_visual + n_text - 1};
  std::vector<int> rows;
  rows.reserve(ref_prompt_indices.size());
  for (int i : ref_prompt_indices) {
    if (i < 0 || i >= n_text)
      throw std::invalid_argument("compression: reference index outside the prompt");
    rows.push_back(n_visual + i);
  }
  return rows;
}

}  // namespace detail

// s_j = mean over heads and reference rows of attention paid to visual
// position j. Reference rows must address text positions (>= n_visual).
inline std::vector<double> importance_scores(const std::vector<Tensor>& head_attn,
                                             const std::vector<int>& refs, int n_visual) {
  if (head_attn.empty()) throw std::invalid_argument("scores: no attention heads");
  if (refs.empty()) throw std::invalid_argument("scores: empty reference set");
  const int n = head_attn[0].rows;
  if (n_visual < 1 || n_visual > n)
    throw std::invalid_argument("scores: visual count out of range");
  for (const Tensor& a : head_attn)
    if (a.rows != n || a.cols != n) throw std::invalid_argument("scores: ragged attention");
  for (int r : refs)
    if (r < n_visual || r >= n)
      throw std::invalid_argument("scores: reference row is not a text position");
  std::vector<double> s(n_visual, 0.0);
  for (const Tensor& a : head_attn)
    for (int r : refs)
      for (int j = 0; j < n_visual; ++j) s[j] += a.at(r, j);
  const double inv = 1.0 / (static_cast<double>(head_attn.size()) * refs.size());
  for (double& x : s) x *= inv;
  return s;
}

// Same quantity as a tape node (1 x n_visual) so attack losses can
// differentiate through the scores.
inline int importance_scores_node(Tape& tape, const std::vector<int>& head_attn_nodes,
                                  const std::vector<int>& refs, int n_visual) {
  if (head_attn_nodes.empty()) throw std::invalid_argument("scores: no attention heads");
  if (refs.empty()) throw std::invalid_argument("scores: empty reference set");
  const int n = tape.val(head_attn_nodes[0]).rows;
  if (n_visual < 1 || n_visual > n)
    throw std::invalid_argument("scores: visual count out of range");
  for (int r : refs)
    if (r < n_visual || r >= n)
      throw std::invalid_argument("scores: reference row is not a text position");
  std::vector<int> flat;
  flat.reserve(refs.size() * n_visual);
  for (int r : refs)
    for (int j = 0; j < n_visual; ++j) flat.push_back(r * n + j);
  int acc = -1;
  for (int a : head_attn_nodes) {
    auto idx = flat;
    const int rows = tape.slice(a, std::move(idx), static_cast<int>(refs.size()), n_visual);
    acc = (acc < 0) ? rows : tape.add(acc, rows);
  }
  const double inv = 1.0 / (static_cast<double>(head_attn_nodes.size()) * refs.size());
  const int reduce = tape.leaf(Tensor::full(1, static_cast<int>(refs.size()), inv), false);
  return tape.matmul(reduce, acc);
}

// Keep ceil(rate * n_V original) tokens: the highest scorers in top mode, the
// lowest in bottom mode. Ties prefer the smaller index; the result is sorted
// ascending so sequence order is restored.
inline std::vector<int> compress(const std::vector<double>& scores, double rate,
                                 int n_v_original, SelectionMode mode) {
  if (scores.empty()) throw std::invalid_argument("compress: empty score vector");
  if (!(rate > 0.0 && rate <= 1.0))
    throw std::invalid_argument("compress: rate must lie in (0, 1]");
  if (n_v_original < 1) throw std::invalid_argument("compress: bad original count");
  const int k = retained_count(rate, n_v_original);
  if (k > static_cast<int>(scores.size()))
    throw std::invalid_argument("compress: retained count exceeds surviving tokens");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  if (mode == SelectionMode::top) {
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;
    });
  } else {
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores[a] != scores[b]) return scores[a] < scores[b];
      return a < b;
    });
  }
  std::vector<int> kept(order.begin(), order.begin() + k);
  std::sort(kept.begin(), kept.end());
  return kept;
}

// Hook for toyvlm forward passes. Stateless: a stage fires when the layer
// matches, scoring the CURRENT survivors but budgeting against the original
// count. Reusable across samples.
inline LayerHook make_hook(const CompressionConfig& cfg, int n_v_original) {
  cfg.validate(n_v_original);
  return [cfg, n_v_original](const HookContext& ctx) -> std::optional<std::vector<int>> {
    for (size_t si = 0; si < cfg.stages.size(); ++si) {
      const CompressionStage& st = cfg.stages[si];
      if (st.layer != ctx.layer) continue;
      std::vector<double> scores;
      if (si < cfg.ranking_override.size() && !cfg.ranking_override[si].empty()) {
        if (static_cast<int>(cfg.ranking_override[si].size()) != ctx.n_visual)
          throw std::invalid_argument(
              "compression: override length does not match surviving tokens");
        scores = cfg.ranking_override[si];
      } else {
        scores = importance_scores(
            *ctx.head_attn, detail::ref_rows(cfg.ref_prompt_indices, ctx.n_visual, ctx.n_text),
            ctx.n_visual);
      }
      return compress(scores, st.rate, n_v_original, cfg.mode);
    }
    return std::nullopt;
  };
}

inline HookFactory hook_factory(const CompressionConfig& cfg, int n_v_original) {
  cfg.validate(n_v_original);
  return [cfg, n_v_original]() { return make_hook(cfg, n_v_original); };
}

// Importance scores at every layer of an uncompressed forward pass;
// result[l-1] covers layer l. Scores use the full original token set.
inline std::vector<std::vector<double>> scores_by_layer(
    const ModelWeights& w, const Tensor& image, const std::vector<int>& prompt,
    const std::vector<int>& ref_prompt_indices = {}) {
  Tape tape;
  const WeightNodes wn = bind_weights(tape, w, false);
  const ForwardGraph g = build_forward(tape, wn, w.cfg, tape.leaf(image), prompt);
  const std::vector<int> refs =
      detail::ref_rows(ref_prompt_indices, w.cfg.n_visual(), w.cfg.prompt_len);
  std::vector<std::vector<double>> out;
  out.reserve(g.layers.size());
  for (const LayerNodes& ln : g.layers) {
    std::vector<Tensor> attn;
    attn.reserve(ln.attn.size());
    for (int a : ln.attn) attn.push_back(tape.val(a));
    out.push_back(importance_scores(attn, refs, w.cfg.n_visual()));
  }
  return out;
}

namespace detail {

// Best rational approximation with a small denominator; rates are exact
// decimals or repeated halvings of one, so convergence is immediate.
inline std::pair<long long, long long> to_fraction(double x) {
  if (!(x > 0.0 && x <= 1.0)) throw std::invalid_argument("rate outside (0, 1]");
  long long p0 = 0, q0 = 1, p1 = 1, q1 = 0;
  double v = x;
  for (int it = 0; it < 64; ++it) {
    const double fa = std::floor(v);
    if (fa > 1e15) break;
    const long long a = static_cast<long long>(fa);
    const long long p = a * p1 + p0;
    const long long q = a * q1 + q0;
    if (q > 0 && std::abs(x - static_cast<double>(p) / static_cast<double>(q)) < 1e-9)
      return {p, q};
    p0 = p1; q0 = q1; p1 = p; q1 = q;
    const double frac = v - fa;
    if (frac < 1e-15) break;
    v = 1.0 / frac;
  }
  throw std::invalid_argument("rate is not a simple rational");
}

}  // namespace detail

// Mean per-layer visual retention over `depth` layers: layers 1..l1 run
// uncompressed, layers l_i+1..l_{i+1} at rate r_i, the remainder at the last
// stage's rate. Computed in exact integer arithmetic so schedules with equal
// means compare equal.
inline double avg_retention(const std::vector<CompressionStage>& stages, int depth) {
  if (depth < 1) throw std::invalid_argument("avg_retention: bad depth");
  if (stages.empty()) return 1.0;
  long long den = 1;
  std::vector<std::pair<long long, long long>> fr;
  fr.reserve(stages.size());
  int prev = 0;
  for (const CompressionStage& s : stages) {
    if (s.layer <= prev) throw std::invalid_argument("avg_retention: layers must increase");
    prev = s.layer;
    fr.push_back(detail::to_fraction(s.rate));
    den = std::lcm(den, fr.back().second);
  }
  if (stages.back().layer > depth)
    throw std::invalid_argument("avg_retention: stage beyond depth");
  long long num = static_cast<long long>(stages.front().layer) * den;
  for (size_t i = 0; i < stages.size(); ++i) {
    const int until = (i + 1 < stages.size()) ? stages[i + 1].layer : depth;
    num += static_cast<long long>(until - stages[i].layer) * fr[i].first *
           (den / fr[i].second);
  }
  return static_cast<double>(num) / static_cast<double>(den * depth);
}

struct EnumeratedConfig {
  std::vector<CompressionStage> stages;
  double avg_rate = 1.0;
};

// All (layer, rate) schedules feasible under the deployment constraints,
// filtered to avg_min <= r-bar <= avg_max. Rates live on the tenth grid
// {0.1..0.9}: any first rate, then each successor half its predecessor
// (clamped at 0.1), so a chain extends only while the halved rate stays on
// the grid. An odd tenth ends its chain, 0.1 included: its clamped
// successor would repeat 0.1 and keep the token count unchanged. First
// layer >= 2, successive layers at least 4 apart, stages strictly inside
// the depth so each affects at least one layer. Sorted by average rate,
// then stage count, then stages lexicographically; averages are exact
// integer counts of tenths so equal means tie reliably.
inline std::vector<EnumeratedConfig> enumerate_configs(int depth, double avg_max,
                                                       double avg_min = 0.0) {
  if (depth < 2) throw std::invalid_argument("enumerate: depth must be >= 2");
  struct Row {
    std::vector<CompressionStage> stages;
    long long avg_num = 0;  // average = avg_num / (10 * depth)
  };
  std::vector<Row> rows;

  std::vector<std::pair<int, int>> cur;  // (layer, rate in tenths)
  auto record = [&]() {
    Row r;
    long long num = static_cast<long long>(cur.front().first) * 10;
    for (size_t i = 0; i < cur.size(); ++i) {
      const int until = (i + 1 < cur.size()) ? cur[i + 1].first : depth;
      num += static_cast<long long>(until - cur[i].first) * cur[i].second;
      r.stages.push_back({cur[i].first, cur[i].second / 10.0});
    }
    r.avg_num = num;
    rows.push_back(std::move(r));
  };

  auto dfs = [&](auto&& self, int min_layer, int tenths) -> void {
    for (int layer = min_layer; layer <= depth - 1; ++layer) {
      cur.push_back({layer, tenths});
      record();
      if (tenths % 2 == 0) self(self, layer + 4, tenths / 2);
      cur.pop_back();
    }
  };
  for (int tenths = 1; tenths <= 9; ++tenths) dfs(dfs, 2, tenths);

  std::vector<EnumeratedConfig> out;
  const double scale = 10.0 * depth;
  for (Row& r : rows) {
    const double avg = static_cast<double>(r.avg_num) / scale;
    if (avg < avg_min || avg > avg_max) continue;
    out.push_back({std::move(r.stages), avg});
  }
  std::sort(out.begin(), out.end(), [](const EnumeratedConfig& a, const EnumeratedConfig& b) {
    if (a.avg_rate != b.avg_rate) return a.avg_rate < b.avg_rate;
    if (a.stages.size() != b.stages.size()) return a.stages.size() < b.stages.size();
    for (size_t i = 0; i < a.stages.size(); ++i) {
      if (a.stages[i].layer != b.stages[i].layer) return a.stages[i].layer < b.stages[i].layer;
      if (a.stages[i].rate != b.stages[i].rate) return a.stages[i].rate < b.stages[i].rate;
    }
    return false;
  });
  return out;
}

// Fraction of configurations whose earliest stage with a rate inside
// [eff_lo, eff_hi] lies in the candidate layer set. Configurations with no
// such stage count as uncovered.
inline double layer_coverage(const std::vector<int>& candidate_layers,
                             const std::vector<EnumeratedConfig>& configs, double eff_lo,
                             double eff_hi) {
  if (configs.empty()) throw std::invalid_argument("coverage: empty configuration list");
  int covered = 0;
  for (const EnumeratedConfig& c : configs) {
    for (const CompressionStage& s : c.stages) {
      if (s.rate < eff_lo || s.rate > eff_hi) continue;
      if (std::find(candidate_layers.begin(), candidate_layers.end(), s.layer) !=
          candidate_layers.end())
        ++covered;
      break;  // only the earliest qualifying stage counts
    }
  }
  return static_cast<double>(covered) / static_cast<double>(configs.size());
}

inline std::string format_rate(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", r);
  return buf;
}

// "[(2, 0.2), (8, 0.1)]" -- the layout used for schedule tables.
inline std::string format_stages(const std::vector<CompressionStage>& stages) {
  std::string s = "[";
  for (size_t i = 0; i < stages.size(); ++i) {
    if (i) s += ", ";
    s += "(" + std::to_string(stages[i].layer) + ", " + format_rate(stages[i].rate) + ")";
  }
  return s + "]";
}

inline std::string enumeration_csv(const std::vector<EnumeratedConfig>& configs) {
  std::string csv = "stages,avg_rate\n";
  for (const EnumeratedConfig& c : configs) {
    char avg[16];
    std::snprintf(avg, sizeof avg, "%.3f", c.avg_rate);
    csv += "\"" + format_stages(c.stages) + "\"," + avg + "\n";
  }
  return csv;
}

}  // namespace vtc
