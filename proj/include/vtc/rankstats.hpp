// Rank-stability diagnostics between two score vectors over the same token
// set, and their per-layer evolution under a perturbed input.
//
// Scores are continuous, so exact ties are degenerate; where they occur the
// (score, index) total order resolves them, the same rule the compressor
// applies when selecting tokens. With that order every pair is strictly
// comparable and the classical tau-a / Spearman formulas apply unchanged.
#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtc/compressor.hpp"
#include "vtc/model.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

struct RankStats {
  double kendall_tau = 0.0;
  double spearman_rho = 0.0;
  double topk_preservation = 0.0;
  double botk_infiltration = 0.0;
  int k = 0;
};

// Stand-in for the paper-scale top-100 cutoff on 576-token inputs.
inline int default_rank_cutoff(int n_visual) { return (n_visual + 3) / 4; }

namespace detail {

// rank[i] = position of element i when sorted ascending by (score, index).
inline std::vector<int> ranks_of(const std::vector<double>& s) {
  std::vector<int> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (s[a] != s[b]) return s[a] < s[b];
    return a < b;
  });
  std::vector<int> rank(s.size());
  for (size_t pos = 0; pos < order.size(); ++pos) rank[order[pos]] = static_cast<int>(pos);
  return rank;
}

inline void check_pair(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("rankstats: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("rankstats: need at least two scores");
}

}  // namespace detail

// Tau-a over the index-resolved orderings: (concordant - discordant) pairs
// over m(m-1)/2.
inline double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  detail::check_pair(a, b);
  const auto ra = detail::ranks_of(a);
  const auto rb = detail::ranks_of(b);
  const int m = static_cast<int>(a.size());
  long long concordant = 0, discordant = 0;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      const bool same = (ra[i] < ra[j]) == (rb[i] < rb[j]);
      (same ? concordant : discordant) += 1;
    }
  const long long pairs = static_cast<long long>(m) * (m - 1) / 2;
  return static_cast<double>(concordant - discordant) / static_cast<double>(pairs);
}

inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  detail::check_pair(a, b);
  const auto ra = detail::ranks_of(a);
  const auto rb = detail::ranks_of(b);
  const long long m = static_cast<long long>(a.size());
  long long d2 = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const long long d = ra[i] - rb[i];
    d2 += d * d;
  }
  return 1.0 - 6.0 * static_cast<double>(d2) / static_cast<double>(m * (m * m - 1));
}

// Fraction of the clean top-k still inside the perturbed top-k.
inline double topk_preservation(const std::vector<double>& clean,
                                const std::vector<double>& pert, int k) {
  detail::check_pair(clean, pert);
  if (k < 1 || k > static_cast<int>(clean.size()))
    throw std::invalid_argument("rankstats: cutoff out of range");
  const int m = static_cast<int>(clean.size());
  const double rate = static_cast<double>(k) / m;
  const auto top_clean = compress(clean, rate, m, SelectionMode::top);
  const auto top_pert = compress(pert, rate, m, SelectionMode::top);
  std::vector<int> both;
  std::set_intersection(top_clean.begin(), top_clean.end(), top_pert.begin(), top_pert.end(),
                        std::back_inserter(both));
  return static_cast<double>(both.size()) / k;
}

// Fraction of the clean bottom-k that climbed into the perturbed top-k.
inline double botk_infiltration(const std::vector<double>& clean,
                                const std::vector<double>& pert, int k) {
  detail::check_pair(clean, pert);
  if (k < 1 || k > static_cast<int>(clean.size()))
    throw std::invalid_argument("rankstats: cutoff out of range");
  const int m = static_cast<int>(clean.size());
  const double rate = static_cast<double>(k) / m;
  const auto bot_clean = compress(clean, rate, m, SelectionMode::bottom);
  const auto top_pert = compress(pert, rate, m, SelectionMode::top);
  std::vector<int> both;
  std::set_intersection(bot_clean.begin(), bot_clean.end(), top_pert.begin(), top_pert.end(),
                        std::back_inserter(both));
  return static_cast<double>(both.size()) / k;
}

inline RankStats rank_stats(const std::vector<double>& clean, const std::vector<double>& pert,
                            int k) {
  RankStats r;
  r.kendall_tau = kendall_tau(clean, pert);
  r.spearman_rho = spearman_rho(clean, pert);
  r.topk_preservation = topk_preservation(clean, pert, k);
  r.botk_infiltration = botk_infiltration(clean, pert, k);
  r.k = k;
  return r;
}

// Layer-wise stability of the importance ranking when the input is swapped
// for a perturbed copy. Both passes run uncompressed so every layer scores
// the full token set.
inline std::vector<RankStats> ranking_trace(const ModelWeights& w, const Tensor& clean,
                                            const Tensor& pert, const std::vector<int>& prompt,
                                            int k) {
  if (!clean.same_shape(pert)) throw std::invalid_argument("ranking_trace: shape mismatch");
  const auto clean_scores = scores_by_layer(w, clean, prompt);
  const auto pert_scores = scores_by_layer(w, pert, prompt);
  std::vector<RankStats> out;
  out.reserve(clean_scores.size());
  for (size_t l = 0; l < clean_scores.size(); ++l)
    out.push_back(rank_stats(clean_scores[l], pert_scores[l], k));
  return out;
}

inline std::string ranking_trace_csv(const std::vector<RankStats>& trace) {
  std::string csv = "layer,tau,rho,preservation,infiltration\n";
  for (size_t l = 0; l < trace.size(); ++l) {
    char line[160];
    std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.6f\n", l + 1,
                  trace[l].kendall_tau, trace[l].spearman_rho, trace[l].topk_preservation,
                  trace[l].botk_infiltration);
    csv += line;
  }
  return csv;
}

}  // namespace vtc
