#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "vtc/compressor.hpp"
#include "vtc/dataset.hpp"
#include "vtc/model.hpp"
#include "vtc/random.hpp"

using vtc::avg_retention;
using vtc::compress;
using vtc::CompressionConfig;
using vtc::CompressionStage;
using vtc::enumerate_configs;
using vtc::EnumeratedConfig;
using vtc::importance_scores;
using vtc::layer_coverage;
using vtc::retained_count;
using vtc::Rng;
using vtc::SelectionMode;
using vtc::Tensor;

namespace {

// Exhaustive best-total-score subset of size k, ties to the lexicographically
// smallest index sequence. Independent of the library's sort-based selection.
std::vector<int> brute_force_keep(const std::vector<double>& scores, int k, SelectionMode mode) {
  const int m = static_cast<int>(scores.size());
  std::vector<int> best;
  double best_total = 0.0;
  for (unsigned mask = 0; mask < (1u << m); ++mask) {
    if (__builtin_popcount(mask) != k) continue;
    std::vector<int> idx;
    double total = 0.0;
    for (int i = 0; i < m; ++i)
      if (mask & (1u << i)) {
        idx.push_back(i);
        total += scores[i];
      }
    const bool better = mode == SelectionMode::top ? total > best_total : total < best_total;
    if (best.empty() || better || (total == best_total && idx < best)) {
      best = idx;
      best_total = total;
    }
  }
  return best;
}

std::vector<double> tie_prone_scores(Rng& rng, int m) {
  std::vector<double> s(m);
  for (double& x : s) x = 0.25 * rng.uniform_int(0, 4);
  return s;
}

vtc::ModelWeights small_model() {
  vtc::ModelConfig cfg;
  return vtc::init_weights(cfg, 7);
}

}  // namespace

TEST_CASE("importance scores average reference rows") {
  // Single text row (0.25, 0.5, 0.25) over 2 visual positions.
  Tensor a(3, 3);
  a.v = {1, 0, 0, 0, 1, 0, 0.25, 0.5, 0.25};
  const auto s = importance_scores({a}, {2}, 2);
  REQUIRE(s.size() == 2);
  REQUIRE_THAT(s[0], Catch::Matchers::WithinAbs(0.25, 1e-15));
  REQUIRE_THAT(s[1], Catch::Matchers::WithinAbs(0.5, 1e-15));

  // Uniform attention: every visual token receives 1/n.
  const int n = 6;
  Tensor u = Tensor::full(n, n, 1.0 / n);
  const auto su = importance_scores({u, u}, {4, 5}, 3);
  for (double x : su) REQUIRE_THAT(x, Catch::Matchers::WithinAbs(1.0 / n, 1e-15));

  // Two references averaged: rows (1,0,0) and (0,1,0).
  Tensor two(4, 4);
  two.v = {1, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0};
  const auto st = importance_scores({two}, {2, 3}, 2);
  REQUIRE_THAT(st[0], Catch::Matchers::WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(st[1], Catch::Matchers::WithinAbs(0.5, 1e-15));
}

TEST_CASE("importance scores reject bad references") {
  Tensor a = Tensor::full(3, 3, 1.0 / 3);
  REQUIRE_THROWS_AS(importance_scores({a}, {}, 2), std::invalid_argument);
  REQUIRE_THROWS_AS(importance_scores({a}, {1}, 2), std::invalid_argument);  // visual row
  REQUIRE_THROWS_AS(importance_scores({a}, {3}, 2), std::invalid_argument);  // off the end
  REQUIRE_THROWS_AS(importance_scores({}, {2}, 2), std::invalid_argument);
  REQUIRE_THROWS_AS(importance_scores({a}, {2}, 4), std::invalid_argument);
  Tensor ragged = Tensor::full(2, 2, 0.5);
  REQUIRE_THROWS_AS(importance_scores({a, ragged}, {2}, 2), std::invalid_argument);
}

TEST_CASE("importance scores node matches the direct computation") {
  Rng rng(11);
  const int n = 7, n_vis = 4;
  std::vector<Tensor> heads;
  std::vector<int> nodes;
  vtc::Tape tape;
  for (int h = 0; h < 3; ++h) {
    Tensor a(n, n);
    for (double& x : a.v) x = rng.uniform(0.0, 1.0);
    heads.push_back(a);
    nodes.push_back(tape.leaf(a, true));
  }
  const std::vector<int> refs = {4, 6};
  const int sn = vtc::importance_scores_node(tape, nodes, refs, n_vis);
  REQUIRE(tape.val(sn).rows == 1);
  REQUIRE(tape.val(sn).cols == n_vis);
  const auto direct = importance_scores(heads, refs, n_vis);
  for (int j = 0; j < n_vis; ++j)
    REQUIRE_THAT(tape.val(sn).at(0, j), Catch::Matchers::WithinAbs(direct[j], 1e-12));

  // Gradient of the score sum touches exactly the (ref row, visual col) cells.
  const int total = tape.sum(sn);
  const auto grads = tape.gradient(total, nodes);
  const double expect = 1.0 / (3.0 * refs.size());
  for (int nid : nodes) {
    const Tensor& g = grads.at(nid);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const bool touched = (r == 4 || r == 6) && c < n_vis;
        REQUIRE_THAT(g.at(r, c), Catch::Matchers::WithinAbs(touched ? expect : 0.0, 1e-12));
      }
  }
}

TEST_CASE("compress keeps the forced examples") {
  REQUIRE(compress({0.1, 0.4, 0.2, 0.3}, 0.5, 4, SelectionMode::top) == std::vector<int>{1, 3});
  REQUIRE(compress({0.3, 0.3, 0.1, 0.2}, 0.5, 4, SelectionMode::top) == std::vector<int>{0, 1});
  REQUIRE(compress({0.5, 0.25, 0.25}, 1.0, 3, SelectionMode::top) ==
          std::vector<int>{0, 1, 2});
  REQUIRE(compress({0.1, 0.4, 0.2, 0.3}, 0.5, 4, SelectionMode::bottom) ==
          std::vector<int>{0, 2});
}

TEST_CASE("compress matches brute force on small inputs") {
  Rng rng(23);
  for (int m = 1; m <= 12; ++m)
    for (int rep = 0; rep < 8; ++rep) {
      const auto scores = tie_prone_scores(rng, m);
      for (int k = 1; k <= m; ++k) {
        const double rate = static_cast<double>(k) / m;
        for (SelectionMode mode : {SelectionMode::top, SelectionMode::bottom}) {
          const auto got = compress(scores, rate, m, mode);
          REQUIRE(got == brute_force_keep(scores, k, mode));
        }
      }
    }
}

TEST_CASE("compress rejects impossible requests") {
  REQUIRE_THROWS_AS(compress({}, 0.5, 4, SelectionMode::top), std::invalid_argument);
  REQUIRE_THROWS_AS(compress({1.0, 2.0}, 0.0, 4, SelectionMode::top), std::invalid_argument);
  REQUIRE_THROWS_AS(compress({1.0, 2.0}, 1.5, 4, SelectionMode::top), std::invalid_argument);
  // 3 survivors cannot satisfy ceil(0.5 * 8) = 4.
  REQUIRE_THROWS_AS(compress({1.0, 2.0, 3.0}, 0.5, 8, SelectionMode::top),
                    std::invalid_argument);
}

TEST_CASE("larger rates extend the kept set") {
  Rng rng(31);
  for (int rep = 0; rep < 50; ++rep) {
    const int m = rng.uniform_int(2, 40);
    const auto scores = tie_prone_scores(rng, m);
    std::vector<int> prev;
    for (int k = 1; k <= m; ++k) {
      const auto cur = compress(scores, static_cast<double>(k) / m, m, SelectionMode::top);
      REQUIRE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
      prev = cur;
    }
  }
}

TEST_CASE("selection ignores positive rescaling") {
  Rng rng(37);
  for (int rep = 0; rep < 50; ++rep) {
    const int m = rng.uniform_int(2, 30);
    auto scores = tie_prone_scores(rng, m);
    auto scaled = scores;
    const double c = rng.uniform(0.1, 10.0);
    for (double& x : scaled) x *= c;
    const double rate = rng.uniform_int(1, m) / static_cast<double>(m);
    for (SelectionMode mode : {SelectionMode::top, SelectionMode::bottom})
      REQUIRE(compress(scores, rate, m, mode) == compress(scaled, rate, m, mode));
  }
}

TEST_CASE("hook reduces token counts by the ceiling schedule") {
  const auto w = small_model();
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 1, 5);
  const auto& s = data[0];

  CompressionConfig half;
  half.stages = {{2, 0.5}};
  vtc::Tape tape;
  const auto wn = vtc::bind_weights(tape, w, false);
  vtc::ForwardOptions opt;
  opt.hook = vtc::make_hook(half, w.cfg.n_visual());
  auto g = vtc::build_forward(tape, wn, w.cfg, tape.leaf(s.image), s.prompt, opt);
  REQUIRE(g.vis_map.back().size() == 32);
  // Layers 1-2 see all 68 rows, layers >= 3 see 36.
  REQUIRE(tape.val(g.layers[1].x_in).rows == 68);
  REQUIRE(tape.val(g.layers[2].x_in).rows == 36);
  REQUIRE(tape.val(g.layers.back().x_out).rows == 36);

  CompressionConfig two;
  two.stages = {{2, 0.2}, {6, 0.1}};
  vtc::Tape tape2;
  const auto wn2 = vtc::bind_weights(tape2, w, false);
  vtc::ForwardOptions opt2;
  opt2.hook = vtc::make_hook(two, w.cfg.n_visual());
  auto g2 = vtc::build_forward(tape2, wn2, w.cfg, tape2.leaf(s.image), s.prompt, opt2);
  REQUIRE(tape2.val(g2.layers[2].x_in).rows == 13 + 4);
  REQUIRE(tape2.val(g2.layers[5].x_in).rows == 13 + 4);
  REQUIRE(tape2.val(g2.layers[6].x_in).rows == 7 + 4);
  const auto& final_map = g2.vis_map.back();
  REQUIRE(final_map.size() == 7);
  // Survivor map stays a strictly increasing subset of the original patches.
  for (size_t i = 1; i < final_map.size(); ++i) REQUIRE(final_map[i - 1] < final_map[i]);
  REQUIRE(final_map.back() < 64);
}

TEST_CASE("hook consumes override scores") {
  const auto w = small_model();
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 1, 6);
  const auto& s = data[0];

  // Ascending override forces the kept set to the highest indices regardless
  // of what attention says.
  CompressionConfig cfg;
  cfg.stages = {{2, 0.25}};
  std::vector<double> override_scores(64);
  for (int i = 0; i < 64; ++i) override_scores[i] = i;
  cfg.ranking_override = {override_scores};
  const auto hook = vtc::make_hook(cfg, 64);
  vtc::ForwardOptions opt;
  opt.hook = hook;
  vtc::Tape tape;
  const auto wn = vtc::bind_weights(tape, w, false);
  auto g = vtc::build_forward(tape, wn, w.cfg, tape.leaf(s.image), s.prompt, opt);
  std::vector<int> expect;
  for (int i = 48; i < 64; ++i) expect.push_back(i);
  REQUIRE(g.vis_map.back() == expect);

  // An override sized for the original count does not fit the 13 survivors
  // present when a second stage fires.
  CompressionConfig bad;
  bad.stages = {{2, 0.2}, {6, 0.1}};
  bad.ranking_override = {{}, override_scores};
  vtc::ForwardOptions bad_opt;
  bad_opt.hook = vtc::make_hook(bad, 64);
  vtc::Tape tape2;
  const auto wn2 = vtc::bind_weights(tape2, w, false);
  REQUIRE_THROWS_AS(
      vtc::build_forward(tape2, wn2, w.cfg, tape2.leaf(s.image), s.prompt, bad_opt),
      std::invalid_argument);
}

TEST_CASE("stateless hooks replay identically") {
  const auto w = small_model();
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 2, 9);
  CompressionConfig cfg;
  cfg.stages = {{2, 0.2}, {6, 0.1}};
  const auto hook = vtc::make_hook(cfg, 64);
  auto run = [&](const vtc::SyntheticSample& s) {
    vtc::Tape tape;
    const auto wn = vtc::bind_weights(tape, w, false);
    vtc::ForwardOptions opt;
    opt.hook = hook;
    return vtc::build_forward(tape, wn, w.cfg, tape.leaf(s.image), s.prompt, opt).vis_map;
  };
  REQUIRE(run(data[0]) == run(data[0]));      // same hook object reused
  const auto factory = vtc::hook_factory(cfg, 64);
  vtc::ForwardOptions opt;
  opt.hook = factory();
  vtc::Tape tape;
  const auto wn = vtc::bind_weights(tape, w, false);
  REQUIRE(vtc::build_forward(tape, wn, w.cfg, tape.leaf(data[0].image), data[0].prompt, opt)
              .vis_map.back() == run(data[0]).back());
}

TEST_CASE("configuration validation rejects malformed schedules") {
  CompressionConfig c;
  c.stages = {{2, 0.5}, {2, 0.25}};
  REQUIRE_THROWS_AS(c.validate(64), std::invalid_argument);  // layers not increasing
  c.stages = {{2, 0.0}};
  REQUIRE_THROWS_AS(c.validate(64), std::invalid_argument);
  c.stages = {{2, 1.5}};
  REQUIRE_THROWS_AS(c.validate(64), std::invalid_argument);
  c.stages = {{2, 1.0}};
  REQUIRE_THROWS_AS(c.validate(64), std::invalid_argument);  // keeps all 64: no reduction
  c.stages = {{2, 0.2}, {6, 0.2}};
  REQUIRE_THROWS_AS(c.validate(64), std::invalid_argument);  // second stage is a no-op
  c.stages = {{2, 0.2}};
  c.ranking_override = {{}, {}};
  REQUIRE_THROWS_AS(c.validate(64), std::invalid_argument);  // override arity
  c.ranking_override.clear();
  c.ref_prompt_indices = {4};
  REQUIRE_THROWS_AS(c.validate(64, 4), std::invalid_argument);  // prompt has indices 0..3
  c.ref_prompt_indices = {0, 3};
  REQUIRE_NOTHROW(c.validate(64, 4));
  c.stages = {{9, 0.5}};
  REQUIRE_THROWS_AS(c.validate(64, 4, 8), std::invalid_argument);  // beyond depth
}

TEST_CASE("average retention matches hand fractions") {
  REQUIRE(avg_retention({{2, 0.1}}, 32) == 0.15625);
  REQUIRE(avg_retention({{3, 0.2}, {8, 0.1}}, 32) == 6.4 / 32.0);
  REQUIRE(avg_retention({{2, 0.2}, {6, 0.1}}, 32) == 54.0 / 320.0);
  REQUIRE(avg_retention({}, 16) == 1.0);
  REQUIRE(avg_retention({{4, 0.5}}, 4) == (4.0 * 10.0 + 0.0) / 40.0);  // stage at the last layer
  REQUIRE_THROWS_AS(avg_retention({{2, 0.1}}, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(avg_retention({{5, 0.2}, {3, 0.1}}, 32), std::invalid_argument);
  REQUIRE_THROWS_AS(avg_retention({{33, 0.1}}, 32), std::invalid_argument);
}

TEST_CASE("enumerator reproduces the frozen schedule table") {
  struct Row {
    std::vector<CompressionStage> stages;
    const char* avg;
  };
  const std::vector<Row> expected = {
      {{{2, 0.1}}, "0.156"},
      {{{2, 0.2}, {6, 0.1}}, "0.169"},
      {{{2, 0.2}, {7, 0.1}}, "0.172"},
      {{{2, 0.2}, {8, 0.1}}, "0.175"},
      {{{2, 0.2}, {9, 0.1}}, "0.178"},
      {{{2, 0.2}, {10, 0.1}}, "0.181"},
      {{{3, 0.1}}, "0.184"},
      {{{2, 0.2}, {11, 0.1}}, "0.184"},
      {{{2, 0.2}, {12, 0.1}}, "0.188"},
      {{{2, 0.2}, {13, 0.1}}, "0.191"},
      {{{2, 0.2}, {14, 0.1}}, "0.194"},
      {{{2, 0.2}, {15, 0.1}}, "0.197"},
      {{{3, 0.2}, {7, 0.1}}, "0.197"},
      {{{2, 0.2}, {16, 0.1}}, "0.200"},
      {{{3, 0.2}, {8, 0.1}}, "0.200"},
  };
  const auto got = enumerate_configs(32, 0.2);
  REQUIRE(got.size() == expected.size());
  for (size_t i = 0; i < expected.size(); ++i) {
    REQUIRE(got[i].stages.size() == expected[i].stages.size());
    for (size_t j = 0; j < expected[i].stages.size(); ++j) {
      REQUIRE(got[i].stages[j].layer == expected[i].stages[j].layer);
      REQUIRE(got[i].stages[j].rate == expected[i].stages[j].rate);
    }
    char avg[16];
    std::snprintf(avg, sizeof avg, "%.3f", got[i].avg_rate);
    REQUIRE(std::string(avg) == expected[i].avg);
    REQUIRE(got[i].avg_rate == avg_retention(got[i].stages, 32));
  }
}

TEST_CASE("enumerator bounds and determinism") {
  REQUIRE(enumerate_configs(32, 0.10).empty());  // best achievable is 0.15625
  const auto narrow = enumerate_configs(32, 0.2, 0.18);
  REQUIRE_FALSE(narrow.empty());
  for (const auto& c : narrow) {
    REQUIRE(c.avg_rate >= 0.18);
    REQUIRE(c.avg_rate <= 0.2);
  }
  const auto a = enumerate_configs(24, 0.35, 0.1);
  const auto b = enumerate_configs(24, 0.35, 0.1);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].avg_rate == b[i].avg_rate);
    REQUIRE(a[i].stages.size() == b[i].stages.size());
    for (size_t j = 0; j < a[i].stages.size(); ++j) {
      REQUIRE(a[i].stages[j].layer == b[i].stages[j].layer);
      REQUIRE(a[i].stages[j].rate == b[i].stages[j].rate);
    }
  }
  // Averages ascend and every schedule is feasible under its own arithmetic.
  for (size_t i = 1; i < a.size(); ++i) REQUIRE(a[i - 1].avg_rate <= a[i].avg_rate);
  REQUIRE_THROWS_AS(enumerate_configs(1, 0.5), std::invalid_argument);
}

TEST_CASE("coverage counts earliest effective stages") {
  const auto regime = enumerate_configs(32, 0.4, 0.1);
  std::vector<int> all_layers, low_layers;
  for (int l = 1; l <= 31; ++l) all_layers.push_back(l);
  for (int l = 1; l <= 11; ++l) low_layers.push_back(l);
  REQUIRE(layer_coverage(all_layers, regime, 0.1, 0.4) == 1.0);
  REQUIRE(layer_coverage({}, regime, 0.1, 0.4) == 0.0);
  const double cov = layer_coverage(low_layers, regime, 0.1, 0.4);
  REQUIRE(cov > 0.80);

  // Widening the average-rate filter admits schedules whose earliest
  // effective stage sits beyond layer 11, so coverage drops below one.
  const auto wide = enumerate_configs(32, 0.6, 0.1);
  REQUIRE(layer_coverage(low_layers, wide, 0.1, 0.4) < 1.0);
  bool found = false;
  for (const auto& c : wide) {
    if (c.stages.size() == 4 && c.stages[0].layer == 2 && c.stages[0].rate == 0.8 &&
        c.stages[1].layer == 12)
      found = true;
  }
  REQUIRE(found);

  // A schedule with no stage inside the effective window counts as uncovered.
  EnumeratedConfig off;
  off.stages = {{2, 0.5}};
  off.avg_rate = avg_retention(off.stages, 32);
  REQUIRE(layer_coverage({2}, {off}, 0.1, 0.4) == 0.0);
  REQUIRE(layer_coverage({2}, {off}, 0.1, 0.5) == 1.0);
  REQUIRE_THROWS_AS(layer_coverage(low_layers, {}, 0.1, 0.4), std::invalid_argument);
}

TEST_CASE("schedule formatting and CSV layout") {
  REQUIRE(vtc::format_stages({{2, 0.1}}) == "[(2, 0.1)]");
  REQUIRE(vtc::format_stages({{2, 0.2}, {11, 0.1}}) == "[(2, 0.2), (11, 0.1)]");
  REQUIRE(vtc::format_stages({}) == "[]");
  const auto csv = vtc::enumeration_csv(enumerate_configs(32, 0.2));
  REQUIRE(csv.rfind("stages,avg_rate\n", 0) == 0);
  REQUIRE(csv.find("\"[(2, 0.1)]\",0.156\n") != std::string::npos);
  REQUIRE(csv.find("\"[(3, 0.2), (8, 0.1)]\",0.200\n") != std::string::npos);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 16);
  REQUIRE(csv.back() == '\n');
  REQUIRE(vtc::enumeration_csv(enumerate_configs(32, 0.2)) == csv);
}

TEST_CASE("retained counts use the original token budget") {
  REQUIRE(retained_count(0.1, 64) == 7);
  REQUIRE(retained_count(0.2, 64) == 13);
  REQUIRE(retained_count(0.5, 64) == 32);
  REQUIRE(retained_count(1.0, 64) == 64);
  REQUIRE(retained_count(0.25, 16) == 4);
  REQUIRE(retained_count(0.3, 10) == 3);
  REQUIRE(retained_count(0.01, 64) == 1);
}

TEST_CASE("per-layer score traces cover every layer") {
  vtc::ModelConfig cfg;
  cfg.grid_side = 4;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 3;
  cfg.ffn_dim = 16;
  const auto w = vtc::init_weights(cfg, 3);
  const auto data = vtc::generate_dataset(4, 12, vtc::TaskConfig{}, 1, 4);
  const auto& s = data[0];
  const auto traces = vtc::scores_by_layer(w, s.image, s.prompt);
  REQUIRE(traces.size() == 3);
  for (const auto& t : traces) {
    REQUIRE(t.size() == 16);
    double total = 0.0;
    for (double x : t) {
      REQUIRE(x >= 0.0);
      total += x;
    }
    REQUIRE(total <= 1.0 + 1e-9);  // visual mass is a slice of a softmax row
  }
  // Agrees with a hand-built forward at layer 1.
  vtc::Tape tape;
  const auto wn = vtc::bind_weights(tape, w, false);
  auto g = vtc::build_forward(tape, wn, w.cfg, tape.leaf(s.image), s.prompt);
  std::vector<Tensor> attn;
  for (int a : g.layers[0].attn) attn.push_back(tape.val(a));
  const auto manual = importance_scores(attn, {16 + 3}, 16);
  for (int j = 0; j < 16; ++j)
    REQUIRE_THAT(traces[0][j], Catch::Matchers::WithinAbs(manual[j], 1e-12));
}
