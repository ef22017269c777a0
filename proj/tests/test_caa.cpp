// Attack-module tests: pair construction, the three loss terms against hand
// values and their tape forms, region selection, PGD mechanics, and observed
// behavior on a trained model. The trained-model thresholds encode what a
// correct implementation achieves on fixed seeds with comfortable margins.
#include <algorithm>
#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "json.hpp"
#include "vtc/caa.hpp"
#include "vtc/dataset.hpp"
#include "vtc/train.hpp"

using vtc::Tensor;

namespace {

vtc::ModelWeights small_model() {
  vtc::ModelConfig cfg;
  cfg.grid_side = 4;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 3;
  cfg.ffn_dim = 16;
  return vtc::init_weights(cfg, 3);
}

// Trained once per binary run; every trained-model case shares it.
const vtc::ModelWeights& trained_model() {
  static const vtc::ModelWeights w = [] {
    vtc::ModelConfig mc;
    auto weights = vtc::init_weights(mc, 0);
    const auto train_set = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 256, 1000);
    const auto val_set = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 128, 2000);
    const auto log = vtc::train(weights, train_set, val_set, vtc::TrainConfig{});
    REQUIRE(log.val_acc.back() >= 0.95);
    return weights;
  }();
  return w;
}

const std::vector<vtc::SyntheticSample>& eval_batch() {
  static const auto batch = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 16, 3000);
  return batch;
}

}  // namespace

TEST_CASE("pair sets pit every least group against the most set and later groups against earlier") {
  vtc::RegionPartition part;
  part.omega_least = {0, 1, 2, 3};
  part.omega_most = {60, 61};
  part.least_groups = {{3, 2}, {1, 0}};

  const auto ps = vtc::make_pair_sets(part);
  REQUIRE(ps.p_lm.size() == 2);
  const std::vector<std::pair<int, int>> g0 = {{3, 60}, {3, 61}, {2, 60}, {2, 61}};
  const std::vector<std::pair<int, int>> g1 = {{1, 60}, {1, 61}, {0, 60}, {0, 61}};
  REQUIRE(ps.p_lm[0] == g0);
  REQUIRE(ps.p_lm[1] == g1);
  REQUIRE(ps.lm_count() == 8);
  // Later-group members (less informative) must outrank earlier-group ones.
  const std::vector<std::pair<int, int>> ll = {{1, 3}, {1, 2}, {0, 3}, {0, 2}};
  REQUIRE(ps.p_ll == ll);
}

TEST_CASE("rank loss matches hand-computed logistic values") {
  vtc::RegionPartition part;
  part.omega_least = {0, 1};
  part.omega_most = {4, 5};
  part.least_groups = {{1}, {0}};
  const auto ps = vtc::make_pair_sets(part);
  REQUIRE(ps.lm_count() == 4);
  REQUIRE(ps.p_ll.size() == 1);

  const double log2 = std::log(2.0);
  std::vector<double> flat(6, 0.4);  // every pairwise gap is zero
  REQUIRE_THAT(vtc::loss_rank(flat, ps, 1.0, 0.0), Catch::Matchers::WithinAbs(4 * log2, 1e-12));
  REQUIRE_THAT(vtc::loss_rank(flat, ps, 1.0, 0.5),
               Catch::Matchers::WithinAbs(4.5 * log2, 1e-12));
  REQUIRE_THAT(vtc::loss_rank(flat, ps, 2.0, 3.0),
               Catch::Matchers::WithinAbs((2.0 * 4 + 3.0) * log2, 1e-12));

  // Least tokens far above most tokens: nothing left to push.
  std::vector<double> won = {100.0, 100.0, 0.0, 0.0, -100.0, -100.0};
  REQUIRE_THAT(vtc::loss_rank(won, ps, 1.0, 0.0), Catch::Matchers::WithinAbs(0.0, 1e-12));

  // One pair with a known gap: -log sigmoid(-2) = softplus(2).
  vtc::RegionPartition single;
  single.omega_least = {0};
  single.omega_most = {1};
  single.least_groups = {{0}};
  const auto ps1 = vtc::make_pair_sets(single);
  std::vector<double> gap = {0.0, 2.0};
  REQUIRE_THAT(vtc::loss_rank(gap, ps1, 1.0, 0.5),
               Catch::Matchers::WithinAbs(std::log1p(std::exp(2.0)), 1e-12));
}

TEST_CASE("key and erase losses match hand values") {
  Tensor q = Tensor::zeros(2, 3);
  q.at(0, 0) = 1.0;
  q.at(1, 0) = 1.0;
  Tensor k = Tensor::zeros(4, 3);
  k.at(2, 0) = 1.0;
  k.at(3, 0) = 2.0;

  REQUIRE_THAT(vtc::loss_key(q, k, {2}, {0}), Catch::Matchers::WithinAbs(-1.0, 1e-12));
  // Mean over {refs 0,1} x {keys 2,3} of dot products (1+2+1+2)/4, negated.
  REQUIRE_THAT(vtc::loss_key(q, k, {2, 3}, {0, 1}), Catch::Matchers::WithinAbs(-1.5, 1e-12));
  Tensor k_orth = Tensor::zeros(4, 3);
  k_orth.at(2, 1) = 5.0;
  REQUIRE_THAT(vtc::loss_key(q, k_orth, {2}, {0, 1}), Catch::Matchers::WithinAbs(0.0, 1e-12));
  REQUIRE_THROWS_AS(vtc::loss_key(q, k, {}, {0}), std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::loss_key(q, Tensor::zeros(4, 2), {2}, {0}), std::invalid_argument);

  Tensor clean = Tensor::zeros(4, 3);
  Tensor pert = clean;
  REQUIRE_THAT(vtc::loss_erase(pert, clean, {1, 2}), Catch::Matchers::WithinAbs(0.0, 1e-12));
  pert.at(2, 0) = 1.0;  // one row deviates by a unit vector
  REQUIRE_THAT(vtc::loss_erase(pert, clean, {2}), Catch::Matchers::WithinAbs(-1.0, 1e-12));
  pert.at(2, 0) = 2.0;  // doubling the deviation quadruples the squared norm
  REQUIRE_THAT(vtc::loss_erase(pert, clean, {2}), Catch::Matchers::WithinAbs(-4.0, 1e-12));
  REQUIRE_THAT(vtc::loss_erase(pert, clean, {1, 2}), Catch::Matchers::WithinAbs(-2.0, 1e-12));
  REQUIRE_THROWS_AS(vtc::loss_erase(pert, clean, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::loss_erase(Tensor::zeros(3, 3), clean, {1}), std::invalid_argument);
}

TEST_CASE("tape losses agree with their direct forms and the objective passes finite differences") {
  const auto w = small_model();
  const int n_v = w.cfg.n_visual();
  const auto data = vtc::generate_dataset(4, 12, vtc::TaskConfig{}, 1, 11);
  // Keep pixels away from the [0,1] clamp so the objective is smooth where
  // the finite-difference probe wiggles it.
  Tensor image = data[0].image;
  for (double& x : image.v) x = 0.2 + 0.6 * x;
  const auto& prompt = data[0].prompt;
  const int layer = 2;

  const auto part = vtc::select_regions(w, image, prompt, layer, 4, 4, 2);
  const auto ps = vtc::make_pair_sets(part);
  const auto refs = vtc::detail::ref_rows({}, n_v, w.cfg.prompt_len);
  const auto clean = vtc::detail::clean_layer_state(w, image, prompt, layer, {});

  vtc::Tape tape;
  const auto wn = vtc::bind_weights(tape, w, false);
  vtc::ForwardOptions opt;
  opt.up_to_layer = layer;
  const auto g = vtc::build_forward(tape, wn, w.cfg, tape.leaf(image), prompt, opt);
  const auto& ln = g.layers[layer - 1];
  const int scores_node = vtc::importance_scores_node(tape, ln.attn, refs, n_v);
  const Tensor scores_val = tape.val(scores_node);
  std::vector<double> s(scores_val.v.begin(), scores_val.v.end());

  const int rank_node = vtc::loss_rank_node(tape, scores_node, ps, 1.0, 0.5);
  REQUIRE_THAT(tape.val(rank_node).item(),
               Catch::Matchers::WithinRel(vtc::loss_rank(s, ps, 1.0, 0.5), 1e-12));

  const int key_node = vtc::loss_key_node(tape, ln.q, ln.k, part.omega_least, refs);
  REQUIRE_THAT(tape.val(key_node).item(),
               Catch::Matchers::WithinRel(
                   vtc::loss_key(tape.val(ln.q), tape.val(ln.k), part.omega_least, refs),
                   1e-12));

  const int erase_node =
      vtc::loss_erase_node(tape, ln.x_out_prehook, clean.layer_out, part.omega_least);
  // Unperturbed input: the prehook states are the clean states.
  REQUIRE_THAT(tape.val(erase_node).item(), Catch::Matchers::WithinAbs(0.0, 1e-12));
  REQUIRE_THAT(tape.val(erase_node).item(),
               Catch::Matchers::WithinAbs(vtc::loss_erase(tape.val(ln.x_out_prehook),
                                                          clean.layer_out, part.omega_least),
                                          1e-12));

  // Full attack objective as a function of the perturbation.
  auto objective = [&](const Tensor& delta) -> std::pair<double, Tensor> {
    vtc::Tape t;
    const auto wnodes = vtc::bind_weights(t, w, false);
    const int d = t.leaf(delta, true);
    const int adv = t.clip_pass(t.add(t.leaf(image, false), d), 0.0, 1.0);
    vtc::ForwardOptions o;
    o.up_to_layer = layer;
    const auto fg = vtc::build_forward(t, wnodes, w.cfg, adv, prompt, o);
    const auto& l = fg.layers[layer - 1];
    const int sc = vtc::importance_scores_node(t, l.attn, refs, n_v);
    int total = vtc::loss_rank_node(t, sc, ps, 1.0, 0.5);
    total = t.add(total, t.scale(vtc::loss_erase_node(t, l.x_out_prehook, clean.layer_out,
                                                      part.omega_least),
                                 0.1));
    total = t.add(total,
                  t.scale(vtc::loss_key_node(t, l.q, l.k, part.omega_least, refs), 0.5));
    return {t.val(total).item(), t.gradient_single(total, d)};
  };
  Tensor delta = Tensor::zeros(n_v, w.cfg.patch_dim);
  vtc::Rng rng(17);
  for (int p : part.omega_least)
    for (int c = 0; c < w.cfg.patch_dim; ++c) delta.at(p, c) = rng.uniform(-0.05, 0.05);
  REQUIRE(vtc::finite_difference_check(objective, delta, 1e-4) < 1e-3);
}

TEST_CASE("region selection follows the low/high score order and slices groups by score") {
  vtc::ModelConfig mc;
  const auto w = vtc::init_weights(mc, 0);
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 2, 21);
  const auto& s0 = data[0];
  const int n_least = 13, n_most = 13, groups = 4;

  const auto part = vtc::select_regions(w, s0.image, s0.prompt, 2, n_least, n_most, groups);
  const auto scores = vtc::scores_by_layer(w, s0.image, s0.prompt)[1];

  // Independent oracle: stable sort by (score, index).
  std::vector<int> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  std::vector<int> least(order.begin(), order.begin() + n_least);
  std::sort(least.begin(), least.end());
  REQUIRE(part.omega_least == least);

  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<int> most(order.begin(), order.begin() + n_most);
  std::sort(most.begin(), most.end());
  REQUIRE(part.omega_most == most);

  // Group sizes: floor split with the remainder in the last group.
  REQUIRE(part.least_groups.size() == 4);
  REQUIRE(part.least_groups[0].size() == 3);
  REQUIRE(part.least_groups[1].size() == 3);
  REQUIRE(part.least_groups[2].size() == 3);
  REQUIRE(part.least_groups[3].size() == 4);

  // Flattened groups walk the least set in descending score order, and group
  // boundaries never invert it.
  std::vector<int> flat;
  for (const auto& g : part.least_groups) flat.insert(flat.end(), g.begin(), g.end());
  REQUIRE(flat.size() == static_cast<std::size_t>(n_least));
  std::set<int> flat_set(flat.begin(), flat.end());
  REQUIRE(flat_set == std::set<int>(least.begin(), least.end()));
  for (std::size_t i = 1; i < flat.size(); ++i) {
    const bool ordered = scores[flat[i - 1]] > scores[flat[i]] ||
                         (scores[flat[i - 1]] == scores[flat[i]] && flat[i - 1] < flat[i]);
    REQUIRE(ordered);
  }

  REQUIRE_THROWS_AS(vtc::select_regions(w, s0.image, s0.prompt, 2, 40, 30, 4),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::select_regions(w, s0.image, s0.prompt, 2, 13, 13, 14),
                    std::invalid_argument);
}

TEST_CASE("attack keeps the perturbation on its support and inside the budget") {
  vtc::ModelConfig mc;
  const auto w = vtc::init_weights(mc, 0);
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 1, 31);
  const auto& s0 = data[0];

  vtc::AttackConfig cfg;
  cfg.iterations = 12;
  cfg.seed = 4;
  const auto res = vtc::caa_attack(w, s0.image, s0.prompt, cfg);

  REQUIRE(res.loss_history.size() == 13);
  REQUIRE(res.loss_history.back() < res.loss_history.front());

  const std::set<int> least(res.partition.omega_least.begin(),
                            res.partition.omega_least.end());
  REQUIRE(res.pert.patch_support.size() == 64);
  for (int p = 0; p < 64; ++p) {
    const bool on = least.count(p) > 0;
    REQUIRE((res.pert.patch_support[p] == 1) == on);
    for (int c = 0; c < w.cfg.patch_dim; ++c) {
      const double d = res.pert.delta.at(p, c);
      if (!on) {
        REQUIRE(d == 0.0);
      } else {
        REQUIRE(std::abs(d) <= cfg.epsilon + 1e-12);
      }
    }
  }
  const Tensor adv = res.pert.apply(s0.image);
  for (double x : adv.v) {
    REQUIRE(x >= -1e-12);
    REQUIRE(x <= 1.0 + 1e-12);
  }

  // Bit-identical replays; a different seed must move the perturbation.
  const auto res2 = vtc::caa_attack(w, s0.image, s0.prompt, cfg);
  REQUIRE(res2.pert.delta.v == res.pert.delta.v);
  REQUIRE(res2.loss_history == res.loss_history);
  vtc::AttackConfig other = cfg;
  other.seed = 5;
  const auto res3 = vtc::caa_attack(w, s0.image, s0.prompt, other);
  REQUIRE(res3.pert.delta.v != res.pert.delta.v);
}

TEST_CASE("attack config validation rejects bad fields") {
  vtc::ModelConfig mc;
  const auto w = vtc::init_weights(mc, 0);
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 1, 41);
  const auto& s0 = data[0];

  auto expect_reject = [&](auto mutate) {
    vtc::AttackConfig cfg;
    mutate(cfg);
    REQUIRE_THROWS_AS(vtc::caa_attack(w, s0.image, s0.prompt, cfg), std::invalid_argument);
  };
  expect_reject([](vtc::AttackConfig& c) { c.epsilon = 0.0; });
  expect_reject([](vtc::AttackConfig& c) { c.epsilon = 1.5; });
  expect_reject([](vtc::AttackConfig& c) { c.step = 0.0; });
  expect_reject([](vtc::AttackConfig& c) { c.iterations = 0; });
  expect_reject([](vtc::AttackConfig& c) { c.layer = 0; });
  expect_reject([](vtc::AttackConfig& c) { c.layer = 9; });
  expect_reject([](vtc::AttackConfig& c) { c.n_least = 60; c.n_most = 10; });
  expect_reject([](vtc::AttackConfig& c) { c.groups = 0; });
  expect_reject([](vtc::AttackConfig& c) { c.groups = 14; });  // exceeds default n_least

  vtc::AttackConfig cfg;
  REQUIRE_THROWS_AS(vtc::caa_attack(w, Tensor::zeros(32, 12), s0.prompt, cfg),
                    std::invalid_argument);

  // Default region sizing: ceil(0.2 * 64) on both sides.
  const auto resolved = cfg.resolved(64);
  REQUIRE(resolved.n_least == 13);
  REQUIRE(resolved.n_most == 13);
  REQUIRE(cfg.resolved(16).n_least == 4);
}

TEST_CASE("trained model: attack rewrites which tokens compression keeps") {
  const auto& w = trained_model();
  const auto& batch = eval_batch();

  int strong_rewrites = 0;  // samples where most of the least set overtakes the most set
  int above_total = 0;
  for (int si = 0; si < 4; ++si) {
    const auto& s = batch[si];
    vtc::AttackConfig cfg;
    const auto res = vtc::caa_attack(w, s.image, s.prompt, cfg);
    REQUIRE(res.loss_history.back() < res.loss_history.front());

    const Tensor adv = res.pert.apply(s.image);
    const auto after = vtc::scores_by_layer(w, adv, s.prompt)[1];
    double most_min = 1e300;
    for (int m : res.partition.omega_most) most_min = std::min(most_min, after[m]);
    int above = 0;
    for (int l : res.partition.omega_least)
      if (after[l] > most_min) ++above;
    above_total += above;
    if (above >= 7) ++strong_rewrites;

    // Tokens compression keeps at (layer 2, rate 0.2): the attack must push
    // least-important patches into the kept set.
    vtc::CompressionConfig cc;
    cc.stages = {{2, 0.2}};
    auto kept_overlap = [&](const Tensor& img) {
      vtc::Tape tape;
      const auto wn = vtc::bind_weights(tape, w, false);
      vtc::ForwardOptions opt;
      opt.hook = vtc::make_hook(cc, 64);
      const auto g = vtc::build_forward(tape, wn, w.cfg, tape.leaf(img), s.prompt, opt);
      int inter = 0;
      for (int id : g.vis_map.back())
        for (int l : res.partition.omega_least)
          if (id == l) ++inter;
      return inter;
    };
    REQUIRE(kept_overlap(adv) > kept_overlap(s.image));
  }
  REQUIRE(above_total >= 20);
  REQUIRE(strong_rewrites >= 2);
}

TEST_CASE("trained model: a negligible budget leaves the prediction untouched") {
  const auto& w = trained_model();
  const auto& s = eval_batch()[0];
  vtc::AttackConfig cfg;
  cfg.epsilon = 1e-9;
  cfg.step = 1e-10;
  cfg.iterations = 2;
  const auto res = vtc::caa_attack(w, s.image, s.prompt, cfg);
  const auto clean = vtc::forward(w, s.image, s.prompt);
  const auto adv = vtc::forward(w, res.pert.apply(s.image), s.prompt);
  REQUIRE(clean.answer == adv.answer);
  for (int i = 0; i < 2; ++i)
    REQUIRE_THAT(adv.logits.v[i], Catch::Matchers::WithinAbs(clean.logits.v[i], 1e-6));
}

TEST_CASE("trained model: answer-flipping baseline breaks predictions within budget") {
  const auto& w = trained_model();
  const auto& batch = eval_batch();

  int clean_correct = 0, adv_correct = 0;
  for (int si = 0; si < 4; ++si) {
    const auto& s = batch[si];
    const auto cfg = vtc::baseline_for_label(s.label);
    const auto res = vtc::vanilla_attack(w, s.image, s.prompt, cfg);

    for (double d : res.pert.delta.v) REQUIRE(std::abs(d) <= cfg.epsilon + 1e-12);
    REQUIRE(res.pert.patch_support == std::vector<char>(64, 1));
    const Tensor adv = res.pert.apply(s.image);
    for (double x : adv.v) {
      REQUIRE(x >= -1e-12);
      REQUIRE(x <= 1.0 + 1e-12);
    }

    clean_correct += vtc::sample_correct(w, s) ? 1 : 0;
    vtc::SyntheticSample sa = s;
    sa.image = adv;
    adv_correct += vtc::sample_correct(w, sa) ? 1 : 0;
  }
  REQUIRE(clean_correct == 4);
  REQUIRE(adv_correct <= 1);
}

TEST_CASE("answer-flipping baseline: zero iterations, determinism, validation") {
  vtc::ModelConfig mc;
  const auto w = vtc::init_weights(mc, 0);
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 1, 51);
  const auto& s0 = data[0];

  vtc::BaselineConfig cfg;
  cfg.iterations = 0;
  cfg.seed = 9;
  const auto res = vtc::vanilla_attack(w, s0.image, s0.prompt, cfg);
  REQUIRE(res.loss_history.size() == 1);  // evaluated at the initializer only
  for (double d : res.pert.delta.v) REQUIRE(std::abs(d) <= cfg.epsilon + 1e-12);
  const auto res2 = vtc::vanilla_attack(w, s0.image, s0.prompt, cfg);
  REQUIRE(res2.pert.delta.v == res.pert.delta.v);

  auto expect_reject = [&](auto mutate) {
    vtc::BaselineConfig c;
    mutate(c);
    REQUIRE_THROWS_AS(vtc::vanilla_attack(w, s0.image, s0.prompt, c), std::invalid_argument);
  };
  expect_reject([](vtc::BaselineConfig& c) { c.correct_answers = {}; });
  expect_reject([](vtc::BaselineConfig& c) { c.wrong_answers = {}; });
  expect_reject([](vtc::BaselineConfig& c) {
    c.correct_answers = {vtc::kAnswerYes};
    c.wrong_answers = {vtc::kAnswerYes};
  });
  expect_reject([](vtc::BaselineConfig& c) { c.correct_answers = {5}; });
  expect_reject([](vtc::BaselineConfig& c) { c.epsilon = 0.0; });
  expect_reject([](vtc::BaselineConfig& c) { c.step = -1.0; });
  expect_reject([](vtc::BaselineConfig& c) { c.iterations = -1; });

  const auto yes_cfg = vtc::baseline_for_label(true);
  REQUIRE(yes_cfg.correct_answers == std::vector<int>{vtc::kAnswerYes});
  REQUIRE(yes_cfg.wrong_answers == std::vector<int>{vtc::kAnswerNo});
  const auto no_cfg = vtc::baseline_for_label(false);
  REQUIRE(no_cfg.correct_answers == std::vector<int>{vtc::kAnswerNo});
  REQUIRE(no_cfg.wrong_answers == std::vector<int>{vtc::kAnswerYes});
}

TEST_CASE("random noise baseline: bounds, determinism, zero budget") {
  const auto data = vtc::generate_dataset(8, 12, vtc::TaskConfig{}, 1, 61);
  const auto& img = data[0].image;

  const double eps = 32.0 / 255.0;
  const auto p = vtc::random_attack(img, eps, 5);
  REQUIRE(p.patch_support == std::vector<char>(64, 1));
  for (double d : p.delta.v) REQUIRE(std::abs(d) <= eps + 1e-12);
  const Tensor adv = p.apply(img);
  for (double x : adv.v) {
    REQUIRE(x >= -1e-12);
    REQUIRE(x <= 1.0 + 1e-12);
  }
  bool moved = false;
  for (double d : p.delta.v) moved = moved || d != 0.0;
  REQUIRE(moved);

  const auto p2 = vtc::random_attack(img, eps, 5);
  REQUIRE(p2.delta.v == p.delta.v);
  const auto p3 = vtc::random_attack(img, eps, 6);
  REQUIRE(p3.delta.v != p.delta.v);

  const auto z = vtc::random_attack(img, 0.0, 5);
  for (double d : z.delta.v) REQUIRE(d == 0.0);
  REQUIRE_THROWS_AS(vtc::random_attack(img, -0.1, 5), std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::random_attack(img, 1.1, 5), std::invalid_argument);
}

TEST_CASE("perturbation serializes to a single parseable JSON line") {
  vtc::Perturbation p;
  p.delta = Tensor::zeros(2, 3);
  p.delta.at(0, 0) = 1.0 / 3.0;
  p.delta.at(1, 2) = -0.125;
  p.patch_support = {1, 0};
  p.epsilon = 32.0 / 255.0;

  const std::string line = vtc::perturbation_jsonl(p, 7, "abc123", {1.5, -2.25});
  REQUIRE(line.find('\n') == std::string::npos);

  const auto parsed = nlohmann::json::parse(line);
  REQUIRE(parsed["sample"] == 7);
  REQUIRE(parsed["digest"] == "abc123");
  REQUIRE(parsed["rows"] == 2);
  REQUIRE(parsed["cols"] == 3);
  REQUIRE(parsed["support"] == nlohmann::json::array({1, 0}));
  REQUIRE(parsed["epsilon"].get<double>() == 32.0 / 255.0);
  REQUIRE(parsed["delta"].size() == 6);
  // %.17g survives the parse bit-exactly.
  REQUIRE(parsed["delta"][0].get<double>() == 1.0 / 3.0);
  REQUIRE(parsed["delta"][5].get<double>() == -0.125);
  REQUIRE(parsed["loss"] == nlohmann::json::array({1.5, -2.25}));
}
