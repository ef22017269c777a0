#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "vtc/dataset.hpp"
#include "vtc/io.hpp"
#include "vtc/model.hpp"
#include "vtc/train.hpp"

using vtc::ForwardOptions;
using vtc::ModelConfig;
using vtc::ModelWeights;
using vtc::SyntheticSample;
using vtc::TaskConfig;
using vtc::Tensor;
using vtc::TrainConfig;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.grid_side = 4;
  return m;
}

std::vector<SyntheticSample> small_set(int count, uint64_t seed) {
  return vtc::generate_dataset(4, 12, TaskConfig{}, count, seed);
}

}  // namespace

TEST_CASE("dataset generation is seed-deterministic") {
  const TaskConfig task;
  const auto a = vtc::generate_dataset(8, 12, task, 64, 7);
  const auto b = vtc::generate_dataset(8, 12, task, 64, 7);
  const auto c = vtc::generate_dataset(8, 12, task, 64, 8);
  REQUIRE(vtc::dataset_digest(a) == vtc::dataset_digest(b));
  REQUIRE(vtc::dataset_digest(a) != vtc::dataset_digest(c));
}

TEST_CASE("dataset balance, label rule, and value ranges") {
  const TaskConfig task;
  const auto set = vtc::generate_dataset(8, 12, task, 256, 11);
  int yes = 0;
  for (const auto& s : set) {
    yes += s.label;
    REQUIRE(s.image.rows == 64);
    REQUIRE(s.image.cols == 12);
    for (double x : s.image.v) {
      REQUIRE(x >= 0.0);
      REQUIRE(x <= 1.0);
    }
    REQUIRE(s.prompt == vtc::make_prompt(task, s.query_class));
    REQUIRE(s.query_class >= 0);
    REQUIRE(s.query_class < task.classes);
    REQUIRE(s.object_patches.size() == s.object_classes.size());
    REQUIRE(static_cast<int>(s.object_patches.size()) >= task.min_objects);
    REQUIRE(static_cast<int>(s.object_patches.size()) <= task.max_objects);
    // objects occupy distinct patches and carry distinct classes
    auto patches = s.object_patches;
    std::sort(patches.begin(), patches.end());
    REQUIRE(std::adjacent_find(patches.begin(), patches.end()) == patches.end());
    auto classes = s.object_classes;
    std::sort(classes.begin(), classes.end());
    REQUIRE(std::adjacent_find(classes.begin(), classes.end()) == classes.end());
    const bool present = std::find(s.object_classes.begin(), s.object_classes.end(),
                                   s.query_class) != s.object_classes.end();
    REQUIRE(s.label == (present ? 1 : 0));
  }
  REQUIRE(yes == 128);
}

TEST_CASE("prompt layout puts the query class last") {
  const TaskConfig task;  // 8 classes
  REQUIRE(vtc::vocab_size(task) == 11);
  const auto p = vtc::make_prompt(task, 5);
  REQUIRE(p.size() == 4);
  REQUIRE(p[0] == vtc::token_bos(task));
  REQUIRE(p[1] == vtc::token_qry(task));
  REQUIRE(p[2] == vtc::token_sep(task));
  REQUIRE(p[3] == 5);
  // the three structural tokens are distinct and outside the class range
  REQUIRE(vtc::token_bos(task) == 8);
  REQUIRE(vtc::token_sep(task) == 9);
  REQUIRE(vtc::token_qry(task) == 10);
}

TEST_CASE("attention rows are probability vectors at every layer") {
  const ModelConfig mc = small_model();
  const ModelWeights w = vtc::init_weights(mc, 3);
  const auto set = small_set(1, 21);
  int layers_seen = 0;
  ForwardOptions opt;
  opt.hook = [&](const vtc::HookContext& ctx) -> std::optional<std::vector<int>> {
    ++layers_seen;
    REQUIRE(ctx.head_attn->size() == static_cast<size_t>(mc.heads));
    for (const Tensor& a : *ctx.head_attn) {
      REQUIRE(a.rows == a.cols);
      for (int i = 0; i < a.rows; ++i) {
        double sum = 0.0;
        for (int j = 0; j < a.cols; ++j) {
          REQUIRE(a.at(i, j) >= 0.0);
          if (j > i) REQUIRE(a.at(i, j) == 0.0);  // causal mask
          sum += a.at(i, j);
        }
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
      }
    }
    return std::nullopt;
  };
  vtc::forward(w, set[0].image, set[0].prompt, opt);
  REQUIRE(layers_seen == mc.layers);
}

TEST_CASE("answer decoding resolves exact ties to no") {
  Tensor t(1, 2);
  REQUIRE(vtc::decode_answer(t) == vtc::kAnswerNo);
  t.v = {0.1, 0.0};
  REQUIRE(vtc::decode_answer(t) == vtc::kAnswerYes);
  t.v = {0.0, 0.1};
  REQUIRE(vtc::decode_answer(t) == vtc::kAnswerNo);
  Tensor bad(1, 3);
  REQUIRE_THROWS_AS(vtc::decode_answer(bad), std::invalid_argument);
}

TEST_CASE("forward validates prompt, image shape, and hook indices") {
  const ModelConfig mc = small_model();
  const ModelWeights w = vtc::init_weights(mc, 3);
  const auto set = small_set(1, 21);
  const auto& s = set[0];

  REQUIRE_THROWS_AS(vtc::forward(w, s.image, {0, 1, 2}), std::invalid_argument);
  Tensor wrong(9, 12);
  REQUIRE_THROWS_AS(vtc::forward(w, wrong, s.prompt), std::invalid_argument);
  std::vector<int> oov = s.prompt;
  oov[3] = mc.text_vocab;
  REQUIRE_THROWS_AS(vtc::forward(w, s.image, oov), std::invalid_argument);

  auto hook_returning = [&](std::vector<int> keep) {
    ForwardOptions opt;
    opt.hook = [keep, fired = false](const vtc::HookContext& ctx) mutable
        -> std::optional<std::vector<int>> {
      if (ctx.layer != 2 || fired) return std::nullopt;
      fired = true;
      return keep;
    };
    return opt;
  };
  REQUIRE_THROWS_AS(vtc::forward(w, s.image, s.prompt, hook_returning({})),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::forward(w, s.image, s.prompt, hook_returning({3, 3})),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::forward(w, s.image, s.prompt, hook_returning({5, 2})),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(vtc::forward(w, s.image, s.prompt, hook_returning({0, 16})),
                    std::invalid_argument);
  REQUIRE_NOTHROW(vtc::forward(w, s.image, s.prompt, hook_returning({0, 5, 10})));
}

TEST_CASE("hooks drop visual rows and remap original patch ids") {
  const ModelConfig mc = small_model();
  const ModelWeights w = vtc::init_weights(mc, 3);
  const auto set = small_set(1, 22);
  ForwardOptions opt;
  opt.hook = [](const vtc::HookContext& ctx) -> std::optional<std::vector<int>> {
    if (ctx.layer == 2) return std::vector<int>{0, 5, 10};
    if (ctx.layer == 5) return std::vector<int>{1, 2};  // positions into survivors
    return std::nullopt;
  };
  const auto r = vtc::forward(w, set[0].image, set[0].prompt, opt);
  REQUIRE(r.vis_map.size() == static_cast<size_t>(mc.layers));
  REQUIRE(r.vis_map[0].size() == 16);  // untouched after layer 1
  REQUIRE(r.vis_map[1] == std::vector<int>{0, 5, 10});
  REQUIRE(r.vis_map[4] == std::vector<int>{5, 10});  // second stage is a subset
  REQUIRE(r.vis_map.back() == std::vector<int>{5, 10});
}

TEST_CASE("training is deterministic under a fixed seed") {
  const ModelConfig mc = small_model();
  const auto train_set = small_set(32, 100);
  const auto val_set = small_set(16, 200);
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.target_val_acc = 1.1;  // never early-stop
  tc.seed = 5;

  ModelWeights w1 = vtc::init_weights(mc, 9);
  ModelWeights w2 = vtc::init_weights(mc, 9);
  const auto log1 = vtc::train(w1, train_set, val_set, tc);
  const auto log2 = vtc::train(w2, train_set, val_set, tc);
  REQUIRE(vtc::weights_digest(w1) == vtc::weights_digest(w2));
  REQUIRE(log1.epoch_loss == log2.epoch_loss);
  REQUIRE(log1.val_acc == log2.val_acc);
  REQUIRE(log1.epochs == 3);
  REQUIRE_FALSE(log1.early_stopped);
}

TEST_CASE("default model learns the presence task from seed 0") {
  const ModelConfig mc;  // 8x8 grid
  const TaskConfig task;
  const auto train_set = vtc::generate_dataset(8, 12, task, 256, 1000);
  const auto val_set = vtc::generate_dataset(8, 12, task, 128, 2000);
  ModelWeights w = vtc::init_weights(mc, 0);
  const auto log = vtc::train(w, train_set, val_set, TrainConfig{});
  REQUIRE_FALSE(log.val_acc.empty());
  REQUIRE(log.val_acc.back() >= 0.95);
  // and the trained function, not the head alone, carries the decision
  REQUIRE(vtc::accuracy(w, val_set) >= 0.95);
}

TEST_CASE("shuffled labels do not generalize") {
  const ModelConfig mc;
  const TaskConfig task;
  auto train_set = vtc::generate_dataset(8, 12, task, 256, 1000);
  const auto val_set = vtc::generate_dataset(8, 12, task, 128, 2000);
  std::vector<int> labels;
  for (const auto& s : train_set) labels.push_back(s.label);
  std::mt19937 rng(4242);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (size_t i = 0; i < train_set.size(); ++i) train_set[i].label = labels[i];

  TrainConfig tc;
  tc.max_epochs = 15;
  tc.target_val_acc = 1.1;
  ModelWeights w = vtc::init_weights(mc, 0);
  vtc::train(w, train_set, val_set, tc);
  REQUIRE(vtc::accuracy(w, val_set) <= 0.60);
}
