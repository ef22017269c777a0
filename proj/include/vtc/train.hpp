// Optimizers over the answer cross-entropy: Adam (default) and SGD with
// momentum. Adam's per-coordinate step sizes pick up the small label-bearing
// signal directions that plain momentum SGD tends to oscillate across on
// this task, so it converges reliably where SGD is seed-lottery.
//
// Binary cross-entropy over the two answer logits is written with the
// log-sigmoid primitive: -log p(correct) = -logsigmoid(+/- (z_yes - z_no)).
// Training is single-threaded and fully deterministic for a given seed.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtc/model.hpp"

namespace vtc {

enum class Optimizer { adam, sgd_momentum };

struct TrainConfig {
  Optimizer optimizer = Optimizer::adam;
  int batch = 32;
  double lr = 0.05;        // sgd_momentum step size
  double momentum = 0.9;   // sgd_momentum only
  double adam_lr = 0.0005;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;  // decoupled, skipped for norm gains
  // Epochs at the start where only the answer head updates, at its own
  // larger step size. The zero-initialized head locks onto the answer
  // signal present at initialization before joint training is allowed to
  // reshape anything else.
  int head_warmup_epochs = 5;
  double head_lr = 0.05;
  int max_epochs = 60;
  double target_val_acc = 0.97;  // early stop once validation reaches this
  uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> val_acc;
  int epochs = 0;
  bool early_stopped = false;
};

// Cross-entropy node for one sample; logits is a 1x2 node.
inline int cross_entropy_node(Tape& tape, int logits, int label) {
  const int zy = tape.slice(logits, {kAnswerYes}, 1, 1);
  const int zn = tape.slice(logits, {kAnswerNo}, 1, 1);
  const double sign = (label == 1) ? 1.0 : -1.0;
  return tape.neg(tape.log_sigmoid(tape.scale(tape.sub(zy, zn), sign)));
}

inline TrainLog train(ModelWeights& w, const std::vector<SyntheticSample>& train_set,
                      const std::vector<SyntheticSample>& val_set, const TrainConfig& cfg) {
  if (train_set.empty() || val_set.empty())
    throw std::invalid_argument("train: empty dataset");
  if (cfg.batch < 1 || cfg.lr <= 0.0 || cfg.adam_lr <= 0.0 || cfg.max_epochs < 1)
    throw std::invalid_argument("train: bad optimizer settings");

  // Optimizer state, one buffer pair per weight tensor, in bind order.
  std::vector<Tensor*> params;
  std::vector<bool> decay;
  {
    auto add = [&](Tensor* t, bool d) {
      params.push_back(t);
      decay.push_back(d);
    };
    add(&w.patch_proj, true);
    add(&w.text_embed, true);
    add(&w.pos_visual, true);
    add(&w.pos_text, true);
    for (auto& l : w.layers) {
      for (Tensor* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) add(t, true);
      add(&l.norm1, false);
      add(&l.norm2, false);
    }
    add(&w.norm_final, false);
    add(&w.answer_head, true);
  }
  std::vector<Tensor> m1(params.size()), m2(params.size()), grad_sum(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    m1[i] = Tensor(params[i]->rows, params[i]->cols);
    m2[i] = Tensor(params[i]->rows, params[i]->cols);
    grad_sum[i] = Tensor(params[i]->rows, params[i]->cols);
  }

  Rng rng(cfg.seed);
  std::vector<int> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  TrainLog log;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int seen = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch) {
      const size_t stop = std::min(order.size(), start + cfg.batch);
      const int bsz = static_cast<int>(stop - start);
      for (Tensor& g : grad_sum)
        for (double& x : g.v) x = 0.0;

      for (size_t i = start; i < stop; ++i) {
        const SyntheticSample& s = train_set[order[i]];
        Tape tape;
        const WeightNodes wn = bind_weights(tape, w, true);
        const ForwardGraph g = build_forward(tape, wn, w.cfg, tape.leaf(s.image), s.prompt);
        const int loss = cross_entropy_node(tape, g.logits, s.label);
        const double lv = tape.val(loss).item();
        if (!std::isfinite(lv))
          throw std::runtime_error("train: diverged (non-finite loss) at epoch " +
                                   std::to_string(epoch));
        epoch_loss += lv;
        ++seen;
        const std::vector<int> ids = wn.all();
        auto grads = tape.gradient(loss, ids);
        for (size_t p = 0; p < ids.size(); ++p)
          add_scaled_into(grad_sum[p], grads.at(ids[p]), 1.0);
      }

      const double inv = 1.0 / static_cast<double>(bsz);
      const bool head_only = epoch <= cfg.head_warmup_epochs;
      ++step;
      if (cfg.optimizer == Optimizer::adam) {
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
        for (size_t p = 0; p < params.size(); ++p) {
          // Moments accumulate for every tensor from step one so the
          // unfreeze after warmup starts with calibrated step sizes
          // instead of full-size sign jolts.
          const bool frozen = head_only && params[p] != &w.answer_head;
          const double lr = head_only ? cfg.head_lr : cfg.adam_lr;
          Tensor& prm = *params[p];
          for (size_t k = 0; k < prm.numel(); ++k) {
            const double g = grad_sum[p].v[k] * inv;
            m1[p].v[k] = cfg.adam_beta1 * m1[p].v[k] + (1.0 - cfg.adam_beta1) * g;
            m2[p].v[k] = cfg.adam_beta2 * m2[p].v[k] + (1.0 - cfg.adam_beta2) * g * g;
            if (frozen) continue;
            const double mhat = m1[p].v[k] / bc1;
            const double vhat = m2[p].v[k] / bc2;
            prm.v[k] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                              (decay[p] ? cfg.weight_decay * prm.v[k] : 0.0));
          }
        }
      } else {
        for (size_t p = 0; p < params.size(); ++p) {
          if (head_only && params[p] != &w.answer_head) continue;
          const double lr = head_only ? cfg.head_lr : cfg.lr;
          Tensor& vel = m1[p];
          Tensor& prm = *params[p];
          for (size_t k = 0; k < prm.numel(); ++k) {
            vel.v[k] = cfg.momentum * vel.v[k] + grad_sum[p].v[k] * inv;
            prm.v[k] -= lr * vel.v[k];
          }
        }
      }
    }

    log.epoch_loss.push_back(epoch_loss / std::max(1, seen));
    log.val_acc.push_back(accuracy(w, val_set));
    log.epochs = epoch;
    if (log.val_acc.back() >= cfg.target_val_acc) {
      log.early_stopped = true;
      break;
    }
  }
  return log;
}

}  // namespace vtc
