// Desk-scale experiment suites over the toy model: retention sweeps, ranking
// diagnostics, white-box and transferred attacks, and the region-removal
// defense. Each suite reads pre-built models and datasets from a context,
// consumes its knobs from an ExperimentSpec, and emits a ReportBundle whose
// every row carries seeds and a config digest, so identical inputs reproduce
// identical artifacts.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vtc/caa.hpp"
#include "vtc/compressor.hpp"
#include "vtc/dataset.hpp"
#include "vtc/io.hpp"
#include "vtc/metrics.hpp"
#include "vtc/model.hpp"
#include "vtc/rankstats.hpp"
#include "vtc/tcaa.hpp"
#include "vtc/tensor.hpp"
#include "vtc/train.hpp"

namespace vtc {

// ----------------------------------------------------------------- bundles

struct ReportRow {
  std::string suite;
  std::string label;
  std::uint64_t model_seed = 0;
  std::uint64_t data_seed = 0;
  std::string config_digest;
  MetricsRecord rec;
};

struct ScalarRow {
  std::string suite;
  std::string label;
  std::uint64_t model_seed = 0;
  std::uint64_t data_seed = 0;
  std::string config_digest;
  std::string metric;
  double value = 0.0;
};

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Plot {
  std::string name;   // file stem
  std::string kind;   // "line" or "bar"
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
};

struct TableArtifact {
  std::string name;  // file stem
  std::string csv;
};

struct ReportBundle {
  std::vector<ReportRow> records;
  std::vector<ScalarRow> scalars;
  std::vector<Plot> plots;
  std::vector<TableArtifact> tables;
  std::vector<std::string> flags;  // "name=0|1" trend markers
};

inline void merge_into(ReportBundle& dst, ReportBundle src) {
  auto move_all = [](auto& into, auto& from) {
    into.insert(into.end(), std::make_move_iterator(from.begin()),
                std::make_move_iterator(from.end()));
  };
  move_all(dst.records, src.records);
  move_all(dst.scalars, src.scalars);
  move_all(dst.plots, src.plots);
  move_all(dst.tables, src.tables);
  move_all(dst.flags, src.flags);
}

// ----------------------------------------------------------------- context

// Everything a suite may read. Default-geometry models cover the white-box
// suites; the transfer pair (surrogate first, target second) is trained on
// border-augmented inputs and is only required by transfer suites.
struct SuiteContext {
  std::vector<ModelWeights> models;
  std::vector<std::uint64_t> model_seeds;
  std::vector<SyntheticSample> eval_set;
  std::uint64_t data_seed = 0;

  std::vector<ModelWeights> transfer_models;      // [0] surrogate, [1] target
  std::vector<std::uint64_t> transfer_seeds;
  std::vector<SyntheticSample> fit_set;           // template fitting batch
  std::vector<SyntheticSample> transfer_eval;     // plain geometry, assembled on the fly

  Tensor mean_patch;  // 1 x patch_dim defense replacement content
};

struct ContextConfig {
  int model_count = 5;
  std::uint64_t first_model_seed = 0;
  std::uint64_t train_seed = 1000;
  std::uint64_t val_seed = 2000;
  std::uint64_t eval_seed = 3000;
  int train_size = 256;
  int val_size = 128;
  int eval_size = 500;
  TaskConfig task;
  ModelConfig model;
  TrainConfig trainer;

  bool with_transfer = false;
  std::uint64_t surrogate_seed = 0;
  std::uint64_t target_seed = 1;
  int border_width = 1;
  double border_fill = 0.5;
  std::uint64_t fit_seed = 4000;
  int fit_pool = 64;
  int transfer_eval_size = 256;
};

namespace detail {

inline std::vector<SyntheticSample> augment_samples(const std::vector<SyntheticSample>& in,
                                                    int width, double fill) {
  std::vector<SyntheticSample> out = in;
  for (SyntheticSample& s : out) s.image = augment_border(s.image, width, fill).first;
  return out;
}

// One fitting sample per query class, drawn in pool order so the template
// never overfits to a subset of the class queries.
inline std::vector<SyntheticSample> class_covering_batch(
    const std::vector<SyntheticSample>& pool, int classes) {
  std::vector<SyntheticSample> out;
  std::vector<bool> seen(classes, false);
  for (const SyntheticSample& s : pool) {
    if (s.query_class < 0 || s.query_class >= classes || seen[s.query_class]) continue;
    seen[s.query_class] = true;
    out.push_back(s);
  }
  if (static_cast<int>(out.size()) != classes)
    throw std::invalid_argument("transfer: fitting pool does not cover every query class");
  return out;
}

}  // namespace detail

inline SuiteContext build_context(const ContextConfig& cc) {
  if (cc.model_count < 1) throw std::invalid_argument("context: need at least one model");
  SuiteContext ctx;
  ctx.data_seed = cc.eval_seed;
  const auto train_set =
      generate_dataset(cc.model.grid_side, cc.model.patch_dim, cc.task, cc.train_size,
                       cc.train_seed);
  const auto val_set = generate_dataset(cc.model.grid_side, cc.model.patch_dim, cc.task,
                                        cc.val_size, cc.val_seed);
  ctx.eval_set = generate_dataset(cc.model.grid_side, cc.model.patch_dim, cc.task,
                                  cc.eval_size, cc.eval_seed);
  ctx.mean_patch = dataset_mean_patch(train_set);
  for (int i = 0; i < cc.model_count; ++i) {
    const std::uint64_t seed = cc.first_model_seed + static_cast<std::uint64_t>(i);
    ModelWeights w = init_weights(cc.model, seed);
    (void)train(w, train_set, val_set, cc.trainer);
    ctx.models.push_back(std::move(w));
    ctx.model_seeds.push_back(seed);
  }
  if (cc.with_transfer) {
    ModelConfig aug_cfg = cc.model;
    aug_cfg.grid_side = cc.model.grid_side + 2 * cc.border_width;
    const auto train_aug = detail::augment_samples(train_set, cc.border_width, cc.border_fill);
    const auto val_aug = detail::augment_samples(val_set, cc.border_width, cc.border_fill);
    for (std::uint64_t seed : {cc.surrogate_seed, cc.target_seed}) {
      ModelWeights w = init_weights(aug_cfg, seed);
      (void)train(w, train_aug, val_aug, cc.trainer);
      ctx.transfer_models.push_back(std::move(w));
      ctx.transfer_seeds.push_back(seed);
    }
    const auto pool = generate_dataset(cc.model.grid_side, cc.model.patch_dim, cc.task,
                                       cc.fit_pool, cc.fit_seed);
    ctx.fit_set = detail::class_covering_batch(pool, cc.task.classes);
    ctx.transfer_eval.assign(ctx.eval_set.begin(),
                             ctx.eval_set.begin() +
                                 std::min<std::size_t>(ctx.eval_set.size(),
                                                       cc.transfer_eval_size));
  }
  return ctx;
}

// ------------------------------------------------------------------- spec

struct ExperimentSpec {
  std::string kind;
  std::string out_dir = ".";

  int eval_limit = 500;     // cheap forward-only suites
  int attack_limit = 32;    // suites that optimize a perturbation per sample

  // retention_sweep / ranking suites
  std::vector<double> retention_rates = {1.0, 0.5, 0.2, 0.1};
  int compress_layer = 2;
  double rate = 0.2;
  double noise_eps = 32.0 / 255.0;
  std::uint64_t noise_seed = 97;
  int trace_samples = 8;  // ranking_instability averages over this many images

  // white-box attacks
  AttackConfig caa;
  BaselineConfig vanilla;
  std::uint64_t attack_seed = 11;

  // mismatch_sweep evaluation grid (single-stage configs)
  std::vector<CompressionStage> mismatch_grid = {{2, 0.1}, {2, 0.2}, {2, 0.5},
                                                 {5, 0.1}, {5, 0.2}, {5, 0.5}};

  // transfer_matrix
  TransferConfig transfer;
  double transfer_avg_min = 0.30;
  double transfer_avg_max = 0.45;
  int transfer_max_configs = 6;

  // refstrategy_compare: reference index sets to contrast
  std::vector<std::vector<int>> ref_strategies = {{}, {0, 1, 2, 3}};

  // defense_eval
  double defense_fraction = 0.1;
  int defense_ranking_layer = 2;
  std::uint64_t defense_seed = 23;
};

inline CompressionConfig single_stage(int layer, double rate) {
  CompressionConfig cc;
  cc.stages = {{layer, rate}};
  return cc;
}

namespace detail {

inline std::string seed_list(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::uint64_t v : seeds) s += std::to_string(v) + ",";
  return s;
}

inline std::string spec_digest(const ExperimentSpec& spec, const SuiteContext& ctx,
                               const std::string& detail_str) {
  std::string full = spec.kind + "|" + detail_str + "|data=" + std::to_string(ctx.data_seed) +
                     "|models=" + seed_list(ctx.model_seeds) +
                     "|transfer=" + seed_list(ctx.transfer_seeds);
  return digest_hex(fnv1a64(full));
}

inline std::vector<SyntheticSample> take(const std::vector<SyntheticSample>& s, int n) {
  if (n < 1) throw std::invalid_argument("suite: sample limit must be positive");
  const std::size_t count = std::min<std::size_t>(s.size(), static_cast<std::size_t>(n));
  return {s.begin(), s.begin() + count};
}

inline std::string rate_label(double r) { return "r=" + format_rate(r); }

}  // namespace detail

// ------------------------------------------------------------- the suites

// Clean-vs-noisy accuracy gap at each retention rate. The flag records
// whether the mean gap is nonincreasing in the retention rate.
inline ReportBundle suite_retention_sweep(const ExperimentSpec& spec, const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.eval_limit);
  const PerturbFn noise = gaussian_noise(spec.noise_eps, spec.noise_seed);
  std::vector<double> rates = spec.retention_rates;
  std::sort(rates.begin(), rates.end());
  std::vector<double> mean_gap(rates.size(), 0.0);
  for (std::size_t mi = 0; mi < ctx.models.size(); ++mi) {
    for (std::size_t ri = 0; ri < rates.size(); ++ri) {
      const double r = rates[ri];
      HookFactory state = nullptr;
      if (r < 1.0)
        state = hook_factory(single_stage(spec.compress_layer, r),
                             ctx.models[mi].cfg.n_visual());
      const double gap = robustness_gap(ctx.models[mi], eval, noise, state);
      mean_gap[ri] += gap / static_cast<double>(ctx.models.size());
      const std::string digest = detail::spec_digest(
          spec, ctx, "retention|" + format_rate(r) + "|eps=" + format_rate(spec.noise_eps));
      out.scalars.push_back({spec.kind, detail::rate_label(r), ctx.model_seeds[mi],
                             ctx.data_seed, digest, "robustness_gap", gap});
    }
  }
  bool monotone = true;
  for (std::size_t i = 0; i + 1 < rates.size(); ++i)
    if (mean_gap[i] < mean_gap[i + 1]) monotone = false;
  out.flags.push_back(std::string("retention_gap_nonincreasing=") + (monotone ? "1" : "0"));
  Plot plot{"retention_sweep", "line", "retention rate", "robustness gap", {}};
  plot.series.push_back({"mean_gap", rates, mean_gap});
  out.plots.push_back(std::move(plot));
  return out;
}

namespace detail {

// Runs the clean image compressed while recording each stage's kept ids,
// then freezes those decisions as indicator overrides. A perturbed forward
// under the returned config keeps exactly the clean-chosen tokens.
inline CompressionConfig clean_ranking_override(const ModelWeights& w, const Tensor& clean,
                                                const std::vector<int>& prompt,
                                                const CompressionConfig& cfg) {
  auto recorded = std::make_shared<std::vector<std::vector<int>>>();
  const LayerHook inner = make_hook(cfg, w.cfg.n_visual());
  ForwardOptions opt;
  opt.hook = [inner, recorded](const HookContext& hctx) {
    auto kept = inner(hctx);
    if (kept) recorded->push_back(*kept);
    return kept;
  };
  (void)forward(w, clean, prompt, opt);
  if (recorded->size() != cfg.stages.size())
    throw std::runtime_error("suite: clean pass did not fire every stage");
  CompressionConfig fixed = cfg;
  fixed.ranking_override.clear();
  int survivors = w.cfg.n_visual();
  std::vector<int> survivor_ids(survivors);
  std::iota(survivor_ids.begin(), survivor_ids.end(), 0);
  for (const std::vector<int>& kept : *recorded) {
    std::vector<double> indicator(survivor_ids.size(), 0.0);
    for (std::size_t i = 0; i < survivor_ids.size(); ++i)
      if (std::binary_search(kept.begin(), kept.end(), survivor_ids[i])) indicator[i] = 1.0;
    fixed.ranking_override.push_back(std::move(indicator));
    survivor_ids = kept;
  }
  return fixed;
}

}  // namespace detail

// Accuracy of noisy inputs compressed under their own ranking versus the
// ranking recorded from the clean image (plus both uncompressed anchors).
inline ReportBundle suite_ranking_role(const ExperimentSpec& spec, const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.eval_limit);
  const PerturbFn noise = gaussian_noise(spec.noise_eps, spec.noise_seed);
  const CompressionConfig cfg = single_stage(spec.compress_layer, spec.rate);
  const std::string digest = detail::spec_digest(
      spec, ctx, "ranking_role|" + format_rate(spec.rate) + "|eps=" + format_rate(spec.noise_eps));
  std::vector<double> bars(4, 0.0);
  for (std::size_t mi = 0; mi < ctx.models.size(); ++mi) {
    const ModelWeights& w = ctx.models[mi];
    int clean_c = 0, pert_nc = 0, pert_own = 0, pert_fixed = 0;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      const SyntheticSample& s = eval[i];
      const int want = s.label == 1 ? kAnswerYes : kAnswerNo;
      const Tensor noisy = noise(s.image, i);
      ForwardOptions comp;
      comp.hook = make_hook(cfg, w.cfg.n_visual());
      clean_c += forward(w, s.image, s.prompt, comp).answer == want;
      pert_nc += forward(w, noisy, s.prompt, {}).answer == want;
      ForwardOptions own;
      own.hook = make_hook(cfg, w.cfg.n_visual());
      pert_own += forward(w, noisy, s.prompt, own).answer == want;
      ForwardOptions fixed;
      fixed.hook = make_hook(detail::clean_ranking_override(w, s.image, s.prompt, cfg),
                             w.cfg.n_visual());
      pert_fixed += forward(w, noisy, s.prompt, fixed).answer == want;
    }
    const double n = static_cast<double>(eval.size());
    const std::pair<const char*, double> metrics[] = {{"clean_compressed", clean_c / n},
                                                      {"perturbed_uncompressed", pert_nc / n},
                                                      {"perturbed_own_ranking", pert_own / n},
                                                      {"perturbed_clean_ranking", pert_fixed / n}};
    for (int b = 0; b < 4; ++b) {
      out.scalars.push_back({spec.kind, detail::rate_label(spec.rate), ctx.model_seeds[mi],
                             ctx.data_seed, digest, metrics[b].first, metrics[b].second});
      bars[b] += metrics[b].second / static_cast<double>(ctx.models.size());
    }
  }
  Plot plot{"ranking_role", "bar", "configuration", "accuracy", {}};
  plot.series.push_back({"mean_accuracy", {0, 1, 2, 3}, bars});
  out.plots.push_back(std::move(plot));
  return out;
}

// Per-layer rank stability between clean and noisy copies of the same
// images, averaged over samples: the layer axis of the instability story.
inline ReportBundle suite_ranking_instability(const ExperimentSpec& spec,
                                              const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.trace_samples);
  const PerturbFn noise = gaussian_noise(spec.noise_eps, spec.noise_seed);
  const ModelWeights& w = ctx.models.front();
  const int k = default_rank_cutoff(w.cfg.n_visual());
  const int layers = w.cfg.layers;
  std::vector<RankStats> mean(layers);
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto trace =
        ranking_trace(w, eval[i].image, noise(eval[i].image, i), eval[i].prompt, k);
    for (int l = 0; l < layers; ++l) {
      mean[l].kendall_tau += trace[l].kendall_tau / eval.size();
      mean[l].spearman_rho += trace[l].spearman_rho / eval.size();
      mean[l].topk_preservation += trace[l].topk_preservation / eval.size();
      mean[l].botk_infiltration += trace[l].botk_infiltration / eval.size();
      mean[l].k = k;
    }
  }
  const std::string digest =
      detail::spec_digest(spec, ctx, "instability|eps=" + format_rate(spec.noise_eps));
  std::vector<double> xs, taus, pres;
  for (int l = 0; l < layers; ++l) {
    const std::string label = "layer=" + std::to_string(l + 1);
    out.scalars.push_back({spec.kind, label, ctx.model_seeds[0], ctx.data_seed, digest,
                           "kendall_tau", mean[l].kendall_tau});
    out.scalars.push_back({spec.kind, label, ctx.model_seeds[0], ctx.data_seed, digest,
                           "topk_preservation", mean[l].topk_preservation});
    xs.push_back(l + 1);
    taus.push_back(mean[l].kendall_tau);
    pres.push_back(mean[l].topk_preservation);
  }
  out.tables.push_back({"ranking_instability_trace", ranking_trace_csv(mean)});
  Plot plot{"ranking_instability", "line", "layer", "stability", {}};
  plot.series.push_back({"kendall_tau", xs, taus});
  plot.series.push_back({"topk_preservation", xs, pres});
  out.plots.push_back(std::move(plot));
  return out;
}

// Top-mode vs bottom-mode retention accuracy at the same rate.
inline ReportBundle suite_bottomk_collapse(const ExperimentSpec& spec,
                                           const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.eval_limit);
  const std::string digest =
      detail::spec_digest(spec, ctx, "bottomk|" + format_rate(spec.rate));
  double top_mean = 0.0, bot_mean = 0.0;
  for (std::size_t mi = 0; mi < ctx.models.size(); ++mi) {
    const ModelWeights& w = ctx.models[mi];
    CompressionConfig top_cfg = single_stage(spec.compress_layer, spec.rate);
    CompressionConfig bot_cfg = top_cfg;
    bot_cfg.mode = SelectionMode::bottom;
    const double acc_top = accuracy(w, eval, hook_factory(top_cfg, w.cfg.n_visual()));
    const double acc_bot = accuracy(w, eval, hook_factory(bot_cfg, w.cfg.n_visual()));
    out.scalars.push_back({spec.kind, detail::rate_label(spec.rate), ctx.model_seeds[mi],
                           ctx.data_seed, digest, "accuracy_top", acc_top});
    out.scalars.push_back({spec.kind, detail::rate_label(spec.rate), ctx.model_seeds[mi],
                           ctx.data_seed, digest, "accuracy_bottom", acc_bot});
    top_mean += acc_top / ctx.models.size();
    bot_mean += acc_bot / ctx.models.size();
  }
  out.flags.push_back(std::string("bottom_below_top=") + (bot_mean < top_mean ? "1" : "0"));
  Plot plot{"bottomk_collapse", "bar", "selection mode", "accuracy", {}};
  plot.series.push_back({"mean_accuracy", {0, 1}, {top_mean, bot_mean}});
  out.plots.push_back(std::move(plot));
  return out;
}

namespace detail {

// Four-state record for a batch of per-sample adversarial images.
inline MetricsRecord attack_record(const ModelWeights& w,
                                   const std::vector<SyntheticSample>& samples,
                                   const std::vector<Tensor>& adv,
                                   const CompressionConfig& cfg) {
  return measure_metrics(w, samples, adv, hook_factory(cfg, w.cfg.n_visual()));
}

}  // namespace detail

// Vanilla / random / ranking-aware attacks under the same compression
// config: the directional structure of the white-box comparison table.
inline ReportBundle suite_whitebox_table(const ExperimentSpec& spec, const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.attack_limit);
  const CompressionConfig cfg = single_stage(spec.compress_layer, spec.rate);
  std::map<std::string, double> mean_csg;
  for (std::size_t mi = 0; mi < ctx.models.size(); ++mi) {
    const ModelWeights& w = ctx.models[mi];
    std::vector<Tensor> adv_caa, adv_rand, adv_van;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      const SyntheticSample& s = eval[i];
      AttackConfig ac = spec.caa;
      ac.seed = spec.attack_seed + i;
      adv_caa.push_back(caa_attack(w, s.image, s.prompt, ac).pert.apply(s.image));
      adv_rand.push_back(
          random_attack(s.image, spec.caa.epsilon, spec.attack_seed + i).apply(s.image));
      BaselineConfig bc = spec.vanilla;
      const BaselineConfig flip = baseline_for_label(s.label == 1);
      bc.correct_answers = flip.correct_answers;
      bc.wrong_answers = flip.wrong_answers;
      bc.seed = spec.attack_seed + i;
      adv_van.push_back(vanilla_attack(w, s.image, s.prompt, bc).pert.apply(s.image));
    }
    const std::pair<const char*, const std::vector<Tensor>*> rowspec[] = {
        {"caa", &adv_caa}, {"random", &adv_rand}, {"vanilla", &adv_van}};
    for (const auto& [name, adv] : rowspec) {
      const std::string digest = detail::spec_digest(
          spec, ctx,
          std::string("whitebox|") + name + "|" + format_stages(cfg.stages) +
              "|eps=" + format_rate(spec.caa.epsilon));
      ReportRow row{spec.kind, name, ctx.model_seeds[mi], ctx.data_seed, digest,
                    detail::attack_record(w, eval, *adv, cfg)};
      mean_csg[name] += row.rec.csg / ctx.models.size();
      out.records.push_back(std::move(row));
    }
  }
  Plot plot{"whitebox_table", "bar", "attack", "csg", {}};
  plot.series.push_back(
      {"mean_csg", {0, 1, 2}, {mean_csg["caa"], mean_csg["random"], mean_csg["vanilla"]}});
  out.plots.push_back(std::move(plot));
  return out;
}

// Attack tuned for one compression config, metrics measured under others.
inline ReportBundle suite_mismatch_sweep(const ExperimentSpec& spec, const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.attack_limit);
  const ModelWeights& w = ctx.models.front();
  std::vector<Tensor> adv;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    AttackConfig ac = spec.caa;
    ac.seed = spec.attack_seed + i;
    adv.push_back(caa_attack(w, eval[i].image, eval[i].prompt, ac).pert.apply(eval[i].image));
  }
  std::vector<double> xs, ys;
  for (const CompressionStage& st : spec.mismatch_grid) {
    const CompressionConfig cfg = single_stage(st.layer, st.rate);
    const std::string label =
        "eval(" + std::to_string(st.layer) + "," + format_rate(st.rate) + ")";
    const std::string digest = detail::spec_digest(
        spec, ctx,
        "mismatch|attack_layer=" + std::to_string(spec.caa.layer) + "|" + label);
    ReportRow row{spec.kind, label, ctx.model_seeds[0], ctx.data_seed, digest,
                  detail::attack_record(w, eval, adv, cfg)};
    xs.push_back(static_cast<double>(xs.size()));
    ys.push_back(row.rec.csg);
    out.records.push_back(std::move(row));
  }
  Plot plot{"mismatch_sweep", "line", "evaluation config", "csg", {}};
  plot.series.push_back({"csg", xs, ys});
  out.plots.push_back(std::move(plot));
  return out;
}

// ---------------------------------------------------------------- transfer

// Splits the augmented grid for template fitting: the border is the decoy
// block to be raised into the kept set, the strongest interior tokens (which
// carry the task evidence) are the suppression targets, and the dimmest
// interior tokens anchor the raise comparisons.
inline TransferPartition decoy_partition(const ModelWeights& surrogate, const Tensor& image_aug,
                                         const std::vector<int>& prompt,
                                         const BorderLayout& layout,
                                         const std::vector<int>& layers, int n_anchor,
                                         int n_strong) {
  if (n_anchor < 1 || n_strong < 2)
    throw std::invalid_argument("transfer: partition sizes must be positive");
  const auto traces = scores_by_layer(surrogate, image_aug, prompt);
  std::vector<double> ms(image_aug.rows, 0.0);
  for (int l : layers) {
    if (l < 1 || l > static_cast<int>(traces.size()))
      throw std::invalid_argument("transfer: partition layer outside the model");
    for (int j = 0; j < image_aug.rows; ++j)
      ms[j] += traces[l - 1][j] / static_cast<double>(layers.size());
  }
  std::vector<int> interior;
  for (int p = 0; p < layout.side * layout.side; ++p)
    if (!layout.is_border(p)) interior.push_back(p);
  if (n_anchor + n_strong > static_cast<int>(interior.size()))
    throw std::invalid_argument("transfer: partition sizes exceed the interior");
  std::sort(interior.begin(), interior.end(), [&](int a, int b) {
    if (ms[a] != ms[b]) return ms[a] > ms[b];
    return a < b;
  });
  TransferPartition part;
  part.least_low = layout.border;
  part.least_high.assign(interior.end() - n_anchor, interior.end());
  part.most_low.assign(interior.begin(), interior.begin() + n_strong / 2);
  part.most_high.assign(interior.begin() + n_strong / 2, interior.begin() + n_strong);
  std::sort(part.least_high.begin(), part.least_high.end());
  std::sort(part.most_low.begin(), part.most_low.end());
  std::sort(part.most_high.begin(), part.most_high.end());
  return part;
}

// Border-decoy transfer defaults that move the compressed-path metrics
// without breaking the uncompressed answers: modest budgets on both
// templates and all capacity spent at the compression layer.
inline TransferConfig transfer_recipe(int compress_layer) {
  TransferConfig tc;
  tc.candidate_layers = {compress_layer};
  // A frame budget past ~64/255 plants enough fake class evidence to flip
  // uncompressed answers, which hurts the uncompressed baseline more than
  // compression hurts the kept set. Both budgets stay matched and moderate;
  // the interior suppression term is weighted up instead.
  tc.eps_raise = 32.0 / 255.0;
  tc.eps_down = 32.0 / 255.0;
  tc.alpha_down = 2.0;
  return tc;
}

struct TransferArtifacts {
  TransferResult result;
  TransferConfig config;
};

// Fits one template pair on the surrogate over the class-covering batch.
inline TransferArtifacts fit_transfer_templates(const SuiteContext& ctx,
                                                const ExperimentSpec& spec) {
  if (ctx.transfer_models.size() < 2 || ctx.fit_set.empty())
    throw std::invalid_argument("suite: context is missing transfer resources");
  const ModelWeights& surrogate = ctx.transfer_models[0];
  TransferConfig tc = spec.transfer;
  if (tc.candidate_layers.empty()) tc = transfer_recipe(spec.compress_layer);
  if (!tc.has_partition_override()) {
    const auto [aug0, layout] =
        augment_border(ctx.fit_set[0].image, tc.border_width, tc.fill);
    tc.partition_override = decoy_partition(surrogate, aug0, ctx.fit_set[0].prompt, layout,
                                            tc.candidate_layers, 18, 20);
  }
  std::vector<Tensor> images;
  std::vector<std::vector<int>> prompts;
  for (const SyntheticSample& s : ctx.fit_set) {
    images.push_back(s.image);
    prompts.push_back(s.prompt);
  }
  return {tcaa_optimize_batch(surrogate, images, prompts, tc), tc};
}

// One surrogate-fitted template pair, assembled once per image, measured on
// the target across enumerated compression configs.
inline ReportBundle suite_transfer_matrix(const ExperimentSpec& spec, const SuiteContext& ctx) {
  if (ctx.transfer_models.size() < 2 || ctx.transfer_eval.empty())
    throw std::invalid_argument("suite: context is missing transfer resources");
  ReportBundle out;
  const TransferArtifacts art = fit_transfer_templates(ctx, spec);
  const ModelWeights& target = ctx.transfer_models[1];
  const auto eval = detail::take(ctx.transfer_eval, spec.eval_limit);

  std::vector<SyntheticSample> eval_aug = eval;
  std::vector<Tensor> adv;
  TemplatePair zero = art.result.templates;
  for (double& x : zero.delta_raise.v) x = 0.0;
  for (double& x : zero.delta_down.v) x = 0.0;
  for (SyntheticSample& s : eval_aug) {
    adv.push_back(assemble_adversarial(s.image, art.result.layout, art.result.templates));
    s.image = assemble_adversarial(s.image, art.result.layout, zero);
  }

  auto configs = enumerate_configs(target.cfg.layers, spec.transfer_avg_max,
                                   spec.transfer_avg_min);
  if (static_cast<int>(configs.size()) > spec.transfer_max_configs)
    configs.resize(spec.transfer_max_configs);
  if (configs.empty()) throw std::invalid_argument("suite: empty transfer config range");

  std::vector<double> xs, ys;
  std::string table = "stages,avg_rate,upr,cae,csg\n";
  for (const EnumeratedConfig& ec : configs) {
    CompressionConfig cfg;
    cfg.stages = ec.stages;
    const std::string label = format_stages(ec.stages);
    const std::string digest =
        detail::spec_digest(spec, ctx, "transfer|" + label + "|fit=" + digest_hex(fnv1a64(
                                           templates_json(art.result.templates,
                                                          art.result.layout))));
    ReportRow row{spec.kind, label, ctx.transfer_seeds[1], ctx.data_seed, digest,
                  measure_metrics(target, eval_aug, adv,
                                  hook_factory(cfg, target.cfg.n_visual()))};
    char line[160];
    std::snprintf(line, sizeof line, "\"%s\",%.3f,%.6f,%.6f,%.6f\n", label.c_str(),
                  ec.avg_rate, row.rec.upr, row.rec.cae, row.rec.csg);
    table += line;
    xs.push_back(ec.avg_rate);
    ys.push_back(row.rec.csg);
    out.records.push_back(std::move(row));
  }
  out.tables.push_back({"transfer_matrix", std::move(table)});
  Plot plot{"transfer_matrix", "line", "avg retention", "csg", {}};
  plot.series.push_back({"csg", xs, ys});
  out.plots.push_back(std::move(plot));
  return out;
}

// Ranking-aware attack with different scoring reference sets.
inline ReportBundle suite_refstrategy_compare(const ExperimentSpec& spec,
                                              const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  if (spec.ref_strategies.empty())
    throw std::invalid_argument("suite: no reference strategies given");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.attack_limit);
  const ModelWeights& w = ctx.models.front();
  std::vector<double> xs, ys;
  for (std::size_t si = 0; si < spec.ref_strategies.size(); ++si) {
    const std::vector<int>& refs = spec.ref_strategies[si];
    std::string label = "refs=";
    if (refs.empty()) label += "last";
    for (int r : refs) label += std::to_string(r);
    CompressionConfig cfg = single_stage(spec.compress_layer, spec.rate);
    cfg.ref_prompt_indices = refs;
    std::vector<Tensor> adv;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      AttackConfig ac = spec.caa;
      ac.ref_prompt_indices = refs;
      ac.seed = spec.attack_seed + i;
      adv.push_back(
          caa_attack(w, eval[i].image, eval[i].prompt, ac).pert.apply(eval[i].image));
    }
    const std::string digest = detail::spec_digest(spec, ctx, "refstrategy|" + label);
    ReportRow row{spec.kind, label, ctx.model_seeds[0], ctx.data_seed, digest,
                  detail::attack_record(w, eval, adv, cfg)};
    xs.push_back(static_cast<double>(si));
    ys.push_back(row.rec.csg);
    out.records.push_back(std::move(row));
  }
  Plot plot{"refstrategy_compare", "bar", "reference strategy", "csg", {}};
  plot.series.push_back({"csg", xs, ys});
  out.plots.push_back(std::move(plot));
  return out;
}

// --------------------------------------------------------------- defense

enum class MaskSource { most, least, random_patches };

inline MaskSource mask_source_from(const std::string& name) {
  if (name == "most") return MaskSource::most;
  if (name == "least") return MaskSource::least;
  if (name == "random") return MaskSource::random_patches;
  throw std::invalid_argument("defense: unknown mask source: " + name);
}

// Replaces floor(fraction * n_V) patches, chosen by the ranking model's
// importance scores (or at random), with the dataset mean patch, then runs
// the victim under the given compression state. Replacement keeps the
// sequence length intact so retention arithmetic is unchanged.
inline ForwardResult region_removal_defense(const ModelWeights& victim, const Tensor& image,
                                            const std::vector<int>& prompt, MaskSource source,
                                            double fraction,
                                            const ModelWeights& ranking_model,
                                            const Tensor& mean_patch,
                                            const HookFactory& state = nullptr,
                                            int ranking_layer = 2, std::uint64_t seed = 0) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("defense: mask fraction outside (0, 1)");
  if (mean_patch.rows != 1 || mean_patch.cols != image.cols)
    throw std::invalid_argument("defense: mean patch shape mismatch");
  const int n = image.rows;
  const int masked = static_cast<int>(fraction * n);
  std::vector<int> chosen;
  if (masked > 0) {
    if (source == MaskSource::random_patches) {
      std::vector<int> ids(n);
      std::iota(ids.begin(), ids.end(), 0);
      Rng rng(seed);
      for (int i = n - 1; i > 0; --i) std::swap(ids[i], ids[rng.uniform_int(0, i)]);
      chosen.assign(ids.begin(), ids.begin() + masked);
    } else {
      if (ranking_layer < 1 || ranking_layer > ranking_model.cfg.layers)
        throw std::invalid_argument("defense: ranking layer outside the model");
      const auto scores = scores_by_layer(ranking_model, image, prompt)[ranking_layer - 1];
      const double rate = static_cast<double>(masked) / n;
      chosen = compress(scores, rate, n,
                        source == MaskSource::most ? SelectionMode::top
                                                   : SelectionMode::bottom);
    }
  }
  Tensor defended = image;
  for (int p : chosen)
    for (int c = 0; c < image.cols; ++c) defended.at(p, c) = mean_patch.at(0, c);
  ForwardOptions opt;
  if (state) opt.hook = state();
  return forward(victim, defended, prompt, opt);
}

// Mean-patch masking as a defense: what it costs on clean inputs per mask
// source, and whether bottom-rank masking with the victim's own (already
// attacked) ranking restores the compressed accuracy.
inline ReportBundle suite_defense_eval(const ExperimentSpec& spec, const SuiteContext& ctx) {
  if (ctx.models.empty() || ctx.eval_set.empty())
    throw std::invalid_argument("suite: context is missing models or data");
  if (ctx.mean_patch.rows != 1)
    throw std::invalid_argument("suite: context is missing the mean patch");
  ReportBundle out;
  const auto eval = detail::take(ctx.eval_set, spec.attack_limit);
  const ModelWeights& w = ctx.models.front();
  const CompressionConfig cfg = single_stage(spec.compress_layer, spec.rate);
  const HookFactory state = hook_factory(cfg, w.cfg.n_visual());
  const std::string digest = detail::spec_digest(
      spec, ctx, "defense|fraction=" + format_rate(spec.defense_fraction));

  std::vector<Tensor> adv;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    AttackConfig ac = spec.caa;
    ac.seed = spec.attack_seed + i;
    adv.push_back(caa_attack(w, eval[i].image, eval[i].prompt, ac).pert.apply(eval[i].image));
  }

  int clean_c = 0, adv_c = 0;
  int clean_most = 0, clean_least = 0, clean_rand = 0, adv_least = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const SyntheticSample& s = eval[i];
    const int want = s.label == 1 ? kAnswerYes : kAnswerNo;
    ForwardOptions comp;
    comp.hook = state();
    clean_c += forward(w, s.image, s.prompt, comp).answer == want;
    ForwardOptions comp2;
    comp2.hook = state();
    adv_c += forward(w, adv[i], s.prompt, comp2).answer == want;
    auto defended = [&](const Tensor& img, MaskSource src) {
      return region_removal_defense(w, img, s.prompt, src, spec.defense_fraction, w,
                                    ctx.mean_patch, state, spec.defense_ranking_layer,
                                    spec.defense_seed + i)
                 .answer == want;
    };
    clean_most += defended(s.image, MaskSource::most);
    clean_least += defended(s.image, MaskSource::least);
    clean_rand += defended(s.image, MaskSource::random_patches);
    adv_least += defended(adv[i], MaskSource::least);
  }
  const double n = static_cast<double>(eval.size());
  const std::pair<const char*, double> rows[] = {
      {"clean_compressed", clean_c / n},       {"adv_compressed", adv_c / n},
      {"clean_defended_most", clean_most / n}, {"clean_defended_least", clean_least / n},
      {"clean_defended_random", clean_rand / n}, {"adv_defended_least", adv_least / n}};
  for (const auto& [metric, value] : rows)
    out.scalars.push_back({spec.kind, "fraction=" + format_rate(spec.defense_fraction),
                           ctx.model_seeds[0], ctx.data_seed, digest, metric, value});
  out.flags.push_back(std::string("most_degrades_clean_more=") +
                      (clean_most < clean_least ? "1" : "0"));
  out.flags.push_back(std::string("least_restores_within_0.1=") +
                      ((clean_c - adv_least) / n <= 0.1 ? "1" : "0"));
  Plot plot{"defense_eval", "bar", "condition", "accuracy", {}};
  plot.series.push_back({"accuracy",
                         {0, 1, 2, 3, 4, 5},
                         {clean_c / n, adv_c / n, clean_most / n, clean_least / n,
                          clean_rand / n, adv_least / n}});
  out.plots.push_back(std::move(plot));
  return out;
}

// --------------------------------------------------------------- dispatch

inline ReportBundle run_suite(const std::string& kind, const ExperimentSpec& spec_in,
                              const SuiteContext& ctx) {
  ExperimentSpec spec = spec_in;
  spec.kind = kind;
  if (kind == "retention_sweep") return suite_retention_sweep(spec, ctx);
  if (kind == "ranking_role") return suite_ranking_role(spec, ctx);
  if (kind == "ranking_instability") return suite_ranking_instability(spec, ctx);
  if (kind == "bottomk_collapse") return suite_bottomk_collapse(spec, ctx);
  if (kind == "whitebox_table") return suite_whitebox_table(spec, ctx);
  if (kind == "mismatch_sweep") return suite_mismatch_sweep(spec, ctx);
  if (kind == "transfer_matrix") return suite_transfer_matrix(spec, ctx);
  if (kind == "refstrategy_compare") return suite_refstrategy_compare(spec, ctx);
  if (kind == "defense_eval") return suite_defense_eval(spec, ctx);
  throw std::invalid_argument("suite: unknown kind: " + kind);
}

}  // namespace vtc
