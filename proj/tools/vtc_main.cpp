// Command-line front end over the library: dataset generation, training,
// attacks, template transfer, configuration enumeration, experiment suites,
// and report emission.
//
// Every run is seed-driven. --deterministic (the default) takes seeds from
// --seed / the config file; --no-deterministic draws a fresh seed when none
// was given explicitly. Config files are strict JSON: unknown keys are
// rejected so typos fail loudly.
//
// Exit codes: 0 success, 2 validation failure (bad arguments, bad config,
// malformed inputs), 3 numeric failure (non sane finite values at runtime).
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "vtc/caa.hpp"
#include "vtc/compressor.hpp"
#include "vtc/dataset.hpp"
#include "vtc/io.hpp"
#include "vtc/metrics.hpp"
#include "vtc/model.hpp"
#include "vtc/rankstats.hpp"
#include "vtc/report.hpp"
#include "vtc/suites.hpp"
#include "vtc/tcaa.hpp"
#include "vtc/tensor.hpp"
#include "vtc/train.hpp"

namespace {

using nlohmann::json;

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = true;

  // Explicit seed wins; otherwise non-deterministic mode draws entropy.
  std::uint64_t effective_seed() const {
    if (seed_given || deterministic) return seed;
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }
};

json load_config(const GlobalArgs& g) {
  if (g.config_path.empty()) return json::object();
  std::ifstream in(g.config_path);
  if (!in) throw std::invalid_argument("config: cannot open " + g.config_path);
  json j = json::parse(in);  // json::exception maps to exit 2 in main
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  return j;
}

void require_known(const json& j, std::initializer_list<const char*> allowed,
                   const std::string& context) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::invalid_argument("config: unknown key '" + item.key() + "' for " + context);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

std::vector<int> int_list(const json& j, const char* key) {
  std::vector<int> out;
  if (j.contains(key))
    for (const auto& v : j.at(key)) out.push_back(v.get<int>());
  return out;
}

void ensure_out(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::invalid_argument("out: cannot create directory " + dir);
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::invalid_argument("out: cannot write " + path);
  out << text;
}

vtc::TaskConfig task_from(const json& j) {
  vtc::TaskConfig t;
  t.classes = get_or(j, "classes", t.classes);
  t.min_objects = get_or(j, "min_objects", t.min_objects);
  t.max_objects = get_or(j, "max_objects", t.max_objects);
  t.background_high = get_or(j, "background_high", t.background_high);
  t.template_amp = get_or(j, "template_amp", t.template_amp);
  t.jitter = get_or(j, "jitter", t.jitter);
  return t;
}

vtc::ModelConfig model_from(const json& j) {
  vtc::ModelConfig m;
  m.grid_side = get_or(j, "grid_side", m.grid_side);
  m.patch_dim = get_or(j, "patch_dim", m.patch_dim);
  m.model_dim = get_or(j, "model_dim", m.model_dim);
  m.heads = get_or(j, "heads", m.heads);
  m.layers = get_or(j, "layers", m.layers);
  m.ffn_dim = get_or(j, "ffn_dim", m.ffn_dim);
  return m;
}

vtc::TrainConfig trainer_from(const json& j) {
  vtc::TrainConfig t;
  if (j.contains("optimizer")) {
    const std::string name = j.at("optimizer").get<std::string>();
    if (name == "adam") t.optimizer = vtc::Optimizer::adam;
    else if (name == "sgd_momentum") t.optimizer = vtc::Optimizer::sgd_momentum;
    else throw std::invalid_argument("config: unknown optimizer: " + name);
  }
  t.batch = get_or(j, "batch", t.batch);
  t.lr = get_or(j, "lr", t.lr);
  t.momentum = get_or(j, "momentum", t.momentum);
  t.adam_lr = get_or(j, "adam_lr", t.adam_lr);
  t.weight_decay = get_or(j, "weight_decay", t.weight_decay);
  t.head_warmup_epochs = get_or(j, "head_warmup_epochs", t.head_warmup_epochs);
  t.head_lr = get_or(j, "head_lr", t.head_lr);
  t.max_epochs = get_or(j, "max_epochs", t.max_epochs);
  t.target_val_acc = get_or(j, "target_val_acc", t.target_val_acc);
  return t;
}

// ------------------------------------------------------------- subcommands

int cmd_gen_data(const GlobalArgs& g) {
  const json cfg = load_config(g);
  require_known(cfg,
                {"grid_side", "patch_dim", "classes", "min_objects", "max_objects",
                 "background_high", "template_amp", "jitter", "count", "augment",
                 "border_width", "border_fill", "seed"},
                "gen-data");
  const int grid = get_or(cfg, "grid_side", 8);
  const int patch_dim = get_or(cfg, "patch_dim", 12);
  const int count = get_or(cfg, "count", 256);
  const vtc::TaskConfig task = task_from(cfg);
  const std::uint64_t seed = g.seed_given ? g.effective_seed()
                                          : get_or<std::uint64_t>(cfg, "seed", g.effective_seed());
  auto samples = vtc::generate_dataset(grid, patch_dim, task, count, seed);
  const bool augment = get_or(cfg, "augment", false);
  const int width = get_or(cfg, "border_width", 1);
  const double fill = get_or(cfg, "border_fill", 0.5);
  if (augment)
    for (auto& s : samples) s.image = vtc::augment_border(s.image, width, fill).first;

  ensure_out(g.out_dir);
  const std::string data_path = g.out_dir + "/dataset.bin";
  vtc::save_dataset(data_path, samples);
  json side{{"kind", "dataset"},
            {"path", data_path},
            {"count", count},
            {"grid_side", grid},
            {"patch_dim", patch_dim},
            {"seed", seed},
            {"augmented", augment},
            {"digest", vtc::digest_hex(vtc::dataset_digest(samples))}};
  if (augment) {
    side["border_width"] = width;
    side["border_fill"] = fill;
  }
  write_text_file(g.out_dir + "/dataset.json", side.dump(2) + "\n");
  std::printf("gen-data: wrote %d samples to %s (digest %s)\n", count, data_path.c_str(),
              side["digest"].get<std::string>().c_str());
  return 0;
}

int cmd_train(const GlobalArgs& g) {
  const json cfg = load_config(g);
  require_known(cfg,
                {"grid_side", "patch_dim", "model_dim", "heads", "layers", "ffn_dim",
                 "classes", "min_objects", "max_objects", "background_high", "template_amp",
                 "jitter", "train_data", "val_data", "train_size", "val_size", "train_seed",
                 "val_seed", "augment", "border_width", "border_fill", "optimizer", "batch",
                 "lr", "momentum", "adam_lr", "weight_decay", "head_warmup_epochs", "head_lr",
                 "max_epochs", "target_val_acc", "seed"},
                "train");
  vtc::ModelConfig mc = model_from(cfg);
  const vtc::TaskConfig task = task_from(cfg);
  const bool augment = get_or(cfg, "augment", false);
  const int width = get_or(cfg, "border_width", 1);
  const double fill = get_or(cfg, "border_fill", 0.5);

  std::vector<vtc::SyntheticSample> train_set, val_set;
  if (cfg.contains("train_data")) {
    train_set = vtc::load_dataset(cfg.at("train_data").get<std::string>());
    if (!cfg.contains("val_data"))
      throw std::invalid_argument("config: train_data requires val_data");
    val_set = vtc::load_dataset(cfg.at("val_data").get<std::string>());
  } else {
    const int base_grid = get_or(cfg, "grid_side", 8);
    train_set = vtc::generate_dataset(base_grid, mc.patch_dim, task,
                                      get_or(cfg, "train_size", 256),
                                      get_or<std::uint64_t>(cfg, "train_seed", 1000));
    val_set = vtc::generate_dataset(base_grid, mc.patch_dim, task,
                                    get_or(cfg, "val_size", 128),
                                    get_or<std::uint64_t>(cfg, "val_seed", 2000));
    if (augment) {
      for (auto& s : train_set) s.image = vtc::augment_border(s.image, width, fill).first;
      for (auto& s : val_set) s.image = vtc::augment_border(s.image, width, fill).first;
      mc.grid_side = base_grid + 2 * width;
    }
  }
  if (!train_set.empty()) {
    const int rows = train_set[0].image.rows;
    if (rows != mc.n_visual())
      throw std::invalid_argument(
          "config: model grid does not match the training images (" + std::to_string(rows) +
          " visual tokens)");
  }

  vtc::TrainConfig tc = trainer_from(cfg);
  tc.seed = g.seed_given ? g.effective_seed() : get_or<std::uint64_t>(cfg, "seed", 0);
  vtc::ModelWeights w = vtc::init_weights(mc, tc.seed);
  const vtc::TrainLog log = vtc::train(w, train_set, val_set, tc);

  ensure_out(g.out_dir);
  const std::string weights_path = g.out_dir + "/weights.bin";
  vtc::save_weights(weights_path, w);
  json side{{"kind", "weights"},
            {"path", weights_path},
            {"seed", tc.seed},
            {"epochs", log.epochs},
            {"early_stopped", log.early_stopped},
            {"val_acc", log.val_acc},
            {"digest", vtc::digest_hex(vtc::weights_digest(w))}};
  write_text_file(g.out_dir + "/train.json", side.dump(2) + "\n");
  std::printf("train: %d epochs, final val %.4f, weights %s (digest %s)\n", log.epochs,
              log.val_acc.empty() ? 0.0 : log.val_acc.back(), weights_path.c_str(),
              side["digest"].get<std::string>().c_str());
  return 0;
}

int cmd_attack(const GlobalArgs& g, const std::string& kind, const std::string& weights_path,
               const std::string& data_path) {
  const json cfg = load_config(g);
  const vtc::ModelWeights w = vtc::load_weights(weights_path);
  auto samples = vtc::load_dataset(data_path);
  if (samples.empty()) throw std::invalid_argument("attack: empty dataset");
  const int limit = get_or(cfg, "limit", static_cast<int>(samples.size()));
  if (limit < 1 || limit > static_cast<int>(samples.size()))
    throw std::invalid_argument("attack: sample limit outside the dataset");
  samples.resize(limit);
  const std::uint64_t seed = g.seed_given ? g.effective_seed() : get_or<std::uint64_t>(cfg, "seed", 0);

  std::string jsonl;
  json summary{{"kind", kind}, {"samples", limit}, {"seed", seed}};
  int clean_correct = 0, adv_correct = 0;
  const std::string digest =
      vtc::digest_hex(vtc::fnv1a64(kind + "|" + vtc::digest_hex(vtc::weights_digest(w))));

  if (kind == "caa") {
    require_known(cfg,
                  {"epsilon", "step", "iterations", "layer", "n_least", "n_most", "groups",
                   "alpha", "beta", "lambda_erase", "lambda_key", "ref_prompt_indices",
                   "limit", "seed"},
                  "attack caa");
    vtc::AttackConfig ac;
    ac.epsilon = get_or(cfg, "epsilon", ac.epsilon);
    ac.step = get_or(cfg, "step", ac.step);
    ac.iterations = get_or(cfg, "iterations", ac.iterations);
    ac.layer = get_or(cfg, "layer", ac.layer);
    ac.n_least = get_or(cfg, "n_least", ac.n_least);
    ac.n_most = get_or(cfg, "n_most", ac.n_most);
    ac.groups = get_or(cfg, "groups", ac.groups);
    ac.alpha = get_or(cfg, "alpha", ac.alpha);
    ac.beta = get_or(cfg, "beta", ac.beta);
    ac.lambda_erase = get_or(cfg, "lambda_erase", ac.lambda_erase);
    ac.lambda_key = get_or(cfg, "lambda_key", ac.lambda_key);
    ac.ref_prompt_indices = int_list(cfg, "ref_prompt_indices");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      ac.seed = seed + i;
      const vtc::AttackResult r = vtc::caa_attack(w, samples[i].image, samples[i].prompt, ac);
      jsonl += vtc::perturbation_jsonl(r.pert, static_cast<int>(i), digest, r.loss_history) +
               "\n";
      clean_correct += vtc::sample_correct(w, samples[i]);
      vtc::SyntheticSample adv = samples[i];
      adv.image = r.pert.apply(samples[i].image);
      adv_correct += vtc::sample_correct(w, adv);
    }
  } else if (kind == "vanilla") {
    require_known(cfg, {"epsilon", "step", "iterations", "limit", "seed"}, "attack vanilla");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      vtc::BaselineConfig bc = vtc::baseline_for_label(samples[i].label == 1);
      bc.epsilon = get_or(cfg, "epsilon", bc.epsilon);
      bc.step = get_or(cfg, "step", bc.step);
      bc.iterations = get_or(cfg, "iterations", bc.iterations);
      bc.seed = seed + i;
      const vtc::AttackResult r =
          vtc::vanilla_attack(w, samples[i].image, samples[i].prompt, bc);
      jsonl += vtc::perturbation_jsonl(r.pert, static_cast<int>(i), digest, r.loss_history) +
               "\n";
      clean_correct += vtc::sample_correct(w, samples[i]);
      vtc::SyntheticSample adv = samples[i];
      adv.image = r.pert.apply(samples[i].image);
      adv_correct += vtc::sample_correct(w, adv);
    }
  } else if (kind == "random") {
    require_known(cfg, {"epsilon", "limit", "seed"}, "attack random");
    const double eps = get_or(cfg, "epsilon", 32.0 / 255.0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const vtc::Perturbation p = vtc::random_attack(samples[i].image, eps, seed + i);
      jsonl += vtc::perturbation_jsonl(p, static_cast<int>(i), digest, {}) + "\n";
      clean_correct += vtc::sample_correct(w, samples[i]);
      vtc::SyntheticSample adv = samples[i];
      adv.image = p.apply(samples[i].image);
      adv_correct += vtc::sample_correct(w, adv);
    }
  } else {
    throw std::invalid_argument("attack: unknown kind: " + kind);
  }

  ensure_out(g.out_dir);
  write_text_file(g.out_dir + "/perturbations.jsonl", jsonl);
  summary["clean_correct"] = clean_correct;
  summary["adv_correct"] = adv_correct;
  summary["config_digest"] = digest;
  write_text_file(g.out_dir + "/attack.json", summary.dump(2) + "\n");
  std::printf("attack %s: %d samples, clean %d correct, adversarial %d correct\n",
              kind.c_str(), limit, clean_correct, adv_correct);
  return 0;
}

vtc::TransferConfig transfer_from(const json& cfg) {
  vtc::TransferConfig tc;
  tc.eps_raise = get_or(cfg, "eps_raise", tc.eps_raise);
  tc.eps_down = get_or(cfg, "eps_down", tc.eps_down);
  tc.step_raise = get_or(cfg, "step_raise", tc.step_raise);
  tc.step_down = get_or(cfg, "step_down", tc.step_down);
  tc.iterations = get_or(cfg, "iterations", tc.iterations);
  tc.candidate_layers = int_list(cfg, "candidate_layers");
  tc.n_least = get_or(cfg, "n_least", tc.n_least);
  tc.n_most = get_or(cfg, "n_most", tc.n_most);
  tc.alpha_raise = get_or(cfg, "alpha_raise", tc.alpha_raise);
  tc.gamma_raise = get_or(cfg, "gamma_raise", tc.gamma_raise);
  tc.alpha_down = get_or(cfg, "alpha_down", tc.alpha_down);
  tc.gamma_down = get_or(cfg, "gamma_down", tc.gamma_down);
  tc.border_width = get_or(cfg, "border_width", tc.border_width);
  tc.fill = get_or(cfg, "fill", tc.fill);
  tc.ref_prompt_indices = int_list(cfg, "ref_prompt_indices");
  return tc;
}

int cmd_transfer_optimize(const GlobalArgs& g, const std::string& weights_path,
                          const std::string& data_path) {
  const json cfg = load_config(g);
  require_known(cfg,
                {"eps_raise", "eps_down", "step_raise", "step_down", "iterations",
                 "candidate_layers", "n_least", "n_most", "alpha_raise", "gamma_raise",
                 "alpha_down", "gamma_down", "border_width", "fill", "ref_prompt_indices",
                 "partition", "anchor_tokens", "strong_tokens", "seed"},
                "transfer optimize");
  const vtc::ModelWeights w = vtc::load_weights(weights_path);
  const auto samples = vtc::load_dataset(data_path);
  if (samples.empty()) throw std::invalid_argument("transfer: empty fitting dataset");
  vtc::TransferConfig tc = transfer_from(cfg);
  tc.seed = g.seed_given ? g.effective_seed() : get_or<std::uint64_t>(cfg, "seed", 0);

  const std::string partition = get_or<std::string>(cfg, "partition", "auto");
  if (partition == "decoy") {
    std::vector<int> layers = tc.candidate_layers;
    if (layers.empty()) {
      vtc::TransferConfig probe = tc;
      const auto [aug0, lay0] = vtc::augment_border(samples[0].image, tc.border_width, tc.fill);
      layers = probe.resolved(lay0.side * lay0.side, w.cfg.layers).candidate_layers;
    }
    const auto [aug0, layout] =
        vtc::augment_border(samples[0].image, tc.border_width, tc.fill);
    tc.partition_override = vtc::decoy_partition(
        w, aug0, samples[0].prompt, layout, layers, get_or(cfg, "anchor_tokens", 18),
        get_or(cfg, "strong_tokens", 20));
  } else if (partition != "auto") {
    throw std::invalid_argument("config: partition must be 'auto' or 'decoy'");
  }

  std::vector<vtc::Tensor> images;
  std::vector<std::vector<int>> prompts;
  for (const auto& s : samples) {
    images.push_back(s.image);
    prompts.push_back(s.prompt);
  }
  const vtc::TransferResult res = vtc::tcaa_optimize_batch(w, images, prompts, tc);

  ensure_out(g.out_dir);
  const std::string tpl_path = g.out_dir + "/templates.json";
  write_text_file(tpl_path, vtc::templates_json(res.templates, res.layout) + "\n");
  json side{{"kind", "transfer_templates"},
            {"path", tpl_path},
            {"seed", tc.seed},
            {"partition", partition},
            {"loss_first", res.loss_history.front()},
            {"loss_last", res.loss_history.back()},
            {"iterations", static_cast<int>(res.loss_history.size()) - 1},
            {"weights_digest", vtc::digest_hex(vtc::weights_digest(w))}};
  write_text_file(g.out_dir + "/transfer.json", side.dump(2) + "\n");
  std::printf("transfer optimize: loss %.4f -> %.4f over %zu steps, templates %s\n",
              res.loss_history.front(), res.loss_history.back(),
              res.loss_history.size() - 1, tpl_path.c_str());
  return 0;
}

int cmd_transfer_assemble(const GlobalArgs& g, const std::string& templates_path,
                          const std::string& data_path) {
  const json cfg = load_config(g);
  require_known(cfg, {}, "transfer assemble");
  std::ifstream in(templates_path);
  if (!in) throw std::invalid_argument("transfer: cannot open " + templates_path);
  const json t = json::parse(in);

  vtc::BorderLayout layout;
  layout.side = t.at("grid_side").get<int>();
  layout.width = t.at("border_width").get<int>();
  layout.fill = t.at("fill").get<double>();
  layout.border = t.at("border").get<std::vector<int>>();
  layout.validate();
  const int patch_dim = t.at("patch_dim").get<int>();
  vtc::TemplatePair templates;
  templates.eps_raise = t.at("eps_raise").get<double>();
  templates.eps_down = t.at("eps_down").get<double>();
  const auto raise_v = t.at("delta_raise").get<std::vector<double>>();
  const auto down_v = t.at("delta_down").get<std::vector<double>>();
  if (static_cast<int>(raise_v.size()) != patch_dim ||
      static_cast<int>(down_v.size()) != patch_dim)
    throw std::invalid_argument("transfer: template length does not match patch_dim");
  templates.delta_raise = vtc::Tensor(1, patch_dim);
  templates.delta_down = vtc::Tensor(1, patch_dim);
  templates.delta_raise.v = raise_v;
  templates.delta_down.v = down_v;

  auto samples = vtc::load_dataset(data_path);
  if (samples.empty()) throw std::invalid_argument("transfer: empty dataset");
  vtc::TemplatePair zero = templates;
  for (double& x : zero.delta_raise.v) x = 0.0;
  for (double& x : zero.delta_down.v) x = 0.0;
  std::vector<vtc::SyntheticSample> adv = samples, ref = samples;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    adv[i].image = vtc::assemble_adversarial(samples[i].image, layout, templates);
    ref[i].image = vtc::assemble_adversarial(samples[i].image, layout, zero);
  }

  ensure_out(g.out_dir);
  vtc::save_dataset(g.out_dir + "/adversarial.bin", adv);
  vtc::save_dataset(g.out_dir + "/reference.bin", ref);
  json side{{"kind", "assembled"},
            {"samples", static_cast<int>(samples.size())},
            {"adversarial", g.out_dir + "/adversarial.bin"},
            {"reference", g.out_dir + "/reference.bin"},
            {"adversarial_digest", vtc::digest_hex(vtc::dataset_digest(adv))},
            {"reference_digest", vtc::digest_hex(vtc::dataset_digest(ref))}};
  write_text_file(g.out_dir + "/assemble.json", side.dump(2) + "\n");
  std::printf("transfer assemble: %zu samples -> %s\n", samples.size(),
              (g.out_dir + "/adversarial.bin").c_str());
  return 0;
}

int cmd_enumerate_configs(const GlobalArgs& g, int depth, double avg_max, double avg_min) {
  const json cfg = load_config(g);
  require_known(cfg, {"depth", "avg_max", "avg_min"}, "enumerate configs");
  const int d = cfg.contains("depth") ? cfg.at("depth").get<int>() : depth;
  const double hi = get_or(cfg, "avg_max", avg_max);
  const double lo = get_or(cfg, "avg_min", avg_min);
  const auto configs = vtc::enumerate_configs(d, hi, lo);
  ensure_out(g.out_dir);
  write_text_file(g.out_dir + "/configs.csv", vtc::enumeration_csv(configs));
  std::printf("enumerate configs: depth %d, avg in [%g, %g] -> %zu configurations (%s)\n", d,
              lo, hi, configs.size(), (g.out_dir + "/configs.csv").c_str());
  return 0;
}

int cmd_enumerate_coverage(const GlobalArgs& g, int depth, double avg_min, double avg_max,
                           double eff_lo, double eff_hi, const std::string& layers_csv) {
  const json cfg = load_config(g);
  require_known(cfg, {"depth", "avg_min", "avg_max", "eff_lo", "eff_hi", "layers"},
                "enumerate coverage");
  const int d = cfg.contains("depth") ? cfg.at("depth").get<int>() : depth;
  std::vector<int> layers = int_list(cfg, "layers");
  if (layers.empty() && !layers_csv.empty()) {
    std::string tok;
    for (char c : layers_csv + ",") {
      if (c == ',') {
        if (!tok.empty()) layers.push_back(std::stoi(tok));
        tok.clear();
      } else {
        tok += c;
      }
    }
  }
  if (layers.empty()) throw std::invalid_argument("coverage: no candidate layers given");
  const auto configs =
      vtc::enumerate_configs(d, get_or(cfg, "avg_max", avg_max), get_or(cfg, "avg_min", avg_min));
  const double cov =
      vtc::layer_coverage(layers, configs, get_or(cfg, "eff_lo", eff_lo), get_or(cfg, "eff_hi", eff_hi));
  ensure_out(g.out_dir);
  json out{{"depth", d},
           {"configs", static_cast<int>(configs.size())},
           {"coverage", cov}};
  write_text_file(g.out_dir + "/coverage.json", out.dump(2) + "\n");
  std::printf("enumerate coverage: %.4f over %zu configurations\n", cov, configs.size());
  return 0;
}

int cmd_eval(const GlobalArgs& g, const std::string& kind) {
  const json cfg = load_config(g);
  require_known(cfg,
                {"model_count", "first_model_seed", "train_seed", "val_seed", "eval_seed",
                 "train_size", "val_size", "eval_size", "with_transfer", "surrogate_seed",
                 "target_seed", "fit_seed", "fit_pool", "transfer_eval_size", "eval_limit",
                 "attack_limit", "retention_rates", "compress_layer", "rate", "noise_eps",
                 "noise_seed", "trace_samples", "attack_seed", "epsilon", "attack_layer",
                 "defense_fraction", "defense_ranking_layer", "transfer_avg_min",
                 "transfer_avg_max", "transfer_max_configs", "formats", "seed"},
                "eval " + kind);
  vtc::ContextConfig cc;
  cc.model_count = get_or(cfg, "model_count", 5);
  cc.first_model_seed = get_or<std::uint64_t>(cfg, "first_model_seed", 0);
  cc.train_seed = get_or<std::uint64_t>(cfg, "train_seed", cc.train_seed);
  cc.val_seed = get_or<std::uint64_t>(cfg, "val_seed", cc.val_seed);
  cc.eval_seed = get_or<std::uint64_t>(cfg, "eval_seed", cc.eval_seed);
  cc.train_size = get_or(cfg, "train_size", cc.train_size);
  cc.val_size = get_or(cfg, "val_size", cc.val_size);
  cc.eval_size = get_or(cfg, "eval_size", cc.eval_size);
  const bool needs_transfer = kind == "transfer_matrix";
  cc.with_transfer = get_or(cfg, "with_transfer", needs_transfer);
  cc.surrogate_seed = get_or<std::uint64_t>(cfg, "surrogate_seed", cc.surrogate_seed);
  cc.target_seed = get_or<std::uint64_t>(cfg, "target_seed", cc.target_seed);
  cc.fit_seed = get_or<std::uint64_t>(cfg, "fit_seed", cc.fit_seed);
  cc.fit_pool = get_or(cfg, "fit_pool", cc.fit_pool);
  cc.transfer_eval_size = get_or(cfg, "transfer_eval_size", cc.transfer_eval_size);
  if (needs_transfer) cc.model_count = get_or(cfg, "model_count", 1);

  vtc::ExperimentSpec spec;
  spec.out_dir = g.out_dir;
  spec.eval_limit = get_or(cfg, "eval_limit", spec.eval_limit);
  spec.attack_limit = get_or(cfg, "attack_limit", spec.attack_limit);
  if (cfg.contains("retention_rates"))
    spec.retention_rates = cfg.at("retention_rates").get<std::vector<double>>();
  spec.compress_layer = get_or(cfg, "compress_layer", spec.compress_layer);
  spec.rate = get_or(cfg, "rate", spec.rate);
  spec.noise_eps = get_or(cfg, "noise_eps", spec.noise_eps);
  spec.noise_seed = get_or<std::uint64_t>(cfg, "noise_seed", spec.noise_seed);
  spec.trace_samples = get_or(cfg, "trace_samples", spec.trace_samples);
  spec.attack_seed = get_or<std::uint64_t>(cfg, "attack_seed", spec.attack_seed);
  spec.caa.epsilon = get_or(cfg, "epsilon", spec.caa.epsilon);
  spec.caa.layer = get_or(cfg, "attack_layer", spec.compress_layer);
  spec.vanilla.epsilon = get_or(cfg, "epsilon", spec.vanilla.epsilon);
  spec.defense_fraction = get_or(cfg, "defense_fraction", spec.defense_fraction);
  spec.defense_ranking_layer =
      get_or(cfg, "defense_ranking_layer", spec.defense_ranking_layer);
  spec.transfer_avg_min = get_or(cfg, "transfer_avg_min", spec.transfer_avg_min);
  spec.transfer_avg_max = get_or(cfg, "transfer_avg_max", spec.transfer_avg_max);
  spec.transfer_max_configs = get_or(cfg, "transfer_max_configs", spec.transfer_max_configs);

  const vtc::SuiteContext ctx = vtc::build_context(cc);
  const vtc::ReportBundle bundle = vtc::run_suite(kind, spec, ctx);
  ensure_out(g.out_dir);
  std::vector<std::string> formats = {"csv", "json", "svg"};
  if (cfg.contains("formats")) formats = cfg.at("formats").get<std::vector<std::string>>();
  const auto written = vtc::emit_report(bundle, g.out_dir, formats);
  std::printf("eval %s: %zu records, %zu scalars; wrote %zu files under %s\n", kind.c_str(),
              bundle.records.size(), bundle.scalars.size(), written.size(),
              g.out_dir.c_str());
  return 0;
}

int cmd_report(const GlobalArgs& g, const std::string& bundle_path,
               const std::string& formats_csv) {
  const json cfg = load_config(g);
  require_known(cfg, {"formats"}, "report");
  std::ifstream in(bundle_path);
  if (!in) throw std::invalid_argument("report: cannot open " + bundle_path);
  const json j = json::parse(in);

  vtc::ReportBundle b;
  for (const auto& r : j.value("records", json::array())) {
    vtc::ReportRow row;
    row.suite = r.at("suite").get<std::string>();
    row.label = r.at("label").get<std::string>();
    row.model_seed = r.at("model_seed").get<std::uint64_t>();
    row.data_seed = r.at("data_seed").get<std::uint64_t>();
    row.config_digest = r.at("config").get<std::string>();
    row.rec = vtc::compute_metrics(r.at("m_cl_nc").get<double>(), r.at("m_cl_c").get<double>(),
                                   r.at("m_adv_nc").get<double>(),
                                   r.at("m_adv_c").get<double>());
    b.records.push_back(std::move(row));
  }
  for (const auto& r : j.value("scalars", json::array())) {
    b.scalars.push_back({r.at("suite").get<std::string>(), r.at("label").get<std::string>(),
                         r.at("model_seed").get<std::uint64_t>(),
                         r.at("data_seed").get<std::uint64_t>(),
                         r.at("config").get<std::string>(), r.at("metric").get<std::string>(),
                         r.at("value").get<double>()});
  }
  for (const auto& f : j.value("flags", json::array()))
    b.flags.push_back(f.get<std::string>());
  for (const auto& t : j.value("tables", json::array()))
    b.tables.push_back({t.at("name").get<std::string>(), t.at("csv").get<std::string>()});
  for (const auto& p : j.value("plots", json::array())) {
    vtc::Plot plot;
    plot.name = p.at("name").get<std::string>();
    plot.kind = p.at("kind").get<std::string>();
    for (const auto& s : p.value("series", json::array())) {
      vtc::PlotSeries ps;
      ps.name = s.at("name").get<std::string>();
      ps.x = s.at("x").get<std::vector<double>>();
      ps.y = s.at("y").get<std::vector<double>>();
      plot.series.push_back(std::move(ps));
    }
    b.plots.push_back(std::move(plot));
  }

  std::vector<std::string> formats;
  if (cfg.contains("formats")) formats = cfg.at("formats").get<std::vector<std::string>>();
  if (!formats_csv.empty()) {
    formats.clear();
    std::string tok;
    for (char c : formats_csv + ",") {
      if (c == ',') {
        if (!tok.empty()) formats.push_back(tok);
        tok.clear();
      } else {
        tok += c;
      }
    }
  }
  if (formats.empty()) formats = {"csv", "json", "svg"};
  ensure_out(g.out_dir);
  const auto written = vtc::emit_report(b, g.out_dir, formats);
  std::printf("report: wrote %zu files under %s\n", written.size(), g.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  GlobalArgs g;
  CLI::App app{"vtclab: vision token compression attack laboratory"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", g.config_path, "JSON config file (strict keys)");
  app.add_option("--out", g.out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", g.seed, "seed overriding the config");
  app.add_flag("--deterministic,!--no-deterministic", g.deterministic,
               "seeded determinism (default on)");

  app.add_subcommand("gen-data", "generate a synthetic dataset");
  app.add_subcommand("train", "train a toy model");

  std::string attack_kind, weights_path, data_path;
  auto* attack = app.add_subcommand("attack", "perturb a dataset against trained weights");
  attack->add_option("kind", attack_kind, "caa | vanilla | random")->required();
  attack->add_option("--weights", weights_path, "weights artifact")->required();
  attack->add_option("--data", data_path, "dataset artifact")->required();

  std::string tr_weights, tr_data, tr_templates;
  auto* transfer = app.add_subcommand("transfer", "border template attacks");
  auto* tr_opt = transfer->add_subcommand("optimize", "fit templates on a surrogate");
  tr_opt->add_option("--weights", tr_weights, "surrogate weights")->required();
  tr_opt->add_option("--data", tr_data, "fitting dataset (plain geometry)")->required();
  auto* tr_asm = transfer->add_subcommand("assemble", "apply stored templates to a dataset");
  tr_asm->add_option("--templates", tr_templates, "templates.json artifact")->required();
  tr_asm->add_option("--data", tr_data, "dataset artifact (plain geometry)")->required();
  transfer->require_subcommand(1);

  int depth = 32;
  double avg_max = 0.2, avg_min = 0.0, eff_lo = 0.1, eff_hi = 0.4;
  std::string layers_csv = "1,2,3,4,5,6,7,8,9,10,11";
  auto* enumerate = app.add_subcommand("enumerate", "compression schedule enumeration");
  auto* en_cfg = enumerate->add_subcommand("configs", "list feasible schedules");
  en_cfg->add_option("--depth", depth, "model depth");
  en_cfg->add_option("--avg-max", avg_max, "max average retention");
  en_cfg->add_option("--avg-min", avg_min, "min average retention");
  auto* en_cov = enumerate->add_subcommand("coverage", "candidate layer coverage");
  en_cov->add_option("--depth", depth, "model depth");
  en_cov->add_option("--avg-max", avg_max, "max average retention");
  en_cov->add_option("--avg-min", avg_min, "min average retention");
  en_cov->add_option("--eff-lo", eff_lo, "effective rate window low");
  en_cov->add_option("--eff-hi", eff_hi, "effective rate window high");
  en_cov->add_option("--layers", layers_csv, "candidate layers, comma separated");
  enumerate->require_subcommand(1);

  std::string eval_kind;
  auto* eval_cmd = app.add_subcommand("eval", "run an experiment suite");
  eval_cmd->add_option("kind", eval_kind,
                       "retention_sweep | ranking_role | ranking_instability | "
                       "bottomk_collapse | whitebox_table | mismatch_sweep | "
                       "transfer_matrix | refstrategy_compare | defense_eval")
      ->required();

  std::string bundle_path, formats_csv;
  auto* report = app.add_subcommand("report", "re-emit artifacts from a stored bundle");
  report->add_option("--bundle", bundle_path, "bundle.json path")->required();
  report->add_option("--formats", formats_csv, "comma separated: csv,json,svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "argument error: %s\n", e.what());
    return 2;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (app.got_subcommand("gen-data")) return cmd_gen_data(g);
    if (app.got_subcommand("train")) return cmd_train(g);
    if (app.got_subcommand("attack")) return cmd_attack(g, attack_kind, weights_path, data_path);
    if (app.got_subcommand("transfer")) {
      if (transfer->got_subcommand("optimize"))
        return cmd_transfer_optimize(g, tr_weights, tr_data);
      return cmd_transfer_assemble(g, tr_templates, tr_data);
    }
    if (app.got_subcommand("enumerate")) {
      if (enumerate->got_subcommand("configs"))
        return cmd_enumerate_configs(g, depth, avg_max, avg_min);
      return cmd_enumerate_coverage(g, depth, avg_min, avg_max, eff_lo, eff_hi, layers_csv);
    }
    if (app.got_subcommand("eval")) return cmd_eval(g, eval_kind);
    if (app.got_subcommand("report")) return cmd_report(g, bundle_path, formats_csv);
    std::fprintf(stderr, "no subcommand selected\n");
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 2;
  } catch (const std::runtime_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  }
}
