// Synthetic patch-grid scenes for a yes/no presence task.
//
// A scene is a G x G grid of patches. Each scene contains 1-4 object patches,
// each carrying a distinct class template (an orthogonal basis direction of
// amplitude 1.0 plus small Gaussian jitter); every other patch is low-amplitude
// uniform background. The prompt asks whether one class is present; labels are
// exactly balanced by alternating yes/no queries.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "vtc/random.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

struct TaskConfig {
  int classes = 8;
  int min_objects = 1;
  int max_objects = 4;
  double background_high = 0.15;  // background entries are uniform [0, this]
  double template_amp = 1.0;
  double jitter = 0.05;
};

// Prompt layout: [BOS, QRY, SEP, class token]; class tokens are 0..classes-1.
// The class token sits last so the final text position — the default reference
// for attention scoring — carries the query identity directly.
inline constexpr int kPromptLen = 4;

inline int token_bos(const TaskConfig& t) { return t.classes; }
inline int token_sep(const TaskConfig& t) { return t.classes + 1; }
inline int token_qry(const TaskConfig& t) { return t.classes + 2; }
inline int vocab_size(const TaskConfig& t) { return t.classes + 3; }

struct SyntheticSample {
  Tensor image;                     // n_V x patch_dim, entries in [0, 1]
  std::vector<int> prompt;          // length kPromptLen
  int label = 0;                    // 1 = queried class present
  int query_class = 0;
  std::vector<int> object_patches;  // patch indices carrying class patterns
  std::vector<int> object_classes;  // parallel to object_patches
};

inline std::vector<int> make_prompt(const TaskConfig& task, int query_class) {
  return {token_bos(task), token_qry(task), token_sep(task), query_class};
}

inline void validate_task(const TaskConfig& task, int grid_side, int patch_dim) {
  if (grid_side < 2) throw std::invalid_argument("dataset: grid side must be >= 2");
  if (task.classes < 2 || task.classes > patch_dim)
    throw std::invalid_argument("dataset: orthogonal templates need 2 <= classes <= patch dim");
  if (task.min_objects < 1 || task.max_objects < task.min_objects)
    throw std::invalid_argument("dataset: bad object count range");
  if (task.max_objects >= task.classes)
    throw std::invalid_argument("dataset: max objects must leave at least one absent class");
  if (task.max_objects > grid_side * grid_side)
    throw std::invalid_argument("dataset: more objects than patches");
  if (!(task.background_high >= 0.0 && task.background_high <= 1.0) ||
      !(task.template_amp > 0.0 && task.template_amp <= 1.0) || task.jitter < 0.0)
    throw std::invalid_argument("dataset: amplitudes out of range");
}

inline std::vector<SyntheticSample> generate_dataset(int grid_side, int patch_dim,
                                                     const TaskConfig& task, int count,
                                                     uint64_t seed) {
  validate_task(task, grid_side, patch_dim);
  if (count <= 0) throw std::invalid_argument("dataset: count must be positive");
  const int n_v = grid_side * grid_side;
  Rng rng(seed);
  std::vector<SyntheticSample> out;
  out.reserve(count);
  for (int s = 0; s < count; ++s) {
    Rng r = rng.derive(static_cast<uint64_t>(s));
    SyntheticSample smp;
    smp.image = Tensor(n_v, patch_dim);
    for (double& x : smp.image.v) x = r.uniform(0.0, task.background_high);

    const int n_obj = r.uniform_int(task.min_objects, task.max_objects);
    smp.object_classes = r.sample_distinct(task.classes, n_obj);
    r.shuffle(smp.object_classes);
    smp.object_patches = r.sample_distinct(n_v, n_obj);
    for (int i = 0; i < n_obj; ++i) {
      const int p = smp.object_patches[i];
      const int c = smp.object_classes[i];
      for (int j = 0; j < patch_dim; ++j) {
        double x = (j == c ? task.template_amp : 0.0) + r.normal(0.0, task.jitter);
        smp.image.at(p, j) = std::min(1.0, std::max(0.0, x));
      }
    }

    // Exact label balance: even samples ask for a present class, odd for an
    // absent one.
    smp.label = (s % 2 == 0) ? 1 : 0;
    if (smp.label == 1) {
      smp.query_class = smp.object_classes[r.uniform_int(0, n_obj - 1)];
    } else {
      std::vector<int> absent;
      for (int c = 0; c < task.classes; ++c) {
        bool present = false;
        for (int oc : smp.object_classes) present |= (oc == c);
        if (!present) absent.push_back(c);
      }
      smp.query_class = absent[r.uniform_int(0, static_cast<int>(absent.size()) - 1)];
    }
    smp.prompt = make_prompt(task, smp.query_class);
    out.push_back(std::move(smp));
  }
  return out;
}

// Mean patch over a sample set; used by the masking defense as replacement
// content.
inline Tensor dataset_mean_patch(const std::vector<SyntheticSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("dataset: mean patch of empty set");
  const int d = samples[0].image.cols;
  Tensor mean(1, d);
  size_t rows = 0;
  for (const SyntheticSample& s : samples) {
    for (int i = 0; i < s.image.rows; ++i)
      for (int j = 0; j < d; ++j) mean.at(0, j) += s.image.at(i, j);
    rows += s.image.rows;
  }
  for (double& x : mean.v) x /= static_cast<double>(rows);
  return mean;
}

}  // namespace vtc
