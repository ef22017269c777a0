// Accuracy ratios across the four evaluation states (clean/adversarial x
// uncompressed/compressed) and the robustness gap between clean and
// perturbed inputs under a fixed compression state.
//
// The three derived ratios satisfy, by construction,
//   upr = m_adv_nc / m_cl_nc
//   cae = 1 - m_adv_c / m_cl_c
//   csg = upr + cae - 1
// so csg > 0 exactly when the attack hurts the compressed path more than
// the uncompressed one, relative to clean behaviour in each state.
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "vtc/dataset.hpp"
#include "vtc/model.hpp"
#include "vtc/random.hpp"
#include "vtc/tensor.hpp"

namespace vtc {

struct MetricsRecord {
  double m_cl_nc = 0.0;  // clean input, no compression
  double m_cl_c = 0.0;   // clean input, compressed
  double m_adv_nc = 0.0; // adversarial input, no compression
  double m_adv_c = 0.0;  // adversarial input, compressed
  double upr = 0.0;
  double cae = 0.0;
  double csg = 0.0;
};

inline MetricsRecord compute_metrics(double m_cl_nc, double m_cl_c, double m_adv_nc,
                                     double m_adv_c) {
  for (double m : {m_cl_nc, m_cl_c, m_adv_nc, m_adv_c})
    if (!(m >= 0.0 && m <= 1.0))
      throw std::invalid_argument("metrics: performance outside [0, 1]");
  if (m_cl_nc <= 0.0 || m_cl_c <= 0.0)
    throw std::invalid_argument("metrics: zero clean performance leaves ratios undefined");
  MetricsRecord r;
  r.m_cl_nc = m_cl_nc;
  r.m_cl_c = m_cl_c;
  r.m_adv_nc = m_adv_nc;
  r.m_adv_c = m_adv_c;
  r.upr = m_adv_nc / m_cl_nc;
  r.cae = 1.0 - m_adv_c / m_cl_c;
  r.csg = r.upr + r.cae - 1.0;
  return r;
}

// Builds the record from per-state accuracies of one model over one sample
// set, where the adversarial images are supplied per sample.
inline MetricsRecord measure_metrics(const ModelWeights& w,
                                     const std::vector<SyntheticSample>& samples,
                                     const std::vector<Tensor>& adversarial,
                                     const HookFactory& compressed) {
  if (samples.empty()) throw std::invalid_argument("metrics: empty sample set");
  if (adversarial.size() != samples.size())
    throw std::invalid_argument("metrics: one adversarial image per sample required");
  if (!compressed) throw std::invalid_argument("metrics: compressed state undefined");
  int cl_nc = 0, cl_c = 0, adv_nc = 0, adv_c = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    const SyntheticSample& s = samples[i];
    const int want = s.label == 1 ? kAnswerYes : kAnswerNo;
    ForwardOptions plain;
    cl_nc += forward(w, s.image, s.prompt, plain).answer == want;
    adv_nc += forward(w, adversarial[i], s.prompt, plain).answer == want;
    ForwardOptions comp_clean;
    comp_clean.hook = compressed();
    cl_c += forward(w, s.image, s.prompt, comp_clean).answer == want;
    ForwardOptions comp_adv;
    comp_adv.hook = compressed();
    adv_c += forward(w, adversarial[i], s.prompt, comp_adv).answer == want;
  }
  const double n = static_cast<double>(samples.size());
  return compute_metrics(cl_nc / n, cl_c / n, adv_nc / n, adv_c / n);
}

// Image-in, image-out; the index identifies the sample so per-sample noise
// stays deterministic under reordering.
using PerturbFn = std::function<Tensor(const Tensor&, std::uint64_t sample_index)>;

inline PerturbFn identity_perturb() {
  return [](const Tensor& img, std::uint64_t) { return img; };
}

// Additive Gaussian pixel noise, N(0, eps) per coordinate, clipped to the
// pixel range.
inline PerturbFn gaussian_noise(double eps, std::uint64_t seed) {
  if (eps < 0.0) throw std::invalid_argument("noise: negative scale");
  return [eps, seed](const Tensor& img, std::uint64_t index) {
    Rng rng = Rng(seed).derive(index);
    Tensor out = img;
    for (double& x : out.v) {
      x += rng.normal(0.0, eps);
      x = std::min(1.0, std::max(0.0, x));
    }
    return out;
  };
}

// accuracy(clean) - accuracy(perturbed), both under the same compression
// state (uncompressed when no factory is given). Bounded in [-1, 1].
inline double robustness_gap(const ModelWeights& w, const std::vector<SyntheticSample>& samples,
                             const PerturbFn& perturb, const HookFactory& state = nullptr) {
  if (samples.empty()) throw std::invalid_argument("metrics: empty sample set");
  if (!perturb) throw std::invalid_argument("metrics: missing perturbation");
  int clean = 0, pert = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    const SyntheticSample& s = samples[i];
    const int want = s.label == 1 ? kAnswerYes : kAnswerNo;
    ForwardOptions opt_c;
    if (state) opt_c.hook = state();
    clean += forward(w, s.image, s.prompt, opt_c).answer == want;
    ForwardOptions opt_p;
    if (state) opt_p.hook = state();
    pert += forward(w, perturb(s.image, i), s.prompt, opt_p).answer == want;
  }
  return static_cast<double>(clean - pert) / static_cast<double>(samples.size());
}

}  // namespace vtc
