#include "pct/clb.hpp"

#include <algorithm>
#include <sstream>

namespace pct::clb {

using engine::LayerSpec;
using engine::Shape;

BoostConfig BoostConfig::uniform(int stages, double lambda_s, bool use_confidence) {
  BoostConfig cfg;
  cfg.stages = stages;
  cfg.gamma.assign(static_cast<std::size_t>(std::max(stages, 0)) + 1, 1.0);
  cfg.lambda_s = lambda_s;
  cfg.use_confidence = use_confidence;
  cfg.validate();
  return cfg;
}

void BoostConfig::validate() const {
  if (stages < 0) throw UsageError("boost config: stage count must be non-negative");
  if (gamma.size() != static_cast<std::size_t>(stages) + 1) {
    throw UsageError("boost config: need " + std::to_string(stages + 1) + " gamma weights");
  }
  if (lambda_s < 0) throw UsageError("boost config: lambda_s must be non-negative");
}

engine::Shape patch_shape(int patch_size) { return Shape{4, patch_size, patch_size}; }

std::vector<LayerSpec> trunk_specs(const TrunkConfig& cfg) {
  std::vector<LayerSpec> specs;
  int in = 4;
  for (int c : cfg.channels) {
    specs.push_back(LayerSpec::conv2d(in, c, cfg.kernel, cfg.stride, cfg.padding));
    specs.push_back(LayerSpec::relu());
    in = c;
  }
  specs.push_back(LayerSpec::global_avg_pool());
  return specs;
}

WeakLearner WeakLearner::make(const TrunkConfig& trunk, const std::vector<int>& conf_hidden) {
  WeakLearner f;
  const int feat = trunk.feature_size();
  f.trunk = Network(patch_shape(trunk.patch_size), trunk_specs(trunk));
  f.delta_head = Network(Shape{feat, 1, 1}, {LayerSpec::affine(feat, 3)});
  std::vector<LayerSpec> conf;
  int in = feat;
  for (int h : conf_hidden) {
    conf.push_back(LayerSpec::affine(in, h));
    conf.push_back(LayerSpec::relu());
    in = h;
  }
  conf.push_back(LayerSpec::affine(in, 1));
  conf.push_back(LayerSpec::sigmoid());
  f.conf_head = Network(Shape{feat, 1, 1}, std::move(conf));
  return f;
}

void WeakLearner::initialize(std::mt19937_64& rng) {
  trunk.initialize(rng);
  delta_head.initialize(rng);
  conf_head.initialize(rng);
}

std::vector<engine::Parameter*> WeakLearner::parameters() {
  std::vector<engine::Parameter*> out;
  for (Network* n : {&trunk, &delta_head, &conf_head}) {
    for (engine::Parameter* p : n->parameters()) out.push_back(p);
  }
  return out;
}

BoostStack BoostStack::make(int stages, const TrunkConfig& trunk, const std::vector<int>& conf_hidden) {
  BoostStack s;
  s.trunk = trunk;
  s.conf_hidden = conf_hidden;
  for (int t = 0; t < stages; ++t) s.learners.push_back(WeakLearner::make(trunk, conf_hidden));
  return s;
}

void BoostStack::initialize(std::mt19937_64& rng) {
  for (WeakLearner& f : learners) f.initialize(rng);
}

Eigen::Vector3d initial_center(const CoordinatePatch& c0) {
  const int n = c0.valid_count();
  if (n == 0) throw EmptyPatchError("initial_center: patch has no valid cells");
  Eigen::Vector3d out;
  std::vector<double> vals;
  vals.reserve(n);
  for (int axis = 0; axis < 3; ++axis) {
    vals.clear();
    for (int i = 0; i < c0.cells(); ++i) {
      if (c0.valid(i)) vals.push_back(c0.points(i, axis));
    }
    const auto mid = vals.begin() + n / 2;
    std::nth_element(vals.begin(), mid, vals.end());
    if (n % 2 == 1) {
      out(axis) = *mid;
    } else {
      const double upper = *mid;
      const double lower = *std::max_element(vals.begin(), mid);
      out(axis) = 0.5 * (lower + upper);
    }
  }
  return out;
}

CoordinatePatch shift_patch(const CoordinatePatch& c0, const Eigen::Vector3d& center) {
  CoordinatePatch out = c0;
  for (int i = 0; i < c0.cells(); ++i) {
    if (c0.valid(i)) out.points.row(i) -= center.transpose().array();
  }
  return out;
}

Tensor patch_tensor(std::span<const CoordinatePatch* const> patches, const Matrix& centers) {
  if (patches.empty()) throw ShapeError("patch_tensor: empty batch");
  const int k = patches.front()->size;
  const int cells = k * k;
  Tensor t(patch_shape(k), static_cast<int>(patches.size()));
  for (std::size_t n = 0; n < patches.size(); ++n) {
    const CoordinatePatch& p = *patches[n];
    if (p.size != k) throw ShapeError("patch_tensor: mixed patch sizes in one batch");
    auto col = t.values.col(static_cast<Eigen::Index>(n));
    for (int i = 0; i < cells; ++i) {
      if (!p.valid(i)) continue;
      for (int axis = 0; axis < 3; ++axis) col(axis * cells + i) = p.points(i, axis) - centers(axis, n);
      col(3 * cells + i) = 1.0;
    }
  }
  return t;
}

Matrix shift_backward(std::span<const CoordinatePatch* const> patches, const Tensor& input_grad) {
  Matrix out = Matrix::Zero(3, static_cast<Eigen::Index>(patches.size()));
  for (std::size_t n = 0; n < patches.size(); ++n) {
    const CoordinatePatch& p = *patches[n];
    const int cells = p.cells();
    const auto col = input_grad.values.col(static_cast<Eigen::Index>(n));
    for (int i = 0; i < cells; ++i) {
      if (!p.valid(i)) continue;
      for (int axis = 0; axis < 3; ++axis) out(axis, n) -= col(axis * cells + i);
    }
  }
  return out;
}

StageOutput stage_forward(WeakLearner& learner, const CoordinatePatch& c) {
  const CoordinatePatch* ptr = &c;
  const Tensor in = patch_tensor(std::span<const CoordinatePatch* const>(&ptr, 1), Matrix::Zero(3, 1));
  const Tensor feat = learner.trunk.forward(in);
  const Tensor delta = learner.delta_head.forward(feat);
  const Tensor conf = learner.conf_head.forward(feat);
  StageOutput out;
  out.delta = delta.values.col(0);
  out.confidence = conf.values(0, 0);
  return out;
}

BoostTrace clb_forward(BoostStack& stack, const CoordinatePatch& c0, const BoostConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(stack.learners.size()) < cfg.stages) {
    throw ShapeError("clb_forward: stack has fewer learners than configured stages");
  }
  BoostTrace trace;
  trace.initial = initial_center(c0);
  trace.cumulative.push_back(cfg.gamma[0] * trace.initial);
  trace.patches.push_back(shift_patch(c0, trace.cumulative.back()));
  for (int t = 1; t <= cfg.stages; ++t) {
    const StageOutput out = stage_forward(stack.learners[t - 1], trace.patches.back());
    trace.stages.push_back(out);
    trace.cumulative.push_back(trace.cumulative.back() + cfg.gamma[t] * out.delta);
    trace.patches.push_back(shift_patch(c0, trace.cumulative.back()));
  }
  return trace;
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

double localization_loss(const Eigen::Vector3d& target, const Eigen::Vector3d& estimate) {
  double acc = 0;
  for (int i = 0; i < 3; ++i) acc += smooth_l1(estimate(i) - target(i));
  return acc;
}

Eigen::Vector3d localization_loss_grad(const Eigen::Vector3d& target, const Eigen::Vector3d& estimate) {
  Eigen::Vector3d g;
  for (int i = 0; i < 3; ++i) g(i) = smooth_l1_grad(estimate(i) - target(i));
  return g;
}

double clamp_confidence(double s) { return std::clamp(s, kConfidenceClamp, 1.0 - kConfidenceClamp); }

ClbLoss clb_loss(std::span<const double> confidences, std::span<const double> psi, const BoostConfig& cfg) {
  ClbLoss out;
  out.psi.assign(psi.begin(), psi.end());
  if (!cfg.use_confidence) {
    for (double p : psi) out.weighted += p;
    out.total = out.weighted;
    return out;
  }
  double prod = 1.0;
  for (std::size_t t = 0; t < psi.size(); ++t) {
    const double s = clamp_confidence(confidences[t]);
    out.weighted += s * psi[t];
    prod *= 1.0 - s;
  }
  // The product over an empty stack is 1, but with no stages there is no
  // uncertainty to penalize.
  out.penalty = psi.empty() ? 0.0 : cfg.lambda_s * prod;
  out.total = out.weighted + out.penalty;
  return out;
}

ClbLoss clb_loss(const BoostTrace& trace, const Eigen::Vector3d& gt_center, const BoostConfig& cfg) {
  std::vector<double> conf;
  std::vector<double> psi;
  for (std::size_t t = 0; t < trace.stages.size(); ++t) {
    conf.push_back(trace.stages[t].confidence);
    psi.push_back(localization_loss(gt_center, trace.cumulative[t + 1]));
  }
  return clb_loss(conf, psi, cfg);
}

std::vector<double> confidence_gradient(std::span<const double> confidences, std::span<const double> psi,
                                        const BoostConfig& cfg) {
  std::vector<double> g(psi.size(), 0.0);
  if (!cfg.use_confidence) return g;
  for (std::size_t t = 0; t < psi.size(); ++t) {
    const double raw = confidences[t];
    if (raw < kConfidenceClamp || raw > 1.0 - kConfidenceClamp) continue;
    double prod = 1.0;
    for (std::size_t j = 0; j < psi.size(); ++j) {
      if (j != t) prod *= 1.0 - clamp_confidence(confidences[j]);
    }
    g[t] = psi[t] - cfg.lambda_s * prod;
  }
  return g;
}

std::vector<StageErrorRow> export_stage_errors(std::span<const BoostTrace> traces,
                                               std::span<const Eigen::Vector3d> gts,
                                               std::span<const Eigen::Vector3d> final_centers) {
  if (traces.size() != gts.size()) throw UsageError("export_stage_errors: traces and ground truths differ");
  if (!final_centers.empty() && final_centers.size() != traces.size()) {
    throw UsageError("export_stage_errors: final centers and traces differ");
  }
  static constexpr char kAxes[3] = {'x', 'y', 'z'};
  std::vector<StageErrorRow> rows;
  if (traces.empty()) return rows;
  const std::size_t stages = traces.front().stages.size();
  for (std::size_t t = 1; t <= stages; ++t) {
    const std::string label = "loc." + std::to_string(t);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const Eigen::Vector3d err = traces[i].cumulative.at(t) - gts[i];
      for (int a = 0; a < 3; ++a) rows.push_back({label, kAxes[a], err(a)});
    }
  }
  if (!final_centers.empty()) {
    const std::string label = "loc." + std::to_string(stages + 1);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const Eigen::Vector3d err = final_centers[i] - gts[i];
      for (int a = 0; a < 3; ++a) rows.push_back({label, kAxes[a], err(a)});
    }
  }
  return rows;
}

std::string stage_errors_csv(std::span<const StageErrorRow> rows) {
  std::ostringstream out;
  out.precision(17);
  out << "stage,axis,error\n";
  for (const StageErrorRow& r : rows) out << r.stage << ',' << r.axis << ',' << r.error << '\n';
  return out.str();
}

}  // namespace pct::clb
