#include "pct/gradcheck.hpp"

#include <algorithm>
#include <random>

namespace pct::gradcheck {

using engine::LayerSpec;
using engine::Matrix;
using engine::Network;
using engine::Parameter;
using engine::Shape;
using engine::Tensor;

double check_network(Network& net, const Tensor& input, const Tensor* side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix w(net.output_shape().size(), input.batch());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);

  Parameter in{input.values, Matrix::Zero(input.values.rows(), input.values.cols())};
  Parameter sd;
  if (side) sd = Parameter{side->values, Matrix::Zero(side->values.rows(), side->values.cols())};

  auto loss = [&]() {
    Tensor s;
    if (side) s = Tensor(side->shape, sd.value);
    const Tensor y = net.forward(Tensor(input.shape, in.value), side ? &s : nullptr);
    return (w.array() * y.values.array()).sum() + 0.5 * y.values.squaredNorm();
  };

  net.zero_grad();
  {
    Tensor s;
    if (side) s = Tensor(side->shape, sd.value);
    const Tensor y = net.forward(Tensor(input.shape, in.value), side ? &s : nullptr);
    const Tensor dx = net.backward(Tensor(y.shape, Matrix(w + y.values)));
    in.grad = dx.values;
    if (side) sd.grad = net.side_gradient();
  }
  std::vector<Parameter*> params = net.parameters();
  params.push_back(&in);
  if (side) params.push_back(&sd);
  return engine::compare_gradients(params, loss, kEpsilon, kFloor);
}

model::ModelConfig tiny_config(bool use_confidence, bool use_gce, int stages) {
  model::ModelConfig c;
  c.boost = clb::BoostConfig::uniform(stages, 1.0, use_confidence);
  c.use_gce = use_gce;
  c.trunk.patch_size = 4;
  c.trunk.channels = {2, 2, 2};
  c.conf_hidden = {3, 2};
  c.head_hidden = 4;
  c.encoder.in_channels = 2;
  c.encoder.channels = 2;
  c.encoder.crop_size = 16;
  return c;
}

std::vector<model::Sample> tiny_batch(const model::ModelConfig& cfg, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int k = cfg.trunk.patch_size;
  std::vector<model::Sample> out;
  for (int i = 0; i < n; ++i) {
    model::Sample s;
    s.scene = 0;
    s.roi_index = i;
    s.roi = geometry::RoI2D{10, 10, 50, 40, 0, 0.9};
    const Eigen::Vector3d center(2.0 * normal(rng), 1.5 + 0.1 * normal(rng), 15.0 + 3.0 * normal(rng));
    s.patch = geometry::CoordinatePatch(k);
    for (int c = 0; c < k * k; ++c) {
      s.patch.valid(c) = unit(rng) > 0.2;
      for (int a = 0; a < 3; ++a) s.patch.points(c, a) = center(a) + 0.6 * normal(rng);
    }
    s.patch.valid(0) = true;
    if (cfg.use_gce) {
      s.crop.resize(cfg.encoder.in_channels * cfg.encoder.crop_size * cfg.encoder.crop_size);
      for (Eigen::Index j = 0; j < s.crop.size(); ++j) s.crop(j) = static_cast<float>(unit(rng));
    }
    geometry::Box3D gt;
    gt.set_location(center + Eigen::Vector3d(0.3 * normal(rng), 0.3 * normal(rng), 0.3 * normal(rng)));
    gt.h = 1.5 + 0.1 * normal(rng);
    gt.w = 1.6 + 0.1 * normal(rng);
    gt.l = 3.9 + 0.3 * normal(rng);
    gt.theta = geometry::normalize_angle(3.0 * normal(rng));
    s.gt = gt;
    out.push_back(std::move(s));
  }
  return out;
}

double check_model(model::PctModel& m, const std::vector<model::Sample>& batch) {
  std::vector<const model::Sample*> ptrs;
  for (const model::Sample& s : batch) ptrs.push_back(&s);
  std::vector<Parameter*> params = m.parameters();
  for (Parameter* p : params) p->grad.setZero();
  m.loss(ptrs, true);
  return engine::compare_gradients(params, [&] { return m.loss(ptrs, false).total; }, kModelEpsilon, kFloor);
}

double check_confidence_gradient(int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const int stages = 1 + static_cast<int>(unit(rng) * 4);
    clb::BoostConfig cfg = clb::BoostConfig::uniform(stages, 0.2 + 1.8 * unit(rng), true);
    std::vector<double> s(stages), psi(stages);
    for (int t = 0; t < stages; ++t) {
      s[t] = 0.05 + 0.9 * unit(rng);
      psi[t] = 3.0 * unit(rng);
    }
    const std::vector<double> analytic = clb::confidence_gradient(s, psi, cfg);
    for (int t = 0; t < stages; ++t) {
      const double h = 1e-5;
      std::vector<double> up = s, down = s;
      up[t] += h;
      down[t] -= h;
      const double numeric = (clb::clb_loss(up, psi, cfg).total - clb::clb_loss(down, psi, cfg).total) / (2 * h);
      const double denom = std::max({std::abs(analytic[t]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[t] - numeric) / denom);
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(Shape s, int batch, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(s, batch);
  for (Eigen::Index i = 0; i < t.values.size(); ++i) t.values.data()[i] = normal(rng);
  return t;
}

// Zero biases put many pre-activations exactly on the relu kink, where
// central differences see half the slope.
void jitter_biases(std::vector<Parameter*> params, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 0.1);
  for (Parameter* p : params) {
    if (p->value.cols() != 1) continue;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = normal(rng);
  }
}

double layer_case(Shape in, std::vector<LayerSpec> specs, std::uint64_t seed, int side = 0) {
  std::mt19937_64 rng(seed);
  Network net(in, std::move(specs));
  net.initialize(rng);
  jitter_biases(net.parameters(), rng);
  const Tensor x = random_tensor(in, 3, rng);
  if (side > 0) {
    const Tensor s = random_tensor(Shape{side, 1, 1}, 3, rng);
    return check_network(net, x, &s, seed + 1);
  }
  return check_network(net, x, nullptr, seed + 1);
}

}  // namespace

std::vector<CheckResult> run_suite(std::uint64_t seed) {
  std::vector<CheckResult> out;
  auto add = [&](std::string name, double err, double tol = kTolerance) { out.push_back({std::move(name), err, tol}); };
  add("affine", layer_case(Shape{5, 1, 1}, {LayerSpec::affine(5, 4)}, seed));
  add("conv2d", layer_case(Shape{2, 6, 6}, {LayerSpec::conv2d(2, 3, 3, 2, 1)}, seed + 10));
  add("relu", layer_case(Shape{5, 1, 1}, {LayerSpec::affine(5, 6), LayerSpec::relu(), LayerSpec::affine(6, 3)},
                         seed + 20));
  add("sigmoid", layer_case(Shape{4, 1, 1}, {LayerSpec::affine(4, 5), LayerSpec::sigmoid()}, seed + 30));
  add("global_avg_pool",
      layer_case(Shape{2, 5, 5}, {LayerSpec::conv2d(2, 3, 3, 1, 1), LayerSpec::global_avg_pool()}, seed + 40));
  add("flatten", layer_case(Shape{2, 4, 4},
                            {LayerSpec::conv2d(2, 2, 3, 2, 1), LayerSpec::flatten(), LayerSpec::affine(8, 3)},
                            seed + 50));
  add("concat_input",
      layer_case(Shape{3, 1, 1}, {LayerSpec::concat_input(2), LayerSpec::affine(5, 4)}, seed + 60, 2));
  {
    std::mt19937_64 rng(seed + 70);
    boxhead::EncoderConfig ec{3, 3, 16};
    Network enc = boxhead::make_encoder(ec);
    enc.initialize(rng);
    jitter_biases(enc.parameters(), rng);
    add("gce_encoder", check_network(enc, random_tensor(enc.input_shape(), 2, rng), nullptr, seed + 71));
  }
  for (const auto& [label, conf, gce, stages] :
       std::vector<std::tuple<std::string, bool, bool, int>>{{"end_to_end_group_V", true, true, 3},
                                                             {"end_to_end_group_II", false, false, 3},
                                                             {"end_to_end_T0", false, false, 0}}) {
    const model::ModelConfig cfg = tiny_config(conf, gce, stages);
    model::PctModel m(cfg);
    m.initialize(seed + 80);
    std::mt19937_64 rng(seed + 82);
    jitter_biases(m.parameters(), rng);
    const std::vector<model::Sample> batch = tiny_batch(cfg, 4, seed + 81);
    add(label, check_model(m, batch));
  }
  add("confidence_closed_form", check_confidence_gradient(100, seed + 90), kConfidenceTolerance);
  return out;
}

}  // namespace pct::gradcheck
