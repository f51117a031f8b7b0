#include "pct/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace pct::model {

using engine::Shape;
using engine::Tensor;

ModelConfig ModelConfig::group(std::string_view name) {
  ModelConfig c;
  if (name == "I") {
    c.boost = clb::BoostConfig::uniform(0, 1.0, false);
    c.use_gce = false;
  } else if (name == "II") {
    c.boost = clb::BoostConfig::uniform(3, 1.0, false);
    c.use_gce = false;
  } else if (name == "III") {
    c.boost = clb::BoostConfig::uniform(3, 1.0, true);
    c.use_gce = false;
  } else if (name == "IV") {
    c.boost = clb::BoostConfig::uniform(3, 1.0, false);
    c.use_gce = true;
  } else if (name == "V") {
    c.boost = clb::BoostConfig::uniform(3, 1.0, true);
    c.use_gce = true;
  } else {
    throw UsageError("unknown ablation group '" + std::string(name) + "' (expected I, II, III, IV or V)");
  }
  return c;
}

void ModelConfig::validate() const {
  boost.validate();
  if (boost.use_confidence && boost.stages == 0) throw UsageError("model config: confidence requires boosting stages");
  if (trunk.patch_size <= 0 || trunk.channels.empty()) throw UsageError("model config: bad trunk");
  if (head_hidden <= 0) throw UsageError("model config: head width must be positive");
  if (encoder.in_channels <= 0 || encoder.channels <= 0 || encoder.crop_size <= 0) {
    throw UsageError("model config: bad encoder");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json anchors = nlohmann::json::array();
  for (const Eigen::Vector3d& a : c.anchors) anchors.push_back({a(0), a(1), a(2)});
  j = nlohmann::json{
      {"boost",
       {{"stages", c.boost.stages},
        {"gamma", c.boost.gamma},
        {"lambda_s", c.boost.lambda_s},
        {"use_confidence", c.boost.use_confidence}}},
      {"use_gce", c.use_gce},
      {"trunk",
       {{"patch_size", c.trunk.patch_size},
        {"channels", c.trunk.channels},
        {"kernel", c.trunk.kernel},
        {"stride", c.trunk.stride},
        {"padding", c.trunk.padding}}},
      {"conf_hidden", c.conf_hidden},
      {"head_hidden", c.head_hidden},
      {"encoder",
       {{"in_channels", c.encoder.in_channels},
        {"channels", c.encoder.channels},
        {"crop_size", c.encoder.crop_size}}},
      {"anchors", anchors}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  const auto& b = j.at("boost");
  b.at("stages").get_to(c.boost.stages);
  b.at("gamma").get_to(c.boost.gamma);
  b.at("lambda_s").get_to(c.boost.lambda_s);
  b.at("use_confidence").get_to(c.boost.use_confidence);
  j.at("use_gce").get_to(c.use_gce);
  const auto& t = j.at("trunk");
  t.at("patch_size").get_to(c.trunk.patch_size);
  t.at("channels").get_to(c.trunk.channels);
  t.at("kernel").get_to(c.trunk.kernel);
  t.at("stride").get_to(c.trunk.stride);
  t.at("padding").get_to(c.trunk.padding);
  j.at("conf_hidden").get_to(c.conf_hidden);
  j.at("head_hidden").get_to(c.head_hidden);
  const auto& e = j.at("encoder");
  e.at("in_channels").get_to(c.encoder.in_channels);
  e.at("channels").get_to(c.encoder.channels);
  e.at("crop_size").get_to(c.encoder.crop_size);
  const auto& a = j.at("anchors");
  for (std::size_t i = 0; i < c.anchors.size() && i < a.size(); ++i) {
    c.anchors[i] = Eigen::Vector3d(a[i].at(0).get<double>(), a[i].at(1).get<double>(), a[i].at(2).get<double>());
  }
}

std::vector<Sample> make_samples(const dataio::CalibRecord& calib, const geometry::DepthMap& depth,
                                 const std::vector<dataio::RoIRecord>& rois, const geometry::FeatureGrid& features,
                                 const std::vector<dataio::LabelRecord>& labels, int scene, const ModelConfig& cfg) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const dataio::RoIRecord& r = rois[i];
    Sample s;
    s.scene = scene;
    s.roi_index = static_cast<int>(i);
    s.roi = r.roi;
    s.patch = geometry::patch_to_coordinates(depth, r.roi, calib.intrinsics, cfg.trunk.patch_size);
    if (s.patch.valid_count() == 0) continue;
    if (cfg.use_gce) {
      if (features.channels != cfg.encoder.in_channels) {
        throw ShapeError("make_samples: feature grid has " + std::to_string(features.channels) +
                         " channels, encoder expects " + std::to_string(cfg.encoder.in_channels));
      }
      s.crop = boxhead::roi_align(features, r.roi, cfg.encoder.crop_size).cast<float>();
    }
    if (r.gt_index >= 0 && r.gt_index < static_cast<int>(labels.size())) s.gt = labels[r.gt_index].box();
    out.push_back(std::move(s));
  }
  return out;
}

PctModel::PctModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  stack_ = clb::BoostStack::make(cfg_.boost.stages, cfg_.trunk, cfg_.conf_hidden);
  g_ = BoxNetwork::make(cfg_.trunk, cfg_.context_size(), cfg_.head_hidden);
  encoder_ = boxhead::make_encoder(cfg_.encoder);
}

void PctModel::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  stack_.initialize(rng);
  g_.initialize(rng);
  encoder_.initialize(rng);
}

std::vector<engine::Parameter*> PctModel::parameters() {
  std::vector<engine::Parameter*> out;
  for (clb::WeakLearner& f : stack_.learners) {
    for (engine::Parameter* p : f.parameters()) out.push_back(p);
  }
  for (engine::Parameter* p : g_.parameters()) out.push_back(p);
  for (engine::Parameter* p : encoder_.parameters()) out.push_back(p);
  return out;
}

struct PctModel::Forward {
  std::vector<const CoordinatePatch*> patches;
  Matrix initial;
  std::vector<Matrix> cumulative;  // t = 0..T, 3 x N
  std::vector<Matrix> deltas;  // t = 1..T
  std::vector<Eigen::RowVectorXd> confidences;  // t = 1..T
  std::vector<BoxPrediction> boxes;
};

PctModel::Forward PctModel::run(std::span<const Sample* const> batch) {
  if (batch.empty()) throw UsageError("model: empty batch");
  const int n = static_cast<int>(batch.size());
  const int stages = cfg_.boost.stages;
  const std::vector<double>& gamma = cfg_.boost.gamma;
  Forward f;
  f.initial.resize(3, n);
  for (int i = 0; i < n; ++i) {
    f.patches.push_back(&batch[i]->patch);
    f.initial.col(i) = clb::initial_center(batch[i]->patch);
  }
  f.cumulative.push_back(gamma[0] * f.initial);
  for (int t = 1; t <= stages; ++t) {
    clb::WeakLearner& learner = stack_.learners[t - 1];
    const Tensor feat = learner.trunk.forward(clb::patch_tensor(f.patches, f.cumulative.back()));
    f.deltas.push_back(learner.delta_head.forward(feat).values);
    f.confidences.push_back(learner.conf_head.forward(feat).values.row(0));
    f.cumulative.push_back(f.cumulative.back() + gamma[t] * f.deltas.back());
  }
  const Matrix& estimate = f.cumulative.back();
  const Tensor feat = g_.trunk.forward(clb::patch_tensor(f.patches, estimate));
  Tensor ctx(Shape{cfg_.context_size(), 1, 1}, n);
  if (cfg_.use_gce) {
    Tensor crops(encoder_.input_shape(), n);
    for (int i = 0; i < n; ++i) {
      if (batch[i]->crop.size() != crops.values.rows()) throw ShapeError("model: sample has no context crop");
      crops.values.col(i) = batch[i]->crop.cast<double>();
    }
    ctx = encoder_.forward(crops);
  }
  const Tensor raw = g_.head.forward(feat, &ctx);
  for (int i = 0; i < n; ++i) {
    const int cls = std::clamp(batch[i]->roi.class_id, 0, static_cast<int>(cfg_.anchors.size()) - 1);
    f.boxes.push_back(boxhead::decode_box(raw.values.col(i), estimate.col(i), cfg_.anchors[cls]));
  }
  return f;
}

LossBreakdown PctModel::loss(std::span<const Sample* const> batch, bool with_grad) {
  Forward f = run(batch);
  const int n = static_cast<int>(batch.size());
  const int stages = cfg_.boost.stages;
  const double inv = 1.0 / n;
  LossBreakdown out;
  out.stage_psi.assign(stages, 0.0);
  Matrix d_raw(boxhead::kBoxOutputs, n);
  Matrix d_conf(std::max(stages, 1), n);
  std::vector<Matrix> d_psi(stages + 1, Matrix::Zero(3, n));
  std::vector<double> conf(stages), psi(stages);
  for (int i = 0; i < n; ++i) {
    if (!batch[i]->gt) throw UsageError("model: training sample without ground truth");
    const Box3D& gt = *batch[i]->gt;
    const Eigen::Vector3d target = gt.location();
    for (int t = 1; t <= stages; ++t) {
      conf[t - 1] = f.confidences[t - 1](i);
      psi[t - 1] = clb::localization_loss(target, f.cumulative[t].col(i));
      out.stage_psi[t - 1] += inv * psi[t - 1];
    }
    const clb::ClbLoss cl = clb::clb_loss(conf, psi, cfg_.boost);
    out.clb += inv * cl.total;
    out.box += inv * boxhead::box_loss(f.boxes[i], gt).total();
    if (!with_grad) continue;
    d_raw.col(i) = inv * boxhead::box_loss_grad(f.boxes[i], gt);
    const std::vector<double> ds = clb::confidence_gradient(conf, psi, cfg_.boost);
    for (int t = 1; t <= stages; ++t) {
      d_conf(t - 1, i) = inv * ds[t - 1];
      const double weight = cfg_.boost.use_confidence ? clb::clamp_confidence(conf[t - 1]) : 1.0;
      d_psi[t].col(i) = inv * weight * clb::localization_loss_grad(target, f.cumulative[t].col(i));
    }
  }
  out.total = out.clb + out.box;
  if (!with_grad) return out;

  const Tensor d_feat = g_.head.backward(Tensor(Shape{boxhead::kBoxOutputs, 1, 1}, d_raw));
  if (cfg_.use_gce) encoder_.backward(Tensor(Shape{cfg_.context_size(), 1, 1}, g_.head.side_gradient()));
  const Tensor d_in = g_.trunk.backward(d_feat);
  // g holds dL/d cumulative[t] while walking back through the stages.
  Matrix g = d_raw.topRows(3) + clb::shift_backward(f.patches, d_in);
  for (int t = stages; t >= 1; --t) {
    g += d_psi[t];
    clb::WeakLearner& learner = stack_.learners[t - 1];
    Tensor d_stage_feat = learner.delta_head.backward(Tensor(Shape{3, 1, 1}, cfg_.boost.gamma[t] * g));
    if (cfg_.boost.use_confidence) {
      d_stage_feat.values += learner.conf_head.backward(Tensor(Shape{1, 1, 1}, Matrix(d_conf.row(t - 1)))).values;
    }
    const Tensor d_stage_in = learner.trunk.backward(d_stage_feat);
    g += clb::shift_backward(f.patches, d_stage_in);
  }
  return out;
}

std::vector<Prediction> PctModel::predict(std::span<const Sample* const> batch) {
  const Forward f = run(batch);
  std::vector<Prediction> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Prediction& p = out[i];
    p.trace.initial = f.initial.col(i);
    for (std::size_t t = 0; t < f.cumulative.size(); ++t) p.trace.cumulative.push_back(f.cumulative[t].col(i));
    for (std::size_t t = 0; t < f.deltas.size(); ++t) {
      p.trace.stages.push_back({f.deltas[t].col(i), f.confidences[t](i)});
    }
    p.box = f.boxes[i];
  }
  return out;
}

namespace {

std::vector<std::pair<std::string, Network*>> named_networks(clb::BoostStack& stack, BoxNetwork& g, Network& enc) {
  std::vector<std::pair<std::string, Network*>> nets;
  for (std::size_t t = 0; t < stack.learners.size(); ++t) {
    const std::string prefix = "stage" + std::to_string(t + 1) + ".";
    nets.emplace_back(prefix + "trunk", &stack.learners[t].trunk);
    nets.emplace_back(prefix + "delta", &stack.learners[t].delta_head);
    nets.emplace_back(prefix + "conf", &stack.learners[t].conf_head);
  }
  nets.emplace_back("box.trunk", &g.trunk);
  nets.emplace_back("box.head", &g.head);
  nets.emplace_back("gce.encoder", &enc);
  return nets;
}

}  // namespace

std::string PctModel::save(const nlohmann::json& extra_meta) const {
  auto& self = const_cast<PctModel&>(*this);
  std::vector<std::pair<std::string, const Network*>> nets;
  for (const auto& [name, net] : named_networks(self.stack_, self.g_, self.encoder_)) nets.emplace_back(name, net);
  nlohmann::json meta{{"model", cfg_}};
  if (!extra_meta.is_null()) meta["run"] = extra_meta;
  return engine::write_checkpoint(meta, nets);
}

PctModel PctModel::load(std::string_view bytes) {
  const engine::Checkpoint ck = engine::read_checkpoint(bytes);
  if (!ck.meta.contains("model")) throw FormatError("checkpoint: no model configuration");
  PctModel m(ck.meta.at("model").get<ModelConfig>());
  for (const auto& [name, net] : named_networks(m.stack_, m.g_, m.encoder_)) {
    const Network& stored = ck.find(name);
    if (stored.specs() != net->specs() || !(stored.input_shape() == net->input_shape())) {
      throw FormatError("checkpoint: network '" + name + "' does not match the configuration");
    }
    *net = stored;
  }
  return m;
}

LossBreakdown train_step(PctModel& model, std::span<const Sample* const> batch, engine::OptimizerState& opt) {
  const LossBreakdown out = model.loss(batch, true);
  const std::vector<engine::Parameter*> params = model.parameters();
  engine::sgd_step(std::span<engine::Parameter* const>(params), opt);
  return out;
}

std::vector<EpochStats> train(PctModel& model, const std::vector<Sample>& samples, const TrainOptions& opts,
                              const std::function<void(const EpochStats&)>& on_epoch) {
  if (opts.batch <= 0) throw UsageError("train: batch size must be positive");
  if (opts.epochs < 0) throw UsageError("train: epoch count must be non-negative");
  std::vector<EpochStats> curve;
  if (samples.empty() || opts.epochs == 0) return curve;
  engine::OptimizerState opt;
  opt.learning_rate = opts.learning_rate;
  opt.momentum = opts.momentum;
  std::mt19937_64 rng(opts.seed);
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<const Sample*> batch;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats;
    stats.epoch = epoch;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch) {
      batch.clear();
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opts.batch));
      for (std::size_t k = start; k < end; ++k) batch.push_back(&samples[order[k]]);
      const LossBreakdown l = train_step(model, batch, opt);
      stats.loss += l.total;
      stats.clb += l.clb;
      stats.box += l.box;
      ++batches;
    }
    stats.loss /= batches;
    stats.clb /= batches;
    stats.box /= batches;
    curve.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return curve;
}

std::vector<Prediction> predict_all(PctModel& model, const std::vector<Sample>& samples, int chunk) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  std::vector<const Sample*> batch;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    batch.clear();
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(chunk));
    for (std::size_t k = start; k < end; ++k) batch.push_back(&samples[k]);
    for (Prediction& p : model.predict(batch)) out.push_back(std::move(p));
  }
  return out;
}

dataio::LabelRecord detection_record(const Sample& s, const Prediction& p) {
  const Box3D b = p.box.box(s.roi.class_id, s.roi.score);
  dataio::LabelRecord r;
  r.type = dataio::class_name_of(s.roi.class_id);
  r.truncation = -1;
  r.occlusion = -1;
  r.alpha = geometry::normalize_angle(b.theta - std::atan2(b.x, b.z));
  r.left = s.roi.left;
  r.top = s.roi.top;
  r.right = s.roi.right;
  r.bottom = s.roi.bottom;
  r.h = b.h;
  r.w = b.w;
  r.l = b.l;
  r.x = b.x;
  r.y = b.y;
  r.z = b.z;
  r.rotation_y = b.theta;
  r.score = s.roi.score;
  return r;
}

double mean_center_error(const std::vector<Sample>& samples, const std::vector<Prediction>& preds) {
  if (samples.size() != preds.size()) throw UsageError("mean_center_error: size mismatch");
  double acc = 0;
  int n = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].gt) continue;
    acc += (preds[i].box.center - samples[i].gt->location()).norm();
    ++n;
  }
  return n == 0 ? 0.0 : acc / n;
}

}  // namespace pct::model
