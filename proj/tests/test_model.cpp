#include <doctest.h>

#include <cmath>

#include "pct/gradcheck.hpp"
#include "pct/model.hpp"
#include "pct/synth.hpp"

using namespace pct;
using namespace pct::model;

namespace {

std::vector<const Sample*> pointers(const std::vector<Sample>& v) {
  std::vector<const Sample*> out;
  for (const Sample& s : v) out.push_back(&s);
  return out;
}

std::vector<Matrix> snapshot(PctModel& m) {
  std::vector<Matrix> out;
  for (engine::Parameter* p : m.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("group presets") {
  CHECK(ModelConfig::group("I").boost.stages == 0);
  CHECK(!ModelConfig::group("I").use_gce);
  CHECK(!ModelConfig::group("II").boost.use_confidence);
  CHECK(ModelConfig::group("III").boost.use_confidence);
  CHECK(!ModelConfig::group("III").use_gce);
  CHECK(ModelConfig::group("IV").use_gce);
  CHECK(!ModelConfig::group("IV").boost.use_confidence);
  CHECK(ModelConfig::group("V").boost.stages == 3);
  CHECK(ModelConfig::group("V").use_gce);
  CHECK_THROWS_AS(ModelConfig::group("VI"), UsageError);
  ModelConfig bad = ModelConfig::group("I");
  bad.boost.use_confidence = true;
  CHECK_THROWS_AS(bad.validate(), UsageError);

  const ModelConfig v = gradcheck::tiny_config(true, true, 2);
  const ModelConfig back = nlohmann::json(v).get<ModelConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(v));
  CHECK(back.trunk.channels == v.trunk.channels);
  CHECK(back.boost.gamma == v.boost.gamma);
}

TEST_CASE("batched forward equals per-sample composition") {
  for (bool gce : {false, true}) {
    const ModelConfig cfg = gradcheck::tiny_config(true, gce, 3);
    PctModel m(cfg);
    m.initialize(3);
    const std::vector<Sample> batch = gradcheck::tiny_batch(cfg, 5, 4);
    const std::vector<Prediction> preds = m.predict(pointers(batch));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const clb::BoostTrace tr = clb::clb_forward(m.stack(), batch[i].patch, cfg.boost);
      std::optional<Eigen::VectorXd> ctx;
      if (gce) ctx = boxhead::gce_encode(m.encoder(), batch[i].crop.cast<double>());
      const boxhead::BoxPrediction bp =
          boxhead::box_forward(m.box_network(), tr.patches.back(), tr.final_estimate(), ctx, cfg.anchors[0]);
      for (std::size_t t = 0; t < tr.cumulative.size(); ++t)
        CHECK((preds[i].trace.cumulative[t] - tr.cumulative[t]).cwiseAbs().maxCoeff() < 1e-12);
      for (std::size_t t = 0; t < tr.stages.size(); ++t)
        CHECK(std::abs(preds[i].trace.stages[t].confidence - tr.stages[t].confidence) < 1e-12);
      CHECK((preds[i].box.center - bp.center).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((preds[i].box.dims - bp.dims).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((preds[i].box.dims.array() > 0).all());
      CHECK(std::abs(preds[i].box.sin_theta - bp.sin_theta) < 1e-12);
    }
  }
}

TEST_CASE("loss is the hand sum of the boosting and box terms") {
  const ModelConfig cfg = gradcheck::tiny_config(true, true, 3);
  PctModel m(cfg);
  m.initialize(5);
  const std::vector<Sample> batch = gradcheck::tiny_batch(cfg, 6, 6);
  const LossBreakdown l = m.loss(pointers(batch), false);
  const std::vector<Prediction> preds = m.predict(pointers(batch));
  double clb_sum = 0, box_sum = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    clb_sum += clb::clb_loss(preds[i].trace, batch[i].gt->location(), cfg.boost).total;
    box_sum += boxhead::box_loss(preds[i].box, *batch[i].gt).total();
  }
  const double n = static_cast<double>(batch.size());
  CHECK(std::abs(l.clb - clb_sum / n) < 1e-12);
  CHECK(std::abs(l.box - box_sum / n) < 1e-12);
  CHECK(std::abs(l.total - (clb_sum + box_sum) / n) < 1e-12);
  CHECK(l.stage_psi.size() == 3);
}

TEST_CASE("train_step") {
  const ModelConfig cfg = gradcheck::tiny_config(true, true, 3);
  const std::vector<Sample> batch = gradcheck::tiny_batch(cfg, 32, 7);
  const auto ptrs = pointers(batch);

  SUBCASE("lr 0 computes the loss and leaves parameters") {
    PctModel m(cfg);
    m.initialize(1);
    const std::vector<Matrix> before = snapshot(m);
    engine::OptimizerState opt{0.0, 0.9, {}, 0};
    const LossBreakdown l = train_step(m, ptrs, opt);
    CHECK(l.total > 0);
    CHECK(std::isfinite(l.total));
    const std::vector<Matrix> after = snapshot(m);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
  }
}

TEST_CASE("loss decreases over 200 steps on a fixed synthetic batch") {
  const synth::SceneSpec spec;
  const ModelConfig cfg = ModelConfig::group("V");
  std::vector<Sample> batch;
  for (int i = 0; batch.size() < 32; ++i) {
    const synth::SceneFiles f = synth::as_files(synth::scene_at(spec, i));
    for (Sample& s : make_samples(f.calib, f.depth, f.rois, f.features, f.labels.objects, i, cfg))
      if (batch.size() < 32) batch.push_back(std::move(s));
  }
  PctModel m(cfg);
  m.initialize(2);
  engine::OptimizerState opt{1e-3, 0.9, {}, 0};
  const auto ptrs = pointers(batch);
  const double first = m.loss(ptrs, false).total;
  for (int i = 0; i < 200; ++i) train_step(m, ptrs, opt);
  const double last = m.loss(ptrs, false).total;
  MESSAGE("loss " << first << " -> " << last);
  CHECK(last < first);
}

TEST_CASE("zero context reproduces the context-free graph") {
  ModelConfig with = gradcheck::tiny_config(false, true, 3);
  ModelConfig without = with;
  without.use_gce = false;
  PctModel a(with), b(without);
  a.initialize(9);
  b.initialize(9);
  for (engine::Parameter* p : a.encoder().parameters()) p->value.setZero();
  std::vector<Sample> batch = gradcheck::tiny_batch(with, 4, 10);
  std::vector<Sample> plain = batch;
  for (Sample& s : plain) s.crop.resize(0);
  CHECK(a.loss(pointers(batch), false).total == b.loss(pointers(plain), false).total);
}

TEST_CASE("end-to-end gradient") {
  const ModelConfig cfg = gradcheck::tiny_config(true, true, 3);
  PctModel m(cfg);
  m.initialize(11);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (engine::Parameter* p : m.parameters())
    if (p->value.cols() == 1)
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value(i) = normal(rng);
  CHECK(gradcheck::check_model(m, gradcheck::tiny_batch(cfg, 3, 13)) < 1e-4);
}

TEST_CASE("checkpoint round trip and determinism") {
  const ModelConfig cfg = gradcheck::tiny_config(true, true, 2);
  const std::vector<Sample> samples = gradcheck::tiny_batch(cfg, 40, 14);
  TrainOptions opts;
  opts.epochs = 2;
  opts.batch = 8;
  auto trained = [&] {
    PctModel m(cfg);
    m.initialize(opts.seed);
    train(m, samples, opts);
    return m;
  };
  PctModel a = trained(), b = trained();
  const std::string bytes = a.save({{"note", "t"}});
  CHECK(bytes == b.save({{"note", "t"}}));
  PctModel c = PctModel::load(bytes);
  CHECK(c.save({{"note", "t"}}) == bytes);
  const auto pa = predict_all(a, samples, 7);
  const auto pc = predict_all(c, samples);
  for (std::size_t i = 0; i < samples.size(); ++i) CHECK(pa[i].box.center == pc[i].box.center);
  CHECK_THROWS(PctModel::load(bytes.substr(0, bytes.size() / 2)));
}

TEST_CASE("samples from a synthetic scene") {
  synth::SceneSpec spec;
  spec.feature_channels = 16;
  const synth::Scene scene = synth::scene_at(spec, 3);
  ModelConfig cfg = ModelConfig::group("V");
  cfg.encoder.in_channels = 16;
  const synth::SceneFiles files = synth::as_files(scene);
  const std::vector<Sample> s =
      make_samples(files.calib, files.depth, files.rois, files.features, files.labels.objects, 3, cfg);
  CHECK(!s.empty());
  CHECK(s.size() <= files.rois.size());
  for (const Sample& x : s) {
    CHECK(x.scene == 3);
    CHECK(x.patch.size == cfg.trunk.patch_size);
    CHECK(x.crop.size() == 16 * 256);
    REQUIRE(x.gt.has_value());
    const int gi = files.rois[x.roi_index].gt_index;
    CHECK(x.gt->z == files.labels.objects[gi].z);
  }
  cfg.encoder.in_channels = 8;
  CHECK_THROWS_AS(make_samples(files.calib, files.depth, files.rois, files.features, files.labels.objects, 3, cfg),
                  ShapeError);
}

TEST_CASE("detection records") {
  const ModelConfig cfg = gradcheck::tiny_config(true, true, 2);
  PctModel m(cfg);
  m.initialize(1);
  const std::vector<Sample> batch = gradcheck::tiny_batch(cfg, 2, 2);
  const std::vector<Prediction> preds = m.predict(pointers(batch));
  const dataio::LabelRecord r = detection_record(batch[0], preds[0]);
  CHECK(r.type == "Car");
  CHECK(r.left == batch[0].roi.left);
  CHECK(r.score == batch[0].roi.score);
  CHECK(r.x == preds[0].box.center.x());
  CHECK(r.l == preds[0].box.dims(2));
  const double err = mean_center_error(batch, preds);
  const double ref = 0.5 * ((preds[0].box.center - batch[0].gt->location()).norm() +
                            (preds[1].box.center - batch[1].gt->location()).norm());
  CHECK(std::abs(err - ref) < 1e-12);
}
