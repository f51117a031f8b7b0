#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "pct/boxhead.hpp"

using namespace pct;
using namespace pct::boxhead;

namespace {

FeatureGrid random_grid(int c, int h, int w, int stride, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  FeatureGrid g(c, h, w, stride);
  for (Eigen::Index i = 0; i < g.values.size(); ++i) g.values(i) = normal(rng);
  return g;
}

// Piecewise-linear interpolation through knots (k + 0.5, v[k]) with constant
// extension past the first and last knot.
double interp1(const std::vector<double>& v, double p) {
  const int n = static_cast<int>(v.size());
  if (p <= 0.5) return v.front();
  if (p >= n - 0.5) return v.back();
  const int k = static_cast<int>(std::floor(p - 0.5));
  const double t = p - (k + 0.5);
  return v[k] + t * (v[k + 1] - v[k]);
}

// Dense 10x upsampling done separably: rows first, then columns. Entry
// (a, b) is the value at grid location (b / 10, a / 10).
std::vector<std::vector<double>> upsample10(const FeatureGrid& g, int c) {
  std::vector<std::vector<double>> rows(g.height);
  for (int y = 0; y < g.height; ++y) {
    std::vector<double> v(g.width);
    for (int x = 0; x < g.width; ++x) v[x] = g.at(c, y, x);
    for (int b = 0; b <= 10 * g.width; ++b) rows[y].push_back(interp1(v, b / 10.0));
  }
  std::vector<std::vector<double>> dense(10 * g.height + 1, std::vector<double>(10 * g.width + 1));
  for (int b = 0; b <= 10 * g.width; ++b) {
    std::vector<double> col(g.height);
    for (int y = 0; y < g.height; ++y) col[y] = rows[y][b];
    for (int a = 0; a <= 10 * g.height; ++a) dense[a][b] = interp1(col, a / 10.0);
  }
  return dense;
}

clb::TrunkConfig small_trunk() {
  clb::TrunkConfig t;
  t.patch_size = 8;
  t.channels = {4, 4, 6};
  return t;
}

CoordinatePatch random_patch(int k, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  CoordinatePatch p(k);
  for (int c = 0; c < k * k; ++c) {
    p.valid(c) = true;
    for (int a = 0; a < 3; ++a) p.points(c, a) = 0.5 * normal(rng);
  }
  return p;
}

Box3D some_box() {
  Box3D b;
  b.x = 1.5;
  b.y = 1.7;
  b.z = 22;
  b.h = 1.5;
  b.w = 1.6;
  b.l = 4.1;
  b.theta = std::numbers::pi / 6;
  return b;
}

BoxPrediction exact_prediction(const Box3D& b) {
  BoxPrediction p;
  p.center = b.location();
  p.dims = Eigen::Vector3d(b.h, b.w, b.l);
  p.sin_theta = std::sin(b.theta);
  p.cos_theta = std::cos(b.theta);
  return p;
}

}  // namespace

TEST_CASE("roi_align") {
  std::mt19937_64 rng(1);
  SUBCASE("constant grid") {
    FeatureGrid g(3, 10, 12, 8);
    g.values.setConstant(2.5);
    const Eigen::VectorXd out = roi_align(g, RoI2D{13, 7, 80, 66, 0, 1});
    CHECK(out.size() == 3 * 256);
    CHECK((out.array() == 2.5).all());
  }
  SUBCASE("aligned cells") {
    const FeatureGrid g = random_grid(2, 6, 6, 1, rng);
    const Eigen::VectorXd out = roi_align(g, RoI2D{0, 0, 6, 6, 0, 1}, 6);
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) CHECK(out(c * 36 + y * 6 + x) == g.at(c, y, x));
  }
  SUBCASE("dense bilinear oracle") {
    const FeatureGrid g = random_grid(2, 7, 9, 4, rng);
    // With stride 4, left 1.0 cells, top -0.4 cells and 0.2-cell bins, every
    // sample lies on the 0.1-cell lattice; the rows above the grid clamp.
    const RoI2D roi{4.0, -1.6, 4.0 + 4 * 3.2, -1.6 + 4 * 3.2, 0, 1};
    const Eigen::VectorXd out = roi_align(g, roi, 16);
    double worst = 0;
    for (int c = 0; c < 2; ++c) {
      const auto dense = upsample10(g, c);
      for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
          const int b = static_cast<int>(std::lround(10 * (1.0 + (j + 0.5) * 0.2)));
          const int a10 = static_cast<int>(std::lround(10 * (-0.4 + (i + 0.5) * 0.2)));
          const int a = std::max(0, a10);
          worst = std::max(worst, std::abs(out(c * 256 + i * 16 + j) - dense[a][b]));
        }
    }
    CHECK(worst < 1e-10);
  }
  SUBCASE("translation by whole strides") {
    const FeatureGrid g = random_grid(3, 12, 14, 8, rng);
    FeatureGrid moved(3, 12, 14, 8);
    const int dx = 2, dy = 1;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 14; ++x) moved.at(c, y, x) = g.at(c, std::max(0, y - dy), std::max(0, x - dx));
    const RoI2D roi{20.5, 12.25, 60, 55, 0, 1};
    const RoI2D shifted{roi.left + 8 * dx, roi.top + 8 * dy, roi.right + 8 * dx, roi.bottom + 8 * dy, 0, 1};
    const Eigen::VectorXd a = roi_align(g, roi), b = roi_align(moved, shifted);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK_THROWS_AS(roi_align(random_grid(1, 4, 4, 8, rng), RoI2D{5, 5, 5, 9, 0, 1}), DegenerateRoiError);
}

TEST_CASE("gce encoder") {
  EncoderConfig cfg;
  Network enc = make_encoder(cfg);
  CHECK(enc.output_shape().size() == 64);
  std::mt19937_64 rng(3);
  enc.initialize(rng);
  CHECK(gce_encode(enc, Eigen::VectorXd::Zero(64 * 256)).isZero(0));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd crop(64 * 256);
  for (Eigen::Index i = 0; i < crop.size(); ++i) crop(i) = normal(rng);
  const Eigen::VectorXd v = gce_encode(enc, crop);
  CHECK(v.size() == 64);
  CHECK(v.allFinite());
  CHECK_THROWS_AS(gce_encode(enc, Eigen::VectorXd::Zero(63 * 256)), ShapeError);

  SUBCASE("finite differences") {
    EncoderConfig tiny{2, 3, 16};
    Network small = make_encoder(tiny);
    small.initialize(rng);
    std::normal_distribution<double> jitter(0.0, 0.1);
    for (engine::Parameter* p : small.parameters())
      if (p->value.cols() == 1)
        for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value(i) = jitter(rng);
    engine::Tensor x(small.input_shape(), 2);
    for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values(i) = normal(rng);
    const engine::LossFn loss = [](const engine::Tensor& y, engine::Tensor* g) {
      if (g) *g = engine::Tensor(y.shape, engine::Matrix(y.values.array() + 0.3));
      return 0.5 * y.values.squaredNorm() + 0.3 * y.values.sum();
    };
    CHECK(engine::grad_check(small, x, loss, 1e-4, 1e-4) < 1e-4);
  }
}

TEST_CASE("fuse") {
  const Eigen::VectorXd a = Eigen::VectorXd::LinSpaced(64, 0, 63);
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(64, -1);
  const Eigen::VectorXd f = fuse(a, b);
  CHECK(f.size() == 128);
  CHECK(f.head(64) == a);
  CHECK(f.tail(64) == b);
}

TEST_CASE("box_forward") {
  std::mt19937_64 rng(4);
  BoxNetwork g = BoxNetwork::make(small_trunk(), 5, 7);
  g.initialize(rng);
  const CoordinatePatch p = random_patch(8, rng);
  const Eigen::Vector3d est(1, 1.6, 25), anchor(1.53, 1.63, 3.88);

  SUBCASE("deterministic and positive dims") {
    Eigen::VectorXd ctx(5);
    ctx << 0.1, -0.2, 0.3, 0.4, -0.5;
    const BoxPrediction a = box_forward(g, p, est, ctx, anchor);
    const BoxPrediction b = box_forward(g, p, est, ctx, anchor);
    CHECK(a.center == b.center);
    CHECK(a.dims == b.dims);
    CHECK((a.dims.array() > 0).all());
    CHECK(a.center == est + a.center_residual);
  }
  SUBCASE("absent context equals zero context") {
    const BoxPrediction a = box_forward(g, p, est, std::nullopt, anchor);
    const BoxPrediction b = box_forward(g, p, est, Eigen::VectorXd::Zero(5), anchor);
    CHECK(a.center == b.center);
    CHECK(a.sin_theta == b.sin_theta);
    CHECK_THROWS_AS(box_forward(g, p, est, Eigen::VectorXd::Zero(4), anchor), ShapeError);
  }
  SUBCASE("zero head") {
    for (engine::Parameter* q : g.head.parameters()) q->value.setZero();
    const BoxPrediction z = box_forward(g, p, est, std::nullopt, anchor);
    CHECK(z.center == est);
    CHECK(z.dims == anchor);
    CHECK(z.theta() == 0);
    CHECK(z.box().theta == 0);
  }
  SUBCASE("dims stay positive for extreme raw outputs") {
    Eigen::VectorXd raw(8);
    raw << 0, 0, 0, -30, -50, 20, 0.2, -0.9;
    const BoxPrediction d = decode_box(raw, est, anchor);
    CHECK((d.dims.array() > 0).all());
  }
}

TEST_CASE("box_loss") {
  const Box3D gt = some_box();
  CHECK(box_loss(exact_prediction(gt), gt).total() == 0);
  CHECK(box_loss_grad(exact_prediction(gt), gt).isZero(0));

  // Heading flipped by pi: sin error -1, cos error -sqrt 3, so the
  // orientation term is 0.5 * 1^2 + (sqrt 3 - 0.5).
  Box3D flipped = gt;
  flipped.theta = gt.theta + std::numbers::pi;
  const BoxLossTerms t = box_loss(exact_prediction(flipped), gt);
  CHECK(t.center == 0);
  CHECK(std::abs(t.dims) < 1e-15);
  CHECK(t.orientation == doctest::Approx(0.5 + std::sqrt(3.0) - 0.5).epsilon(1e-12));

  Box3D wrapped = gt;
  wrapped.theta = gt.theta + 2 * std::numbers::pi;
  BoxPrediction off = exact_prediction(gt);
  off.center += Eigen::Vector3d(0.3, -2, 0.1);
  off.sin_theta += 0.2;
  CHECK(box_loss(off, wrapped).total() == doctest::Approx(box_loss(off, gt).total()).epsilon(1e-12));
  CHECK(box_loss(off, gt).center == doctest::Approx(0.045 + 1.5 + 0.005).epsilon(1e-12));
}

TEST_CASE("box_loss_grad matches finite differences of the raw outputs") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Vector3d est(1, 1.5, 20), anchor(1.53, 1.63, 3.88);
  const Box3D gt = some_box();
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd raw(8);
    for (int i = 0; i < 8; ++i) raw(i) = 0.7 * normal(rng);
    const auto g = box_loss_grad(decode_box(raw, est, anchor), gt);
    for (int i = 0; i < 8; ++i) {
      const double h = 1e-6;
      Eigen::VectorXd up = raw, down = raw;
      up(i) += h;
      down(i) -= h;
      const double num = (box_loss(decode_box(up, est, anchor), gt).total() -
                          box_loss(decode_box(down, est, anchor), gt).total()) /
                         (2 * h);
      CHECK(std::abs(g(i) - num) < 1e-6);
    }
  }
}
