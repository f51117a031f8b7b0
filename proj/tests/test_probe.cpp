#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "pct/probe.hpp"
#include "pct/synth.hpp"

using namespace pct;
using namespace pct::probe;

namespace {

Box3D box(double x, double y, double z, double theta = 0.3) {
  Box3D b;
  b.x = x;
  b.y = y;
  b.z = z;
  b.h = 1.5;
  b.w = 1.6;
  b.l = 3.9;
  b.theta = theta;
  b.score = 0.8;
  return b;
}

bool same(const Box3D& a, const Box3D& b) {
  return a.x == b.x && a.y == b.y && a.z == b.z && a.h == b.h && a.w == b.w && a.l == b.l && a.theta == b.theta &&
         a.score == b.score;
}

// Ground-truth frames from synthetic scenes with one noisy detection per object.
std::vector<eval::FrameAnnotations> noisy_frames(int n, const NoiseSpec& noise, std::uint64_t seed) {
  const synth::SceneSpec spec;
  std::mt19937_64 rng(seed);
  std::vector<eval::FrameAnnotations> out;
  for (int i = 0; i < n; ++i) {
    dataio::LabelFile lf;
    lf.objects = synth::scene_at(spec, i).labels;
    eval::FrameAnnotations f = eval::make_frame(lf, {}, 0);
    f.dets = noisy_detections(f.gts, noise, rng);
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

TEST_CASE("assign is greedy by BEV IoU and one to one") {
  const std::vector<Box3D> gts{box(0, 1.6, 20), box(5, 1.6, 20)};
  std::vector<Box3D> dets{box(0.3, 1.6, 20.2), box(0, 1.6, 20), box(30, 1.6, 20)};
  CHECK(assign(dets, gts) == std::vector<int>{-1, 0, -1});
  dets[0] = box(5.2, 1.6, 20);
  CHECK(assign(dets, gts) == std::vector<int>{1, 0, -1});
  CHECK(assign(dets, gts, 0.999) == std::vector<int>{-1, 0, -1});
  CHECK(assign({}, gts).empty());
  CHECK(assign(dets, {}) == std::vector<int>{-1, -1, -1});
}

TEST_CASE("substitute examples") {
  const std::vector<Box3D> gts{box(0, 1.6, 20, 0.5)};
  Box3D off = gts[0];
  off.x += 0.4;
  off.y -= 0.1;
  off.z += 1.2;
  off.score = 0.3;
  const std::vector<int> a{0, -1};
  const std::vector<Box3D> dets{off, box(9, 1.7, 33, -1.0)};

  std::vector<Box3D> loc = substitute(dets, gts, Factor::Location, a);
  Box3D expect = gts[0];
  expect.score = 0.3;
  CHECK(same(loc[0], expect));
  CHECK(same(loc[1], dets[1]));

  const std::vector<Box3D> z = substitute(dets, gts, Factor::Z, a);
  Box3D zonly = off;
  zonly.z = gts[0].z;
  CHECK(same(z[0], zonly));

  Box3D wrong = box(1, 1.8, 22, -0.4);
  wrong.h = 1.2;
  wrong.w = 1.9;
  wrong.l = 4.5;
  const std::vector<Box3D> one{wrong};
  const Box3D d = substitute(one, gts, Factor::Dimension, {0})[0];
  CHECK((d.h == gts[0].h && d.w == gts[0].w && d.l == gts[0].l));
  CHECK((d.x == wrong.x && d.theta == wrong.theta));
  const Box3D r = substitute(one, gts, Factor::Rotation, {0})[0];
  CHECK(r.theta == gts[0].theta);
  CHECK((r.x == wrong.x && r.h == wrong.h));
  CHECK_THROWS_AS(substitute(dets, gts, Factor::X, {0}), UsageError);
}

TEST_CASE("substitution properties") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Box3D> gts, dets;
    for (int k = 0; k < 4; ++k) {
      gts.push_back(box(6 * k + u(rng), 1.6 + 0.1 * u(rng), 20 + 5 * u(rng), u(rng) * 3));
      Box3D d = gts.back();
      d.x += 0.5 * u(rng);
      d.y += 0.2 * u(rng);
      d.z += 1.0 * u(rng);
      d.l *= 1 + 0.1 * u(rng);
      d.theta += 0.2 * u(rng);
      d.score = 0.5 + 0.5 * u(rng);
      dets.push_back(d);
    }
    dets.push_back(box(100, 1.6, 20));
    const std::vector<int> a = assign(dets, gts);
    for (Factor f : kAllFactors) {
      const std::vector<Box3D> once = substitute(dets, gts, f, a);
      const std::vector<Box3D> twice = substitute(once, gts, f, a);
      for (std::size_t i = 0; i < dets.size(); ++i) {
        CHECK(same(once[i], twice[i]));
        CHECK(once[i].score == dets[i].score);
      }
    }
    const std::vector<Box3D> loc = substitute(dets, gts, Factor::Location, a);
    const std::vector<Box3D> xyz = substitute(
        substitute(substitute(dets, gts, Factor::Z, a), gts, Factor::Y, a), gts, Factor::X, a);
    for (std::size_t i = 0; i < dets.size(); ++i) CHECK(same(loc[i], xyz[i]));
    CHECK(a.back() == -1);
  }
}

TEST_CASE("probe report") {
  NoiseSpec small;
  small.sigma_x = 0.1;
  small.sigma_y = 0.1;
  small.sigma_z = 0.3;
  const std::vector<eval::FrameAnnotations> frames = noisy_frames(40, small, 7);
  const ProbeTable t = probe_report(frames, 0.7);
  REQUIRE(t.rows.size() == 7);
  CHECK(t.rows[0].name == "Baseline");
  CHECK(t.rows[6].name == "location(xyz)");

  SUBCASE("baseline row equals evaluate") {
    using D = dataio::Difficulty;
    const std::pair<D, const ProbeCell*> cells[] = {
        {D::Moderate, &t.rows[0].moderate}, {D::Easy, &t.rows[0].easy}, {D::Hard, &t.rows[0].hard}};
    for (const auto& [d, c] : cells) {
      CHECK(c->ap_3d == *eval::evaluate(frames, d, eval::Metric::Box3D, 0.7).ap_r40);
      CHECK(c->ap_bev == *eval::evaluate(frames, d, eval::Metric::Bev, 0.7).ap_r40);
    }
  }

  SUBCASE("y substitution leaves BEV untouched") {
    for (const ProbeCell* c : {&t.rows[4].moderate, &t.rows[4].easy, &t.rows[4].hard}) {
      const ProbeCell* base = c == &t.rows[4].moderate ? &t.rows[0].moderate
                              : c == &t.rows[4].easy   ? &t.rows[0].easy
                                                       : &t.rows[0].hard;
      CHECK(c->ap_bev == base->ap_bev);
    }
  }

  SUBCASE("substituting every factor gives 100") {
    std::vector<eval::FrameAnnotations> all = frames;
    for (eval::FrameAnnotations& f : all) {
      std::vector<Box3D> dets, gts;
      for (const eval::Detection& d : f.dets) dets.push_back(d.box);
      for (const eval::GroundTruth& g : f.gts) gts.push_back(g.box);
      const std::vector<int> a = assign(dets, gts);
      for (int v : a) REQUIRE(v >= 0);
      for (Factor fac : {Factor::Dimension, Factor::Rotation, Factor::Location}) dets = substitute(dets, gts, fac, a);
      for (std::size_t k = 0; k < dets.size(); ++k) f.dets[k].box = dets[k];
    }
    for (auto d : {dataio::Difficulty::Easy, dataio::Difficulty::Moderate, dataio::Difficulty::Hard}) {
      CHECK(*eval::evaluate(all, d, eval::Metric::Box3D, 0.7).ap_r40 == 100.0);
      CHECK(*eval::evaluate(all, d, eval::Metric::Bev, 0.7).ap_r40 == 100.0);
    }
  }

  SUBCASE("formats") {
    const std::string md = t.markdown();
    CHECK(md.rfind("| Replaced | Mod. AP3D/APBEV | Easy AP3D/APBEV | Hard AP3D/APBEV |\n|---|---|---|---|\n", 0) == 0);
    CHECK(md.find("| y | ") != std::string::npos);
    CHECK(md.find("IoU 0.70, r40") != std::string::npos);
    const std::string csv = t.csv();
    CHECK(csv.rfind("factor,mod_ap3d,mod_apbev,easy_ap3d,easy_apbev,hard_ap3d,hard_apbev\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
    CHECK(csv.find("\nBaseline,") != std::string::npos);
  }
}

TEST_CASE("center noise dominates the probe ordering") {
  const std::vector<eval::FrameAnnotations> frames = noisy_frames(60, NoiseSpec{}, 11);
  const ProbeTable t = probe_report(frames, 0.7);
  const double base = t.rows[0].moderate.ap_3d;
  const double rot = t.rows[2].moderate.ap_3d;
  const double z = t.rows[5].moderate.ap_3d;
  const double loc = t.rows[6].moderate.ap_3d;
  MESSAGE("base " << base << " rot " << rot << " z " << z << " loc " << loc);
  CHECK(loc > z);
  CHECK(z > base);
  CHECK(std::abs(rot - base) <= 2.0);
  for (const ProbeRow& r : t.rows) CHECK(r.moderate.ap_3d >= base - 1e-9);
}
