#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "pct/cli.hpp"
#include "pct/dataio.hpp"

using namespace pct;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

const fs::path& root() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / "pct_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string at(const std::string& rel) { return (root() / rel).string(); }

const std::string& dataset() {
  static const std::string data = [] {
    const std::string d = at("data");
    const Result r = run({"synth", "--out", d, "--scenes", "20", "--seed", "5"});
    REQUIRE(r.code == 0);
    return d;
  }();
  return data;
}

std::vector<engine::Matrix> params_of(model::PctModel& m) {
  std::vector<engine::Matrix> out;
  for (engine::Parameter* p : m.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"bogus"}).code == 2);
  CHECK(run({"train", "--out", at("x")}).code == 2);
  CHECK(run({"synth", "--out", at("y"), "--scenes", "abc"}).code == 2);
  CHECK(run({"train", "--data", at("missing"), "--out", at("x")}).code == 2);
  const Result r = run({"train", "--data", dataset(), "--out", at("x"), "--clb", "off", "--confidence", "on"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--confidence") != std::string::npos);
  CHECK(run({"train", "--data", dataset(), "--out", at("x"), "--gce", "maybe"}).code == 2);
  CHECK(run({"train", "--data", dataset(), "--out", at("x"), "--group", "VII"}).code == 2);
  CHECK(run({"eval", "--data", dataset(), "--det", at("none"), "--out", at("x"), "--metric", "2d"}).code == 2);
  CHECK(run({"eval", "--data", dataset(), "--det", at("none"), "--out", at("x"), "--split", "test"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("synth writes a readable dataset") {
  const synth::Dataset ds = synth::open_dataset(dataset());
  CHECK(ds.n_scenes == 20);
  CHECK(ds.spec.seed == 5);
  CHECK(fs::exists(fs::path(dataset()) / "feat" / "000019.fgrd"));
}

TEST_CASE("train, infer, eval and probe") {
  const std::string out = at("run");
  Result r = run({"train", "--data", dataset(), "--out", out, "--group", "V", "--epochs", "2", "--batch", "16",
                  "--split", "train"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(fs::path(out) / "model.pctw"));
  const std::string curve = dataio::read_file((fs::path(out) / "loss_curve.csv").string());
  CHECK(curve.rfind("epoch,loss,clb,box\n1,", 0) == 0);
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 3);
  const nlohmann::json report = nlohmann::json::parse(dataio::read_file((fs::path(out) / "train_report.json").string()));
  CHECK(report["epochs"] == 2);
  CHECK(report["model"]["use_gce"] == true);

  const std::string inf = at("infer");
  r = run({"infer", "--data", dataset(), "--ckpt", out + "/model.pctw", "--out", inf});
  REQUIRE(r.code == 0);
  for (int s : {4, 9, 14, 19}) CHECK(fs::exists(fs::path(inf) / "det" / (synth::scene_stem(s) + ".txt")));
  CHECK(!fs::exists(fs::path(inf) / "det" / "000000.txt"));
  const std::string stages = dataio::read_file((fs::path(inf) / "stage_errors.csv").string());
  CHECK(stages.rfind("stage,axis,error\n", 0) == 0);
  CHECK(stages.find("\nloc.3,z,") != std::string::npos);
  CHECK(stages.find("\nloc.4,x,") != std::string::npos);
  const std::vector<dataio::LabelRecord> dets =
      dataio::parse_detections(dataio::read_file((fs::path(inf) / "det" / "000004.txt").string()));
  for (const dataio::LabelRecord& d : dets) CHECK(d.type == "Car");

  const std::string ev = at("eval");
  r = run({"eval", "--data", dataset(), "--det", inf + "/det", "--out", ev});
  REQUIRE(r.code == 0);
  const nlohmann::json js = nlohmann::json::parse(dataio::read_file((fs::path(ev) / "eval_report.json").string()));
  CHECK(js.size() == 6);
  for (const auto& e : js) {
    CHECK(e["threshold"] == 0.7);
    CHECK(e["ap_r40"].get<double>() >= 0);
  }
  CHECK(r.out.find("AP_3D") != std::string::npos);

  const std::string pr = at("probe");
  r = run({"probe", "--data", dataset(), "--det", inf + "/det", "--out", pr, "--iou", "0.5"});
  REQUIRE(r.code == 0);
  CHECK(dataio::read_file((fs::path(pr) / "probe.md").string()).find("| location(xyz) |") != std::string::npos);
  const std::string p2 = at("probe_noisy");
  REQUIRE(run({"probe", "--data", dataset(), "--out", p2, "--split", "all"}).code == 0);
  CHECK(fs::exists(fs::path(p2) / "probe.csv"));
}

TEST_CASE("ground truth as detections scores 100") {
  const std::string det = at("gt_det");
  fs::create_directories(det);
  for (int s = 0; s < 20; ++s) {
    const std::string stem = synth::scene_stem(s);
    dataio::LabelFile labels =
        dataio::parse_labels(dataio::read_file((fs::path(dataset()) / "label" / (stem + ".txt")).string()));
    for (dataio::LabelRecord& r : labels.objects) r.score = 1.0;
    dataio::write_file((fs::path(det) / (stem + ".txt")).string(), dataio::write_detections(labels.objects));
  }
  for (const char* iou : {"0.5", "0.7"}) {
    const std::string ev = at(std::string("gt_eval_") + iou);
    REQUIRE(run({"eval", "--data", dataset(), "--det", det, "--out", ev, "--split", "all", "--iou", iou}).code == 0);
    const nlohmann::json js = nlohmann::json::parse(dataio::read_file((fs::path(ev) / "eval_report.json").string()));
    for (const auto& e : js) {
      CHECK(e["ap_r40"] == 100.0);
      CHECK(e["ap_r11"] == 100.0);
    }
  }
}

TEST_CASE("zero epochs saves the initialization") {
  const std::string out = at("zero");
  REQUIRE(run({"train", "--data", dataset(), "--out", out, "--group", "III", "--epochs", "0", "--seed", "8"}).code == 0);
  model::PctModel loaded = model::PctModel::load(dataio::read_file(out + "/model.pctw"));
  model::ModelConfig cfg = model::ModelConfig::group("III");
  model::PctModel fresh(cfg);
  fresh.initialize(8);
  CHECK(nlohmann::json(loaded.config()) == nlohmann::json(cfg));
  const auto a = params_of(loaded), b = params_of(fresh);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("training is deterministic") {
  const std::vector<std::string> base{"train", "--data", dataset(), "--group", "IV", "--epochs", "1", "--batch", "8"};
  std::vector<std::string> a = base, b = base;
  a.insert(a.end(), {"--out", at("det_a")});
  b.insert(b.end(), {"--out", at("det_b")});
  REQUIRE(run(a).code == 0);
  REQUIRE(run(b).code == 0);
  CHECK(dataio::read_file(at("det_a/model.pctw")) == dataio::read_file(at("det_b/model.pctw")));
  CHECK(dataio::read_file(at("det_a/loss_curve.csv")) == dataio::read_file(at("det_b/loss_curve.csv")));
  CHECK(dataio::read_file(at("det_a/train_report.json")) == dataio::read_file(at("det_b/train_report.json")));
}

TEST_CASE("gradcheck subcommand") {
  const Result r = run({"gradcheck", "--out", at("grad")});
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(fs::exists(fs::path(at("grad")) / "gradcheck.json"));
}
