#include "pct/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>

#include "pct/eval.hpp"
#include "pct/gradcheck.hpp"
#include "pct/parallel.hpp"
#include "pct/probe.hpp"

namespace pct::cli {

namespace fs = std::filesystem;

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "all") return Split::All;
  throw UsageError("unknown split '" + std::string(name) + "' (expected train, val or all)");
}

bool in_split(int scene, Split split) {
  switch (split) {
    case Split::Train: return !synth::is_validation(scene);
    case Split::Val: return synth::is_validation(scene);
    case Split::All: return true;
  }
  return false;
}

namespace {

std::vector<int> split_scenes(int n, Split split) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i) {
    if (in_split(i, split)) out.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<model::Sample> load_samples(const synth::Dataset& ds, Split split, const model::ModelConfig& cfg) {
  const std::vector<int> scenes = split_scenes(ds.n_scenes, split);
  std::vector<std::vector<model::Sample>> per_scene(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), [&](int k) {
    const synth::SceneFiles f = synth::load_scene(ds, scenes[k]);
    per_scene[k] = model::make_samples(f.calib, f.depth, f.rois, f.features, f.labels.objects, scenes[k], cfg);
  });
  std::vector<model::Sample> out;
  for (auto& v : per_scene) {
    for (auto& s : v) out.push_back(std::move(s));
  }
  return out;
}

namespace {

struct Common {
  std::string data;
  std::string out;
  std::string ckpt;
  std::string det;
  std::string split{"val"};
  std::uint64_t seed{42};
};

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
}

fs::path output_dir(const std::string& out) {
  require(out, "--out");
  fs::create_directories(out);
  return fs::path(out);
}

bool parse_toggle(const std::string& v, const char* flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw UsageError(std::string(flag) + " expects on or off, got '" + v + "'");
}

std::string loss_curve_csv(const std::vector<model::EpochStats>& curve) {
  std::ostringstream o;
  o.precision(17);
  o << "epoch,loss,clb,box\n";
  for (const model::EpochStats& e : curve) o << e.epoch << ',' << e.loss << ',' << e.clb << ',' << e.box << '\n';
  return o.str();
}

std::vector<eval::FrameAnnotations> load_frames(const synth::Dataset& ds, const std::vector<int>& scenes,
                                                const std::string& det_dir, int class_id) {
  std::vector<eval::FrameAnnotations> frames(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), [&](int k) {
    const std::string stem = synth::scene_stem(scenes[k]);
    const dataio::LabelFile labels =
        dataio::parse_labels(dataio::read_file((fs::path(ds.root) / "label" / (stem + ".txt")).string()));
    std::vector<dataio::LabelRecord> dets;
    if (!det_dir.empty()) {
      const fs::path p = fs::path(det_dir) / (stem + ".txt");
      if (fs::exists(p)) dets = dataio::parse_detections(dataio::read_file(p.string()));
    }
    frames[k] = eval::make_frame(labels, dets, class_id);
  });
  return frames;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"pct: coordinate-patch monocular 3D detection"};
  app.require_subcommand(1);
  Common c;

  // synth
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  int n_scenes = 100;
  synth::SceneSpec spec;
  synth_cmd->add_option("--out", c.out, "dataset directory")->required();
  synth_cmd->add_option("--scenes", n_scenes, "number of scenes");
  synth_cmd->add_option("--seed", spec.seed, "generator seed");
  synth_cmd->add_option("--depth-noise", spec.depth_noise, "per-pixel depth noise sigma, meters");
  synth_cmd->add_option("--depth-bias", spec.depth_bias, "per-object depth bias sigma, fraction of depth");
  synth_cmd->add_option("--roi-jitter", spec.roi_jitter, "RoI edge jitter sigma, pixels");

  // train
  CLI::App* train_cmd = app.add_subcommand("train", "train the detector end to end");
  std::string group = "V";
  int stages = -1;
  double lambda_s = -1;
  std::string clb_toggle, conf_toggle, gce_toggle;
  model::TrainOptions topts;
  int patch = 0;
  train_cmd->add_option("--data", c.data, "dataset directory")->required();
  train_cmd->add_option("--out", c.out, "output directory")->required();
  train_cmd->add_option("--ckpt", c.ckpt, "checkpoint path (default <out>/model.pctw)");
  train_cmd->add_option("--group", group, "ablation preset I..V");
  train_cmd->add_option("--stages", stages, "boosting stages T");
  train_cmd->add_option("--lambda-s", lambda_s, "uncertainty penalty weight");
  train_cmd->add_option("--clb", clb_toggle, "on|off");
  train_cmd->add_option("--confidence", conf_toggle, "on|off");
  train_cmd->add_option("--gce", gce_toggle, "on|off");
  train_cmd->add_option("--patch", patch, "patch size K");
  train_cmd->add_option("--lr", topts.learning_rate, "learning rate");
  train_cmd->add_option("--epochs", topts.epochs, "epochs");
  train_cmd->add_option("--batch", topts.batch, "batch size");
  train_cmd->add_option("--seed", c.seed, "initialization and shuffling seed");
  std::string train_split = "train";
  train_cmd->add_option("--split", train_split, "train|val|all");

  // infer
  CLI::App* infer_cmd = app.add_subcommand("infer", "run the detector over a dataset split");
  infer_cmd->add_option("--data", c.data, "dataset directory")->required();
  infer_cmd->add_option("--ckpt", c.ckpt, "checkpoint")->required();
  infer_cmd->add_option("--out", c.out, "output directory")->required();
  infer_cmd->add_option("--split", c.split, "train|val|all");

  // eval
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate detections against labels");
  std::string metric = "all", difficulty = "all", recall_mode = "r40";
  double iou = 0.7;
  eval_cmd->add_option("--data", c.data, "dataset directory")->required();
  eval_cmd->add_option("--det", c.det, "detection directory")->required();
  eval_cmd->add_option("--out", c.out, "output directory")->required();
  eval_cmd->add_option("--split", c.split, "train|val|all");
  eval_cmd->add_option("--metric", metric, "3d|bev|all");
  eval_cmd->add_option("--iou", iou, "IoU threshold");
  eval_cmd->add_option("--difficulty", difficulty, "easy|moderate|hard|all");
  eval_cmd->add_option("--recall-mode", recall_mode, "r11|r40 (table only; the report holds both)");

  // probe
  CLI::App* probe_cmd = app.add_subcommand("probe", "ground-truth substitution study");
  probe_cmd->add_option("--data", c.data, "dataset directory")->required();
  probe_cmd->add_option("--det", c.det, "detection directory (default: noisy ground truth)");
  probe_cmd->add_option("--out", c.out, "output directory")->required();
  probe_cmd->add_option("--split", c.split, "train|val|all");
  probe_cmd->add_option("--iou", iou, "IoU threshold");
  probe_cmd->add_option("--recall-mode", recall_mode, "r11|r40");
  probe_cmd->add_option("--seed", c.seed, "seed for noisy ground truth");

  // gradcheck
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t grad_seed = 7;
  grad_cmd->add_option("--seed", grad_seed, "seed");
  grad_cmd->add_option("--out", c.out, "optional output directory for a JSON report");

  std::vector<const char*> argv{"pct"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) {
      synth::write_dataset(spec, n_scenes, c.out);
      out << "wrote " << n_scenes << " scenes to " << c.out << "\n";
      return 0;
    }

    if (*train_cmd) {
      model::ModelConfig cfg = model::ModelConfig::group(group);
      if (stages >= 0) {
        const bool conf = cfg.boost.use_confidence && stages > 0;
        cfg.boost = clb::BoostConfig::uniform(stages, cfg.boost.lambda_s, conf);
      }
      if (!clb_toggle.empty() && !parse_toggle(clb_toggle, "--clb")) {
        if (!conf_toggle.empty() && parse_toggle(conf_toggle, "--confidence")) {
          throw UsageError("--confidence on requires --clb on");
        }
        cfg.boost = clb::BoostConfig::uniform(0, cfg.boost.lambda_s, false);
      } else if (!clb_toggle.empty() && cfg.boost.stages == 0) {
        cfg.boost = clb::BoostConfig::uniform(3, cfg.boost.lambda_s, false);
      }
      if (!conf_toggle.empty()) cfg.boost.use_confidence = parse_toggle(conf_toggle, "--confidence");
      if (!gce_toggle.empty()) cfg.use_gce = parse_toggle(gce_toggle, "--gce");
      if (lambda_s >= 0) cfg.boost.lambda_s = lambda_s;
      if (patch > 0) cfg.trunk.patch_size = patch;
      cfg.validate();
      topts.seed = c.seed;
      const synth::Dataset ds = synth::open_dataset(c.data);
      if (cfg.use_gce) cfg.encoder.in_channels = ds.spec.feature_channels;
      const std::vector<model::Sample> samples = load_samples(ds, parse_split(train_split), cfg);
      model::PctModel m(cfg);
      m.initialize(c.seed);
      const std::vector<model::EpochStats> curve = model::train(m, samples, topts, [&](const model::EpochStats& e) {
        out << "epoch " << e.epoch << " loss " << e.loss << " (clb " << e.clb << ", box " << e.box << ")\n";
      });
      const fs::path dir = output_dir(c.out);
      const std::string ckpt = c.ckpt.empty() ? (dir / "model.pctw").string() : c.ckpt;
      const nlohmann::json run_meta{{"seed", c.seed},
                                    {"epochs", topts.epochs},
                                    {"batch", topts.batch},
                                    {"lr", topts.learning_rate},
                                    {"split", train_split},
                                    {"samples", samples.size()}};
      dataio::write_file(ckpt, m.save(run_meta));
      dataio::write_file((dir / "loss_curve.csv").string(), loss_curve_csv(curve));
      nlohmann::json report = run_meta;
      report["model"] = cfg;
      report["final_loss"] = curve.empty() ? nlohmann::json(nullptr) : nlohmann::json(curve.back().loss);
      dataio::write_file((dir / "train_report.json").string(), report.dump(2) + "\n");
      out << "wrote " << ckpt << "\n";
      return 0;
    }

    if (*infer_cmd) {
      model::PctModel m = model::PctModel::load(dataio::read_file(c.ckpt));
      const synth::Dataset ds = synth::open_dataset(c.data);
      const Split split = parse_split(c.split);
      const std::vector<model::Sample> samples = load_samples(ds, split, m.config());
      const std::vector<model::Prediction> preds = model::predict_all(m, samples);
      const fs::path dir = output_dir(c.out);
      fs::create_directories(dir / "det");
      std::map<int, std::vector<dataio::LabelRecord>> per_scene;
      for (int s : split_scenes(ds.n_scenes, split)) per_scene[s];
      std::vector<clb::BoostTrace> traces;
      std::vector<Eigen::Vector3d> gts, finals;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        per_scene[samples[i].scene].push_back(model::detection_record(samples[i], preds[i]));
        if (samples[i].gt) {
          traces.push_back(preds[i].trace);
          gts.push_back(samples[i].gt->location());
          finals.push_back(preds[i].box.center);
        }
      }
      for (const auto& [scene, dets] : per_scene) {
        dataio::write_file((dir / "det" / (synth::scene_stem(scene) + ".txt")).string(),
                           dataio::write_detections(dets));
      }
      const std::vector<clb::StageErrorRow> rows = clb::export_stage_errors(traces, gts, finals);
      dataio::write_file((dir / "stage_errors.csv").string(), clb::stage_errors_csv(rows));
      const nlohmann::json report{{"samples", samples.size()},
                                  {"mean_center_error", model::mean_center_error(samples, preds)},
                                  {"split", c.split}};
      dataio::write_file((dir / "infer_report.json").string(), report.dump(2) + "\n");
      out << "mean center error " << report["mean_center_error"].get<double>() << " m over " << samples.size()
          << " RoIs\n";
      return 0;
    }

    if (*eval_cmd) {
      const synth::Dataset ds = synth::open_dataset(c.data);
      const std::vector<eval::FrameAnnotations> frames =
          load_frames(ds, split_scenes(ds.n_scenes, parse_split(c.split)), c.det, 0);
      std::vector<eval::Metric> metrics;
      if (metric == "all") {
        metrics = {eval::Metric::Box3D, eval::Metric::Bev};
      } else {
        metrics = {eval::parse_metric(metric)};
      }
      std::vector<dataio::Difficulty> diffs;
      if (difficulty == "all") {
        diffs = {dataio::Difficulty::Easy, dataio::Difficulty::Moderate, dataio::Difficulty::Hard};
      } else {
        const dataio::Difficulty d = dataio::parse_difficulty(difficulty);
        if (d == dataio::Difficulty::Ignored) throw UsageError("--difficulty must be easy, moderate, hard or all");
        diffs = {d};
      }
      const eval::RecallMode mode = eval::parse_recall_mode(recall_mode);
      std::vector<eval::EvalReport> reports;
      nlohmann::json js = nlohmann::json::array();
      for (eval::Metric m : metrics) {
        for (dataio::Difficulty d : diffs) {
          reports.push_back(eval::evaluate(frames, d, m, iou));
          js.push_back(reports.back().to_json());
        }
      }
      const fs::path dir = output_dir(c.out);
      const std::string table = eval::format_table(reports, mode);
      dataio::write_file((dir / "eval_report.json").string(), js.dump(2) + "\n");
      dataio::write_file((dir / "eval_table.txt").string(), table);
      out << table;
      return 0;
    }

    if (*probe_cmd) {
      const synth::Dataset ds = synth::open_dataset(c.data);
      std::vector<eval::FrameAnnotations> frames =
          load_frames(ds, split_scenes(ds.n_scenes, parse_split(c.split)), c.det, 0);
      if (c.det.empty()) {
        std::mt19937_64 rng(c.seed);
        for (eval::FrameAnnotations& f : frames) f.dets = probe::noisy_detections(f.gts, probe::NoiseSpec{}, rng);
      }
      const probe::ProbeTable t = probe::probe_report(frames, iou, eval::parse_recall_mode(recall_mode));
      const fs::path dir = output_dir(c.out);
      dataio::write_file((dir / "probe.md").string(), t.markdown());
      dataio::write_file((dir / "probe.csv").string(), t.csv());
      out << t.markdown();
      return 0;
    }

    if (*grad_cmd) {
      const std::vector<gradcheck::CheckResult> results = gradcheck::run_suite(grad_seed);
      bool ok = true;
      nlohmann::json js = nlohmann::json::array();
      for (const gradcheck::CheckResult& r : results) {
        out << (r.passed() ? "PASS " : "FAIL ") << r.name << " max_rel_err=" << r.error << " tol=" << r.tolerance
            << "\n";
        ok = ok && r.passed();
        js.push_back({{"name", r.name}, {"error", r.error}, {"tolerance", r.tolerance}, {"passed", r.passed()}});
      }
      if (!c.out.empty()) dataio::write_file((output_dir(c.out) / "gradcheck.json").string(), js.dump(2) + "\n");
      return ok ? 0 : 1;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace pct::cli
