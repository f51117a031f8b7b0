#pragma once

// The full detector: CLB stack, box network G and the context encoder, trained
// end to end on the sum of the boosting loss and the box loss.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pct/boxhead.hpp"
#include "pct/clb.hpp"
#include "pct/dataio.hpp"
#include "pct/engine.hpp"

namespace pct::model {

using boxhead::BoxNetwork;
using boxhead::BoxPrediction;
using clb::BoostTrace;
using engine::Matrix;
using engine::Network;
using geometry::Box3D;
using geometry::CoordinatePatch;
using geometry::RoI2D;

struct ModelConfig {
  clb::BoostConfig boost{clb::BoostConfig::uniform(3, 1.0, true)};
  bool use_gce{true};
  clb::TrunkConfig trunk;
  std::vector<int> conf_hidden{32, 16};
  int head_hidden{64};
  boxhead::EncoderConfig encoder;
  std::array<Eigen::Vector3d, 3> anchors{Eigen::Vector3d(1.53, 1.63, 3.88), Eigen::Vector3d(1.76, 0.66, 0.84),
                                         Eigen::Vector3d(1.74, 0.60, 1.76)};

  /// Ablation presets: I (no CLB, no GCE), II (CLB), III (CLB + confidence),
  /// IV (CLB + GCE), V (CLB + confidence + GCE).
  static ModelConfig group(std::string_view name);
  int context_size() const { return encoder.channels; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// One RoI prepared for the network.
struct Sample {
  int scene{0};
  int roi_index{0};
  RoI2D roi;
  CoordinatePatch patch;
  Eigen::VectorXf crop;  // RoIAlign crop, empty when the context branch is off
  std::optional<Box3D> gt;
};

/// Turns a scene's RoIs into samples. RoIs with a fully masked patch are
/// skipped. Ground truth is attached through each RoI's gt_index.
std::vector<Sample> make_samples(const dataio::CalibRecord& calib, const geometry::DepthMap& depth,
                                 const std::vector<dataio::RoIRecord>& rois, const geometry::FeatureGrid& features,
                                 const std::vector<dataio::LabelRecord>& labels, int scene, const ModelConfig& cfg);

struct LossBreakdown {
  double total{0};
  double clb{0};
  double box{0};
  std::vector<double> stage_psi;  // batch mean of Psi_t
};

struct Prediction {
  BoostTrace trace;  // patches left empty
  BoxPrediction box;
};

class PctModel {
 public:
  PctModel() = default;
  explicit PctModel(ModelConfig cfg);

  void initialize(std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  clb::BoostStack& stack() { return stack_; }
  BoxNetwork& box_network() { return g_; }
  Network& encoder() { return encoder_; }

  /// Every trainable parameter in checkpoint order.
  std::vector<engine::Parameter*> parameters();

  /// Mean loss over the batch; when `with_grad` is set the parameter gradients
  /// of that mean are accumulated.
  LossBreakdown loss(std::span<const Sample* const> batch, bool with_grad);

  std::vector<Prediction> predict(std::span<const Sample* const> batch);

  std::string save(const nlohmann::json& extra_meta = {}) const;
  static PctModel load(std::string_view bytes);

 private:
  struct Forward;
  Forward run(std::span<const Sample* const> batch);

  ModelConfig cfg_;
  clb::BoostStack stack_;
  BoxNetwork g_;
  Network encoder_;
};

/// One momentum-SGD step on the batch-mean loss; returns the loss before the step.
LossBreakdown train_step(PctModel& model, std::span<const Sample* const> batch, engine::OptimizerState& opt);

struct TrainOptions {
  int epochs{30};
  int batch{32};
  double learning_rate{1e-3};
  double momentum{0.9};
  std::uint64_t seed{42};
};

struct EpochStats {
  int epoch{0};
  double loss{0};
  double clb{0};
  double box{0};
};

/// Shuffled minibatch training. `on_epoch` is called after every epoch.
std::vector<EpochStats> train(PctModel& model, const std::vector<Sample>& samples, const TrainOptions& opts,
                              const std::function<void(const EpochStats&)>& on_epoch = {});

/// Predictions for every sample, evaluated in chunks.
std::vector<Prediction> predict_all(PctModel& model, const std::vector<Sample>& samples, int chunk = 256);

/// KITTI detection record for a prediction: box from the model, 2D box and
/// score from the RoI, truncation and occlusion unknown.
dataio::LabelRecord detection_record(const Sample& s, const Prediction& p);

/// Mean Euclidean distance between final centers and ground truth centers.
double mean_center_error(const std::vector<Sample>& samples, const std::vector<Prediction>& preds);

}  // namespace pct::model
