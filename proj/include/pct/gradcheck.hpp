#pragma once

// Finite-difference checks of every layer kind, of the full detector loss on a
// tiny configuration, and of the closed-form confidence gradient.

#include <cstdint>
#include <string>
#include <vector>

#include "pct/engine.hpp"
#include "pct/model.hpp"

namespace pct::gradcheck {

inline constexpr double kEpsilon = 1e-4;
/// The full detector stacks dozens of relus; a 1e-4 step lands across a kink
/// for some random instances, so the composite graph uses a smaller step.
inline constexpr double kModelEpsilon = 1e-5;
/// Relative errors are taken against max(|analytic|, |numeric|, kFloor) so
/// that entries whose true gradient is zero are judged on absolute error.
inline constexpr double kFloor = 1e-4;
inline constexpr double kTolerance = 1e-4;
inline constexpr double kConfidenceTolerance = 1e-6;

struct CheckResult {
  std::string name;
  double error{0};
  double tolerance{0};
  bool passed() const { return error < tolerance; }
};

/// Worst relative error over the parameters, the input and (when present) the
/// side input of `net` for the loss sum(w .* y) + 0.5 * |y|^2 with a fixed
/// random w.
double check_network(engine::Network& net, const engine::Tensor& input, const engine::Tensor* side,
                     std::uint64_t seed);

/// Tiny detector configuration: K = 4 patches, two-channel trunks and encoder.
model::ModelConfig tiny_config(bool use_confidence = true, bool use_gce = true, int stages = 3);

/// Random samples for a tiny configuration.
std::vector<model::Sample> tiny_batch(const model::ModelConfig& cfg, int n, std::uint64_t seed);

/// Worst relative error of the full loss gradient over every model parameter.
double check_model(model::PctModel& m, const std::vector<model::Sample>& batch);

/// Worst relative error of dL/ds_t from the closed form against central
/// differences of the loss, over `trials` random (s, Psi, lambda_s) draws.
double check_confidence_gradient(int trials, std::uint64_t seed);

std::vector<CheckResult> run_suite(std::uint64_t seed = 7);

}  // namespace pct::gradcheck
