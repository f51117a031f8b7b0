#pragma once

// Small reverse-mode compute engine: sequential networks of dense, convolution,
// pointwise and pooling layers over batched tensors, momentum SGD, finite
// difference gradient checking and the "PCTW" checkpoint format.

#include <Eigen/Dense>

#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pct/errors.hpp"

namespace pct::engine {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Shape {
  int channels{0};
  int height{1};
  int width{1};

  int size() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// A batch of samples. Column n holds sample n laid out row-major as
/// (channel, row, col).
struct Tensor {
  Shape shape;
  Matrix values;

  Tensor() = default;
  Tensor(Shape s, int batch) : shape(s), values(Matrix::Zero(s.size(), batch)) {}
  Tensor(Shape s, Matrix v);

  int batch() const { return static_cast<int>(values.cols()); }
  double& at(int n, int c, int y, int x) { return values((c * shape.height + y) * shape.width + x, n); }
  double at(int n, int c, int y, int x) const { return values((c * shape.height + y) * shape.width + x, n); }
};

enum class LayerKind { Affine, Conv2d, Relu, Sigmoid, GlobalAvgPool, Flatten, ConcatInput };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

struct LayerSpec {
  LayerKind kind{LayerKind::Relu};
  int in{0};  // affine fan-in, conv input channels
  int out{0};  // affine fan-out, conv output channels, concat side length
  int kernel{0};
  int stride{1};
  int padding{0};

  static LayerSpec affine(int in, int out) { return {LayerKind::Affine, in, out, 0, 1, 0}; }
  static LayerSpec conv2d(int in, int out, int kernel, int stride, int padding) {
    return {LayerKind::Conv2d, in, out, kernel, stride, padding};
  }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec sigmoid() { return {LayerKind::Sigmoid}; }
  static LayerSpec global_avg_pool() { return {LayerKind::GlobalAvgPool}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
  static LayerSpec concat_input(int side) { return {LayerKind::ConcatInput, 0, side, 0, 1, 0}; }

  bool operator==(const LayerSpec&) const = default;
};

void to_json(nlohmann::json& j, const LayerSpec& s);
void from_json(const nlohmann::json& j, LayerSpec& s);

/// Trainable buffer and its accumulated gradient.
struct Parameter {
  Matrix value;
  Matrix grad;
};

namespace layers {

struct Affine {
  Parameter weight;  // out x in
  Parameter bias;  // out x 1
  Matrix input;
};

struct Conv2d {
  int in{0}, out{0}, kernel{0}, stride{1}, padding{0};
  Parameter weight;  // out x (in * kernel * kernel)
  Parameter bias;  // out x 1
  Shape in_shape, out_shape;
  Matrix cols;  // (batch * out_pixels) x (in * kernel * kernel)
};

struct Relu {
  Matrix input;
};

struct Sigmoid {
  Matrix output;
};

struct GlobalAvgPool {
  Shape in_shape;
};

struct Flatten {
  Shape in_shape;
};

struct ConcatInput {
  int side{0};
  int main{0};
  Matrix side_grad;
};

}  // namespace layers

using Layer = std::variant<layers::Affine, layers::Conv2d, layers::Relu, layers::Sigmoid, layers::GlobalAvgPool,
                           layers::Flatten, layers::ConcatInput>;

/// Sequential network. Forward retains what backward needs; backward
/// accumulates parameter gradients and returns the input gradient.
class Network {
 public:
  Network() = default;
  Network(Shape input, std::vector<LayerSpec> specs);

  /// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  void initialize(std::mt19937_64& rng);

  Tensor forward(const Tensor& input, const Tensor* side = nullptr);
  Tensor backward(const Tensor& output_grad);

  /// Gradient w.r.t. the side input of the ConcatInput layer from the last backward.
  const Matrix& side_gradient() const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  const Shape& input_shape() const { return input_; }
  const Shape& output_shape() const { return output_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }
  bool has_side_input() const;
  int side_size() const;

 private:
  Shape input_;
  Shape output_;
  std::vector<LayerSpec> specs_;
  std::vector<Layer> layers_;
  std::vector<Shape> shapes_;  // shapes_[i] is the input shape of layer i
  bool forward_done_{false};
};

struct OptimizerState {
  double learning_rate{1e-3};
  double momentum{0.9};
  std::vector<Matrix> velocity;
  long step{0};
};

/// Momentum SGD: v <- momentum * v + g; p <- p - lr * v. Zeroes gradients.
void sgd_step(std::span<Parameter* const> params, OptimizerState& opt);
void sgd_step(Network& net, OptimizerState& opt);

/// Worst-case relative error between the analytic gradients already stored in
/// `params` and central finite differences of `loss`. The relative error of an
/// entry is |a - n| / max(|a|, |n|, floor).
double compare_gradients(std::span<Parameter* const> params, const std::function<double()>& loss,
                         double epsilon = 1e-4, double floor = 1e-6);

/// Loss on a network output. Fills `grad` with dLoss/dOutput when non-null.
using LossFn = std::function<double(const Tensor& output, Tensor* grad)>;

/// Runs forward/backward on `input`, then checks every parameter against
/// central finite differences.
double grad_check(Network& net, const Tensor& input, const LossFn& loss_fn, double epsilon = 1e-4,
                  double floor = 1e-6);

struct NamedNetwork {
  std::string name;
  Network network;
};

/// "PCTW" | u32 manifest length | manifest JSON | f64 parameters in declaration order.
/// The manifest holds `meta` and, per network, its name, input shape and layer specs.
std::string write_checkpoint(const nlohmann::json& meta, const std::vector<std::pair<std::string, const Network*>>& nets);

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedNetwork> networks;

  const Network& find(std::string_view name) const;
};

Checkpoint read_checkpoint(std::string_view bytes);

}  // namespace pct::engine
