#include "pct/engine.hpp"

#include <bit>
#include <cmath>
#include <cstdint>

namespace pct::engine {

std::string Shape::str() const {
  return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

Tensor::Tensor(Shape s, Matrix v) : shape(s), values(std::move(v)) {
  if (values.rows() != shape.size()) {
    throw ShapeError("tensor of shape " + shape.str() + " given " + std::to_string(values.rows()) + " rows");
  }
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Affine: return "affine";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::ConcatInput: return "concat_input";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (LayerKind k : {LayerKind::Affine, LayerKind::Conv2d, LayerKind::Relu, LayerKind::Sigmoid,
                      LayerKind::GlobalAvgPool, LayerKind::Flatten, LayerKind::ConcatInput}) {
    if (name == layer_kind_name(k)) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

void to_json(nlohmann::json& j, const LayerSpec& s) {
  j = nlohmann::json{{"kind", layer_kind_name(s.kind)}, {"in", s.in},        {"out", s.out},
                     {"kernel", s.kernel},              {"stride", s.stride}, {"padding", s.padding}};
}

void from_json(const nlohmann::json& j, LayerSpec& s) {
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  s.in = j.at("in").get<int>();
  s.out = j.at("out").get<int>();
  s.kernel = j.at("kernel").get<int>();
  s.stride = j.at("stride").get<int>();
  s.padding = j.at("padding").get<int>();
}

namespace {

using namespace layers;

Parameter make_param(int rows, int cols) {
  return Parameter{Matrix::Zero(rows, cols), Matrix::Zero(rows, cols)};
}

std::string layer_label(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + layer_kind_name(spec.kind) + ")";
}

Shape infer_output(std::size_t index, const LayerSpec& spec, const Shape& in) {
  const std::string label = layer_label(index, spec);
  switch (spec.kind) {
    case LayerKind::Affine:
      if (in.height != 1 || in.width != 1 || in.channels != spec.in) {
        throw ShapeError(label + ": expects " + std::to_string(spec.in) + "x1x1 input, got " + in.str());
      }
      return {spec.out, 1, 1};
    case LayerKind::Conv2d: {
      if (in.channels != spec.in) {
        throw ShapeError(label + ": expects " + std::to_string(spec.in) + " channels, got " + in.str());
      }
      if (spec.kernel <= 0 || spec.stride <= 0 || spec.padding < 0) throw ShapeError(label + ": bad extents");
      const int ho = (in.height + 2 * spec.padding - spec.kernel) / spec.stride + 1;
      const int wo = (in.width + 2 * spec.padding - spec.kernel) / spec.stride + 1;
      if (ho <= 0 || wo <= 0) throw ShapeError(label + ": input " + in.str() + " smaller than kernel");
      return {spec.out, ho, wo};
    }
    case LayerKind::Relu:
    case LayerKind::Sigmoid: return in;
    case LayerKind::GlobalAvgPool: return {in.channels, 1, 1};
    case LayerKind::Flatten: return {in.size(), 1, 1};
    case LayerKind::ConcatInput:
      if (in.height != 1 || in.width != 1) throw ShapeError(label + ": expects a flat input, got " + in.str());
      return {in.channels + spec.out, 1, 1};
  }
  throw ShapeError(label + ": unknown kind");
}

Layer build_layer(const LayerSpec& spec, const Shape& in, const Shape& out) {
  switch (spec.kind) {
    case LayerKind::Affine: {
      Affine a;
      a.weight = make_param(spec.out, spec.in);
      a.bias = make_param(spec.out, 1);
      return a;
    }
    case LayerKind::Conv2d: {
      Conv2d c;
      c.in = spec.in;
      c.out = spec.out;
      c.kernel = spec.kernel;
      c.stride = spec.stride;
      c.padding = spec.padding;
      c.weight = make_param(spec.out, spec.in * spec.kernel * spec.kernel);
      c.bias = make_param(spec.out, 1);
      c.in_shape = in;
      c.out_shape = out;
      return c;
    }
    case LayerKind::Relu: return Relu{};
    case LayerKind::Sigmoid: return Sigmoid{};
    case LayerKind::GlobalAvgPool: return GlobalAvgPool{in};
    case LayerKind::Flatten: return Flatten{in};
    case LayerKind::ConcatInput: return ConcatInput{spec.out, in.channels, Matrix()};
  }
  throw ShapeError("unknown layer kind");
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix conv_forward(Conv2d& c, const Matrix& x) {
  const int batch = static_cast<int>(x.cols());
  const int hi = c.in_shape.height, wi = c.in_shape.width;
  const int ho = c.out_shape.height, wo = c.out_shape.width;
  const int pix = ho * wo;
  const int kk = c.kernel * c.kernel;
  c.cols.setZero(static_cast<Eigen::Index>(batch) * pix, c.in * kk);
  for (int ci = 0; ci < c.in; ++ci) {
    for (int ky = 0; ky < c.kernel; ++ky) {
      for (int kx = 0; kx < c.kernel; ++kx) {
        const int kidx = (ci * c.kernel + ky) * c.kernel + kx;
        double* col = c.cols.col(kidx).data();
        for (int n = 0; n < batch; ++n) {
          const double* src = x.col(n).data() + static_cast<Eigen::Index>(ci) * hi * wi;
          double* dst = col + static_cast<Eigen::Index>(n) * pix;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * c.stride - c.padding + ky;
            if (iy < 0 || iy >= hi) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * c.stride - c.padding + kx;
              if (ix < 0 || ix >= wi) continue;
              dst[oy * wo + ox] = src[iy * wi + ix];
            }
          }
        }
      }
    }
  }
  const Matrix out_all = c.cols * c.weight.value.transpose();  // (batch*pix) x out
  Matrix y(static_cast<Eigen::Index>(c.out) * pix, batch);
  for (int n = 0; n < batch; ++n) {
    for (int co = 0; co < c.out; ++co) {
      y.col(n).segment(static_cast<Eigen::Index>(co) * pix, pix) =
          out_all.col(co).segment(static_cast<Eigen::Index>(n) * pix, pix).array() + c.bias.value(co, 0);
    }
  }
  return y;
}

Matrix conv_backward(Conv2d& c, const Matrix& g) {
  const int batch = static_cast<int>(g.cols());
  if (c.cols.rows() != static_cast<Eigen::Index>(batch) * c.out_shape.height * c.out_shape.width) {
    throw StateError("conv2d backward: batch differs from the retained forward pass");
  }
  const int hi = c.in_shape.height, wi = c.in_shape.width;
  const int ho = c.out_shape.height, wo = c.out_shape.width;
  const int pix = ho * wo;
  Matrix g_all(static_cast<Eigen::Index>(batch) * pix, c.out);
  for (int n = 0; n < batch; ++n) {
    for (int co = 0; co < c.out; ++co) {
      g_all.col(co).segment(static_cast<Eigen::Index>(n) * pix, pix) =
          g.col(n).segment(static_cast<Eigen::Index>(co) * pix, pix);
    }
  }
  c.weight.grad.noalias() += g_all.transpose() * c.cols;
  c.bias.grad += g_all.colwise().sum().transpose();
  const Matrix dcols = g_all * c.weight.value;  // (batch*pix) x (in*k*k)

  Matrix dx = Matrix::Zero(static_cast<Eigen::Index>(c.in) * hi * wi, batch);
  for (int ci = 0; ci < c.in; ++ci) {
    for (int ky = 0; ky < c.kernel; ++ky) {
      for (int kx = 0; kx < c.kernel; ++kx) {
        const int kidx = (ci * c.kernel + ky) * c.kernel + kx;
        const double* col = dcols.col(kidx).data();
        for (int n = 0; n < batch; ++n) {
          double* dst = dx.col(n).data() + static_cast<Eigen::Index>(ci) * hi * wi;
          const double* src = col + static_cast<Eigen::Index>(n) * pix;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * c.stride - c.padding + ky;
            if (iy < 0 || iy >= hi) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * c.stride - c.padding + kx;
              if (ix < 0 || ix >= wi) continue;
              dst[iy * wi + ix] += src[oy * wo + ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

struct ForwardVisitor {
  const Matrix& x;
  const Tensor* side;
  const std::string& label;

  Matrix operator()(Affine& a) const {
    a.input = x;
    Matrix y = a.weight.value * x;
    y.colwise() += a.bias.value.col(0);
    return y;
  }
  Matrix operator()(Conv2d& c) const { return conv_forward(c, x); }
  Matrix operator()(Relu& r) const {
    r.input = x;
    return x.cwiseMax(0.0);
  }
  Matrix operator()(Sigmoid& s) const {
    s.output = x.unaryExpr([](double v) { return sigmoid(v); });
    return s.output;
  }
  Matrix operator()(GlobalAvgPool& p) const {
    const int hw = p.in_shape.height * p.in_shape.width;
    Matrix y(p.in_shape.channels, x.cols());
    for (Eigen::Index n = 0; n < x.cols(); ++n) {
      for (int c = 0; c < p.in_shape.channels; ++c) {
        y(c, n) = x.col(n).segment(static_cast<Eigen::Index>(c) * hw, hw).mean();
      }
    }
    return y;
  }
  Matrix operator()(Flatten&) const { return x; }
  Matrix operator()(ConcatInput& c) const {
    if (side == nullptr) throw ShapeError(label + ": no side input supplied");
    if (side->values.rows() != c.side || side->values.cols() != x.cols()) {
      throw ShapeError(label + ": side input must be " + std::to_string(c.side) + " x batch " +
                       std::to_string(x.cols()));
    }
    Matrix y(c.main + c.side, x.cols());
    y.topRows(c.main) = x;
    y.bottomRows(c.side) = side->values;
    return y;
  }
};

struct BackwardVisitor {
  const Matrix& g;

  Matrix operator()(Affine& a) const {
    if (a.input.cols() != g.cols()) throw StateError("affine backward: batch differs from forward");
    a.weight.grad.noalias() += g * a.input.transpose();
    a.bias.grad += g.rowwise().sum();
    return a.weight.value.transpose() * g;
  }
  Matrix operator()(Conv2d& c) const { return conv_backward(c, g); }
  Matrix operator()(Relu& r) const { return (r.input.array() > 0.0).select(g, 0.0); }
  Matrix operator()(Sigmoid& s) const { return (g.array() * s.output.array() * (1.0 - s.output.array())).matrix(); }
  Matrix operator()(GlobalAvgPool& p) const {
    const int hw = p.in_shape.height * p.in_shape.width;
    Matrix dx(static_cast<Eigen::Index>(p.in_shape.channels) * hw, g.cols());
    for (Eigen::Index n = 0; n < g.cols(); ++n) {
      for (int c = 0; c < p.in_shape.channels; ++c) {
        dx.col(n).segment(static_cast<Eigen::Index>(c) * hw, hw).setConstant(g(c, n) / hw);
      }
    }
    return dx;
  }
  Matrix operator()(Flatten&) const { return g; }
  Matrix operator()(ConcatInput& c) const {
    c.side_grad = g.bottomRows(c.side);
    return g.topRows(c.main);
  }
};

void collect(Layer& layer, std::vector<Parameter*>& out) {
  if (auto* a = std::get_if<Affine>(&layer)) {
    out.push_back(&a->weight);
    out.push_back(&a->bias);
  } else if (auto* c = std::get_if<Conv2d>(&layer)) {
    out.push_back(&c->weight);
    out.push_back(&c->bias);
  }
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

double get_f64(std::string_view b, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

Network::Network(Shape input, std::vector<LayerSpec> specs) : input_(input), specs_(std::move(specs)) {
  Shape cur = input_;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const Shape next = infer_output(i, specs_[i], cur);
    shapes_.push_back(cur);
    layers_.push_back(build_layer(specs_[i], cur, next));
    cur = next;
  }
  output_ = cur;
}

void Network::initialize(std::mt19937_64& rng) {
  for (Layer& layer : layers_) {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    double fan_in = 0, fan_out = 0;
    if (auto* a = std::get_if<Affine>(&layer)) {
      w = &a->weight;
      b = &a->bias;
      fan_in = static_cast<double>(a->weight.value.cols());
      fan_out = static_cast<double>(a->weight.value.rows());
    } else if (auto* c = std::get_if<Conv2d>(&layer)) {
      w = &c->weight;
      b = &c->bias;
      fan_in = static_cast<double>(c->in) * c->kernel * c->kernel;
      fan_out = static_cast<double>(c->out) * c->kernel * c->kernel;
    }
    if (w == nullptr) continue;
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < w->value.size(); ++i) w->value.data()[i] = dist(rng);
    b->value.setZero();
  }
  zero_grad();
}

Tensor Network::forward(const Tensor& input, const Tensor* side) {
  if (!(input.shape == input_) || input.values.rows() != input_.size()) {
    throw ShapeError("network input: expected " + input_.str() + ", got " + input.shape.str());
  }
  Matrix x = input.values;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string label = layer_label(i, specs_[i]);
    if (!x.allFinite()) throw ShapeError(label + ": non-finite input");
    x = std::visit(ForwardVisitor{x, side, label}, layers_[i]);
  }
  forward_done_ = true;
  return Tensor(output_, std::move(x));
}

Tensor Network::backward(const Tensor& output_grad) {
  if (!forward_done_) throw StateError("backward called before forward");
  if (output_grad.values.rows() != output_.size()) {
    throw ShapeError("output gradient: expected " + output_.str() + ", got " + output_grad.shape.str());
  }
  Matrix g = output_grad.values;
  for (std::size_t i = layers_.size(); i-- > 0;) g = std::visit(BackwardVisitor{g}, layers_[i]);
  return Tensor(input_, std::move(g));
}

const Matrix& Network::side_gradient() const {
  for (const Layer& layer : layers_) {
    if (const auto* c = std::get_if<ConcatInput>(&layer)) return c->side_grad;
  }
  throw StateError("network has no side input");
}

bool Network::has_side_input() const {
  for (const Layer& layer : layers_) {
    if (std::holds_alternative<ConcatInput>(layer)) return true;
  }
  return false;
}

int Network::side_size() const {
  for (const Layer& layer : layers_) {
    if (const auto* c = std::get_if<ConcatInput>(&layer)) return c->side;
  }
  return 0;
}

std::vector<Parameter*> Network::parameters() {
  std::vector<Parameter*> out;
  for (Layer& layer : layers_) collect(layer, out);
  return out;
}

std::vector<const Parameter*> Network::parameters() const {
  std::vector<const Parameter*> out;
  for (Parameter* p : const_cast<Network*>(this)->parameters()) out.push_back(p);
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void Network::zero_grad() {
  for (Parameter* p : parameters()) p->grad.setZero();
}

void sgd_step(std::span<Parameter* const> params, OptimizerState& opt) {
  if (opt.velocity.size() != params.size()) {
    opt.velocity.clear();
    for (const Parameter* p : params) opt.velocity.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Matrix& v = opt.velocity[i];
    v = opt.momentum * v + p.grad;
    p.value -= opt.learning_rate * v;
    p.grad.setZero();
  }
  ++opt.step;
}

void sgd_step(Network& net, OptimizerState& opt) {
  const std::vector<Parameter*> params = net.parameters();
  sgd_step(std::span<Parameter* const>(params), opt);
}

double compare_gradients(std::span<Parameter* const> params, const std::function<double()>& loss, double epsilon,
                         double floor) {
  double worst = 0.0;
  for (Parameter* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& v = p->value.data()[i];
      const double saved = v;
      v = saved + epsilon;
      const double up = loss();
      v = saved - epsilon;
      const double down = loss();
      v = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = p->grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

double grad_check(Network& net, const Tensor& input, const LossFn& loss_fn, double epsilon, double floor) {
  net.zero_grad();
  const Tensor out = net.forward(input);
  Tensor grad(out.shape, out.batch());
  loss_fn(out, &grad);
  net.backward(grad);
  const std::vector<Parameter*> params = net.parameters();
  return compare_gradients(params, [&] { return loss_fn(net.forward(input), nullptr); }, epsilon, floor);
}

std::string write_checkpoint(const nlohmann::json& meta,
                             const std::vector<std::pair<std::string, const Network*>>& nets) {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  manifest["networks"] = nlohmann::json::array();
  for (const auto& [name, net] : nets) {
    const Shape& in = net->input_shape();
    manifest["networks"].push_back(
        {{"name", name}, {"input", {in.channels, in.height, in.width}}, {"layers", net->specs()}});
  }
  const std::string text = manifest.dump();
  std::string out = "PCTW";
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, net] : nets) {
    for (const Parameter* p : net->parameters()) {
      for (Eigen::Index i = 0; i < p->value.size(); ++i) put_f64(out, p->value.data()[i]);
    }
  }
  return out;
}

const Network& Checkpoint::find(std::string_view name) const {
  for (const NamedNetwork& n : networks) {
    if (n.name == name) return n.network;
  }
  throw FormatError("checkpoint has no network named '" + std::string(name) + "'");
}

Checkpoint read_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "PCTW") throw FormatError("checkpoint: bad magic");
  const std::uint32_t len = get_u32(bytes, 4);
  if (bytes.size() < 8ull + len) throw FormatError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  std::size_t off = 8 + len;
  for (const auto& entry : manifest.at("networks")) {
    const auto in = entry.at("input");
    const Shape shape{in.at(0).get<int>(), in.at(1).get<int>(), in.at(2).get<int>()};
    Network net(shape, entry.at("layers").get<std::vector<LayerSpec>>());
    for (Parameter* p : net.parameters()) {
      const std::size_t need = 8 * static_cast<std::size_t>(p->value.size());
      if (bytes.size() < off + need) throw FormatError("checkpoint: truncated parameters");
      for (Eigen::Index i = 0; i < p->value.size(); ++i, off += 8) p->value.data()[i] = get_f64(bytes, off);
    }
    ck.networks.push_back({entry.at("name").get<std::string>(), std::move(net)});
  }
  if (off != bytes.size()) throw FormatError("checkpoint: trailing bytes after parameters");
  return ck;
}

}  // namespace pct::engine
