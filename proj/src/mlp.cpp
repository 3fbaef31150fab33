#include "csdm/mlp.hpp"

#include <cmath>

#include "csdm/error.hpp"
#include "csdm/rng.hpp"

namespace csdm::nn {

double silu(double z) noexcept { return z / (1.0 + std::exp(-z)); }

double silu_derivative(double z) noexcept {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

void Mlp::layout() {
  if (widths_.size() < 2) throw InvalidArgument("Mlp: need at least input and output widths");
  offsets_.assign(widths_.size() - 1, 0);
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    if (widths_[l] == 0 || widths_[l + 1] == 0) throw InvalidArgument("Mlp: zero width");
    offsets_[l] = n;
    n += widths_[l + 1] * widths_[l] + widths_[l + 1];
  }
  params_.resize(n);
}

Mlp::Mlp(std::vector<std::size_t> widths, std::uint64_t seed) : widths_(std::move(widths)) {
  layout();
  RngStream rng(seed);
  for (std::size_t l = 0; l < layer_count(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(widths_[l]));
    const std::size_t w0 = weight_offset(l), b0 = bias_offset(l);
    for (std::size_t i = w0; i < b0; ++i) params_[i] = scale * rng.normal();
    for (std::size_t i = b0; i < b0 + widths_[l + 1]; ++i) params_[i] = 0.0;
  }
}

Mlp::Mlp(std::vector<std::size_t> widths, Vector parameters) : widths_(std::move(widths)) {
  layout();
  if (parameters.size() != params_.size())
    throw InvalidArgument("Mlp: expected " + std::to_string(params_.size()) + " parameters, got " +
                          std::to_string(parameters.size()));
  params_ = std::move(parameters);
}

Matrix Mlp::forward(const Matrix& x) const {
  Tape tape;
  return forward(x, tape);
}

Matrix Mlp::forward(const Matrix& x, Tape& tape) const {
  if (x.cols() != input_dim())
    throw InvalidArgument("Mlp::forward: input has " + std::to_string(x.cols()) +
                          " columns, expected " + std::to_string(input_dim()));
  const std::size_t n = x.rows();
  tape.inputs.assign(1, x);
  tape.pre.clear();
  for (std::size_t l = 0; l < layer_count(); ++l) {
    const std::size_t in = widths_[l], out = widths_[l + 1];
    const double* w = params_.data() + weight_offset(l);
    const double* b = params_.data() + bias_offset(l);
    const Matrix& h = tape.inputs.back();
    Matrix z(n, out);
    for (std::size_t r = 0; r < n; ++r) {
      const auto hr = h.row(r);
      for (std::size_t o = 0; o < out; ++o) z(r, o) = dot(hr, {w + o * in, in}) + b[o];
    }
    tape.pre.push_back(z);
    if (l + 1 < layer_count()) {
      for (double& v : z.entries()) v = silu(v);
      tape.inputs.push_back(std::move(z));
    } else {
      return z;
    }
  }
  return {};
}

void Mlp::backward(const Tape& tape, const Matrix& grad_out, Vector& grad) const {
  if (grad.empty()) grad.assign(params_.size(), 0.0);
  if (grad.size() != params_.size()) throw InvalidArgument("Mlp::backward: gradient size mismatch");
  if (tape.pre.size() != layer_count()) throw InvalidArgument("Mlp::backward: incomplete tape");
  Matrix delta = grad_out;  // dL/dpre for the current layer
  for (std::size_t l = layer_count(); l-- > 0;) {
    const std::size_t in = widths_[l], out = widths_[l + 1];
    const Matrix& h = tape.inputs[l];
    const std::size_t n = h.rows();
    if (delta.rows() != n || delta.cols() != out)
      throw InvalidArgument("Mlp::backward: gradient shape mismatch");
    double* gw = grad.data() + weight_offset(l);
    double* gb = grad.data() + bias_offset(l);
    for (std::size_t r = 0; r < n; ++r) {
      const auto hr = h.row(r);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta(r, o);
        if (d == 0.0) continue;
        double* row = gw + o * in;
        for (std::size_t i = 0; i < in; ++i) row[i] += d * hr[i];
        gb[o] += d;
      }
    }
    if (l == 0) break;
    const double* w = params_.data() + weight_offset(l);
    Matrix next(n, in, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      auto nr = next.row(r);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta(r, o);
        if (d == 0.0) continue;
        const double* wr = w + o * in;
        for (std::size_t i = 0; i < in; ++i) nr[i] += d * wr[i];
      }
      const auto pre = tape.pre[l - 1].row(r);
      for (std::size_t i = 0; i < in; ++i) nr[i] *= silu_derivative(pre[i]);
    }
    delta = std::move(next);
  }
}

Adam::Adam(std::size_t n, AdamOptions opts) : opts_(opts), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(Vector& params, const Vector& grad, double learning_rate) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw InvalidArgument("Adam::step: size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * grad[i];
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * grad[i] * grad[i];
    params[i] -= learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + opts_.epsilon);
  }
}

}  // namespace csdm::nn
