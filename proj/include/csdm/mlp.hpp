#pragma once

#include <cstdint>
#include <vector>

#include "csdm/linalg.hpp"

namespace csdm::nn {

// Fully connected network with SiLU hidden activations and a linear output
// layer. Parameters live in one flat vector: for each layer, the out x in
// weight block (row-major) followed by the out biases.
class Mlp {
 public:
  Mlp() = default;
  // Weights ~ N(0, 1/fan_in), biases 0.
  Mlp(std::vector<std::size_t> widths, std::uint64_t seed);
  // Wraps existing parameters; throws if the length does not match widths.
  Mlp(std::vector<std::size_t> widths, Vector parameters);

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::size_t input_dim() const noexcept { return widths_.front(); }
  std::size_t output_dim() const noexcept { return widths_.back(); }
  std::size_t layer_count() const noexcept { return widths_.size() - 1; }
  std::size_t parameter_count() const noexcept { return params_.size(); }

  Vector& parameters() noexcept { return params_; }
  const Vector& parameters() const noexcept { return params_; }

  // Activations kept for the backward pass. inputs[l] feeds layer l,
  // pre[l] is its affine output.
  struct Tape {
    std::vector<Matrix> inputs;
    std::vector<Matrix> pre;
  };

  // Rows of x are samples.
  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, Tape& tape) const;

  // Adds dL/dparams to grad (resized if empty) given dL/doutput.
  void backward(const Tape& tape, const Matrix& grad_out, Vector& grad) const;

 private:
  std::size_t weight_offset(std::size_t layer) const noexcept { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const noexcept {
    return offsets_[layer] + widths_[layer + 1] * widths_[layer];
  }
  void layout();

  std::vector<std::size_t> widths_;
  std::vector<std::size_t> offsets_;
  Vector params_;
};

double silu(double z) noexcept;
double silu_derivative(double z) noexcept;

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::size_t n, AdamOptions opts = {});
  void step(Vector& params, const Vector& grad, double learning_rate);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamOptions opts_;
  Vector m_, v_;
  std::size_t t_ = 0;
};

}  // namespace csdm::nn
