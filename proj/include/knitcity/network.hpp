#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace knitcity {

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::size_t n_parameters, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);

  void step(std::span<double> parameters, std::span<const double> gradient, double learning_rate,
            double weight_decay = 0.0);
  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<double> m_;
  std::vector<double> v_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double epsilon_ = 1e-8;
  std::size_t t_ = 0;
};

struct ConvNetShape {
  std::size_t in_channels = 3;
  std::size_t length = 256;
  std::size_t channels = 16;
  std::size_t blocks = 3;
  std::size_t kernel = 3;
  std::size_t outputs = 5;

  /// Sequence length entering the dense head.
  std::size_t head_length() const;
  std::size_t head_inputs() const;
  std::size_t parameter_count() const;
  void validate() const;
};

/// Residual stack of bias-free "same" 1D convolutions with SiLU activations:
///   stem conv -> act, then per block: act(x + conv(act(conv(x)))) followed by
///   2x average pooling; a dense layer with bias maps the flattened features to
///   class logits. With zero blocks the network is a single dense layer.
class ConvNet {
 public:
  /// Scratch buffers for one forward/backward pass.
  struct Workspace {
    std::vector<double> input;
    std::vector<double> stem_pre;
    std::vector<std::vector<double>> block_in;
    std::vector<std::vector<double>> block_u;
    std::vector<std::vector<double>> block_v;
    std::vector<std::vector<double>> block_z;
    std::vector<double> head_in;
    std::vector<double> logits;
    std::vector<double> probs;
    // backward scratch
    std::vector<double> g_a;
    std::vector<double> g_b;
    std::vector<double> g_c;
  };

  ConvNet() = default;
  explicit ConvNet(const ConvNetShape& shape);

  const ConvNetShape& shape() const noexcept { return shape_; }
  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }
  void set_parameters(std::vector<double> params);

  void initialize(std::uint64_t seed);

  Workspace make_workspace() const;

  /// Runs the network on `input` (in_channels x length, channel-major);
  /// returns class probabilities (in ws.probs).
  std::span<const double> forward(std::span<const double> input, Workspace& ws) const;

  /// Cross-entropy loss of the last forward pass against `label`; adds its
  /// parameter gradient into `grad`.
  double backward(int label, Workspace& ws, std::span<double> grad) const;

  /// Offsets of each parameter group (for tests and weight inspection).
  std::size_t stem_offset() const noexcept { return 0; }
  std::size_t block_offset(std::size_t b) const;
  std::size_t head_weight_offset() const noexcept { return head_w_; }
  std::size_t head_bias_offset() const noexcept { return head_b_; }

 private:
  ConvNetShape shape_;
  std::vector<double> params_;
  std::size_t head_w_ = 0;
  std::size_t head_b_ = 0;
};

/// Fully connected ReLU network with a linear output layer.
class Mlp {
 public:
  struct Workspace {
    std::vector<std::vector<double>> pre;   // pre-activations per hidden layer
    std::vector<std::vector<double>> post;  // input followed by hidden activations
    std::vector<double> output;
    std::vector<double> g_cur;
    std::vector<double> g_next;
  };

  Mlp() = default;
  Mlp(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t outputs);

  std::size_t inputs() const noexcept { return sizes_.front(); }
  std::size_t outputs() const noexcept { return sizes_.back(); }
  const std::vector<std::size_t>& sizes() const noexcept { return sizes_; }
  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }
  void set_parameters(std::vector<double> params);

  void initialize(std::uint64_t seed);
  Workspace make_workspace() const;

  std::span<const double> forward(std::span<const double> input, Workspace& ws) const;
  /// Back-propagates d(loss)/d(output) of the last forward pass into `grad`.
  void backward(std::span<const double> output_grad, Workspace& ws, std::span<double> grad) const;

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;  // weight offset per layer; bias follows weights
  std::vector<double> params_;
};

}  // namespace knitcity
