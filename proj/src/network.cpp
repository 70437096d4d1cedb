#include "knitcity/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "knitcity/error.hpp"
#include "knitcity/random.hpp"

namespace knitcity {

Adam::Adam(std::size_t n_parameters, double beta1, double beta2, double epsilon)
    : m_(n_parameters, 0.0), v_(n_parameters, 0.0), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

void Adam::step(std::span<double> parameters, std::span<const double> gradient,
                double learning_rate, double weight_decay) {
  if (parameters.size() != m_.size() || gradient.size() != m_.size()) {
    throw NumericError("Adam: parameter count mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const double g = gradient[i] + weight_decay * parameters[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    parameters[i] -= learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + epsilon_);
  }
}

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

// out[o][t] = sum_i sum_k w[o][i][k] * in[i][t + k - K/2], zero padded.
void conv_forward(const double* w, const double* in, double* out, std::size_t cin,
                  std::size_t cout, std::size_t len, std::size_t kernel) {
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto n = static_cast<std::ptrdiff_t>(len);
  std::fill(out, out + cout * len, 0.0);
  for (std::size_t o = 0; o < cout; ++o) {
    double* orow = out + o * len;
    for (std::size_t i = 0; i < cin; ++i) {
      const double* irow = in + i * len;
      const double* wk = w + (o * cin + i) * kernel;
      for (std::size_t k = 0; k < kernel; ++k) {
        const double wv = wk[k];
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - half;
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n, n - shift);
        for (std::ptrdiff_t t = lo; t < hi; ++t) orow[t] += wv * irow[t + shift];
      }
    }
  }
}

// Accumulates the weight gradient and (if gin is non-null) the input gradient.
void conv_backward(const double* w, const double* in, const double* gout, double* gw, double* gin,
                   std::size_t cin, std::size_t cout, std::size_t len, std::size_t kernel) {
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto n = static_cast<std::ptrdiff_t>(len);
  for (std::size_t o = 0; o < cout; ++o) {
    const double* grow = gout + o * len;
    for (std::size_t i = 0; i < cin; ++i) {
      const double* irow = in + i * len;
      double* girow = gin ? gin + i * len : nullptr;
      const std::size_t base = (o * cin + i) * kernel;
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - half;
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n, n - shift);
        double acc = 0.0;
        for (std::ptrdiff_t t = lo; t < hi; ++t) acc += grow[t] * irow[t + shift];
        gw[base + k] += acc;
        if (girow) {
          const double wv = w[base + k];
          for (std::ptrdiff_t t = lo; t < hi; ++t) girow[t + shift] += grow[t] * wv;
        }
      }
    }
  }
}

void softmax(std::span<const double> logits, std::vector<double>& probs) {
  probs.resize(logits.size());
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - top);
    z += probs[i];
  }
  for (double& p : probs) p /= z;
}

}  // namespace

std::size_t ConvNetShape::head_length() const { return length >> blocks; }

std::size_t ConvNetShape::head_inputs() const {
  return blocks == 0 ? in_channels * length : channels * head_length();
}

std::size_t ConvNetShape::parameter_count() const {
  std::size_t count = 0;
  if (blocks > 0) {
    count += channels * in_channels * kernel;
    count += blocks * 2 * channels * channels * kernel;
  }
  count += outputs * head_inputs() + outputs;
  return count;
}

void ConvNetShape::validate() const {
  if (in_channels == 0 || length == 0 || outputs < 2) {
    throw ConfigError("network: empty input or fewer than two outputs");
  }
  if (blocks > 0) {
    if (channels == 0) throw ConfigError("network: channels must be positive");
    if (kernel == 0 || kernel % 2 == 0) throw ConfigError("network: kernel size must be odd");
    if (blocks >= 32 || length % (std::size_t{1} << blocks) != 0) {
      throw ConfigError("network: input length " + std::to_string(length) +
                        " is not divisible by 2^" + std::to_string(blocks));
    }
  }
}

ConvNet::ConvNet(const ConvNetShape& shape) : shape_(shape) {
  shape_.validate();
  params_.assign(shape_.parameter_count(), 0.0);
  head_b_ = params_.size() - shape_.outputs;
  head_w_ = head_b_ - shape_.outputs * shape_.head_inputs();
}

std::size_t ConvNet::block_offset(std::size_t b) const {
  const auto& s = shape_;
  return s.channels * s.in_channels * s.kernel + b * 2 * s.channels * s.channels * s.kernel;
}

void ConvNet::set_parameters(std::vector<double> params) {
  if (params.size() != params_.size()) throw CheckpointError("network parameter count mismatch");
  params_ = std::move(params);
}

void ConvNet::initialize(std::uint64_t seed) {
  Rng rng(seed);
  const auto& s = shape_;
  auto fill = [&](std::size_t offset, std::size_t count, double stddev) {
    for (std::size_t i = 0; i < count; ++i) params_[offset + i] = stddev * rng.normal();
  };
  if (s.blocks > 0) {
    fill(0, s.channels * s.in_channels * s.kernel,
         std::sqrt(2.0 / static_cast<double>(s.in_channels * s.kernel)));
    const std::size_t per_conv = s.channels * s.channels * s.kernel;
    const double sd = std::sqrt(2.0 / static_cast<double>(s.channels * s.kernel));
    for (std::size_t b = 0; b < s.blocks; ++b) {
      fill(block_offset(b), per_conv, sd);
      // Second conv starts small so each block begins close to identity.
      fill(block_offset(b) + per_conv, per_conv, 0.25 * sd);
    }
  }
  fill(head_w_, s.outputs * s.head_inputs(), std::sqrt(1.0 / static_cast<double>(s.head_inputs())));
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(head_b_), params_.end(), 0.0);
}

ConvNet::Workspace ConvNet::make_workspace() const {
  const auto& s = shape_;
  Workspace ws;
  ws.input.resize(s.in_channels * s.length);
  ws.stem_pre.resize(s.blocks > 0 ? s.channels * s.length : 0);
  ws.block_in.resize(s.blocks);
  ws.block_u.resize(s.blocks);
  ws.block_v.resize(s.blocks);
  ws.block_z.resize(s.blocks);
  for (std::size_t b = 0; b < s.blocks; ++b) {
    const std::size_t n = s.channels * (s.length >> b);
    ws.block_in[b].resize(n);
    ws.block_u[b].resize(n);
    ws.block_v[b].resize(n);
    ws.block_z[b].resize(n);
  }
  ws.head_in.resize(s.head_inputs());
  ws.logits.resize(s.outputs);
  ws.probs.resize(s.outputs);
  const std::size_t widest = std::max(s.channels, s.in_channels) * s.length;
  ws.g_a.resize(widest);
  ws.g_b.resize(widest);
  ws.g_c.resize(widest);
  return ws;
}

std::span<const double> ConvNet::forward(std::span<const double> input, Workspace& ws) const {
  const auto& s = shape_;
  if (input.size() != s.in_channels * s.length) throw NumericError("network: bad input size");
  std::copy(input.begin(), input.end(), ws.input.begin());
  const double* p = params_.data();

  if (s.blocks == 0) {
    std::copy(input.begin(), input.end(), ws.head_in.begin());
  } else {
    conv_forward(p, ws.input.data(), ws.stem_pre.data(), s.in_channels, s.channels, s.length,
                 s.kernel);
    for (std::size_t i = 0; i < ws.stem_pre.size(); ++i) ws.block_in[0][i] = silu(ws.stem_pre[i]);
    const std::size_t per_conv = s.channels * s.channels * s.kernel;
    for (std::size_t b = 0; b < s.blocks; ++b) {
      const std::size_t len = s.length >> b;
      const double* w1 = p + block_offset(b);
      const double* w2 = w1 + per_conv;
      auto& x = ws.block_in[b];
      auto& u = ws.block_u[b];
      auto& v = ws.block_v[b];
      auto& z = ws.block_z[b];
      conv_forward(w1, x.data(), u.data(), s.channels, s.channels, len, s.kernel);
      for (std::size_t i = 0; i < u.size(); ++i) v[i] = silu(u[i]);
      conv_forward(w2, v.data(), z.data(), s.channels, s.channels, len, s.kernel);
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += x[i];
      double* next = b + 1 < s.blocks ? ws.block_in[b + 1].data() : ws.head_in.data();
      const std::size_t half = len / 2;
      for (std::size_t c = 0; c < s.channels; ++c) {
        for (std::size_t t = 0; t < half; ++t) {
          next[c * half + t] =
              0.5 * (silu(z[c * len + 2 * t]) + silu(z[c * len + 2 * t + 1]));
        }
      }
    }
  }

  const std::size_t m = s.head_inputs();
  const double* hw = p + head_w_;
  const double* hb = p + head_b_;
  for (std::size_t o = 0; o < s.outputs; ++o) {
    double acc = hb[o];
    const double* row = hw + o * m;
    for (std::size_t i = 0; i < m; ++i) acc += row[i] * ws.head_in[i];
    ws.logits[o] = acc;
  }
  softmax(ws.logits, ws.probs);
  return ws.probs;
}

double ConvNet::backward(int label, Workspace& ws, std::span<double> grad) const {
  const auto& s = shape_;
  if (grad.size() != params_.size()) throw NumericError("network: gradient size mismatch");
  if (label < 0 || static_cast<std::size_t>(label) >= s.outputs) {
    throw NumericError("network: label out of range");
  }
  const double loss = -std::log(std::max(ws.probs[label], 1e-300));
  const double* p = params_.data();
  double* g = grad.data();

  const std::size_t m = s.head_inputs();
  // g_a holds the gradient w.r.t. head_in.
  std::fill(ws.g_a.begin(), ws.g_a.begin() + static_cast<std::ptrdiff_t>(m), 0.0);
  for (std::size_t o = 0; o < s.outputs; ++o) {
    const double gl = ws.probs[o] - (static_cast<int>(o) == label ? 1.0 : 0.0);
    g[head_b_ + o] += gl;
    const double* row = p + head_w_ + o * m;
    double* grow = g + head_w_ + o * m;
    for (std::size_t i = 0; i < m; ++i) {
      grow[i] += gl * ws.head_in[i];
      ws.g_a[i] += gl * row[i];
    }
  }
  if (s.blocks == 0) return loss;

  const std::size_t per_conv = s.channels * s.channels * s.kernel;
  for (std::size_t b = s.blocks; b-- > 0;) {
    const std::size_t len = s.length >> b;
    const std::size_t half = len / 2;
    const auto& x = ws.block_in[b];
    const auto& u = ws.block_u[b];
    const auto& v = ws.block_v[b];
    const auto& z = ws.block_z[b];
    const std::size_t n = s.channels * len;
    // g_b <- d/dz through pooling and activation.
    for (std::size_t c = 0; c < s.channels; ++c) {
      for (std::size_t t = 0; t < half; ++t) {
        const double gh = 0.5 * ws.g_a[c * half + t];
        const std::size_t i0 = c * len + 2 * t;
        ws.g_b[i0] = gh * silu_grad(z[i0]);
        ws.g_b[i0 + 1] = gh * silu_grad(z[i0 + 1]);
      }
    }
    const double* w1 = p + block_offset(b);
    const double* w2 = w1 + per_conv;
    double* gw1 = g + block_offset(b);
    double* gw2 = gw1 + per_conv;
    // g_c <- d/dv, then d/du in place.
    std::fill(ws.g_c.begin(), ws.g_c.begin() + static_cast<std::ptrdiff_t>(n), 0.0);
    conv_backward(w2, v.data(), ws.g_b.data(), gw2, ws.g_c.data(), s.channels, s.channels, len,
                  s.kernel);
    for (std::size_t i = 0; i < n; ++i) ws.g_c[i] *= silu_grad(u[i]);
    // g_a <- d/dx: skip path plus conv path.
    std::copy(ws.g_b.begin(), ws.g_b.begin() + static_cast<std::ptrdiff_t>(n), ws.g_a.begin());
    conv_backward(w1, x.data(), ws.g_c.data(), gw1, ws.g_a.data(), s.channels, s.channels, len,
                  s.kernel);
  }
  for (std::size_t i = 0; i < ws.stem_pre.size(); ++i) ws.g_a[i] *= silu_grad(ws.stem_pre[i]);
  conv_backward(p, ws.input.data(), ws.g_a.data(), g, nullptr, s.in_channels, s.channels, s.length,
                s.kernel);
  return loss;
}

Mlp::Mlp(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t outputs) {
  if (inputs == 0 || outputs == 0) throw ConfigError("mlp: empty input or output layer");
  sizes_.push_back(inputs);
  for (std::size_t h : hidden) {
    if (h == 0) throw ConfigError("mlp: hidden layer of width 0");
    sizes_.push_back(h);
  }
  sizes_.push_back(outputs);
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(offset);
    offset += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
  }
  params_.assign(offset, 0.0);
}

void Mlp::set_parameters(std::vector<double> params) {
  if (params.size() != params_.size()) throw CheckpointError("mlp parameter count mismatch");
  params_ = std::move(params);
}

void Mlp::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const std::size_t fan_in = sizes_[l];
    const std::size_t n_w = fan_in * sizes_[l + 1];
    const bool last = l + 2 == sizes_.size();
    const double sd = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n_w; ++i) params_[offsets_[l] + i] = sd * rng.normal();
    for (std::size_t i = 0; i < sizes_[l + 1]; ++i) params_[offsets_[l] + n_w + i] = 0.0;
  }
}

Mlp::Workspace Mlp::make_workspace() const {
  Workspace ws;
  ws.post.resize(sizes_.size() - 1);
  ws.pre.resize(sizes_.size() - 2);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) ws.post[l].resize(sizes_[l]);
  for (std::size_t l = 0; l + 2 < sizes_.size(); ++l) ws.pre[l].resize(sizes_[l + 1]);
  ws.output.resize(sizes_.back());
  const std::size_t widest = *std::max_element(sizes_.begin(), sizes_.end());
  ws.g_cur.resize(widest);
  ws.g_next.resize(widest);
  return ws;
}

std::span<const double> Mlp::forward(std::span<const double> input, Workspace& ws) const {
  if (input.size() != sizes_.front()) throw NumericError("mlp: bad input size");
  std::copy(input.begin(), input.end(), ws.post[0].begin());
  const std::size_t layers = sizes_.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t n_in = sizes_[l];
    const std::size_t n_out = sizes_[l + 1];
    const double* w = params_.data() + offsets_[l];
    const double* bias = w + n_in * n_out;
    const auto& x = ws.post[l];
    const bool last = l + 1 == layers;
    double* out = last ? ws.output.data() : ws.pre[l].data();
    for (std::size_t o = 0; o < n_out; ++o) {
      double acc = bias[o];
      const double* row = w + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * x[i];
      out[o] = acc;
    }
    if (!last) {
      for (std::size_t o = 0; o < n_out; ++o) ws.post[l + 1][o] = std::max(0.0, out[o]);
    }
  }
  return ws.output;
}

void Mlp::backward(std::span<const double> output_grad, Workspace& ws,
                   std::span<double> grad) const {
  if (output_grad.size() != sizes_.back() || grad.size() != params_.size()) {
    throw NumericError("mlp: gradient size mismatch");
  }
  std::copy(output_grad.begin(), output_grad.end(), ws.g_cur.begin());
  for (std::size_t l = sizes_.size() - 1; l-- > 0;) {
    const std::size_t n_in = sizes_[l];
    const std::size_t n_out = sizes_[l + 1];
    const double* w = params_.data() + offsets_[l];
    double* gw = grad.data() + offsets_[l];
    double* gb = gw + n_in * n_out;
    const auto& x = ws.post[l];
    std::fill(ws.g_next.begin(), ws.g_next.begin() + static_cast<std::ptrdiff_t>(n_in), 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double go = ws.g_cur[o];
      if (go == 0.0) continue;
      gb[o] += go;
      const double* row = w + o * n_in;
      double* grow = gw + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) {
        grow[i] += go * x[i];
        ws.g_next[i] += go * row[i];
      }
    }
    if (l == 0) break;
    const auto& pre = ws.pre[l - 1];
    for (std::size_t i = 0; i < n_in; ++i) ws.g_cur[i] = pre[i] > 0.0 ? ws.g_next[i] : 0.0;
  }
}

}  // namespace knitcity
