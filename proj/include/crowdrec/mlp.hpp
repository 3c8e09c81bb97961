// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Small fully-connected networks over a single packed parameter vector, so a
// whole model is one tape leaf, one optimizer state, and one checkpoint blob.
// Layout per layer: weights (fan_in x fan_out, row-major), then biases.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "crowdrec/core.hpp"
#include "crowdrec/tape.hpp"

namespace crowdrec {

enum class Activation { kIdentity, kTanh, kLogistic };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kTanh: return "tanh";
    case Activation::kLogistic: return "logistic";
  }
  throw std::logic_error("activation_name: unknown activation");
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::kIdentity;
  if (s == "tanh") return Activation::kTanh;
  if (s == "logistic") return Activation::kLogistic;
  throw std::invalid_argument("unknown activation: " + s);
}

struct MlpSpec {
  std::vector<int> layers;  // sizes, input first; at least {in, out}
  Activation hidden = Activation::kTanh;
  Activation output = Activation::kIdentity;

  void validate() const {
    if (layers.size() < 2)
      throw std::invalid_argument("MlpSpec: need at least input and output");
    for (int w : layers)
      if (w <= 0) throw std::invalid_argument("MlpSpec: layer width must be > 0");
  }

  int input_width() const { return layers.front(); }
  int output_width() const { return layers.back(); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layers.size(); ++l)
      n += std::size_t(layers[l]) * layers[l + 1] + layers[l + 1];
    return n;
  }

  bool operator==(const MlpSpec&) const = default;
};

class Mlp {
 public:
  Mlp(MlpSpec spec, std::vector<double> params)
      : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    if (params_.size() != spec_.param_count())
      throw std::invalid_argument("Mlp: parameter vector size mismatch");
  }

  // Glorot-uniform weights, zero biases.
  static Mlp init(MlpSpec spec, std::uint64_t seed) {
    spec.validate();
    std::vector<double> p(spec.param_count(), 0.0);
    Rng rng(seed);
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < spec.layers.size(); ++l) {
      const int fan_in = spec.layers[l];
      const int fan_out = spec.layers[l + 1];
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (int i = 0; i < fan_in * fan_out; ++i)
        p[off + i] = rng.uniform(-limit, limit);
      off += std::size_t(fan_in) * fan_out + fan_out;  // biases stay zero
    }
    return Mlp(std::move(spec), std::move(p));
  }

  const MlpSpec& spec() const { return spec_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& params_mut() { return params_; }

  // Batched forward without recording; input is n rows of input_width().
  std::vector<double> eval(const std::vector<double>& input, int n) const {
    check_batch(input, n);
    std::vector<double> cur(input);
    std::vector<double> next;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < spec_.layers.size(); ++l) {
      const int in = spec_.layers[l];
      const int out = spec_.layers[l + 1];
      const double* w = params_.data() + off;
      const double* b = w + std::size_t(in) * out;
      next.assign(std::size_t(n) * out, 0.0);
      for (int r = 0; r < n; ++r) {
        const double* x = cur.data() + std::size_t(r) * in;
        double* y = next.data() + std::size_t(r) * out;
        for (int j = 0; j < out; ++j) y[j] = b[j];
        for (int i = 0; i < in; ++i) {
          const double xi = x[i];
          if (xi == 0.0) continue;
          const double* wrow = w + std::size_t(i) * out;
          for (int j = 0; j < out; ++j) y[j] += xi * wrow[j];
        }
      }
      const bool last = l + 2 == spec_.layers.size();
      apply_activation(next, last ? spec_.output : spec_.hidden);
      cur.swap(next);
      off += std::size_t(in) * out + out;
    }
    return cur;
  }

  // Tape forward against a parameter leaf (so gradients land in one vector).
  // `input` is a constant batch; use forward_var when inputs need gradients.
  diff::Var forward(diff::Tape& t, diff::Var params,
                    const std::vector<double>& input, int n) const {
    check_batch(input, n);
    return forward_var(t, params, t.leaf(input), n);
  }

  diff::Var forward_var(diff::Tape& t, diff::Var params, diff::Var input,
                        int n) const {
    if (t.value(params).size() != params_.size())
      throw std::invalid_argument("Mlp::forward: parameter leaf size mismatch");
    diff::Var cur = input;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < spec_.layers.size(); ++l) {
      const int in = spec_.layers[l];
      const int out = spec_.layers[l + 1];
      const diff::Var w = t.slice(params, off, std::size_t(in) * out);
      const diff::Var b = t.slice(params, off + std::size_t(in) * out, out);
      cur = t.add_rowvec(t.matmul(cur, w, n, in, out), b, n, out);
      const bool last = l + 2 == spec_.layers.size();
      switch (last ? spec_.output : spec_.hidden) {
        case Activation::kIdentity: break;
        case Activation::kTanh: cur = t.tanh_(cur); break;
        case Activation::kLogistic: cur = t.logistic(cur); break;
      }
      off += std::size_t(in) * out + out;
    }
    return cur;
  }

 private:
  void check_batch(const std::vector<double>& input, int n) const {
    if (n <= 0 || input.size() != std::size_t(n) * spec_.input_width())
      throw std::invalid_argument("Mlp: batch size mismatch");
  }

  static void apply_activation(std::vector<double>& v, Activation a) {
    switch (a) {
      case Activation::kIdentity: return;
      case Activation::kTanh:
        for (double& x : v) x = std::tanh(x);
        return;
      case Activation::kLogistic:
        for (double& x : v)
          x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                       : std::exp(x) / (1.0 + std::exp(x));
        return;
    }
  }

  MlpSpec spec_;
  std::vector<double> params_;
};

// -- optimizers --------------------------------------------------------------

// Fixed-step gradient descent with stepwise decay; optional heavy-ball term.
struct GdConfig {
  double lr = 0.05;
  double decay = 0.5;     // multiplier applied every decay_every steps
  int decay_every = 500;  // <= 0 disables decay
  double momentum = 0.0;
};

class GradientDescent {
 public:
  explicit GradientDescent(GdConfig cfg) : cfg_(cfg) {
    if (cfg.lr <= 0.0 || cfg.decay <= 0.0 || cfg.momentum < 0.0 ||
        cfg.momentum >= 1.0)
      throw std::invalid_argument("GradientDescent: bad config");
  }

  double current_lr() const {
    if (cfg_.decay_every <= 0) return cfg_.lr;
    return cfg_.lr * std::pow(cfg_.decay, double(step_ / cfg_.decay_every));
  }

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    if (params.size() != grad.size())
      throw std::invalid_argument("GradientDescent: size mismatch");
    const double lr = current_lr();
    if (vel_.size() != params.size()) vel_.assign(params.size(), 0.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      vel_[i] = cfg_.momentum * vel_[i] - lr * grad[i];
      params[i] += vel_[i];
    }
    ++step_;
  }

  int steps_taken() const { return step_; }

 private:
  GdConfig cfg_;
  int step_ = 0;
  std::vector<double> vel_;
};

// Adam with bias correction; used where a loss landscape is too anisotropic
// for a single global step size.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {
    if (cfg.lr <= 0.0 || cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 ||
        cfg.beta2 < 0.0 || cfg.beta2 >= 1.0 || cfg.eps <= 0.0)
      throw std::invalid_argument("Adam: bad config");
  }

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    if (params.size() != grad.size())
      throw std::invalid_argument("Adam: size mismatch");
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      params[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

  int steps_taken() const { return step_; }

 private:
  AdamConfig cfg_;
  int step_ = 0;
  std::vector<double> m_, v_;
};

// -- checkpoints ---------------------------------------------------------------

// On disk: 8-byte little-endian header length, JSON header (architecture,
// seed, step, count), then the raw little-endian parameter doubles.

struct Checkpoint {
  MlpSpec spec;
  std::vector<double> params;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
};

namespace detail {

inline bool host_little_endian() {
  const std::uint16_t probe = 1;
  return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Mlp& mlp,
                            std::uint64_t seed, std::int64_t step) {
  if (!detail::host_little_endian())
    throw std::runtime_error("save_checkpoint: big-endian hosts unsupported");
  nlohmann::json header;
  header["architecture"] = {
      {"layers", mlp.spec().layers},
      {"hidden", activation_name(mlp.spec().hidden)},
      {"output", activation_name(mlp.spec().output)},
  };
  header["seed"] = seed;
  header["step"] = step;
  header["param_count"] = mlp.params().size();
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), std::streamsize(text.size()));
  out.write(reinterpret_cast<const char*>(mlp.params().data()),
            std::streamsize(mlp.params().size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  if (!detail::host_little_endian())
    throw std::runtime_error("load_checkpoint: big-endian hosts unsupported");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1u << 20))
    throw std::runtime_error("load_checkpoint: bad header length: " + path);
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw std::runtime_error("load_checkpoint: truncated header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_checkpoint: bad header json: " + path +
                             ": " + e.what());
  }
  Checkpoint ck;
  const auto& arch = header.at("architecture");
  ck.spec.layers = arch.at("layers").get<std::vector<int>>();
  ck.spec.hidden = activation_from_name(arch.at("hidden").get<std::string>());
  ck.spec.output = activation_from_name(arch.at("output").get<std::string>());
  ck.spec.validate();
  ck.seed = header.at("seed").get<std::uint64_t>();
  ck.step = header.at("step").get<std::int64_t>();
  const auto count = header.at("param_count").get<std::size_t>();
  if (count != ck.spec.param_count())
    throw std::runtime_error("load_checkpoint: header count disagrees with architecture: " + path);
  ck.params.resize(count);
  in.read(reinterpret_cast<char*>(ck.params.data()),
          std::streamsize(count * sizeof(double)));
  if (!in) throw std::runtime_error("load_checkpoint: truncated parameters: " + path);
  return ck;
}

}  // namespace crowdrec
