#pragma once

// Parameterised layers and the Adam optimiser used by every model.

#include "emotoken/core/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace emotoken::nn {

template <typename S>
using ParamList = std::vector<Parameter<S>*>;

template <typename S>
Mat<S> uniform(Index rows, Index cols, S bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  Mat<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

template <typename S>
Mat<S> normal(Index rows, Index cols, S stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Mat<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

template <typename S>
struct Linear {
  Parameter<S> weight;  // [in, out]
  Parameter<S> bias;    // [1, out]

  Linear() = default;
  Linear(const std::string& name, Index in, Index out, Rng& rng) {
    const S bound = S(1) / std::sqrt(static_cast<S>(in));
    weight = Parameter<S>(name + ".weight", uniform<S>(in, out, bound, rng));
    bias = Parameter<S>(name + ".bias", uniform<S>(1, out, bound, rng));
  }

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x) const {
    return ag::add_row(ag::matmul(x, t.param(weight)), t.param(bias));
  }

  Mat<S> apply(const Mat<S>& x) const {
    Mat<S> y;
    y.noalias() = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
  }

  void collect(ParamList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename S>
struct Conv2d {
  Parameter<S> weight;  // [k*k*in, out]
  Parameter<S> bias;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int k, int s, int p, Rng& rng)
      : kernel(k), stride(s), pad(p) {
    const S bound = S(1) / std::sqrt(static_cast<S>(k * k * in));
    weight = Parameter<S>(name + ".weight", uniform<S>(k * k * in, out, bound, rng));
    bias = Parameter<S>(name + ".bias", uniform<S>(1, out, bound, rng));
  }

  ag::ConvGeometry geometry(int batch, int h, int w) const { return {batch, h, w, kernel, stride, pad}; }

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x, int batch, int h, int w) const {
    return ag::conv2d(x, t.param(weight), t.param(bias), geometry(batch, h, w));
  }

  void collect(ParamList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename S>
struct LayerNorm {
  Parameter<S> gamma;
  Parameter<S> beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Index dim)
      : gamma(name + ".gamma", Mat<S>::Ones(1, dim)), beta(name + ".beta", Mat<S>::Zero(1, dim)) {}

  ag::Var<S> operator()(ag::Tape<S>& t, ag::Var<S> x) const {
    return ag::layer_norm(x, t.param(gamma), t.param(beta));
  }

  Mat<S> apply(const Mat<S>& x) const {
    const Index c = x.cols();
    Vec<S> mu = x.rowwise().mean();
    Mat<S> xc = x - mu.replicate(1, c);
    Vec<S> rstd = ((xc.array().square().rowwise().sum() / static_cast<S>(c)) + S(1e-5)).rsqrt();
    Mat<S> xhat = xc.array().colwise() * rstd.array();
    return (xhat.array().rowwise() * gamma.value.row(0).array()).rowwise() + beta.value.row(0).array();
  }

  void collect(ParamList<S>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <typename S>
struct Embedding {
  Parameter<S> table;  // [count, dim]

  Embedding() = default;
  Embedding(const std::string& name, Index count, Index dim, Rng& rng, S stddev = S(0.02))
      : table(name, normal<S>(count, dim, stddev, rng)) {}

  ag::Var<S> operator()(ag::Tape<S>& t, const std::vector<int>& index) const {
    return ag::gather_rows(t.param(table), index);
  }

  void collect(ParamList<S>& out) { out.push_back(&table); }
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }

  /// Applies one update using the accumulated gradients, then zeroes them.
  void step(const ParamList<S>& params, double grad_scale = 1.0) {
    ++step_;
    double norm2 = 0.0;
    for (auto* p : params)
      if (!p->frozen) norm2 += static_cast<double>(p->grad.squaredNorm());
    double factor = grad_scale;
    const double norm = std::sqrt(norm2) * grad_scale;
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) factor *= cfg_.grad_clip / norm;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S lr = static_cast<S>(cfg_.lr * std::sqrt(bc2) / bc1);
    const S eps = static_cast<S>(cfg_.eps);
    for (auto* p : params) {
      if (p->frozen) {
        p->zero_grad();
        continue;
      }
      if (p->adam_m.size() != p->value.size()) {
        p->adam_m = Mat<S>::Zero(p->value.rows(), p->value.cols());
        p->adam_v = Mat<S>::Zero(p->value.rows(), p->value.cols());
      }
      Mat<S> g = p->grad * static_cast<S>(factor);
      p->adam_m = b1 * p->adam_m + (S(1) - b1) * g;
      p->adam_v = b2 * p->adam_v + (S(1) - b2) * g.cwiseProduct(g);
      p->value.array() -= lr * p->adam_m.array() / (p->adam_v.array().sqrt() + eps);
      p->zero_grad();
    }
  }

  std::int64_t steps() const { return step_; }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
};

template <typename S>
void zero_grad(const ParamList<S>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename S>
void set_frozen(const ParamList<S>& params, bool frozen) {
  for (auto* p : params) p->frozen = frozen;
}

template <typename S>
std::size_t count(const ParamList<S>& params) {
  std::size_t n = 0;
  for (auto* p : params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

/// FNV-1a over the raw parameter bytes; used to prove that frozen modules
/// were not touched by later training.
template <typename S>
std::uint64_t fingerprint(const ParamList<S>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    const std::size_t n = static_cast<std::size_t>(p->value.size()) * sizeof(S);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace emotoken::nn
