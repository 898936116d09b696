#pragma once

#include "emotoken/core/nn.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace testing {

using emotoken::Index;
using emotoken::Mat;
namespace ag = emotoken::ag;
namespace nn = emotoken::nn;

/// |a - n| / max(|a| + |n|, floor) over the stacked gradient vectors.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn_ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn_ += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn_), 1e-12);
}

using InputFn = std::function<ag::Var<double>(ag::Tape<double>&, const std::vector<ag::Var<double>>&)>;

/// Gradient of f with respect to every input entry vs central differences.
inline double input_gradcheck(const std::vector<Mat<double>>& inputs, const InputFn& f, double h = 1e-6) {
  std::vector<double> analytic, numeric;
  {
    ag::Tape<double> t;
    std::vector<ag::Var<double>> vars;
    for (const auto& m : inputs) vars.push_back(t.variable(m));
    auto out = f(t, vars);
    t.backward(out);
    for (const auto& v : vars) {
      const Mat<double> g = t.gradient(v);
      analytic.insert(analytic.end(), g.data(), g.data() + g.size());
    }
  }
  std::vector<Mat<double>> x = inputs;
  auto eval = [&] {
    ag::Tape<double> t(false);
    std::vector<ag::Var<double>> vars;
    for (const auto& m : x) vars.push_back(t.constant(m));
    return f(t, vars).scalar();
  };
  for (auto& m : x)
    for (Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      m.data()[i] = v + h;
      const double up = eval();
      m.data()[i] = v - h;
      const double down = eval();
      m.data()[i] = v;
      numeric.push_back((up - down) / (2 * h));
    }
  return relative_error(analytic, numeric);
}

using LossFn = std::function<ag::Var<double>(ag::Tape<double>&)>;

/// Gradient with respect to (a strided subset of) each parameter's entries.
inline double param_gradcheck(const nn::ParamList<double>& params, const LossFn& f, int per_param = 12,
                              double h = 1e-6) {
  nn::zero_grad(params);
  {
    ag::Tape<double> t;
    auto out = f(t);
    t.backward(out);
  }
  std::vector<double> analytic, numeric;
  auto eval = [&] {
    ag::Tape<double> t(false);
    return f(t).scalar();
  };
  for (auto* p : params) {
    if (p->frozen) continue;
    const Index n = p->value.size();
    const Index stride = std::max<Index>(1, n / per_param);
    for (Index i = 0; i < n; i += stride) {
      analytic.push_back(p->grad.data()[i]);
      const double v = p->value.data()[i];
      p->value.data()[i] = v + h;
      const double up = eval();
      p->value.data()[i] = v - h;
      const double down = eval();
      p->value.data()[i] = v;
      numeric.push_back((up - down) / (2 * h));
    }
  }
  nn::zero_grad(params);
  return relative_error(analytic, numeric);
}

}  // namespace testing
