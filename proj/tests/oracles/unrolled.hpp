#pragma once

// Reverse-mode differentiation of the discrete Euler-Maruyama network, written
// with plain loops and no library numerics. It reads only the parameter layout
// (per layer: row-major W, then b; input [h; t / horizon]) and the update rule
//   h_{k+1} = h_k + f(h_k, t_k) dt + g(h_k) * dB_k,
// g = 0 | sigma | sigma h | sigma f.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

enum class Noise { zero, additive, multiplicative, dropout };

struct Mlp {
  std::vector<int> dims;  // {n + 1, hidden..., n}
  bool relu = false;
  double horizon = 1.0;
  Vec w;  // flat parameters

  std::size_t offset(std::size_t layer) const {
    std::size_t o = 0;
    for (std::size_t l = 0; l < layer; ++l) o += static_cast<std::size_t>(dims[l + 1]) * (dims[l] + 1);
    return o;
  }
};

struct Tape {
  std::vector<Vec> in;   // input of each layer
  std::vector<Vec> pre;  // pre-activation of each layer
};

inline double act(const Mlp& m, double x) { return m.relu ? (x > 0 ? x : 0) : std::tanh(x); }
inline double act_d(const Mlp& m, double x) {
  if (m.relu) return x > 0 ? 1.0 : 0.0;
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

inline Vec mlp_forward(const Mlp& m, const Vec& h, double t, Tape& tape) {
  const std::size_t layers = m.dims.size() - 1;
  tape.in.assign(layers, {});
  tape.pre.assign(layers, {});
  Vec x = h;
  x.push_back(t / m.horizon);
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = m.dims[l], out = m.dims[l + 1];
    const std::size_t o = m.offset(l);
    tape.in[l] = x;
    Vec y(static_cast<std::size_t>(out));
    for (int i = 0; i < out; ++i) {
      double s = 0.0;
      for (int j = 0; j < in; ++j) s += m.w[o + static_cast<std::size_t>(i * in + j)] * x[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = s + m.w[o + static_cast<std::size_t>(out * in + i)];
    }
    tape.pre[l] = y;
    if (l + 1 < layers) {
      for (auto& v : y) v = act(m, v);
    }
    x = y;
  }
  return x;
}

/// Adds cot^T df/dw into gw and returns cot^T df/dh.
inline Vec mlp_backward(const Mlp& m, const Tape& tape, const Vec& cot, Vec& gw) {
  const std::size_t layers = m.dims.size() - 1;
  Vec g = cot;
  for (std::size_t l = layers; l-- > 0;) {
    const int in = m.dims[l], out = m.dims[l + 1];
    const std::size_t o = m.offset(l);
    if (l + 1 < layers) {
      for (int i = 0; i < out; ++i) g[static_cast<std::size_t>(i)] *= act_d(m, tape.pre[l][static_cast<std::size_t>(i)]);
    }
    Vec gin(static_cast<std::size_t>(in), 0.0);
    for (int i = 0; i < out; ++i) {
      const double gi = g[static_cast<std::size_t>(i)];
      for (int j = 0; j < in; ++j) {
        gw[o + static_cast<std::size_t>(i * in + j)] += gi * tape.in[l][static_cast<std::size_t>(j)];
        gin[static_cast<std::size_t>(j)] += gi * m.w[o + static_cast<std::size_t>(i * in + j)];
      }
      gw[o + static_cast<std::size_t>(out * in + i)] += gi;
    }
    g = gin;
  }
  g.pop_back();  // drop the time feature
  return g;
}

struct Sde {
  Mlp drift;
  Noise noise = Noise::zero;
  double sigma = 0.0;
  double t_end = 1.0;
  std::size_t n_steps = 1;
  std::vector<Vec> dB;  // per step, empty for the ODE
};

struct Forward {
  std::vector<Vec> h;       // h_0..h_N
  std::vector<Tape> tapes;  // per step
  std::vector<Vec> f;
};

inline Forward sde_forward(const Sde& s, const Vec& h0) {
  Forward fw;
  const double dt = s.t_end / static_cast<double>(s.n_steps);
  fw.h.push_back(h0);
  for (std::size_t k = 0; k < s.n_steps; ++k) {
    Tape tape;
    const Vec& h = fw.h.back();
    const Vec f = mlp_forward(s.drift, h, static_cast<double>(k) * dt, tape);
    Vec next(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
      double g = 0.0;
      switch (s.noise) {
        case Noise::zero: g = 0.0; break;
        case Noise::additive: g = s.sigma; break;
        case Noise::multiplicative: g = s.sigma * h[i]; break;
        case Noise::dropout: g = s.sigma * f[i]; break;
      }
      const double db = s.noise == Noise::zero ? 0.0 : s.dB[k][i];
      next[i] = h[i] + f[i] * dt + g * db;
    }
    fw.tapes.push_back(tape);
    fw.f.push_back(f);
    fw.h.push_back(next);
  }
  return fw;
}

struct Backward {
  Vec grad_w;
  Vec grad_h0;
};

/// Given dL/dh_N, returns dL/dw and dL/dh_0.
inline Backward sde_backward(const Sde& s, const Forward& fw, const Vec& dh_T) {
  const double dt = s.t_end / static_cast<double>(s.n_steps);
  Backward b;
  b.grad_w.assign(s.drift.w.size(), 0.0);
  Vec a = dh_T;
  for (std::size_t k = s.n_steps; k-- > 0;) {
    Vec cot(a.size());
    Vec direct = a;  // identity part of dh_{k+1}/dh_k
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double db = s.noise == Noise::zero ? 0.0 : s.dB[k][i];
      cot[i] = a[i] * dt;
      if (s.noise == Noise::dropout) cot[i] += a[i] * s.sigma * db;
      if (s.noise == Noise::multiplicative) direct[i] += a[i] * s.sigma * db;
    }
    const Vec through_f = mlp_backward(s.drift, fw.tapes[k], cot, b.grad_w);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = direct[i] + through_f[i];
  }
  b.grad_h0 = a;
  return b;
}

}  // namespace oracle
