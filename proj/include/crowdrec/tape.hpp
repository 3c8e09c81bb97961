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

// Reverse-mode automatic differentiation over dense double arrays. The tape is
// an append-only record of nodes, so node order is a topological order by
// construction and the backward pass visits each node exactly once, in
// reverse. Values are flat arrays; two-dimensional interpretations (matmul,
// bias rows) are supplied at the call site. Fused operations register through
// `custom`, which keeps exotic gradients (ray marching, rigid-motion
// kinematics) out of this header.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "crowdrec/core.hpp"

namespace crowdrec::diff {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Var leaf(std::vector<double> value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr});
    return Var{int(nodes_.size()) - 1};
  }
  Var leaf_scalar(double v) { return leaf(std::vector<double>{v}); }

  // Registers a fused node. `backward_fn(tape, out_id)` must accumulate into
  // the gradients of the node's inputs using grad(out_id).
  Var custom(std::vector<double> value,
             std::function<void(Tape&, int)> backward_fn) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backward_fn)});
    return Var{int(nodes_.size()) - 1};
  }

  // -- elementwise binary ---------------------------------------------------

  Var add(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check_same_size(va, vb, "add");
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return custom(std::move(out), [a, b](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      auto& ga = t.grad_mut(a);
      auto& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    });
  }

  Var sub(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check_same_size(va, vb, "sub");
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    return custom(std::move(out), [a, b](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      auto& ga = t.grad_mut(a);
      auto& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    check_same_size(va, vb, "mul");
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return custom(std::move(out), [a, b](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& va = t.value(a);
      const auto& vb = t.value(b);
      auto& ga = t.grad_mut(a);
      auto& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * vb[i];
        gb[i] += g[i] * va[i];
      }
    });
  }

  // -- elementwise with constants -------------------------------------------

  Var scale(Var a, double s) {
    std::vector<double> out(value(a));
    for (double& v : out) v *= s;
    return custom(std::move(out), [a, s](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
  }

  Var add_scalar(Var a, double s) {
    std::vector<double> out(value(a));
    for (double& v : out) v += s;
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }

  // Elementwise product with a constant array (masks, per-sample weights).
  Var mul_const(Var a, std::vector<double> w) {
    const auto& va = value(a);
    check_same_size(va, w, "mul_const");
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * w[i];
    return custom(std::move(out), [a, w = std::move(w)](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += w[i] * g[i];
    });
  }

  Var neg(Var a) { return scale(a, -1.0); }

  // -- elementwise unary ----------------------------------------------------

  Var exp_(Var a) {
    std::vector<double> out(value(a));
    for (double& v : out) v = std::exp(v);
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& y = t.value(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
  }

  // Domain errors surface as non-finite values; losses clamp their inputs.
  Var log_(Var a) {
    std::vector<double> out(value(a));
    for (double& v : out) v = std::log(v);
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& x = t.value(a);
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    });
  }

  // Subgradient 0 exactly at zero, so residual norms at a perfect fit do not
  // produce NaN.
  Var sqrt_(Var a) {
    std::vector<double> out(value(a));
    for (double& v : out) v = std::sqrt(v);
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& y = t.value(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (y[i] > 0.0) ga[i] += g[i] * 0.5 / y[i];
    });
  }

  Var abs_(Var a) {
    std::vector<double> out(value(a));
    for (double& v : out) v = std::abs(v);
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& x = t.value(a);
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
    });
  }

  Var tanh_(Var a) {
    std::vector<double> out(value(a));
    for (double& v : out) v = std::tanh(v);
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& y = t.value(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }

  Var logistic(Var a) {
    std::vector<double> out(value(a));
    for (double& v : out)
      v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                   : std::exp(v) / (1.0 + std::exp(v));
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& y = t.value(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }

  // log(1 + exp(x)), overflow-free at both tails.
  Var softplus(Var a) {
    std::vector<double> out(value(a));
    for (double& v : out) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    return custom(std::move(out), [a](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& x = t.value(a);
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                     : std::exp(x[i]) / (1.0 + std::exp(x[i]));
        ga[i] += g[i] * s;
      }
    });
  }

  // Smooth clamp: lo + softplus_tau(x - lo) - softplus_tau(x - hi). Strictly
  // monotone with derivative in (0, 1); approaches the hard clamp as tau -> 0.
  Var smooth_clamp(Var a, double lo, double hi, double tau) {
    if (!(hi > lo) || !(tau > 0.0))
      throw std::invalid_argument("smooth_clamp: need lo < hi and tau > 0");
    std::vector<double> out(value(a));
    for (double& v : out)
      v = lo + sp_tau(v - lo, tau) - sp_tau(v - hi, tau);
    return custom(std::move(out), [a, lo, hi, tau](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& x = t.value(a);
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * (sigma((x[i] - lo) / tau) - sigma((x[i] - hi) / tau));
    });
  }

  // Hard clamp; gradient passes through strictly inside (lo, hi) and is zero
  // on the boundary and outside. grad_check reports boundary evaluation
  // points as non-differentiable coordinates.
  Var clamp(Var a, double lo, double hi) {
    std::vector<double> out(value(a));
    for (double& v : out) v = std::min(std::max(v, lo), hi);
    return custom(std::move(out), [a, lo, hi](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& x = t.value(a);
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > lo && x[i] < hi) ga[i] += g[i];
    });
  }

  // -- reductions -----------------------------------------------------------

  Var sum(Var a) {
    double acc = 0.0;
    for (double v : value(a)) acc += v;
    return custom({acc}, [a](Tape& t, int o) {
      const double g = t.grad(Var{o})[0];
      for (double& v : t.grad_mut(a)) v += g;
    });
  }

  Var mean(Var a) {
    const std::size_t n = value(a).size();
    if (n == 0) throw std::invalid_argument("mean: empty operand");
    double acc = 0.0;
    for (double v : value(a)) acc += v;
    return custom({acc / double(n)}, [a, n](Tape& t, int o) {
      const double g = t.grad(Var{o})[0] / double(n);
      for (double& v : t.grad_mut(a)) v += g;
    });
  }

  // Smooth maximum over the whole operand: vmax + tau*log(mean exp((v-vmax)/tau)).
  // Bounded above by max(v); gradient is the softmax weighting, which sums to 1.
  Var smooth_max(Var a, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("smooth_max: tau must be > 0");
    const auto& va = value(a);
    if (va.empty()) throw std::invalid_argument("smooth_max: empty operand");
    double vmax = va[0];
    for (double v : va) vmax = std::max(vmax, v);
    double acc = 0.0;
    for (double v : va) acc += std::exp((v - vmax) / tau);
    const double out = vmax + tau * std::log(acc / double(va.size()));
    return custom({out}, [a, tau, vmax, acc](Tape& t, int o) {
      const double g = t.grad(Var{o})[0];
      const auto& x = t.value(a);
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < x.size(); ++i)
        ga[i] += g * std::exp((x[i] - vmax) / tau) / acc;
    });
  }

  // -- linear algebra -------------------------------------------------------

  // a is m*k row-major, b is k*n row-major; result m*n.
  Var matmul(Var a, Var b, int m, int k, int n) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.size() != std::size_t(m) * k || vb.size() != std::size_t(k) * n)
      throw std::invalid_argument("matmul: dimension mismatch");
    std::vector<double> out(std::size_t(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const double x = va[std::size_t(i) * k + p];
        if (x == 0.0) continue;
        const double* brow = vb.data() + std::size_t(p) * n;
        double* orow = out.data() + std::size_t(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
      }
    return custom(std::move(out), [a, b, m, k, n](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      const auto& va = t.value(a);
      const auto& vb = t.value(b);
      auto& ga = t.grad_mut(a);
      auto& gb = t.grad_mut(b);
      // dA = dC * B^T
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g.data() + std::size_t(i) * n;
          const double* brow = vb.data() + std::size_t(p) * n;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[std::size_t(i) * k + p] += acc;
        }
      // dB = A^T * dC
      for (int i = 0; i < m; ++i) {
        const double* arow = va.data() + std::size_t(i) * k;
        const double* grow = g.data() + std::size_t(i) * n;
        for (int p = 0; p < k; ++p) {
          const double x = arow[p];
          if (x == 0.0) continue;
          double* brow = gb.data() + std::size_t(p) * n;
          for (int j = 0; j < n; ++j) brow[j] += x * grow[j];
        }
      }
    });
  }

  // a is m*n row-major; adds the length-n row vector b to every row.
  Var add_rowvec(Var a, Var b, int m, int n) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.size() != std::size_t(m) * n || vb.size() != std::size_t(n))
      throw std::invalid_argument("add_rowvec: dimension mismatch");
    std::vector<double> out(va);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out[std::size_t(i) * n + j] += vb[j];
    return custom(std::move(out), [a, b, m, n](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      auto& ga = t.grad_mut(a);
      auto& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[j] += g[std::size_t(i) * n + j];
    });
  }

  Var slice(Var a, std::size_t offset, std::size_t len) {
    const auto& va = value(a);
    if (offset + len > va.size())
      throw std::invalid_argument("slice: range out of bounds");
    std::vector<double> out(va.begin() + offset, va.begin() + offset + len);
    return custom(std::move(out), [a, offset](Tape& t, int o) {
      const auto& g = t.grad(Var{o});
      auto& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
    });
  }

  // -- grid sampling ----------------------------------------------------------

  // Trilinear gather from a grid-valued node at fixed sample points. The
  // points are constants; gradients flow to the grid values through the
  // interpolation weights.
  Var sample_trilinear(Var grid, const VoxelLattice& lattice,
                       const std::vector<Point3>& points, bool clamp = true) {
    const auto& vg = value(grid);
    if (vg.size() != lattice.node_count())
      throw std::invalid_argument("sample_trilinear: grid/lattice mismatch");
    std::vector<detail::TrilinearCell> cells(points.size());
    std::vector<double> out(points.size());
    for (std::size_t p = 0; p < points.size(); ++p) {
      cells[p] = detail::locate_trilinear(lattice, points[p], clamp);
      const auto& c = cells[p];
      double acc = 0.0;
      for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
          for (int di = 0; di < 2; ++di) {
            const double w = (di ? c.fx : 1 - c.fx) * (dj ? c.fy : 1 - c.fy) *
                             (dk ? c.fz : 1 - c.fz);
            acc += w * vg[lattice.node_index(c.i0 + di, c.j0 + dj, c.k0 + dk)];
          }
      out[p] = acc;
    }
    return custom(std::move(out),
                  [grid, lattice, cells = std::move(cells)](Tape& t, int o) {
                    const auto& g = t.grad(Var{o});
                    auto& gg = t.grad_mut(grid);
                    for (std::size_t p = 0; p < cells.size(); ++p) {
                      const auto& c = cells[p];
                      for (int dk = 0; dk < 2; ++dk)
                        for (int dj = 0; dj < 2; ++dj)
                          for (int di = 0; di < 2; ++di) {
                            const double w = (di ? c.fx : 1 - c.fx) *
                                             (dj ? c.fy : 1 - c.fy) *
                                             (dk ? c.fz : 1 - c.fz);
                            gg[lattice.node_index(c.i0 + di, c.j0 + dj,
                                                  c.k0 + dk)] += w * g[p];
                          }
                    }
                  });
  }

  // Bilinear gather from an image-valued node (width*height row-major) at
  // fixed pixel coordinates. Same convention as image.hpp: pixel centers at
  // (x + 0.5, y + 0.5), border clamped. Gradients flow to the pixel values.
  Var sample_bilinear(Var img, int width, int height,
                      const std::vector<std::array<double, 2>>& uv) {
    const auto& vi = value(img);
    if (width <= 0 || height <= 0 ||
        vi.size() != std::size_t(width) * std::size_t(height))
      throw std::invalid_argument("sample_bilinear: image size mismatch");
    struct Cell {
      int x0, y0, x1, y1;
      double fx, fy;
    };
    std::vector<Cell> cells(uv.size());
    std::vector<double> out(uv.size());
    for (std::size_t p = 0; p < uv.size(); ++p) {
      const double x = std::min(std::max(uv[p][0] - 0.5, 0.0), double(width - 1));
      const double y = std::min(std::max(uv[p][1] - 0.5, 0.0), double(height - 1));
      Cell c;
      c.x0 = std::min(int(x), width - 2 >= 0 ? width - 2 : 0);
      c.y0 = std::min(int(y), height - 2 >= 0 ? height - 2 : 0);
      c.x1 = std::min(c.x0 + 1, width - 1);
      c.y1 = std::min(c.y0 + 1, height - 1);
      c.fx = std::min(std::max(x - c.x0, 0.0), 1.0);
      c.fy = std::min(std::max(y - c.y0, 0.0), 1.0);
      cells[p] = c;
      const auto px = [&](int xx, int yy) {
        return vi[std::size_t(yy) * width + xx];
      };
      const double a = px(c.x0, c.y0) * (1 - c.fx) + px(c.x1, c.y0) * c.fx;
      const double b = px(c.x0, c.y1) * (1 - c.fx) + px(c.x1, c.y1) * c.fx;
      out[p] = a * (1 - c.fy) + b * c.fy;
    }
    return custom(std::move(out),
                  [img, width, cells = std::move(cells)](Tape& t, int o) {
                    const auto& g = t.grad(Var{o});
                    auto& gi = t.grad_mut(img);
                    for (std::size_t p = 0; p < cells.size(); ++p) {
                      const auto& c = cells[p];
                      const double gp = g[p];
                      gi[std::size_t(c.y0) * width + c.x0] +=
                          gp * (1 - c.fx) * (1 - c.fy);
                      gi[std::size_t(c.y0) * width + c.x1] +=
                          gp * c.fx * (1 - c.fy);
                      gi[std::size_t(c.y1) * width + c.x0] +=
                          gp * (1 - c.fx) * c.fy;
                      gi[std::size_t(c.y1) * width + c.x1] += gp * c.fx * c.fy;
                    }
                  });
  }

  // -- engine -----------------------------------------------------------------

  // Seeds d(root)/d(root) = 1 and sweeps the tape once in reverse order.
  void backward(Var root) {
    if (!root.valid() || std::size_t(root.id) >= nodes_.size())
      throw std::invalid_argument("backward: invalid root");
    if (nodes_[root.id].value.size() != 1)
      throw std::invalid_argument("backward: root must be scalar");
    for (auto& n : nodes_) n.grad.assign(n.value.size(), 0.0);
    nodes_[root.id].grad[0] = 1.0;
    for (int i = root.id; i >= 0; --i)
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }

  const std::vector<double>& value(Var v) const { return node(v).value; }
  const std::vector<double>& grad(Var v) const { return node(v).grad; }
  std::vector<double>& grad_mut(Var v) { return nodes_.at(v.id).grad; }
  double scalar(Var v) const {
    const auto& val = value(v);
    if (val.size() != 1) throw std::invalid_argument("scalar: not a scalar node");
    return val[0];
  }

  std::size_t size() const { return nodes_.size(); }
  void reset() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void(Tape&, int)> backward;
  };

  const Node& node(Var v) const { return nodes_.at(v.id); }

  static void check_same_size(const std::vector<double>& a,
                              const std::vector<double>& b, const char* op) {
    if (a.size() != b.size())
      throw std::invalid_argument(std::string(op) + ": size mismatch");
  }

  static double sigma(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                    : std::exp(z) / (1.0 + std::exp(z));
  }
  // tau * log(1 + exp(z / tau)), overflow-free.
  static double sp_tau(double z, double tau) {
    const double s = z / tau;
    return tau * (std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s))));
  }

  std::vector<Node> nodes_;
};

}  // namespace crowdrec::diff
