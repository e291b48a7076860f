#include "mvc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "mvc/errors.hpp"

namespace mvc {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!same_shape(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

Node* parent_node(Node& self, std::size_t i) { return self.parents[i].get(); }

}  // namespace

Var Var::leaf(Tensor value, bool requires_grad, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->label = std::move(name);
  return Var(n);
}

double Var::scalar() const {
  if (!node_ || node_->value.size() != 1) {
    throw ShapeError("scalar() requires a single-element tensor");
  }
  return node_->value.data[0];
}

Var make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn,
              std::string label) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->label = std::move(label);
  bool req = false;
  for (const auto& p : n->parents) req = req || (p && p->requires_grad);
  n->requires_grad = req;
  if (req) n->backward_fn = std::move(backward_fn);
  return Var(n);
}

void backward(const Var& root) {
  if (!root.defined()) throw ShapeError("backward: undefined root");
  Node* r = root.node().get();
  if (r->value.size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_to_string(r->value.shape));
  }
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  visited.insert(r);
  stack.emplace_back(r, 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      Node* p = top.first->parents[top.second++].get();
      if (p && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(top.first);
      stack.pop_back();
    }
  }
  r->ensure_grad();
  r->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Var unary_elementwise(const Var& a, const char* label, Fwd fwd, Bwd dydx) {
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = fwd(ad[i]);
  return make_node(
      std::move(out), {a.node()},
      [dydx](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        const auto& x = p->value.data;
        const auto& y = self.value.data;
        for (std::size_t i = 0; i < x.size(); ++i) p->grad[i] += self.grad[i] * dydx(x[i], y[i]);
      },
      label);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = ad[i] + bd[i];
  return make_node(
      std::move(out), {a.node(), b.node()},
      [](Node& self) {
        for (int k = 0; k < 2; ++k) {
          Node* p = parent_node(self, static_cast<std::size_t>(k));
          if (!p->requires_grad) continue;
          p->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = ad[i] - bd[i];
  return make_node(
      std::move(out), {a.node(), b.node()},
      [](Node& self) {
        Node* pa = parent_node(self, 0);
        Node* pb = parent_node(self, 1);
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = ad[i] * bd[i];
  return make_node(
      std::move(out), {a.node(), b.node()},
      [](Node& self) {
        Node* pa = parent_node(self, 0);
        Node* pb = parent_node(self, 1);
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * pb->value.data[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] += self.grad[i] * pa->value.data[i];
        }
      },
      "mul");
}

Var divide(const Var& a, const Var& b) {
  check_same_shape(a, b, "divide");
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = ad[i] / bd[i];
  return make_node(
      std::move(out), {a.node(), b.node()},
      [](Node& self) {
        Node* pa = parent_node(self, 0);
        Node* pb = parent_node(self, 1);
        const auto& av = pa->value.data;
        const auto& bv = pb->value.data;
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] / bv[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pb->grad[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
        }
      },
      "divide");
}

Var add_scalar(const Var& a, double c) {
  return unary_elementwise(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double c) {
  return unary_elementwise(
      a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Var mul_const(const Var& a, const Tensor& c) {
  if (!same_shape(a.shape(), c.shape)) {
    throw ShapeError("mul_const: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(c.shape));
  }
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = ad[i] * c.data[i];
  std::vector<double> cdata = c.data;
  return make_node(
      std::move(out), {a.node()},
      [cdata = std::move(cdata)](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * cdata[i];
      },
      "mul_const");
}

Var add_const(const Var& a, const Tensor& c) {
  if (!same_shape(a.shape(), c.shape)) {
    throw ShapeError("add_const: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(c.shape));
  }
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = ad[i] + c.data[i];
  return make_node(
      std::move(out), {a.node()},
      [](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      },
      "add_const");
}

Var square(const Var& a) {
  return unary_elementwise(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs_value(const Var& a) {
  return unary_elementwise(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var relu(const Var& a) {
  return unary_elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  return unary_elementwise(
      a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& a) {
  return unary_elementwise(
      a, "sigmoid",
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh_op(const Var& a) {
  return unary_elementwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var log_op(const Var& a) {
  return unary_elementwise(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softplus(const Var& a) {
  return unary_elementwise(
      a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

Var normal_cdf(const Var& a) {
  return unary_elementwise(
      a, "normal_cdf", [](double x) { return 0.5 * std::erfc(-x * kInvSqrt2); },
      [](double x, double) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Var clamp_min(const Var& a, double lo) {
  // Gradient passes when above the bound or when the downstream gradient
  // would pull the value up (lets clamped parameters escape the bound).
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = std::max(ad[i], lo);
  return make_node(
      std::move(out), {a.node()},
      [lo](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        const auto& x = p->value.data;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double g = self.grad[i];
          if (x[i] >= lo || g < 0.0) p->grad[i] += g;
        }
      },
      "clamp_min");
}

Var clamp_range(const Var& a, double lo, double hi) {
  Tensor out(a.shape());
  const auto& ad = a.value().data;
  for (std::size_t i = 0; i < ad.size(); ++i) out.data[i] = std::clamp(ad[i], lo, hi);
  return make_node(
      std::move(out), {a.node()},
      [lo, hi](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        const auto& x = p->value.data;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double g = self.grad[i];
          const bool pass = (x[i] >= lo && x[i] <= hi) || (x[i] < lo && g < 0.0) || (x[i] > hi && g > 0.0);
          if (pass) p->grad[i] += g;
        }
      },
      "clamp_range");
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  Tensor out(Shape{1});
  out.data[0] = s;
  return make_node(
      std::move(out), {a.node()},
      [](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = self.grad[0];
        for (auto& v : p->grad) v += g;
      },
      "sum");
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data) s += v;
  Tensor out(Shape{1});
  out.data[0] = s / n;
  return make_node(
      std::move(out), {a.node()},
      [n](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = self.grad[0] / n;
        for (auto& v : p->grad) v += g;
      },
      "mean");
}

// ---------------------------------------------------------------------------
// structured ops
// ---------------------------------------------------------------------------

Var slice_channels(const Var& a, int from, int to) {
  const Tensor& in = a.value();
  if (in.shape.size() != 4) throw ShapeError("slice_channels: expected NCHW input");
  const int B = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  if (from < 0 || to > C || from >= to) {
    throw ShapeError("slice_channels: bad range [" + std::to_string(from) + "," + std::to_string(to) +
                     ") for C=" + std::to_string(C));
  }
  Tensor out(Shape{B, to - from, H, W});
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    for (int c = from; c < to; ++c) {
      const double* src = in.data.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
      double* dst = out.data.data() + (static_cast<std::int64_t>(b) * (to - from) + (c - from)) * plane;
      std::copy(src, src + plane, dst);
    }
  }
  return make_node(
      std::move(out), {a.node()},
      [from, to, B, C, plane](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int b = 0; b < B; ++b) {
          for (int c = from; c < to; ++c) {
            const double* g = self.grad.data() + (static_cast<std::int64_t>(b) * (to - from) + (c - from)) * plane;
            double* dst = p->grad.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) dst[i] += g[i];
          }
        }
      },
      "slice_channels");
}

Var broadcast_channel(const Var& param, const Shape& like) {
  const Tensor& pv = param.value();
  if (like.size() != 4) throw ShapeError("broadcast_channel: target must be NCHW");
  const int B = like[0], C = like[1], H = like[2], W = like[3];
  if (pv.size() != C) {
    throw ShapeError("broadcast_channel: parameter length " + std::to_string(pv.size()) +
                     " vs channels " + std::to_string(C));
  }
  Tensor out(like);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      double* dst = out.data.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
      std::fill(dst, dst + plane, pv.data[static_cast<std::size_t>(c)]);
    }
  }
  return make_node(
      std::move(out), {param.node()},
      [B, C, plane](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int b = 0; b < B; ++b) {
          for (int c = 0; c < C; ++c) {
            const double* g = self.grad.data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) acc += g[i];
            p->grad[static_cast<std::size_t>(c)] += acc;
          }
        }
      },
      "broadcast_channel");
}

namespace {

struct ConvDims {
  int B, Cin, H, W, Cout, K, Ho, Wo;
};

ConvDims conv_dims(const Tensor& in, const Tensor& w, int stride, int padding) {
  if (in.shape.size() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_to_string(in.shape));
  if (w.shape.size() != 4 || w.shape[2] != w.shape[3]) {
    throw ShapeError("conv2d: weight must be (out,in,K,K), got " + shape_to_string(w.shape));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  ConvDims d{};
  d.B = in.shape[0];
  d.Cin = in.shape[1];
  d.H = in.shape[2];
  d.W = in.shape[3];
  d.Cout = w.shape[0];
  d.K = w.shape[2];
  if (w.shape[1] != d.Cin) {
    throw ShapeError("conv2d: weight expects " + std::to_string(w.shape[1]) + " input channels, input has " +
                     std::to_string(d.Cin));
  }
  if (d.H + 2 * padding < d.K || d.W + 2 * padding < d.K) {
    throw ShapeError("conv2d: spatial extent " + std::to_string(d.H) + "x" + std::to_string(d.W) +
                     " too small for kernel " + std::to_string(d.K) + " with padding " +
                     std::to_string(padding));
  }
  d.Ho = (d.H + 2 * padding - d.K) / stride + 1;
  d.Wo = (d.W + 2 * padding - d.K) / stride + 1;
  return d;
}

inline int first_valid(int offset, int stride) {
  // Smallest o >= 0 with o*stride - offset >= 0.
  return offset <= 0 ? 0 : (offset + stride - 1) / stride;
}

}  // namespace

Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int padding) {
  const Tensor& in = input.value();
  const Tensor& w = weight.value();
  const ConvDims d = conv_dims(in, w, stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().size() != d.Cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.value().size()) + " vs out channels " +
                     std::to_string(d.Cout));
  }

  Tensor out(Shape{d.B, d.Cout, d.Ho, d.Wo});
  const double* ind = in.data.data();
  const double* wd = w.data.data();
  double* od = out.data.data();
  for (int b = 0; b < d.B; ++b) {
    for (int oc = 0; oc < d.Cout; ++oc) {
      double* oplane = od + (static_cast<std::int64_t>(b) * d.Cout + oc) * d.Ho * d.Wo;
      const double bv = has_bias ? bias.value().data[static_cast<std::size_t>(oc)] : 0.0;
      std::fill(oplane, oplane + static_cast<std::int64_t>(d.Ho) * d.Wo, bv);
      for (int ic = 0; ic < d.Cin; ++ic) {
        const double* iplane = ind + (static_cast<std::int64_t>(b) * d.Cin + ic) * d.H * d.W;
        const double* wk = wd + (static_cast<std::int64_t>(oc) * d.Cin + ic) * d.K * d.K;
        for (int ky = 0; ky < d.K; ++ky) {
          for (int kx = 0; kx < d.K; ++kx) {
            const double wv = wk[ky * d.K + kx];
            const int oy_lo = first_valid(padding - ky, stride);
            const int oy_hi = std::min(d.Ho - 1, (d.H - 1 - ky + padding) / stride);
            const int ox_lo = first_valid(padding - kx, stride);
            const int ox_hi = std::min(d.Wo - 1, (d.W - 1 - kx + padding) / stride);
            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
              const int iy = oy * stride - padding + ky;
              const double* irow = iplane + static_cast<std::int64_t>(iy) * d.W - padding + kx;
              double* orow = oplane + static_cast<std::int64_t>(oy) * d.Wo;
              for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * irow[ox * stride];
            }
          }
        }
      }
    }
  }

  std::vector<NodePtr> parents = {input.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_node(
      std::move(out), std::move(parents),
      [d, stride, padding, has_bias](Node& self) {
        Node* pin = parent_node(self, 0);
        Node* pw = parent_node(self, 1);
        Node* pb = has_bias ? parent_node(self, 2) : nullptr;
        const double* g = self.grad.data();
        const double* ind = pin->value.data.data();
        const double* wd = pw->value.data.data();

        if (pin->requires_grad) {
          pin->ensure_grad();
          double* gin = pin->grad.data();
          for (int b = 0; b < d.B; ++b) {
            for (int oc = 0; oc < d.Cout; ++oc) {
              const double* gplane = g + (static_cast<std::int64_t>(b) * d.Cout + oc) * d.Ho * d.Wo;
              for (int ic = 0; ic < d.Cin; ++ic) {
                double* giplane = gin + (static_cast<std::int64_t>(b) * d.Cin + ic) * d.H * d.W;
                const double* wk = wd + (static_cast<std::int64_t>(oc) * d.Cin + ic) * d.K * d.K;
                for (int ky = 0; ky < d.K; ++ky) {
                  for (int kx = 0; kx < d.K; ++kx) {
                    const double wv = wk[ky * d.K + kx];
                    const int oy_lo = first_valid(padding - ky, stride);
                    const int oy_hi = std::min(d.Ho - 1, (d.H - 1 - ky + padding) / stride);
                    const int ox_lo = first_valid(padding - kx, stride);
                    const int ox_hi = std::min(d.Wo - 1, (d.W - 1 - kx + padding) / stride);
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                      const int iy = oy * stride - padding + ky;
                      double* girow = giplane + static_cast<std::int64_t>(iy) * d.W - padding + kx;
                      const double* grow = gplane + static_cast<std::int64_t>(oy) * d.Wo;
                      for (int ox = ox_lo; ox <= ox_hi; ++ox) girow[ox * stride] += wv * grow[ox];
                    }
                  }
                }
              }
            }
          }
        }

        if (pw->requires_grad) {
          pw->ensure_grad();
          double* gw = pw->grad.data();
          for (int oc = 0; oc < d.Cout; ++oc) {
            for (int ic = 0; ic < d.Cin; ++ic) {
              double* gwk = gw + (static_cast<std::int64_t>(oc) * d.Cin + ic) * d.K * d.K;
              for (int ky = 0; ky < d.K; ++ky) {
                for (int kx = 0; kx < d.K; ++kx) {
                  const int oy_lo = first_valid(padding - ky, stride);
                  const int oy_hi = std::min(d.Ho - 1, (d.H - 1 - ky + padding) / stride);
                  const int ox_lo = first_valid(padding - kx, stride);
                  const int ox_hi = std::min(d.Wo - 1, (d.W - 1 - kx + padding) / stride);
                  double acc = 0.0;
                  for (int b = 0; b < d.B; ++b) {
                    const double* gplane = g + (static_cast<std::int64_t>(b) * d.Cout + oc) * d.Ho * d.Wo;
                    const double* iplane = ind + (static_cast<std::int64_t>(b) * d.Cin + ic) * d.H * d.W;
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                      const int iy = oy * stride - padding + ky;
                      const double* irow = iplane + static_cast<std::int64_t>(iy) * d.W - padding + kx;
                      const double* grow = gplane + static_cast<std::int64_t>(oy) * d.Wo;
                      for (int ox = ox_lo; ox <= ox_hi; ++ox) acc += grow[ox] * irow[ox * stride];
                    }
                  }
                  gwk[ky * d.K + kx] += acc;
                }
              }
            }
          }
        }

        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (int oc = 0; oc < d.Cout; ++oc) {
            double acc = 0.0;
            for (int b = 0; b < d.B; ++b) {
              const double* gplane = g + (static_cast<std::int64_t>(b) * d.Cout + oc) * d.Ho * d.Wo;
              for (std::int64_t i = 0; i < static_cast<std::int64_t>(d.Ho) * d.Wo; ++i) acc += gplane[i];
            }
            pb->grad[static_cast<std::size_t>(oc)] += acc;
          }
        }
      },
      "conv2d");
}

Var conv2d_transpose(const Var& input, const Var& weight, const Var& bias, int stride, int padding,
                     int output_padding) {
  const Tensor& in = input.value();
  const Tensor& w = weight.value();
  if (in.shape.size() != 4) {
    throw ShapeError("conv2d_transpose: input must be NCHW, got " + shape_to_string(in.shape));
  }
  if (w.shape.size() != 4 || w.shape[2] != w.shape[3]) {
    throw ShapeError("conv2d_transpose: weight must be (in,out,K,K), got " + shape_to_string(w.shape));
  }
  if (w.shape[0] != in.shape[1]) {
    throw ShapeError("conv2d_transpose: weight expects " + std::to_string(w.shape[0]) +
                     " input channels, input has " + std::to_string(in.shape[1]));
  }
  if (output_padding < 0 || output_padding >= stride) {
    throw ShapeError("conv2d_transpose: output_padding must be in [0, stride)");
  }
  const int B = in.shape[0], Cin = in.shape[1], Hi = in.shape[2], Wi = in.shape[3];
  const int Cout = w.shape[1], K = w.shape[2];
  const int Ho = (Hi - 1) * stride - 2 * padding + K + output_padding;
  const int Wo = (Wi - 1) * stride - 2 * padding + K + output_padding;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d_transpose: non-positive output extent");
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().size() != Cout) {
    throw ShapeError("conv2d_transpose: bias length mismatch");
  }

  Tensor out(Shape{B, Cout, Ho, Wo});
  const double* ind = in.data.data();
  const double* wd = w.data.data();
  double* od = out.data.data();
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Cout; ++co) {
      double* oplane = od + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
      const double bv = has_bias ? bias.value().data[static_cast<std::size_t>(co)] : 0.0;
      std::fill(oplane, oplane + static_cast<std::int64_t>(Ho) * Wo, bv);
    }
    for (int ci = 0; ci < Cin; ++ci) {
      const double* iplane = ind + (static_cast<std::int64_t>(b) * Cin + ci) * Hi * Wi;
      for (int co = 0; co < Cout; ++co) {
        double* oplane = od + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
        const double* wk = wd + (static_cast<std::int64_t>(ci) * Cout + co) * K * K;
        for (int ky = 0; ky < K; ++ky) {
          for (int kx = 0; kx < K; ++kx) {
            const double wv = wk[ky * K + kx];
            const int iy_lo = first_valid(padding - ky, stride);
            const int iy_hi = std::min(Hi - 1, (Ho - 1 - ky + padding) / stride);
            const int ix_lo = first_valid(padding - kx, stride);
            const int ix_hi = std::min(Wi - 1, (Wo - 1 - kx + padding) / stride);
            for (int iy = iy_lo; iy <= iy_hi; ++iy) {
              const int oy = iy * stride - padding + ky;
              const double* irow = iplane + static_cast<std::int64_t>(iy) * Wi;
              double* orow = oplane + static_cast<std::int64_t>(oy) * Wo - padding + kx;
              for (int ix = ix_lo; ix <= ix_hi; ++ix) orow[ix * stride] += wv * irow[ix];
            }
          }
        }
      }
    }
  }

  std::vector<NodePtr> parents = {input.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  return make_node(
      std::move(out), std::move(parents),
      [B, Cin, Hi, Wi, Cout, K, Ho, Wo, stride, padding, has_bias](Node& self) {
        Node* pin = parent_node(self, 0);
        Node* pw = parent_node(self, 1);
        Node* pb = has_bias ? parent_node(self, 2) : nullptr;
        const double* g = self.grad.data();
        const double* ind = pin->value.data.data();
        const double* wd = pw->value.data.data();

        if (pin->requires_grad) {
          pin->ensure_grad();
          double* gin = pin->grad.data();
          for (int b = 0; b < B; ++b) {
            for (int ci = 0; ci < Cin; ++ci) {
              double* giplane = gin + (static_cast<std::int64_t>(b) * Cin + ci) * Hi * Wi;
              for (int co = 0; co < Cout; ++co) {
                const double* gplane = g + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
                const double* wk = wd + (static_cast<std::int64_t>(ci) * Cout + co) * K * K;
                for (int ky = 0; ky < K; ++ky) {
                  for (int kx = 0; kx < K; ++kx) {
                    const double wv = wk[ky * K + kx];
                    const int iy_lo = first_valid(padding - ky, stride);
                    const int iy_hi = std::min(Hi - 1, (Ho - 1 - ky + padding) / stride);
                    const int ix_lo = first_valid(padding - kx, stride);
                    const int ix_hi = std::min(Wi - 1, (Wo - 1 - kx + padding) / stride);
                    for (int iy = iy_lo; iy <= iy_hi; ++iy) {
                      const int oy = iy * stride - padding + ky;
                      double* girow = giplane + static_cast<std::int64_t>(iy) * Wi;
                      const double* grow = gplane + static_cast<std::int64_t>(oy) * Wo - padding + kx;
                      for (int ix = ix_lo; ix <= ix_hi; ++ix) girow[ix] += wv * grow[ix * stride];
                    }
                  }
                }
              }
            }
          }
        }

        if (pw->requires_grad) {
          pw->ensure_grad();
          double* gw = pw->grad.data();
          for (int ci = 0; ci < Cin; ++ci) {
            for (int co = 0; co < Cout; ++co) {
              double* gwk = gw + (static_cast<std::int64_t>(ci) * Cout + co) * K * K;
              for (int ky = 0; ky < K; ++ky) {
                for (int kx = 0; kx < K; ++kx) {
                  const int iy_lo = first_valid(padding - ky, stride);
                  const int iy_hi = std::min(Hi - 1, (Ho - 1 - ky + padding) / stride);
                  const int ix_lo = first_valid(padding - kx, stride);
                  const int ix_hi = std::min(Wi - 1, (Wo - 1 - kx + padding) / stride);
                  double acc = 0.0;
                  for (int b = 0; b < B; ++b) {
                    const double* iplane = ind + (static_cast<std::int64_t>(b) * Cin + ci) * Hi * Wi;
                    const double* gplane = g + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
                    for (int iy = iy_lo; iy <= iy_hi; ++iy) {
                      const int oy = iy * stride - padding + ky;
                      const double* irow = iplane + static_cast<std::int64_t>(iy) * Wi;
                      const double* grow = gplane + static_cast<std::int64_t>(oy) * Wo - padding + kx;
                      for (int ix = ix_lo; ix <= ix_hi; ++ix) acc += irow[ix] * grow[ix * stride];
                    }
                  }
                  gwk[ky * K + kx] += acc;
                }
              }
            }
          }
        }

        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (int co = 0; co < Cout; ++co) {
            double acc = 0.0;
            for (int b = 0; b < B; ++b) {
              const double* gplane = g + (static_cast<std::int64_t>(b) * Cout + co) * Ho * Wo;
              for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) acc += gplane[i];
            }
            pb->grad[static_cast<std::size_t>(co)] += acc;
          }
        }
      },
      "conv2d_transpose");
}

Var gdn(const Var& input, const Var& beta, const Var& gamma, bool inverse) {
  const Tensor& in = input.value();
  if (in.shape.size() != 4) throw ShapeError("gdn: input must be NCHW");
  const int B = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  if (beta.value().size() != C) {
    throw ShapeError("gdn: beta length " + std::to_string(beta.value().size()) + " vs channels " +
                     std::to_string(C));
  }
  if (gamma.value().size() != static_cast<std::int64_t>(C) * C) {
    throw ShapeError("gdn: gamma must be CxC");
  }
  for (double bv : beta.value().data) {
    if (!(bv > 0.0)) throw std::runtime_error("gdn: non-positive beta after reparameterization");
  }

  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor out(in.shape);
  const double* ind = in.data.data();
  const double* bd = beta.value().data.data();
  const double* gd = gamma.value().data.data();
  double* od = out.data.data();
  std::vector<double> q(static_cast<std::size_t>(C));
  for (int b = 0; b < B; ++b) {
    const std::int64_t base = static_cast<std::int64_t>(b) * C * plane;
    for (std::int64_t s = 0; s < plane; ++s) {
      for (int c = 0; c < C; ++c) {
        const double x = ind[base + c * plane + s];
        q[static_cast<std::size_t>(c)] = x * x;
      }
      for (int i = 0; i < C; ++i) {
        double z = bd[i];
        const double* grow = gd + static_cast<std::int64_t>(i) * C;
        for (int j = 0; j < C; ++j) z += grow[j] * q[static_cast<std::size_t>(j)];
        const double norm = inverse ? std::sqrt(z) : 1.0 / std::sqrt(z);
        od[base + i * plane + s] = ind[base + i * plane + s] * norm;
      }
    }
  }

  return make_node(
      std::move(out), {input.node(), beta.node(), gamma.node()},
      [B, C, plane, inverse](Node& self) {
        Node* pin = parent_node(self, 0);
        Node* pbeta = parent_node(self, 1);
        Node* pgamma = parent_node(self, 2);
        const double* ind = pin->value.data.data();
        const double* bd = pbeta->value.data.data();
        const double* gd = pgamma->value.data.data();
        const double* g = self.grad.data();
        const bool need_in = pin->requires_grad;
        const bool need_beta = pbeta->requires_grad;
        const bool need_gamma = pgamma->requires_grad;
        if (need_in) pin->ensure_grad();
        if (need_beta) pbeta->ensure_grad();
        if (need_gamma) pgamma->ensure_grad();

        std::vector<double> q(static_cast<std::size_t>(C));
        std::vector<double> z(static_cast<std::size_t>(C));
        std::vector<double> e(static_cast<std::size_t>(C));   // d out_i / d z_i scaled: g_i * x_i * (+-1/2) z^{-+...}
        std::vector<double> xv(static_cast<std::size_t>(C));
        for (int b = 0; b < B; ++b) {
          const std::int64_t base = static_cast<std::int64_t>(b) * C * plane;
          for (std::int64_t s = 0; s < plane; ++s) {
            for (int c = 0; c < C; ++c) {
              xv[static_cast<std::size_t>(c)] = ind[base + c * plane + s];
              q[static_cast<std::size_t>(c)] = xv[static_cast<std::size_t>(c)] * xv[static_cast<std::size_t>(c)];
            }
            for (int i = 0; i < C; ++i) {
              double zi = bd[i];
              const double* grow = gd + static_cast<std::int64_t>(i) * C;
              for (int j = 0; j < C; ++j) zi += grow[j] * q[static_cast<std::size_t>(j)];
              z[static_cast<std::size_t>(i)] = zi;
              const double gi = g[base + i * plane + s];
              const double xi = xv[static_cast<std::size_t>(i)];
              // e_i = g_i * x_i * d(norm_i)/d(z_i)
              e[static_cast<std::size_t>(i)] =
                  inverse ? gi * xi * 0.5 / std::sqrt(zi) : gi * xi * (-0.5) * std::pow(zi, -1.5);
            }
            if (need_beta) {
              for (int i = 0; i < C; ++i) pbeta->grad[static_cast<std::size_t>(i)] += e[static_cast<std::size_t>(i)];
            }
            if (need_gamma) {
              for (int i = 0; i < C; ++i) {
                double* grow = pgamma->grad.data() + static_cast<std::int64_t>(i) * C;
                const double ei = e[static_cast<std::size_t>(i)];
                for (int j = 0; j < C; ++j) grow[j] += ei * q[static_cast<std::size_t>(j)];
              }
            }
            if (need_in) {
              for (int k = 0; k < C; ++k) {
                const double zk = z[static_cast<std::size_t>(k)];
                const double norm = inverse ? std::sqrt(zk) : 1.0 / std::sqrt(zk);
                double acc = g[base + k * plane + s] * norm;
                // cross terms: sum_i 2 e_i gamma_ik x_k
                double cross = 0.0;
                for (int i = 0; i < C; ++i) {
                  cross += e[static_cast<std::size_t>(i)] * gd[static_cast<std::int64_t>(i) * C + k];
                }
                acc += 2.0 * cross * xv[static_cast<std::size_t>(k)];
                pin->grad[base + k * plane + s] += acc;
              }
            }
          }
        }
      },
      inverse ? "igdn" : "gdn");
}

// ---------------------------------------------------------------------------
// loss helpers
// ---------------------------------------------------------------------------

Var bce_with_logits_mean(const Var& logits, const Tensor& targets, const Tensor& weights) {
  if (!same_shape(logits.shape(), targets.shape) || !same_shape(logits.shape(), weights.shape)) {
    throw ShapeError("bce_with_logits_mean: shape mismatch");
  }
  const auto& l = logits.value().data;
  double wsum = 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    const double sp = std::max(l[i], 0.0) + std::log1p(std::exp(-std::fabs(l[i])));
    acc += weights.data[i] * (sp - l[i] * targets.data[i]);
    wsum += weights.data[i];
  }
  Tensor out(Shape{1});
  out.data[0] = wsum > 0.0 ? acc / wsum : 0.0;
  std::vector<double> t = targets.data;
  std::vector<double> wv = weights.data;
  return make_node(
      std::move(out), {logits.node()},
      [t = std::move(t), wv = std::move(wv), wsum](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad || wsum <= 0.0) return;
        p->ensure_grad();
        const double g = self.grad[0] / wsum;
        const auto& l = p->value.data;
        for (std::size_t i = 0; i < l.size(); ++i) {
          const double s = l[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-l[i])) : std::exp(l[i]) / (1.0 + std::exp(l[i]));
          p->grad[i] += g * wv[i] * (s - t[i]);
        }
      },
      "bce_with_logits_mean");
}

Var softmax_ce_masked(const Var& logits, const Tensor& onehot, const Tensor& mask) {
  const Tensor& lv = logits.value();
  if (lv.shape.size() != 4) throw ShapeError("softmax_ce_masked: logits must be NCHW");
  const int B = lv.shape[0], C = lv.shape[1], H = lv.shape[2], W = lv.shape[3];
  if (!same_shape(onehot.shape, lv.shape)) throw ShapeError("softmax_ce_masked: onehot shape mismatch");
  if (!(mask.shape == Shape{B, 1, H, W})) throw ShapeError("softmax_ce_masked: mask must be (B,1,H,W)");

  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  double count = 0.0;
  double acc = 0.0;
  for (int b = 0; b < B; ++b) {
    for (std::int64_t s = 0; s < plane; ++s) {
      if (mask.data[static_cast<std::size_t>(b * plane + s)] <= 0.0) continue;
      count += 1.0;
      double m = -1e300;
      for (int c = 0; c < C; ++c) m = std::max(m, lv.data[(static_cast<std::int64_t>(b) * C + c) * plane + s]);
      double lse = 0.0;
      double dot = 0.0;
      for (int c = 0; c < C; ++c) {
        const double x = lv.data[(static_cast<std::int64_t>(b) * C + c) * plane + s];
        lse += std::exp(x - m);
        dot += onehot.data[(static_cast<std::int64_t>(b) * C + c) * plane + s] * x;
      }
      acc += m + std::log(lse) - dot;
    }
  }
  Tensor out(Shape{1});
  out.data[0] = count > 0.0 ? acc / count : 0.0;
  std::vector<double> oh = onehot.data;
  std::vector<double> mk = mask.data;
  return make_node(
      std::move(out), {logits.node()},
      [oh = std::move(oh), mk = std::move(mk), B, C, plane, count](Node& self) {
        Node* p = parent_node(self, 0);
        if (!p->requires_grad || count <= 0.0) return;
        p->ensure_grad();
        const double g = self.grad[0] / count;
        const auto& l = p->value.data;
        for (int b = 0; b < B; ++b) {
          for (std::int64_t s = 0; s < plane; ++s) {
            if (mk[static_cast<std::size_t>(b * plane + s)] <= 0.0) continue;
            double m = -1e300;
            for (int c = 0; c < C; ++c) m = std::max(m, l[(static_cast<std::int64_t>(b) * C + c) * plane + s]);
            double lse = 0.0;
            for (int c = 0; c < C; ++c) lse += std::exp(l[(static_cast<std::int64_t>(b) * C + c) * plane + s] - m);
            for (int c = 0; c < C; ++c) {
              const std::int64_t idx = (static_cast<std::int64_t>(b) * C + c) * plane + s;
              const double soft = std::exp(l[idx] - m) / lse;
              p->grad[idx] += g * (soft - oh[idx]);
            }
          }
        }
      },
      "softmax_ce_masked");
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

Parameter::Parameter(std::string name, Tensor init) : name_(std::move(name)) {
  raw_ = Var::leaf(std::move(init), true, name_);
}

Parameter::Parameter(std::string name, Tensor init, double lower_bound)
    : name_(std::move(name)), bounded_(true), lower_bound_(lower_bound) {
  Tensor raw(init.shape);
  for (std::size_t i = 0; i < init.data.size(); ++i) {
    const double v = init.data[i];
    if (v < lower_bound) {
      throw ShapeError("parameter '" + name_ + "': init below lower bound");
    }
    raw.data[i] = std::sqrt(v + kPedestal);
  }
  raw_ = Var::leaf(std::move(raw), true, name_);
}

Var Parameter::value() const {
  if (!bounded_) return raw_;
  const double t = std::sqrt(lower_bound_ + kPedestal);
  return add_scalar(square(clamp_min(raw_, t)), -kPedestal);
}

Tensor Parameter::materialized_value() const {
  if (!bounded_) return raw_.value();
  const double t = std::sqrt(lower_bound_ + kPedestal);
  Tensor out(raw_.value().shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double r = std::max(raw_.value().data[i], t);
    out.data[i] = r * r - kPedestal;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  first_moment_.resize(params_.size());
  second_moment_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<std::size_t>(params_[i]->size());
    first_moment_[i].assign(n, 0.0);
    second_moment_[i].assign(n, 0.0);
  }
}

void AdamOptimizer::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Parameter* p = params_[pi];
    Node* leaf = p->raw().node().get();
    if (leaf->grad.size() != leaf->value.data.size()) {
      throw std::runtime_error("adam_step: parameter '" + p->name() + "' has no gradient");
    }
    auto& m = first_moment_[pi];
    auto& v = second_moment_[pi];
    auto& data = leaf->value.data;
    const auto& g = leaf->grad;
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Var(const Var&)>& fn, const Tensor& input,
                           double h_rel) {
  GradCheckReport report;
  Var x = Var::leaf(input, true, "grad_check_input");
  Var y = fn(x);
  if (y.value().size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  if (!std::isfinite(y.value().data[0])) {
    report.finite = false;
    report.message = "non-finite value at unperturbed input";
    return report;
  }
  backward(y);
  std::vector<double> bp = x.node()->grad;
  if (bp.empty()) bp.assign(input.data.size(), 0.0);

  auto& xd = x.node()->value.data;
  std::vector<double> fd(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double orig = xd[i];
    const double h = h_rel * std::max(1.0, std::fabs(orig));
    xd[i] = orig + h;
    const double fp = fn(x).scalar();
    xd[i] = orig - h;
    const double fm = fn(x).scalar();
    xd[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.finite = false;
      report.message = "non-finite value while perturbing element " + std::to_string(i);
      return report;
    }
    fd[i] = (fp - fm) / (2.0 * h);
  }
  double scale = 1e-8;
  for (std::size_t i = 0; i < fd.size(); ++i) scale = std::max({scale, std::fabs(bp[i]), std::fabs(fd[i])});
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double rel = std::fabs(bp[i] - fd[i]) / scale;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = static_cast<std::int64_t>(i);
    }
  }
  return report;
}

GradCheckReport grad_check_param(const std::function<Var()>& fn, Parameter& param, double h_rel) {
  GradCheckReport report;
  param.zero_grad();
  Var y = fn();
  if (y.value().size() != 1) throw ShapeError("grad_check_param: function must be scalar-valued");
  if (!std::isfinite(y.value().data[0])) {
    report.finite = false;
    report.message = "non-finite value at unperturbed parameters";
    return report;
  }
  backward(y);
  std::vector<double> bp = param.raw().node()->grad;
  if (bp.empty()) bp.assign(param.raw_tensor().data.size(), 0.0);

  auto& xd = param.raw_tensor().data;
  std::vector<double> fd(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double orig = xd[i];
    const double h = h_rel * std::max(1.0, std::fabs(orig));
    xd[i] = orig + h;
    const double fp = fn().scalar();
    xd[i] = orig - h;
    const double fm = fn().scalar();
    xd[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.finite = false;
      report.message = "non-finite value while perturbing parameter '" + param.name() + "' element " +
                       std::to_string(i);
      return report;
    }
    fd[i] = (fp - fm) / (2.0 * h);
  }
  double scale = 1e-8;
  for (std::size_t i = 0; i < fd.size(); ++i) scale = std::max({scale, std::fabs(bp[i]), std::fabs(fd[i])});
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double rel = std::fabs(bp[i] - fd[i]) / scale;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = static_cast<std::int64_t>(i);
    }
  }
  return report;
}

}  // namespace mvc
