#pragma once

// Minimal reverse-mode tape over NCHW tensors. Templated on the scalar so the
// same graph runs in double (gradients) and Dual (Hessian-vector products).

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "mad/dual.hpp"
#include "mad/errors.hpp"
#include "mad/tensor.hpp"

namespace mad {

template <class T>
class Tape {
 public:
  using Id = std::size_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Id leaf(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, {});
  }

  const Tensor<T>& value(Id id) const { return nodes_[id].value; }
  bool requires_grad(Id id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulated at `id`; zero-filled if nothing flowed there.
  Tensor<T> grad(Id id) const {
    const Node& n = nodes_[id];
    if (n.grad.data.empty()) return Tensor<T>(n.value.shape, T(0.0));
    return n.grad;
  }

  /// Runs the reverse sweep from `out` seeded with `seed` (same shape as out).
  void backward(Id out, Tensor<T> seed) {
    if (seed.shape != nodes_[out].value.shape) throw DataError("backward seed shape mismatch");
    nodes_[out].grad = std::move(seed);
    for (Id i = out + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.data.empty()) n.backward();
    }
  }

  // x[N,C,H,W], w[O,C,K,K], b[O]
  Id conv2d(Id x, Id w, Id b, std::size_t stride, std::size_t pad) {
    const auto& xs = value(x).shape;
    const auto& ws = value(w).shape;
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3]) {
      throw DataError("conv2d: incompatible shapes " + to_string(xs) + " and " + to_string(ws));
    }
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t O = ws[0], K = ws[2];
    if (H + 2 * pad < K || W + 2 * pad < K) throw DataError("conv2d: kernel larger than input");
    const std::size_t OH = (H + 2 * pad - K) / stride + 1;
    const std::size_t OW = (W + 2 * pad - K) / stride + 1;

    // Output positions whose input tap lies inside the image, per kernel offset.
    auto valid = [stride, pad](std::size_t k, std::size_t in, std::size_t out_len) {
      std::size_t lo = 0;
      if (k < pad) lo = (pad - k + stride - 1) / stride;
      std::size_t hi = 0;
      if (in - 1 + pad >= k) hi = std::min(out_len, (in - 1 + pad - k) / stride + 1);
      return std::pair<std::size_t, std::size_t>{lo, std::max(lo, hi)};
    };

    Tensor<T> out({N, O, OH, OW});
    const auto& X = value(x).data;
    const auto& Wt = value(w).data;
    const auto& B = value(b).data;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t o = 0; o < O; ++o) {
        T* op = &out.data[((n * O + o) * OH) * OW];
        for (std::size_t i = 0; i < OH * OW; ++i) op[i] = B[o];
        for (std::size_t c = 0; c < C; ++c) {
          const T* xp = &X[((n * C + c) * H) * W];
          for (std::size_t kh = 0; kh < K; ++kh) {
            const auto [oh0, oh1] = valid(kh, H, OH);
            for (std::size_t kw = 0; kw < K; ++kw) {
              const auto [ow0, ow1] = valid(kw, W, OW);
              const T wv = Wt[((o * C + c) * K + kh) * K + kw];
              for (std::size_t oh = oh0; oh < oh1; ++oh) {
                const T* xrow = xp + (oh * stride + kh - pad) * W;
                const std::size_t sh = kw - pad;  // modular; ow * stride + sh stays in range
                T* orow = op + oh * OW;
                if (stride == 1) {
                  for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * xrow[ow + sh];
                } else {
                  for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * xrow[ow * stride + sh];
                }
              }
            }
          }
        }
      }
    }

    const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
    const Id self = nodes_.size();
    return push(std::move(out), rg, [=, this] {
      const auto& G = nodes_[self].grad.data;
      const auto& Xv = nodes_[x].value.data;
      const auto& Wv = nodes_[w].value.data;
      const bool gx = nodes_[x].requires_grad, gw = nodes_[w].requires_grad,
                 gb = nodes_[b].requires_grad;
      std::vector<T>* dX = gx ? &ensure_grad(x) : nullptr;
      std::vector<T>* dW = gw ? &ensure_grad(w) : nullptr;
      std::vector<T>* dB = gb ? &ensure_grad(b) : nullptr;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < O; ++o) {
          const T* gp = &G[((n * O + o) * OH) * OW];
          if (dB) {
            T acc(0.0);
            for (std::size_t i = 0; i < OH * OW; ++i) acc += gp[i];
            (*dB)[o] += acc;
          }
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t xoff = ((n * C + c) * H) * W;
            for (std::size_t kh = 0; kh < K; ++kh) {
              const auto [oh0, oh1] = valid(kh, H, OH);
              for (std::size_t kw = 0; kw < K; ++kw) {
                const auto [ow0, ow1] = valid(kw, W, OW);
                const std::size_t widx = ((o * C + c) * K + kh) * K + kw;
                const T wv = Wv[widx];
                T wacc(0.0);
                for (std::size_t oh = oh0; oh < oh1; ++oh) {
                  const std::size_t xrow = xoff + (oh * stride + kh - pad) * W + kw - pad;
                  const T* grow = gp + oh * OW;
                  if (dW) {
                    for (std::size_t ow = ow0; ow < ow1; ++ow) wacc += grow[ow] * Xv[xrow + ow * stride];
                  }
                  if (dX) {
                    T* dx = dX->data();
                    for (std::size_t ow = ow0; ow < ow1; ++ow) dx[xrow + ow * stride] += grow[ow] * wv;
                  }
                }
                if (dW) (*dW)[widx] += wacc;
              }
            }
          }
        }
      }
    });
  }

  // x[N,D], w[O,D], b[O]
  Id dense(Id x, Id w, Id b) {
    const auto& xs = value(x).shape;
    const auto& ws = value(w).shape;
    if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[1]) {
      throw DataError("dense: incompatible shapes " + to_string(xs) + " and " + to_string(ws));
    }
    const std::size_t N = xs[0], D = xs[1], O = ws[0];
    Tensor<T> out({N, O});
    const auto& X = value(x).data;
    const auto& Wt = value(w).data;
    const auto& B = value(b).data;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t o = 0; o < O; ++o) {
        T acc = B[o];
        const T* wr = &Wt[o * D];
        const T* xr = &X[n * D];
        for (std::size_t d = 0; d < D; ++d) acc += wr[d] * xr[d];
        out.data[n * O + o] = acc;
      }
    }
    const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
    const Id self = nodes_.size();
    return push(std::move(out), rg, [=, this] {
      const auto& G = nodes_[self].grad.data;
      const auto& Xv = nodes_[x].value.data;
      const auto& Wv = nodes_[w].value.data;
      std::vector<T>* dX = nodes_[x].requires_grad ? &ensure_grad(x) : nullptr;
      std::vector<T>* dW = nodes_[w].requires_grad ? &ensure_grad(w) : nullptr;
      std::vector<T>* dB = nodes_[b].requires_grad ? &ensure_grad(b) : nullptr;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < O; ++o) {
          const T g = G[n * O + o];
          if (dB) (*dB)[o] += g;
          if (dW) {
            T* dwr = &(*dW)[o * D];
            const T* xr = &Xv[n * D];
            for (std::size_t d = 0; d < D; ++d) dwr[d] += g * xr[d];
          }
          if (dX) {
            T* dxr = &(*dX)[n * D];
            const T* wr = &Wv[o * D];
            for (std::size_t d = 0; d < D; ++d) dxr[d] += g * wr[d];
          }
        }
      }
    });
  }

  Id relu(Id x) {
    Tensor<T> out = value(x);
    for (auto& v : out.data) {
      if (!(value_of(v) > 0.0)) v = T(0.0);
    }
    const Id self = nodes_.size();
    return push(std::move(out), requires_grad(x), [=, this] {
      const auto& G = nodes_[self].grad.data;
      const auto& Xv = nodes_[x].value.data;
      auto& dX = ensure_grad(x);
      for (std::size_t i = 0; i < G.size(); ++i) {
        if (value_of(Xv[i]) > 0.0) dX[i] += G[i];
      }
    });
  }

  /// 2x2/stride-2 max pooling; an axis shorter than 2 is passed through.
  Id maxpool2(Id x) {
    const auto& xs = value(x).shape;
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t ph = H >= 2 ? 2 : 1, pw = W >= 2 ? 2 : 1;
    const std::size_t OH = H / ph, OW = W / pw;
    Tensor<T> out({N, C, OH, OW});
    std::vector<std::size_t> argmax(out.size());
    const auto& X = value(x).data;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      for (std::size_t oh = 0; oh < OH; ++oh) {
        for (std::size_t ow = 0; ow < OW; ++ow) {
          std::size_t best = nc * H * W + (oh * ph) * W + ow * pw;
          for (std::size_t dh = 0; dh < ph; ++dh) {
            for (std::size_t dw = 0; dw < pw; ++dw) {
              const std::size_t idx = nc * H * W + (oh * ph + dh) * W + ow * pw + dw;
              if (value_of(X[idx]) > value_of(X[best])) best = idx;
            }
          }
          const std::size_t o = (nc * OH + oh) * OW + ow;
          out.data[o] = X[best];
          argmax[o] = best;
        }
      }
    }
    const Id self = nodes_.size();
    return push(std::move(out), requires_grad(x), [=, this, argmax = std::move(argmax)] {
      const auto& G = nodes_[self].grad.data;
      auto& dX = ensure_grad(x);
      for (std::size_t i = 0; i < G.size(); ++i) dX[argmax[i]] += G[i];
    });
  }

  /// [N,C,H,W] -> [N,C]
  Id global_avgpool(Id x) {
    const auto& xs = value(x).shape;
    const std::size_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    Tensor<T> out({N, C});
    const auto& X = value(x).data;
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      T acc(0.0);
      for (std::size_t i = 0; i < HW; ++i) acc += X[nc * HW + i];
      out.data[nc] = acc * T(inv);
    }
    const Id self = nodes_.size();
    return push(std::move(out), requires_grad(x), [=, this] {
      const auto& G = nodes_[self].grad.data;
      auto& dX = ensure_grad(x);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T g = G[nc] * T(inv);
        for (std::size_t i = 0; i < HW; ++i) dX[nc * HW + i] += g;
      }
    });
  }

  Id add(Id a, Id b) {
    if (value(a).shape != value(b).shape) throw DataError("add: shape mismatch");
    Tensor<T> out = value(a);
    const auto& B = value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B[i];
    const Id self = nodes_.size();
    return push(std::move(out), requires_grad(a) || requires_grad(b), [=, this] {
      const auto& G = nodes_[self].grad.data;
      for (Id t : {a, b}) {
        if (!nodes_[t].requires_grad) continue;
        auto& d = ensure_grad(t);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
      }
    });
  }

  /// [N,...] -> [N, prod(...)]
  Id flatten(Id x) {
    Tensor<T> out = value(x);
    const std::size_t N = out.shape[0];
    out.shape = {N, out.size() / N};
    const Id self = nodes_.size();
    return push(std::move(out), requires_grad(x), [=, this] {
      const auto& G = nodes_[self].grad.data;
      auto& dX = ensure_grad(x);
      for (std::size_t i = 0; i < G.size(); ++i) dX[i] += G[i];
    });
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Id push(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<T>& ensure_grad(Id id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape, T(0.0));
    return n.grad.data;
  }

  std::vector<Node> nodes_;
};

}  // namespace mad
