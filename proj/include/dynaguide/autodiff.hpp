#pragma once

/// Minimal tape-based reverse-mode differentiation over NCHW tensors.
///
/// A `Tape` records every operation applied to its variables together with
/// a closure that propagates the output gradient to the inputs. Calling
/// `backward(root, seed)` walks the tape in reverse order. Nodes whose inputs
/// do not require gradients record no closure, so inference on a tape costs
/// one forward pass plus the stored activations.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "dynaguide/errors.hpp"
#include "dynaguide/tensor.hpp"

namespace dynaguide::ad {

struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<T>&)>;

    Var constant(Tensor<T> v) { return push(std::move(v), false, {}); }
    Var variable(Tensor<T> v) { return push(std::move(v), true, {}); }

    /// Record an op output. The closure is kept only if some parent needs gradients.
    Var record(Tensor<T> value, std::initializer_list<Var> parents, Backward bw) {
        bool rg = false;
        for (auto p : parents) rg = rg || nodes_[p.id].requires_grad;
        return push(std::move(value), rg, rg ? std::move(bw) : Backward{});
    }

    const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Gradient accumulated at `v` by the last backward pass (zeros if unreached).
    Tensor<T> grad(Var v) const {
        const auto& n = nodes_[v.id];
        if (n.grad.data.empty()) return Tensor<T>(n.value.shape);
        return n.grad;
    }

    /// Accumulation target for a parent's gradient; no-op sink if not needed.
    Tensor<T>* grad_target(Var v) {
        auto& n = nodes_[v.id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
        return &n.grad;
    }

    void backward(Var root, const Tensor<T>& seed) {
        if (seed.shape != nodes_[root.id].value.shape)
            throw ShapeError("backward seed shape " + seed.shape_string() + " does not match output " +
                             nodes_[root.id].value.shape_string());
        for (auto& n : nodes_) n.grad = Tensor<T>{};
        if (!nodes_[root.id].requires_grad) return;
        nodes_[root.id].grad = seed;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.backward || n.grad.data.empty()) continue;
            // the closure may grow other nodes' grads but never this node's
            Tensor<T> g = std::move(n.grad);
            n.backward(*this, g);
            n.grad = std::move(g);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Tensor<T> v, bool rg, Backward bw) {
        nodes_.push_back(Node{std::move(v), {}, rg, std::move(bw)});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRow = Eigen::Map<RowMatrix<T>>;
template <class T>
using MapRowConst = Eigen::Map<const RowMatrix<T>>;

/// Per-axis boundary treatment for convolutions.
struct Padding {
    bool wrap_y = true;
    bool wrap_x = true;
};

namespace detail {

inline std::ptrdiff_t wrap_index(std::ptrdiff_t i, std::ptrdiff_t n) {
    i %= n;
    return i < 0 ? i + n : i;
}

/// cols[(ci*k*k + dy*k + dx), y*W + x] = in[ci, y+dy-p, x+dx-p]
template <class T>
void im2col(const T* in, std::size_t C, std::size_t H, std::size_t W, std::size_t k, Padding pad, T* cols) {
    const auto p = static_cast<std::ptrdiff_t>(k / 2);
    const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
    for (std::size_t ci = 0; ci < C; ++ci) {
        const T* plane = in + ci * H * W;
        for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
                T* row = cols + ((ci * k + dy) * k + dx) * H * W;
                const auto oy = static_cast<std::ptrdiff_t>(dy) - p;
                const auto ox = static_cast<std::ptrdiff_t>(dx) - p;
                for (std::ptrdiff_t y = 0; y < Hs; ++y) {
                    std::ptrdiff_t sy = y + oy;
                    T* dst = row + y * Ws;
                    if (sy < 0 || sy >= Hs) {
                        if (!pad.wrap_y) {
                            std::fill(dst, dst + Ws, T(0));
                            continue;
                        }
                        sy = wrap_index(sy, Hs);
                    }
                    const T* src = plane + sy * Ws;
                    for (std::ptrdiff_t x = 0; x < Ws; ++x) {
                        std::ptrdiff_t sx = x + ox;
                        if (sx < 0 || sx >= Ws) {
                            if (!pad.wrap_x) {
                                dst[x] = T(0);
                                continue;
                            }
                            sx = wrap_index(sx, Ws);
                        }
                        dst[x] = src[sx];
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: accumulate column gradients back into the input.
template <class T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, Padding pad, T* out) {
    const auto p = static_cast<std::ptrdiff_t>(k / 2);
    const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
    for (std::size_t ci = 0; ci < C; ++ci) {
        T* plane = out + ci * H * W;
        for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
                const T* row = cols + ((ci * k + dy) * k + dx) * H * W;
                const auto oy = static_cast<std::ptrdiff_t>(dy) - p;
                const auto ox = static_cast<std::ptrdiff_t>(dx) - p;
                for (std::ptrdiff_t y = 0; y < Hs; ++y) {
                    std::ptrdiff_t sy = y + oy;
                    if (sy < 0 || sy >= Hs) {
                        if (!pad.wrap_y) continue;
                        sy = wrap_index(sy, Hs);
                    }
                    T* dst = plane + sy * Ws;
                    const T* src = row + y * Ws;
                    for (std::ptrdiff_t x = 0; x < Ws; ++x) {
                        std::ptrdiff_t sx = x + ox;
                        if (sx < 0 || sx >= Ws) {
                            if (!pad.wrap_x) continue;
                            sx = wrap_index(sx, Ws);
                        }
                        dst[sx] += src[x];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2D convolution, stride 1, "same" output size, odd kernel k.
/// weight: (Cout, Cin, k, k), bias: (1, Cout, 1, 1).
template <class T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, Padding pad) {
    const auto& X = tape.value(x);
    const auto& Wt = tape.value(weight);
    const std::size_t N = X.n(), Cin = X.c(), H = X.h(), W = X.w();
    const std::size_t Cout = Wt.shape[0], k = Wt.shape[2];
    if (Wt.shape[1] != Cin || Wt.shape[3] != k || k % 2 == 0)
        throw ShapeError("conv2d weight " + Wt.shape_string() + " incompatible with input " + X.shape_string());
    const std::size_t HW = H * W, K = Cin * k * k;
    Tensor<T> Y({N, Cout, H, W});
    std::vector<T> cols(k == 1 ? 0 : K * HW);
    MapRowConst<T> Wm(Wt.data.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
    const auto& B = tape.value(bias).data;
    for (std::size_t i = 0; i < N; ++i) {
        const T* colsrc = X.sample(i);
        if (k != 1) {
            detail::im2col(X.sample(i), Cin, H, W, k, pad, cols.data());
            colsrc = cols.data();
        }
        MapRowConst<T> C(colsrc, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(HW));
        MapRow<T> O(Y.sample(i), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(HW));
        O.noalias() = Wm * C;
        for (std::size_t co = 0; co < Cout; ++co) O.row(static_cast<Eigen::Index>(co)).array() += B[co];
    }
    return tape.record(std::move(Y), {x, weight, bias}, [=](Tape<T>& tp, const Tensor<T>& g) {
        const auto& X = tp.value(x);
        const auto& Wt = tp.value(weight);
        auto* gx = tp.grad_target(x);
        auto* gw = tp.grad_target(weight);
        auto* gb = tp.grad_target(bias);
        std::vector<T> cols(k == 1 ? 0 : K * HW), gcols(gx && k != 1 ? K * HW : 0);
        MapRowConst<T> Wm(Wt.data.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
        for (std::size_t i = 0; i < N; ++i) {
            MapRowConst<T> G(g.sample(i), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(HW));
            if (gw) {
                const T* colsrc = X.sample(i);
                if (k != 1) {
                    detail::im2col(X.sample(i), Cin, H, W, k, pad, cols.data());
                    colsrc = cols.data();
                }
                MapRowConst<T> C(colsrc, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(HW));
                MapRow<T> GW(gw->data.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
                GW.noalias() += G * C.transpose();
            }
            if (gb)
                for (std::size_t co = 0; co < Cout; ++co) {
                    const T* row = g.sample(i) + co * HW;
                    T acc = T(0);
                    for (std::size_t j = 0; j < HW; ++j) acc += row[j];
                    gb->data[co] += acc;
                }
            if (gx) {
                if (k == 1) {
                    MapRow<T> GX(gx->sample(i), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(HW));
                    GX.noalias() += Wm.transpose() * G;
                } else {
                    MapRow<T> GC(gcols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(HW));
                    GC.noalias() = Wm.transpose() * G;
                    detail::col2im_add(gcols.data(), Cin, H, W, k, pad, gx->sample(i));
                }
            }
        }
    });
}

/// y = x W^T + b for x (N, K, 1, 1), W (M, K, 1, 1), b (1, M, 1, 1).
template <class T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
    const auto& X = tape.value(x);
    const auto& Wt = tape.value(weight);
    const std::size_t N = X.n(), K = X.sample_size(), M = Wt.shape[0];
    if (Wt.shape[1] != K) throw ShapeError("linear weight " + Wt.shape_string() + " vs input " + X.shape_string());
    Tensor<T> Y({N, M, 1, 1});
    MapRowConst<T> Xm(X.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(K));
    MapRowConst<T> Wm(Wt.data.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
    MapRow<T> Ym(Y.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(M));
    Ym.noalias() = Xm * Wm.transpose();
    const auto& B = tape.value(bias).data;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < M; ++j) Y.data[i * M + j] += B[j];
    return tape.record(std::move(Y), {x, weight, bias}, [=](Tape<T>& tp, const Tensor<T>& g) {
        MapRowConst<T> G(g.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(M));
        if (auto* gx = tp.grad_target(x)) {
            MapRowConst<T> Wm(tp.value(weight).data.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
            MapRow<T> GX(gx->data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(K));
            GX.noalias() += G * Wm;
        }
        if (auto* gw = tp.grad_target(weight)) {
            MapRowConst<T> Xm(tp.value(x).data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(K));
            MapRow<T> GW(gw->data.data(), static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
            GW.noalias() += G.transpose() * Xm;
        }
        if (auto* gb = tp.grad_target(bias))
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < M; ++j) gb->data[j] += g.data[i * M + j];
    });
}

/// Group normalization with per-channel affine (gamma, beta: (1, C, 1, 1)).
template <class T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, std::size_t groups, T eps = T(1e-5)) {
    const auto& X = tape.value(x);
    const std::size_t N = X.n(), C = X.c(), HW = X.plane();
    if (groups == 0 || C % groups != 0)
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups));
    const std::size_t cpg = C / groups, gsize = cpg * HW;
    Tensor<T> Y(X.shape);
    std::vector<T> xhat(X.size()), rstd(N * groups);
    const auto& G = tape.value(gamma).data;
    const auto& Bt = tape.value(beta).data;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = i * C * HW + g * gsize;
            double s = 0;
            for (std::size_t j = 0; j < gsize; ++j) s += X.data[off + j];
            const double mean = s / static_cast<double>(gsize);
            double ss = 0;
            for (std::size_t j = 0; j < gsize; ++j) {
                const double d = X.data[off + j] - mean;
                ss += d * d;
            }
            const T r = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(gsize) + static_cast<double>(eps)));
            rstd[i * groups + g] = r;
            for (std::size_t cc = 0; cc < cpg; ++cc) {
                const std::size_t ch = g * cpg + cc;
                for (std::size_t p = 0; p < HW; ++p) {
                    const std::size_t idx = off + cc * HW + p;
                    xhat[idx] = static_cast<T>((X.data[idx] - mean) * r);
                    Y.data[idx] = xhat[idx] * G[ch] + Bt[ch];
                }
            }
        }
    return tape.record(std::move(Y), {x, gamma, beta},
                       [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, const Tensor<T>& gy) {
                           const auto& Gm = tp.value(gamma).data;
                           auto* gx = tp.grad_target(x);
                           auto* gg = tp.grad_target(gamma);
                           auto* gbt = tp.grad_target(beta);
                           for (std::size_t i = 0; i < N; ++i)
                               for (std::size_t g = 0; g < groups; ++g) {
                                   const std::size_t off = i * C * HW + g * gsize;
                                   double sum_d = 0, sum_dx = 0;
                                   for (std::size_t cc = 0; cc < cpg; ++cc) {
                                       const std::size_t ch = g * cpg + cc;
                                       for (std::size_t p = 0; p < HW; ++p) {
                                           const std::size_t idx = off + cc * HW + p;
                                           const double dxh = static_cast<double>(gy.data[idx]) * Gm[ch];
                                           sum_d += dxh;
                                           sum_dx += dxh * xhat[idx];
                                           if (gg) gg->data[ch] += gy.data[idx] * xhat[idx];
                                           if (gbt) gbt->data[ch] += gy.data[idx];
                                       }
                                   }
                                   if (!gx) continue;
                                   const double md = sum_d / static_cast<double>(gsize);
                                   const double mdx = sum_dx / static_cast<double>(gsize);
                                   const double r = rstd[i * groups + g];
                                   for (std::size_t cc = 0; cc < cpg; ++cc) {
                                       const std::size_t ch = g * cpg + cc;
                                       for (std::size_t p = 0; p < HW; ++p) {
                                           const std::size_t idx = off + cc * HW + p;
                                           const double dxh = static_cast<double>(gy.data[idx]) * Gm[ch];
                                           gx->data[idx] += static_cast<T>(r * (dxh - md - xhat[idx] * mdx));
                                       }
                                   }
                               }
                       });
}

/// x * sigmoid(x)
template <class T>
Var silu(Tape<T>& tape, Var x) {
    const auto& X = tape.value(x);
    Tensor<T> Y(X.shape);
    for (std::size_t i = 0; i < X.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-X.data[i]));
        Y.data[i] = X.data[i] * s;
    }
    return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& g) {
        const auto& X = tp.value(x);
        auto* gx = tp.grad_target(x);
        for (std::size_t i = 0; i < X.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-X.data[i]));
            gx->data[i] += g.data[i] * s * (T(1) + X.data[i] * (T(1) - s));
        }
    });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& A = tape.value(a);
    const auto& B = tape.value(b);
    if (!same_shape(A, B)) throw ShapeError("add: " + A.shape_string() + " vs " + B.shape_string());
    Tensor<T> Y(A.shape);
    for (std::size_t i = 0; i < A.size(); ++i) Y.data[i] = A.data[i] + B.data[i];
    return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& g) {
        for (Var v : {a, b})
            if (auto* gv = tp.grad_target(v))
                for (std::size_t i = 0; i < g.size(); ++i) gv->data[i] += g.data[i];
    });
}

template <class T>
Var scale(Tape<T>& tape, Var x, T s) {
    const auto& X = tape.value(x);
    Tensor<T> Y(X.shape);
    for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = X.data[i] * s;
    return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& g) {
        auto* gx = tp.grad_target(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += g.data[i] * s;
    });
}

/// Multiply each sample i by s[i].
template <class T>
Var scale_per_sample(Tape<T>& tape, Var x, std::vector<T> s) {
    const auto& X = tape.value(x);
    if (s.size() != X.n()) throw ShapeError("scale_per_sample: factor count does not match batch");
    Tensor<T> Y(X.shape);
    const std::size_t per = X.sample_size();
    for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = X.data[i] * s[i / per];
    return tape.record(std::move(Y), {x}, [=, s = std::move(s)](Tape<T>& tp, const Tensor<T>& g) {
        auto* gx = tp.grad_target(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += g.data[i] * s[i / per];
    });
}

/// x (N, C, H, W) + e (N, C, 1, 1) broadcast over space.
template <class T>
Var add_channel_bias(Tape<T>& tape, Var x, Var e) {
    const auto& X = tape.value(x);
    const auto& E = tape.value(e);
    if (E.n() != X.n() || E.c() != X.c() || E.plane() != 1)
        throw ShapeError("add_channel_bias: " + E.shape_string() + " vs " + X.shape_string());
    Tensor<T> Y = X;
    const std::size_t HW = X.plane();
    for (std::size_t i = 0; i < X.n() * X.c(); ++i)
        for (std::size_t p = 0; p < HW; ++p) Y.data[i * HW + p] += E.data[i];
    return tape.record(std::move(Y), {x, e}, [=](Tape<T>& tp, const Tensor<T>& g) {
        if (auto* gx = tp.grad_target(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += g.data[i];
        if (auto* ge = tp.grad_target(e))
            for (std::size_t i = 0; i < ge->size(); ++i) {
                T s = 0;
                for (std::size_t p = 0; p < HW; ++p) s += g.data[i * HW + p];
                ge->data[i] += s;
            }
    });
}

/// 2x2 average pooling (H and W must be even).
template <class T>
Var avg_pool2(Tape<T>& tape, Var x) {
    const auto& X = tape.value(x);
    const std::size_t H = X.h(), W = X.w();
    if (H % 2 || W % 2) throw ShapeError("avg_pool2 needs even spatial dims, got " + X.shape_string());
    Tensor<T> Y({X.n(), X.c(), H / 2, W / 2});
    const std::size_t planes = X.n() * X.c();
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const T* src = X.data.data() + pl * H * W;
        T* dst = Y.data.data() + pl * (H / 2) * (W / 2);
        for (std::size_t y = 0; y < H / 2; ++y)
            for (std::size_t xx = 0; xx < W / 2; ++xx)
                dst[y * (W / 2) + xx] = T(0.25) * (src[2 * y * W + 2 * xx] + src[2 * y * W + 2 * xx + 1] +
                                                   src[(2 * y + 1) * W + 2 * xx] + src[(2 * y + 1) * W + 2 * xx + 1]);
    }
    return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& g) {
        auto* gx = tp.grad_target(x);
        for (std::size_t pl = 0; pl < planes; ++pl) {
            T* dst = gx->data.data() + pl * H * W;
            const T* src = g.data.data() + pl * (H / 2) * (W / 2);
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) dst[y * W + xx] += T(0.25) * src[(y / 2) * (W / 2) + xx / 2];
        }
    });
}

/// Nearest-neighbour 2x upsampling.
template <class T>
Var upsample2(Tape<T>& tape, Var x) {
    const auto& X = tape.value(x);
    const std::size_t H = X.h(), W = X.w();
    Tensor<T> Y({X.n(), X.c(), 2 * H, 2 * W});
    const std::size_t planes = X.n() * X.c();
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const T* src = X.data.data() + pl * H * W;
        T* dst = Y.data.data() + pl * 4 * H * W;
        for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[y * 2 * W + xx] = src[(y / 2) * W + xx / 2];
    }
    return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& g) {
        auto* gx = tp.grad_target(x);
        for (std::size_t pl = 0; pl < planes; ++pl) {
            T* dst = gx->data.data() + pl * H * W;
            const T* src = g.data.data() + pl * 4 * H * W;
            for (std::size_t y = 0; y < 2 * H; ++y)
                for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[(y / 2) * W + xx / 2] += src[y * 2 * W + xx];
        }
    });
}

/// Concatenate along channels.
template <class T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
    const auto& A = tape.value(a);
    const auto& B = tape.value(b);
    if (A.n() != B.n() || A.h() != B.h() || A.w() != B.w())
        throw ShapeError("concat_channels: " + A.shape_string() + " vs " + B.shape_string());
    Tensor<T> Y({A.n(), A.c() + B.c(), A.h(), A.w()});
    const std::size_t sa = A.sample_size(), sb = B.sample_size();
    for (std::size_t i = 0; i < A.n(); ++i) {
        std::copy(A.sample(i), A.sample(i) + sa, Y.sample(i));
        std::copy(B.sample(i), B.sample(i) + sb, Y.sample(i) + sa);
    }
    return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& g) {
        auto* ga = tp.grad_target(a);
        auto* gb = tp.grad_target(b);
        for (std::size_t i = 0; i < g.n(); ++i) {
            const T* src = g.sample(i);
            if (ga)
                for (std::size_t j = 0; j < sa; ++j) ga->data[i * sa + j] += src[j];
            if (gb)
                for (std::size_t j = 0; j < sb; ++j) gb->data[i * sb + j] += src[sa + j];
        }
    });
}

/// Mean over space: (N, C, H, W) -> (N, C, 1, 1).
template <class T>
Var global_avg_pool(Tape<T>& tape, Var x) {
    const auto& X = tape.value(x);
    const std::size_t HW = X.plane();
    Tensor<T> Y({X.n(), X.c(), 1, 1});
    for (std::size_t i = 0; i < X.n() * X.c(); ++i) {
        T s = 0;
        for (std::size_t p = 0; p < HW; ++p) s += X.data[i * HW + p];
        Y.data[i] = s / static_cast<T>(HW);
    }
    return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& g) {
        auto* gx = tp.grad_target(x);
        const T inv = T(1) / static_cast<T>(HW);
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t p = 0; p < HW; ++p) gx->data[i * HW + p] += g.data[i] * inv;
    });
}

}  // namespace dynaguide::ad
