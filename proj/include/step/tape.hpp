#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "step/tensor.hpp"

namespace step {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Reverse-mode tape. Forward values are computed eagerly as ops are recorded;
// backward() walks the node list in reverse. Nodes are topologically ordered
// by construction. One tape per evaluation; a tape is single-owner and
// single-threaded, distinct tapes may run concurrently.
template <typename Real>
class Tape {
public:
    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;  // allocated lazily during backward
        std::vector<int> parents;
        const char* name = "?";
        bool requires_grad = false;
        std::function<void(Tape&, int)> back;  // empty for leaves
        std::vector<Real> aux;                 // op-private scratch (layer norm stats)
    };

    bool check_finite = true;

    int leaf(Tensor<Real> v, bool requires_grad, const char* name = "leaf") {
        Node n;
        n.value = std::move(v);
        n.name = name;
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    int constant(Tensor<Real> v, const char* name = "const") { return leaf(std::move(v), false, name); }
    int scalar(Real v) { return constant(Tensor<Real>::scalar(v), "scalar"); }

    const Node& node(int i) const { return nodes_[i]; }
    const Tensor<Real>& value(int i) const { return nodes_[i].value; }
    const Tensor<Real>& grad(int i) const { return nodes_[i].grad; }
    std::size_t size() const { return nodes_.size(); }

    // ---- elementwise binary ----

    int add(int a, int b) {
        return ew2("add", a, b, [](Real x, Real y) { return x + y; },
                   [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(1); });
    }
    int sub(int a, int b) {
        return ew2("sub", a, b, [](Real x, Real y) { return x - y; },
                   [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(-1); });
    }
    int mul(int a, int b) {
        return ew2("mul", a, b, [](Real x, Real y) { return x * y; },
                   [](Real, Real y) { return y; }, [](Real x, Real) { return x; });
    }
    int div(int a, int b) {
        return ew2("div", a, b, [](Real x, Real y) { return x / y; },
                   [](Real, Real y) { return Real(1) / y; },
                   [](Real x, Real y) { return -x / (y * y); });
    }

    // tensor op broadcast-scalar-node (b has numel 1)
    int bmul(int a, int b) {
        require(value(b).numel() == 1, "bmul: rhs must be scalar node");
        Node n = open("bmul", {a, b});
        const auto& va = value(a);
        Real s = value(b).item();
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] * s;
        n.back = [](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], b = nd.parents[1];
            Real s = t.value(b).item();
            if (t.wants(a)) {
                auto& ga = t.gref(a);
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.grad[i] * s;
            }
            if (t.wants(b)) {
                Real acc = 0;
                const auto& va = t.value(a);
                for (std::size_t i = 0; i < va.numel(); ++i) acc += nd.grad[i] * va[i];
                t.gref(b)[0] += acc;
            }
        };
        return push(std::move(n));
    }

    int badd(int a, int b) {
        require(value(b).numel() == 1, "badd: rhs must be scalar node");
        Node n = open("badd", {a, b});
        const auto& va = value(a);
        Real s = value(b).item();
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] + s;
        n.back = [](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], b = nd.parents[1];
            if (t.wants(a)) {
                auto& ga = t.gref(a);
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.grad[i];
            }
            if (t.wants(b)) {
                Real acc = 0;
                for (std::size_t i = 0; i < nd.grad.numel(); ++i) acc += nd.grad[i];
                t.gref(b)[0] += acc;
            }
        };
        return push(std::move(n));
    }

    // a: M x D, b: D (or 1 x D) broadcast over rows
    int add_rowvec(int a, int b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        require(va.rank() == 2 && vb.numel() == va.shape[1], "add_rowvec: dim mismatch");
        std::size_t M = va.shape[0], D = va.shape[1];
        Node n = open("add_rowvec", {a, b});
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < D; ++j) n.value[i * D + j] = va[i * D + j] + vb[j];
        n.back = [M, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], b = nd.parents[1];
            if (t.wants(a)) {
                auto& ga = t.gref(a);
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.grad[i];
            }
            if (t.wants(b)) {
                auto& gb = t.gref(b);
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < D; ++j) gb[j] += nd.grad[i * D + j];
            }
        };
        return push(std::move(n));
    }

    // a: M x D, s: M entries; out row i = a row i * s[i]
    int scale_rows(int a, int s) {
        const auto& va = value(a);
        const auto& vs = value(s);
        require(va.rank() == 2 && vs.numel() == va.shape[0], "scale_rows: dim mismatch");
        std::size_t M = va.shape[0], D = va.shape[1];
        Node n = open("scale_rows", {a, s});
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < D; ++j) n.value[i * D + j] = va[i * D + j] * vs[i];
        n.back = [M, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], s = nd.parents[1];
            const auto& va = t.value(a);
            const auto& vs = t.value(s);
            if (t.wants(a)) {
                auto& ga = t.gref(a);
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < D; ++j) ga[i * D + j] += nd.grad[i * D + j] * vs[i];
            }
            if (t.wants(s)) {
                auto& gs = t.gref(s);
                for (std::size_t i = 0; i < M; ++i) {
                    Real acc = 0;
                    for (std::size_t j = 0; j < D; ++j) acc += nd.grad[i * D + j] * va[i * D + j];
                    gs[i] += acc;
                }
            }
        };
        return push(std::move(n));
    }

    // Batched matmuls over a leading batch axis. Shapes are 3-D.
    // bmm_nt: {B,M,D} x {B,N,D}^T -> {B,M,N}
    int bmm_nt(int a, int b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        require(va.rank() == 3 && vb.rank() == 3 && va.shape[0] == vb.shape[0] &&
                    va.shape[2] == vb.shape[2],
                "bmm_nt: shape mismatch");
        std::size_t B = va.shape[0], M = va.shape[1], N = vb.shape[1], D = va.shape[2];
        Node n = open("bmm_nt", {a, b});
        n.value = Tensor<Real>({B, M, N});
        for (std::size_t bb = 0; bb < B; ++bb) {
            const Real* A = &va.data[bb * M * D];
            const Real* Bm = &vb.data[bb * N * D];
            Real* C = &n.value.data[bb * M * N];
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < N; ++j) {
                    Real acc = 0;
                    for (std::size_t k = 0; k < D; ++k) acc += A[i * D + k] * Bm[j * D + k];
                    C[i * N + j] = acc;
                }
        }
        n.back = [B, M, N, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], b = nd.parents[1];
            const auto& va = t.value(a);
            const auto& vb = t.value(b);
            for (std::size_t bb = 0; bb < B; ++bb) {
                const Real* G = &nd.grad.data[bb * M * N];
                const Real* A = &va.data[bb * M * D];
                const Real* Bm = &vb.data[bb * N * D];
                if (t.wants(a)) {
                    Real* gA = &t.gref(a)[bb * M * D];
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t j = 0; j < N; ++j) {
                            Real g = G[i * N + j];
                            for (std::size_t k = 0; k < D; ++k) gA[i * D + k] += g * Bm[j * D + k];
                        }
                }
                if (t.wants(b)) {
                    Real* gB = &t.gref(b)[bb * N * D];
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t j = 0; j < N; ++j) {
                            Real g = G[i * N + j];
                            for (std::size_t k = 0; k < D; ++k) gB[j * D + k] += g * A[i * D + k];
                        }
                }
            }
        };
        return push(std::move(n));
    }

    // bmm_nn: {B,M,N} x {B,N,D} -> {B,M,D}
    int bmm_nn(int a, int b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        require(va.rank() == 3 && vb.rank() == 3 && va.shape[0] == vb.shape[0] &&
                    va.shape[2] == vb.shape[1],
                "bmm_nn: shape mismatch");
        std::size_t B = va.shape[0], M = va.shape[1], N = va.shape[2], D = vb.shape[2];
        Node n = open("bmm_nn", {a, b});
        n.value = Tensor<Real>({B, M, D});
        for (std::size_t bb = 0; bb < B; ++bb) {
            const Real* A = &va.data[bb * M * N];
            const Real* Bm = &vb.data[bb * N * D];
            Real* C = &n.value.data[bb * M * D];
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t k = 0; k < N; ++k) {
                    Real av = A[i * N + k];
                    if (av == Real(0)) continue;
                    for (std::size_t j = 0; j < D; ++j) C[i * D + j] += av * Bm[k * D + j];
                }
        }
        n.back = [B, M, N, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], b = nd.parents[1];
            const auto& va = t.value(a);
            const auto& vb = t.value(b);
            for (std::size_t bb = 0; bb < B; ++bb) {
                const Real* G = &nd.grad.data[bb * M * D];
                const Real* A = &va.data[bb * M * N];
                const Real* Bm = &vb.data[bb * N * D];
                if (t.wants(a)) {
                    Real* gA = &t.gref(a)[bb * M * N];
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t k = 0; k < N; ++k) {
                            Real acc = 0;
                            for (std::size_t j = 0; j < D; ++j) acc += G[i * D + j] * Bm[k * D + j];
                            gA[i * N + k] += acc;
                        }
                }
                if (t.wants(b)) {
                    Real* gB = &t.gref(b)[bb * N * D];
                    for (std::size_t i = 0; i < M; ++i)
                        for (std::size_t k = 0; k < N; ++k) {
                            Real av = A[i * N + k];
                            if (av == Real(0)) continue;
                            for (std::size_t j = 0; j < D; ++j) gB[k * D + j] += av * G[i * D + j];
                        }
                }
            }
        };
        return push(std::move(n));
    }

    // {B,M,D} -> {B,D} mean over the middle axis
    int mean_axis1(int a) {
        const auto& va = value(a);
        require(va.rank() == 3, "mean_axis1: need 3-D");
        std::size_t B = va.shape[0], M = va.shape[1], D = va.shape[2];
        Node n = open("mean_axis1", {a});
        n.value = Tensor<Real>({B, D});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < D; ++j)
                    n.value[b * D + j] += va[(b * M + i) * D + j];
        for (auto& v : n.value.data) v /= Real(M);
        n.back = [B, M, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            Real inv = Real(1) / Real(M);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < D; ++j)
                        ga[(b * M + i) * D + j] += nd.grad[b * D + j] * inv;
        };
        return push(std::move(n));
    }

    // ---- const scalar variants ----

    int scale(int a, Real c) {
        Node n = open("scale", {a});
        const auto& va = value(a);
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] * c;
        n.back = [c](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.grad[i] * c;
        };
        return push(std::move(n));
    }

    int add_const(int a, Real c) {
        Node n = open("add_const", {a});
        const auto& va = value(a);
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = va[i] + c;
        n.back = [](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.grad[i];
        };
        return push(std::move(n));
    }

    // ---- elementwise unary ----

    int exp_(int a) {
        Node n = open("exp", {a});
        const auto& va = value(a);
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = std::exp(va[i]);
        n.back = [](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.grad[i] * nd.value[i];
        };
        return push(std::move(n));
    }

    int log_(int a) {
        return ew1("log", a, [](Real x) { return std::log(x); },
                   [](Real x, Real) { return Real(1) / x; });
    }
    int tanh_(int a) {
        return ew1("tanh", a, [](Real x) { return std::tanh(x); },
                   [](Real, Real y) { return Real(1) - y * y; });
    }
    int relu(int a) {
        // subgradient 0 at the kink
        return ew1("relu", a, [](Real x) { return x > Real(0) ? x : Real(0); },
                   [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
    }
    int softplus(int a) {
        return ew1("softplus", a,
                   [](Real x) {
                       if (x > Real(30)) return x;
                       if (x < Real(-30)) return std::exp(x);
                       return std::log1p(std::exp(x));
                   },
                   [](Real x, Real) { return Real(1) / (Real(1) + std::exp(-x)); });
    }
    int sqrt_(int a) {
        return ew1("sqrt", a, [](Real x) { return std::sqrt(x); },
                   [](Real, Real y) { return Real(1) / (Real(2) * y); });
    }

    // Huber: 0.5 x^2 inside |x| <= delta, delta(|x| - 0.5 delta) outside.
    int huber(int a, Real delta) {
        require(delta > Real(0), "huber: delta must be positive");
        return ew1("huber", a,
                   [delta](Real x) {
                       Real ax = std::abs(x);
                       return ax <= delta ? Real(0.5) * x * x : delta * (ax - Real(0.5) * delta);
                   },
                   [delta](Real x, Real) {
                       return std::clamp(x, -delta, delta);
                   });
    }

    // ---- matmul / shapes ----

    int matmul(int a, int b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        require(va.rank() == 2 && vb.rank() == 2 && va.shape[1] == vb.shape[0],
                "matmul: shape mismatch " + shape_str(va.shape) + " x " + shape_str(vb.shape));
        std::size_t M = va.shape[0], K = va.shape[1], N = vb.shape[1];
        Node n = open("matmul", {a, b});
        n.value = Tensor<Real>({M, N});
        gemm(va.data.data(), vb.data.data(), n.value.data.data(), M, K, N);
        n.back = [M, K, N](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], b = nd.parents[1];
            const auto& va = t.value(a);
            const auto& vb = t.value(b);
            if (t.wants(a)) {
                // dA = dC * B^T
                auto& ga = t.gref(a);
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < N; ++j) {
                        Real g = nd.grad[i * N + j];
                        if (g == Real(0)) continue;
                        const Real* brow = &vb.data[j];
                        for (std::size_t k = 0; k < K; ++k) ga[i * K + k] += g * brow[k * N];
                    }
            }
            if (t.wants(b)) {
                // dB = A^T * dC
                auto& gb = t.gref(b);
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t k = 0; k < K; ++k) {
                        Real av = va[i * K + k];
                        if (av == Real(0)) continue;
                        const Real* grow = &nd.grad[i * N];
                        Real* gbrow = &gb[k * N];
                        for (std::size_t j = 0; j < N; ++j) gbrow[j] += av * grow[j];
                    }
            }
        };
        return push(std::move(n));
    }

    int reshape(int a, std::vector<std::size_t> shape) {
        const auto& va = value(a);
        require(Tensor<Real>::count(shape) == va.numel(), "reshape: element count mismatch");
        Node n = open("reshape", {a});
        n.value = Tensor<Real>(std::move(shape), va.data);
        n.back = [](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += nd.grad[i];
        };
        return push(std::move(n));
    }

    int permute(int a, std::vector<std::size_t> perm) {
        const auto& va = value(a);
        require(perm.size() == va.rank(), "permute: rank mismatch");
        std::vector<std::size_t> oshape(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) oshape[i] = va.shape[perm[i]];
        auto istrides = strides(va.shape);
        auto map = index_map(va.shape, oshape, perm, istrides);
        Node n = open("permute", {a});
        n.value = Tensor<Real>(oshape);
        for (std::size_t o = 0; o < map.size(); ++o) n.value[o] = va[map[o]];
        n.back = [map](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            for (std::size_t o = 0; o < map.size(); ++o) ga[map[o]] += nd.grad[o];
        };
        return push(std::move(n));
    }

    int concat_rows(const std::vector<int>& parts) {
        require(!parts.empty(), "concat_rows: empty list");
        std::size_t cols = value(parts[0]).shape[1], rows = 0;
        for (int p : parts) {
            require(value(p).rank() == 2 && value(p).shape[1] == cols, "concat_rows: column mismatch");
            rows += value(p).shape[0];
        }
        Node n = open("concat_rows", parts);
        n.value = Tensor<Real>({rows, cols});
        std::size_t off = 0;
        for (int p : parts) {
            const auto& v = value(p);
            std::copy(v.data.begin(), v.data.end(), n.value.data.begin() + off);
            off += v.numel();
        }
        n.back = [](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            std::size_t off = 0;
            for (int p : nd.parents) {
                std::size_t cnt = t.value(p).numel();
                if (t.wants(p)) {
                    auto& gp = t.gref(p);
                    for (std::size_t i = 0; i < cnt; ++i) gp[i] += nd.grad[off + i];
                }
                off += cnt;
            }
        };
        return push(std::move(n));
    }

    int slice_rows(int a, std::size_t r0, std::size_t r1) {
        const auto& va = value(a);
        require(va.rank() == 2 && r0 < r1 && r1 <= va.shape[0], "slice_rows: bad range");
        std::size_t cols = va.shape[1];
        Node n = open("slice_rows", {a});
        n.value = Tensor<Real>({r1 - r0, cols});
        std::copy(va.data.begin() + r0 * cols, va.data.begin() + r1 * cols, n.value.data.begin());
        n.back = [r0, cols](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            for (std::size_t i = 0; i < nd.grad.numel(); ++i) ga[r0 * cols + i] += nd.grad[i];
        };
        return push(std::move(n));
    }

    // ---- reductions ----

    int sum(int a) {
        Node n = open("sum", {a});
        const auto& va = value(a);
        Real acc = 0;
        for (Real v : va.data) acc += v;
        n.value = Tensor<Real>::scalar(acc);
        n.back = [](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            Real g = nd.grad[0];
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
        };
        return push(std::move(n));
    }

    int mean(int a) { return scale(sum(a), Real(1) / Real(value(a).numel())); }

    // M x D -> 1 x D column means
    int mean_rows(int a) {
        const auto& va = value(a);
        require(va.rank() == 2, "mean_rows: need 2-D");
        std::size_t M = va.shape[0], D = va.shape[1];
        Node n = open("mean_rows", {a});
        n.value = Tensor<Real>({1, D});
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = 0; j < D; ++j) n.value[j] += va[i * D + j];
        for (std::size_t j = 0; j < D; ++j) n.value[j] /= Real(M);
        n.back = [M, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            Real inv = Real(1) / Real(M);
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t j = 0; j < D; ++j) ga[i * D + j] += nd.grad[j] * inv;
        };
        return push(std::move(n));
    }

    // ---- row-wise softmax / layer norm ----

    int softmax_rows(int a) {
        const auto& va = value(a);
        require(va.rank() == 2, "softmax_rows: need 2-D");
        std::size_t M = va.shape[0], D = va.shape[1];
        Node n = open("softmax", {a});
        n.value = Tensor<Real>({M, D});
        for (std::size_t i = 0; i < M; ++i) {
            const Real* x = &va.data[i * D];
            Real* y = &n.value.data[i * D];
            Real mx = x[0];
            for (std::size_t j = 1; j < D; ++j) mx = std::max(mx, x[j]);
            Real z = 0;
            for (std::size_t j = 0; j < D; ++j) {
                y[j] = std::exp(x[j] - mx);
                z += y[j];
            }
            for (std::size_t j = 0; j < D; ++j) y[j] /= z;
        }
        n.back = [M, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            auto& ga = t.gref(a);
            for (std::size_t i = 0; i < M; ++i) {
                const Real* y = &nd.value.data[i * D];
                const Real* g = &nd.grad.data[i * D];
                Real dot = 0;
                for (std::size_t j = 0; j < D; ++j) dot += y[j] * g[j];
                for (std::size_t j = 0; j < D; ++j) ga[i * D + j] += y[j] * (g[j] - dot);
            }
        };
        return push(std::move(n));
    }

    // per-row normalization with learned gain/bias (each shape {1,D} or {D})
    int layer_norm_rows(int a, int gain, int bias, Real eps = Real(1e-5)) {
        const auto& va = value(a);
        require(va.rank() == 2, "layer_norm: need 2-D");
        std::size_t M = va.shape[0], D = va.shape[1];
        require(value(gain).numel() == D && value(bias).numel() == D, "layer_norm: gain/bias dim");
        Node n = open("layer_norm", {a, gain, bias});
        n.value = Tensor<Real>({M, D});
        auto& aux = n.aux;
        aux.resize(2 * M);  // mean, inv-std per row
        const auto& g = value(gain);
        const auto& b = value(bias);
        for (std::size_t i = 0; i < M; ++i) {
            const Real* x = &va.data[i * D];
            Real mu = 0;
            for (std::size_t j = 0; j < D; ++j) mu += x[j];
            mu /= Real(D);
            Real var = 0;
            for (std::size_t j = 0; j < D; ++j) var += (x[j] - mu) * (x[j] - mu);
            var /= Real(D);
            Real inv = Real(1) / std::sqrt(var + eps);
            aux[2 * i] = mu;
            aux[2 * i + 1] = inv;
            for (std::size_t j = 0; j < D; ++j)
                n.value[i * D + j] = (x[j] - mu) * inv * g[j] + b[j];
        }
        n.back = [M, D](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], gn = nd.parents[1], bn = nd.parents[2];
            const auto& va = t.value(a);
            const auto& g = t.value(gn);
            for (std::size_t i = 0; i < M; ++i) {
                Real mu = nd.aux[2 * i], inv = nd.aux[2 * i + 1];
                const Real* x = &va.data[i * D];
                const Real* dy = &nd.grad.data[i * D];
                // xhat_j = (x_j - mu) * inv
                Real sum_dyg = 0, sum_dyg_xhat = 0;
                for (std::size_t j = 0; j < D; ++j) {
                    Real xh = (x[j] - mu) * inv;
                    sum_dyg += dy[j] * g[j];
                    sum_dyg_xhat += dy[j] * g[j] * xh;
                }
                if (t.wants(a)) {
                    auto& ga = t.gref(a);
                    for (std::size_t j = 0; j < D; ++j) {
                        Real xh = (x[j] - mu) * inv;
                        ga[i * D + j] += inv * (dy[j] * g[j] - sum_dyg / Real(D) -
                                                xh * sum_dyg_xhat / Real(D));
                    }
                }
                if (t.wants(gn)) {
                    auto& gg = t.gref(gn);
                    for (std::size_t j = 0; j < D; ++j)
                        gg[j] += dy[j] * (x[j] - mu) * inv;
                }
                if (t.wants(bn)) {
                    auto& gb = t.gref(bn);
                    for (std::size_t j = 0; j < D; ++j) gb[j] += dy[j];
                }
            }
        };
        return push(std::move(n));
    }

    // ---- fractional gather ----

    // x: T x F, pos: P fractional indices in [0, T-1]; out row p =
    // (1-f) * x[i] + f * x[i+1]. Gradient flows to x and to pos.
    int gather_linear(int x, int pos) {
        const auto& vx = value(x);
        const auto& vp = value(pos);
        require(vx.rank() == 2, "gather_linear: x must be 2-D");
        std::size_t T = vx.shape[0], F = vx.shape[1], P = vp.numel();
        Node n = open("gather_linear", {x, pos});
        n.value = Tensor<Real>({P, F});
        for (std::size_t p = 0; p < P; ++p) {
            Real q = std::clamp(vp[p], Real(0), Real(T - 1));
            std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(q), T >= 2 ? T - 2 : 0);
            Real f = q - Real(i);
            const Real* lo = &vx.data[i * F];
            const Real* hi = &vx.data[std::min(i + 1, T - 1) * F];
            Real* out = &n.value.data[p * F];
            for (std::size_t j = 0; j < F; ++j) out[j] = (Real(1) - f) * lo[j] + f * hi[j];
        }
        n.back = [T, F, P](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int x = nd.parents[0], pos = nd.parents[1];
            const auto& vx = t.value(x);
            const auto& vp = t.value(pos);
            for (std::size_t p = 0; p < P; ++p) {
                Real q = std::clamp(vp[p], Real(0), Real(T - 1));
                std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(q), T >= 2 ? T - 2 : 0);
                std::size_t i1 = std::min(i + 1, T - 1);
                Real f = q - Real(i);
                const Real* g = &nd.grad.data[p * F];
                if (t.wants(x)) {
                    auto& gx = t.gref(x);
                    for (std::size_t j = 0; j < F; ++j) {
                        gx[i * F + j] += (Real(1) - f) * g[j];
                        gx[i1 * F + j] += f * g[j];
                    }
                }
                if (t.wants(pos)) {
                    // d/dq = x[i+1] - x[i]; zero when clamped at the ends
                    bool clamped = (vp[p] <= Real(0)) || (vp[p] >= Real(T - 1));
                    if (!clamped) {
                        Real acc = 0;
                        for (std::size_t j = 0; j < F; ++j)
                            acc += g[j] * (vx[i1 * F + j] - vx[i * F + j]);
                        t.gref(pos)[p] += acc;
                    }
                }
            }
        };
        return push(std::move(n));
    }

    // ---- backward driver ----

    void backward(int loss) {
        require(value(loss).numel() == 1, "backward: loss must be scalar");
        for (auto& n : nodes_) n.grad = Tensor<Real>();
        gref(loss)[0] = Real(1);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.back || n.grad.numel() == 0) continue;
            n.back(*this, i);
        }
    }

    bool wants(int i) const { return nodes_[i].requires_grad; }

    Tensor<Real>& gref(int i) {
        Node& n = nodes_[i];
        if (n.grad.numel() == 0) n.grad = Tensor<Real>(n.value.shape);
        return n.grad;
    }

    // Gradient of a leaf after backward(); zeros if the leaf was unreachable.
    Tensor<Real> leaf_grad(int i) const {
        const Node& n = nodes_[i];
        if (n.grad.numel() == 0) return Tensor<Real>(n.value.shape);
        return n.grad;
    }

private:
    std::vector<Node> nodes_;

    static void require(bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument("tape: " + msg);
    }

    Node open(const char* name, std::vector<int> parents) {
        Node n;
        n.name = name;
        n.parents = std::move(parents);
        for (int p : n.parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
        return n;
    }

    int push(Node n) {
        if (check_finite && !n.value.all_finite())
            throw NumericError(std::string("non-finite value produced by op '") + n.name + "'");
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size() - 1);
    }

    template <typename F, typename DF>
    int ew1(const char* name, int a, F f, DF df) {
        Node n = open(name, {a});
        const auto& va = value(a);
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = f(va[i]);
        n.back = [df](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0];
            if (!t.wants(a)) return;
            const auto& va = t.value(a);
            auto& ga = t.gref(a);
            for (std::size_t i = 0; i < ga.numel(); ++i)
                ga[i] += nd.grad[i] * df(va[i], nd.value[i]);
        };
        return push(std::move(n));
    }

    template <typename F, typename DA, typename DB>
    int ew2(const char* name, int a, int b, F f, DA da, DB db) {
        const auto& va = value(a);
        const auto& vb = value(b);
        require(va.shape == vb.shape, std::string(name) + ": shape mismatch " +
                                          shape_str(va.shape) + " vs " + shape_str(vb.shape));
        Node n = open(name, {a, b});
        n.value = Tensor<Real>(va.shape);
        for (std::size_t i = 0; i < va.numel(); ++i) n.value[i] = f(va[i], vb[i]);
        n.back = [da, db](Tape& t, int self) {
            auto& nd = t.nodes_[self];
            int a = nd.parents[0], b = nd.parents[1];
            const auto& va = t.value(a);
            const auto& vb = t.value(b);
            if (t.wants(a)) {
                auto& ga = t.gref(a);
                for (std::size_t i = 0; i < ga.numel(); ++i)
                    ga[i] += nd.grad[i] * da(va[i], vb[i]);
            }
            if (t.wants(b)) {
                auto& gb = t.gref(b);
                for (std::size_t i = 0; i < gb.numel(); ++i)
                    gb[i] += nd.grad[i] * db(va[i], vb[i]);
            }
        };
        return push(std::move(n));
    }

    static void gemm(const Real* a, const Real* b, Real* c, std::size_t M, std::size_t K,
                     std::size_t N) {
        for (std::size_t i = 0; i < M; ++i) {
            Real* crow = c + i * N;
            for (std::size_t k = 0; k < K; ++k) {
                Real av = a[i * K + k];
                if (av == Real(0)) continue;
                const Real* brow = b + k * N;
                for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
            }
        }
    }

    static std::vector<std::size_t> strides(const std::vector<std::size_t>& shape) {
        std::vector<std::size_t> s(shape.size(), 1);
        for (int i = int(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
        return s;
    }

    static std::vector<std::size_t> index_map(const std::vector<std::size_t>& ishape,
                                              const std::vector<std::size_t>& oshape,
                                              const std::vector<std::size_t>& perm,
                                              const std::vector<std::size_t>& istrides) {
        std::size_t total = Tensor<Real>::count(oshape);
        std::vector<std::size_t> map(total);
        std::vector<std::size_t> idx(oshape.size(), 0);
        for (std::size_t o = 0; o < total; ++o) {
            std::size_t src = 0;
            for (std::size_t d = 0; d < oshape.size(); ++d) src += idx[d] * istrides[perm[d]];
            map[o] = src;
            for (int d = int(oshape.size()) - 1; d >= 0; --d) {
                if (++idx[d] < oshape[d]) break;
                idx[d] = 0;
            }
        }
        return map;
    }
};

}  // namespace step
