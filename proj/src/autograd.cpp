#include "adv2/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace adv2::ag {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

bool is_scalar(const Val& v) { return v->value.size() == 1; }

void require(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

Val constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = false;
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

Val leaf(Tensor t) {
    auto n = constant(std::move(t));
    n->requires_grad = true;
    return n;
}

Val make_op(Tensor out, std::vector<Val> parents, Node::Vjp vjp) {
    auto n = std::make_shared<Node>();
    n->value = std::move(out);
    n->parents = std::move(parents);
    n->vjp = std::move(vjp);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

std::vector<Val> gradients(const Val& output, const std::vector<Val>& wrt, const Tensor* seed) {
    require(output != nullptr, "gradients: null output");

    // Collect the reachable subgraph (iterative DFS).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    {
        std::vector<Node*> stack{output.get()};
        seen.insert(output.get());
        while (!stack.empty()) {
            Node* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& p : n->parents)
                if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](Node* a, Node* b) { return a->id < b->id; });

    // A node matters if a wrt node is reachable from it through parent edges.
    std::unordered_set<const Node*> wanted(wrt.size());
    for (const auto& w : wrt) wanted.insert(w.get());
    std::unordered_map<const Node*, bool> need;
    need.reserve(order.size());
    for (Node* n : order) {
        bool nd = wanted.count(n) > 0;
        if (!nd)
            for (const auto& p : n->parents)
                if (need[p.get()]) { nd = true; break; }
        need[n] = nd;
    }

    std::unordered_map<const Node*, Val> grad;
    if (seed) {
        require(seed->same_shape(output->value), "gradients: seed shape mismatch");
        grad[output.get()] = constant(*seed);
    } else {
        require(output->value.size() == 1, "gradients: non-scalar output needs a seed");
        grad[output.get()] = constant(Tensor::scalar(1.0));
    }

    // Keep shared ownership of the subgraph while we walk raw pointers.
    std::unordered_map<const Node*, Val> keep;
    {
        std::vector<Val> stack{output};
        keep[output.get()] = output;
        while (!stack.empty()) {
            Val n = stack.back();
            stack.pop_back();
            for (const auto& p : n->parents)
                if (keep.emplace(p.get(), p).second) stack.push_back(p);
        }
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        auto git = grad.find(n);
        if (git == grad.end() || !n->vjp || n->parents.empty()) continue;
        if (!need[n]) continue;
        std::vector<bool> want(n->parents.size(), false);
        bool any = false;
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            want[i] = need[n->parents[i].get()];
            any = any || want[i];
        }
        if (!any) continue;
        const Val self = keep.at(n);
        std::vector<Val> pg = n->vjp(n->parents, self, git->second, want);
        require(pg.size() == n->parents.size(), "gradients: vjp arity mismatch");
        for (std::size_t i = 0; i < pg.size(); ++i) {
            if (!want[i] || !pg[i]) continue;
            const Node* p = n->parents[i].get();
            auto pit = grad.find(p);
            if (pit == grad.end())
                grad[p] = pg[i];
            else
                pit->second = add(pit->second, pg[i]);
        }
    }

    std::vector<Val> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto it2 = grad.find(w.get());
        out.push_back(it2 != grad.end() ? it2->second : constant(zeros_like(w->value)));
    }
    return out;
}

// ---------------------------------------------------------------- elementwise

namespace {

enum class BinKind { add, sub, mul, divk };

Tensor bin_eval(BinKind k, const Tensor& a, const Tensor& b) {
    const bool bs = b.size() == 1, as = a.size() == 1;
    require(as || bs || a.same_shape(b), "binary op: shape mismatch");
    const Tensor& big = as ? b : a;
    Tensor r(big.shape());
    for (std::size_t i = 0; i < r.size(); ++i) {
        double x = a[as ? 0 : i], y = b[bs ? 0 : i];
        switch (k) {
            case BinKind::add: r[i] = x + y; break;
            case BinKind::sub: r[i] = x - y; break;
            case BinKind::mul: r[i] = x * y; break;
            case BinKind::divk: r[i] = x / y; break;
        }
    }
    return r;
}

Val reduce_to(const Val& g, bool to_scalar) { return to_scalar ? sum_all(g) : g; }

}  // namespace

Val add(const Val& a, const Val& b) {
    return make_op(bin_eval(BinKind::add, a->value, b->value), {a, b},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       if (want[0]) r[0] = reduce_to(g, p[0]->value.size() == 1 && g->value.size() != 1);
                       if (want[1]) r[1] = reduce_to(g, p[1]->value.size() == 1 && g->value.size() != 1);
                       return r;
                   });
}

Val sub(const Val& a, const Val& b) {
    return make_op(bin_eval(BinKind::sub, a->value, b->value), {a, b},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       if (want[0]) r[0] = reduce_to(g, p[0]->value.size() == 1 && g->value.size() != 1);
                       if (want[1]) r[1] = neg(reduce_to(g, p[1]->value.size() == 1 && g->value.size() != 1));
                       return r;
                   });
}

Val mul(const Val& a, const Val& b) {
    return make_op(bin_eval(BinKind::mul, a->value, b->value), {a, b},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       if (want[0]) r[0] = reduce_to(mul(g, p[1]), p[0]->value.size() == 1 && g->value.size() != 1);
                       if (want[1]) r[1] = reduce_to(mul(g, p[0]), p[1]->value.size() == 1 && g->value.size() != 1);
                       return r;
                   });
}

Val div(const Val& a, const Val& b) {
    return make_op(bin_eval(BinKind::divk, a->value, b->value), {a, b},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       if (want[0]) r[0] = reduce_to(div(g, p[1]), p[0]->value.size() == 1 && g->value.size() != 1);
                       if (want[1]) {
                           Val t = neg(div(mul(g, p[0]), square(p[1])));
                           r[1] = reduce_to(t, p[1]->value.size() == 1 && g->value.size() != 1);
                       }
                       return r;
                   });
}

Val neg(const Val& a) { return mul_scalar(a, -1.0); }

Val add_scalar(const Val& a, double s) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += s;
    return make_op(std::move(r), {a},
                   [](const std::vector<Val>&, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> { return {g}; });
}

Val mul_scalar(const Val& a, double s) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] *= s;
    return make_op(std::move(r), {a},
                   [s](const std::vector<Val>&, const Val&, const Val& g,
                       const std::vector<bool>&) -> std::vector<Val> { return {mul_scalar(g, s)}; });
}

Val gate_pos(const Val& a) {
    Tensor r(a->value.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = a->value[i] > 0.0 ? 1.0 : 0.0;
    return constant(std::move(r));
}

Val gate_neg(const Val& a) {
    Tensor r(a->value.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = a->value[i] < 0.0 ? 1.0 : 0.0;
    return constant(std::move(r));
}

Val abs_(const Val& a) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::fabs(r[i]);
    return make_op(std::move(r), {a},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       return {mul(g, sub(gate_pos(p[0]), gate_neg(p[0])))};
                   });
}

Val exp_(const Val& a) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::exp(r[i]);
    return make_op(std::move(r), {a},
                   [](const std::vector<Val>&, const Val& self, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> { return {mul(g, self)}; });
}

Val log_(const Val& a) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::log(r[i]);
    return make_op(std::move(r), {a},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> { return {div(g, p[0])}; });
}

Val sqrt_(const Val& a) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::sqrt(r[i]);
    return make_op(std::move(r), {a},
                   [](const std::vector<Val>&, const Val& self, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       return {div(g, mul_scalar(self, 2.0))};
                   });
}

Val square(const Val& a) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] *= r[i];
    return make_op(std::move(r), {a},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       return {mul(g, mul_scalar(p[0], 2.0))};
                   });
}

Val sigmoid_(const Val& a) {
    Tensor r = a->value;
    for (std::size_t i = 0; i < r.size(); ++i) {
        double z = r[i];
        r[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    return make_op(std::move(r), {a},
                   [](const std::vector<Val>&, const Val& self, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       Val one_minus = mul_scalar(add_scalar(self, -1.0), -1.0);
                       return {mul(g, mul(self, one_minus))};
                   });
}

Val stopgrad(const Val& a) { return constant(a->value); }

Val relu(const Val& x, const ReluRule& rule) {
    Tensor r = x->value;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = r[i] > 0.0 ? r[i] : 0.0;
    ReluRule rl = rule;
    return make_op(std::move(r), {x},
                   [rl](const std::vector<Val>& p, const Val&, const Val& g,
                        const std::vector<bool>&) -> std::vector<Val> {
                       switch (rl.mode) {
                           case ReluMode::exact:
                               return {mul(g, gate_pos(p[0]))};
                           case ReluMode::smooth_h: {
                               Val denom = sqrt_(add_scalar(square(p[0]), rl.tau));
                               Val d = add(div(p[0], denom), gate_neg(p[0]));
                               return {mul(g, d)};
                           }
                           case ReluMode::sigmoid:
                               return {mul(g, sigmoid_(p[0]))};
                       }
                       return {mul(g, gate_pos(p[0]))};
                   });
}

// ------------------------------------------------------------- reductions

namespace {

Val broadcast_full(const Val& s, const std::vector<int>& shape);

}  // namespace

Val sum_all(const Val& a) {
    return make_op(Tensor::scalar(a->value.sum()), {a},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       return {broadcast_full(g, p[0]->value.shape())};
                   });
}

namespace {

Val broadcast_full(const Val& s, const std::vector<int>& shape) {
    Tensor r(shape);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = s->value[0];
    return make_op(std::move(r), {s},
                   [](const std::vector<Val>&, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> { return {sum_all(g)}; });
}

}  // namespace

Val mean_all(const Val& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

Val pick(const Val& a, int index);

namespace {

Val scatter_index(const Val& s, int index, const std::vector<int>& shape) {
    Tensor r(shape);
    r[static_cast<std::size_t>(index)] = s->value[0];
    return make_op(std::move(r), {s},
                   [index](const std::vector<Val>&, const Val&, const Val& g,
                           const std::vector<bool>&) -> std::vector<Val> {
                       return {pick(g, index)};
                   });
}

}  // namespace

Val pick(const Val& a, int index) {
    require(index >= 0 && static_cast<std::size_t>(index) < a->value.size(), "pick: index out of range");
    return make_op(Tensor::scalar(a->value[static_cast<std::size_t>(index)]), {a},
                   [index](const std::vector<Val>& p, const Val&, const Val& g,
                           const std::vector<bool>&) -> std::vector<Val> {
                       return {scatter_index(g, index, p[0]->value.shape())};
                   });
}

Val reduce_min(const Val& a) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < a->value.size(); ++i)
        if (a->value[i] < a->value[k]) k = i;
    return pick(a, static_cast<int>(k));
}

Val reduce_max(const Val& a) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < a->value.size(); ++i)
        if (a->value[i] > a->value[k]) k = i;
    return pick(a, static_cast<int>(k));
}

Val dot(const Val& a, const Val& b) { return sum_all(mul(a, b)); }

// --------------------------------------------------------------- linear

namespace {

Val vecmat(const Val& v, const Val& W);
Val outer(const Val& u, const Val& v);

}  // namespace

Val matvec(const Val& W, const Val& x) {
    const Tensor& Wt = W->value;
    const Tensor& xt = x->value;
    require(Wt.rank() == 2 && xt.rank() == 1 && Wt.dim(1) == xt.dim(0), "matvec: shape mismatch");
    int out = Wt.dim(0), in = Wt.dim(1);
    Tensor y({out});
    for (int i = 0; i < out; ++i) {
        double s = 0.0;
        const double* row = Wt.data() + static_cast<std::size_t>(i) * in;
        for (int j = 0; j < in; ++j) s += row[j] * xt[static_cast<std::size_t>(j)];
        y[static_cast<std::size_t>(i)] = s;
    }
    return make_op(std::move(y), {W, x},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       if (want[0]) r[0] = outer(g, p[1]);
                       if (want[1]) r[1] = vecmat(g, p[0]);
                       return r;
                   });
}

namespace {

Val vecmat(const Val& v, const Val& W) {  // W^T v
    const Tensor& Wt = W->value;
    const Tensor& vt = v->value;
    require(Wt.rank() == 2 && vt.rank() == 1 && Wt.dim(0) == vt.dim(0), "vecmat: shape mismatch");
    int out = Wt.dim(0), in = Wt.dim(1);
    Tensor y({in});
    for (int i = 0; i < out; ++i) {
        const double* row = Wt.data() + static_cast<std::size_t>(i) * in;
        double vi = vt[static_cast<std::size_t>(i)];
        for (int j = 0; j < in; ++j) y[static_cast<std::size_t>(j)] += vi * row[j];
    }
    return make_op(std::move(y), {v, W},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       if (want[0]) r[0] = matvec(p[1], g);
                       if (want[1]) r[1] = outer(p[0], g);
                       return r;
                   });
}

Val outer(const Val& u, const Val& v) {
    const Tensor& ut = u->value;
    const Tensor& vt = v->value;
    require(ut.rank() == 1 && vt.rank() == 1, "outer: vectors expected");
    int m = ut.dim(0), n = vt.dim(0);
    Tensor y({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            y[static_cast<std::size_t>(i) * n + j] = ut[static_cast<std::size_t>(i)] * vt[static_cast<std::size_t>(j)];
    return make_op(std::move(y), {u, v},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       if (want[0]) r[0] = matvec(g, p[1]);
                       if (want[1]) r[1] = vecmat(p[0], g);
                       return r;
                   });
}

}  // namespace

Val affine(const Val& W, const Val& x, const Val& b) { return add(matvec(W, x), b); }

Val log_softmax(const Val& z) {
    Val m = constant(Tensor::scalar(z->value.max()));
    Val s = sub(z, m);
    Val lse = log_(sum_all(exp_(s)));
    return sub(s, lse);
}

Val softmax(const Val& z) { return exp_(log_softmax(z)); }

// ------------------------------------------------------------------ conv

namespace {

struct ConvGeom {
    int stride = 1, pad = 0;
};

void conv_bounds(int K, int pad, int stride, int in_dim, int out_dim, int k, int& lo, int& hi) {
    (void)K;
    // valid output indices o with 0 <= o*stride + k - pad < in_dim
    int off = k - pad;
    lo = 0;
    if (off < 0) lo = (-off + stride - 1) / stride;
    hi = out_dim - 1;
    int max_o = (in_dim - 1 - off);
    if (max_o < 0)
        hi = -1;
    else if (max_o / stride < hi)
        hi = max_o / stride;
}

Tensor conv_fwd_k(const Tensor& x, const Tensor& w, ConvGeom gm) {
    int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    int Cout = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
    require(w.dim(1) == Cin, "conv2d: channel mismatch");
    int Ho = (H + 2 * gm.pad - Kh) / gm.stride + 1;
    int Wo = (W + 2 * gm.pad - Kw) / gm.stride + 1;
    Tensor y({Cout, Ho, Wo});
    for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < Kh; ++ky) {
                int oy_lo, oy_hi;
                conv_bounds(Kh, gm.pad, gm.stride, H, Ho, ky, oy_lo, oy_hi);
                for (int kx = 0; kx < Kw; ++kx) {
                    int ox_lo, ox_hi;
                    conv_bounds(Kw, gm.pad, gm.stride, W, Wo, kx, ox_lo, ox_hi);
                    double wv = w[((static_cast<std::size_t>(co) * Cin + ci) * Kh + ky) * Kw + kx];
                    if (wv == 0.0) continue;
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                        int iy = oy * gm.stride + ky - gm.pad;
                        const double* xr = x.data() + (static_cast<std::size_t>(ci) * H + iy) * W;
                        double* yr = y.data() + (static_cast<std::size_t>(co) * Ho + oy) * Wo;
                        int ib = ox_lo * gm.stride + kx - gm.pad;
                        for (int ox = ox_lo, ix = ib; ox <= ox_hi; ++ox, ix += gm.stride)
                            yr[ox] += wv * xr[ix];
                    }
                }
            }
    return y;
}

Tensor conv_bwd_input_k(const Tensor& g, const Tensor& w, ConvGeom gm, int H, int W) {
    int Cout = w.dim(0), Cin = w.dim(1), Kh = w.dim(2), Kw = w.dim(3);
    int Ho = g.dim(1), Wo = g.dim(2);
    Tensor gx({Cin, H, W});
    for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < Kh; ++ky) {
                int oy_lo, oy_hi;
                conv_bounds(Kh, gm.pad, gm.stride, H, Ho, ky, oy_lo, oy_hi);
                for (int kx = 0; kx < Kw; ++kx) {
                    int ox_lo, ox_hi;
                    conv_bounds(Kw, gm.pad, gm.stride, W, Wo, kx, ox_lo, ox_hi);
                    double wv = w[((static_cast<std::size_t>(co) * Cin + ci) * Kh + ky) * Kw + kx];
                    if (wv == 0.0) continue;
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                        int iy = oy * gm.stride + ky - gm.pad;
                        double* xr = gx.data() + (static_cast<std::size_t>(ci) * H + iy) * W;
                        const double* gr = g.data() + (static_cast<std::size_t>(co) * Ho + oy) * Wo;
                        int ib = ox_lo * gm.stride + kx - gm.pad;
                        for (int ox = ox_lo, ix = ib; ox <= ox_hi; ++ox, ix += gm.stride)
                            xr[ix] += wv * gr[ox];
                    }
                }
            }
    return gx;
}

Tensor conv_bwd_weight_k(const Tensor& x, const Tensor& g, ConvGeom gm, int Kh, int Kw) {
    int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    int Cout = g.dim(0), Ho = g.dim(1), Wo = g.dim(2);
    Tensor gw({Cout, Cin, Kh, Kw});
    for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < Kh; ++ky) {
                int oy_lo, oy_hi;
                conv_bounds(Kh, gm.pad, gm.stride, H, Ho, ky, oy_lo, oy_hi);
                for (int kx = 0; kx < Kw; ++kx) {
                    int ox_lo, ox_hi;
                    conv_bounds(Kw, gm.pad, gm.stride, W, Wo, kx, ox_lo, ox_hi);
                    double s = 0.0;
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                        int iy = oy * gm.stride + ky - gm.pad;
                        const double* xr = x.data() + (static_cast<std::size_t>(ci) * H + iy) * W;
                        const double* gr = g.data() + (static_cast<std::size_t>(co) * Ho + oy) * Wo;
                        int ib = ox_lo * gm.stride + kx - gm.pad;
                        for (int ox = ox_lo, ix = ib; ox <= ox_hi; ++ox, ix += gm.stride)
                            s += xr[ix] * gr[ox];
                    }
                    gw[((static_cast<std::size_t>(co) * Cin + ci) * Kh + ky) * Kw + kx] = s;
                }
            }
    return gw;
}

Val conv_bwd_input_op(const Val& g, const Val& w, ConvGeom gm, int H, int W);
Val conv_bwd_weight_op(const Val& x, const Val& g, ConvGeom gm, int Kh, int Kw);

Val conv_fwd_op(const Val& x, const Val& w, ConvGeom gm) {
    return make_op(conv_fwd_k(x->value, w->value, gm), {x, w},
                   [gm](const std::vector<Val>& p, const Val& self, const Val& g,
                        const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       const Tensor& xt = p[0]->value;
                       const Tensor& wt = p[1]->value;
                       if (want[0]) r[0] = conv_bwd_input_op(g, p[1], gm, xt.dim(1), xt.dim(2));
                       if (want[1]) r[1] = conv_bwd_weight_op(p[0], g, gm, wt.dim(2), wt.dim(3));
                       (void)self;
                       return r;
                   });
}

Val conv_bwd_input_op(const Val& g, const Val& w, ConvGeom gm, int H, int W) {
    return make_op(conv_bwd_input_k(g->value, w->value, gm, H, W), {g, w},
                   [gm](const std::vector<Val>& p, const Val&, const Val& u,
                        const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       const Tensor& wt = p[1]->value;
                       if (want[0]) r[0] = conv_fwd_op(u, p[1], gm);
                       if (want[1]) r[1] = conv_bwd_weight_op(u, p[0], gm, wt.dim(2), wt.dim(3));
                       return r;
                   });
}

Val conv_bwd_weight_op(const Val& x, const Val& g, ConvGeom gm, int Kh, int Kw) {
    return make_op(conv_bwd_weight_k(x->value, g->value, gm, Kh, Kw), {x, g},
                   [gm](const std::vector<Val>& p, const Val&, const Val& u,
                        const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r(2);
                       const Tensor& xt = p[0]->value;
                       if (want[0]) r[0] = conv_bwd_input_op(p[1], u, gm, xt.dim(1), xt.dim(2));
                       if (want[1]) r[1] = conv_fwd_op(p[0], u, gm);
                       return r;
                   });
}

}  // namespace

Val conv2d(const Val& x, const Val& w, int stride, int pad) {
    return conv_fwd_op(x, w, ConvGeom{stride, pad});
}

namespace {

Val channel_sum_spatial(const Val& x);

Val broadcast_spatial(const Val& v, int H, int W) {
    const Tensor& vt = v->value;
    require(vt.rank() == 1, "broadcast_spatial: vector expected");
    int C = vt.dim(0);
    Tensor r({C, H, W});
    for (int c = 0; c < C; ++c) {
        double s = vt[static_cast<std::size_t>(c)];
        double* d = r.data() + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) d[i] = s;
    }
    return make_op(std::move(r), {v},
                   [](const std::vector<Val>&, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       return {channel_sum_spatial(g)};
                   });
}

Val channel_sum_spatial(const Val& x) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3, "channel_sum_spatial: rank-3 expected");
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    Tensor r({C});
    for (int c = 0; c < C; ++c) {
        const double* d = xt.data() + static_cast<std::size_t>(c) * H * W;
        double s = 0.0;
        for (int i = 0; i < H * W; ++i) s += d[i];
        r[static_cast<std::size_t>(c)] = s;
    }
    return make_op(std::move(r), {x},
                   [H, W](const std::vector<Val>&, const Val&, const Val& g,
                          const std::vector<bool>&) -> std::vector<Val> {
                       return {broadcast_spatial(g, H, W)};
                   });
}

}  // namespace

Val add_channel_bias(const Val& x, const Val& b) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3 && b->value.rank() == 1 && b->value.dim(0) == xt.dim(0),
            "add_channel_bias: shape mismatch");
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    Tensor r = xt;
    for (int c = 0; c < C; ++c) {
        double bv = b->value[static_cast<std::size_t>(c)];
        double* d = r.data() + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) d[i] += bv;
    }
    return make_op(std::move(r), {x, b},
                   [](const std::vector<Val>&, const Val&, const Val& g,
                      const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r2(2);
                       if (want[0]) r2[0] = g;
                       if (want[1]) r2[1] = channel_sum_spatial(g);
                       return r2;
                   });
}

Val gap2d(const Val& x) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3, "gap2d: rank-3 expected");
    double inv = 1.0 / (static_cast<double>(xt.dim(1)) * xt.dim(2));
    return mul_scalar(channel_sum_spatial(x), inv);
}

namespace {

Val reshape_op(const Val& x, std::vector<int> shape) {
    require(Tensor::count(shape) == static_cast<std::int64_t>(x->value.size()), "reshape: size mismatch");
    Tensor r(shape);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = x->value[i];
    return make_op(std::move(r), {x},
                   [](const std::vector<Val>& p, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       return {reshape_op(g, p[0]->value.shape())};
                   });
}

}  // namespace

Val flatten(const Val& x) {
    return reshape_op(x, {static_cast<int>(x->value.size())});
}

Val reshape(const Val& x, std::vector<int> shape) { return reshape_op(x, std::move(shape)); }

Val expand_channels(const Val& m, int C) {
    const Tensor& mt = m->value;
    require(mt.rank() == 2, "expand_channels: rank-2 expected");
    int H = mt.dim(0), W = mt.dim(1);
    Tensor r({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i)
            r[static_cast<std::size_t>(c) * H * W + i] = mt[static_cast<std::size_t>(i)];
    return make_op(std::move(r), {m},
                   [](const std::vector<Val>&, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> {
                       return {sum_channels(g)};
                   });
}

Val sum_channels(const Val& x) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3, "sum_channels: rank-3 expected");
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    Tensor r({H, W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i)
            r[static_cast<std::size_t>(i)] += xt[static_cast<std::size_t>(c) * H * W + i];
    return make_op(std::move(r), {x},
                   [C](const std::vector<Val>&, const Val&, const Val& g,
                       const std::vector<bool>&) -> std::vector<Val> {
                       return {expand_channels(g, C)};
                   });
}

namespace {

Val gather_channel(const Val& x, std::shared_ptr<std::vector<int>> idx);

Val scatter_channel(const Val& g, std::shared_ptr<std::vector<int>> idx, int C) {
    const Tensor& gt = g->value;
    require(gt.rank() == 2, "scatter_channel: rank-2 expected");
    int H = gt.dim(0), W = gt.dim(1);
    Tensor r({C, H, W});
    for (int i = 0; i < H * W; ++i) {
        int c = (*idx)[static_cast<std::size_t>(i)];
        r[static_cast<std::size_t>(c) * H * W + i] = gt[static_cast<std::size_t>(i)];
    }
    return make_op(std::move(r), {g},
                   [idx](const std::vector<Val>&, const Val&, const Val& u,
                         const std::vector<bool>&) -> std::vector<Val> {
                       return {gather_channel(u, idx)};
                   });
}

Val gather_channel(const Val& x, std::shared_ptr<std::vector<int>> idx) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3, "gather_channel: rank-3 expected");
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    Tensor r({H, W});
    for (int i = 0; i < H * W; ++i) {
        int c = (*idx)[static_cast<std::size_t>(i)];
        r[static_cast<std::size_t>(i)] = xt[static_cast<std::size_t>(c) * H * W + i];
    }
    return make_op(std::move(r), {x},
                   [idx, C](const std::vector<Val>&, const Val&, const Val& u,
                            const std::vector<bool>&) -> std::vector<Val> {
                       return {scatter_channel(u, idx, C)};
                   });
}

}  // namespace

Val channel_max(const Val& x) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3, "channel_max: rank-3 expected");
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(H) * W, 0);
    for (int i = 0; i < H * W; ++i) {
        int best = 0;
        double bv = xt[static_cast<std::size_t>(i)];
        for (int c = 1; c < C; ++c) {
            double v = xt[static_cast<std::size_t>(c) * H * W + i];
            if (v > bv) { bv = v; best = c; }
        }
        (*idx)[static_cast<std::size_t>(i)] = best;
    }
    return gather_channel(x, idx);
}

namespace {

Val slice_channels_op(const Val& x, int c0, int c1);

Val pad_channels_op(const Val& x, int C, int c0) {
    const Tensor& xt = x->value;
    int Cs = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    Tensor r({C, H, W});
    for (int c = 0; c < Cs; ++c)
        for (int i = 0; i < H * W; ++i)
            r[static_cast<std::size_t>(c0 + c) * H * W + i] = xt[static_cast<std::size_t>(c) * H * W + i];
    return make_op(std::move(r), {x},
                   [c0, Cs](const std::vector<Val>&, const Val&, const Val& u,
                            const std::vector<bool>&) -> std::vector<Val> {
                       return {slice_channels_op(u, c0, c0 + Cs)};
                   });
}

Val slice_channels_op(const Val& x, int c0, int c1) {
    const Tensor& xt = x->value;
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    require(c0 >= 0 && c1 <= C && c0 < c1, "slice_channels: bad range");
    Tensor r({c1 - c0, H, W});
    for (int c = c0; c < c1; ++c)
        for (int i = 0; i < H * W; ++i)
            r[static_cast<std::size_t>(c - c0) * H * W + i] = xt[static_cast<std::size_t>(c) * H * W + i];
    return make_op(std::move(r), {x},
                   [c0, C](const std::vector<Val>&, const Val&, const Val& u,
                           const std::vector<bool>&) -> std::vector<Val> {
                       return {pad_channels_op(u, C, c0)};
                   });
}

}  // namespace

Val concat_channels(const Val& a, const Val& b) {
    const Tensor& at = a->value;
    const Tensor& bt = b->value;
    require(at.rank() == 3 && bt.rank() == 3 && at.dim(1) == bt.dim(1) && at.dim(2) == bt.dim(2),
            "concat_channels: spatial mismatch");
    int Ca = at.dim(0), Cb = bt.dim(0), H = at.dim(1), W = at.dim(2);
    Tensor r({Ca + Cb, H, W});
    for (std::size_t i = 0; i < at.size(); ++i) r[i] = at[i];
    for (std::size_t i = 0; i < bt.size(); ++i) r[at.size() + i] = bt[i];
    return make_op(std::move(r), {a, b},
                   [Ca, Cb](const std::vector<Val>&, const Val&, const Val& g,
                            const std::vector<bool>& want) -> std::vector<Val> {
                       std::vector<Val> r2(2);
                       if (want[0]) r2[0] = slice_channels_op(g, 0, Ca);
                       if (want[1]) r2[1] = slice_channels_op(g, Ca, Ca + Cb);
                       return r2;
                   });
}

// ----------------------------------------------------------------- spatial

namespace {

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is (1-w1)
};

LerpAxis lerp_axis(int in_dim, int out_dim) {
    LerpAxis ax;
    ax.i0.resize(static_cast<std::size_t>(out_dim));
    ax.i1.resize(static_cast<std::size_t>(out_dim));
    ax.w1.resize(static_cast<std::size_t>(out_dim));
    double scale = static_cast<double>(in_dim) / out_dim;
    for (int o = 0; o < out_dim; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        if (src < 0.0) src = 0.0;
        if (src > in_dim - 1) src = in_dim - 1;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in_dim - 1) i0 = in_dim - 1;
        int i1 = std::min(i0 + 1, in_dim - 1);
        ax.i0[static_cast<std::size_t>(o)] = i0;
        ax.i1[static_cast<std::size_t>(o)] = i1;
        ax.w1[static_cast<std::size_t>(o)] = src - i0;
    }
    return ax;
}

Val upsample_adjoint_op(const Val& g, int in_h, int in_w);

Tensor upsample_k(const Tensor& x, int C, int H, int W, int H2, int W2) {
    LerpAxis ay = lerp_axis(H, H2), axx = lerp_axis(W, W2);
    std::vector<int> shape = x.rank() == 3 ? std::vector<int>{C, H2, W2} : std::vector<int>{H2, W2};
    Tensor r(shape);
    for (int c = 0; c < C; ++c) {
        const double* src = x.data() + static_cast<std::size_t>(c) * H * W;
        double* dst = r.data() + static_cast<std::size_t>(c) * H2 * W2;
        for (int y = 0; y < H2; ++y) {
            int y0 = ay.i0[static_cast<std::size_t>(y)], y1 = ay.i1[static_cast<std::size_t>(y)];
            double wy = ay.w1[static_cast<std::size_t>(y)];
            for (int xo = 0; xo < W2; ++xo) {
                int x0 = axx.i0[static_cast<std::size_t>(xo)], x1 = axx.i1[static_cast<std::size_t>(xo)];
                double wx = axx.w1[static_cast<std::size_t>(xo)];
                double top = (1 - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1];
                double bot = (1 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1];
                dst[y * W2 + xo] = (1 - wy) * top + wy * bot;
            }
        }
    }
    return r;
}

}  // namespace

Val upsample_bilinear(const Val& x, int out_h, int out_w) {
    const Tensor& xt = x->value;
    require(xt.rank() == 2 || xt.rank() == 3, "upsample: rank 2 or 3 expected");
    int C = xt.rank() == 3 ? xt.dim(0) : 1;
    int H = xt.rank() == 3 ? xt.dim(1) : xt.dim(0);
    int W = xt.rank() == 3 ? xt.dim(2) : xt.dim(1);
    return make_op(upsample_k(xt, C, H, W, out_h, out_w), {x},
                   [H, W](const std::vector<Val>&, const Val&, const Val& g,
                          const std::vector<bool>&) -> std::vector<Val> {
                       return {upsample_adjoint_op(g, H, W)};
                   });
}

namespace {

Val upsample_adjoint_op(const Val& g, int in_h, int in_w) {
    const Tensor& gt = g->value;
    int C = gt.rank() == 3 ? gt.dim(0) : 1;
    int H2 = gt.rank() == 3 ? gt.dim(1) : gt.dim(0);
    int W2 = gt.rank() == 3 ? gt.dim(2) : gt.dim(1);
    LerpAxis ay = lerp_axis(in_h, H2), axx = lerp_axis(in_w, W2);
    std::vector<int> shape = gt.rank() == 3 ? std::vector<int>{C, in_h, in_w}
                                            : std::vector<int>{in_h, in_w};
    Tensor r(shape);
    for (int c = 0; c < C; ++c) {
        const double* src = gt.data() + static_cast<std::size_t>(c) * H2 * W2;
        double* dst = r.data() + static_cast<std::size_t>(c) * in_h * in_w;
        for (int y = 0; y < H2; ++y) {
            int y0 = ay.i0[static_cast<std::size_t>(y)], y1 = ay.i1[static_cast<std::size_t>(y)];
            double wy = ay.w1[static_cast<std::size_t>(y)];
            for (int xo = 0; xo < W2; ++xo) {
                int x0 = axx.i0[static_cast<std::size_t>(xo)], x1 = axx.i1[static_cast<std::size_t>(xo)];
                double wx = axx.w1[static_cast<std::size_t>(xo)];
                double gv = src[y * W2 + xo];
                dst[y0 * in_w + x0] += (1 - wy) * (1 - wx) * gv;
                dst[y0 * in_w + x1] += (1 - wy) * wx * gv;
                dst[y1 * in_w + x0] += wy * (1 - wx) * gv;
                dst[y1 * in_w + x1] += wy * wx * gv;
            }
        }
    }
    return make_op(std::move(r), {g},
                   [H2, W2](const std::vector<Val>&, const Val&, const Val& u,
                            const std::vector<bool>&) -> std::vector<Val> {
                       return {upsample_bilinear(u, H2, W2)};
                   });
}

Val translate_adjoint_op(const Val& g, int dy, int dx);

}  // namespace

Val translate_clamp(const Val& x, int dy, int dx) {
    const Tensor& xt = x->value;
    require(xt.rank() == 2 || xt.rank() == 3, "translate: rank 2 or 3 expected");
    int C = xt.rank() == 3 ? xt.dim(0) : 1;
    int H = xt.rank() == 3 ? xt.dim(1) : xt.dim(0);
    int W = xt.rank() == 3 ? xt.dim(2) : xt.dim(1);
    Tensor r(xt.shape());
    for (int c = 0; c < C; ++c) {
        const double* src = xt.data() + static_cast<std::size_t>(c) * H * W;
        double* dst = r.data() + static_cast<std::size_t>(c) * H * W;
        for (int y = 0; y < H; ++y) {
            int sy = std::clamp(y + dy, 0, H - 1);
            for (int xo = 0; xo < W; ++xo) {
                int sx = std::clamp(xo + dx, 0, W - 1);
                dst[y * W + xo] = src[sy * W + sx];
            }
        }
    }
    return make_op(std::move(r), {x},
                   [dy, dx](const std::vector<Val>&, const Val&, const Val& g,
                            const std::vector<bool>&) -> std::vector<Val> {
                       return {translate_adjoint_op(g, dy, dx)};
                   });
}

namespace {

Val translate_adjoint_op(const Val& g, int dy, int dx) {
    const Tensor& gt = g->value;
    int C = gt.rank() == 3 ? gt.dim(0) : 1;
    int H = gt.rank() == 3 ? gt.dim(1) : gt.dim(0);
    int W = gt.rank() == 3 ? gt.dim(2) : gt.dim(1);
    Tensor r(gt.shape());
    for (int c = 0; c < C; ++c) {
        const double* src = gt.data() + static_cast<std::size_t>(c) * H * W;
        double* dst = r.data() + static_cast<std::size_t>(c) * H * W;
        for (int y = 0; y < H; ++y) {
            int sy = std::clamp(y + dy, 0, H - 1);
            for (int xo = 0; xo < W; ++xo) {
                int sx = std::clamp(xo + dx, 0, W - 1);
                dst[sy * W + sx] += src[y * W + xo];
            }
        }
    }
    return make_op(std::move(r), {g},
                   [dy, dx](const std::vector<Val>&, const Val&, const Val& u,
                            const std::vector<bool>&) -> std::vector<Val> {
                       return {translate_clamp(u, dy, dx)};
                   });
}

struct WarpSample {
    int y0, y1, x0, x1;
    double fy, fx;
    bool in_y, in_x;  // false when the sample clamped to the border
};

WarpSample warp_sample(double sy, double sx, int H, int W) {
    WarpSample s{};
    s.in_y = sy > 0.0 && sy < H - 1;
    s.in_x = sx > 0.0 && sx < W - 1;
    sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
    sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
    s.y0 = std::min(static_cast<int>(std::floor(sy)), H - 1);
    s.x0 = std::min(static_cast<int>(std::floor(sx)), W - 1);
    s.y1 = std::min(s.y0 + 1, H - 1);
    s.x1 = std::min(s.x0 + 1, W - 1);
    s.fy = sy - s.y0;
    s.fx = sx - s.x0;
    return s;
}

}  // namespace

Val warp_bilinear(const Val& x, const Val& flow) {
    const Tensor& xt = x->value;
    const Tensor& ft = flow->value;
    require(xt.rank() == 3, "warp: image rank-3 expected");
    require(ft.rank() == 3 && ft.dim(0) == 2 && ft.dim(1) == xt.dim(1) && ft.dim(2) == xt.dim(2),
            "warp: flow must be (2,H,W)");
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    Tensor r({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int xo = 0; xo < W; ++xo) {
            double du = ft[static_cast<std::size_t>(0) * H * W + y * W + xo];
            double dv = ft[static_cast<std::size_t>(1) * H * W + y * W + xo];
            WarpSample s = warp_sample(y + du, xo + dv, H, W);
            for (int c = 0; c < C; ++c) {
                const double* src = xt.data() + static_cast<std::size_t>(c) * H * W;
                double top = (1 - s.fx) * src[s.y0 * W + s.x0] + s.fx * src[s.y0 * W + s.x1];
                double bot = (1 - s.fx) * src[s.y1 * W + s.x0] + s.fx * src[s.y1 * W + s.x1];
                r[(static_cast<std::size_t>(c) * H + y) * W + xo] = (1 - s.fy) * top + s.fy * bot;
            }
        }
    auto no_second_order = [](const std::vector<Val>&, const Val&, const Val&,
                              const std::vector<bool>&) -> std::vector<Val> {
        throw std::logic_error("warp vjp: second-order differentiation unsupported");
    };
    return make_op(std::move(r), {x, flow},
                   [no_second_order](const std::vector<Val>& p, const Val&, const Val& g,
                                     const std::vector<bool>& want) -> std::vector<Val> {
                       const Tensor& xv = p[0]->value;
                       const Tensor& fv = p[1]->value;
                       int C2 = xv.dim(0), H2 = xv.dim(1), W2 = xv.dim(2);
                       std::vector<Val> out(2);
                       if (want[0]) {
                           Tensor gx({C2, H2, W2});
                           for (int y = 0; y < H2; ++y)
                               for (int xo = 0; xo < W2; ++xo) {
                                   double du = fv[static_cast<std::size_t>(0) * H2 * W2 + y * W2 + xo];
                                   double dv = fv[static_cast<std::size_t>(1) * H2 * W2 + y * W2 + xo];
                                   WarpSample s = warp_sample(y + du, xo + dv, H2, W2);
                                   for (int c = 0; c < C2; ++c) {
                                       double gv = g->value[(static_cast<std::size_t>(c) * H2 + y) * W2 + xo];
                                       double* dst = gx.data() + static_cast<std::size_t>(c) * H2 * W2;
                                       dst[s.y0 * W2 + s.x0] += gv * (1 - s.fy) * (1 - s.fx);
                                       dst[s.y0 * W2 + s.x1] += gv * (1 - s.fy) * s.fx;
                                       dst[s.y1 * W2 + s.x0] += gv * s.fy * (1 - s.fx);
                                       dst[s.y1 * W2 + s.x1] += gv * s.fy * s.fx;
                                   }
                               }
                           out[0] = make_op(std::move(gx), {g}, no_second_order);
                       }
                       if (want[1]) {
                           Tensor gf({2, H2, W2});
                           for (int y = 0; y < H2; ++y)
                               for (int xo = 0; xo < W2; ++xo) {
                                   double du = fv[static_cast<std::size_t>(0) * H2 * W2 + y * W2 + xo];
                                   double dv = fv[static_cast<std::size_t>(1) * H2 * W2 + y * W2 + xo];
                                   WarpSample s = warp_sample(y + du, xo + dv, H2, W2);
                                   double su = 0.0, sv = 0.0;
                                   for (int c = 0; c < C2; ++c) {
                                       const double* src = xv.data() + static_cast<std::size_t>(c) * H2 * W2;
                                       double gv = g->value[(static_cast<std::size_t>(c) * H2 + y) * W2 + xo];
                                       double top = (1 - s.fx) * src[s.y0 * W2 + s.x0] + s.fx * src[s.y0 * W2 + s.x1];
                                       double bot = (1 - s.fx) * src[s.y1 * W2 + s.x0] + s.fx * src[s.y1 * W2 + s.x1];
                                       if (s.in_y) su += gv * (bot - top);
                                       double left = (1 - s.fy) * src[s.y0 * W2 + s.x0] + s.fy * src[s.y1 * W2 + s.x0];
                                       double right = (1 - s.fy) * src[s.y0 * W2 + s.x1] + s.fy * src[s.y1 * W2 + s.x1];
                                       if (s.in_x) sv += gv * (right - left);
                                   }
                                   gf[static_cast<std::size_t>(0) * H2 * W2 + y * W2 + xo] = su;
                                   gf[static_cast<std::size_t>(1) * H2 * W2 + y * W2 + xo] = sv;
                               }
                           out[1] = make_op(std::move(gf), {g}, no_second_order);
                       }
                       return out;
                   });
}

Val normalize01(const Val& a) {
    Val mn = reduce_min(a);
    Val range = sub(reduce_max(a), mn);
    return div(sub(a, mn), add_scalar(range, 1e-12));
}

// ----------------------------------------------------------------- filters

Val median3x3(const Val& x) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3, "median3x3: rank-3 expected");
    int C = xt.dim(0), H = xt.dim(1), W = xt.dim(2);
    Tensor r({C, H, W});
    double win[9];
    for (int c = 0; c < C; ++c) {
        const double* src = xt.data() + static_cast<std::size_t>(c) * H * W;
        double* dst = r.data() + static_cast<std::size_t>(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int xo = 0; xo < W; ++xo) {
                int k = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int sy = std::clamp(y + dy, 0, H - 1);
                        int sx = std::clamp(xo + dx, 0, W - 1);
                        win[k++] = src[sy * W + sx];
                    }
                std::nth_element(win, win + 4, win + 9);
                dst[y * W + xo] = win[4];
            }
    }
    // straight-through estimator
    return make_op(std::move(r), {x},
                   [](const std::vector<Val>&, const Val&, const Val& g,
                      const std::vector<bool>&) -> std::vector<Val> { return {g}; });
}

namespace {

struct NlmWeights {
    int search = 0, C = 0, H = 0, W = 0;
    std::vector<double> w;  // (H*W) x (search*search), row-normalized
};

std::shared_ptr<NlmWeights> nlm_weights(const Tensor& x, int search, int patch, double strength) {
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    auto nw = std::make_shared<NlmWeights>();
    nw->search = search;
    nw->C = C;
    nw->H = H;
    nw->W = W;
    int sr = search / 2, pr = patch / 2;
    double h = strength / 255.0;
    double inv_h2 = 1.0 / (h * h);
    double inv_patch = 1.0 / (patch * patch * C);
    nw->w.assign(static_cast<std::size_t>(H) * W * search * search, 0.0);
    auto px = [&](int c, int y, int xx) {
        y = std::clamp(y, 0, H - 1);
        xx = std::clamp(xx, 0, W - 1);
        return x[(static_cast<std::size_t>(c) * H + y) * W + xx];
    };
    for (int y = 0; y < H; ++y)
        for (int xo = 0; xo < W; ++xo) {
            double* wrow = nw->w.data() + (static_cast<std::size_t>(y) * W + xo) * search * search;
            double total = 0.0;
            for (int dy = -sr; dy <= sr; ++dy)
                for (int dx = -sr; dx <= sr; ++dx) {
                    double d2 = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int py = -pr; py <= pr; ++py)
                            for (int pxx = -pr; pxx <= pr; ++pxx) {
                                double diff = px(c, y + py, xo + pxx) - px(c, y + dy + py, xo + dx + pxx);
                                d2 += diff * diff;
                            }
                    double wv = std::exp(-d2 * inv_patch * inv_h2);
                    wrow[(dy + sr) * search + (dx + sr)] = wv;
                    total += wv;
                }
            double inv = 1.0 / total;
            for (int k = 0; k < search * search; ++k) wrow[k] *= inv;
        }
    return nw;
}

Tensor nlm_apply_k(const Tensor& x, const NlmWeights& nw) {
    int C = nw.C, H = nw.H, W = nw.W, sr = nw.search / 2;
    Tensor r({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int xo = 0; xo < W; ++xo) {
            const double* wrow = nw.w.data() + (static_cast<std::size_t>(y) * W + xo) * nw.search * nw.search;
            for (int dy = -sr; dy <= sr; ++dy)
                for (int dx = -sr; dx <= sr; ++dx) {
                    double wv = wrow[(dy + sr) * nw.search + (dx + sr)];
                    int sy = std::clamp(y + dy, 0, H - 1);
                    int sx = std::clamp(xo + dx, 0, W - 1);
                    for (int c = 0; c < C; ++c)
                        r[(static_cast<std::size_t>(c) * H + y) * W + xo] +=
                            wv * x[(static_cast<std::size_t>(c) * H + sy) * W + sx];
                }
        }
    return r;
}

Tensor nlm_adjoint_k(const Tensor& g, const NlmWeights& nw) {
    int C = nw.C, H = nw.H, W = nw.W, sr = nw.search / 2;
    Tensor r({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int xo = 0; xo < W; ++xo) {
            const double* wrow = nw.w.data() + (static_cast<std::size_t>(y) * W + xo) * nw.search * nw.search;
            for (int dy = -sr; dy <= sr; ++dy)
                for (int dx = -sr; dx <= sr; ++dx) {
                    double wv = wrow[(dy + sr) * nw.search + (dx + sr)];
                    int sy = std::clamp(y + dy, 0, H - 1);
                    int sx = std::clamp(xo + dx, 0, W - 1);
                    for (int c = 0; c < C; ++c)
                        r[(static_cast<std::size_t>(c) * H + sy) * W + sx] +=
                            wv * g[(static_cast<std::size_t>(c) * H + y) * W + xo];
                }
        }
    return r;
}

Val nlm_adjoint_op(const Val& g, std::shared_ptr<NlmWeights> nw);

Val nlm_apply_op(const Val& x, std::shared_ptr<NlmWeights> nw) {
    return make_op(nlm_apply_k(x->value, *nw), {x},
                   [nw](const std::vector<Val>&, const Val&, const Val& g,
                        const std::vector<bool>&) -> std::vector<Val> {
                       return {nlm_adjoint_op(g, nw)};
                   });
}

Val nlm_adjoint_op(const Val& g, std::shared_ptr<NlmWeights> nw) {
    return make_op(nlm_adjoint_k(g->value, *nw), {g},
                   [nw](const std::vector<Val>&, const Val&, const Val& u,
                        const std::vector<bool>&) -> std::vector<Val> {
                       return {nlm_apply_op(u, nw)};
                   });
}

}  // namespace

Val nonlocal_means(const Val& x, int search, int patch, double strength) {
    const Tensor& xt = x->value;
    require(xt.rank() == 3, "nonlocal_means: rank-3 expected");
    require(search % 2 == 1 && patch % 2 == 1, "nonlocal_means: odd window sizes expected");
    auto nw = nlm_weights(xt, search, patch, strength);
    return nlm_apply_op(x, nw);
}

}  // namespace adv2::ag
