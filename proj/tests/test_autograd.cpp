#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "adv2/autograd.hpp"
#include "adv2/rng.hpp"

using namespace adv2;
using namespace adv2::ag;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Central finite differences of a scalar-valued builder against the graph
// gradient of the same builder.
void check_grad(const std::function<Val(const Val&)>& build, Tensor x0,
                double step = 1e-5, double tol = 1e-6) {
    Val x = leaf(x0);
    Val y = build(x);
    REQUIRE(y->value.size() == 1);
    Val g = gradients(y, {x})[0];
    for (std::size_t i = 0; i < x0.size(); ++i) {
        Tensor xp = x0, xm = x0;
        xp[i] += step;
        xm[i] -= step;
        double fp = scalar_of(build(constant(xp)));
        double fm = scalar_of(build(constant(xm)));
        double fd = (fp - fm) / (2 * step);
        double an = g->value[i];
        double scale = std::max({1.0, std::fabs(fd), std::fabs(an)});
        CHECK(std::fabs(fd - an) / scale < tol);
    }
}

// Second order: compare FD of (analytic first gradient dotted with a fixed
// vector) against the double-backward result.
void check_grad2(const std::function<Val(const Val&)>& build, Tensor x0, const Tensor& v,
                 double step = 1e-5, double tol = 5e-5) {
    auto gdotv = [&](const Tensor& at) {
        Val x = leaf(at);
        Val y = build(x);
        Val g = gradients(y, {x})[0];
        return dot(g, constant(v));
    };
    Val x = leaf(x0);
    Val s = gdotv(x0);
    // rebuild on the same leaf so the second backward can reach it
    Val y = build(x);
    Val g = gradients(y, {x})[0];
    Val sc = dot(g, constant(v));
    Val h = gradients(sc, {x})[0];
    for (std::size_t i = 0; i < x0.size(); ++i) {
        Tensor xp = x0, xm = x0;
        xp[i] += step;
        xm[i] -= step;
        double fp = scalar_of(gdotv(xp));
        double fm = scalar_of(gdotv(xm));
        double fd = (fp - fm) / (2 * step);
        double an = h->value[i];
        double scale = std::max({1.0, std::fabs(fd), std::fabs(an)});
        CHECK(std::fabs(fd - an) / scale < tol);
    }
    (void)s;
}

}  // namespace

TEST_CASE("elementwise first-order gradients") {
    Rng rng(7);
    Tensor x0 = random_tensor({6}, rng, 0.2, 1.5);
    check_grad([](const Val& x) { return sum_all(mul(x, x)); }, x0);
    check_grad([](const Val& x) { return sum_all(exp_(mul_scalar(x, 0.7))); }, x0);
    check_grad([](const Val& x) { return sum_all(log_(add_scalar(x, 1.0))); }, x0);
    check_grad([](const Val& x) { return sum_all(sqrt_(add_scalar(x, 0.5))); }, x0);
    check_grad([](const Val& x) { return sum_all(sigmoid_(x)); }, x0);
    check_grad([](const Val& x) { return mean_all(square(add_scalar(x, -0.3))); }, x0);
    check_grad([](const Val& x) { return sum_all(div(x, add_scalar(square(x), 2.0))); }, x0);
}

TEST_CASE("scalar broadcasting in binary ops") {
    Rng rng(9);
    Tensor x0 = random_tensor({5}, rng, 0.5, 2.0);
    check_grad([](const Val& x) {
        Val s = sum_all(x);
        return sum_all(div(x, s));  // normalize-by-sum pattern
    }, x0);
    check_grad([](const Val& x) {
        Val m = reduce_max(x);
        return sum_all(square(sub(x, m)));
    }, x0);
}

TEST_CASE("softmax and log_softmax") {
    Rng rng(11);
    Tensor z0 = random_tensor({7}, rng, -2.0, 2.0);
    check_grad([](const Val& z) { return pick(softmax(z), 3); }, z0);
    check_grad([](const Val& z) { return neg(pick(log_softmax(z), 2)); }, z0);

    Val p = softmax(constant(z0));
    double s = p->value.sum();
    CHECK(std::fabs(s - 1.0) < 1e-12);
}

TEST_CASE("relu rules: forward identical, backward differs") {
    Rng rng(13);
    Tensor x0 = random_tensor({8}, rng);
    Val a = relu(constant(x0), {ReluMode::exact});
    Val b = relu(constant(x0), {ReluMode::smooth_h});
    Val c = relu(constant(x0), {ReluMode::sigmoid});
    for (std::size_t i = 0; i < x0.size(); ++i) {
        CHECK(a->value[i] == b->value[i]);
        CHECK(a->value[i] == c->value[i]);
    }
    check_grad([](const Val& x) { return sum_all(square(relu(x, {ReluMode::exact}))); }, x0);
}

TEST_CASE("smooth_h relu backward matches the two-branch formula") {
    Tensor x0({4}, {-2.0, -0.1, 0.1, 2.0});
    double tau = 1e-4;
    Val x = leaf(x0);
    Val y = sum_all(relu(x, {ReluMode::smooth_h, tau}));
    Val g = gradients(y, {x})[0];
    for (std::size_t i = 0; i < x0.size(); ++i) {
        double z = x0[i];
        double want = z < 0 ? 1.0 + z / std::sqrt(z * z + tau) : z / std::sqrt(z * z + tau);
        CHECK(std::fabs(g->value[i] - want) < 1e-12);
    }
}

TEST_CASE("second-order through smooth_h relu uses the surrogate consistently") {
    // Under the smooth rule every backward pass replaces the relu derivative
    // by h(z), so for L = sum(relu(x)^2):
    //   g_i   = 2 relu(x_i) h(x_i)
    //   dg/dx = 2 [h(x_i)^2 + relu(x_i) h'(x_i)],  h'(z) = tau (z^2+tau)^{-3/2}
    Rng rng(17);
    Tensor x0 = random_tensor({6}, rng);
    double tau = 1e-2;
    ReluRule rule{ReluMode::smooth_h, tau};
    Val x = leaf(x0);
    Val y = sum_all(square(relu(x, rule)));
    Val g = gradients(y, {x})[0];
    Val s = sum_all(g);
    Val h2 = gradients(s, {x})[0];
    for (std::size_t i = 0; i < x0.size(); ++i) {
        double z = x0[i];
        double h = z / std::sqrt(z * z + tau) + (z < 0 ? 1.0 : 0.0);
        double hp = tau / std::pow(z * z + tau, 1.5);
        double rz = z > 0 ? z : 0.0;
        double want = 2.0 * (h * h + rz * hp);
        CHECK(std::fabs(h2->value[i] - want) < 1e-10);
        double gw = 2.0 * rz * h;
        CHECK(std::fabs(g->value[i] - gw) < 1e-12);
    }
}

TEST_CASE("matvec / affine gradients") {
    Rng rng(19);
    Tensor W0 = random_tensor({4, 5}, rng);
    Tensor x0 = random_tensor({5}, rng);
    Tensor b0 = random_tensor({4}, rng);
    {
        Val W = leaf(W0);
        Val y = sum_all(square(matvec(W, constant(x0))));
        Val g = gradients(y, {W})[0];
        Tensor Wp = W0;
        double step = 1e-6;
        for (std::size_t i = 0; i < W0.size(); ++i) {
            Tensor a = W0, b = W0;
            a[i] += step;
            b[i] -= step;
            double fp = scalar_of(sum_all(square(matvec(constant(a), constant(x0)))));
            double fm = scalar_of(sum_all(square(matvec(constant(b), constant(x0)))));
            CHECK(std::fabs((fp - fm) / (2 * step) - g->value[i]) < 1e-5);
        }
        (void)Wp;
    }
    check_grad([&](const Val& x) {
        return sum_all(square(affine(constant(W0), x, constant(b0))));
    }, x0);
}

TEST_CASE("conv2d first-order gradients (input and weight)") {
    Rng rng(23);
    Tensor x0 = random_tensor({2, 6, 7}, rng);
    Tensor w0 = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    for (int stride : {1, 2}) {
        check_grad([&](const Val& x) {
            return sum_all(square(conv2d(x, constant(w0), stride, 1)));
        }, x0, 1e-5, 1e-5);
        Val w = leaf(w0);
        Val y = sum_all(square(conv2d(constant(x0), w, stride, 1)));
        Val g = gradients(y, {w})[0];
        double step = 1e-6;
        for (std::size_t i = 0; i < w0.size(); i += 7) {
            Tensor a = w0, b = w0;
            a[i] += step;
            b[i] -= step;
            double fp = scalar_of(sum_all(square(conv2d(constant(x0), constant(a), stride, 1))));
            double fm = scalar_of(sum_all(square(conv2d(constant(x0), constant(b), stride, 1))));
            CHECK(std::fabs((fp - fm) / (2 * step) - g->value[i]) < 1e-5);
        }
    }
}

TEST_CASE("conv2d second-order (double backward)") {
    Rng rng(29);
    Tensor x0 = random_tensor({1, 5, 5}, rng);
    Tensor w0 = random_tensor({2, 1, 3, 3}, rng, -0.5, 0.5);
    Tensor v = random_tensor({1, 5, 5}, rng);
    check_grad2([&](const Val& x) {
        Val y = conv2d(x, constant(w0), 1, 1);
        return sum_all(mul(square(y), y));  // cubic so the Hessian is nonzero
    }, x0, v, 1e-5, 5e-4);
}

TEST_CASE("bias, gap, flatten, channel_max, concat") {
    Rng rng(31);
    Tensor x0 = random_tensor({3, 4, 4}, rng);
    Tensor b0 = random_tensor({3}, rng);
    check_grad([&](const Val& x) { return sum_all(square(add_channel_bias(x, constant(b0)))); }, x0);
    check_grad([](const Val& x) { return sum_all(square(gap2d(x))); }, x0);
    check_grad([](const Val& x) { return sum_all(square(flatten(x))); }, x0);
    check_grad([](const Val& x) { return sum_all(square(channel_max(x))); }, x0);
    check_grad([](const Val& x) {
        return sum_all(square(concat_channels(x, mul_scalar(x, 2.0))));
    }, x0);
}

TEST_CASE("upsample and translate are consistent with their adjoints") {
    Rng rng(37);
    Tensor x0 = random_tensor({1, 5, 6}, rng);
    check_grad([](const Val& x) { return sum_all(square(upsample_bilinear(x, 11, 13))); }, x0);
    check_grad([](const Val& x) { return sum_all(square(translate_clamp(x, 1, -2))); }, x0);

    // <Ax, y> == <x, A^T y> for the upsample pair
    Tensor y0 = random_tensor({1, 11, 13}, rng);
    Val up = upsample_bilinear(leaf(x0), 11, 13);
    Val ip = dot(up, constant(y0));
    Val gx = gradients(ip, {up->parents[0]})[0];
    double check = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) check += gx->value[i] * x0[i];
    CHECK(std::fabs(check - scalar_of(ip)) < 1e-9);
}

TEST_CASE("pick / reduce_min / reduce_max route gradients to the argument") {
    Tensor x0({4}, {0.3, -0.5, 2.0, 1.0});
    Val x = leaf(x0);
    Val y = add(reduce_max(x), mul_scalar(reduce_min(x), 2.0));
    Val g = gradients(y, {x})[0];
    CHECK(g->value[0] == 0.0);
    CHECK(g->value[1] == 2.0);
    CHECK(g->value[2] == 1.0);
    CHECK(g->value[3] == 0.0);
}

TEST_CASE("normalize01 maps constants to zero and is differentiable") {
    Tensor c0 = Tensor::full({5}, 0.7);
    Val n = normalize01(constant(c0));
    for (std::size_t i = 0; i < n->value.size(); ++i) CHECK(n->value[i] == 0.0);

    Rng rng(41);
    Tensor x0 = random_tensor({6}, rng);
    check_grad([](const Val& x) { return sum_all(square(normalize01(x))); }, x0, 1e-6, 1e-4);
}

TEST_CASE("warp_bilinear: identity, flow gradient") {
    Rng rng(43);
    Tensor x0 = random_tensor({2, 6, 6}, rng, 0.0, 1.0);
    Tensor zero_flow({2, 6, 6});
    Val w = warp_bilinear(constant(x0), constant(zero_flow));
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(w->value[i] == x0[i]);

    // flow gradient vs finite differences, away from integer lattice points
    Tensor f0({2, 6, 6});
    for (std::size_t i = 0; i < f0.size(); ++i) f0[i] = rng.uniform(-0.4, 0.4) + 0.1;
    auto build = [&](const Tensor& f) {
        return sum_all(square(warp_bilinear(constant(x0), constant(f))));
    };
    Val fl = leaf(f0);
    Val y = sum_all(square(warp_bilinear(constant(x0), fl)));
    Val g = gradients(y, {fl})[0];
    double step = 1e-6;
    for (std::size_t i = 0; i < f0.size(); i += 5) {
        Tensor a = f0, b = f0;
        a[i] += step;
        b[i] -= step;
        double fd = (scalar_of(build(a)) - scalar_of(build(b))) / (2 * step);
        CHECK(std::fabs(fd - g->value[i]) < 1e-4);
    }
}

TEST_CASE("median3x3 forward on constant images") {
    Tensor x0 = Tensor::full({1, 5, 5}, 0.4);
    Val y = median3x3(constant(x0));
    for (std::size_t i = 0; i < y->value.size(); ++i) CHECK(y->value[i] == 0.4);
}

TEST_CASE("nonlocal_means preserves constants and stays in range") {
    Tensor x0 = Tensor::full({1, 8, 8}, 0.25);
    Val y = nonlocal_means(constant(x0), 5, 3, 4.0);
    for (std::size_t i = 0; i < y->value.size(); ++i) CHECK(std::fabs(y->value[i] - 0.25) < 1e-12);

    Rng rng(47);
    Tensor z0 = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
    Val z = nonlocal_means(constant(z0), 5, 3, 4.0);
    CHECK(z->value.min() >= 0.0);
    CHECK(z->value.max() <= 1.0);
}

TEST_CASE("gradient of a gradient: classic quadratic sanity") {
    // y = sum(x^3); dy/dx = 3x^2; d/dx (dy/dx . v) = 6 x v
    Tensor x0({3}, {0.5, -1.0, 2.0});
    Tensor v({3}, {1.0, 2.0, -1.0});
    Val x = leaf(x0);
    Val y = sum_all(mul(square(x), x));
    Val g = gradients(y, {x})[0];
    Val s = dot(g, constant(v));
    Val h = gradients(s, {x})[0];
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(std::fabs(h->value[i] - 6.0 * x0[i] * v[i]) < 1e-10);
}

TEST_CASE("stopgrad blocks gradient flow") {
    Tensor x0({3}, {1.0, 2.0, 3.0});
    Val x = leaf(x0);
    Val y = sum_all(mul(x, stopgrad(square(x))));
    Val g = gradients(y, {x})[0];
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(std::fabs(g->value[i] - x0[i] * x0[i]) < 1e-12);
}

TEST_CASE("gradients w.r.t. intermediate nodes") {
    Tensor x0({3}, {0.2, 0.4, 0.6});
    Val x = leaf(x0);
    Val mid = square(x);
    Val y = sum_all(mul(mid, mid));
    Val g = gradients(y, {mid})[0];
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(std::fabs(g->value[i] - 2.0 * x0[i] * x0[i]) < 1e-12);
}
