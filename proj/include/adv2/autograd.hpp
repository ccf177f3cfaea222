#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "adv2/tensor.hpp"

namespace adv2::ag {

class Node;
using Val = std::shared_ptr<Node>;

// Define-by-run autodiff graph. Backward functions emit graph nodes built
// from the same primitives, so gradients are themselves differentiable:
// calling gradients() on a value produced by gradients() yields second-order
// derivatives. This is what the interpretation-loss attacks rely on.
class Node {
public:
    // vjp(parents, self, upstream, want) returns one grad Val per parent;
    // entries with want[i]==false may be null and are never accumulated.
    using Vjp = std::function<std::vector<Val>(const std::vector<Val>&, const Val&,
                                               const Val&, const std::vector<bool>&)>;

    Tensor value;
    std::vector<Val> parents;
    Vjp vjp;
    bool requires_grad = false;
    std::uint64_t id = 0;
};

Val constant(Tensor t);
Val leaf(Tensor t);  // differentiable input
Val make_op(Tensor out, std::vector<Val> parents, Node::Vjp vjp);

inline const Tensor& val(const Val& v) { return v->value; }
inline double scalar_of(const Val& v) { return v->value[0]; }

// Reverse-mode gradients of a scalar (or seeded) output w.r.t. `wrt`.
// Returned values are graph nodes and can be differentiated again. Nodes
// unreachable from `output` get zero gradients.
std::vector<Val> gradients(const Val& output, const std::vector<Val>& wrt,
                           const Tensor* seed = nullptr);

// ---- elementwise ----
Val add(const Val& a, const Val& b);       // same shape, or one side scalar
Val sub(const Val& a, const Val& b);
Val mul(const Val& a, const Val& b);
Val div(const Val& a, const Val& b);       // b same shape or scalar
Val neg(const Val& a);
Val add_scalar(const Val& a, double s);
Val mul_scalar(const Val& a, double s);
Val abs_(const Val& a);
Val exp_(const Val& a);
Val log_(const Val& a);
Val sqrt_(const Val& a);
Val square(const Val& a);
Val sigmoid_(const Val& a);
Val stopgrad(const Val& a);

// Piecewise-constant gates (zero derivative everywhere they exist).
Val gate_pos(const Val& a);  // 1[a > 0]
Val gate_neg(const Val& a);  // 1[a < 0]

enum class ReluMode { exact, smooth_h, sigmoid };
struct ReluRule {
    ReluMode mode = ReluMode::exact;
    double tau = 1e-4;
};
// Forward is max(x,0) in every mode; only the backward multiplier changes.
Val relu(const Val& x, const ReluRule& rule = {});

// ---- reductions / indexing ----
Val sum_all(const Val& a);                  // -> {1}
Val mean_all(const Val& a);                 // -> {1}
Val reduce_min(const Val& a);               // -> {1}, grad to first argmin
Val reduce_max(const Val& a);               // -> {1}, grad to first argmax
Val pick(const Val& a, int index);          // -> {1}
Val dot(const Val& a, const Val& b);

// ---- vectors / linear head ----
Val matvec(const Val& W, const Val& x);     // (out,in) x (in) -> (out)
Val affine(const Val& W, const Val& x, const Val& b);
Val log_softmax(const Val& z);
Val softmax(const Val& z);

// ---- conv nets (tensors are (C,H,W), weights (Cout,Cin,Kh,Kw)) ----
Val conv2d(const Val& x, const Val& w, int stride, int pad);
Val add_channel_bias(const Val& x, const Val& b);
Val gap2d(const Val& x);                    // (C,H,W) -> (C), spatial mean
Val flatten(const Val& x);                  // (C,H,W) -> (C*H*W)
Val channel_max(const Val& x);              // (C,H,W) -> (H,W)
Val concat_channels(const Val& a, const Val& b);
Val expand_channels(const Val& m, int C);   // (H,W) -> (C,H,W) replicate
Val sum_channels(const Val& x);             // (C,H,W) -> (H,W)
Val reshape(const Val& x, std::vector<int> shape);

// ---- spatial ----
Val upsample_bilinear(const Val& x, int out_h, int out_w);  // rank 2 or 3
Val translate_clamp(const Val& x, int dy, int dx);          // border clamp
// Bilinear warp of (C,H,W) image by flow (2,H,W): out[c,i,j] samples
// x at (i + flow[0,i,j], j + flow[1,i,j]), border clamped.
Val warp_bilinear(const Val& x, const Val& flow);

// min-max normalization to [0,1]; constant maps normalize to zeros
// (a tiny epsilon keeps the graph differentiable when the range is healthy).
Val normalize01(const Val& a);

// ---- filters with surrogate backward rules ----
Val median3x3(const Val& x);  // straight-through backward
// Non-local means; backward treats the similarity weights as constants.
Val nonlocal_means(const Val& x, int search, int patch, double strength);

}  // namespace adv2::ag
