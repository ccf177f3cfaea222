#include "adv2/interpreters.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace adv2::interp {

using namespace adv2::ag;
using nn::Classifier;
using nn::Forward;
using nn::Image;

std::string to_string(InterpreterId id) {
    switch (id) {
        case InterpreterId::grad: return "grad";
        case InterpreterId::ig: return "ig";
        case InterpreterId::cam: return "cam";
        case InterpreterId::gradcam: return "gradcam";
        case InterpreterId::mask: return "mask";
        case InterpreterId::rts: return "rts";
    }
    return "?";
}

InterpreterId interpreter_from_string(const std::string& s) {
    if (s == "grad") return InterpreterId::grad;
    if (s == "ig") return InterpreterId::ig;
    if (s == "cam") return InterpreterId::cam;
    if (s == "gradcam") return InterpreterId::gradcam;
    if (s == "mask") return InterpreterId::mask;
    if (s == "rts") return InterpreterId::rts;
    throw std::invalid_argument("unknown interpreter id: " + s);
}

Tensor normalize_map(const Tensor& raw) {
    double lo = raw.min(), hi = raw.max();
    Tensor out(raw.shape());
    if (hi - lo <= 0.0) return out;
    double inv = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - lo) * inv;
    return out;
}

namespace {

Tensor channel_max_numeric(const Tensor& chw) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor m({H, W});
    for (int i = 0; i < H * W; ++i) {
        double best = chw[static_cast<std::size_t>(i)];
        for (int c = 1; c < C; ++c)
            best = std::max(best, chw[static_cast<std::size_t>(c) * H * W + i]);
        m[static_cast<std::size_t>(i)] = best;
    }
    return m;
}

}  // namespace

AttributionMap grad_saliency(const Classifier& f, const Image& x, int c, const ReluRule& rule) {
    Tensor g = nn::input_gradient(f, x, c, rule);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::fabs(g[i]);
    return {normalize_map(channel_max_numeric(g)), InterpreterId::grad};
}

IgResult integrated_gradients(const Classifier& f, const Image& x, const Image& baseline,
                              int c, int steps) {
    if (steps < 8) throw std::invalid_argument("integrated_gradients: steps >= 8 required");
    if (!x.pixels.same_shape(baseline.pixels))
        throw std::invalid_argument("integrated_gradients: baseline shape mismatch");
    Tensor diff = x.pixels - baseline.pixels;
    Tensor acc(x.pixels.shape());
    for (int k = 0; k < steps; ++k) {
        double t = (k + 0.5) / steps;  // midpoint rule
        Tensor xt = baseline.pixels;
        axpy(xt, t, diff);
        Tensor g = nn::input_gradient(f, Image{xt, {}}, c, {});
        axpy(acc, 1.0 / steps, g);
    }
    IgResult r;
    r.raw = acc * diff;
    r.raw_sum = r.raw.sum();
    r.fc_x = nn::predict_proba(f, x)[static_cast<std::size_t>(c)];
    r.fc_base = nn::predict_proba(f, baseline)[static_cast<std::size_t>(c)];
    // per-pixel map: channel sum, then normalized
    int C = r.raw.dim(0), H = r.raw.dim(1), W = r.raw.dim(2);
    Tensor m({H, W});
    for (int ch = 0; ch < C; ++ch)
        for (int i = 0; i < H * W; ++i)
            m[static_cast<std::size_t>(i)] += r.raw[static_cast<std::size_t>(ch) * H * W + i];
    r.map = {normalize_map(m), InterpreterId::ig};
    return r;
}

// ------------------------------------------------------------ CAM family

namespace {

void require_cam_head(const Classifier& f) {
    if (!f.has_conv() || f.arch().head != nn::HeadKind::gap)
        throw std::invalid_argument("cam: architecture must end in gap + linear head");
}

Tensor weighted_channel_sum(const Tensor& feats, const double* w, double scale) {
    int K = feats.dim(0), H = feats.dim(1), W = feats.dim(2);
    Tensor r({H, W});
    for (int k = 0; k < K; ++k)
        for (int i = 0; i < H * W; ++i)
            r[static_cast<std::size_t>(i)] += scale * w[k] * feats[static_cast<std::size_t>(k) * H * W + i];
    return r;
}

Tensor upsample_numeric(const Tensor& hw, int H2, int W2) {
    Val up = upsample_bilinear(constant(hw), H2, W2);
    return up->value;
}

}  // namespace

Tensor cam_map_raw(const Classifier& f, const Image& x, int c) {
    require_cam_head(f);
    Tensor feats = nn::feature_maps(f, x);
    const Tensor& W = f.head_weight();
    int K = feats.dim(0);
    std::vector<double> w(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) w[static_cast<std::size_t>(k)] = W[static_cast<std::size_t>(c) * K + k];
    double scale = 1.0 / (feats.dim(1) * feats.dim(2));
    return weighted_channel_sum(feats, w.data(), scale);
}

AttributionMap cam_map(const Classifier& f, const Image& x, int c) {
    Tensor raw = cam_map_raw(f, x, c);
    Tensor up = upsample_numeric(raw, x.pixels.dim(1), x.pixels.dim(2));
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = std::max(0.0, up[i]);
    return {normalize_map(up), InterpreterId::cam};
}

Tensor gradcam_weights(const Classifier& f, const Image& x, int c) {
    if (!f.has_conv())
        throw std::invalid_argument("gradcam: architecture has no convolutional layer");
    Val xin = constant(x.pixels);
    Forward fw = nn::forward_graph(f, xin, {}, true);
    Val tap = fw.conv_taps.back();
    Val zc = pick(fw.logits, c);
    Val ga = gradients(zc, {tap})[0];
    const Tensor& g = ga->value;
    int K = g.dim(0), H = g.dim(1), W = g.dim(2);
    Tensor w({K});
    for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (int i = 0; i < H * W; ++i) s += g[static_cast<std::size_t>(k) * H * W + i];
        w[static_cast<std::size_t>(k)] = s / (H * W);
    }
    return w;
}

AttributionMap gradcam_map(const Classifier& f, const Image& x, int c) {
    Tensor w = gradcam_weights(f, x, c);
    Tensor feats = nn::feature_maps(f, x);
    Tensor raw = weighted_channel_sum(feats, w.data(), 1.0);
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = std::max(0.0, raw[i]);
    Tensor up = upsample_numeric(raw, x.pixels.dim(1), x.pixels.dim(2));
    return {normalize_map(up), InterpreterId::gradcam};
}

// ------------------------------------------------------------------ MASK

std::vector<Tensor> mask_noise_bank(const MaskSolverConfig& cfg, const std::vector<int>& shape) {
    Rng rng(Rng::derive(cfg.seed, 0xA05E));
    int count = std::max(1, cfg.jitter_count);
    std::vector<Tensor> bank;
    bank.reserve(static_cast<std::size_t>(count));
    for (int j = 0; j < count; ++j) {
        Tensor n(shape);
        for (std::size_t i = 0; i < n.size(); ++i)
            n[i] = std::clamp(0.5 + rng.normal(0.0, cfg.noise_sigma), 0.0, 1.0);
        bank.push_back(std::move(n));
    }
    return bank;
}

Val mask_objective_graph(const Classifier& f, const Val& x, const Val& m, int c,
                         const MaskSolverConfig& cfg,
                         const std::vector<std::pair<int, int>>& jitters,
                         const std::vector<Tensor>& noises) {
    int C = x->value.dim(0);
    Val vdiff = sub(m, translate_clamp(m, -1, 0));
    Val hdiff = sub(m, translate_clamp(m, 0, -1));
    Val tv = add(sum_all(square(vdiff)), sum_all(square(hdiff)));
    Val deleted = sum_all(sub(constant(Tensor::full(m->value.shape(), 1.0)), m));

    Val mb = expand_channels(m, C);
    Val keep_inv = sub(constant(Tensor::full(mb->value.shape(), 1.0)), mb);
    Val conf = constant(Tensor::scalar(0.0));
    for (std::size_t j = 0; j < jitters.size(); ++j) {
        Val xj = jitters[j].first == 0 && jitters[j].second == 0
                     ? x
                     : translate_clamp(x, jitters[j].first, jitters[j].second);
        const Tensor& nz = noises[j % noises.size()];
        Val phi = add(mul(mb, xj), mul(keep_inv, constant(nz)));
        Forward fw = nn::forward_graph(f, phi);
        conf = add(conf, pick(fw.probs, c));
    }
    conf = mul_scalar(conf, 1.0 / static_cast<double>(jitters.size()));
    return add(add(mul_scalar(tv, cfg.lambda_tv), mul_scalar(deleted, cfg.lambda_sparsity)), conf);
}

MaskSolution mask_solve(const Classifier& f, const Image& x, const MaskSolverConfig& cfg) {
    if (cfg.iterations < 1) throw std::invalid_argument("mask_solve: iterations >= 1 required");
    int c = nn::predict_class(f, x);
    int H = x.pixels.dim(1), W = x.pixels.dim(2);
    Tensor m = Tensor::full({H, W}, cfg.init_value);
    auto noises = mask_noise_bank(cfg, x.pixels.shape());
    Rng jrng(Rng::derive(cfg.seed, 0x717E));
    nn::Adam adam(cfg.step_size);
    Val xc = constant(x.pixels);

    MaskSolution sol;
    sol.objective.reserve(static_cast<std::size_t>(cfg.iterations));
    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<std::pair<int, int>> jit;
        if (cfg.jitter > 0) {
            for (int j = 0; j < std::max(1, cfg.jitter_count); ++j)
                jit.emplace_back(jrng.uniform_int(-cfg.jitter, cfg.jitter),
                                 jrng.uniform_int(-cfg.jitter, cfg.jitter));
        } else {
            jit.emplace_back(0, 0);
        }
        Val mv = leaf(m);
        Val obj = mask_objective_graph(f, xc, mv, c, cfg, jit, noises);
        double objval = scalar_of(obj);
        if (!std::isfinite(objval))
            throw std::runtime_error("mask_solve: objective diverged (NaN/inf)");
        sol.objective.push_back(objval);
        Tensor g = gradients(obj, {mv})[0]->value;
        if (cfg.optimizer == MaskSolverConfig::Opt::adam)
            adam.step(m, g);
        else
            axpy(m, -cfg.step_size, g);
        m = clamp(m, 0.0, 1.0);
    }
    sol.mask = m;
    Tensor inv({H, W});
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 - m[i];
    sol.map = {normalize_map(inv), InterpreterId::mask};
    return sol;
}

// ------------------------------------------------------------------- RTS

namespace {

struct DecoderLevel {
    int size_h = 0, size_w = 0;
    std::vector<int> tap_indices;
    int tap_channels = 0;
    int out_channels = 0;
};

struct DecoderPlan {
    std::vector<DecoderLevel> levels;  // coarse -> fine
    int head_in = 0;                   // channels entering the final 1x1
};

DecoderPlan decoder_plan(const nn::Architecture& a) {
    if (a.convs.empty()) throw std::invalid_argument("rts: encoder must have conv layers");
    // stage dims after each conv
    std::vector<int> hs, ws, cs;
    int h = a.in_h, w = a.in_w;
    for (const auto& c : a.convs) {
        h = (h + 2 * c.pad - c.kernel) / c.stride + 1;
        w = (w + 2 * c.pad - c.kernel) / c.stride + 1;
        hs.push_back(h);
        ws.push_back(w);
        cs.push_back(c.out_channels);
    }
    DecoderPlan plan;
    int i = static_cast<int>(a.convs.size()) - 1;
    while (i >= 0) {
        DecoderLevel lv;
        lv.size_h = hs[static_cast<std::size_t>(i)];
        lv.size_w = ws[static_cast<std::size_t>(i)];
        while (i >= 0 && hs[static_cast<std::size_t>(i)] == lv.size_h &&
               ws[static_cast<std::size_t>(i)] == lv.size_w) {
            lv.tap_indices.push_back(i);
            lv.tap_channels += cs[static_cast<std::size_t>(i)];
            --i;
        }
        plan.levels.push_back(lv);
    }
    static const int widths[] = {32, 24, 12};
    for (std::size_t l = 0; l < plan.levels.size(); ++l)
        plan.levels[l].out_channels =
            l < 3 ? widths[l] : std::max(8, widths[2] >> (l - 2));
    plan.head_in = plan.levels.back().out_channels;
    return plan;
}

}  // namespace

RtsMasker rts_init_masker(const Classifier& f, std::uint64_t seed) {
    RtsMasker mk;
    mk.encoder = f;
    DecoderPlan plan = decoder_plan(f.arch());
    Rng rng(Rng::derive(seed, 0x5715));
    int prev = 0;
    for (const auto& lv : plan.levels) {
        int cin = lv.tap_channels + prev;
        Tensor w({lv.out_channels, cin, 3, 3});
        double scale = std::sqrt(2.0 / (cin * 9.0));
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, scale);
        mk.params.push_back(std::move(w));
        mk.params.push_back(Tensor({lv.out_channels}));
        prev = lv.out_channels;
    }
    Tensor w1({1, plan.head_in, 1, 1});
    for (std::size_t k = 0; k < w1.size(); ++k) w1[k] = rng.normal(0.0, 0.3);
    mk.params.push_back(std::move(w1));
    mk.params.push_back(Tensor({1}));
    int featdim = f.arch().convs.back().out_channels;
    mk.prototypes = Tensor({f.num_classes(), featdim});
    return mk;
}

Val rts_mask_graph(const RtsMasker& masker, const Val& x, std::vector<Val>* param_leaves) {
    const nn::Architecture& a = masker.encoder.arch();
    Forward fw = nn::forward_graph(masker.encoder, x, {}, true);
    DecoderPlan plan = decoder_plan(a);

    std::vector<Val> ps;
    ps.reserve(masker.params.size());
    for (const auto& p : masker.params)
        ps.push_back(param_leaves ? leaf(p) : constant(p));
    if (param_leaves) *param_leaves = ps;

    Val cur;  // empty until first level
    std::size_t pi = 0;
    for (const auto& lv : plan.levels) {
        Val taps;
        for (int ti : lv.tap_indices) {
            Val t = fw.conv_taps[static_cast<std::size_t>(ti)];
            taps = taps ? concat_channels(taps, t) : t;
        }
        Val in = taps;
        if (cur) {
            Val up = upsample_bilinear(cur, lv.size_h, lv.size_w);
            in = concat_channels(up, taps);
        }
        cur = relu(add_channel_bias(conv2d(in, ps[pi], 1, 1), ps[pi + 1]));
        pi += 2;
    }
    Val logit = add_channel_bias(conv2d(cur, ps[pi], 1, 0), ps[pi + 1]);
    Val mchw = sigmoid_(logit);  // (1,h,w) at the finest tap scale
    int H = a.in_h, W = a.in_w;
    Val m2d = reshape(mchw, {mchw->value.dim(1), mchw->value.dim(2)});
    if (mchw->value.dim(1) != H || mchw->value.dim(2) != W)
        m2d = upsample_bilinear(m2d, H, W);
    return m2d;
}

Val rts_encoder_features(const Classifier& encoder, const Val& x) {
    Forward fw = nn::forward_graph(encoder, x, {}, true);
    return gap2d(fw.conv_taps.back());
}

AttributionMap rts_map(const RtsMasker& masker, const Image& x) {
    Val m = rts_mask_graph(masker, constant(x.pixels));
    return {normalize_map(m->value), InterpreterId::rts};
}

Tensor gaussian_blur(const Tensor& chw, int kernel, double sigma) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    int r = kernel / 2;
    std::vector<double> k(static_cast<std::size_t>(kernel));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + r)];
    }
    for (auto& v : k) v /= sum;
    Tensor tmp({C, H, W}), out({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i)
                    s += k[static_cast<std::size_t>(i + r)] * chw.at(c, y, std::clamp(x + i, 0, W - 1));
                tmp.at(c, y, x) = s;
            }
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i)
                    s += k[static_cast<std::size_t>(i + r)] * tmp.at(c, std::clamp(y + i, 0, H - 1), x);
                out.at(c, y, x) = s;
            }
    return out;
}

namespace {

// lambda1 r_tv + lambda2 r_av - log f_c(phi(x;m)) + lambda3 f_c(phi(x;1-m))^lambda4
Val rts_objective_graph(const RtsMasker& mk, const Val& x, const Val& m, int c,
                        const Tensor& base) {
    const RtsWeights& wt = mk.weights;
    int C = x->value.dim(0);
    int HW = m->value.dim(0) * m->value.dim(1);
    Val vdiff = sub(m, translate_clamp(m, -1, 0));
    Val hdiff = sub(m, translate_clamp(m, 0, -1));
    Val r_tv = mul_scalar(add(sum_all(square(vdiff)), sum_all(square(hdiff))), 1.0 / HW);
    Val r_av = mean_all(m);

    Val mb = expand_channels(m, C);
    Val inv = sub(constant(Tensor::full(mb->value.shape(), 1.0)), mb);
    Val bc = constant(base);
    Val keep = add(mul(mb, x), mul(inv, bc));
    Val del = add(mul(inv, x), mul(mb, bc));
    Val f_keep = pick(nn::forward_graph(mk.encoder, keep).probs, c);
    Val f_del = pick(nn::forward_graph(mk.encoder, del).probs, c);
    Val destroy = wt.destroy_exponent == 2.0
                      ? square(f_del)
                      : exp_(mul_scalar(log_(add_scalar(f_del, 1e-12)), wt.destroy_exponent));
    Val loss = sub(mul_scalar(r_tv, wt.lambda_tv), neg(mul_scalar(r_av, wt.lambda_av)));
    loss = sub(loss, log_(add_scalar(f_keep, 1e-12)));
    loss = add(loss, mul_scalar(destroy, wt.lambda_destroy));
    return loss;
}

Tensor rts_base_image(const Tensor& px, Rng& rng) {
    if (rng.uniform() < 0.5) return gaussian_blur(px, 5, 2.0);
    Tensor base(px.shape());
    int C = px.dim(0), HW = px.dim(1) * px.dim(2);
    for (int c = 0; c < C; ++c) {
        double v = rng.uniform();
        for (int i = 0; i < HW; ++i) base[static_cast<std::size_t>(c) * HW + i] = v;
    }
    return base;
}

}  // namespace

void rts_train_epochs(RtsMasker& masker, const std::vector<Image>& train,
                      const RtsTrainConfig& cfg, int epochs, nn::Adam& opt, Rng& rng) {
    const int batch = 8;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < epochs; ++e) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(static_cast<std::uint64_t>(i))]);
        double epoch_loss = 0.0;
        std::size_t nb = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            std::size_t end = std::min(order.size(), start + batch);
            std::vector<Tensor> acc;
            double bl = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const Image& im = train[order[k]];
                int c = im.label ? *im.label : nn::predict_class(masker.encoder, im);
                std::vector<Val> leaves;
                Val x = constant(im.pixels);
                Val m = rts_mask_graph(masker, x, &leaves);
                Tensor base = rts_base_image(im.pixels, rng);
                Val loss = rts_objective_graph(masker, x, m, c, base);
                bl += scalar_of(loss);
                std::vector<Val> gs = gradients(loss, leaves);
                if (acc.empty())
                    for (const auto& g : gs) acc.push_back(g->value);
                else
                    for (std::size_t j = 0; j < gs.size(); ++j) axpy(acc[j], 1.0, gs[j]->value);
            }
            double invn = 1.0 / static_cast<double>(end - start);
            for (auto& g : acc)
                for (std::size_t j = 0; j < g.size(); ++j) g[j] *= invn;
            if (!std::isfinite(bl))
                throw std::runtime_error("rts_train: objective diverged (NaN/inf)");
            opt.step(masker.params, acc);
            epoch_loss += bl * invn;
            ++nb;
        }
        if (cfg.verbose)
            std::fprintf(stderr, "rts epoch %d loss %.4f\n", e, epoch_loss / std::max<std::size_t>(1, nb));
    }
}

RtsMasker rts_train_masker(const Classifier& f, const std::vector<Image>& train,
                           const RtsTrainConfig& cfg) {
    RtsMasker mk = rts_init_masker(f, cfg.seed);
    mk.weights = cfg.weights;
    nn::Adam opt(cfg.lr);
    Rng rng(Rng::derive(cfg.seed, 0xD1CE));
    rts_train_epochs(mk, train, cfg, cfg.epochs, opt, rng);

    // class prototypes: per-class mean pooled encoder features
    int featdim = mk.prototypes.dim(1);
    std::vector<int> counts(static_cast<std::size_t>(f.num_classes()), 0);
    Tensor sums({f.num_classes(), featdim});
    for (const auto& im : train) {
        if (!im.label) continue;
        Tensor feat = rts_encoder_features(f, constant(im.pixels))->value;
        for (int j = 0; j < featdim; ++j)
            sums[static_cast<std::size_t>(*im.label) * featdim + j] += feat[static_cast<std::size_t>(j)];
        ++counts[static_cast<std::size_t>(*im.label)];
    }
    for (int c = 0; c < f.num_classes(); ++c)
        if (counts[static_cast<std::size_t>(c)] > 0)
            for (int j = 0; j < featdim; ++j)
                mk.prototypes[static_cast<std::size_t>(c) * featdim + j] =
                    sums[static_cast<std::size_t>(c) * featdim + j] / counts[static_cast<std::size_t>(c)];
    return mk;
}

double rts_objective(const RtsMasker& masker, const std::vector<Image>& batch, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x0B7));
    double total = 0.0;
    for (const auto& im : batch) {
        int c = nn::predict_class(masker.encoder, im);
        Val x = constant(im.pixels);
        Val m = rts_mask_graph(masker, x);
        Tensor base = rts_base_image(im.pixels, rng);
        total += scalar_of(rts_objective_graph(masker, x, m, c, base));
    }
    return batch.empty() ? 0.0 : total / batch.size();
}

// ------------------------------------------------------- masker save/load

namespace {

constexpr char kRtsMagic[16] = {'A', 'D', 'V', '2', 'L', 'A', 'B', '.',
                                'R', 'T', 'S', 'M', '\0', '\0', '\0', '\0'};
constexpr std::uint32_t kRtsVersion = 1;

void wr_u32(std::ofstream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
std::uint32_t rd_u32(std::ifstream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
void wr_f64(std::ofstream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
double rd_f64(std::ifstream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
void wr_tensor(std::ofstream& os, const Tensor& t) {
    wr_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) wr_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
}
Tensor rd_tensor(std::ifstream& is) {
    std::uint32_t rank = rd_u32(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(rd_u32(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    return t;
}

}  // namespace

void RtsMasker::save(const std::string& path) const {
    encoder.save(path + ".enc.ckpt");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("rts save: cannot open " + path);
    os.write(kRtsMagic, sizeof kRtsMagic);
    wr_u32(os, kRtsVersion);
    wr_f64(os, weights.lambda_tv);
    wr_f64(os, weights.lambda_av);
    wr_f64(os, weights.lambda_destroy);
    wr_f64(os, weights.destroy_exponent);
    wr_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) wr_tensor(os, p);
    wr_tensor(os, prototypes);
}

RtsMasker RtsMasker::load(const std::string& path) {
    RtsMasker mk;
    mk.encoder = Classifier::load(path + ".enc.ckpt");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("rts load: cannot open " + path);
    char magic[16];
    is.read(magic, 16);
    if (!is || std::memcmp(magic, kRtsMagic, 16) != 0)
        throw std::runtime_error("rts load: bad magic in " + path);
    std::uint32_t version = rd_u32(is);
    if (version != kRtsVersion)
        throw std::runtime_error("rts load: unsupported version in " + path);
    mk.weights.lambda_tv = rd_f64(is);
    mk.weights.lambda_av = rd_f64(is);
    mk.weights.lambda_destroy = rd_f64(is);
    mk.weights.destroy_exponent = rd_f64(is);
    std::uint32_t np = rd_u32(is);
    for (std::uint32_t i = 0; i < np; ++i) mk.params.push_back(rd_tensor(is));
    mk.prototypes = rd_tensor(is);
    if (!is) throw std::runtime_error("rts load: truncated " + path);
    return mk;
}

// ---------------------------------------------------------------- dispatch

Val attack_map_graph(const Classifier& f, const Val& x, InterpreterId id, int c,
                     const ReluRule& grad_rule, const RtsMasker* masker) {
    switch (id) {
        case InterpreterId::grad: {
            Forward fw = nn::forward_graph(f, x, grad_rule);
            Val fc = pick(fw.probs, c);
            Val g = gradients(fc, {x})[0];
            return normalize01(channel_max(abs_(g)));
        }
        case InterpreterId::cam: {
            require_cam_head(f);
            Forward fw = nn::forward_graph(f, x, {}, true);
            Val tap = fw.conv_taps.back();
            int K = tap->value.dim(0);
            int hf = tap->value.dim(1), wf = tap->value.dim(2);
            Tensor w1({1, K, 1, 1});
            const Tensor& W = f.head_weight();
            for (int k = 0; k < K; ++k)
                w1[static_cast<std::size_t>(k)] = W[static_cast<std::size_t>(c) * K + k] / (hf * wf);
            Val raw = conv2d(tap, constant(w1), 1, 0);
            Val up = upsample_bilinear(raw, x->value.dim(1), x->value.dim(2));
            Val clipped = relu(up);
            return normalize01(reshape(clipped, {x->value.dim(1), x->value.dim(2)}));
        }
        case InterpreterId::gradcam: {
            Forward fw = nn::forward_graph(f, x, {}, true);
            Val tap = fw.conv_taps.back();
            Val zc = pick(fw.logits, c);
            Val ga = gradients(zc, {tap})[0];
            const Tensor& g = ga->value;  // weights treated as constants
            int K = g.dim(0), hf = g.dim(1), wf = g.dim(2);
            Tensor w1({1, K, 1, 1});
            for (int k = 0; k < K; ++k) {
                double s = 0.0;
                for (int i = 0; i < hf * wf; ++i) s += g[static_cast<std::size_t>(k) * hf * wf + i];
                w1[static_cast<std::size_t>(k)] = s / (hf * wf);
            }
            Val raw = relu(conv2d(tap, constant(w1), 1, 0));
            Val up = upsample_bilinear(raw, x->value.dim(1), x->value.dim(2));
            return normalize01(reshape(up, {x->value.dim(1), x->value.dim(2)}));
        }
        case InterpreterId::rts: {
            if (!masker) throw std::invalid_argument("attack_map_graph: rts needs a masker");
            return normalize01(rts_mask_graph(*masker, x));
        }
        default:
            throw std::invalid_argument("attack_map_graph: interpreter has no direct map graph");
    }
}

AttributionMap compute_map(const Classifier& f, const Image& x, InterpreterId id, int c,
                           const RtsMasker* masker, const MaskSolverConfig* mask_cfg) {
    switch (id) {
        case InterpreterId::grad: return grad_saliency(f, x, c);
        case InterpreterId::ig: {
            Image black{Tensor(x.pixels.shape()), {}};
            return integrated_gradients(f, x, black, c, 64).map;
        }
        case InterpreterId::cam: return cam_map(f, x, c);
        case InterpreterId::gradcam: return gradcam_map(f, x, c);
        case InterpreterId::mask: {
            if (!mask_cfg) throw std::invalid_argument("compute_map: mask needs a solver config");
            return mask_solve(f, x, *mask_cfg).map;
        }
        case InterpreterId::rts: {
            if (!masker) throw std::invalid_argument("compute_map: rts needs a masker");
            return rts_map(*masker, x);
        }
    }
    throw std::invalid_argument("compute_map: bad interpreter");
}

}  // namespace adv2::interp
