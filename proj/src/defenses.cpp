#include "adv2/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace adv2::defense {

using namespace adv2::ag;
using attack::AttackConfig;
using attack::AttackOutcome;
using interp::InterpreterId;
using nn::Classifier;
using nn::Forward;
using nn::Image;

std::string Squeezer::name() const {
    switch (kind) {
        case SqueezerKind::bit_depth: return "bit" + std::to_string(bits);
        case SqueezerKind::local_smooth: return "median3x3";
        case SqueezerKind::nonlocal_smooth:
            return "nlm-" + std::to_string(nl_search) + "-" + std::to_string(nl_patch) + "-" +
                   std::to_string(static_cast<int>(nl_strength));
    }
    return "?";
}

Tensor squeeze(const Tensor& x, const Squeezer& s) {
    switch (s.kind) {
        case SqueezerKind::bit_depth: {
            double levels = std::pow(2.0, s.bits) - 1.0;
            Tensor r = x;
            for (std::size_t i = 0; i < r.size(); ++i)
                r[i] = std::nearbyint(r[i] * levels) / levels;
            return r;
        }
        case SqueezerKind::local_smooth:
            return median3x3(constant(x))->value;
        case SqueezerKind::nonlocal_smooth:
            return nonlocal_means(constant(x), s.nl_search, s.nl_patch, s.nl_strength)->value;
    }
    throw std::invalid_argument("squeeze: bad kind");
}

Val squeeze_graph(const Val& x, const Squeezer& s) {
    switch (s.kind) {
        case SqueezerKind::local_smooth:
            return median3x3(x);
        case SqueezerKind::nonlocal_smooth:
            return nonlocal_means(x, s.nl_search, s.nl_patch, s.nl_strength);
        case SqueezerKind::bit_depth:
            throw std::invalid_argument("squeeze_graph: bit depth has no gradient path; "
                                        "use adaptive_adv2_bitdepth");
    }
    throw std::invalid_argument("squeeze_graph: bad kind");
}

DetectorConfig default_detector() {
    DetectorConfig cfg;
    cfg.squeezers = {
        {SqueezerKind::bit_depth, 2},
        {SqueezerKind::bit_depth, 3},
        {SqueezerKind::local_smooth},
        {SqueezerKind::nonlocal_smooth, 0, 11, 3, 4.0},
    };
    return cfg;
}

double fs_score(const Classifier& f, const Image& x, const std::vector<Squeezer>& sq) {
    Tensor p = nn::predict_proba(f, x);
    double best = 0.0;
    for (const auto& s : sq) {
        Tensor q = nn::predict_proba(f, Image{squeeze(x.pixels, s), {}});
        double l1 = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) l1 += std::fabs(p[i] - q[i]);
        best = std::max(best, l1);
    }
    return best;
}

Detection fs_detect(const Classifier& f, const Image& x, const DetectorConfig& cfg) {
    Detection d;
    d.score = fs_score(f, x, cfg.squeezers);
    d.flagged = d.score > cfg.threshold;
    return d;
}

double calibrate_threshold(const Classifier& f, const std::vector<Image>& benign,
                           const std::vector<Squeezer>& sq, double quantile) {
    if (benign.empty()) throw std::invalid_argument("calibrate_threshold: empty benign batch");
    std::vector<double> scores;
    scores.reserve(benign.size());
    for (const auto& im : benign) scores.push_back(fs_score(f, im, sq));
    std::sort(scores.begin(), scores.end());
    std::size_t k = static_cast<std::size_t>(std::floor(quantile * (scores.size() - 1)));
    return scores[k];
}

void write_detection_csv(const std::string& path, const std::vector<DetectionRecord>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_detection_csv: cannot open " + path);
    os << "image_id,squeezer,score,flagged\n";
    for (const auto& r : rows)
        os << r.image_id << "," << r.squeezer << "," << r.score << "," << (r.flagged ? 1 : 0) << "\n";
}

// ------------------------------------------------------- adaptive attacks

AttackOutcome adaptive_adv2_smoothing(const Classifier& f, const Image& x0, int c_t,
                                      const Tensor& m_t, const Squeezer& s,
                                      const AttackConfig& cfg, double lambda_sqz,
                                      const interp::RtsMasker* masker) {
    if (s.kind == SqueezerKind::bit_depth)
        throw std::invalid_argument("adaptive_adv2_smoothing: smoothing squeezers only");
    if (cfg.interpreter == InterpreterId::mask)
        throw std::invalid_argument("adaptive_adv2_smoothing: mask interpreter unsupported here");

    ReluRule smooth{ReluMode::smooth_h, cfg.tau_relu};
    Tensor x = x0.pixels;
    std::vector<attack::TraceRow> trace;
    struct Best {
        bool have = false;
        double l = 0;
        Tensor x;
    } best;

    Tensor proto;
    if (cfg.interpreter == InterpreterId::rts) {
        if (!masker) throw std::invalid_argument("adaptive smoothing: rts needs masker");
        int fd = masker->prototypes.dim(1);
        proto = Tensor({fd});
        for (int j = 0; j < fd; ++j)
            proto[static_cast<std::size_t>(j)] =
                masker->prototypes[static_cast<std::size_t>(c_t) * fd + j];
    }

    for (int it = 0; it < cfg.n_total; ++it) {
        Val xl = leaf(x);
        Forward fw = nn::forward_graph(f, xl);
        Val lprd = neg(pick(fw.log_probs, c_t));
        Val loss = lprd;
        double lint_v = 0.0;
        if (it >= cfg.n_warm) {
            if (cfg.lambda_int != 0.0) {
                Val map = interp::attack_map_graph(f, xl, cfg.interpreter, c_t, smooth, masker);
                Val lint = sum_all(square(sub(map, constant(m_t))));
                lint_v = scalar_of(lint);
                loss = add(loss, mul_scalar(lint, cfg.lambda_int));
                if (cfg.interpreter == InterpreterId::rts) {
                    Val enc = interp::rts_encoder_features(masker->encoder, xl);
                    loss = add(loss, mul_scalar(sum_all(square(sub(enc, constant(proto)))), cfg.lambda_enc));
                }
            }
            Val xs = squeeze_graph(xl, s);
            Forward fs_fw = nn::forward_graph(f, xs);
            Val lsqz = neg(dot(fw.probs, fs_fw.log_probs));
            loss = add(loss, mul_scalar(lsqz, lambda_sqz));
        }
        double conf = fw.probs->value[static_cast<std::size_t>(c_t)];
        const Tensor& p = fw.probs->value;
        int pred = static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
        trace.push_back({it, scalar_of(lprd), lint_v, scalar_of(loss), conf});
        // candidates only once the full objective is active
        if (it >= cfg.n_warm && pred == c_t && (!best.have || scalar_of(loss) < best.l)) {
            best.have = true;
            best.l = scalar_of(loss);
            best.x = x;
        }
        Tensor g = gradients(loss, {xl})[0]->value;
        axpy(x, -cfg.alpha, sign(g));
        x = attack::project_ball(x, x0.pixels, cfg.epsilon);
    }

    AttackOutcome out;
    Tensor chosen = best.have ? best.x : x;
    out.x_star = Image{chosen, {}};
    Tensor p = nn::predict_proba(f, out.x_star);
    out.predicted = static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
    out.confidence = p[static_cast<std::size_t>(c_t)];
    out.success = out.predicted == c_t;
    out.linf = linf_dist(chosen, x0.pixels);
    out.trace = std::move(trace);
    out.x_final_iterate = x;
    return out;
}

namespace {

struct BinBox {
    Tensor lo, hi;        // continuous bounds: ball ∩ assigned quantization bin
    Tensor grid_lo, grid_hi;  // reachable grid values per pixel
};

}  // namespace

BitdepthOutcome adaptive_adv2_bitdepth(const Classifier& f, const Image& x0, int c_t,
                                       const Tensor& m_t, int bits, const AttackConfig& cfg,
                                       double lambda_prob, const interp::RtsMasker* masker,
                                       int stage1_iters) {
    if (bits < 1 || bits > 8) throw std::invalid_argument("adaptive bitdepth: bits in [1,8]");
    BitdepthOutcome res;
    const double L = std::pow(2.0, bits) - 1.0;
    const double eps = cfg.epsilon;
    const Tensor& base = x0.pixels;

    if (eps == 0.0) {
        res.outcome.x_star = x0;
        res.outcome.success = false;
        res.stage1_success = false;
        Tensor p = nn::predict_proba(f, x0);
        res.outcome.predicted =
            static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
        res.outcome.confidence = p[static_cast<std::size_t>(c_t)];
        return res;
    }

    // reachable grid interval per pixel: bins intersecting the epsilon ball
    Tensor klo(base.shape()), khi(base.shape());
    for (std::size_t i = 0; i < base.size(); ++i) {
        double lo = std::max(0.0, base[i] - eps), hi = std::min(1.0, base[i] + eps);
        klo[i] = std::ceil(lo * L - 0.5);
        khi[i] = std::floor(hi * L + 0.5);
        klo[i] = std::clamp(klo[i], 0.0, L);
        khi[i] = std::clamp(khi[i], 0.0, L);
    }

    // stage 1: projected gradient search in the squeezed space
    Squeezer bd{SqueezerKind::bit_depth, bits};
    Tensor xq = squeeze(base, bd);
    double alpha1 = 1.0 / std::pow(2.0, bits);
    for (int it = 0; it < stage1_iters; ++it) {
        Val xl = leaf(xq);
        Forward fw = nn::forward_graph(f, xl);
        Val lprd = neg(pick(fw.log_probs, c_t));
        Tensor g = gradients(lprd, {xl})[0]->value;
        axpy(xq, -alpha1, sign(g));
        for (std::size_t i = 0; i < xq.size(); ++i)
            xq[i] = std::clamp(xq[i], klo[i] / L, khi[i] / L);
    }
    // project the anchor onto the quantized grid inside the reachable range
    for (std::size_t i = 0; i < xq.size(); ++i) {
        double k = std::nearbyint(xq[i] * L);
        xq[i] = std::clamp(k, klo[i], khi[i]) / L;
    }
    res.x_plus = xq;
    res.stage1_success = nn::predict_class(f, Image{xq, {}}) == c_t;
    Tensor p_plus = nn::predict_proba(f, Image{xq, {}});

    // stage 2 feasible box: epsilon ball ∩ the anchor's quantization bins
    Tensor lo(base.shape()), hi(base.shape());
    const double margin = 1e-7;
    for (std::size_t i = 0; i < base.size(); ++i) {
        double k = std::nearbyint(xq[i] * L);
        double bin_lo = std::max(0.0, (k - 0.5) / L + margin);
        double bin_hi = std::min(1.0, (k + 0.5) / L - margin);
        lo[i] = std::max(bin_lo, std::max(0.0, base[i] - eps));
        hi[i] = std::min(bin_hi, std::min(1.0, base[i] + eps));
        if (lo[i] > hi[i]) {  // numerical corner: collapse to the closest feasible point
            double mid = std::clamp(k / L, std::max(0.0, base[i] - eps), std::min(1.0, base[i] + eps));
            lo[i] = hi[i] = mid;
        }
    }
    auto project_box = [&](Tensor& x) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
    };

    ReluRule smooth{ReluMode::smooth_h, cfg.tau_relu};
    Tensor proto;
    if (cfg.interpreter == InterpreterId::rts && masker) {
        int fd = masker->prototypes.dim(1);
        proto = Tensor({fd});
        for (int j = 0; j < fd; ++j)
            proto[static_cast<std::size_t>(j)] =
                masker->prototypes[static_cast<std::size_t>(c_t) * fd + j];
    }

    Tensor x = base;
    project_box(x);
    std::vector<attack::TraceRow> trace;
    struct Best {
        bool have = false;
        double l = 0;
        Tensor x;
    } best;
    for (int it = 0; it < cfg.n_total; ++it) {
        Val xl = leaf(x);
        Forward fw = nn::forward_graph(f, xl);
        Val lprd = neg(pick(fw.log_probs, c_t));
        Val loss = lprd;
        double lint_v = 0.0;
        if (it >= cfg.n_warm && cfg.lambda_int != 0.0 && cfg.interpreter != InterpreterId::mask) {
            Val map = interp::attack_map_graph(f, xl, cfg.interpreter, c_t, smooth, masker);
            Val lint = sum_all(square(sub(map, constant(m_t))));
            lint_v = scalar_of(lint);
            loss = add(loss, mul_scalar(lint, cfg.lambda_int));
            if (cfg.interpreter == InterpreterId::rts && masker) {
                Val enc = interp::rts_encoder_features(masker->encoder, xl);
                loss = add(loss, mul_scalar(sum_all(square(sub(enc, constant(proto)))), cfg.lambda_enc));
            }
        }
        Val lmatch = sum_all(abs_(sub(fw.probs, constant(p_plus))));
        loss = add(loss, mul_scalar(lmatch, lambda_prob));

        double conf = fw.probs->value[static_cast<std::size_t>(c_t)];
        const Tensor& p = fw.probs->value;
        int pred = static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
        trace.push_back({it, scalar_of(lprd), lint_v, scalar_of(loss), conf});
        if (it >= cfg.n_warm && pred == c_t && (!best.have || scalar_of(loss) < best.l)) {
            best.have = true;
            best.l = scalar_of(loss);
            best.x = x;
        }
        Tensor g = gradients(loss, {xl})[0]->value;
        axpy(x, -cfg.alpha, sign(g));
        project_box(x);
    }

    Tensor chosen = best.have ? best.x : x;
    res.outcome.x_star = Image{chosen, {}};
    Tensor p = nn::predict_proba(f, res.outcome.x_star);
    res.outcome.predicted =
        static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
    res.outcome.confidence = p[static_cast<std::size_t>(c_t)];
    res.outcome.success = res.outcome.predicted == c_t;
    res.outcome.linf = linf_dist(chosen, base);
    res.outcome.trace = std::move(trace);
    res.outcome.x_final_iterate = x;
    return res;
}

// ------------------------------------------------------------------- AID

interp::RtsMasker aid_train(const Classifier& f, const std::vector<Image>& train,
                            const interp::RtsMasker& base, const AidConfig& cfg) {
    interp::RtsMasker mk = base;
    nn::Adam opt(cfg.lr);
    Rng rng(Rng::derive(cfg.seed, 0xA1D));

    for (int round = 0; round < cfg.rounds; ++round) {
        interp::rts_train_epochs(mk, train, cfg.rts, cfg.int_epochs, opt, rng);

        for (int e = 0; e < cfg.aid_epochs; ++e) {
            // re-attack a fresh subset against the current masker
            std::vector<std::size_t> idx(train.size());
            std::iota(idx.begin(), idx.end(), 0);
            for (std::size_t i = idx.size(); i > 1; --i)
                std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<std::uint64_t>(i))]);
            std::size_t count = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(cfg.aid_subset));

            const int batch = 8;
            std::vector<Tensor> acc;
            int in_batch = 0;
            for (std::size_t n = 0; n < count; ++n) {
                const Image& im = train[idx[n]];
                int pred = nn::predict_class(f, im);
                int c_t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(f.num_classes() - 1)));
                if (c_t >= pred) ++c_t;
                AttackConfig ac = cfg.attack;
                ac.interpreter = InterpreterId::rts;
                ac.target_class = c_t;
                ac.seed = Rng::derive(cfg.seed, 0xF00D + n);
                Tensor m_t = interp::rts_map(mk, im).values;
                AttackOutcome adv = attack::adv2_pgd(f, im, c_t, m_t, ac, &mk);

                std::vector<Val> leaves1, leaves2;
                Val m1 = interp::rts_mask_graph(mk, constant(im.pixels), &leaves1);
                Val m2 = interp::rts_mask_graph(mk, constant(adv.x_star.pixels), &leaves2);
                Val loss = neg(mean_all(abs_(sub(m1, m2))));
                std::vector<Val> wrt = leaves1;
                wrt.insert(wrt.end(), leaves2.begin(), leaves2.end());
                std::vector<Val> gs = gradients(loss, wrt);
                if (acc.empty())
                    for (std::size_t j = 0; j < leaves1.size(); ++j) acc.push_back(gs[j]->value);
                else
                    for (std::size_t j = 0; j < leaves1.size(); ++j) axpy(acc[j], 1.0, gs[j]->value);
                for (std::size_t j = 0; j < leaves1.size(); ++j)
                    axpy(acc[j], 1.0, gs[leaves1.size() + j]->value);
                ++in_batch;
                if (in_batch == batch || n + 1 == count) {
                    for (auto& g : acc)
                        for (std::size_t k = 0; k < g.size(); ++k) g[k] /= in_batch;
                    opt.step(mk.params, acc);
                    acc.clear();
                    in_batch = 0;
                }
            }
        }
    }
    return mk;
}

Tensor add_noise(const Tensor& x, double level, bool uniform, Rng& rng) {
    Tensor r = x;
    for (std::size_t i = 0; i < r.size(); ++i) {
        double n = uniform ? rng.uniform(-level, level) : rng.normal(0.0, level);
        r[i] = std::clamp(r[i] + n, 0.0, 1.0);
    }
    return r;
}

double calibrate_noise_level(const Classifier& f, const std::vector<Image>& batch,
                             double target_rate, bool uniform, std::uint64_t seed) {
    auto misclass_rate = [&](double level) {
        Rng rng(Rng::derive(seed, 0x4015E));
        int wrong = 0, n = 0;
        for (const auto& im : batch) {
            if (!im.label) continue;
            Tensor noisy = add_noise(im.pixels, level, uniform, rng);
            if (nn::predict_class(f, Image{noisy, {}}) != *im.label) ++wrong;
            ++n;
        }
        return n ? static_cast<double>(wrong) / n : 0.0;
    };
    double lo = 0.0, hi = 0.5;
    for (int it = 0; it < 18; ++it) {
        double mid = 0.5 * (lo + hi);
        if (misclass_rate(mid) >= target_rate)
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

}  // namespace adv2::defense
