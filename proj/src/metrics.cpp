#include "adv2/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "adv2/rng.hpp"

namespace adv2::metrics {

BatchStats asr_mc(const std::vector<attack::AttackOutcome>& outcomes) {
    if (outcomes.empty()) throw std::invalid_argument("asr_mc: empty batch");
    BatchStats s;
    s.n = static_cast<int>(outcomes.size());
    double mc = 0.0;
    for (const auto& o : outcomes) {
        if (o.success) {
            ++s.n_success;
            mc += o.confidence;
        }
    }
    s.asr = static_cast<double>(s.n_success) / s.n;
    if (s.n_success > 0) s.mean_mc = mc / s.n_success;
    return s;
}

double lp_distance(const Tensor& a, const Tensor& b, int p) {
    if (!a.same_shape(b)) throw std::invalid_argument("lp_distance: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = std::fabs(a[i] - b[i]);
        acc += p == 1 ? d : d * d;
    }
    double n = static_cast<double>(a.size());
    return p == 1 ? acc / n : std::sqrt(acc) / std::sqrt(n);
}

std::vector<std::size_t> top_q_set(const Tensor& m, double q) {
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("top_q_set: q in (0,1) required");
    std::vector<std::size_t> idx(m.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (m[a] != m[b]) return m[a] > m[b];
        return a < b;
    });
    std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(q * m.size())));
    idx.resize(std::min(k, idx.size()));
    return idx;
}

double iou_score(const Tensor& m, const Tensor& m0, double q) {
    if (!m.same_shape(m0)) throw std::invalid_argument("iou_score: shape mismatch");
    std::vector<std::size_t> a = top_q_set(m, q), b = top_q_set(m0, q);
    std::vector<bool> in_a(m.size(), false);
    for (auto i : a) in_a[i] = true;
    std::size_t inter = 0;
    for (auto i : b)
        if (in_a[i]) ++inter;
    std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

Tensor transfer_matrix(const std::vector<std::vector<std::vector<Tensor>>>& adv_maps,
                       const std::vector<std::vector<Tensor>>& benign_maps) {
    int nsrc = static_cast<int>(adv_maps.size());
    int ntgt = static_cast<int>(benign_maps.size());
    Tensor M({nsrc, ntgt});
    for (int s = 0; s < nsrc; ++s) {
        if (static_cast<int>(adv_maps[s].size()) != ntgt)
            throw std::invalid_argument("transfer_matrix: ragged adversarial map table");
        for (int t = 0; t < ntgt; ++t) {
            const auto& advs = adv_maps[s][t];
            const auto& bens = benign_maps[t];
            if (advs.size() != bens.size() || advs.empty())
                throw std::invalid_argument("transfer_matrix: batch size mismatch");
            double acc = 0.0;
            for (std::size_t i = 0; i < advs.size(); ++i)
                acc += lp_distance(advs[i], bens[i], 1);
            M[static_cast<std::size_t>(s) * ntgt + t] = acc / advs.size();
        }
    }
    return M;
}

Tensor random_patch_target(int h, int w, std::uint64_t seed, double min_area, double max_area) {
    Rng rng(Rng::derive(seed, 0x9A7C4));
    const double n = static_cast<double>(h) * w;
    if (min_area >= 0.99) return Tensor::full({h, w}, 1.0);  // degenerate full-image patch
    for (int attempt = 0; attempt < 200; ++attempt) {
        Tensor m({h, w});
        double frac = rng.uniform(min_area, max_area);
        bool circle = rng.uniform() < 0.5;
        std::size_t count = 0;
        if (circle) {
            double r = std::sqrt(frac * n / 3.14159265358979323846);
            if (2 * r + 2 >= std::min(h, w)) continue;
            double cy = rng.uniform(r, h - r), cx = rng.uniform(r, w - r);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
                        m.at(y, x) = 1.0;
                        ++count;
                    }
        } else {
            double aspect = rng.uniform(0.4, 1.0);
            double hh = std::sqrt(frac * n * aspect), ww = frac * n / hh;
            double ang = rng.uniform(0.0, 3.14159265358979323846);
            double rad = 0.5 * std::hypot(hh, ww);
            if (2 * rad + 2 >= std::min(h, w)) continue;
            double cy = rng.uniform(rad, h - rad), cx = rng.uniform(rad, w - rad);
            double ca = std::cos(ang), sa = std::sin(ang);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double ry = (y - cy) * ca - (x - cx) * sa;
                    double rx = (y - cy) * sa + (x - cx) * ca;
                    if (std::fabs(ry) <= hh / 2 && std::fabs(rx) <= ww / 2) {
                        m.at(y, x) = 1.0;
                        ++count;
                    }
                }
        }
        double got = static_cast<double>(count) / n;
        if (got >= min_area && got <= max_area) return m;
    }
    throw std::runtime_error("random_patch_target: could not place a patch in range");
}

RandomClassTarget random_class_target(const nn::Classifier& f,
                                      const std::vector<nn::Image>& dataset,
                                      interp::InterpreterId id, int target_class,
                                      std::uint64_t seed, const interp::RtsMasker* masker,
                                      const interp::MaskSolverConfig* mask_cfg) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (dataset[i].label && *dataset[i].label != target_class) candidates.push_back(i);
    if (candidates.empty())
        throw std::invalid_argument("random_class_target: need a donor class != target");
    Rng rng(Rng::derive(seed, 0xD0C));
    std::size_t pick = candidates[rng.uniform_int(candidates.size())];
    const nn::Image& donor = dataset[pick];
    int c = nn::predict_class(f, donor);
    RandomClassTarget out;
    out.map = interp::compute_map(f, donor, id, c, masker, mask_cfg).values;
    out.donor_class = *donor.label;
    out.donor_index = pick;
    return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    os << "image_id,attack_id,interpreter,asr_flag,mc,l1,l2,iou,detect_flags\n";
    for (const auto& r : rows)
        os << r.image_id << "," << r.attack_id << "," << r.interpreter << "," << (r.asr_flag ? 1 : 0)
           << "," << r.mc << "," << r.l1 << "," << r.l2 << "," << r.iou << "," << r.detect_flags
           << "\n";
}

}  // namespace adv2::metrics
