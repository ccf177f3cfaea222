#include "adv2/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace adv2::nn {

using namespace adv2::ag;

double h_smooth(double z, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("h_smooth: tau must be positive");
    double base = z / std::sqrt(z * z + tau);
    return z < 0.0 ? 1.0 + base : base;
}

Architecture arch_preset(const std::string& name) {
    Architecture a;
    a.name = name;
    if (name == "cnn_gray28") {
        a.in_channels = 1;
        a.in_h = a.in_w = 28;
        a.convs = {{8, 3, 1, 1}, {16, 3, 2, 1}, {32, 3, 2, 1}, {32, 3, 1, 1}};
        a.head = HeadKind::gap;
        a.num_classes = 10;
    } else if (name == "cnn_rgb32") {
        a.in_channels = 3;
        a.in_h = a.in_w = 32;
        a.convs = {{8, 3, 1, 1}, {16, 3, 2, 1}, {32, 3, 2, 1}, {32, 3, 1, 1}};
        a.head = HeadKind::gap;
        a.num_classes = 10;
    } else if (name == "linear_gray28") {
        a.in_channels = 1;
        a.in_h = a.in_w = 28;
        a.convs = {};
        a.head = HeadKind::flatten;
        a.num_classes = 10;
    } else {
        throw std::invalid_argument("unknown architecture preset: " + name);
    }
    return a;
}

namespace {

struct Dims {
    std::vector<int> ch, h, w;  // per stage (stage 0 = input)
};

Dims stage_dims(const Architecture& a) {
    Dims d;
    d.ch = {a.in_channels};
    d.h = {a.in_h};
    d.w = {a.in_w};
    for (const auto& c : a.convs) {
        d.ch.push_back(c.out_channels);
        d.h.push_back((d.h.back() + 2 * c.pad - c.kernel) / c.stride + 1);
        d.w.push_back((d.w.back() + 2 * c.pad - c.kernel) / c.stride + 1);
    }
    return d;
}

int head_in_width(const Architecture& a) {
    Dims d = stage_dims(a);
    if (a.head == HeadKind::gap) return d.ch.back();
    return d.ch.back() * d.h.back() * d.w.back();
}

}  // namespace

Classifier::Classifier(Architecture arch, std::uint64_t init_seed) : arch_(std::move(arch)) {
    Rng rng(Rng::derive(init_seed, 0xC0FFEE));
    Dims d = stage_dims(arch_);
    for (std::size_t i = 0; i < arch_.convs.size(); ++i) {
        const auto& c = arch_.convs[i];
        int cin = d.ch[i];
        Tensor w({c.out_channels, cin, c.kernel, c.kernel});
        double scale = std::sqrt(2.0 / (cin * c.kernel * c.kernel));
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.normal(0.0, scale);
        params_.push_back(std::move(w));
        params_.push_back(Tensor({c.out_channels}));
    }
    int in_w = head_in_width(arch_);
    Tensor W({arch_.num_classes, in_w});
    double scale = std::sqrt(1.0 / in_w);
    for (std::size_t k = 0; k < W.size(); ++k) W[k] = rng.normal(0.0, scale);
    params_.push_back(std::move(W));
    params_.push_back(Tensor({arch_.num_classes}));
}

const Tensor& Classifier::head_weight() const { return params_[params_.size() - 2]; }
const Tensor& Classifier::head_bias() const { return params_.back(); }

std::uint64_t Classifier::param_hash() const {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (const auto& p : params_) h ^= tensor_hash(p, 1e-12) + (h << 7);
    return h;
}

Forward forward_graph(const Classifier& f, const Val& x, const ReluRule& rule,
                      bool want_taps, std::vector<Val>* param_leaves) {
    const Architecture& a = f.arch();
    const Tensor& xt = x->value;
    if (xt.rank() != 3 || xt.dim(0) != a.in_channels || xt.dim(1) != a.in_h || xt.dim(2) != a.in_w)
        throw std::invalid_argument("forward: input shape " + xt.shape_str() +
                                    " does not match architecture " + a.name);

    std::vector<Val> ps;
    ps.reserve(f.params().size());
    for (const auto& p : f.params())
        ps.push_back(param_leaves ? leaf(p) : constant(p));
    if (param_leaves) *param_leaves = ps;

    Forward out;
    Val cur = x;
    for (std::size_t i = 0; i < a.convs.size(); ++i) {
        const auto& c = a.convs[i];
        Val z = add_channel_bias(conv2d(cur, ps[2 * i], c.stride, c.pad), ps[2 * i + 1]);
        cur = relu(z, rule);
        if (want_taps) out.conv_taps.push_back(cur);
    }
    Val feat = a.head == HeadKind::gap ? gap2d(cur) : flatten(cur);
    out.logits = affine(ps[ps.size() - 2], feat, ps.back());
    out.log_probs = log_softmax(out.logits);
    out.probs = exp_(out.log_probs);
    return out;
}

Tensor predict_proba(const Classifier& f, const Image& x) {
    Forward fw = forward_graph(f, constant(x.pixels));
    return fw.probs->value;
}

int predict_class(const Classifier& f, const Image& x) {
    Tensor p = predict_proba(f, x);
    return static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
}

Tensor input_gradient(const Classifier& f, const Image& x, int c, const ReluRule& rule) {
    if (c < 0 || c >= f.num_classes())
        throw std::invalid_argument("input_gradient: class index out of range");
    Val xin = leaf(x.pixels);
    Forward fw = forward_graph(f, xin, rule);
    Val fc = pick(fw.probs, c);
    return gradients(fc, {xin})[0]->value;
}

Tensor feature_maps(const Classifier& f, const Image& x) {
    if (!f.has_conv())
        throw std::invalid_argument("feature_maps: architecture has no convolutional layer");
    Forward fw = forward_graph(f, constant(x.pixels), {}, true);
    return fw.conv_taps.back()->value;
}

// ------------------------------------------------------------------- train

void Adam::ensure(const std::vector<Tensor>& params) {
    if (m_.size() == params.size()) return;
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
    }
}

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

void Adam::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    ensure(params);
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        const Tensor& g = grads[i];
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = b1_ * m[k] + (1 - b1_) * g[k];
            v[k] = b2_ * v[k] + (1 - b2_) * g[k] * g[k];
            double mh = m[k] / bc1, vh = v[k] / bc2;
            p[k] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
    }
}

void Adam::step(Tensor& param, const Tensor& grad) {
    std::vector<Tensor> ps{param}, gs{grad};
    step(ps, gs);
    param = ps[0];
}

double accuracy(const Classifier& f, const std::vector<Image>& images) {
    if (images.empty()) return 0.0;
    int ok = 0;
    for (const auto& im : images)
        if (im.label && predict_class(f, im) == *im.label) ++ok;
    return static_cast<double>(ok) / images.size();
}

Classifier train_classifier(const std::vector<Image>& train, const Architecture& arch,
                            const TrainConfig& cfg, TrainReport* report,
                            const std::vector<Image>* holdout) {
    if (train.empty()) throw std::invalid_argument("train_classifier: empty dataset");
    for (const auto& im : train) {
        if (!im.label) throw std::invalid_argument("train_classifier: unlabeled sample");
        if (*im.label < 0 || *im.label >= arch.num_classes)
            throw std::invalid_argument("train_classifier: label out of range");
    }

    Classifier f(arch, cfg.seed);
    Adam opt(cfg.lr);
    Rng rng(Rng::derive(cfg.seed, 0x7EA1));

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    double last_loss = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the run RNG keeps shuffling deterministic.
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(static_cast<std::uint64_t>(i))]);

        double epoch_loss = 0.0;
        std::size_t nb = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Tensor> grad_acc;
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const Image& im = train[order[k]];
                Tensor px = im.pixels;
                if (cfg.squeeze_aug > 0.0 && rng.uniform() < cfg.squeeze_aug) {
                    switch (rng.uniform_int(static_cast<std::uint64_t>(3))) {
                        case 0:
                            px = ag::median3x3(ag::constant(px))->value;
                            break;
                        case 1: {
                            double levels = 3.0;  // 2-bit grid
                            for (std::size_t j = 0; j < px.size(); ++j)
                                px[j] = std::nearbyint(px[j] * levels) / levels;
                            break;
                        }
                        default: {
                            double levels = 7.0;  // 3-bit grid
                            for (std::size_t j = 0; j < px.size(); ++j)
                                px[j] = std::nearbyint(px[j] * levels) / levels;
                            break;
                        }
                    }
                }
                if (cfg.noise_aug > 0.0) {
                    for (std::size_t j = 0; j < px.size(); ++j)
                        px[j] = std::clamp(px[j] + rng.normal(0.0, cfg.noise_aug), 0.0, 1.0);
                }
                std::vector<Val> leaves;
                Forward fw = forward_graph(f, constant(px), {}, false, &leaves);
                Val loss;
                if (cfg.label_smooth > 0.0) {
                    Tensor y({arch.num_classes});
                    double off = cfg.label_smooth / (arch.num_classes - 1);
                    for (int c = 0; c < arch.num_classes; ++c)
                        y[static_cast<std::size_t>(c)] = c == *im.label ? 1.0 - cfg.label_smooth : off;
                    loss = neg(dot(constant(y), fw.log_probs));
                } else {
                    loss = neg(pick(fw.log_probs, *im.label));
                }
                batch_loss += scalar_of(loss);
                std::vector<Val> gs = gradients(loss, leaves);
                if (grad_acc.empty())
                    for (const auto& g : gs) grad_acc.push_back(g->value);
                else
                    for (std::size_t j = 0; j < gs.size(); ++j) axpy(grad_acc[j], 1.0, gs[j]->value);
            }
            double inv = 1.0 / static_cast<double>(end - start);
            for (auto& g : grad_acc)
                for (std::size_t j = 0; j < g.size(); ++j) g[j] *= inv;
            batch_loss *= inv;
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_classifier: loss diverged (NaN/inf) at epoch " +
                                         std::to_string(epoch));
            opt.step(f.params(), grad_acc);
            epoch_loss += batch_loss;
            ++nb;
        }
        last_loss = epoch_loss / std::max<std::size_t>(1, nb);
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %d loss %.4f\n", epoch, last_loss);
    }

    if (report) {
        report->final_loss = last_loss;
        report->holdout_accuracy = holdout ? accuracy(f, *holdout) : 0.0;
    }
    return f;
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[16] = {'A', 'D', 'V', '2', 'L', 'A', 'B', '.',
                             'C', 'K', 'P', 'T', '\0', '\0', '\0', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

void write_string(std::ofstream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& is) {
    std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

void write_tensor(std::ofstream& os, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::ifstream& is) {
    std::uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_u32(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    return t;
}

}  // namespace

void Classifier::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint save: cannot open " + path);
    os.write(kMagic, sizeof kMagic);
    write_u32(os, kVersion);
    write_string(os, arch_.name);
    write_u32(os, static_cast<std::uint32_t>(arch_.in_channels));
    write_u32(os, static_cast<std::uint32_t>(arch_.in_h));
    write_u32(os, static_cast<std::uint32_t>(arch_.in_w));
    write_u32(os, static_cast<std::uint32_t>(arch_.num_classes));
    write_u32(os, arch_.head == HeadKind::gap ? 0u : 1u);
    write_u32(os, static_cast<std::uint32_t>(arch_.convs.size()));
    for (const auto& c : arch_.convs) {
        write_u32(os, static_cast<std::uint32_t>(c.out_channels));
        write_u32(os, static_cast<std::uint32_t>(c.kernel));
        write_u32(os, static_cast<std::uint32_t>(c.stride));
        write_u32(os, static_cast<std::uint32_t>(c.pad));
    }
    write_u32(os, static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) write_tensor(os, p);
}

Classifier Classifier::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint load: cannot open " + path);
    char magic[16];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw std::runtime_error("checkpoint load: bad magic in " + path);
    std::uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint load: unsupported version " +
                                 std::to_string(version) + " in " + path);
    Classifier f;
    f.arch_.name = read_string(is);
    f.arch_.in_channels = static_cast<int>(read_u32(is));
    f.arch_.in_h = static_cast<int>(read_u32(is));
    f.arch_.in_w = static_cast<int>(read_u32(is));
    f.arch_.num_classes = static_cast<int>(read_u32(is));
    f.arch_.head = read_u32(is) == 0 ? HeadKind::gap : HeadKind::flatten;
    std::uint32_t nconv = read_u32(is);
    for (std::uint32_t i = 0; i < nconv; ++i) {
        ConvSpec c;
        c.out_channels = static_cast<int>(read_u32(is));
        c.kernel = static_cast<int>(read_u32(is));
        c.stride = static_cast<int>(read_u32(is));
        c.pad = static_cast<int>(read_u32(is));
        f.arch_.convs.push_back(c);
    }
    std::uint32_t np = read_u32(is);
    for (std::uint32_t i = 0; i < np; ++i) f.params_.push_back(read_tensor(is));
    if (!is) throw std::runtime_error("checkpoint load: truncated file " + path);
    return f;
}

}  // namespace adv2::nn
