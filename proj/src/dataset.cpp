#include "adv2/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "adv2/image_io.hpp"
#include "adv2/rng.hpp"

namespace fs = std::filesystem;

namespace adv2::data {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Smooth random luminance field. The broad brightness spread keeps a stable
// fraction of the texture readable after quantization or smoothing.
void fill_background(Tensor& px, Rng& rng, double amp) {
    int C = px.dim(0), H = px.dim(1), W = px.dim(2);
    double base = rng.uniform(0.42, 0.58);
    double fy1 = rng.uniform(0.5, 1.5), fx1 = rng.uniform(0.5, 1.5);
    double fy2 = rng.uniform(1.0, 2.5), fx2 = rng.uniform(1.0, 2.5);
    double ph1 = rng.uniform(0.0, 2 * kPi), ph2 = rng.uniform(0.0, 2 * kPi);
    double ph3 = rng.uniform(0.0, 2 * kPi), ph4 = rng.uniform(0.0, 2 * kPi);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double lum = base +
                         0.14 * std::sin(2 * kPi * fy1 * y / H + ph1) *
                             std::cos(2 * kPi * fx1 * x / W + ph2) +
                         0.07 * std::sin(2 * kPi * fy2 * y / H + ph3) *
                             std::cos(2 * kPi * fx2 * x / W + ph4);
            for (int c = 0; c < C; ++c) px.at(c, y, x) = lum;
        }
    for (int c = 0; c < C; ++c) {
        double fy = rng.uniform(0.5, 1.5), fx = rng.uniform(0.5, 1.5);
        double pa = rng.uniform(0.0, 2 * kPi), pb = rng.uniform(0.0, 2 * kPi);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                px.at(c, y, x) += amp * std::sin(2 * kPi * fy * y / H + pa) *
                                  std::cos(2 * kPi * fx * x / W + pb);
    }
}

struct ObjectSpec {
    double cy, cx, radius;
    int shape;  // 0 disk, 1 square, 2 diamond
    double angle;
};

bool inside(const ObjectSpec& o, int y, int x) {
    double dy = y - o.cy, dx = x - o.cx;
    double ry = dy * std::cos(o.angle) - dx * std::sin(o.angle);
    double rx = dy * std::sin(o.angle) + dx * std::cos(o.angle);
    switch (o.shape) {
        case 0: return dy * dy + dx * dx <= o.radius * o.radius;
        case 1: return std::fabs(ry) <= o.radius && std::fabs(rx) <= o.radius;
        default: return std::fabs(ry) + std::fabs(rx) <= 1.35 * o.radius;
    }
}

}  // namespace

Dataset make_synthetic(const SynthConfig& cfg, int n, std::uint64_t seed) {
    Dataset ds;
    ds.kind = cfg.kind;
    ds.num_classes = cfg.num_classes;
    int C, H, W;
    if (cfg.kind == "gray28") {
        C = 1;
        H = W = 28;
    } else if (cfg.kind == "rgb32") {
        C = 3;
        H = W = 32;
    } else {
        throw std::invalid_argument("make_synthetic: unknown kind " + cfg.kind);
    }
    ds.images.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i) * 2654435761u + 17));
        int label = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.num_classes)));
        Tensor px({C, H, W});
        fill_background(px, rng, cfg.background_amplitude);

        ObjectSpec obj;
        obj.radius = rng.uniform(0.24, 0.34) * H;
        obj.cy = rng.uniform(obj.radius + 1.0, H - obj.radius - 1.0);
        obj.cx = rng.uniform(obj.radius + 1.0, W - obj.radius - 1.0);
        obj.shape = static_cast<int>(rng.uniform_int(3));
        obj.angle = rng.uniform(0.0, kPi / 2);

        // class signal: oriented gratings at two scales inside the object
        double theta = kPi * label / cfg.num_classes;
        double period = rng.uniform(5.5, 7.0);
        double phase = rng.uniform(0.0, 2 * kPi);
        double kx = std::cos(theta) * 2 * kPi / period;
        double ky = std::sin(theta) * 2 * kPi / period;
        double theta_f = kPi * (label + 0.5) / cfg.num_classes;
        double phase_f = rng.uniform(0.0, 2 * kPi);
        double kxf = std::cos(theta_f) * 2 * kPi / cfg.fine_period;
        double kyf = std::sin(theta_f) * 2 * kPi / cfg.fine_period;
        double fine_amp = cfg.fine_amplitude;
        if (cfg.fine_dropout > 0.0 && rng.uniform() < cfg.fine_dropout)
            fine_amp *= rng.uniform(0.0, 0.3);

        // background distractors: random-class textures without the lift
        for (int d = 0; d < cfg.distractors; ++d) {
            ObjectSpec ds2;
            ds2.radius = rng.uniform(0.10, 0.15) * H;
            ds2.cy = rng.uniform(ds2.radius + 1.0, H - ds2.radius - 1.0);
            ds2.cx = rng.uniform(ds2.radius + 1.0, W - ds2.radius - 1.0);
            ds2.shape = static_cast<int>(rng.uniform_int(3));
            ds2.angle = rng.uniform(0.0, kPi / 2);
            int dlabel = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.num_classes)));
            double dtheta = kPi * dlabel / cfg.num_classes;
            double dperiod = rng.uniform(5.5, 7.0);
            double dphase = rng.uniform(0.0, 2 * kPi);
            double dkx = std::cos(dtheta) * 2 * kPi / dperiod;
            double dky = std::sin(dtheta) * 2 * kPi / dperiod;
            double dtheta_f = kPi * (dlabel + 0.5) / cfg.num_classes;
            double dkxf = std::cos(dtheta_f) * 2 * kPi / cfg.fine_period;
            double dkyf = std::sin(dtheta_f) * 2 * kPi / cfg.fine_period;
            double dphase_f = rng.uniform(0.0, 2 * kPi);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    if (!inside(ds2, y, x) || inside(obj, y, x)) continue;
                    double s = cfg.signal_amplitude * std::sin(dkx * x + dky * y + dphase) +
                               cfg.fine_amplitude * std::sin(dkxf * x + dkyf * y + dphase_f);
                    for (int c = 0; c < C; ++c) px.at(c, y, x) += s;
                }
        }
        // color axis varies with the class on rgb inputs
        double col[3] = {1.0, 1.0, 1.0};
        if (C == 3) {
            double hue = 2 * kPi * label / cfg.num_classes;
            double cc = cfg.color_contrast;
            col[0] = 1.0 - cc + cc * std::cos(hue);
            col[1] = 1.0 - cc + cc * std::cos(hue + 2 * kPi / 3);
            col[2] = 1.0 - cc + cc * std::cos(hue + 4 * kPi / 3);
        }
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!inside(obj, y, x)) continue;
                double s = cfg.signal_amplitude * std::sin(kx * x + ky * y + phase) +
                           fine_amp * std::sin(kxf * x + kyf * y + phase_f);
                for (int c = 0; c < C; ++c)
                    px.at(c, y, x) += cfg.object_lift + s * col[c];
            }

        if (cfg.pixel_noise > 0.0)
            for (std::size_t k = 0; k < px.size(); ++k)
                px[k] += rng.normal(0.0, cfg.pixel_noise);
        for (std::size_t k = 0; k < px.size(); ++k) px[k] = std::clamp(px[k], 0.0, 1.0);

        ds.images.push_back(nn::Image{std::move(px), label});
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream csv(fs::path(dir) / "labels.csv");
    if (!csv) throw std::runtime_error("save_dataset: cannot write labels.csv in " + dir);
    csv << "path,label\n";
    const char* ext = ds.images.empty() || ds.images[0].pixels.dim(0) == 1 ? ".pgm" : ".ppm";
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        std::ostringstream name;
        name << "images/img_" << i << ext;
        io::write_pnm((fs::path(dir) / name.str()).string(), ds.images[i].pixels);
        csv << name.str() << "," << ds.images[i].label.value_or(-1) << "\n";
    }
    std::ofstream meta(fs::path(dir) / "meta.csv");
    meta << "kind,num_classes\n" << ds.kind << "," << ds.num_classes << "\n";
}

Dataset load_dataset(const std::string& dir) {
    fs::path root(dir);
    fs::path csv_path = fs::is_directory(root) ? root / "labels.csv" : root;
    fs::path base = csv_path.parent_path();
    std::ifstream csv(csv_path);
    if (!csv) throw std::runtime_error("load_dataset: cannot open " + csv_path.string());
    Dataset ds;
    std::string line;
    if (!std::getline(csv, line) || line.rfind("path,label", 0) != 0)
        throw std::runtime_error("load_dataset: labels.csv must start with header 'path,label'");
    int max_label = -1;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        auto comma = line.find_last_of(',');
        if (comma == std::string::npos)
            throw std::runtime_error("load_dataset: malformed row: " + line);
        std::string path = line.substr(0, comma);
        int label = std::stoi(line.substr(comma + 1));
        nn::Image im;
        im.pixels = io::read_pnm((base / path).string());
        if (label >= 0) im.label = label;
        max_label = std::max(max_label, label);
        ds.images.push_back(std::move(im));
    }
    ds.num_classes = max_label + 1;
    if (!ds.images.empty())
        ds.kind = ds.images[0].pixels.dim(0) == 1 ? "gray28" : "rgb32";
    std::ifstream meta(base / "meta.csv");
    if (meta) {
        std::string h, row;
        std::getline(meta, h);
        if (std::getline(meta, row)) {
            auto comma = row.find(',');
            if (comma != std::string::npos) {
                ds.kind = row.substr(0, comma);
                ds.num_classes = std::stoi(row.substr(comma + 1));
            }
        }
    }
    return ds;
}

std::vector<nn::Image> slice(const Dataset& ds, std::size_t from, std::size_t count) {
    std::vector<nn::Image> out;
    for (std::size_t i = from; i < std::min(ds.images.size(), from + count); ++i)
        out.push_back(ds.images[i]);
    return out;
}

}  // namespace adv2::data
