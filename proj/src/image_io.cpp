#include "adv2/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace adv2::io {

namespace {

std::uint8_t to_byte(double v) {
    double q = std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<std::uint8_t>(q);
}

}  // namespace

void write_pnm(const std::string& path, const Tensor& chw) {
    if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3))
        throw std::invalid_argument("write_pnm: expected (1,H,W) or (3,H,W)");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pnm: cannot open " + path);
    os << (C == 1 ? "P5\n" : "P6\n") << W << " " << H << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(W) * C);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                row[static_cast<std::size_t>(x) * C + c] = to_byte(chw.at(c, y, x));
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

namespace {

int read_pnm_int(std::istream& is) {
    int c = is.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#')
            while (c != '\n' && c != EOF) c = is.get();
        c = is.get();
    }
    int v = 0;
    while (std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = is.get();
    }
    return v;
}

}  // namespace

Tensor read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_pnm: cannot open " + path);
    char p, kind;
    is.get(p);
    is.get(kind);
    if (p != 'P' || (kind != '5' && kind != '6'))
        throw std::runtime_error("read_pnm: unsupported format in " + path);
    int C = kind == '5' ? 1 : 3;
    int W = read_pnm_int(is);
    int H = read_pnm_int(is);
    int maxval = read_pnm_int(is);
    if (maxval != 255) throw std::runtime_error("read_pnm: only 8-bit images supported");
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(W) * H * C);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw std::runtime_error("read_pnm: truncated file " + path);
    Tensor t({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                t.at(c, y, x) = buf[(static_cast<std::size_t>(y) * W + x) * C + c] / 255.0;
    return t;
}

// ------------------------------------------------------------------- PNG

namespace {

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n, std::uint32_t crc = 0xffffffffu) {
    static std::uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc;
}

void push_u32be(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(static_cast<std::uint8_t>(x >> 24));
    v.push_back(static_cast<std::uint8_t>(x >> 16));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
    v.push_back(static_cast<std::uint8_t>(x));
}

void png_chunk(std::ofstream& os, const char type[5], const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> head;
    push_u32be(head, static_cast<std::uint32_t>(payload.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    os.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    std::uint32_t crc = crc32_of(body.data(), body.size()) ^ 0xffffffffu;
    std::vector<std::uint8_t> tail;
    push_u32be(tail, crc);
    os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

// zlib stream with stored (uncompressed) deflate blocks
std::vector<std::uint8_t> zlib_stored(const std::vector<std::uint8_t>& raw) {
    std::vector<std::uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    std::size_t pos = 0;
    while (pos < raw.size()) {
        std::size_t n = std::min<std::size_t>(65535, raw.size() - pos);
        bool last = pos + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<std::uint8_t>(n & 0xff));
        z.push_back(static_cast<std::uint8_t>(n >> 8));
        z.push_back(static_cast<std::uint8_t>(~n & 0xff));
        z.push_back(static_cast<std::uint8_t>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + n);
        pos += n;
    }
    std::uint32_t a = 1, b = 0;
    for (std::uint8_t c : raw) {
        a = (a + c) % 65521;
        b = (b + a) % 65521;
    }
    push_u32be(z, (b << 16) | a);
    return z;
}

}  // namespace

void write_png(const std::string& path, const Tensor& img) {
    int C, H, W;
    if (img.rank() == 2) {
        C = 1;
        H = img.dim(0);
        W = img.dim(1);
    } else if (img.rank() == 3 && (img.dim(0) == 1 || img.dim(0) == 3)) {
        C = img.dim(0);
        H = img.dim(1);
        W = img.dim(2);
    } else {
        throw std::invalid_argument("write_png: expected (H,W), (1,H,W) or (3,H,W)");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_png: cannot open " + path);
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<std::uint8_t> ihdr;
    push_u32be(ihdr, static_cast<std::uint32_t>(W));
    push_u32be(ihdr, static_cast<std::uint32_t>(H));
    ihdr.push_back(8);                      // bit depth
    ihdr.push_back(C == 1 ? 0 : 2);         // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    png_chunk(os, "IHDR", ihdr);

    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(H) * (1 + static_cast<std::size_t>(W) * C));
    for (int y = 0; y < H; ++y) {
        raw.push_back(0);  // filter: none
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) {
                double v = img.rank() == 2 ? img.at(y, x) : img.at(c, y, x);
                raw.push_back(to_byte(v));
            }
    }
    png_chunk(os, "IDAT", zlib_stored(raw));
    png_chunk(os, "IEND", {});
}

// -------------------------------------------------------------- raw maps

void write_map_raw(const std::string& path, const Tensor& map_hw, const std::string& interpreter) {
    if (map_hw.rank() != 2) throw std::invalid_argument("write_map_raw: (H,W) expected");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_map_raw: cannot open " + path);
    std::vector<float> buf(map_hw.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(map_hw[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));

    nlohmann::ordered_json side;
    side["h"] = map_hw.dim(0);
    side["w"] = map_hw.dim(1);
    side["interpreter"] = interpreter;
    std::ofstream js(path + ".json");
    js << side.dump(2) << "\n";
}

Tensor read_map_raw(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("read_map_raw: missing sidecar for " + path);
    nlohmann::json side = nlohmann::json::parse(js);
    int h = side.at("h").get<int>(), w = side.at("w").get<int>();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_map_raw: cannot open " + path);
    std::vector<float> buf(static_cast<std::size_t>(h) * w);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw std::runtime_error("read_map_raw: truncated " + path);
    Tensor t({h, w});
    for (std::size_t i = 0; i < buf.size(); ++i) t[i] = buf[i];
    return t;
}

}  // namespace adv2::io
