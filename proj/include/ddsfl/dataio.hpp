#pragma once

// Dataset manifests, grayscale image IO (PGM/PNG), bilinear scale pyramids,
// dense patch grids, patch normalization and spatial-neighbor sampling.

#include <Eigen/Dense>
#include <png.h>

#include <cctype>
#include <fstream>
#include <sstream>

#include "ddsfl/core.hpp"

namespace ddsfl {

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, test, val };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        default: return "val";
    }
}

struct ManifestEntry {
    std::string path;
    int class_id;
    Split split;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    int num_classes = 0;
};

// Format: one record per line, `path<TAB>class_id<TAB>split`; '#' comments skipped.
inline DatasetManifest parse_manifest(std::istream& in, const std::string& name) {
    DatasetManifest manifest;
    std::string line;
    int lineno = 0;
    int max_class = -1;
    std::vector<std::string> seen_paths;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') continue;

        auto fail = [&](const std::string& why) {
            throw DataError(name + ": manifest parse error at line " + std::to_string(lineno) + ": " + why);
        };

        const std::size_t t1 = line.find('\t');
        if (t1 == std::string::npos) fail("expected `path<TAB>class_id<TAB>split`");
        const std::size_t t2 = line.find('\t', t1 + 1);
        if (t2 == std::string::npos) fail("missing split field");
        if (line.find('\t', t2 + 1) != std::string::npos) fail("too many fields");

        ManifestEntry e;
        e.path = line.substr(0, t1);
        if (e.path.empty()) fail("empty path");
        const std::string cls = line.substr(t1 + 1, t2 - t1 - 1);
        try {
            std::size_t used = 0;
            e.class_id = std::stoi(cls, &used);
            if (used != cls.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            fail("bad class id `" + cls + "`");
        }
        if (e.class_id < 0) fail("negative class id");
        const std::string sp = line.substr(t2 + 1);
        if (sp == "train") {
            e.split = Split::train;
        } else if (sp == "test") {
            e.split = Split::test;
        } else if (sp == "val") {
            e.split = Split::val;
        } else {
            fail("bad split `" + sp + "` (expected train|test|val)");
        }
        for (const auto& p : seen_paths) {
            if (p == e.path) fail("duplicate path `" + e.path + "`");
        }
        seen_paths.push_back(e.path);
        max_class = std::max(max_class, e.class_id);
        manifest.entries.push_back(std::move(e));
    }
    if (manifest.entries.empty()) throw DataError(name + ": manifest is empty");
    manifest.num_classes = max_class + 1;
    return manifest;
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest `" + path + "`");
    return parse_manifest(in, path);
}

// ---------------------------------------------------------------------------
// Images

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<double> data;  // row-major luminance in [0,1]

    double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    bool empty() const { return width == 0 || height == 0; }
};

inline GrayImage load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image `" + path + "`");
    std::string magic;
    in >> magic;
    if (magic != "P5") throw DataError(path + ": not a P5 PGM");

    auto next_int = [&]() {
        int c = in.get();
        for (;;) {
            while (c != EOF && std::isspace(c)) c = in.get();
            if (c == '#') {
                while (c != EOF && c != '\n') c = in.get();
                continue;
            }
            break;
        }
        int v = 0;
        bool any = false;
        while (c != EOF && std::isdigit(c)) {
            v = v * 10 + (c - '0');
            any = true;
            c = in.get();
        }
        if (!any) throw DataError(path + ": malformed PGM header");
        return v;
    };

    GrayImage img;
    img.width = next_int();
    img.height = next_int();
    const int maxval = next_int();
    if (img.width <= 0 || img.height <= 0) throw DataError(path + ": bad PGM dimensions");
    if (maxval <= 0 || maxval > 255) throw DataError(path + ": unsupported PGM maxval " + std::to_string(maxval));

    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    std::vector<unsigned char> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw DataError(path + ": truncated PGM data");
    img.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) img.data[i] = raw[i] / static_cast<double>(maxval);
    return img;
}

inline void save_pgm(const GrayImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image `" + path + "`");
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, img.data[i]));
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError("write failed for `" + path + "`");
}

// 8-bit grayscale accepted directly; RGB collapsed by channel average.
inline GrayImage load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (fp == nullptr) throw DataError("cannot open image `" + path + "`");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        if (png != nullptr) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError(path + ": libpng init failed");
    }

    std::vector<png_bytep> row_ptrs;
    std::vector<unsigned char> pixels;
    GrayImage img;
    int channels = 0;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError(path + ": PNG decode failed");
    }

    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    png_read_update_info(png, info);

    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw DataError(path + ": unsupported PNG channel count");
    }

    const std::size_t stride = static_cast<std::size_t>(img.width) * channels;
    pixels.resize(stride * img.height);
    row_ptrs.resize(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) row_ptrs[static_cast<std::size_t>(y)] = pixels.data() + stride * y;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    img.data.resize(static_cast<std::size_t>(img.width) * img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        if (channels == 1) {
            img.data[i] = pixels[i] / 255.0;
        } else {
            const unsigned char* p = &pixels[i * 3];
            img.data[i] = (p[0] + p[1] + p[2]) / (3.0 * 255.0);
        }
    }
    return img;
}

inline GrayImage load_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw DataError("cannot open image `" + path + "`");
    unsigned char head[8] = {0};
    probe.read(reinterpret_cast<char*>(head), 8);
    probe.close();
    if (head[0] == 'P' && head[1] == '5') return load_pgm(path);
    static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (std::memcmp(head, png_sig, 8) == 0) return load_png(path);
    throw DataError(path + ": unrecognized image format (PGM P5 or PNG expected)");
}

// ---------------------------------------------------------------------------
// Resizing and pyramids

inline GrayImage resize_bilinear(const GrayImage& src, int new_w, int new_h) {
    if (src.empty() || new_w < 1 || new_h < 1) throw DataError("resize_bilinear: empty input or target");
    if (new_w == src.width && new_h == src.height) return src;
    GrayImage dst;
    dst.width = new_w;
    dst.height = new_h;
    dst.data.resize(static_cast<std::size_t>(new_w) * new_h);
    const double sx = static_cast<double>(src.width) / new_w;
    const double sy = static_cast<double>(src.height) / new_h;
    for (int y = 0; y < new_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < new_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            const double top = src.at(x0, y0) * (1.0 - wx) + src.at(x1, y0) * wx;
            const double bot = src.at(x0, y1) * (1.0 - wx) + src.at(x1, y1) * wx;
            dst.at(x, y) = top * (1.0 - wy) + bot * wy;
        }
    }
    return dst;
}

struct PyramidConfig {
    int num_scales = 6;
    double factor = 0.70710678118654752440;  // 2^(-1/2)
    int patch_size = 16;
    int stride = 3;
};

// Scale i has dimensions round(original * factor^i); scales smaller than
// patch_size are dropped. Scale 0 is the input, bit for bit.
inline std::vector<GrayImage> build_pyramid(const GrayImage& img, const PyramidConfig& cfg) {
    if (img.empty()) throw DataError("build_pyramid: empty image");
    std::vector<GrayImage> scales;
    for (int i = 0; i < cfg.num_scales; ++i) {
        const double m = std::pow(cfg.factor, i);
        const int w = static_cast<int>(std::lround(img.width * m));
        const int h = static_cast<int>(std::lround(img.height * m));
        if (w < cfg.patch_size || h < cfg.patch_size) continue;
        scales.push_back(i == 0 ? img : resize_bilinear(img, w, h));
    }
    return scales;
}

// ---------------------------------------------------------------------------
// Patches

struct Patch {
    Eigen::VectorXd values;  // row-major vectorized pixels, length size*size at layer 1
    int image_id = -1;
    int class_id = -1;
    int scale_idx = 0;
    int x = 0;
    int y = 0;
    int size = 0;
};

inline std::vector<Patch> extract_patches(const GrayImage& img, int patch_size, int stride) {
    std::vector<Patch> patches;
    if (patch_size > img.width || patch_size > img.height) return patches;
    if (stride < 1) throw std::invalid_argument("extract_patches: stride must be >= 1");
    for (int y = 0; y + patch_size <= img.height; y += stride) {
        for (int x = 0; x + patch_size <= img.width; x += stride) {
            Patch p;
            p.x = x;
            p.y = y;
            p.size = patch_size;
            p.values.resize(static_cast<Eigen::Index>(patch_size) * patch_size);
            for (int r = 0; r < patch_size; ++r) {
                for (int c = 0; c < patch_size; ++c) {
                    p.values(static_cast<Eigen::Index>(r) * patch_size + c) = img.at(x + c, y + r);
                }
            }
            patches.push_back(std::move(p));
        }
    }
    return patches;
}

// Mean-subtract then scale to unit L2 norm; near-constant patches collapse to zero.
inline Patch normalize_patch(const Patch& p) {
    Patch out = p;
    const double mean = out.values.mean();
    out.values.array() -= mean;
    const double norm = out.values.norm();
    if (norm < 1e-8) {
        out.values.setZero();
    } else {
        out.values /= norm;
    }
    return out;
}

// M patches from the square window of side 2*size around p's center, sizes
// drawn from {size/2, size, 2*size} (clipped), resized to size, normalized.
inline std::vector<Patch> sample_spatial_neighbors(const GrayImage& img, const Patch& p, int M,
                                                   std::uint64_t seed) {
    if (M < 1) throw std::invalid_argument("sample_spatial_neighbors: M must be >= 1");
    std::vector<Patch> out;
    out.reserve(static_cast<std::size_t>(M));
    if (img.width < 2 || img.height < 2) {
        for (int m = 0; m < M; ++m) out.push_back(p);
        return out;
    }

    Rng rng(seed);
    const double cx = p.x + p.size / 2.0;
    const double cy = p.y + p.size / 2.0;
    const int win_x0 = std::max(0, static_cast<int>(std::lround(cx)) - p.size);
    const int win_y0 = std::max(0, static_cast<int>(std::lround(cy)) - p.size);
    const int win_x1 = std::min(img.width, static_cast<int>(std::lround(cx)) + p.size);
    const int win_y1 = std::min(img.height, static_cast<int>(std::lround(cy)) + p.size);

    const int size_choices[3] = {std::max(1, p.size / 2), p.size, 2 * p.size};
    for (int m = 0; m < M; ++m) {
        int sz = size_choices[rng.uniform_int(3)];
        sz = std::min({sz, img.width, img.height});

        int lo_x = std::max(0, win_x0);
        int hi_x = std::min(img.width - sz, win_x1 - sz);
        if (hi_x < lo_x) {
            lo_x = 0;
            hi_x = img.width - sz;
        }
        int lo_y = std::max(0, win_y0);
        int hi_y = std::min(img.height - sz, win_y1 - sz);
        if (hi_y < lo_y) {
            lo_y = 0;
            hi_y = img.height - sz;
        }
        const int nx = lo_x + static_cast<int>(rng.uniform_int(hi_x - lo_x + 1));
        const int ny = lo_y + static_cast<int>(rng.uniform_int(hi_y - lo_y + 1));

        GrayImage crop;
        crop.width = sz;
        crop.height = sz;
        crop.data.resize(static_cast<std::size_t>(sz) * sz);
        for (int r = 0; r < sz; ++r) {
            for (int c = 0; c < sz; ++c) crop.at(c, r) = img.at(nx + c, ny + r);
        }
        if (sz != p.size) crop = resize_bilinear(crop, p.size, p.size);

        Patch q;
        q.image_id = p.image_id;
        q.class_id = p.class_id;
        q.scale_idx = p.scale_idx;
        q.x = nx;
        q.y = ny;
        q.size = p.size;
        q.values.resize(static_cast<Eigen::Index>(p.size) * p.size);
        for (int r = 0; r < p.size; ++r) {
            for (int c = 0; c < p.size; ++c) {
                q.values(static_cast<Eigen::Index>(r) * p.size + c) = crop.at(c, r);
            }
        }
        out.push_back(normalize_patch(q));
    }
    return out;
}

}  // namespace ddsfl
