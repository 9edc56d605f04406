#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <png.h>

#include "ddsfl/dataio.hpp"
#include "test_util.hpp"

using namespace ddsfl;

namespace {

std::filesystem::path tmp_dir() {
    const std::filesystem::path p = std::filesystem::path(DDSFL_TEST_TMP) / "dataio";
    std::filesystem::create_directories(p);
    return p;
}

GrayImage ramp_image(int w, int h) {
    GrayImage img;
    img.width = w;
    img.height = h;
    img.data.resize(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) img.at(x, y) = ((x * 31 + y * 17) % 255) / 255.0;
    }
    return img;
}

void write_png(const std::string& path, int w, int h, int channels,
               const std::vector<unsigned char>& pixels) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    REQUIRE(fp != nullptr);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    REQUIRE(setjmp(png_jmpbuf(png)) == 0);
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) {
        png_write_row(png, const_cast<png_bytep>(&pixels[static_cast<std::size_t>(y) * w * channels]));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace

TEST_CASE("manifest parses records and derives the class count", "[dataio]") {
    std::istringstream two("a.png\t0\ttrain\nb.png\t1\ttest\n");
    const DatasetManifest m2 = parse_manifest(two, "mem");
    REQUIRE(m2.num_classes == 2);
    REQUIRE(m2.entries.size() == 2);
    REQUIRE(m2.entries[1].split == Split::test);

    std::istringstream four("# comment line\na.png\t0\ttrain\nb.png\t3\ttrain\nc.png\t1\ttest\nd.png\t2\ttest\n");
    REQUIRE(parse_manifest(four, "mem").num_classes == 4);
}

TEST_CASE("manifest rejects malformed input with line numbers", "[dataio]") {
    std::istringstream missing("img.png\t3\n");
    try {
        parse_manifest(missing, "mem");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("line 1") != std::string::npos);
    }

    std::istringstream empty("");
    REQUIRE_THROWS_AS(parse_manifest(empty, "mem"), DataError);

    std::istringstream dup("a.png\t0\ttrain\na.png\t1\ttest\n");
    REQUIRE_THROWS_AS(parse_manifest(dup, "mem"), DataError);

    std::istringstream badsplit("a.png\t0\tvalidation\n");
    REQUIRE_THROWS_AS(parse_manifest(badsplit, "mem"), DataError);
}

TEST_CASE("pgm round-trips through disk", "[dataio]") {
    const auto dir = tmp_dir();
    const GrayImage img = ramp_image(37, 23);
    const std::string path = (dir / "ramp.pgm").string();
    save_pgm(img, path);
    const GrayImage back = load_image(path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        REQUIRE(std::abs(back.data[i] - img.data[i]) < 1.0 / 254.0);
    }
}

TEST_CASE("png loading handles gray and rgb content", "[dataio]") {
    const auto dir = tmp_dir();
    std::vector<unsigned char> gray(16);
    for (int i = 0; i < 16; ++i) gray[static_cast<std::size_t>(i)] = static_cast<unsigned char>(i * 16);
    const std::string gpath = (dir / "gray.png").string();
    write_png(gpath, 4, 4, 1, gray);
    const GrayImage g = load_image(gpath);
    REQUIRE(g.width == 4);
    REQUIRE(std::abs(g.at(1, 0) - 16.0 / 255.0) < 1e-12);

    std::vector<unsigned char> rgb = {10, 20, 30, 60, 90, 120};
    const std::string cpath = (dir / "rgb.png").string();
    write_png(cpath, 2, 1, 3, rgb);
    const GrayImage c = load_image(cpath);
    REQUIRE(std::abs(c.at(0, 0) - 20.0 / 255.0) < 1e-12);  // channel average
    REQUIRE(std::abs(c.at(1, 0) - 90.0 / 255.0) < 1e-12);
}

TEST_CASE("pyramid dimensions follow round(original * 2^(-i/2))", "[dataio]") {
    GrayImage img = ramp_image(300, 300);
    PyramidConfig cfg;
    cfg.num_scales = 6;
    cfg.patch_size = 16;
    const auto scales = build_pyramid(img, cfg);
    REQUIRE(scales.size() == 6);
    const int expect[6] = {300, 212, 150, 106, 75, 53};
    for (int i = 0; i < 6; ++i) {
        REQUIRE(scales[static_cast<std::size_t>(i)].width == expect[i]);
        REQUIRE(scales[static_cast<std::size_t>(i)].height == expect[i]);
    }
    REQUIRE(scales[0].data == img.data);  // scale 0 is the input, bit for bit
}

TEST_CASE("pyramid keeps constants constant and drops tiny scales", "[dataio]") {
    GrayImage flat;
    flat.width = 40;
    flat.height = 40;
    flat.data.assign(40 * 40, 0.42);
    PyramidConfig cfg;
    cfg.num_scales = 4;
    cfg.patch_size = 16;
    for (const auto& s : build_pyramid(flat, cfg)) {
        for (double v : s.data) REQUIRE(std::abs(v - 0.42) < 1e-12);
    }

    GrayImage small = ramp_image(20, 20);
    PyramidConfig cfg3;
    cfg3.num_scales = 3;
    cfg3.patch_size = 16;
    const auto scales = build_pyramid(small, cfg3);
    REQUIRE(scales.size() == 1);
    REQUIRE(scales[0].width == 20);
}

TEST_CASE("patch grids enumerate positions row-major", "[dataio]") {
    const GrayImage img = ramp_image(32, 32);
    const auto p = extract_patches(img, 16, 16);
    REQUIRE(p.size() == 4);
    REQUIRE((p[0].x == 0 && p[0].y == 0));
    REQUIRE((p[1].x == 16 && p[1].y == 0));
    REQUIRE((p[2].x == 0 && p[2].y == 16));
    REQUIRE((p[3].x == 16 && p[3].y == 16));

    const GrayImage exact = ramp_image(16, 16);
    const auto one = extract_patches(exact, 16, 3);
    REQUIRE(one.size() == 1);
    for (int r = 0; r < 16; ++r) {
        for (int c = 0; c < 16; ++c) {
            REQUIRE(one[0].values(r * 16 + c) == exact.at(c, r));
        }
    }

    const GrayImage wide = ramp_image(34, 16);
    REQUIRE(extract_patches(wide, 16, 3).size() == 7);

    REQUIRE(extract_patches(ramp_image(8, 8), 16, 3).empty());
}

TEST_CASE("patch grid count matches the closed form", "[dataio]") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const int w = 16 + static_cast<int>(rng.uniform_int(60));
        const int h = 16 + static_cast<int>(rng.uniform_int(60));
        const int s = 4 + static_cast<int>(rng.uniform_int(12));
        const int stride = 1 + static_cast<int>(rng.uniform_int(7));
        const auto patches = extract_patches(ramp_image(w, h), s, stride);
        const std::size_t expect =
            static_cast<std::size_t>((w - s) / stride + 1) * static_cast<std::size_t>((h - s) / stride + 1);
        REQUIRE(patches.size() == expect);
    }
}

TEST_CASE("normalize_patch centers, scales, and collapses constants", "[dataio]") {
    Patch p;
    p.values.resize(2);
    p.values << 1.0, 3.0;
    const Patch n = normalize_patch(p);
    REQUIRE(std::abs(n.values(0) + 1.0 / std::sqrt(2.0)) < 1e-12);
    REQUIRE(std::abs(n.values(1) - 1.0 / std::sqrt(2.0)) < 1e-12);

    Patch flat;
    flat.values = Eigen::VectorXd::Constant(9, 0.7);
    REQUIRE(normalize_patch(flat).values.isZero(0));

    const Patch again = normalize_patch(n);
    REQUIRE((again.values - n.values).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("normalize_patch output has zero mean and unit or zero norm", "[dataio]") {
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Patch p;
        p.values = testutil::random_matrix(rng, 1, 1 + static_cast<int>(rng.uniform_int(64))).row(0).transpose();
        const Patch n = normalize_patch(p);
        REQUIRE(std::abs(n.values.mean()) <= 1e-10);
        const double norm = n.values.norm();
        REQUIRE((norm == 0.0 || std::abs(norm - 1.0) <= 1e-10));
    }
}

TEST_CASE("spatial neighbors have the right count, length, and determinism", "[dataio]") {
    const GrayImage img = ramp_image(64, 64);
    const auto patches = extract_patches(img, 16, 16);
    const Patch p = normalize_patch(patches[2]);

    const auto n1 = sample_spatial_neighbors(img, p, 3, 99);
    REQUIRE(n1.size() == 3);
    for (const auto& q : n1) REQUIRE(q.values.size() == 256);

    const auto n2 = sample_spatial_neighbors(img, p, 3, 99);
    for (std::size_t i = 0; i < n1.size(); ++i) {
        REQUIRE(n1[i].values == n2[i].values);
    }

    GrayImage flat;
    flat.width = 48;
    flat.height = 48;
    flat.data.assign(48 * 48, 0.5);
    const auto fp = extract_patches(flat, 16, 16);
    for (const auto& q : sample_spatial_neighbors(flat, fp[0], 4, 1)) {
        REQUIRE(q.values.isZero(0));
    }
}

TEST_CASE("spatial neighbors degenerate to copies on a tiny image", "[dataio]") {
    GrayImage tiny;
    tiny.width = 1;
    tiny.height = 1;
    tiny.data = {0.3};
    Patch p;
    p.values.resize(1);
    p.values << 0.0;
    p.size = 1;
    const auto n = sample_spatial_neighbors(tiny, p, 3, 7);
    REQUIRE(n.size() == 3);
    for (const auto& q : n) REQUIRE(q.values == p.values);
}
