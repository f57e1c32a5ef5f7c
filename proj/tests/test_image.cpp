#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "gift/errors.hpp"
#include "gift/image.hpp"
#include "test_util.hpp"

using namespace gift;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

std::string temp_path(const std::string& name) {
    return std::string("/tmp/gift_image_test_") + name;
}

// quantize to the 8-bit lattice so a save/load round trip is lossless
Tensor quantized(Tensor t) {
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const int v = static_cast<int>(t.data()[i] * 255.0 + 0.5);
        t.data()[i] = static_cast<double>(v) / 255.0;
    }
    return t;
}

} // namespace

TEST_CASE("ppm round trip is lossless on the 8-bit lattice") {
    Rng rng(300);
    Tensor img = quantized(random_tensor({3, 9, 13}, rng, 0.0, 1.0));
    const std::string path = temp_path("rt.ppm");
    save_image(path, img);
    Tensor back = load_image(path);
    CHECK(back.shape() == img.shape());
    CHECK(max_abs_diff(back, img) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("pgm round trip replicates gray to three channels") {
    Rng rng(301);
    Tensor img = quantized(random_tensor({1, 6, 5}, rng, 0.0, 1.0));
    const std::string path = temp_path("rt.pgm");
    save_image(path, img);
    Tensor back = load_image(path);
    REQUIRE(back.shape() == std::vector<std::int64_t>{3, 6, 5});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 5; ++x)
                CHECK(back.at({c, y, x}) == img.at({0, y, x}));
    std::remove(path.c_str());
}

TEST_CASE("png round trip is lossless on the 8-bit lattice") {
    Rng rng(302);
    Tensor img = quantized(random_tensor({3, 16, 11}, rng, 0.0, 1.0));
    const std::string path = temp_path("rt.png");
    save_image(path, img);
    Tensor back = load_image(path);
    CHECK(back.shape() == img.shape());
    CHECK(max_abs_diff(back, img) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("format detection goes by magic bytes, not extension") {
    Rng rng(303);
    Tensor img = quantized(random_tensor({3, 4, 4}, rng, 0.0, 1.0));
    const std::string path = temp_path("actually_png.dat");
    {
        // write a png, then load it through a neutral extension
        const std::string png = temp_path("tmp.png");
        save_image(png, img);
        std::ifstream in(png, std::ios::binary);
        std::ofstream out(path, std::ios::binary);
        out << in.rdbuf();
        std::remove(png.c_str());
    }
    Tensor back = load_image(path);
    CHECK(max_abs_diff(back, img) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("values are clamped to [0,1] when saving") {
    Tensor img = Tensor::zeros({1, 1, 3});
    img.data()[0] = -0.5;
    img.data()[1] = 0.5;
    img.data()[2] = 1.7;
    const std::string path = temp_path("clamp.pgm");
    save_image(path, img);
    Tensor back = load_image(path);
    CHECK(back.at({0, 0, 0}) == 0.0);
    CHECK(back.at({0, 0, 1}) == doctest::Approx(0.5).epsilon(0.01));
    CHECK(back.at({0, 0, 2}) == 1.0);
    std::remove(path.c_str());
}

TEST_CASE("missing file raises io_error naming the path") {
    try {
        load_image("/tmp/gift_image_test_does_not_exist.png");
        FAIL("expected io_error");
    } catch (const io_error& e) {
        CHECK(std::string(e.what()).find("does_not_exist") != std::string::npos);
    }
}

TEST_CASE("truncated png raises format_error") {
    Rng rng(304);
    Tensor img = quantized(random_tensor({3, 8, 8}, rng, 0.0, 1.0));
    const std::string good = temp_path("good.png");
    save_image(good, img);
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const std::string bad = temp_path("bad.png");
    std::ofstream out(bad, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_image(bad), format_error);
    std::remove(good.c_str());
    std::remove(bad.c_str());
}

TEST_CASE("resize_bilinear: identity size returns equal content") {
    Rng rng(305);
    Tensor img = random_tensor({3, 7, 9}, rng, 0.0, 1.0);
    Tensor out = resize_bilinear(img, 7, 9);
    CHECK(max_abs_diff(out, img) <= 1e-12);
}

TEST_CASE("resize_bilinear: constant image stays constant at any size") {
    Tensor img = Tensor::full({3, 10, 14}, 0.37);
    Tensor out = resize_bilinear(img, 23, 5);
    CHECK(out.shape() == std::vector<std::int64_t>{3, 23, 5});
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("resize_bilinear: 2x upsample of a linear ramp stays linear inside") {
    Tensor img = Tensor::zeros({1, 1, 4});
    for (int x = 0; x < 4; ++x) img.data()[x] = static_cast<double>(x);
    Tensor out = resize_bilinear(img, 1, 8);
    // interior cells follow the ramp at half steps (align-corners-false:
    // source coordinate = (dst + 0.5) / 2 - 0.5)
    for (int x = 1; x < 7; ++x) {
        const double src = (static_cast<double>(x) + 0.5) / 2.0 - 0.5;
        CHECK(out.data()[x] == doctest::Approx(src).epsilon(1e-12));
    }
}
