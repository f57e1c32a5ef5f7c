#include "gift/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "gift/errors.hpp"

namespace gift {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path);
    is.seekg(0, std::ios::end);
    const auto n = is.tellg();
    is.seekg(0, std::ios::beg);
    std::vector<unsigned char> buf(static_cast<std::size_t>(n));
    if (n > 0 && !is.read(reinterpret_cast<char*>(buf.data()), n))
        throw io_error("read failed for " + path);
    return buf;
}

std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void put_be32(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

const unsigned char kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

Tensor decode_png(const std::vector<unsigned char>& buf, const std::string& path) {
    std::size_t pos = 8;
    std::uint32_t width = 0, height = 0;
    int bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<unsigned char> idat;
    bool saw_ihdr = false, saw_iend = false;

    while (pos + 8 <= buf.size() && !saw_iend) {
        const std::uint32_t len = be32(&buf[pos]);
        if (pos + 12 + len > buf.size())
            throw format_error(path + ": truncated PNG chunk at offset " + std::to_string(pos));
        const char* type = reinterpret_cast<const char*>(&buf[pos + 4]);
        const unsigned char* data = &buf[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw format_error(path + ": bad IHDR length");
            width = be32(data);
            height = be32(data + 4);
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr) throw format_error(path + ": PNG has no IHDR");
    if (width == 0 || height == 0) throw format_error(path + ": PNG has empty dimensions");
    if (bit_depth != 8) throw format_error(path + ": only 8-bit PNG supported");
    if (interlace != 0) throw format_error(path + ": interlaced PNG not supported");
    int channels;
    switch (color_type) {
        case 0: channels = 1; break; // gray
        case 2: channels = 3; break; // rgb
        case 4: channels = 2; break; // gray+alpha
        case 6: channels = 4; break; // rgba
        default: throw format_error(path + ": unsupported PNG color type " + std::to_string(color_type));
    }

    const std::size_t stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
    const std::size_t raw_size = (stride + 1) * height;
    std::vector<unsigned char> raw(raw_size);
    uLongf dest_len = static_cast<uLongf>(raw_size);
    const int zrc = uncompress(raw.data(), &dest_len, idat.data(), static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || dest_len != raw_size)
        throw format_error(path + ": PNG inflate failed (zlib " + std::to_string(zrc) + ")");

    // undo per-row filters in place (output shifted left by the filter byte)
    std::vector<unsigned char> pix(stride * height);
    const int bpp = channels;
    for (std::uint32_t y = 0; y < height; ++y) {
        const unsigned char filter = raw[y * (stride + 1)];
        const unsigned char* src = &raw[y * (stride + 1) + 1];
        unsigned char* cur = &pix[y * stride];
        const unsigned char* up = y > 0 ? &pix[(y - 1) * stride] : nullptr;
        switch (filter) {
            case 0:
                std::memcpy(cur, src, stride);
                break;
            case 1:
                for (std::size_t i = 0; i < stride; ++i)
                    cur[i] = static_cast<unsigned char>(src[i] + (i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0));
                break;
            case 2:
                for (std::size_t i = 0; i < stride; ++i)
                    cur[i] = static_cast<unsigned char>(src[i] + (up ? up[i] : 0));
                break;
            case 3:
                for (std::size_t i = 0; i < stride; ++i) {
                    const int a = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
                    const int b = up ? up[i] : 0;
                    cur[i] = static_cast<unsigned char>(src[i] + ((a + b) >> 1));
                }
                break;
            case 4:
                for (std::size_t i = 0; i < stride; ++i) {
                    const int a = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
                    const int b = up ? up[i] : 0;
                    const int c = (up && i >= static_cast<std::size_t>(bpp)) ? up[i - bpp] : 0;
                    cur[i] = static_cast<unsigned char>(src[i] + paeth(a, b, c));
                }
                break;
            default:
                throw format_error(path + ": bad PNG filter " + std::to_string(filter) + " in row " +
                                   std::to_string(y));
        }
    }

    const std::int64_t H = height, W = width;
    Tensor out = Tensor::zeros({3, H, W});
    double* r = out.data();
    double* g = r + H * W;
    double* b = g + H * W;
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const unsigned char* px = &pix[(static_cast<std::size_t>(y) * W + x) * channels];
            double rv, gv, bv;
            if (channels <= 2) { rv = gv = bv = px[0] / 255.0; }
            else { rv = px[0] / 255.0; gv = px[1] / 255.0; bv = px[2] / 255.0; }
            r[y * W + x] = rv;
            g[y * W + x] = gv;
            b[y * W + x] = bv;
        }
    return out;
}

Tensor decode_pnm(const std::vector<unsigned char>& buf, const std::string& path) {
    // P5 (gray) / P6 (rgb), binary, maxval <= 255
    std::size_t pos = 2;
    auto skip_ws = [&]() {
        while (pos < buf.size()) {
            if (buf[pos] == '#') { while (pos < buf.size() && buf[pos] != '\n') ++pos; }
            else if (std::isspace(buf[pos])) ++pos;
            else break;
        }
    };
    auto read_int = [&]() -> std::int64_t {
        skip_ws();
        std::int64_t v = 0;
        bool any = false;
        while (pos < buf.size() && std::isdigit(buf[pos])) {
            v = v * 10 + (buf[pos] - '0');
            ++pos;
            any = true;
        }
        if (!any) throw format_error(path + ": malformed PNM header");
        return v;
    };
    const bool rgb = buf[1] == '6';
    const std::int64_t W = read_int(), H = read_int(), maxval = read_int();
    if (W <= 0 || H <= 0) throw format_error(path + ": PNM has empty dimensions");
    if (maxval <= 0 || maxval > 255) throw format_error(path + ": PNM maxval must be in [1,255]");
    ++pos; // single whitespace after maxval
    const std::int64_t ch = rgb ? 3 : 1;
    if (pos + static_cast<std::size_t>(W * H * ch) > buf.size())
        throw format_error(path + ": truncated PNM pixel data");
    Tensor out = Tensor::zeros({3, H, W});
    double* planes[3] = {out.data(), out.data() + H * W, out.data() + 2 * H * W};
    const double mv = static_cast<double>(maxval);
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const unsigned char* px = &buf[pos + static_cast<std::size_t>((y * W + x) * ch)];
            if (rgb) {
                planes[0][y * W + x] = px[0] / mv;
                planes[1][y * W + x] = px[1] / mv;
                planes[2][y * W + x] = px[2] / mv;
            } else {
                planes[0][y * W + x] = planes[1][y * W + x] = planes[2][y * W + x] = px[0] / mv;
            }
        }
    return out;
}

std::vector<unsigned char> quantize(const Tensor& image, std::int64_t& H, std::int64_t& W,
                                    int& channels) {
    const auto& s = image.shape();
    if (s.size() != 3 || (s[0] != 1 && s[0] != 3))
        throw shape_error("save_image expects [1,H,W] or [3,H,W]");
    channels = static_cast<int>(s[0]);
    H = s[1];
    W = s[2];
    std::vector<unsigned char> bytes(static_cast<std::size_t>(channels * H * W));
    for (int c = 0; c < channels; ++c) {
        const double* p = image.data() + c * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
            const double v = std::clamp(p[i], 0.0, 1.0);
            bytes[static_cast<std::size_t>(i) * channels + c] =
                static_cast<unsigned char>(std::lround(v * 255.0));
        }
    }
    return bytes;
}

void write_png(const std::string& path, const std::vector<unsigned char>& pix, std::int64_t H,
               std::int64_t W, int channels) {
    const std::size_t stride = static_cast<std::size_t>(W) * channels;
    std::vector<unsigned char> raw((stride + 1) * static_cast<std::size_t>(H));
    for (std::int64_t y = 0; y < H; ++y) {
        raw[static_cast<std::size_t>(y) * (stride + 1)] = 0; // filter: none
        std::memcpy(&raw[static_cast<std::size_t>(y) * (stride + 1) + 1], &pix[y * stride], stride);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(bound);
    if (compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw io_error("PNG deflate failed for " + path);
    comp.resize(bound);

    std::vector<unsigned char> out;
    out.insert(out.end(), kPngSig, kPngSig + 8);
    auto chunk = [&](const char* type, const std::vector<unsigned char>& data) {
        put_be32(out, static_cast<std::uint32_t>(data.size()));
        const std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), data.begin(), data.end());
        const std::uint32_t crc = static_cast<std::uint32_t>(
            crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
        put_be32(out, crc);
    };
    std::vector<unsigned char> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(W));
    put_be32(ihdr, static_cast<std::uint32_t>(H));
    ihdr.push_back(8);
    ihdr.push_back(channels == 3 ? 2 : 0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    chunk("IHDR", ihdr);
    chunk("IDAT", comp);
    chunk("IEND", {});

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!os) throw io_error("write failed for " + path);
}

void write_pnm(const std::string& path, const std::vector<unsigned char>& pix, std::int64_t H,
               std::int64_t W, int channels) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << (channels == 3 ? "P6" : "P5") << "\n" << W << " " << H << "\n255\n";
    os.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
    if (!os) throw io_error("write failed for " + path);
}

} // namespace

Tensor load_image(const std::string& path) {
    const auto buf = read_file(path);
    if (buf.size() >= 8 && std::memcmp(buf.data(), kPngSig, 8) == 0) return decode_png(buf, path);
    if (buf.size() >= 2 && buf[0] == 'P' && (buf[1] == '5' || buf[1] == '6'))
        return decode_pnm(buf, path);
    throw format_error(path + ": unrecognized image format (expected PNG or binary PNM)");
}

void save_image(const std::string& path, const Tensor& image) {
    std::int64_t H = 0, W = 0;
    int channels = 0;
    const auto pix = quantize(image, H, W, channels);
    const bool png = path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0;
    if (png) write_png(path, pix, H, W, channels);
    else write_pnm(path, pix, H, W, channels);
}

Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w) {
    const auto& s = image.shape();
    if (s.size() != 3) throw shape_error("resize_bilinear expects [C,H,W]");
    if (out_h < 1 || out_w < 1) throw shape_error("resize_bilinear: output must be non-empty");
    const std::int64_t C = s[0], H = s[1], W = s[2];
    Tensor out = Tensor::zeros({C, out_h, out_w});
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (std::int64_t c = 0; c < C; ++c) {
        const double* src = image.data() + c * H * W;
        double* dst = out.data() + c * out_h * out_w;
        for (std::int64_t y = 0; y < out_h; ++y) {
            double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
            const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
            const std::int64_t y1 = std::min(y0 + 1, H - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::int64_t x = 0; x < out_w; ++x) {
                double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
                const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
                const std::int64_t x1 = std::min(x0 + 1, W - 1);
                const double wx = fx - static_cast<double>(x0);
                dst[y * out_w + x] =
                    (1.0 - wy) * ((1.0 - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
                    wy * ((1.0 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
            }
        }
    }
    return out;
}

} // namespace gift
