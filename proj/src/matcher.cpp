#include "gift/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gift/errors.hpp"
#include "gift/image.hpp"
#include "gift/util.hpp"

namespace gift {

using nlohmann::json;

MatchSet match_nn(const std::vector<DescriptorRecord>& queries,
                  const std::vector<DescriptorRecord>& references) {
    if (queries.empty() || references.empty())
        throw shape_error("match_nn: descriptor sets must be non-empty");
    const std::size_t dim = queries[0].values.size();
    for (const auto& r : references)
        if (r.values.size() != dim)
            throw shape_error("match_nn: descriptor dimensions differ (" + std::to_string(dim) +
                              " vs " + std::to_string(r.values.size()) + ")");
    MatchSet out;
    out.matches.reserve(queries.size());
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const auto& q = queries[qi];
        if (q.values.size() != dim) throw shape_error("match_nn: ragged query dimensions");
        std::size_t best = 0;
        double best_d2 = -1.0;
        for (std::size_t ri = 0; ri < references.size(); ++ri) {
            double d2 = 0.0;
            const double* a = q.values.data();
            const double* b = references[ri].values.data();
            for (std::size_t k = 0; k < dim; ++k) {
                const double d = a[k] - b[k];
                d2 += d * d;
            }
            if (best_d2 < 0.0 || d2 < best_d2) {
                best_d2 = d2;
                best = ri;
            }
        }
        out.matches.push_back({qi, best, std::sqrt(best_d2)});
    }
    return out;
}

double pck(const MatchSet& matches, const std::vector<DescriptorRecord>& references,
           const std::vector<std::pair<double, double>>& gt) {
    if (matches.matches.empty()) throw shape_error("pck: no matches");
    if (gt.size() != matches.matches.size())
        throw shape_error("pck: ground truth count does not match query count");
    std::size_t correct = 0;
    for (const auto& m : matches.matches) {
        const auto& r = references.at(m.reference);
        const double dx = r.x - gt[m.query].first, dy = r.y - gt[m.query].second;
        if (std::sqrt(dx * dx + dy * dy) <= matches.threshold_px) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(matches.matches.size());
}

std::vector<std::pair<double, double>> grid_keypoints(std::int64_t w, std::int64_t h, int n) {
    if (n < 1) throw shape_error("grid_keypoints: n must be positive");
    std::vector<std::pair<double, double>> pts;
    pts.reserve(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            pts.emplace_back((j + 0.5) * static_cast<double>(w) / n - 0.5,
                             (i + 0.5) * static_cast<double>(h) / n - 0.5);
    return pts;
}

namespace {

double snap_trig(double v) {
    const double targets[] = {0.0, 1.0, -1.0, std::sqrt(0.5), -std::sqrt(0.5)};
    for (double t : targets)
        if (std::abs(v - t) < 1e-9) return t;
    return v;
}

TrainingPair pair_from_homography(const Tensor& image, const Homography& h) {
    HomographyWarp hw = warp_homography(image, h);
    TrainingPair p;
    p.image_a = image;
    p.image_b = std::move(hw.image);
    p.homography = hw.point_map;
    return p;
}

} // namespace

TrainingPair rotation_pair(const Tensor& image, double radians) {
    const auto& s = image.shape();
    if (s.size() != 3) throw shape_error("rotation_pair expects [C,H,W]");
    const double c = snap_trig(std::cos(radians));
    const double sn = snap_trig(std::sin(radians));
    const double cx = static_cast<double>(s[2] - 1) / 2.0;
    const double cy = static_cast<double>(s[1] - 1) / 2.0;
    AffineMap rot;
    rot.m = {c, -sn, 0, sn, c, 0};
    rot.m[2] = cx - (rot.m[0] * cx + rot.m[1] * cy);
    rot.m[5] = cy - (rot.m[3] * cx + rot.m[4] * cy);
    return pair_from_homography(image, Homography::from_affine(rot));
}

TrainingPair scale_pair(const Tensor& image, double factor) {
    if (!(factor > 0.0)) throw shape_error("scale_pair: factor must be positive");
    AffineMap sc;
    sc.m = {factor, 0, 0, 0, factor, 0};
    return pair_from_homography(image, Homography::from_affine(sc));
}

TrainingPair make_extreme_pair(const Tensor& image, ExtremeMode mode, Rng& rng) {
    if (mode == ExtremeMode::rotation) {
        const double angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
        return rotation_pair(image, angle);
    }
    // scale intervals from the evaluation protocol; pick by log measure so the
    // zoom-in and zoom-out branches are comparably likely
    const double lo1 = 2.83, hi1 = 4.0, lo2 = 0.25, hi2 = 0.354;
    const double m1 = std::log(hi1 / lo1), m2 = std::log(hi2 / lo2);
    double lo = lo1, hi = hi1;
    if (rng.uniform() >= m1 / (m1 + m2)) { lo = lo2; hi = hi2; }
    const double factor = std::exp(rng.uniform(std::log(lo), std::log(hi)));
    return scale_pair(image, factor);
}

double eval_pair_pck(const GiftModel& model, const TrainingPair& pair, int grid_n,
                     double threshold_px, int workers) {
    const std::int64_t WA = pair.image_a.dim(2), HA = pair.image_a.dim(1);
    const std::int64_t WB = pair.image_b.dim(2), HB = pair.image_b.dim(1);

    std::vector<std::pair<double, double>> queries, refs;
    for (const auto& [x, y] : grid_keypoints(WA, HA, grid_n)) {
        const auto [bx, by] = pair.homography.apply(x, y);
        if (bx < 0.0 || by < 0.0 || bx > static_cast<double>(WB - 1) ||
            by > static_cast<double>(HB - 1))
            continue;
        queries.emplace_back(x, y);
        refs.emplace_back(bx, by);
    }
    if (queries.empty()) throw shape_error("eval_pair_pck: no keypoints land inside the pair overlap");

    auto desc_a = to_records(compute_descriptors(model, pair.image_a, queries, workers));
    auto desc_b = to_records(compute_descriptors(model, pair.image_b, refs, workers));
    MatchSet ms = match_nn(desc_a, desc_b);
    ms.threshold_px = threshold_px;
    return pck(ms, desc_b, refs);
}

std::vector<SweepPoint> sweep(const GiftModel& model, const std::vector<Tensor>& images,
                              ExtremeMode axis, int steps, int grid_n, int workers) {
    if (steps < 1) throw shape_error("sweep: steps must be positive");
    if (images.empty()) throw shape_error("sweep: image set is empty");
    std::vector<SweepPoint> curve;
    for (int k = 0; k < steps; ++k) {
        const double t = steps == 1 ? 0.0 : static_cast<double>(k) / (steps - 1);
        double magnitude;
        double acc = 0.0;
        if (axis == ExtremeMode::rotation) {
            magnitude = t * 180.0;
            for (const auto& img : images)
                acc += eval_pair_pck(model, rotation_pair(img, magnitude * std::numbers::pi / 180.0),
                                     grid_n, 5.0, workers);
        } else {
            magnitude = std::pow(2.0, 2.0 * t); // factor 1 .. 4
            for (const auto& img : images)
                acc += eval_pair_pck(model, scale_pair(img, magnitude), grid_n, 5.0, workers);
        }
        curve.push_back({magnitude, acc / static_cast<double>(images.size())});
    }
    return curve;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& curve) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << "magnitude,pck\n";
    for (const auto& p : curve) os << fmt9(p.magnitude) << "," << fmt9(p.pck) << "\n";
    if (!os) throw io_error("write failed for " + path);
}

void write_sweep_plot(const std::string& path, const std::vector<SweepPoint>& curve) {
    if (curve.empty()) throw shape_error("write_sweep_plot: empty curve");
    const std::int64_t W = 480, H = 320, ml = 48, mb = 32, mt = 16, mr = 16;
    Tensor img = Tensor::full({3, H, W}, 1.0);
    auto put = [&](std::int64_t x, std::int64_t y, double r, double g, double b) {
        if (x < 0 || y < 0 || x >= W || y >= H) return;
        img.data()[y * W + x] = r;
        img.data()[H * W + y * W + x] = g;
        img.data()[2 * H * W + y * W + x] = b;
    };
    auto line = [&](double x0, double y0, double x1, double y1, double r, double g, double b) {
        const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
        const int n = std::max(1, static_cast<int>(std::ceil(len)));
        for (int i = 0; i <= n; ++i) {
            const double t = static_cast<double>(i) / n;
            put(static_cast<std::int64_t>(std::lround(x0 + (x1 - x0) * t)),
                static_cast<std::int64_t>(std::lround(y0 + (y1 - y0) * t)), r, g, b);
        }
    };
    // axes
    line(ml, H - mb, W - mr, H - mb, 0, 0, 0);
    line(ml, mt, ml, H - mb, 0, 0, 0);

    double mlo = curve.front().magnitude, mhi = curve.back().magnitude;
    if (mhi <= mlo) mhi = mlo + 1.0;
    auto px = [&](double m) {
        return ml + (m - mlo) / (mhi - mlo) * static_cast<double>(W - ml - mr);
    };
    auto py = [&](double p) {
        return (H - mb) - std::clamp(p, 0.0, 1.0) * static_cast<double>(H - mb - mt);
    };
    for (std::size_t i = 1; i < curve.size(); ++i)
        line(px(curve[i - 1].magnitude), py(curve[i - 1].pck), px(curve[i].magnitude),
             py(curve[i].pck), 0.8, 0.1, 0.1);
    for (const auto& p : curve)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
                put(static_cast<std::int64_t>(std::lround(px(p.magnitude))) + dx,
                    static_cast<std::int64_t>(std::lround(py(p.pck))) + dy, 0.1, 0.1, 0.7);
    save_image(path, img);
}

std::vector<std::pair<double, double>> read_keypoints_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    std::vector<std::pair<double, double>> pts;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.find_first_not_of("xy, \r") == std::string::npos) continue; // header
        std::istringstream ss(line);
        double x, y;
        char comma;
        if (!(ss >> x >> comma >> y) || comma != ',')
            throw format_error(path + ":" + std::to_string(lineno) + ": expected \"x,y\"");
        pts.emplace_back(x, y);
    }
    if (pts.empty()) throw format_error(path + ": no keypoints");
    return pts;
}

void write_keypoints_csv(const std::string& path, const std::vector<std::pair<double, double>>& pts) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << "x,y\n";
    for (const auto& [x, y] : pts) os << fmt9(x) << "," << fmt9(y) << "\n";
    if (!os) throw io_error("write failed for " + path);
}

void write_match_csv(const std::string& path, const std::vector<DescriptorRecord>& queries,
                     const std::vector<DescriptorRecord>& references, const MatchSet& matches,
                     const std::vector<std::pair<double, double>>* gt) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << "qx,qy,rx,ry,distance,correct\n";
    for (const auto& m : matches.matches) {
        const auto& q = queries.at(m.query);
        const auto& r = references.at(m.reference);
        os << fmt9(q.x) << "," << fmt9(q.y) << "," << fmt9(r.x) << "," << fmt9(r.y) << ","
           << fmt9(m.distance) << ",";
        if (gt) {
            const double dx = r.x - (*gt)[m.query].first, dy = r.y - (*gt)[m.query].second;
            os << (std::sqrt(dx * dx + dy * dy) <= matches.threshold_px ? 1 : 0);
        }
        os << "\n";
    }
    if (!os) throw io_error("write failed for " + path);
}

void write_pck_json(const std::string& path, const std::vector<std::pair<std::string, double>>& per_pair) {
    if (per_pair.empty()) throw shape_error("write_pck_json: no pairs");
    json per = json::array();
    double mean = 0.0;
    for (const auto& [name, v] : per_pair) {
        per.push_back({{"name", name}, {"pck", v}});
        mean += v;
    }
    json doc = {{"pairs", per_pair.size()},
                {"mean_pck", mean / static_cast<double>(per_pair.size())},
                {"per_pair", per}};
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << doc.dump(2) << "\n";
    if (!os) throw io_error("write failed for " + path);
}

Homography read_homography_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    json doc;
    try {
        is >> doc;
    } catch (const json::parse_error& e) {
        throw format_error(path + ": invalid JSON (" + e.what() + ")");
    }
    json arr;
    if (doc.is_array()) arr = doc;
    else if (doc.is_object() && doc.contains("homography")) arr = doc["homography"];
    else throw format_error(path + ": expected an array of 9 values or {\"homography\": [...]}");
    if (!arr.is_array() || arr.size() != 9)
        throw format_error(path + ": homography must hold exactly 9 values");
    Homography h;
    for (std::size_t i = 0; i < 9; ++i) {
        if (!arr[i].is_number()) throw format_error(path + ": homography entries must be numbers");
        h.m[i] = arr[i].get<double>();
    }
    if (h.m[8] == 0.0) throw format_error(path + ": homography has zero scale entry");
    for (auto& v : h.m) v /= h.m[8];
    if (std::abs(h.det()) < 1e-10) throw format_error(path + ": homography is singular");
    return h;
}

void write_homography_json(const std::string& path, const Homography& h) {
    json doc = {{"homography", h.m}};
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << doc.dump(2) << "\n";
    if (!os) throw io_error("write failed for " + path);
}

Tensor eval_resize(const Tensor& image, double* scale_x, double* scale_y) {
    const std::int64_t H = image.dim(1), W = image.dim(2);
    if (W <= 480 && H <= 360) {
        if (scale_x) *scale_x = 1.0;
        if (scale_y) *scale_y = 1.0;
        return image;
    }
    if (scale_x) *scale_x = 480.0 / static_cast<double>(W);
    if (scale_y) *scale_y = 360.0 / static_cast<double>(H);
    return resize_bilinear(image, 360, 480);
}

std::vector<DescriptorRecord> to_records(const std::vector<Descriptor>& descs) {
    std::vector<DescriptorRecord> out(descs.size());
    for (std::size_t i = 0; i < descs.size(); ++i) {
        out[i].x = descs[i].x;
        out[i].y = descs[i].y;
        out[i].values.assign(descs[i].values.data(),
                             descs[i].values.data() + descs[i].values.numel());
    }
    return out;
}

} // namespace gift
