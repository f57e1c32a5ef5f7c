#include "gift/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "gift/errors.hpp"
#include "gift/util.hpp"

namespace gift {

namespace {

/// Smooth value noise: random lattice values bilinearly interpolated.
void add_value_noise(double* plane, std::int64_t n, Rng& rng, double cell, double amp) {
    const std::int64_t gn = static_cast<std::int64_t>(std::ceil(static_cast<double>(n) / cell)) + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gn * gn));
    for (auto& v : lattice) v = rng.uniform();
    for (std::int64_t y = 0; y < n; ++y)
        for (std::int64_t x = 0; x < n; ++x) {
            const double fx = static_cast<double>(x) / cell, fy = static_cast<double>(y) / cell;
            const std::int64_t x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
            const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
            const double* row0 = lattice.data() + y0 * gn + x0;
            const double* row1 = row0 + gn;
            plane[y * n + x] += amp * ((1 - ty) * ((1 - tx) * row0[0] + tx * row0[1]) +
                                       ty * ((1 - tx) * row1[0] + tx * row1[1]));
        }
}

} // namespace

Tensor procedural_texture(std::uint64_t index, std::int64_t size) {
    Rng rng(0x9e3779b97f4a7c15ULL ^ (index * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL));
    const std::int64_t n = size;
    std::vector<double> base(static_cast<std::size_t>(n * n), 0.0);

    add_value_noise(base.data(), n, rng, static_cast<double>(n) / 4.0, 0.5);
    add_value_noise(base.data(), n, rng, static_cast<double>(n) / 8.0, 0.3);
    add_value_noise(base.data(), n, rng, static_cast<double>(n) / 16.0, 0.2);

    // a few blobs break any accidental symmetry
    const int blobs = 3 + static_cast<int>(rng.uniform_int(0, 3));
    for (int i = 0; i < blobs; ++i) {
        const double bx = rng.uniform(0.15, 0.85) * static_cast<double>(n);
        const double by = rng.uniform(0.15, 0.85) * static_cast<double>(n);
        const double sg = rng.uniform(0.04, 0.12) * static_cast<double>(n);
        const double amp = rng.uniform(-0.45, 0.45);
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) {
                const double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
                base[static_cast<std::size_t>(y * n + x)] +=
                    amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sg * sg));
            }
    }

    // rotated checkerboard blended in lightly; never dominant, so the texture
    // keeps no 180-degree symmetry
    if (rng.uniform() < 0.75) {
        const double period = rng.uniform(6.0, 14.0);
        const double th = rng.uniform(0.0, 3.14159);
        const double cw = rng.uniform(0.1, 0.3);
        const double ct = std::cos(th), st = std::sin(th);
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x) {
                const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / period;
                const double v = (-static_cast<double>(x) * st + static_cast<double>(y) * ct) / period;
                const auto parity = (static_cast<std::int64_t>(std::floor(u)) +
                                     static_cast<std::int64_t>(std::floor(v))) & 1;
                base[static_cast<std::size_t>(y * n + x)] += parity ? cw : 0.0;
            }
    }

    double lo = base[0], hi = base[0];
    for (double v : base) { lo = std::min(lo, v); hi = std::max(hi, v); }
    const double span = hi > lo ? hi - lo : 1.0;

    Tensor out = Tensor::zeros({3, n, n});
    const double tint[3] = {rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0)};
    for (int c = 0; c < 3; ++c) {
        double* p = out.data() + c * n * n;
        for (std::int64_t i = 0; i < n * n; ++i)
            p[i] = (base[static_cast<std::size_t>(i)] - lo) / span * tint[c];
    }
    return out;
}

TrainingPair make_training_pair(const Tensor& source, Rng& rng, double difficulty, int k) {
    const auto& s = source.shape();
    if (s.size() != 3 || s[1] < 64 || s[2] < 64)
        throw shape_error("make_training_pair: source must be [C,H,W] with H,W >= 64");
    const std::int64_t H = s[1], W = s[2];
    if (k < 1) throw shape_error("make_training_pair: k must be positive");

    double diff = difficulty;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const Homography h = random_homography(rng, W, H, diff);
        HomographyWarp warped = warp_homography(source, h);
        const std::int64_t HB = warped.image.dim(1), WB = warped.image.dim(2);

        TrainingPair pair;
        pair.image_a = source;
        pair.homography = warped.point_map;
        const int max_tries = 200 * k;
        int tries = 0;
        while (static_cast<int>(pair.points_a.size()) < k && tries < max_tries) {
            ++tries;
            const double xa = rng.uniform(8.0, static_cast<double>(W - 9));
            const double ya = rng.uniform(8.0, static_cast<double>(H - 9));
            const auto [xb, yb] = warped.point_map.apply(xa, ya);
            if (xb < 8.0 || yb < 8.0 || xb > static_cast<double>(WB - 9) ||
                yb > static_cast<double>(HB - 9))
                continue;
            pair.points_a.emplace_back(xa, ya);
            pair.points_b.emplace_back(xb, yb);
        }
        if (static_cast<int>(pair.points_a.size()) == k) {
            pair.image_b = std::move(warped.image);
            return pair;
        }
        diff *= 0.7; // overlap too small, try a gentler warp
    }
    throw gift::error("make_training_pair: could not find enough overlap after 10 attempts");
}

int mine_hard_negative(const std::vector<double>& anchor,
                       const std::vector<DescriptorRecord>& candidates, double true_x,
                       double true_y, double exclusion_px) {
    int best = -1;
    double best_d2 = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        const double dx = c.x - true_x, dy = c.y - true_y;
        if (std::sqrt(dx * dx + dy * dy) < exclusion_px) continue;
        if (c.values.size() != anchor.size())
            throw shape_error("mine_hard_negative: descriptor dimensions differ");
        double d2 = 0.0;
        for (std::size_t j = 0; j < anchor.size(); ++j) {
            const double d = anchor[j] - c.values[j];
            d2 += d * d;
        }
        if (best < 0 || d2 < best_d2) {
            best = static_cast<int>(i);
            best_d2 = d2;
        }
    }
    return best;
}

Tensor triplet_loss(const std::vector<Tensor>& anchors, const std::vector<Tensor>& positives,
                    const std::vector<Tensor>& negatives, double margin) {
    if (anchors.empty() || anchors.size() != positives.size() || anchors.size() != negatives.size())
        throw shape_error("triplet_loss: batch is empty or ragged");
    std::vector<Tensor> rows;
    rows.reserve(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        Tensor d_ap = l2_distance(anchors[i], positives[i]);
        Tensor d_an = l2_distance(anchors[i], negatives[i]);
        rows.push_back(relu(add_scalar(sub(d_ap, d_an), margin)));
    }
    Tensor stacked = stack_rows(rows); // [R,1]
    return scale(sum_all(stacked), 1.0 / static_cast<double>(rows.size()));
}

namespace {

struct AdamState {
    std::vector<double> m, v;
};

void adam_step(Tensor& param, AdamState& st, double lr, int t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double* g = param.grad_data();
    if (!g) return; // no gradient reached this tensor
    double* w = param.data();
    const std::int64_t n = param.numel();
    if (st.m.empty()) {
        st.m.assign(static_cast<std::size_t>(n), 0.0);
        st.v.assign(static_cast<std::size_t>(n), 0.0);
    }
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::int64_t i = 0; i < n; ++i) {
        st.m[static_cast<std::size_t>(i)] = b1 * st.m[static_cast<std::size_t>(i)] + (1.0 - b1) * g[i];
        st.v[static_cast<std::size_t>(i)] =
            b2 * st.v[static_cast<std::size_t>(i)] + (1.0 - b2) * g[i] * g[i];
        const double mh = st.m[static_cast<std::size_t>(i)] / c1;
        const double vh = st.v[static_cast<std::size_t>(i)] / c2;
        w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
}

} // namespace

TrainResult train(const std::vector<Tensor>& corpus, const TrainConfig& cfg,
                  void (*on_step)(int, double)) {
    if (corpus.empty()) throw shape_error("train: corpus is empty");
    Rng master(cfg.seed);
    Rng init_rng = master.fork(1);
    Rng data_rng = master.fork(2);

    GiftModel model = GiftModel::init(init_rng, cfg.depth,
                                      GroupGrid::make(cfg.grid_ns, cfg.grid_nr,
                                                      cfg.unit_scale_factor));
    NamedTensors params = model.named_parameters();
    std::vector<AdamState> adam(params.size());

    TrainResult result{std::move(model), {}};

    for (int step = 0; step < cfg.steps; ++step) {
        const std::size_t img_idx = static_cast<std::size_t>(
            data_rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1));
        TrainingPair pair = make_training_pair(corpus[img_idx], data_rng, cfg.difficulty,
                                               cfg.batch_points);

        auto feats_a = extract_group_features(pair.image_a, pair.points_a, result.model.grid,
                                              result.model.backbone, Tensor(), cfg.workers);
        auto feats_b = extract_group_features(pair.image_b, pair.points_b, result.model.grid,
                                              result.model.backbone, Tensor(), cfg.workers);

        std::vector<Descriptor> desc_a(feats_a.size()), desc_b(feats_b.size());
        parallel_for(static_cast<std::int64_t>(feats_a.size()), cfg.workers, [&](std::int64_t i) {
            desc_a[static_cast<std::size_t>(i)] =
                descriptor_forward(result.model, feats_a[static_cast<std::size_t>(i)]);
            desc_b[static_cast<std::size_t>(i)] =
                descriptor_forward(result.model, feats_b[static_cast<std::size_t>(i)]);
        });

        std::vector<DescriptorRecord> candidates(desc_b.size());
        for (std::size_t i = 0; i < desc_b.size(); ++i) {
            candidates[i].x = desc_b[i].x;
            candidates[i].y = desc_b[i].y;
            const double* v = desc_b[i].values.data();
            candidates[i].values.assign(v, v + desc_b[i].values.numel());
        }

        std::vector<Tensor> anchors, positives, negatives;
        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < desc_a.size(); ++i) {
            std::vector<double> av(desc_a[i].values.data(),
                                   desc_a[i].values.data() + desc_a[i].values.numel());
            const int neg = mine_hard_negative(av, candidates, pair.points_b[i].first,
                                               pair.points_b[i].second);
            if (neg < 0) continue;
            kept.push_back(i);
            anchors.push_back(desc_a[i].values);
            positives.push_back(desc_b[i].values);
            negatives.push_back(desc_b[static_cast<std::size_t>(neg)].values);
        }
        if (anchors.empty())
            throw gift::error("train: no eligible triplets in step " + std::to_string(step));

        Tensor loss = triplet_loss(anchors, positives, negatives, cfg.margin);
        const double loss_v = loss.scalar();
        if (!std::isfinite(loss_v)) {
            std::vector<DescriptorRecord> dump_a(anchors.size());
            for (std::size_t i = 0; i < anchors.size(); ++i) {
                dump_a[i].x = desc_a[kept[i]].x;
                dump_a[i].y = desc_a[kept[i]].y;
                dump_a[i].values.assign(anchors[i].data(), anchors[i].data() + anchors[i].numel());
            }
            write_descriptor_batch("gift_diverged_anchors.bin", dump_a);
            write_descriptor_batch("gift_diverged_candidates.bin", candidates);
            throw gift::error("train: non-finite loss at step " + std::to_string(step) +
                              "; offending batch dumped to gift_diverged_*.bin");
        }

        for (auto& [name, t] : params) t.zero_grad();
        backward(loss);
        for (std::size_t i = 0; i < params.size(); ++i)
            adam_step(params[i].second, adam[i], cfg.lr, step + 1);

        result.loss_log.emplace_back(step, loss_v);
        if (on_step) on_step(step, loss_v);
    }
    return result;
}

void write_loss_csv(const std::string& path, const std::vector<std::pair<int, double>>& log) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << "step,loss\n";
    for (const auto& [step, loss] : log) os << step << "," << fmt9(loss) << "\n";
    if (!os) throw io_error("write failed for " + path);
}

TrainConfig parse_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path);
    TrainConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw format_error(path + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        try {
            if (key == "steps") cfg.steps = std::stoi(val);
            else if (key == "batch") cfg.batch_points = std::stoi(val);
            else if (key == "lr") cfg.lr = std::stod(val);
            else if (key == "seed") cfg.seed = std::stoull(val);
            else if (key == "depth") cfg.depth = std::stoi(val);
            else if (key == "grid_ns") cfg.grid_ns = std::stoi(val);
            else if (key == "grid_nr") cfg.grid_nr = std::stoi(val);
            else if (key == "unit_scale_factor") cfg.unit_scale_factor = std::stod(val);
            else if (key == "difficulty") cfg.difficulty = std::stod(val);
            else if (key == "margin") cfg.margin = std::stod(val);
            else if (key == "workers") cfg.workers = std::stoi(val);
            else throw format_error(path + ":" + std::to_string(lineno) + ": unknown key \"" + key + "\"");
        } catch (const std::invalid_argument&) {
            throw format_error(path + ":" + std::to_string(lineno) + ": bad value for " + key);
        } catch (const std::out_of_range&) {
            throw format_error(path + ":" + std::to_string(lineno) + ": value out of range for " + key);
        }
    }
    return cfg;
}

void write_train_config(const std::string& path, const TrainConfig& cfg) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("cannot open " + path + " for writing");
    os << "steps=" << cfg.steps << "\nbatch=" << cfg.batch_points << "\nlr=" << fmt9(cfg.lr)
       << "\nseed=" << cfg.seed << "\ndepth=" << cfg.depth << "\ngrid_ns=" << cfg.grid_ns
       << "\ngrid_nr=" << cfg.grid_nr << "\nunit_scale_factor=" << fmt9(cfg.unit_scale_factor)
       << "\ndifficulty=" << fmt9(cfg.difficulty) << "\nmargin=" << fmt9(cfg.margin)
       << "\nworkers=" << cfg.workers << "\n";
    if (!os) throw io_error("write failed for " + path);
}

} // namespace gift
