#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gift/errors.hpp"
#include "gift/image.hpp"
#include "gift/matcher.hpp"
#include "gift/selftest.hpp"
#include "gift/util.hpp"

namespace {

std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value) {
    if (flag_given) return flag_value;
    if (const char* env = std::getenv("GIFT_SEED")) return std::strtoull(env, nullptr, 10);
    return 7;
}

std::string basename_of(const std::string& path) {
    const auto pos = path.find_last_of("/\\");
    return pos == std::string::npos ? path : path.substr(pos + 1);
}

int cmd_selftest() {
    const auto suites = gift::run_all_suites();
    std::string failed;
    for (const auto& s : suites) {
        std::printf("%-24s max err %-14s %s  (%s)\n", s.name.c_str(),
                    gift::fmt9(s.max_err).c_str(), s.pass ? "PASS" : "FAIL", s.detail.c_str());
        if (!s.pass) failed += (failed.empty() ? "" : ", ") + s.name;
    }
    if (!failed.empty()) {
        std::printf("selftest FAILED: %s\n", failed.c_str());
        return 1;
    }
    std::printf("selftest passed: %zu/%zu suites\n", suites.size(), suites.size());
    return 0;
}

struct ExtractArgs {
    std::string image, keypoints, checkpoint, out;
    int grid = 0;
    int workers = 1;
};

int cmd_extract(const ExtractArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    gift::GiftModel model = gift::GiftModel::load(a.checkpoint);
    gift::Tensor image = gift::load_image(a.image);
    std::vector<std::pair<double, double>> pts;
    if (!a.keypoints.empty())
        pts = gift::read_keypoints_csv(a.keypoints);
    else
        pts = gift::grid_keypoints(image.dim(2), image.dim(1), a.grid);
    const auto descs = gift::compute_descriptors(model, image, pts, a.workers);
    gift::write_descriptor_batch(a.out, gift::to_records(descs));
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("extracted %zu descriptors (dim %d) in %s s\n", descs.size(),
                gift::kDescriptorDim, gift::fmt9(secs).c_str());
    return 0;
}

struct MatchArgs {
    std::string a, b, gt, out, pck_out;
    double threshold = 5.0;
};

int cmd_match(const MatchArgs& m) {
    std::uint32_t dim_a = 0, dim_b = 0;
    const auto qa = gift::read_descriptor_batch(m.a, &dim_a);
    const auto qb = gift::read_descriptor_batch(m.b, &dim_b);
    if (dim_a != dim_b)
        throw gift::shape_error("descriptor dims differ: " + m.a + " has " +
                                std::to_string(dim_a) + ", " + m.b + " has " +
                                std::to_string(dim_b));
    gift::MatchSet ms = gift::match_nn(qa, qb);
    ms.threshold_px = m.threshold;
    if (!m.gt.empty()) {
        const gift::Homography h = gift::read_homography_json(m.gt);
        std::vector<std::pair<double, double>> gt;
        gt.reserve(qa.size());
        for (const auto& q : qa) gt.push_back(h.apply(q.x, q.y));
        gift::write_match_csv(m.out, qa, qb, ms, &gt);
        const double p = gift::pck(ms, qb, gt);
        const std::string pck_path = m.pck_out.empty() ? m.out + ".pck.json" : m.pck_out;
        gift::write_pck_json(pck_path,
                             {{basename_of(m.a) + "|" + basename_of(m.b), p}});
        std::printf("matched %zu queries, pck %s\n", qa.size(), gift::fmt9(p).c_str());
    } else {
        gift::write_match_csv(m.out, qa, qb, ms, nullptr);
        std::printf("matched %zu queries\n", qa.size());
    }
    return 0;
}

void print_step(int step, double loss) {
    if (step % 25 == 0 || step == 1)
        std::printf("step %d loss %s\n", step, gift::fmt9(loss).c_str());
}

struct TrainArgs {
    gift::TrainConfig cfg;
    std::string out, loss_csv;
    int textures = 16;
};

int cmd_train(const TrainArgs& t) {
    std::vector<gift::Tensor> corpus;
    corpus.reserve(static_cast<std::size_t>(t.textures));
    for (int i = 0; i < t.textures; ++i)
        corpus.push_back(gift::procedural_texture(static_cast<std::uint64_t>(i)));
    const gift::TrainResult res = gift::train(corpus, t.cfg, print_step);
    res.model.save(t.out);
    if (!t.loss_csv.empty()) gift::write_loss_csv(t.loss_csv, res.loss_log);
    const double final_loss = res.loss_log.empty() ? 0.0 : res.loss_log.back().second;
    std::printf("trained %d steps, final loss %s, checkpoint %s\n", t.cfg.steps,
                gift::fmt9(final_loss).c_str(), t.out.c_str());
    return 0;
}

struct EvalArgs {
    std::string image_a, image_b, homography, image, mode, checkpoint, out;
    int grid_n = 8;
    double threshold = 5.0;
    int workers = 1;
    std::uint64_t seed = 7;
};

int cmd_eval(const EvalArgs& e) {
    const gift::GiftModel model = gift::GiftModel::load(e.checkpoint);
    gift::TrainingPair pair;
    std::string label;
    if (e.mode.empty()) {
        gift::Tensor a = gift::load_image(e.image_a);
        gift::Tensor b = gift::load_image(e.image_b);
        gift::Homography h = gift::read_homography_json(e.homography);
        double sxa = 1, sya = 1, sxb = 1, syb = 1;
        a = gift::eval_resize(a, &sxa, &sya);
        b = gift::eval_resize(b, &sxb, &syb);
        gift::Homography scale_a, scale_b;
        scale_a.m = {sxa, 0, 0, 0, sya, 0, 0, 0, 1};
        scale_b.m = {sxb, 0, 0, 0, syb, 0, 0, 0, 1};
        pair.image_a = a;
        pair.image_b = b;
        pair.homography = scale_a.inverted().then(h).then(scale_b);
        label = basename_of(e.image_a) + "|" + basename_of(e.image_b);
    } else {
        gift::Tensor src = gift::load_image(e.image);
        double sx = 1, sy = 1;
        src = gift::eval_resize(src, &sx, &sy);
        gift::Rng rng(e.seed);
        const auto mode = e.mode == "er" ? gift::ExtremeMode::rotation : gift::ExtremeMode::scale;
        pair = gift::make_extreme_pair(src, mode, rng);
        label = e.mode + ":" + basename_of(e.image);
    }
    const double p = gift::eval_pair_pck(model, pair, e.grid_n, e.threshold, e.workers);
    gift::write_pck_json(e.out, {{label, p}});
    std::printf("pck %s\n", gift::fmt9(p).c_str());
    return 0;
}

struct SweepArgs {
    std::vector<std::string> images;
    std::string checkpoint, axis = "rotation", out, plot;
    int textures = 8;
    int steps = 10;
    int grid_n = 8;
    int workers = 1;
};

int cmd_sweep(const SweepArgs& s) {
    const gift::GiftModel model = gift::GiftModel::load(s.checkpoint);
    std::vector<gift::Tensor> imgs;
    if (!s.images.empty()) {
        for (const auto& path : s.images) {
            double sx = 1, sy = 1;
            imgs.push_back(gift::eval_resize(gift::load_image(path), &sx, &sy));
        }
    } else {
        // held-out procedural textures, disjoint from the default training set
        for (int i = 0; i < s.textures; ++i)
            imgs.push_back(gift::procedural_texture(static_cast<std::uint64_t>(16 + i)));
    }
    const auto axis = s.axis == "scale" ? gift::ExtremeMode::scale : gift::ExtremeMode::rotation;
    const auto curve = gift::sweep(model, imgs, axis, s.steps, s.grid_n, s.workers);
    gift::write_sweep_csv(s.out, curve);
    if (!s.plot.empty()) gift::write_sweep_plot(s.plot, curve);
    for (const auto& pt : curve)
        std::printf("%s %s\n", gift::fmt9(pt.magnitude).c_str(), gift::fmt9(pt.pck).c_str());
    std::printf("wrote %zu sweep points to %s\n", curve.size(), s.out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"gift: group-invariant feature descriptors"};
    app.require_subcommand(1);

    ExtractArgs ea;
    auto* sc_extract = app.add_subcommand("extract", "compute descriptors at keypoints");
    sc_extract->add_option("--image", ea.image, "input image (png/ppm/pgm)")->required();
    auto* opt_kp = sc_extract->add_option("--keypoints", ea.keypoints, "keypoints csv (x,y rows)");
    auto* opt_grid = sc_extract->add_option("--grid", ea.grid, "use an NxN uniform keypoint grid");
    opt_kp->excludes(opt_grid);
    opt_grid->excludes(opt_kp);
    sc_extract->add_option("--checkpoint", ea.checkpoint, "model checkpoint")->required();
    sc_extract->add_option("--out", ea.out, "output descriptor batch")->required();
    sc_extract->add_option("--workers", ea.workers, "parallel workers");

    MatchArgs ma;
    auto* sc_match = app.add_subcommand("match", "nearest-neighbor descriptor matching");
    sc_match->add_option("--a", ma.a, "query descriptor batch")->required();
    sc_match->add_option("--b", ma.b, "reference descriptor batch")->required();
    sc_match->add_option("--gt", ma.gt, "ground-truth homography json (enables PCK)");
    sc_match->add_option("--out", ma.out, "output match csv")->required();
    sc_match->add_option("--pck-out", ma.pck_out, "PCK json path (default <out>.pck.json)");
    sc_match->add_option("--threshold", ma.threshold, "correctness radius in pixels");

    TrainArgs ta;
    std::string train_config;
    auto* sc_train = app.add_subcommand("train", "train on procedural textures");
    auto* opt_cfg = sc_train->add_option("--config", train_config, "key=value config file");
    auto* opt_steps = sc_train->add_option("--steps", ta.cfg.steps, "training steps");
    auto* opt_lr = sc_train->add_option("--lr", ta.cfg.lr, "learning rate");
    auto* opt_depth = sc_train->add_option("--depth", ta.cfg.depth, "group CNN depth");
    auto* opt_bp = sc_train->add_option("--batch-points", ta.cfg.batch_points, "correspondences per step");
    auto* opt_ns = sc_train->add_option("--grid-ns", ta.cfg.grid_ns, "scale samples");
    auto* opt_nr = sc_train->add_option("--grid-nr", ta.cfg.grid_nr, "rotation samples");
    auto* opt_diff = sc_train->add_option("--difficulty", ta.cfg.difficulty, "warp difficulty in [0,1]");
    auto* opt_margin = sc_train->add_option("--margin", ta.cfg.margin, "triplet margin");
    auto* opt_workers = sc_train->add_option("--workers", ta.cfg.workers, "parallel workers");
    std::uint64_t train_seed = 7;
    auto* opt_seed = sc_train->add_option("--seed", train_seed, "rng seed (or env GIFT_SEED)");
    sc_train->add_option("--textures", ta.textures, "training texture count");
    sc_train->add_option("--out", ta.out, "output checkpoint")->required();
    sc_train->add_option("--loss-csv", ta.loss_csv, "write per-step loss csv");

    EvalArgs ev;
    auto* sc_eval = app.add_subcommand("eval", "PCK evaluation of an image pair");
    sc_eval->add_option("--image-a", ev.image_a, "first image");
    sc_eval->add_option("--image-b", ev.image_b, "second image");
    sc_eval->add_option("--homography", ev.homography, "pixel map a->b, json");
    sc_eval->add_option("--image", ev.image, "source image for --mode pairs");
    sc_eval->add_option("--mode", ev.mode, "er (extreme rotation) or es (extreme scale)")
        ->check(CLI::IsMember({"er", "es"}));
    sc_eval->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
    sc_eval->add_option("--out", ev.out, "output PCK json")->required();
    sc_eval->add_option("--grid", ev.grid_n, "keypoint grid size");
    sc_eval->add_option("--threshold", ev.threshold, "correctness radius in pixels");
    sc_eval->add_option("--workers", ev.workers, "parallel workers");
    std::uint64_t eval_seed = 7;
    auto* opt_eval_seed = sc_eval->add_option("--seed", eval_seed, "rng seed (or env GIFT_SEED)");

    SweepArgs sa;
    auto* sc_sweep = app.add_subcommand("sweep", "PCK vs transform magnitude curve");
    sc_sweep->add_option("--image", sa.images, "evaluation image (repeatable)");
    sc_sweep->add_option("--textures", sa.textures, "held-out texture count when no images given");
    sc_sweep->add_option("--checkpoint", sa.checkpoint, "model checkpoint")->required();
    sc_sweep->add_option("--axis", sa.axis, "rotation or scale")
        ->check(CLI::IsMember({"rotation", "scale"}));
    sc_sweep->add_option("--steps", sa.steps, "sweep sample count");
    sc_sweep->add_option("--out", sa.out, "output csv")->required();
    sc_sweep->add_option("--plot", sa.plot, "optional plot png");
    sc_sweep->add_option("--grid", sa.grid_n, "keypoint grid size");
    sc_sweep->add_option("--workers", sa.workers, "parallel workers");

    auto* sc_selftest = app.add_subcommand("selftest", "run the property suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }

    try {
        if (sc_selftest->parsed()) return cmd_selftest();
        if (sc_extract->parsed()) {
            if (opt_kp->count() == 0 && opt_grid->count() == 0) {
                std::fprintf(stderr, "error: extract needs --keypoints or --grid\n");
                return 2;
            }
            return cmd_extract(ea);
        }
        if (sc_match->parsed()) return cmd_match(ma);
        if (sc_train->parsed()) {
            gift::TrainConfig cfg;
            if (opt_cfg->count()) cfg = gift::parse_train_config(train_config);
            if (opt_steps->count()) cfg.steps = ta.cfg.steps;
            if (opt_lr->count()) cfg.lr = ta.cfg.lr;
            if (opt_depth->count()) cfg.depth = ta.cfg.depth;
            if (opt_bp->count()) cfg.batch_points = ta.cfg.batch_points;
            if (opt_ns->count()) cfg.grid_ns = ta.cfg.grid_ns;
            if (opt_nr->count()) cfg.grid_nr = ta.cfg.grid_nr;
            if (opt_diff->count()) cfg.difficulty = ta.cfg.difficulty;
            if (opt_margin->count()) cfg.margin = ta.cfg.margin;
            if (opt_workers->count()) cfg.workers = ta.cfg.workers;
            cfg.seed = resolve_seed(opt_seed->count() > 0, train_seed);
            ta.cfg = cfg;
            return cmd_train(ta);
        }
        if (sc_eval->parsed()) {
            const bool pair_mode = !ev.image_a.empty() || !ev.image_b.empty() ||
                                   !ev.homography.empty();
            const bool extreme_mode = !ev.mode.empty() || !ev.image.empty();
            if (pair_mode == extreme_mode ||
                (pair_mode && (ev.image_a.empty() || ev.image_b.empty() || ev.homography.empty())) ||
                (extreme_mode && (ev.mode.empty() || ev.image.empty()))) {
                std::fprintf(stderr,
                             "error: eval needs --image-a/--image-b/--homography or --image/--mode\n");
                return 2;
            }
            ev.seed = resolve_seed(opt_eval_seed->count() > 0, eval_seed);
            return cmd_eval(ev);
        }
        if (sc_sweep->parsed()) return cmd_sweep(sa);
    } catch (const gift::io_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const gift::shape_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const gift::format_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const gift::error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
