#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "gift/errors.hpp"
#include "gift/trainer.hpp"
#include "test_util.hpp"

using namespace gift;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("difficulty zero yields an identity pair") {
    Tensor tex = procedural_texture(3);
    Rng rng(600);
    TrainingPair pair = make_training_pair(tex, rng, 0.0, 32);
    REQUIRE(pair.image_b.shape() == pair.image_a.shape());
    CHECK(max_abs_diff(pair.image_a, pair.image_b) <= 1e-12);
    REQUIRE(pair.points_a.size() == 32);
    REQUIRE(pair.points_b.size() == 32);
    for (std::size_t i = 0; i < pair.points_a.size(); ++i) {
        CHECK(pair.points_b[i].first == pair.points_a[i].first);
        CHECK(pair.points_b[i].second == pair.points_a[i].second);
    }
}

TEST_CASE("correspondences reproject through the recorded homography") {
    Tensor tex = procedural_texture(4);
    Rng rng(601);
    for (int trial = 0; trial < 5; ++trial) {
        TrainingPair pair = make_training_pair(tex, rng, 1.0, 64);
        REQUIRE(pair.points_a.size() == 64);
        for (std::size_t i = 0; i < pair.points_a.size(); ++i) {
            const auto [px, py] = pair.homography.apply(pair.points_a[i].first,
                                                        pair.points_a[i].second);
            CHECK(std::abs(px - pair.points_b[i].first) <= 1e-6);
            CHECK(std::abs(py - pair.points_b[i].second) <= 1e-6);
        }
    }
}

TEST_CASE("sampled correspondences keep an 8 px margin in both images") {
    Tensor tex = procedural_texture(5);
    Rng rng(602);
    TrainingPair pair = make_training_pair(tex, rng, 1.0, 64);
    const double wa = static_cast<double>(pair.image_a.dim(2) - 1);
    const double ha = static_cast<double>(pair.image_a.dim(1) - 1);
    const double wb = static_cast<double>(pair.image_b.dim(2) - 1);
    const double hb = static_cast<double>(pair.image_b.dim(1) - 1);
    for (std::size_t i = 0; i < pair.points_a.size(); ++i) {
        CHECK(pair.points_a[i].first >= 8.0);
        CHECK(pair.points_a[i].first <= wa - 8.0);
        CHECK(pair.points_a[i].second >= 8.0);
        CHECK(pair.points_a[i].second <= ha - 8.0);
        CHECK(pair.points_b[i].first >= 8.0);
        CHECK(pair.points_b[i].first <= wb - 8.0);
        CHECK(pair.points_b[i].second >= 8.0);
        CHECK(pair.points_b[i].second <= hb - 8.0);
    }
}

TEST_CASE("a hundred seeds give a hundred distinct homographies") {
    Tensor tex = procedural_texture(6);
    std::vector<Homography> hs;
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(7000 + static_cast<std::uint64_t>(seed));
        hs.push_back(make_training_pair(tex, rng, 1.0, 8).homography);
    }
    int collisions = 0;
    for (std::size_t i = 0; i < hs.size(); ++i)
        for (std::size_t j = i + 1; j < hs.size(); ++j)
            if (hs[i].m == hs[j].m) ++collisions;
    CHECK(collisions == 0);
}

TEST_CASE("pair generation rejects tiny sources and bad point counts") {
    Rng rng(603);
    CHECK_THROWS_AS((void)make_training_pair(Tensor::zeros({3, 32, 32}), rng, 0.5, 8), shape_error);
    CHECK_THROWS_AS((void)make_training_pair(procedural_texture(1), rng, 0.5, 0), shape_error);
}

TEST_CASE("hard negative mining honors the exclusion radius") {
    std::vector<double> anchor = {1.0, 0.0, 0.0};
    auto rec = [](double x, double y, std::vector<double> v) {
        DescriptorRecord r;
        r.x = x;
        r.y = y;
        r.values = std::move(v);
        return r;
    };

    // only candidate sits on the true match: no eligible row
    std::vector<DescriptorRecord> only_true = {rec(10.0, 10.0, {1.0, 0.0, 0.0})};
    CHECK(mine_hard_negative(anchor, only_true, 10.0, 10.0) == -1);

    // a single far candidate is taken no matter how distant in descriptor space
    std::vector<DescriptorRecord> one_far = {rec(10.0, 10.0, {1.0, 0.0, 0.0}),
                                             rec(40.0, 40.0, {-9.0, 3.0, 7.0})};
    CHECK(mine_hard_negative(anchor, one_far, 10.0, 10.0) == 1);

    // exactly 5 px away counts as eligible, 4.999 px does not
    std::vector<DescriptorRecord> boundary = {rec(13.0, 14.0, {0.9, 0.1, 0.0}),
                                              rec(13.0, 13.999, {1.0, 0.0, 0.0}),
                                              rec(80.0, 80.0, {-1.0, 0.0, 0.0})};
    CHECK(mine_hard_negative(anchor, boundary, 10.0, 10.0) == 0);

    CHECK(mine_hard_negative(anchor, {}, 0.0, 0.0) == -1);
}

TEST_CASE("mining returns the closest eligible candidate (exhaustive oracle)") {
    Rng rng(604);
    const std::size_t dim = 16;
    std::vector<double> anchor(dim);
    for (double& v : anchor) v = rng.uniform(-1.0, 1.0);
    const double tx = 50.0, ty = 50.0;

    std::vector<DescriptorRecord> cands(40);
    for (auto& c : cands) {
        c.x = rng.uniform(0.0, 100.0);
        c.y = rng.uniform(0.0, 100.0);
        c.values.resize(dim);
        for (double& v : c.values) v = rng.uniform(-1.0, 1.0);
    }

    const int got = mine_hard_negative(anchor, cands, tx, ty);
    REQUIRE(got >= 0);
    auto dist2 = [&](const DescriptorRecord& c) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) d2 += (anchor[j] - c.values[j]) * (anchor[j] - c.values[j]);
        return d2;
    };
    auto eligible = [&](const DescriptorRecord& c) {
        return std::hypot(c.x - tx, c.y - ty) >= 5.0;
    };
    REQUIRE(eligible(cands[static_cast<std::size_t>(got)]));
    for (const auto& c : cands)
        if (eligible(c)) CHECK(dist2(cands[static_cast<std::size_t>(got)]) <= dist2(c));
}

TEST_CASE("triplet loss hits the hinge boundary and the degenerate value exactly") {
    Tensor a = Tensor::zeros({4});
    a.set({0}, 1.0);
    Tensor n = Tensor::zeros({4});
    n.set({0}, 1.0);
    n.set({1}, 0.5); // ||a - n|| = 0.5 exactly
    CHECK(triplet_loss({a}, {a}, {n}, 0.5).scalar() == 0.0);

    // all three descriptors identical: loss equals the margin
    CHECK(triplet_loss({a}, {a}, {a}, 0.5).scalar() == 0.5);

    CHECK_THROWS_AS((void)triplet_loss({}, {}, {}, 0.5), shape_error);
    CHECK_THROWS_AS((void)triplet_loss({a}, {a, n}, {n}, 0.5), shape_error);
}

TEST_CASE("triplet loss matches a scalar oracle and finite differences") {
    Rng rng(605);
    const int rows = 3;
    std::vector<Tensor> as, ps, ns;
    for (int i = 0; i < rows; ++i) {
        as.push_back(random_tensor({8}, rng, -1.0, 1.0, true));
        ps.push_back(random_tensor({8}, rng, -1.0, 1.0, true));
        ns.push_back(random_tensor({8}, rng, -1.0, 1.0, true));
    }
    const double margin = 0.4;
    Tensor loss = triplet_loss(as, ps, ns, margin);

    double want = 0.0;
    for (int i = 0; i < rows; ++i) {
        double dap = 0.0, dan = 0.0;
        for (std::int64_t j = 0; j < 8; ++j) {
            dap += (as[static_cast<std::size_t>(i)].at({j}) - ps[static_cast<std::size_t>(i)].at({j})) *
                   (as[static_cast<std::size_t>(i)].at({j}) - ps[static_cast<std::size_t>(i)].at({j}));
            dan += (as[static_cast<std::size_t>(i)].at({j}) - ns[static_cast<std::size_t>(i)].at({j})) *
                   (as[static_cast<std::size_t>(i)].at({j}) - ns[static_cast<std::size_t>(i)].at({j}));
        }
        want += std::max(std::sqrt(dap) - std::sqrt(dan) + margin, 0.0);
    }
    want /= rows;
    CHECK(std::abs(loss.scalar() - want) <= 1e-12);

    std::vector<Tensor> leaves;
    for (auto& t : as) leaves.push_back(t);
    for (auto& t : ps) leaves.push_back(t);
    for (auto& t : ns) leaves.push_back(t);
    auto forward = [&]() { return triplet_loss(as, ps, ns, margin); };
    CHECK(testutil::fd_max_rel_error(leaves, forward, 1e-5, 8) <= 1e-4);
}

TEST_CASE("inactive hinge rows contribute exactly zero gradient") {
    Tensor a = Tensor::zeros({3}, true);
    a.set({0}, 1.0);
    Tensor p = Tensor::zeros({3}, true);
    p.set({0}, 1.0);
    p.set({1}, 0.1); // ||a-p|| = 0.1
    Tensor n = Tensor::zeros({3}, true);
    n.set({0}, -1.0); // ||a-n|| = 2, so 0.1 - 2 + 0.5 < 0
    Tensor loss = triplet_loss({a}, {p}, {n}, 0.5);
    CHECK(loss.scalar() == 0.0);
    backward(loss);
    for (Tensor* t : {&a, &p, &n}) {
        const double* g = t->grad_data();
        REQUIRE(g != nullptr);
        for (int i = 0; i < 3; ++i) CHECK(g[i] == 0.0);
    }
}

TEST_CASE("procedural textures are deterministic, distinct, and in range") {
    Tensor t0 = procedural_texture(0);
    Tensor t0b = procedural_texture(0);
    CHECK(max_abs_diff(t0, t0b) == 0.0);
    CHECK(t0.shape() == std::vector<std::int64_t>{3, 64, 64});
    CHECK(t0.all_finite());

    Tensor t1 = procedural_texture(1);
    CHECK(max_abs_diff(t0, t1) > 1e-3);

    double lo = 1e9, hi = -1e9;
    for (std::int64_t i = 0; i < t0.numel(); ++i) {
        lo = std::min(lo, t0.data()[i]);
        hi = std::max(hi, t0.data()[i]);
    }
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);

    CHECK(procedural_texture(2, 96).shape() == std::vector<std::int64_t>{3, 96, 96});
}

TEST_CASE("zero training steps return the untouched initialization") {
    TrainConfig cfg;
    cfg.steps = 0;
    cfg.seed = 42;
    cfg.depth = 1;
    TrainResult r = train({procedural_texture(0)}, cfg);
    CHECK(r.loss_log.empty());

    Rng master(42);
    Rng init_rng = master.fork(1);
    GiftModel ref = GiftModel::init(init_rng, 1, GroupGrid::make(5, 5, 0.0));
    NamedTensors got = r.model.named_parameters();
    NamedTensors want = ref.named_parameters();
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].first == want[i].first);
        CHECK(max_abs_diff(got[i].second, want[i].second) == 0.0);
    }

    CHECK_THROWS_AS((void)train({}, cfg), shape_error);
}

TEST_CASE("training twice with one seed is bit-identical") {
    std::vector<Tensor> corpus = {procedural_texture(7), procedural_texture(8)};
    TrainConfig cfg;
    cfg.steps = 2;
    cfg.batch_points = 6;
    cfg.depth = 1;
    cfg.grid_ns = 3;
    cfg.grid_nr = 3;
    cfg.seed = 99;
    cfg.difficulty = 0.5;

    TrainResult r1 = train(corpus, cfg);
    TrainResult r2 = train(corpus, cfg);

    REQUIRE(r1.loss_log.size() == 2);
    REQUIRE(r2.loss_log.size() == 2);
    for (std::size_t i = 0; i < r1.loss_log.size(); ++i) {
        CHECK(r1.loss_log[i].first == r2.loss_log[i].first);
        CHECK(r1.loss_log[i].second == r2.loss_log[i].second);
    }

    NamedTensors p1 = r1.model.named_parameters();
    NamedTensors p2 = r2.model.named_parameters();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        CHECK(max_abs_diff(p1[i].second, p2[i].second) == 0.0);

    const std::string f1 = "/tmp/gift_trainer_det_1.bin";
    const std::string f2 = "/tmp/gift_trainer_det_2.bin";
    r1.model.save(f1);
    r2.model.save(f2);
    const std::string b1 = slurp(f1), b2 = slurp(f2);
    std::remove(f1.c_str());
    std::remove(f2.c_str());
    CHECK(!b1.empty());
    CHECK(b1 == b2);

    // the losses have to be live numbers, not a constant stuck at the margin
    CHECK(r1.loss_log[0].second > 0.0);
    CHECK(r1.loss_log[0].second < 2.0);
}

TEST_CASE("train config files round-trip and reject malformed input") {
    TrainConfig cfg;
    cfg.steps = 77;
    cfg.batch_points = 9;
    cfg.lr = 0.002;
    cfg.seed = 1234567;
    cfg.depth = 3;
    cfg.grid_ns = 4;
    cfg.grid_nr = 3;
    cfg.unit_scale_factor = 1.25;
    cfg.difficulty = 0.75;
    cfg.margin = 0.25;
    cfg.workers = 2;
    const std::string path = "/tmp/gift_trainer_cfg_test.txt";
    write_train_config(path, cfg);
    TrainConfig back = parse_train_config(path);
    std::remove(path.c_str());
    CHECK(back.steps == 77);
    CHECK(back.batch_points == 9);
    CHECK(back.lr == doctest::Approx(0.002).epsilon(1e-9));
    CHECK(back.seed == 1234567);
    CHECK(back.depth == 3);
    CHECK(back.grid_ns == 4);
    CHECK(back.grid_nr == 3);
    CHECK(back.unit_scale_factor == doctest::Approx(1.25).epsilon(1e-9));
    CHECK(back.difficulty == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(back.margin == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(back.workers == 2);

    CHECK_THROWS_AS((void)parse_train_config("/tmp/gift_no_such_config.txt"), io_error);

    {
        std::ofstream os("/tmp/gift_trainer_cfg_bad.txt");
        os << "steps 50\n";
    }
    CHECK_THROWS_AS((void)parse_train_config("/tmp/gift_trainer_cfg_bad.txt"), format_error);
    {
        std::ofstream os("/tmp/gift_trainer_cfg_bad.txt");
        os << "steps=abc\n";
    }
    CHECK_THROWS_AS((void)parse_train_config("/tmp/gift_trainer_cfg_bad.txt"), format_error);
    {
        std::ofstream os("/tmp/gift_trainer_cfg_bad.txt");
        os << "bogus=1\n";
    }
    CHECK_THROWS_AS((void)parse_train_config("/tmp/gift_trainer_cfg_bad.txt"), format_error);
    std::remove("/tmp/gift_trainer_cfg_bad.txt");
}

TEST_CASE("loss curves are written as a step,loss csv") {
    const std::string path = "/tmp/gift_trainer_loss_test.csv";
    write_loss_csv(path, {{0, 0.5}, {1, 0.25}});
    const std::string body = slurp(path);
    std::remove(path.c_str());
    CHECK(body.substr(0, 10) == "step,loss\n");
    CHECK(body.find("0,0.5") != std::string::npos);
    CHECK(body.find("1,0.25") != std::string::npos);
    CHECK_THROWS_AS(write_loss_csv("/tmp/no_such_dir_gift/x.csv", {}), io_error);
}
