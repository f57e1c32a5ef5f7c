#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gift/pipeline.hpp"

namespace gift {

struct TrainingPair {
    Tensor image_a, image_b;
    Homography homography; // pixel map a -> b, canvas shift included
    std::vector<std::pair<double, double>> points_a, points_b;
};

/// image_b = homography warp of image_a; K correspondences sampled uniformly
/// with >= 8 px margin in both images. Retries with reduced difficulty when
/// the overlap is too small; throws after 10 attempts.
TrainingPair make_training_pair(const Tensor& source, Rng& rng, double difficulty, int k = 128);

///// Index of the hardest eligible negative: the candidate closest to anchor in
/// descriptor space among those >= exclusion_px from the true match location.
/// Returns -1 when no candidate is eligible (row dropped).
int mine_hard_negative(const std::vector<double>& anchor,
                       const std::vector<DescriptorRecord>& candidates, double true_x,
                       double true_y, double exclusion_px = 5.0);

/// Mean over rows of max(||d_a-d_p|| - ||d_a-d_n|| + margin, 0).
Tensor triplet_loss(const std::vector<Tensor>& anchors, const std::vector<Tensor>& positives,
                    const std::vector<Tensor>& negatives, double margin = 0.5);

struct TrainConfig {
    int steps = 200;
    int batch_points = 32; // correspondences per step
    double lr = 1e-3;
    std::uint64_t seed = 7;
    int depth = 1;
    int grid_ns = 5;
    int grid_nr = 5;
    double unit_scale_factor = 0.0; // 0 = default 2^(1/4)
    double difficulty = 1.0;
    double margin = 0.5;
    int workers = 1;
};

TrainConfig parse_train_config(const std::string& path);
void write_train_config(const std::string& path, const TrainConfig& cfg);

struct TrainResult {
    GiftModel model;
    std::vector<std::pair<int, double>> loss_log; // (step, loss)
};

/// Adam training over the full parameter set. Deterministic for a seed;
/// identical runs produce bit-identical checkpoints and loss logs.
/// on_step, when set, is called after each step with (step, loss).
TrainResult train(const std::vector<Tensor>& corpus, const TrainConfig& cfg,
                  void (*on_step)(int, double) = nullptr);

void write_loss_csv(const std::string& path, const std::vector<std::pair<int, double>>& log);

/// Deterministic 64x64 procedural texture corpus (checkerboard/noise blends,
/// blobs); index selects the variant.
Tensor procedural_texture(std::uint64_t index, std::int64_t size = 64);

} // namespace gift
