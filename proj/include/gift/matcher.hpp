#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gift/pipeline.hpp"
#include "gift/trainer.hpp"

namespace gift {

struct Match {
    std::size_t query = 0;     // index into the query set
    std::size_t reference = 0; // index of the chosen reference descriptor
    double distance = 0.0;
};

struct MatchSet {
    std::vector<Match> matches;      // one per query, query order
    double threshold_px = 5.0;
};

/// Brute-force nearest neighbor in L2; ties broken by lowest reference index.
MatchSet match_nn(const std::vector<DescriptorRecord>& queries,
                  const std::vector<DescriptorRecord>& references);

/// Fraction of matches whose reference point lies within threshold_px of the
/// query's ground-truth location. gt holds one (x, y) per query.
double pck(const MatchSet& matches, const std::vector<DescriptorRecord>& references,
           const std::vector<std::pair<double, double>>& gt);

/// N x N uniformly spaced keypoints: coordinate (i+0.5)*extent/N - 0.5.
std::vector<std::pair<double, double>> grid_keypoints(std::int64_t w, std::int64_t h, int n);

/// Rotation by an arbitrary angle (radians, clockwise) about the image
/// center, canvas grown to the rotated bounding box. Trig values within 1e-9
/// of the 90-degree lattice are snapped so quarter-turns are exact.
TrainingPair rotation_pair(const Tensor& image, double radians);

/// Pure scaling by the given factor about the origin.
TrainingPair scale_pair(const Tensor& image, double factor);

/// ER: uniform angle in [-pi, pi]. ES: uniform in log space over
/// [2.83, 4] u [0.25, 0.354], interval picked by its log measure.
enum class ExtremeMode { rotation, scale };
TrainingPair make_extreme_pair(const Tensor& image, ExtremeMode mode, Rng& rng);

/// Full PCK evaluation of one pair with a known pixel map: descriptors for
/// grid keypoints of image_a are matched against descriptors extracted at the
/// mapped locations in image_b.
double eval_pair_pck(const GiftModel& model, const TrainingPair& pair, int grid_n = 8,
                     double threshold_px = 5.0, int workers = 1);

/// PCK-vs-magnitude curve. axis=rotation sweeps 0..180 degrees; axis=scale
/// sweeps factors 2^0..2^2. Values averaged over the image set.
struct SweepPoint {
    double magnitude = 0.0;
    double pck = 0.0;
};
std::vector<SweepPoint> sweep(const GiftModel& model, const std::vector<Tensor>& images,
                              ExtremeMode axis, int steps, int grid_n = 8, int workers = 1);

void write_sweep_csv(const std::string& path, const std::vector<SweepPoint>& curve);
void write_sweep_plot(const std::string& path, const std::vector<SweepPoint>& curve);

// ---- file plumbing -----------------------------------------------------------

std::vector<std::pair<double, double>> read_keypoints_csv(const std::string& path);
void write_keypoints_csv(const std::string& path, const std::vector<std::pair<double, double>>& pts);

void write_match_csv(const std::string& path, const std::vector<DescriptorRecord>& queries,
                     const std::vector<DescriptorRecord>& references, const MatchSet& matches,
                     const std::vector<std::pair<double, double>>* gt);

void write_pck_json(const std::string& path, const std::vector<std::pair<std::string, double>>& per_pair);

Homography read_homography_json(const std::string& path);
void write_homography_json(const std::string& path, const Homography& h);

/// The evaluation working resolution: images larger than 480x360 are resized
/// to exactly that size; the returned scales map original -> resized pixels.
Tensor eval_resize(const Tensor& image, double* scale_x, double* scale_y);

/// Raw copies of descriptor tensors, for matching and file output.
std::vector<DescriptorRecord> to_records(const std::vector<Descriptor>& descs);

} // namespace gift
