#pragma once
// Synthetic multi-class benchmark with class-dependent score scales, and a
// memory-bank nearest-neighbour scorer used as the base detector.
//
// Randomness: every stream is a std::mt19937_64 seeded through splitmix64.
// Class parameters use mix(seed, 0); image i uses mix(seed, i + 1); the
// coreset draw for training image i uses mix(coreset_seed, i + 1).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cada/manifest.hpp"
#include "cada/tensor.hpp"

namespace cada {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

enum class SpreadSampling {
    LogSpaced,   // k spreads evenly spaced in log between the range ends, order shuffled
    LogUniform,  // independent log-uniform draws
};

struct SynthConfig {
    int k_classes = 8;
    std::size_t grid_h = 16, grid_w = 16;
    std::size_t feat_dim = 8;
    double center_radius = 10.0;
    double spread_min = 0.25, spread_max = 4.0;
    SpreadSampling spread_sampling = SpreadSampling::LogSpaced;
    double anomaly_rel_magnitude = 3.0;  // offset norm = a * s_c
    double area_min = 0.05, area_max = 0.2;
    std::size_t train_normal = 100, test_normal = 20, test_anomalous = 20;
    // Anomalous images slipped into the train split, labelled normal, per class.
    std::size_t train_noise = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ClassParams {
    std::vector<double> center;
    double spread = 1.0;
};

// Per-class centers (on the sphere of center_radius) and spreads.
std::vector<ClassParams> sample_class_params(const SynthConfig& cfg);

struct SynthImage {
    Tensor features;            // [feat_dim, H, W]
    std::optional<Tensor> mask; // [H, W], anomalous images only
};

// One image of class `cls`; pure function of (cfg, class params, index).
SynthImage synth_image(const SynthConfig& cfg, const ClassParams& cls, std::uint64_t image_index, bool anomalous);

// Writes features/ and masks/ tensors plus manifest.json under out_dir.
DatasetManifest generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

struct Coreset {
    Tensor points;                     // [M, feat_dim]
    std::vector<std::size_t> source;   // training-image index of each point
    std::map<int, std::size_t> class_counts;  // diagnostic only
};

// Samples m_per_image locations per training image, without replacement.
Coreset fit_coreset(std::span<const Tensor> train_features, std::size_t m_per_image, std::uint64_t seed,
                    std::span<const int> class_ids = {});

// Per-location Euclidean distance to the nearest coreset point. Points drawn
// from training image `exclude_source` are skipped, so training images can
// be scored without matching themselves.
Tensor score_knn(const Tensor& features, const Coreset& coreset, std::optional<std::size_t> exclude_source = {});

void write_coreset(const std::filesystem::path& dir, const Coreset& c);
Coreset read_coreset(const std::filesystem::path& dir);

}  // namespace cada
