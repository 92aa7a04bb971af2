#pragma once
// Statistics heads on top of per-image feature grids.
//
// The regressor maps a feature tensor [C,H,W] to the normal-score statistics
// of the image's (implicit) class and is trained against each training
// image's own mean/max (or mean/std) pixel score. The classifier predicts a
// class index whose fitted ClassStats are then used for calibration.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cada/align.hpp"
#include "cada/net.hpp"
#include "cada/tensor.hpp"

namespace cada {

enum class HeadMode { Regressor, Classifier };
enum class Activation { Gelu, Relu };

std::string to_string(HeadMode m);
std::string to_string(Activation a);
HeadMode parse_head_mode(const std::string& s);
Activation parse_activation(const std::string& s);

struct HeadConfig {
    HeadMode mode = HeadMode::Regressor;
    int n_conv = 1;     // 0..2
    int n_linear = 2;   // 1..3
    std::size_t hidden_dim = 256;
    double dropout_rate = 0.25;
    Activation activation = Activation::Gelu;
    StatVariant target = StatVariant::MeanMax;
    double alpha = 0.1;  // smooth-L1 threshold, in normalized target units

    void validate() const;
    // Short structure tag used by the ablation grid, e.g. "1conv+2lin".
    std::string structure() const;
};

// Learning-rate schedule over the iterations: constant, or cosine annealed
// from lr to 0.
enum class LrSchedule { Constant, Cosine };
std::string to_string(LrSchedule s);
LrSchedule parse_lr_schedule(const std::string& s);

struct TrainConfig {
    double lr = 5e-2;
    LrSchedule schedule = LrSchedule::Cosine;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 16;
    std::size_t iterations = 5000;
    std::uint64_t seed = 0;
    // Classifier only: share of training images held out to report accuracy.
    double holdout_fraction = 0.1;

    void validate() const;
    double lr_at(std::size_t iteration) const;
};

// Layer list for a head: [conv3x3(C->C), act] x n_conv, global average pool,
// then n_linear dense layers with the activation between them. Dropout sits
// before each dense layer whose input is at least hidden_dim wide; a narrower
// pooled input is left intact.
std::vector<net::LayerSpec> head_layers(const HeadConfig& cfg, std::size_t in_channels, std::size_t out_dim);

struct ImageStats {
    double u = 0.0;      // mean pixel score
    double gamma = 0.0;  // max pixel score
    double sigma = 0.0;  // population std of pixel scores
};

ImageStats compute_image_stats(const Tensor& map);

// Affine normalization of the two regression targets, fitted on the
// training targets and inverted at prediction time.
// Targets are z-normalized, in log space when every target is positive.
struct TargetNorm {
    bool log_space = false;
    double mean[2] = {0.0, 0.0};
    double scale[2] = {1.0, 1.0};

    double encode(int k, double v) const { return ((log_space ? std::log(v) : v) - mean[k]) / scale[k]; }
    double decode(int k, double z) const {
        const double v = z * scale[k] + mean[k];
        return log_space ? std::exp(v) : v;
    }
};

// Per-channel standardization of the input features, fitted on the
// training features.
struct InputNorm {
    std::vector<double> mean;
    std::vector<double> scale;

    Tensor apply(const Tensor& features) const;
};

struct HeadModel {
    HeadModel(HeadConfig cfg, net::Network n) : config(cfg), net(std::move(n)) {}

    HeadConfig config;
    net::Network net;
    std::size_t in_channels = 0;
    std::uint64_t seed = 0;
    InputNorm input_norm;
    TargetNorm target_norm;       // regressor
    std::vector<int> class_ids;   // classifier: output index -> class_id, ascending
    std::vector<double> loss_trace;
    std::optional<double> holdout_accuracy;
};

// Trains the regressor on normal training images. features[i] and maps[i]
// describe the same image.
HeadModel train_regressor(std::span<const Tensor> features, std::span<const Tensor> maps, const HeadConfig& head,
                          const TrainConfig& train);

HeadModel train_classifier(std::span<const Tensor> features, std::span<const int> class_ids, const HeadConfig& head,
                           const TrainConfig& train);

struct PredictedStats {
    StatVariant variant = StatVariant::MeanMax;
    double u = 0.0;
    double second = 0.0;  // gamma for mean-max, sigma for mean-std

    double gamma() const { return variant == StatVariant::MeanMax ? second : u + 3.0 * second; }
};

// Eval-mode forward pass; depends on the features only.
PredictedStats predict_stats(HeadModel& model, const Tensor& features);

// Output index with the largest logit; ties go to the lowest class_id.
int predict_class(HeadModel& model, const Tensor& features);
std::vector<double> predict_logits(HeadModel& model, const Tensor& features);

Normalized calibrate(const Tensor& map, double u_hat, double gamma_hat, double eps = kDefaultEps);
Normalized calibrate(const Tensor& map, const PredictedStats& stats, double eps = kDefaultEps);

Normalized calibrate_with_classifier(HeadModel& model, std::span<const ClassStats> stats, const Tensor& map,
                                     const Tensor& features, StatVariant variant, double eps = kDefaultEps);

// Smoothed loss curve (exponential moving average) for convergence checks.
std::vector<double> smoothed_trace(std::span<const double> trace, double decay = 0.98);

void save_head(const std::filesystem::path& dir, HeadModel& model);
HeadModel load_head(const std::filesystem::path& dir);

}  // namespace cada
