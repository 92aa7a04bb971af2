#pragma once
// Image- and pixel-level detection metrics and the top-fraction image score.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cada/manifest.hpp"
#include "cada/tensor.hpp"

namespace cada {

struct ScoredSample {
    double score = 0.0;
    int label = 0;  // 0 normal, 1 anomalous
};

// Area under the ROC curve; ties earn half credit, so this equals
// P(s+ > s-) + 0.5 P(s+ == s-) over all positive/negative pairs.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);
double auroc(std::span<const ScoredSample> samples);

// Step-wise average precision, sum_k (R_k - R_{k-1}) P_k over descending
// unique thresholds. Tied scores form a single threshold.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);
double average_precision(std::span<const ScoredSample> samples);

// How a score map is reduced to an image score: the mean of the
// ceil(fraction * pixels) largest values, or the plain maximum.
struct Aggregation {
    bool use_max = false;
    double fraction = 0.01;

    static Aggregation max() { return {true, 1.0}; }
    static Aggregation top(double f) { return {false, f}; }
    // Accepts "max" or a number in (0, 1].
    static Aggregation parse(const std::string& text);
    std::string label() const;
};

double image_score(std::span<const double> pixels, Aggregation agg);
double image_score(const Tensor& map, Aggregation agg);

struct MetricsReport {
    std::string scope;  // "mixed", "class:<id>" or "macro"
    double i_auroc = 0.0;
    double i_ap = 0.0;
    std::optional<double> p_auroc;  // absent when no pixel ground truth was available
    std::optional<double> p_ap;
    std::size_t n_images = 0;
    std::size_t n_pixels = 0;
};

using MapSet = std::map<std::string, Tensor>;

// Mixed report first; then per-class reports and their macro average when
// every test entry has a class_id. Pixel metrics pool all test pixels;
// normal images contribute an implicit all-zero mask and anomalous images
// without a mask are left out of the pixel pool.
std::vector<MetricsReport> evaluate(const DatasetManifest& manifest, const MapSet& maps, const MapSet& masks,
                                    Aggregation agg);
// Loads masks through the manifest's mask_path references.
std::vector<MetricsReport> evaluate(const DatasetManifest& manifest, const MapSet& maps, Aggregation agg);

void write_metrics_csv(std::ostream& os, std::span<const MetricsReport> reports);
void write_metrics_csv(const std::string& path, std::span<const MetricsReport> reports);
std::vector<MetricsReport> read_metrics_csv(const std::string& path);

}  // namespace cada
