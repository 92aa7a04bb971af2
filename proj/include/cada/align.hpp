#pragma once
// Per-class normal-score statistics and mean-max / mean-std alignment.

#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cada/metrics.hpp"
#include "cada/tensor.hpp"

namespace cada {

inline constexpr double kDefaultEps = 1e-6;

enum class StatVariant { MeanMax, MeanStd };
StatVariant parse_variant(const std::string& s);
std::string to_string(StatVariant v);

struct ClassStats {
    int class_id = 0;
    double u = 0.0;      // mean of all normal pixel scores
    double gamma = 0.0;  // mean over images of the per-image max
    double sigma = 0.0;  // population std of all normal pixel scores
    std::size_t n_images = 0;
    std::size_t n_pixels = 0;

    // Reference maximum for a variant; mean-std uses u + 3 sigma.
    double reference_max(StatVariant v) const { return v == StatVariant::MeanMax ? gamma : u + 3.0 * sigma; }
};

using ClassGroups = std::map<int, std::vector<const Tensor*>>;

// Fit on training (normal-only) maps. Throws on an empty group.
std::vector<ClassStats> fit_class_stats(const ClassGroups& groups);

struct Normalized {
    Tensor map;
    bool clamped = false;  // gamma - u fell below eps
};

// (s - u) / max(gamma - u, eps), elementwise.
Normalized normalize_meanmax(const Tensor& map, double u, double gamma, double eps = kDefaultEps);
// normalize_meanmax with gamma = u + 3 sigma.
Normalized normalize_meanstd(const Tensor& map, double u, double sigma, double eps = kDefaultEps);

struct AlignedSet {
    MapSet maps;
    std::size_t clamped = 0;
};

// Calibrates every map with the statistics of its own (known) class.
AlignedSet apply_oracle_alignment(const MapSet& maps, const std::map<std::string, int>& class_of,
                                  std::span<const ClassStats> stats, StatVariant variant, double eps = kDefaultEps);

const ClassStats& find_stats(std::span<const ClassStats> stats, int class_id);

void write_class_stats_csv(std::ostream& os, std::span<const ClassStats> stats);
void write_class_stats_csv(const std::string& path, std::span<const ClassStats> stats);
std::vector<ClassStats> read_class_stats_csv(const std::string& path);

}  // namespace cada
