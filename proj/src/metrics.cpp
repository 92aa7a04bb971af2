#include "cada/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cada/error.hpp"

namespace cada {

namespace {

void check_inputs(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) fail(ErrorKind::Data, "scores and labels differ in length");
    for (double s : scores)
        if (!std::isfinite(s)) fail(ErrorKind::Numerical, "non-finite score");
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (descending)
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    else
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    return idx;
}

void split_samples(std::span<const ScoredSample> samples, std::vector<double>& s, std::vector<std::uint8_t>& l) {
    s.reserve(samples.size());
    l.reserve(samples.size());
    for (const auto& x : samples) {
        s.push_back(x.score);
        l.push_back(x.label ? 1 : 0);
    }
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_inputs(scores, labels);
    const auto idx = order_by_score(scores, false);

    // 2U accumulated exactly in integers: each positive earns 2 per negative
    // strictly below it and 1 per tied negative.
    std::uint64_t twice_u = 0, neg_below = 0, n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        std::uint64_t p = 0, q = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? p : q) += 1;
            ++j;
        }
        twice_u += p * (2 * neg_below + q);
        neg_below += q;
        n_pos += p;
        n_neg += q;
        i = j;
    }
    if (n_pos == 0 || n_neg == 0) fail(ErrorKind::Numerical, "AUROC undefined: need both normal and anomalous samples");
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auroc(std::span<const ScoredSample> samples) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    split_samples(samples, s, l);
    return auroc(s, l);
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    check_inputs(scores, labels);
    const auto total_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
    if (total_pos == 0) fail(ErrorKind::Numerical, "AP undefined: no anomalous samples");
    const auto idx = order_by_score(scores, true);

    double ap = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, seen = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        std::size_t group_pos = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            group_pos += labels[idx[j]] ? 1 : 0;
            ++j;
        }
        tp += group_pos;
        seen = j;
        if (group_pos > 0) {
            const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
            const double precision = static_cast<double>(tp) / static_cast<double>(seen);
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        i = j;
    }
    return ap;
}

double average_precision(std::span<const ScoredSample> samples) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    split_samples(samples, s, l);
    return average_precision(s, l);
}

Aggregation Aggregation::parse(const std::string& text) {
    if (text == "max") return max();
    double f = 0.0;
    try {
        std::size_t used = 0;
        f = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
    } catch (const std::exception&) {
        fail(ErrorKind::Usage, "top fraction must be 'max' or a number in (0,1]: " + text);
    }
    if (!(f > 0.0 && f <= 1.0)) fail(ErrorKind::Usage, "top fraction must lie in (0,1]: " + text);
    return top(f);
}

std::string Aggregation::label() const {
    if (use_max) return "max";
    std::ostringstream os;
    os << fraction;
    return os.str();
}

double image_score(std::span<const double> pixels, Aggregation agg) {
    if (pixels.empty()) fail(ErrorKind::Data, "image score of an empty map");
    if (agg.use_max) return *std::max_element(pixels.begin(), pixels.end());
    if (!(agg.fraction > 0.0 && agg.fraction <= 1.0)) fail(ErrorKind::Usage, "top fraction must lie in (0,1]");
    const auto m = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(agg.fraction * static_cast<double>(pixels.size()) - 1e-9)), 1,
        pixels.size());
    std::vector<double> v(pixels.begin(), pixels.end());
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m - 1), v.end(), std::greater<>());
    std::sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m), std::greater<>());
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) sum += v[i];
    return sum / static_cast<double>(m);
}

double image_score(const Tensor& map, Aggregation agg) { return image_score(map.values(), agg); }

namespace {

struct Pool {
    std::vector<double> img_scores;
    std::vector<std::uint8_t> img_labels;
    std::vector<double> pix_scores;
    std::vector<std::uint8_t> pix_labels;
};

MetricsReport summarize(const std::string& scope, const Pool& pool) {
    MetricsReport r;
    r.scope = scope;
    r.n_images = pool.img_scores.size();
    r.n_pixels = pool.pix_scores.size();
    try {
        r.i_auroc = auroc(pool.img_scores, pool.img_labels);
        r.i_ap = average_precision(pool.img_scores, pool.img_labels);
    } catch (const Error& e) {
        fail(e.kind(), "scope " + scope + ": " + e.what());
    }
    const bool has_pos = std::find(pool.pix_labels.begin(), pool.pix_labels.end(), 1) != pool.pix_labels.end();
    const bool has_neg = std::find(pool.pix_labels.begin(), pool.pix_labels.end(), 0) != pool.pix_labels.end();
    if (has_pos && has_neg) {
        r.p_auroc = auroc(pool.pix_scores, pool.pix_labels);
        r.p_ap = average_precision(pool.pix_scores, pool.pix_labels);
    }
    return r;
}

void add_image(Pool& pool, const ManifestEntry& e, const Tensor& map, const MapSet& masks, Aggregation agg) {
    pool.img_scores.push_back(image_score(map, agg));
    pool.img_labels.push_back(e.label == Label::Anomalous ? 1 : 0);
    if (e.label == Label::Normal) {
        pool.pix_scores.insert(pool.pix_scores.end(), map.data.begin(), map.data.end());
        pool.pix_labels.insert(pool.pix_labels.end(), map.size(), 0);
        return;
    }
    auto it = masks.find(e.image_id);
    if (it == masks.end()) return;
    const Tensor& mask = it->second;
    if (mask.shape != map.shape)
        fail(ErrorKind::Data, "mask shape " + shape_string(mask.shape) + " differs from score-map shape " +
                                  shape_string(map.shape) + " for " + e.image_id);
    pool.pix_scores.insert(pool.pix_scores.end(), map.data.begin(), map.data.end());
    for (double v : mask.data) pool.pix_labels.push_back(v > 0.5 ? 1 : 0);
}

}  // namespace

std::vector<MetricsReport> evaluate(const DatasetManifest& manifest, const MapSet& maps, const MapSet& masks,
                                    Aggregation agg) {
    const auto test = manifest.split(Split::Test);
    if (test.empty()) fail(ErrorKind::Data, "no test images in manifest");
    const bool per_class = std::all_of(test.begin(), test.end(), [](auto* e) { return e->class_id.has_value(); });

    Pool mixed;
    std::map<int, Pool> by_class;
    for (const auto* e : test) {
        auto it = maps.find(e->image_id);
        if (it == maps.end()) fail(ErrorKind::Data, "missing score map for test image " + e->image_id);
        add_image(mixed, *e, it->second, masks, agg);
        if (per_class) add_image(by_class[*e->class_id], *e, it->second, masks, agg);
    }

    std::vector<MetricsReport> out{summarize("mixed", mixed)};
    if (!per_class) return out;

    MetricsReport macro;
    macro.scope = "macro";
    double p_auroc_sum = 0.0, p_ap_sum = 0.0;
    std::size_t p_count = 0;
    for (const auto& [cls, pool] : by_class) {
        auto r = summarize("class:" + std::to_string(cls), pool);
        macro.i_auroc += r.i_auroc;
        macro.i_ap += r.i_ap;
        macro.n_images += r.n_images;
        macro.n_pixels += r.n_pixels;
        if (r.p_auroc) {
            p_auroc_sum += *r.p_auroc;
            p_ap_sum += *r.p_ap;
            ++p_count;
        }
        out.push_back(std::move(r));
    }
    const auto k = static_cast<double>(by_class.size());
    macro.i_auroc /= k;
    macro.i_ap /= k;
    if (p_count > 0) {
        macro.p_auroc = p_auroc_sum / static_cast<double>(p_count);
        macro.p_ap = p_ap_sum / static_cast<double>(p_count);
    }
    out.push_back(std::move(macro));
    return out;
}

std::vector<MetricsReport> evaluate(const DatasetManifest& manifest, const MapSet& maps, Aggregation agg) {
    MapSet masks;
    for (const auto* e : manifest.split(Split::Test))
        if (e->mask_path) masks.emplace(e->image_id, read_tensor(manifest.resolve(*e->mask_path)));
    return evaluate(manifest, maps, masks, agg);
}

namespace {

std::string fmt_metric(std::optional<double> v) {
    if (!v) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10f", *v);
    return buf;
}

}  // namespace

void write_metrics_csv(std::ostream& os, std::span<const MetricsReport> reports) {
    os << "scope,i_auroc,i_ap,p_auroc,p_ap,n_images,n_pixels\n";
    for (const auto& r : reports) {
        os << r.scope << ',' << fmt_metric(r.i_auroc) << ',' << fmt_metric(r.i_ap) << ',' << fmt_metric(r.p_auroc)
           << ',' << fmt_metric(r.p_ap) << ',' << r.n_images << ',' << r.n_pixels << '\n';
    }
}

void write_metrics_csv(const std::string& path, std::span<const MetricsReport> reports) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(ErrorKind::Data, "cannot open for writing: " + path);
    write_metrics_csv(f, reports);
}

std::vector<MetricsReport> read_metrics_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorKind::Data, "cannot open metrics CSV: " + path);
    std::string line;
    std::getline(f, line);
    if (line != "scope,i_auroc,i_ap,p_auroc,p_ap,n_images,n_pixels")
        fail(ErrorKind::Data, path + ": unexpected metrics header");
    auto opt = [](const std::string& s) -> std::optional<double> {
        if (s == "NA") return std::nullopt;
        return std::stod(s);
    };
    std::vector<MetricsReport> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
        if (cols.size() != 7) fail(ErrorKind::Data, path + ": malformed row: " + line);
        try {
            MetricsReport r;
            r.scope = cols[0];
            r.i_auroc = std::stod(cols[1]);
            r.i_ap = std::stod(cols[2]);
            r.p_auroc = opt(cols[3]);
            r.p_ap = opt(cols[4]);
            r.n_images = std::stoull(cols[5]);
            r.n_pixels = std::stoull(cols[6]);
            out.push_back(std::move(r));
        } catch (const std::logic_error&) {
            fail(ErrorKind::Data, path + ": malformed row: " + line);
        }
    }
    return out;
}

}  // namespace cada
