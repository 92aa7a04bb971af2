#include "cada/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "cada/error.hpp"

namespace cada {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(splitmix64(seed) ^ stream); }

void SynthConfig::validate() const {
    if (k_classes < 2) fail(ErrorKind::Usage, "k_classes must be at least 2");
    if (grid_h == 0 || grid_w == 0 || feat_dim == 0) fail(ErrorKind::Usage, "grid and feature dims must be positive");
    if (!(spread_min > 0.0 && spread_max >= spread_min)) fail(ErrorKind::Usage, "spread range must satisfy 0 < min <= max");
    if (!(area_min > 0.0 && area_max < 1.0 && area_min <= area_max))
        fail(ErrorKind::Usage, "anomaly area range must lie in (0,1)");
    if (train_normal == 0 || test_normal == 0 || test_anomalous == 0)
        fail(ErrorKind::Usage, "per-class image counts must be at least 1");
    if (!(center_radius >= 0.0) || !(anomaly_rel_magnitude >= 0.0))
        fail(ErrorKind::Usage, "center radius and anomaly magnitude must be non-negative");
    // At least one rectangle must satisfy the area range.
    const double cells = static_cast<double>(grid_h * grid_w);
    bool feasible = false;
    for (std::size_t h = 1; h <= grid_h && !feasible; ++h)
        for (std::size_t w = 1; w <= grid_w && !feasible; ++w) {
            const double f = static_cast<double>(h * w) / cells;
            feasible = f >= area_min && f <= area_max;
        }
    if (!feasible) fail(ErrorKind::Usage, "no rectangle on the grid fits the anomaly area range");
}

namespace {

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
    std::normal_distribution<double> n01;
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (double& x : v) {
            x = n01(rng);
            norm += x * x;
        }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

// Stored as f32; keep the in-memory copy identical to what a reader sees.
void round_to_f32(Tensor& t) {
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

std::vector<ClassParams> sample_class_params(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0));
    const auto k = static_cast<std::size_t>(cfg.k_classes);
    std::vector<ClassParams> out(k);
    for (auto& c : out) {
        c.center = random_unit(rng, cfg.feat_dim);
        for (double& x : c.center) x *= cfg.center_radius;
    }
    const double lo = std::log(cfg.spread_min), hi = std::log(cfg.spread_max);
    if (cfg.spread_sampling == SpreadSampling::LogSpaced) {
        std::vector<double> spreads(k);
        for (std::size_t i = 0; i < k; ++i) {
            const double t = static_cast<double>(i) / static_cast<double>(k - 1);
            spreads[i] = std::exp(lo + t * (hi - lo));
        }
        spreads.front() = cfg.spread_min;
        spreads.back() = cfg.spread_max;
        std::shuffle(spreads.begin(), spreads.end(), rng);
        for (std::size_t i = 0; i < k; ++i) out[i].spread = spreads[i];
    } else {
        std::uniform_real_distribution<double> u(lo, hi);
        for (auto& c : out) c.spread = std::exp(u(rng));
    }
    return out;
}

SynthImage synth_image(const SynthConfig& cfg, const ClassParams& cls, std::uint64_t image_index, bool anomalous) {
    std::mt19937_64 rng(mix_seed(cfg.seed, image_index + 1));
    std::normal_distribution<double> n01;
    const std::size_t H = cfg.grid_h, W = cfg.grid_w, HW = H * W, D = cfg.feat_dim;
    SynthImage img{Tensor({D, H, W}, DType::F32), std::nullopt};
    // Location-major draw order: all channels of location 0, then location 1, ...
    for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t d = 0; d < D; ++d) img.features[d * HW + p] = cls.center[d] + cls.spread * n01(rng);
    if (!anomalous) {
        round_to_f32(img.features);
        return img;
    }

    const double cells = static_cast<double>(HW);
    std::uniform_int_distribution<std::size_t> pick_h(1, H), pick_w(1, W);
    std::size_t rh = 0, rw = 0;
    for (int attempt = 0;; ++attempt) {
        if (attempt > 100000) fail(ErrorKind::Usage, "could not place an anomaly rectangle");
        rh = pick_h(rng);
        rw = pick_w(rng);
        const double f = static_cast<double>(rh * rw) / cells;
        if (f >= cfg.area_min && f <= cfg.area_max) break;
    }
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, H - rh)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, W - rw)(rng);
    auto dir = random_unit(rng, D);
    const double magnitude = cfg.anomaly_rel_magnitude * cls.spread;

    Tensor mask({H, W}, DType::F32);
    for (std::size_t i = top; i < top + rh; ++i) {
        for (std::size_t j = left; j < left + rw; ++j) {
            const std::size_t p = i * W + j;
            mask[p] = 1.0;
            for (std::size_t d = 0; d < D; ++d) img.features[d * HW + p] += magnitude * dir[d];
        }
    }
    round_to_f32(img.features);
    img.mask = std::move(mask);
    return img;
}

DatasetManifest generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    const auto classes = sample_class_params(cfg);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "features", ec);
    if (!ec) std::filesystem::create_directories(out_dir / "masks", ec);
    if (ec) fail(ErrorKind::Data, "cannot create output directory " + out_dir.string() + ": " + ec.message());

    DatasetManifest m;
    m.base_dir = out_dir;
    std::uint64_t index = 0;
    auto emit = [&](int cls, Split split, bool anomalous, bool labelled_anomalous) {
        char id[32];
        std::snprintf(id, sizeof id, "img_%05llu", static_cast<unsigned long long>(index));
        auto img = synth_image(cfg, classes[static_cast<std::size_t>(cls)], index, anomalous);
        ++index;
        ManifestEntry e;
        e.image_id = id;
        e.split = split;
        e.label = labelled_anomalous ? Label::Anomalous : Label::Normal;
        e.class_id = cls;
        e.feature_path = "features/" + e.image_id + ".adt";
        write_tensor(out_dir / *e.feature_path, img.features);
        if (labelled_anomalous && img.mask) {
            e.mask_path = "masks/" + e.image_id + ".adt";
            write_tensor(out_dir / *e.mask_path, *img.mask);
        }
        m.entries.push_back(std::move(e));
    };
    for (int c = 0; c < cfg.k_classes; ++c) {
        for (std::size_t i = 0; i < cfg.train_normal; ++i) emit(c, Split::Train, false, false);
        for (std::size_t i = 0; i < cfg.train_noise; ++i) emit(c, Split::Train, true, false);
        for (std::size_t i = 0; i < cfg.test_normal; ++i) emit(c, Split::Test, false, false);
        for (std::size_t i = 0; i < cfg.test_anomalous; ++i) emit(c, Split::Test, true, true);
    }
    write_manifest(out_dir / "manifest.json", m);
    return m;
}

Coreset fit_coreset(std::span<const Tensor> train_features, std::size_t m_per_image, std::uint64_t seed,
                    std::span<const int> class_ids) {
    if (train_features.empty()) fail(ErrorKind::Data, "coreset needs at least one training image");
    if (m_per_image == 0) fail(ErrorKind::Usage, "m_per_image must be positive");
    if (!class_ids.empty() && class_ids.size() != train_features.size())
        fail(ErrorKind::Data, "class_ids and features differ in count");
    const auto& shape0 = train_features.front().shape;
    if (shape0.size() != 3) fail(ErrorKind::Data, "features must be [C,H,W]");
    const std::size_t D = shape0[0], HW = shape0[1] * shape0[2];
    if (m_per_image > HW)
        fail(ErrorKind::Usage, "m_per_image " + std::to_string(m_per_image) + " exceeds " + std::to_string(HW) +
                                   " locations per image");

    Coreset c;
    c.points = Tensor({train_features.size() * m_per_image, D});
    std::vector<std::size_t> perm(HW);
    std::size_t row = 0;
    for (std::size_t img = 0; img < train_features.size(); ++img) {
        const Tensor& f = train_features[img];
        if (f.shape != shape0) fail(ErrorKind::Data, "training features differ in shape");
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::mt19937_64 rng(mix_seed(seed, img + 1));
        // Partial Fisher-Yates: the first m entries are a uniform sample.
        for (std::size_t i = 0; i < m_per_image; ++i) {
            const std::size_t j = std::uniform_int_distribution<std::size_t>(i, HW - 1)(rng);
            std::swap(perm[i], perm[j]);
        }
        for (std::size_t i = 0; i < m_per_image; ++i, ++row) {
            for (std::size_t d = 0; d < D; ++d) c.points[row * D + d] = f[d * HW + perm[i]];
            c.source.push_back(img);
        }
        if (!class_ids.empty()) c.class_counts[class_ids[img]] += m_per_image;
    }
    return c;
}

Tensor score_knn(const Tensor& features, const Coreset& coreset, std::optional<std::size_t> exclude_source) {
    if (features.ndim() != 3) fail(ErrorKind::Data, "features must be [C,H,W], got " + shape_string(features.shape));
    if (coreset.points.ndim() != 2 || coreset.points.dim(1) != features.dim(0))
        fail(ErrorKind::Data, "feature dim " + std::to_string(features.dim(0)) + " does not match coreset " +
                                  shape_string(coreset.points.shape));
    const std::size_t D = features.dim(0), H = features.dim(1), W = features.dim(2), HW = H * W;

    // Dimension-major copy of the bank so the inner loop runs over points.
    std::vector<double> bank;
    std::size_t M = 0;
    {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < coreset.points.dim(0); ++r)
            if (!exclude_source || coreset.source.at(r) != *exclude_source) rows.push_back(r);
        M = rows.size();
        if (M == 0) fail(ErrorKind::Data, "coreset is empty after exclusion");
        bank.resize(D * M);
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t d = 0; d < D; ++d) bank[d * M + i] = coreset.points[rows[i] * D + d];
    }

    Tensor out({H, W});
    std::vector<double> dist(M);
    for (std::size_t p = 0; p < HW; ++p) {
        std::fill(dist.begin(), dist.end(), 0.0);
        for (std::size_t d = 0; d < D; ++d) {
            const double q = features[d * HW + p];
            const double* b = &bank[d * M];
            for (std::size_t i = 0; i < M; ++i) {
                const double diff = b[i] - q;
                dist[i] += diff * diff;
            }
        }
        out[p] = std::sqrt(*std::min_element(dist.begin(), dist.end()));
    }
    return out;
}

void write_coreset(const std::filesystem::path& dir, const Coreset& c) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Data, "cannot create " + dir.string() + ": " + ec.message());
    write_tensor(dir / "coreset.adt", c.points);
    Tensor src({c.source.size()});
    for (std::size_t i = 0; i < c.source.size(); ++i) src[i] = static_cast<double>(c.source[i]);
    write_tensor(dir / "coreset_source.adt", src);
}

Coreset read_coreset(const std::filesystem::path& dir) {
    Coreset c;
    c.points = read_tensor(dir / "coreset.adt");
    const Tensor src = read_tensor(dir / "coreset_source.adt");
    if (c.points.ndim() != 2 || src.size() != c.points.dim(0))
        fail(ErrorKind::Data, dir.string() + ": coreset and source index disagree");
    for (double v : src.data) c.source.push_back(static_cast<std::size_t>(v));
    return c;
}

}  // namespace cada
