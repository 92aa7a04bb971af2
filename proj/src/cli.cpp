#include "cada/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cada/align.hpp"
#include "cada/error.hpp"
#include "cada/head.hpp"
#include "cada/manifest.hpp"
#include "cada/metrics.hpp"
#include "cada/synth.hpp"

namespace cada::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Shared helpers

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Data, "cannot create output directory " + dir.string() + ": " + ec.message());
}

DatasetManifest load_manifest(const fs::path& dir) { return read_manifest(dir / "manifest.json", true); }

// Re-expresses an entry's file references relative to a new manifest directory.
std::optional<std::string> rebase(const DatasetManifest& m, const std::optional<std::string>& ref,
                                  const fs::path& new_base) {
    if (!ref) return std::nullopt;
    const fs::path abs = fs::weakly_canonical(fs::absolute(m.resolve(*ref)));
    return abs.lexically_relative(fs::weakly_canonical(fs::absolute(new_base))).generic_string();
}

Tensor load_features(const DatasetManifest& m, const ManifestEntry& e) {
    if (!e.feature_path) fail(ErrorKind::Data, "image " + e.image_id + " has no feature_path");
    return read_tensor(m.resolve(*e.feature_path));
}

Tensor load_map(const DatasetManifest& m, const ManifestEntry& e) {
    if (!e.score_path) fail(ErrorKind::Data, "image " + e.image_id + " has no score map");
    Tensor t = read_tensor(m.resolve(*e.score_path));
    if (t.ndim() != 2) fail(ErrorKind::Data, "score map for " + e.image_id + " must be [H,W]");
    return t;
}

MapSet load_maps(const DatasetManifest& m, std::optional<Split> split) {
    MapSet out;
    for (const auto& e : m.entries)
        if (!split || e.split == *split) out.emplace(e.image_id, load_map(m, e));
    return out;
}

// Writes calibrated maps plus a manifest pointing at them.
void write_map_set(const fs::path& out_dir, const DatasetManifest& src, const MapSet& maps) {
    ensure_dir(out_dir / "maps");
    DatasetManifest m;
    m.base_dir = out_dir;
    for (const auto& e : src.entries) {
        auto it = maps.find(e.image_id);
        if (it == maps.end()) continue;
        ManifestEntry ne = e;
        ne.feature_path = rebase(src, e.feature_path, out_dir);
        ne.mask_path = rebase(src, e.mask_path, out_dir);
        ne.score_path = "maps/" + e.image_id + ".adt";
        write_tensor(out_dir / *ne.score_path, it->second);
        m.entries.push_back(std::move(ne));
    }
    write_manifest(out_dir / "manifest.json", m);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10f", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(ErrorKind::Data, "cannot open for writing: " + path.string());
    f << text;
}

// Records every option of a subcommand (given or defaulted) for provenance.
void write_resolved_config(const fs::path& dir, const CLI::App& sub, const json& extra = json::object()) {
    json j;
    j["subcommand"] = sub.get_name();
    json opts = json::object();
    for (const CLI::Option* o : sub.get_options()) {
        const std::string name = o->get_name(false, true);
        std::string key = o->get_lnames().empty() ? name : o->get_lnames().front();
        if (name.empty() || key == "help") continue;
        if (o->count() > 0) {
            const auto& r = o->results();
            opts[key] = r.size() == 1 ? json(r.front()) : json(r);
        } else if (o->get_type_size() == 0) {
            opts[key] = false;
        } else {
            opts[key] = o->get_default_str();
        }
    }
    j["options"] = std::move(opts);
    if (!extra.empty()) j["resolved"] = extra;
    ensure_dir(dir);
    write_text(dir / (sub.get_name() + ".config.json"), j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// gen

json synth_to_json(const SynthConfig& c) {
    return {{"k_classes", c.k_classes},
            {"grid_h", c.grid_h},
            {"grid_w", c.grid_w},
            {"feat_dim", c.feat_dim},
            {"center_radius", c.center_radius},
            {"spread_min", c.spread_min},
            {"spread_max", c.spread_max},
            {"spread_sampling", c.spread_sampling == SpreadSampling::LogSpaced ? "logspaced" : "loguniform"},
            {"anomaly_rel_magnitude", c.anomaly_rel_magnitude},
            {"area_min", c.area_min},
            {"area_max", c.area_max},
            {"train_normal", c.train_normal},
            {"test_normal", c.test_normal},
            {"test_anomalous", c.test_anomalous},
            {"train_noise", c.train_noise},
            {"seed", c.seed}};
}

SpreadSampling parse_spread_sampling(const std::string& s) {
    if (s == "logspaced") return SpreadSampling::LogSpaced;
    if (s == "loguniform") return SpreadSampling::LogUniform;
    fail(ErrorKind::Usage, "unknown spread sampling: " + s);
}

void apply_synth_json(SynthConfig& c, const json& j) {
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "k_classes") c.k_classes = v;
            else if (key == "grid_h") c.grid_h = v;
            else if (key == "grid_w") c.grid_w = v;
            else if (key == "feat_dim") c.feat_dim = v;
            else if (key == "center_radius") c.center_radius = v;
            else if (key == "spread_min") c.spread_min = v;
            else if (key == "spread_max") c.spread_max = v;
            else if (key == "spread_sampling") c.spread_sampling = parse_spread_sampling(v);
            else if (key == "anomaly_rel_magnitude") c.anomaly_rel_magnitude = v;
            else if (key == "area_min") c.area_min = v;
            else if (key == "area_max") c.area_max = v;
            else if (key == "train_normal") c.train_normal = v;
            else if (key == "test_normal") c.test_normal = v;
            else if (key == "test_anomalous") c.test_anomalous = v;
            else if (key == "train_noise") c.train_noise = v;
            else if (key == "seed") c.seed = v;
            else fail(ErrorKind::Usage, "unknown synth config key: " + key);
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Usage, std::string("bad synth config: ") + e.what());
    }
}

struct GenArgs {
    std::string out, config;
    SynthConfig cfg;
    std::string spread_sampling = "logspaced";
};

void add_gen(CLI::App& app, GenArgs& a) {
    auto* s = app.add_subcommand("gen", "Generate the synthetic multi-class benchmark");
    s->add_option("--out", a.out, "Output dataset directory")->required();
    s->add_option("--config", a.config, "JSON file with synth settings (flags override it)");
    s->add_option("--k", a.cfg.k_classes, "Number of classes");
    s->add_option("--grid-h", a.cfg.grid_h, "Feature grid height");
    s->add_option("--grid-w", a.cfg.grid_w, "Feature grid width");
    s->add_option("--feat-dim", a.cfg.feat_dim, "Feature channels");
    s->add_option("--center-radius", a.cfg.center_radius, "Radius of the sphere holding class centers");
    s->add_option("--spread-min", a.cfg.spread_min, "Smallest per-class feature std");
    s->add_option("--spread-max", a.cfg.spread_max, "Largest per-class feature std");
    s->add_option("--spread-sampling", a.spread_sampling, "logspaced | loguniform");
    s->add_option("--anomaly-magnitude", a.cfg.anomaly_rel_magnitude, "Anomaly offset in units of class std");
    s->add_option("--area-min", a.cfg.area_min, "Smallest anomaly area fraction");
    s->add_option("--area-max", a.cfg.area_max, "Largest anomaly area fraction");
    s->add_option("--train-normal", a.cfg.train_normal, "Normal training images per class");
    s->add_option("--test-normal", a.cfg.test_normal, "Normal test images per class");
    s->add_option("--test-anomalous", a.cfg.test_anomalous, "Anomalous test images per class");
    s->add_option("--train-noise", a.cfg.train_noise, "Unlabelled anomalous training images per class");
    s->add_option("--seed", a.cfg.seed, "Master seed");
}

int do_gen(const CLI::App& sub, GenArgs& a, std::ostream& out) {
    SynthConfig cfg;
    if (!a.config.empty()) {
        std::ifstream f(a.config);
        if (!f) fail(ErrorKind::Data, "cannot open synth config: " + a.config);
        json j;
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            fail(ErrorKind::Data, a.config + ": " + e.what());
        }
        apply_synth_json(cfg, j);
    }
    // Explicit flags win over the config file.
    const SynthConfig defaults;
    auto given = [&](const char* flag) { return sub.get_option(flag)->count() > 0; };
    if (given("--k")) cfg.k_classes = a.cfg.k_classes;
    if (given("--grid-h")) cfg.grid_h = a.cfg.grid_h;
    if (given("--grid-w")) cfg.grid_w = a.cfg.grid_w;
    if (given("--feat-dim")) cfg.feat_dim = a.cfg.feat_dim;
    if (given("--center-radius")) cfg.center_radius = a.cfg.center_radius;
    if (given("--spread-min")) cfg.spread_min = a.cfg.spread_min;
    if (given("--spread-max")) cfg.spread_max = a.cfg.spread_max;
    if (given("--spread-sampling")) cfg.spread_sampling = parse_spread_sampling(a.spread_sampling);
    if (given("--anomaly-magnitude")) cfg.anomaly_rel_magnitude = a.cfg.anomaly_rel_magnitude;
    if (given("--area-min")) cfg.area_min = a.cfg.area_min;
    if (given("--area-max")) cfg.area_max = a.cfg.area_max;
    if (given("--train-normal")) cfg.train_normal = a.cfg.train_normal;
    if (given("--test-normal")) cfg.test_normal = a.cfg.test_normal;
    if (given("--test-anomalous")) cfg.test_anomalous = a.cfg.test_anomalous;
    if (given("--train-noise")) cfg.train_noise = a.cfg.train_noise;
    if (given("--seed")) cfg.seed = a.cfg.seed;
    cfg.validate();

    const auto m = generate(cfg, a.out);
    json extra = synth_to_json(cfg);
    auto spreads = json::array();
    for (const auto& c : sample_class_params(cfg)) spreads.push_back(c.spread);
    extra["class_spreads"] = spreads;
    write_resolved_config(a.out, sub, extra);
    out << "generated " << m.entries.size() << " images in " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// fit-base / score

struct BaseArgs {
    std::string data, out;
    std::size_t m_per_image = 16;
    std::uint64_t seed = 0;
};

void add_fit_base(CLI::App& app, BaseArgs& a) {
    auto* s = app.add_subcommand("fit-base", "Build the nearest-neighbour memory bank from training features");
    s->add_option("--data", a.data, "Dataset directory (manifest.json)")->required();
    s->add_option("--out", a.out, "Output directory for the coreset")->required();
    s->add_option("--m-per-image", a.m_per_image, "Locations sampled per training image");
    s->add_option("--seed", a.seed, "Sampling seed");
}

int do_fit_base(const CLI::App& sub, BaseArgs& a, std::ostream& out) {
    const auto m = load_manifest(a.data);
    std::vector<Tensor> feats;
    std::vector<int> classes;
    std::string ids;
    for (const auto* e : m.split(Split::Train)) {
        feats.push_back(load_features(m, *e));
        if (e->class_id) classes.push_back(*e->class_id);
        ids += e->image_id + "\n";
    }
    if (classes.size() != feats.size()) classes.clear();
    const auto c = fit_coreset(feats, a.m_per_image, a.seed, classes);
    write_coreset(a.out, c);
    write_text(fs::path(a.out) / "coreset_images.txt", ids);
    write_resolved_config(a.out, sub);
    out << "coreset of " << c.points.dim(0) << " points from " << feats.size() << " images\n";
    return 0;
}

struct ScoreArgs {
    std::string data, base, out, split = "all";
};

void add_score(CLI::App& app, ScoreArgs& a) {
    auto* s = app.add_subcommand("score", "Score images against the memory bank");
    s->add_option("--data", a.data, "Dataset directory (manifest.json)")->required();
    s->add_option("--base", a.base, "Coreset directory from fit-base")->required();
    s->add_option("--out", a.out, "Output directory for score maps")->required();
    s->add_option("--split", a.split, "train | test | all")->check(CLI::IsMember({"train", "test", "all"}));
}

int do_score(const CLI::App& sub, ScoreArgs& a, std::ostream& out) {
    const auto m = load_manifest(a.data);
    const auto coreset = read_coreset(a.base);
    std::map<std::string, std::size_t> source_of;
    {
        std::ifstream f(fs::path(a.base) / "coreset_images.txt");
        if (!f) fail(ErrorKind::Data, "missing coreset_images.txt in " + a.base);
        std::size_t i = 0;
        for (std::string line; std::getline(f, line);) source_of[line] = i++;
    }
    MapSet maps;
    for (const auto& e : m.entries) {
        if (a.split != "all" && to_string(e.split) != a.split) continue;
        std::optional<std::size_t> exclude;
        if (auto it = source_of.find(e.image_id); it != source_of.end()) exclude = it->second;
        maps.emplace(e.image_id, score_knn(load_features(m, e), coreset, exclude));
    }
    write_map_set(a.out, m, maps);
    write_resolved_config(a.out, sub);
    out << "scored " << maps.size() << " images\n";
    return 0;
}

// ---------------------------------------------------------------------------
// stats

struct StatsArgs {
    std::string data, out;
};

void add_stats(CLI::App& app, StatsArgs& a) {
    auto* s = app.add_subcommand("stats", "Fit per-class statistics on training score maps");
    s->add_option("--data", a.data, "Scored dataset directory")->required();
    s->add_option("--out", a.out, "Output directory (class_stats.csv)")->required();
}

std::vector<ClassStats> fit_stats_from(const DatasetManifest& m) {
    const auto train = m.split(Split::Train);
    if (train.empty()) fail(ErrorKind::Data, "no training images");
    std::vector<Tensor> maps;
    maps.reserve(train.size());
    for (const auto* e : train) {
        if (!e->class_id) fail(ErrorKind::Usage, "class statistics need class_id on every training image");
        maps.push_back(load_map(m, *e));
    }
    ClassGroups groups;
    for (std::size_t i = 0; i < train.size(); ++i) groups[*train[i]->class_id].push_back(&maps[i]);
    return fit_class_stats(groups);
}

int do_stats(const CLI::App& sub, StatsArgs& a, std::ostream& out) {
    const auto stats = fit_stats_from(load_manifest(a.data));
    ensure_dir(a.out);
    write_class_stats_csv((fs::path(a.out) / "class_stats.csv").string(), stats);
    write_resolved_config(a.out, sub);
    out << "fitted statistics for " << stats.size() << " classes\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train-head

struct HeadArgs {
    std::string mode = "regressor", activation = "gelu", target = "meanmax", lr_schedule = "cosine";
    HeadConfig head;
    TrainConfig train;
};

void add_head_options(CLI::App* s, HeadArgs& a, bool with_mode = true) {
    if (with_mode) s->add_option("--mode", a.mode, "regressor | classifier")->check(CLI::IsMember({"regressor", "classifier"}));
    s->add_option("--n-conv", a.head.n_conv, "Convolution layers (0-2)");
    s->add_option("--n-linear", a.head.n_linear, "Linear layers (1-3)");
    s->add_option("--hidden", a.head.hidden_dim, "Hidden width of the linear layers");
    s->add_option("--dropout", a.head.dropout_rate, "Dropout rate before each linear layer");
    s->add_option("--activation", a.activation, "gelu | relu")->check(CLI::IsMember({"gelu", "relu"}));
    s->add_option("--target", a.target, "meanmax | meanstd")->check(CLI::IsMember({"meanmax", "meanstd"}));
    s->add_option("--alpha", a.head.alpha, "Smooth-L1 threshold (normalized target units)");
}

void add_train_options(CLI::App* s, HeadArgs& a) {
    s->add_option("--lr", a.train.lr, "SGD learning rate");
    s->add_option("--lr-schedule", a.lr_schedule, "cosine | constant")->check(CLI::IsMember({"cosine", "constant"}));
    s->add_option("--momentum", a.train.momentum, "SGD momentum");
    s->add_option("--wd", a.train.weight_decay, "Weight decay (coupled L2)");
    s->add_option("--batch", a.train.batch_size, "Batch size");
    s->add_option("--iterations", a.train.iterations, "Training iterations");
    s->add_option("--seed", a.train.seed, "Seed for init, dropout and batch sampling");
    s->add_option("--holdout", a.train.holdout_fraction, "Classifier holdout fraction");
}

void resolve_head(HeadArgs& a) {
    a.head.mode = parse_head_mode(a.mode);
    a.head.activation = parse_activation(a.activation);
    a.train.schedule = parse_lr_schedule(a.lr_schedule);
    a.head.target = parse_variant(a.target);
    a.head.validate();
    a.train.validate();
}

struct TrainHeadArgs {
    std::string data, out;
    HeadArgs h;
};

void add_train_head(CLI::App& app, TrainHeadArgs& a) {
    auto* s = app.add_subcommand("train-head", "Train the statistics regressor or the class classifier");
    s->add_option("--data", a.data, "Scored dataset directory")->required();
    s->add_option("--out", a.out, "Checkpoint directory")->required();
    add_head_options(s, a.h);
    add_train_options(s, a.h);
}

int do_train_head(const CLI::App& sub, TrainHeadArgs& a, std::ostream& out) {
    resolve_head(a.h);
    const auto m = load_manifest(a.data);
    const auto train = m.split(Split::Train);
    std::vector<Tensor> feats;
    for (const auto* e : train) feats.push_back(load_features(m, *e));
    HeadModel model = [&] {
        if (a.h.head.mode == HeadMode::Regressor) {
            std::vector<Tensor> maps;
            for (const auto* e : train) maps.push_back(load_map(m, *e));
            return train_regressor(feats, maps, a.h.head, a.h.train);
        }
        std::vector<int> labels;
        for (const auto* e : train) {
            if (!e->class_id) fail(ErrorKind::Usage, "classifier training needs class_id on every training image");
            labels.push_back(*e->class_id);
        }
        return train_classifier(feats, labels, a.h.head, a.h.train);
    }();
    save_head(a.out, model);
    write_resolved_config(a.out, sub);
    const auto smooth = smoothed_trace(model.loss_trace);
    out << "trained " << to_string(model.config.mode) << " (" << model.config.structure() << ")";
    if (!smooth.empty()) out << ", loss " << smooth.front() << " -> " << smooth.back();
    if (model.holdout_accuracy) out << ", holdout accuracy " << *model.holdout_accuracy;
    out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// align

struct AlignArgs {
    std::string data, out, mode = "none", stats, model, variant = "meanmax";
    double eps = kDefaultEps;
};

void add_align(CLI::App& app, AlignArgs& a) {
    auto* s = app.add_subcommand("align", "Calibrate score maps");
    s->add_option("--data", a.data, "Scored dataset directory")->required();
    s->add_option("--out", a.out, "Output directory for calibrated maps")->required();
    s->add_option("--mode", a.mode, "none | oracle | classifier | regressor")
        ->check(CLI::IsMember({"none", "oracle", "classifier", "regressor"}));
    s->add_option("--stats", a.stats, "class_stats.csv (oracle, classifier)");
    s->add_option("--model", a.model, "Head checkpoint directory (classifier, regressor)");
    s->add_option("--variant", a.variant, "meanmax | meanstd (oracle, classifier)")
        ->check(CLI::IsMember({"meanmax", "meanstd"}));
    s->add_option("--eps", a.eps, "Denominator clamp");
}

HeadModel load_model_for(const std::string& path, HeadMode want) {
    if (path.empty()) fail(ErrorKind::Usage, "--model is required for this mode");
    if (!fs::exists(fs::path(path) / "header.json")) fail(ErrorKind::Data, "missing checkpoint: " + path);
    HeadModel model = load_head(path);
    if (model.config.mode != want)
        fail(ErrorKind::Usage, "checkpoint " + path + " holds a " + to_string(model.config.mode) + " head");
    return model;
}

struct AlignOutcome {
    MapSet maps;
    std::size_t clamped = 0;
    std::string log;  // CSV rows: image_id,u,gamma,clamped,predicted_class
};

AlignOutcome calibrate_regressor(HeadModel& model, const DatasetManifest& m, const MapSet& maps, double eps) {
    AlignOutcome r;
    for (const auto& [id, map] : maps) {
        const auto* e = m.find(id);
        const auto pred = predict_stats(model, load_features(m, *e));
        auto n = calibrate(map, pred, eps);
        r.clamped += n.clamped;
        r.log += id + "," + fmt(pred.u) + "," + fmt(pred.gamma()) + "," + (n.clamped ? "1" : "0") + ",\n";
        r.maps.emplace(id, std::move(n.map));
    }
    return r;
}

int do_align(const CLI::App& sub, AlignArgs& a, std::ostream& out) {
    const auto m = load_manifest(a.data);
    const auto variant = parse_variant(a.variant);
    const MapSet maps = load_maps(m, std::nullopt);
    AlignOutcome r;
    if (a.mode == "none") {
        r.maps = maps;
    } else if (a.mode == "oracle") {
        if (!m.has_class_ids()) fail(ErrorKind::Usage, "--mode oracle needs class_id on every image");
        if (a.stats.empty()) fail(ErrorKind::Usage, "--mode oracle needs --stats");
        const auto stats = read_class_stats_csv(a.stats);
        std::map<std::string, int> class_of;
        for (const auto& e : m.entries) class_of[e.image_id] = *e.class_id;
        auto aligned = apply_oracle_alignment(maps, class_of, stats, variant, a.eps);
        for (const auto& [id, map] : aligned.maps) {
            const auto& st = find_stats(stats, class_of[id]);
            r.log += id + "," + fmt(st.u) + "," + fmt(st.reference_max(variant)) + ",," + std::to_string(st.class_id) + "\n";
        }
        r.maps = std::move(aligned.maps);
        r.clamped = aligned.clamped;
    } else if (a.mode == "classifier") {
        if (a.stats.empty()) fail(ErrorKind::Usage, "--mode classifier needs --stats");
        const auto stats = read_class_stats_csv(a.stats);
        HeadModel model = load_model_for(a.model, HeadMode::Classifier);
        for (const auto& [id, map] : maps) {
            const Tensor f = load_features(m, *m.find(id));
            const int cls = predict_class(model, f);
            auto n = calibrate_with_classifier(model, stats, map, f, variant, a.eps);
            const auto& st = find_stats(stats, cls);
            r.clamped += n.clamped;
            r.log += id + "," + fmt(st.u) + "," + fmt(st.reference_max(variant)) + "," + (n.clamped ? "1" : "0") +
                     "," + std::to_string(cls) + "\n";
            r.maps.emplace(id, std::move(n.map));
        }
    } else {
        HeadModel model = load_model_for(a.model, HeadMode::Regressor);
        r = calibrate_regressor(model, m, maps, a.eps);
    }
    write_map_set(a.out, m, r.maps);
    write_text(fs::path(a.out) / "align_log.csv", "image_id,u,gamma,clamped,predicted_class\n" + r.log);
    write_resolved_config(a.out, sub);
    out << "aligned " << r.maps.size() << " maps (" << a.mode << ")";
    if (r.clamped) out << ", " << r.clamped << " clamped denominators";
    out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string data, out, top_fraction = "0.01";
};

void add_eval(CLI::App& app, EvalArgs& a) {
    auto* s = app.add_subcommand("eval", "Compute mixed and per-class detection metrics");
    s->add_option("--data", a.data, "Dataset directory with score maps")->required();
    s->add_option("--out", a.out, "Output directory (metrics.csv)")->required();
    s->add_option("--top-fraction", a.top_fraction, "Image score: 'max' or fraction of top pixels");
}

int do_eval(const CLI::App& sub, EvalArgs& a, std::ostream& out) {
    const auto agg = Aggregation::parse(a.top_fraction);
    const auto m = load_manifest(a.data);
    const auto reports = evaluate(m, load_maps(m, Split::Test), agg);
    ensure_dir(a.out);
    write_metrics_csv((fs::path(a.out) / "metrics.csv").string(), reports);
    write_resolved_config(a.out, sub);
    write_metrics_csv(out, reports);
    return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
    std::vector<std::string> metrics, maps;
    std::string out, top_fraction = "0.01";
    std::size_t bins = 40;
};

void add_report(CLI::App& app, ReportArgs& a) {
    auto* s = app.add_subcommand("report", "Aggregate metric CSVs and emit per-class score histograms");
    s->add_option("--metrics", a.metrics, "NAME=metrics.csv (repeatable)");
    s->add_option("--maps", a.maps, "NAME=dataset dir with score maps (repeatable)");
    s->add_option("--out", a.out, "Output directory")->required();
    s->add_option("--bins", a.bins, "Histogram bins")->check(CLI::PositiveNumber);
    s->add_option("--top-fraction", a.top_fraction, "Image score aggregation for histograms");
}

std::pair<std::string, std::string> split_named(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorKind::Usage, "expected NAME=PATH, got " + s);
    return {s.substr(0, eq), s.substr(eq + 1)};
}

int do_report(const CLI::App& sub, ReportArgs& a, std::ostream& out) {
    ensure_dir(a.out);
    std::ostringstream summary;
    summary << "run,scope,i_auroc,i_ap,p_auroc,p_ap,n_images,n_pixels\n";
    for (const auto& spec : a.metrics) {
        const auto [name, path] = split_named(spec);
        std::ostringstream rows;
        write_metrics_csv(rows, read_metrics_csv(path));
        std::istringstream in(rows.str());
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) summary << name << ',' << line << '\n';
    }
    write_text(fs::path(a.out) / "summary.csv", summary.str());

    const auto agg = Aggregation::parse(a.top_fraction);
    for (const auto& spec : a.maps) {
        const auto [name, dir] = split_named(spec);
        const auto m = load_manifest(dir);
        struct Row {
            std::string cls, split, label;
            double score;
        };
        std::vector<Row> rows;
        for (const auto& e : m.entries)
            rows.push_back({e.class_id ? std::to_string(*e.class_id) : "NA", to_string(e.split), to_string(e.label),
                            image_score(load_map(m, e), agg)});
        if (rows.empty()) continue;
        double lo = rows.front().score, hi = lo;
        for (const auto& r : rows) lo = std::min(lo, r.score), hi = std::max(hi, r.score);
        const double width = hi > lo ? (hi - lo) / static_cast<double>(a.bins) : 1.0;
        std::map<std::tuple<std::string, std::string, std::string>, std::vector<std::size_t>> hist;
        for (const auto& r : rows) {
            auto& h = hist[{r.cls, r.split, r.label}];
            h.resize(a.bins, 0);
            const auto b = std::min(a.bins - 1, static_cast<std::size_t>((r.score - lo) / width));
            ++h[b];
        }
        std::ostringstream csv;
        csv << "class_id,split,label,bin_lo,bin_hi,count\n";
        for (const auto& [key, counts] : hist) {
            for (std::size_t b = 0; b < counts.size(); ++b) {
                csv << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ','
                    << fmt(lo + width * static_cast<double>(b)) << ',' << fmt(lo + width * static_cast<double>(b + 1))
                    << ',' << counts[b] << '\n';
            }
        }
        write_text(fs::path(a.out) / ("histogram_" + name + ".csv"), csv.str());
    }
    write_resolved_config(a.out, sub);
    out << "report written to " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// grad-check

struct GradArgs {
    HeadArgs h;
    std::string out;
    std::size_t channels = 8, grid = 8, classes = 4;
    double tolerance = 1e-4;
    bool all = false;
};

void add_grad_check(CLI::App& app, GradArgs& a) {
    auto* s = app.add_subcommand("grad-check", "Compare analytic head gradients with central differences");
    add_head_options(s, a.h);
    s->add_option("--seed", a.h.train.seed, "Seed for weights, input and dropout mask");
    s->add_option("--channels", a.channels, "Input channels");
    s->add_option("--grid", a.grid, "Input grid side");
    s->add_option("--classes", a.classes, "Classifier outputs");
    s->add_option("--tolerance", a.tolerance, "Maximum accepted relative error");
    s->add_flag("--all-structures", a.all, "Check every structure of the ablation grid");
    s->add_option("--out", a.out, "Optional output directory (grad_check.csv)");
}

struct Structure {
    int n_conv, n_linear;
};
constexpr Structure kStructures[] = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {2, 2}};
constexpr double kDropoutGrid[] = {0.0, 0.25, 0.5, 0.75};

int do_grad_check(const CLI::App& sub, GradArgs& a, std::ostream& out) {
    resolve_head(a.h);
    std::vector<HeadConfig> configs;
    if (a.all) {
        for (auto s : kStructures) {
            HeadConfig c = a.h.head;
            c.n_conv = s.n_conv;
            c.n_linear = s.n_linear;
            configs.push_back(c);
        }
    } else {
        configs.push_back(a.h.head);
    }
    std::mt19937_64 rng(mix_seed(a.h.train.seed, 7));
    std::normal_distribution<double> n01;
    Tensor input({a.channels, a.grid, a.grid});
    for (double& v : input.data) v = n01(rng);

    std::ostringstream csv;
    csv << "structure,mode,max_rel_error,worst,checked,pass\n";
    bool ok = true;
    for (const auto& c : configs) {
        const std::size_t out_dim = c.mode == HeadMode::Regressor ? 2 : a.classes;
        auto net = net::Network::build(head_layers(c, a.channels, out_dim), a.h.train.seed);
        net::LossFn loss;
        if (c.mode == HeadMode::Regressor) {
            const double t0 = n01(rng), t1 = n01(rng);
            loss = [c, t0, t1](const Tensor& o) {
                net::Loss l;
                l.grad.resize(2);
                l.value = net::smooth_l1(o[0], t0, c.alpha, &l.grad[0]) + net::smooth_l1(o[1], t1, c.alpha, &l.grad[1]);
                return l;
            };
        } else {
            loss = [](const Tensor& o) { return net::cross_entropy(o.values(), 0); };
        }
        const auto r = net::grad_check(net, input, loss);
        const bool pass = r.max_rel_error <= a.tolerance;
        ok = ok && pass;
        char line[200];
        std::snprintf(line, sizeof line, "%s,%s,%.3e,%s,%zu,%d\n", c.structure().c_str(), to_string(c.mode).c_str(),
                      r.max_rel_error, r.worst.c_str(), r.checked, pass ? 1 : 0);
        csv << line;
    }
    out << csv.str();
    if (!a.out.empty()) {
        ensure_dir(a.out);
        write_text(fs::path(a.out) / "grad_check.csv", csv.str());
        write_resolved_config(a.out, sub);
    }
    if (!ok) fail(ErrorKind::Numerical, "gradient check exceeded tolerance");
    return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
    std::string data, out;
    HeadArgs h;
};

void add_ablate(CLI::App& app, AblateArgs& a) {
    auto* s = app.add_subcommand("ablate", "Sweep head structure, dropout rate and image-score aggregation");
    s->add_option("--data", a.data, "Scored dataset directory")->required();
    s->add_option("--out", a.out, "Output directory (ablation.csv)")->required();
    s->add_option("--hidden", a.h.head.hidden_dim, "Hidden width of the linear layers");
    s->add_option("--activation", a.h.activation, "gelu | relu")->check(CLI::IsMember({"gelu", "relu"}));
    s->add_option("--alpha", a.h.head.alpha, "Smooth-L1 threshold (normalized target units)");
    add_train_options(s, a.h);
}

int do_ablate(const CLI::App& sub, AblateArgs& a, std::ostream& out) {
    resolve_head(a.h);
    const auto m = load_manifest(a.data);
    const auto train = m.split(Split::Train);
    std::vector<Tensor> feats, maps;
    for (const auto* e : train) {
        feats.push_back(load_features(m, *e));
        maps.push_back(load_map(m, *e));
    }
    const MapSet test_maps = load_maps(m, Split::Test);
    MapSet masks;
    for (const auto* e : m.split(Split::Test))
        if (e->mask_path) masks.emplace(e->image_id, read_tensor(m.resolve(*e->mask_path)));

    const Aggregation aggs[] = {Aggregation::max(), Aggregation::top(0.001), Aggregation::top(0.01),
                                Aggregation::top(0.02)};
    std::map<std::string, double> raw;
    for (const auto& g : aggs) raw[g.label()] = evaluate(m, test_maps, masks, g).front().i_auroc;

    std::ostringstream csv;
    csv << "structure,dropout,aggregation,raw_i_auroc,cada_i_auroc,cada_i_ap,cada_p_auroc,cada_p_ap\n";
    for (auto s : kStructures) {
        for (double rate : kDropoutGrid) {
            HeadConfig c = a.h.head;
            c.mode = HeadMode::Regressor;
            c.n_conv = s.n_conv;
            c.n_linear = s.n_linear;
            c.dropout_rate = rate;
            HeadModel model = train_regressor(feats, maps, c, a.h.train);
            const auto cal = calibrate_regressor(model, m, test_maps, kDefaultEps);
            for (const auto& g : aggs) {
                const auto rep = evaluate(m, cal.maps, masks, g).front();
                csv << c.structure() << ',' << rate << ',' << g.label() << ',' << fmt(raw[g.label()]) << ','
                    << fmt(rep.i_auroc) << ',' << fmt(rep.i_ap) << ',' << (rep.p_auroc ? fmt(*rep.p_auroc) : "NA")
                    << ',' << (rep.p_ap ? fmt(*rep.p_ap) : "NA") << '\n';
            }
            out << "ablate " << c.structure() << " dropout " << rate << " done\n";
        }
    }
    ensure_dir(a.out);
    write_text(fs::path(a.out) / "ablation.csv", csv.str());
    write_resolved_config(a.out, sub);
    return 0;
}

int run_app(CLI::App& app, const std::function<void()>& parse, std::ostream& out, std::ostream& err) {
    GenArgs gen;
    BaseArgs base;
    ScoreArgs score;
    StatsArgs stats;
    TrainHeadArgs train_head;
    AlignArgs align;
    EvalArgs eval;
    ReportArgs report;
    GradArgs grad;
    AblateArgs ablate;
    app.option_defaults()->always_capture_default();
    add_gen(app, gen);
    add_fit_base(app, base);
    add_score(app, score);
    add_stats(app, stats);
    add_train_head(app, train_head);
    add_align(app, align);
    add_eval(app, eval);
    add_report(app, report);
    add_grad_check(app, grad);
    add_ablate(app, ablate);
    app.require_subcommand(1);

    try {
        parse();
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorKind::Usage);
    }

    try {
        const CLI::App* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        if (name == "gen") return do_gen(*sub, gen, out);
        if (name == "fit-base") return do_fit_base(*sub, base, out);
        if (name == "score") return do_score(*sub, score, out);
        if (name == "stats") return do_stats(*sub, stats, out);
        if (name == "train-head") return do_train_head(*sub, train_head, out);
        if (name == "align") return do_align(*sub, align, out);
        if (name == "eval") return do_eval(*sub, eval, out);
        if (name == "report") return do_report(*sub, report, out);
        if (name == "grad-check") return do_grad_check(*sub, grad, out);
        if (name == "ablate") return do_ablate(*sub, ablate, out);
        err << "error: unknown subcommand " << name << "\n";
        return static_cast<int>(ErrorKind::Usage);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorKind::Data);
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Anomaly-score distribution alignment toolkit", "cada"};
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    return run_app(app, [&] { app.parse(reversed); }, out, err);
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace cada::cli
