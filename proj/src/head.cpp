#include "cada/head.hpp"

#include <algorithm>
#include <numbers>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "cada/error.hpp"

namespace cada {

using nlohmann::json;

std::string to_string(HeadMode m) { return m == HeadMode::Regressor ? "regressor" : "classifier"; }
std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

HeadMode parse_head_mode(const std::string& s) {
    if (s == "regressor") return HeadMode::Regressor;
    if (s == "classifier") return HeadMode::Classifier;
    fail(ErrorKind::Usage, "unknown head mode: " + s);
}

std::string to_string(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

LrSchedule parse_lr_schedule(const std::string& s) {
    if (s == "cosine") return LrSchedule::Cosine;
    if (s == "constant") return LrSchedule::Constant;
    fail(ErrorKind::Usage, "unknown lr schedule: " + s);
}

Activation parse_activation(const std::string& s) {
    if (s == "gelu") return Activation::Gelu;
    if (s == "relu") return Activation::Relu;
    fail(ErrorKind::Usage, "unknown activation: " + s);
}

void HeadConfig::validate() const {
    if (n_conv < 0 || n_conv > 2) fail(ErrorKind::Usage, "n_conv must be 0, 1 or 2");
    if (n_linear < 1 || n_linear > 3) fail(ErrorKind::Usage, "n_linear must be 1, 2 or 3");
    if (hidden_dim == 0) fail(ErrorKind::Usage, "hidden_dim must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail(ErrorKind::Usage, "dropout rate must lie in [0,1)");
    if (!(alpha > 0.0)) fail(ErrorKind::Usage, "alpha must be positive");
}

std::string HeadConfig::structure() const {
    std::string s;
    if (n_conv > 0) s = std::to_string(n_conv) + "conv+";
    return s + std::to_string(n_linear) + "lin";
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) fail(ErrorKind::Usage, "lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::Usage, "momentum must lie in [0,1)");
    if (weight_decay < 0.0) fail(ErrorKind::Usage, "weight decay must be non-negative");
    if (batch_size == 0) fail(ErrorKind::Usage, "batch size must be positive");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
        fail(ErrorKind::Usage, "holdout fraction must lie in [0,1)");
}

double TrainConfig::lr_at(std::size_t iteration) const {
    if (schedule == LrSchedule::Constant || iterations == 0) return lr;
    const double t = static_cast<double>(iteration) / static_cast<double>(iterations);
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<net::LayerSpec> head_layers(const HeadConfig& cfg, std::size_t in_channels, std::size_t out_dim) {
    cfg.validate();
    using net::LayerKind;
    const auto act = cfg.activation == Activation::Gelu ? LayerKind::Gelu : LayerKind::Relu;
    std::vector<net::LayerSpec> specs;
    for (int i = 0; i < cfg.n_conv; ++i) {
        specs.push_back({LayerKind::Conv3x3, in_channels, in_channels, 0.0});
        specs.push_back({act, 0, 0, 0.0});
    }
    specs.push_back({LayerKind::GlobalAvgPool, 0, 0, 0.0});
    std::size_t dim = in_channels;
    for (int i = 0; i < cfg.n_linear; ++i) {
        const bool last = i + 1 == cfg.n_linear;
        const std::size_t out = last ? out_dim : cfg.hidden_dim;
        if (dim >= cfg.hidden_dim) specs.push_back({LayerKind::Dropout, 0, 0, cfg.dropout_rate});
        specs.push_back({LayerKind::Linear, dim, out, 0.0});
        if (!last) specs.push_back({act, 0, 0, 0.0});
        dim = out;
    }
    return specs;
}

Tensor InputNorm::apply(const Tensor& features) const {
    if (features.ndim() != 3 || features.dim(0) != mean.size())
        fail(ErrorKind::Data, "head expects features with " + std::to_string(mean.size()) + " channels, got " +
                                  shape_string(features.shape));
    Tensor x = features;
    x.dtype = DType::F64;
    const std::size_t hw = x.dim(1) * x.dim(2);
    for (std::size_t c = 0; c < mean.size(); ++c)
        for (std::size_t p = 0; p < hw; ++p) x[c * hw + p] = (x[c * hw + p] - mean[c]) / scale[c];
    return x;
}

ImageStats compute_image_stats(const Tensor& map) {
    if (map.size() == 0) fail(ErrorKind::Data, "image statistics of an empty map");
    ImageStats s;
    double sum = 0.0;
    for (double v : map.data) sum += v;
    const double n = static_cast<double>(map.size());
    s.u = sum / n;
    s.gamma = *std::max_element(map.data.begin(), map.data.end());
    double ss = 0.0;
    for (double v : map.data) ss += (v - s.u) * (v - s.u);
    s.sigma = std::sqrt(ss / n);
    return s;
}

namespace {

std::size_t channels_of(std::span<const Tensor> features) {
    if (features.empty()) fail(ErrorKind::Data, "empty training set");
    const auto& shape = features.front().shape;
    if (shape.size() != 3) fail(ErrorKind::Data, "features must be [C,H,W], got " + shape_string(shape));
    for (const auto& f : features)
        if (f.ndim() != 3 || f.dim(0) != shape[0])
            fail(ErrorKind::Data, "inconsistent feature channels: " + shape_string(f.shape));
    return shape[0];
}

InputNorm fit_input_norm(std::span<const Tensor> features, std::size_t channels) {
    InputNorm n;
    n.mean.assign(channels, 0.0);
    n.scale.assign(channels, 1.0);
    std::vector<double> ss(channels, 0.0);
    std::size_t count = 0;
    for (const auto& f : features) {
        const std::size_t hw = f.dim(1) * f.dim(2);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < hw; ++p) n.mean[c] += f[c * hw + p];
        count += hw;
    }
    for (auto& m : n.mean) m /= static_cast<double>(count);
    for (const auto& f : features) {
        const std::size_t hw = f.dim(1) * f.dim(2);
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < hw; ++p) ss[c] += (f[c * hw + p] - n.mean[c]) * (f[c * hw + p] - n.mean[c]);
    }
    for (std::size_t c = 0; c < channels; ++c) {
        const double sd = std::sqrt(ss[c] / static_cast<double>(count));
        n.scale[c] = sd > 0.0 ? sd : 1.0;
    }
    return n;
}

HeadModel make_model(const HeadConfig& head, const TrainConfig& train, std::span<const Tensor> features,
                     std::size_t out_dim) {
    const std::size_t channels = channels_of(features);
    HeadModel m(head, net::Network::build(head_layers(head, channels, out_dim), train.seed));
    m.in_channels = channels;
    m.seed = train.seed;
    m.input_norm = fit_input_norm(features, channels);
    return m;
}

// Runs the minibatch loop; per_sample returns the loss of one sample and
// its gradient with respect to the network output.
template <typename PerSample>
void run_sgd(HeadModel& model, std::span<const Tensor> features, std::span<const std::size_t> pool,
             const TrainConfig& train, PerSample&& per_sample) {
    std::vector<Tensor> inputs;
    inputs.reserve(features.size());
    for (const auto& f : features) inputs.push_back(model.input_norm.apply(f));
    net::OptimState opt{train.lr, train.momentum, train.weight_decay, {}};
    std::mt19937_64 sampler(train.seed * 0x2545F4914F6CDD1Dull + 1);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const auto params = model.net.params();
    model.net.zero_grad();
    const double inv_batch = 1.0 / static_cast<double>(train.batch_size);
    model.loss_trace.reserve(train.iterations);
    for (std::size_t it = 0; it < train.iterations; ++it) {
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < train.batch_size; ++b) {
            const std::size_t i = pool[pick(sampler)];
            const Tensor out = model.net.forward(inputs[i], net::Mode::Train);
            net::Loss l = per_sample(i, out);
            if (!std::isfinite(l.value))
                fail(ErrorKind::Numerical, "non-finite training loss at iteration " + std::to_string(it));
            batch_loss += l.value;
            for (double& g : l.grad) g *= inv_batch;
            model.net.backward(Tensor(out.shape, std::move(l.grad)));
        }
        model.loss_trace.push_back(batch_loss * inv_batch);
        opt.lr = train.lr_at(it);
        try {
            net::sgd_step(params, opt);
        } catch (const Error& e) {
            fail(e.kind(), std::string(e.what()) + " at iteration " + std::to_string(it));
        }
    }
}

}  // namespace

HeadModel train_regressor(std::span<const Tensor> features, std::span<const Tensor> maps, const HeadConfig& head,
                          const TrainConfig& train) {
    if (head.mode != HeadMode::Regressor) fail(ErrorKind::Usage, "train_regressor needs a regressor-mode config");
    train.validate();
    if (features.size() != maps.size()) fail(ErrorKind::Data, "features and score maps differ in count");
    // Targets: (u, gamma) or (u, u + 3 sigma), z-normalized per component.
    std::vector<std::array<double, 2>> targets;
    targets.reserve(maps.size());
    for (const auto& m : maps) {
        const auto s = compute_image_stats(m);
        targets.push_back({s.u, head.target == StatVariant::MeanMax ? s.gamma : s.u + 3.0 * s.sigma});
    }
    HeadModel model = make_model(head, train, features, 2);
    auto& tn = model.target_norm;
    tn.log_space = std::all_of(targets.begin(), targets.end(), [](const auto& t) { return t[0] > 0.0 && t[1] > 0.0; });
    const double n = static_cast<double>(targets.size());
    for (int k = 0; k < 2; ++k) {
        double mean = 0.0, ss = 0.0;
        for (const auto& t : targets) mean += tn.log_space ? std::log(t[k]) : t[k];
        mean /= n;
        for (const auto& t : targets) {
            const double v = tn.log_space ? std::log(t[k]) : t[k];
            ss += (v - mean) * (v - mean);
        }
        const double sd = std::sqrt(ss / n);
        model.target_norm.mean[k] = mean;
        model.target_norm.scale[k] = sd > 0.0 ? sd : 1.0;
    }
    for (auto& t : targets)
        for (int k = 0; k < 2; ++k) t[k] = tn.encode(k, t[k]);

    std::vector<std::size_t> pool(features.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    run_sgd(model, features, pool, train, [&](std::size_t i, const Tensor& out) {
        net::Loss l;
        l.grad.resize(2);
        // mean over the two outputs
        for (int k = 0; k < 2; ++k) {
            l.value += 0.5 * net::smooth_l1(out[k], targets[i][k], head.alpha, &l.grad[k]);
            l.grad[k] *= 0.5;
        }
        return l;
    });
    return model;
}

HeadModel train_classifier(std::span<const Tensor> features, std::span<const int> class_ids, const HeadConfig& head,
                           const TrainConfig& train) {
    if (head.mode != HeadMode::Classifier) fail(ErrorKind::Usage, "train_classifier needs a classifier-mode config");
    train.validate();
    if (class_ids.empty()) fail(ErrorKind::Usage, "classifier training needs class_ids");
    if (features.size() != class_ids.size()) fail(ErrorKind::Data, "features and class labels differ in count");
    std::vector<int> classes(class_ids.begin(), class_ids.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) fail(ErrorKind::Usage, "classifier needs at least two classes");
    std::map<int, std::size_t> index_of;
    for (std::size_t i = 0; i < classes.size(); ++i) index_of[classes[i]] = i;

    HeadModel model = make_model(head, train, features, classes.size());
    model.class_ids = classes;

    std::vector<std::size_t> order(features.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffler(train.seed ^ 0xD1B54A32D192ED03ull);
    std::shuffle(order.begin(), order.end(), shuffler);
    const auto n_hold = static_cast<std::size_t>(train.holdout_fraction * static_cast<double>(order.size()));
    if (n_hold >= order.size()) fail(ErrorKind::Data, "holdout leaves no training images");
    std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<std::size_t> pool(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

    run_sgd(model, features, pool, train, [&](std::size_t i, const Tensor& out) {
        return net::cross_entropy(out.values(), index_of.at(class_ids[i]));
    });

    if (!held.empty()) {
        std::size_t correct = 0;
        for (auto i : held) correct += predict_class(model, features[i]) == class_ids[i] ? 1 : 0;
        model.holdout_accuracy = static_cast<double>(correct) / static_cast<double>(held.size());
    }
    return model;
}

PredictedStats predict_stats(HeadModel& model, const Tensor& features) {
    if (model.config.mode != HeadMode::Regressor) fail(ErrorKind::Usage, "predict_stats needs a regressor head");
    const Tensor out = model.net.forward(model.input_norm.apply(features), net::Mode::Eval);
    const auto& tn = model.target_norm;
    const double u = tn.decode(0, out[0]);
    const double ref = tn.decode(1, out[1]);
    PredictedStats p;
    p.variant = model.config.target;
    p.u = u;
    p.second = p.variant == StatVariant::MeanMax ? ref : (ref - u) / 3.0;
    return p;
}

std::vector<double> predict_logits(HeadModel& model, const Tensor& features) {
    if (model.config.mode != HeadMode::Classifier) fail(ErrorKind::Usage, "predict_class needs a classifier head");
    return model.net.forward(model.input_norm.apply(features), net::Mode::Eval).data;
}

int predict_class(HeadModel& model, const Tensor& features) {
    const auto logits = predict_logits(model, features);
    // max_element returns the first maximum; class_ids are ascending.
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    return model.class_ids.at(static_cast<std::size_t>(best));
}

Normalized calibrate(const Tensor& map, double u_hat, double gamma_hat, double eps) {
    return normalize_meanmax(map, u_hat, gamma_hat, eps);
}

Normalized calibrate(const Tensor& map, const PredictedStats& stats, double eps) {
    return stats.variant == StatVariant::MeanMax ? normalize_meanmax(map, stats.u, stats.second, eps)
                                                 : normalize_meanstd(map, stats.u, stats.second, eps);
}

Normalized calibrate_with_classifier(HeadModel& model, std::span<const ClassStats> stats, const Tensor& map,
                                     const Tensor& features, StatVariant variant, double eps) {
    const auto& st = find_stats(stats, predict_class(model, features));
    return variant == StatVariant::MeanMax ? normalize_meanmax(map, st.u, st.gamma, eps)
                                           : normalize_meanstd(map, st.u, st.sigma, eps);
}

std::vector<double> smoothed_trace(std::span<const double> trace, double decay) {
    std::vector<double> out;
    out.reserve(trace.size());
    double ema = 0.0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        ema = i == 0 ? trace[0] : decay * ema + (1.0 - decay) * trace[i];
        out.push_back(ema);
    }
    return out;
}

void save_head(const std::filesystem::path& dir, HeadModel& model) {
    const auto& c = model.config;
    json meta;
    meta["mode"] = to_string(c.mode);
    meta["n_conv"] = c.n_conv;
    meta["n_linear"] = c.n_linear;
    meta["hidden_dim"] = c.hidden_dim;
    meta["dropout_rate"] = c.dropout_rate;
    meta["activation"] = to_string(c.activation);
    meta["target"] = to_string(c.target);
    meta["alpha"] = c.alpha;
    meta["in_channels"] = model.in_channels;
    meta["seed"] = model.seed;
    meta["target_norm"] = {{"log_space", model.target_norm.log_space},
                           {"mean", {model.target_norm.mean[0], model.target_norm.mean[1]}},
                           {"scale", {model.target_norm.scale[0], model.target_norm.scale[1]}}};
    meta["input_norm"] = {{"mean", model.input_norm.mean}, {"scale", model.input_norm.scale}};
    meta["class_ids"] = model.class_ids;
    if (model.holdout_accuracy) meta["holdout_accuracy"] = *model.holdout_accuracy;
    net::save_checkpoint(dir, model.net, meta);

    std::ofstream log(dir / "train_log.csv", std::ios::trunc);
    if (!log) fail(ErrorKind::Data, "cannot write training log in " + dir.string());
    log << "iteration,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < model.loss_trace.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, model.loss_trace[i]);
        log << buf;
    }
}

HeadModel load_head(const std::filesystem::path& dir) {
    auto ck = net::load_checkpoint(dir);
    HeadModel m(HeadConfig{}, std::move(ck.net));
    const auto& meta = ck.meta;
    try {
        m.config.mode = parse_head_mode(meta.at("mode"));
        m.config.n_conv = meta.at("n_conv");
        m.config.n_linear = meta.at("n_linear");
        m.config.hidden_dim = meta.at("hidden_dim");
        m.config.dropout_rate = meta.at("dropout_rate");
        m.config.activation = parse_activation(meta.at("activation"));
        m.config.target = parse_variant(meta.at("target"));
        m.config.alpha = meta.at("alpha");
        m.in_channels = meta.at("in_channels");
        m.seed = meta.at("seed");
        for (int k = 0; k < 2; ++k) {
            m.target_norm.log_space = meta.at("target_norm").value("log_space", false);
            m.target_norm.mean[k] = meta.at("target_norm").at("mean").at(k);
            m.target_norm.scale[k] = meta.at("target_norm").at("scale").at(k);
        }
        m.class_ids = meta.at("class_ids").get<std::vector<int>>();
        m.input_norm.mean = meta.at("input_norm").at("mean").get<std::vector<double>>();
        m.input_norm.scale = meta.at("input_norm").at("scale").get<std::vector<double>>();
        if (m.input_norm.mean.size() != m.in_channels || m.input_norm.scale.size() != m.in_channels)
            fail(ErrorKind::Data, dir.string() + ": input normalization does not match in_channels");
        if (meta.contains("holdout_accuracy")) m.holdout_accuracy = meta.at("holdout_accuracy").get<double>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, dir.string() + ": bad checkpoint metadata: " + e.what());
    }
    const std::size_t out_dim = m.config.mode == HeadMode::Regressor ? 2 : m.class_ids.size();
    if (m.net.specs() != head_layers(m.config, m.in_channels, out_dim))
        fail(ErrorKind::Data, dir.string() + ": layer list does not match the stored head config");
    return m;
}

}  // namespace cada
