#include "cada/net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>

#include "cada/error.hpp"

namespace cada::net {

std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv3x3: return "conv3x3";
        case LayerKind::Linear: return "linear";
        case LayerKind::Gelu: return "gelu";
        case LayerKind::Relu: return "relu";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::GlobalAvgPool: return "global_avg_pool";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string& s) {
    for (auto k : {LayerKind::Conv3x3, LayerKind::Linear, LayerKind::Gelu, LayerKind::Relu, LayerKind::Dropout,
                   LayerKind::GlobalAvgPool})
        if (to_string(k) == s) return k;
    fail(ErrorKind::Data, "unknown layer kind: " + s);
}

// ---------------------------------------------------------------------------
// Conv3x3: stride 1, zero padding 1.

Conv3x3::Conv3x3(std::size_t in_ch, std::size_t out_ch)
    : in_ch_(in_ch), out_ch_(out_ch), weight_("conv.weight", {out_ch, in_ch, 3, 3}), bias_("conv.bias", {out_ch}) {
    if (in_ch == 0 || out_ch == 0) fail(ErrorKind::Usage, "conv3x3 channels must be positive");
}

// Patches are unfolded into cols_ [C*9, H*W] so that every inner loop runs
// over the H*W positions.
Tensor Conv3x3::forward(const Tensor& x, Mode) {
    if (x.ndim() != 3 || x.dim(0) != in_ch_)
        fail(ErrorKind::Data, "conv3x3 expects [" + std::to_string(in_ch_) + ",H,W], got " + shape_string(x.shape));
    in_shape_ = x.shape;
    const std::size_t H = x.dim(1), W = x.dim(2), P = H * W, R = in_ch_ * 9;
    cols_.assign(R * P, 0.0);
    for (std::size_t c = 0; c < in_ch_; ++c) {
        const double* xc = &x.data[c * P];
        for (int di = -1; di <= 1; ++di) {
            for (int dj = -1; dj <= 1; ++dj) {
                double* col = &cols_[(c * 9 + (di + 1) * 3 + (dj + 1)) * P];
                const std::size_t i0 = di < 0 ? 1 : 0, i1 = di > 0 ? H - 1 : H;
                const std::size_t j0 = dj < 0 ? 1 : 0, j1 = dj > 0 ? W - 1 : W;
                for (std::size_t i = i0; i < i1; ++i)
                    for (std::size_t j = j0; j < j1; ++j) col[i * W + j] = xc[(i + di) * W + j + dj];
            }
        }
    }
    Tensor y({out_ch_, H, W});
    const double* w = weight_.value.data.data();
    for (std::size_t o = 0; o < out_ch_; ++o) {
        double* yo = &y.data[o * P];
        std::fill(yo, yo + P, bias_.value[o]);
        for (std::size_t r = 0; r < R; ++r) {
            const double k = w[o * R + r];
            const double* col = &cols_[r * P];
            for (std::size_t p = 0; p < P; ++p) yo[p] += k * col[p];
        }
    }
    return y;
}

Tensor Conv3x3::backward(const Tensor& gy) {
    if (in_shape_.size() != 3) fail(ErrorKind::Usage, "conv3x3 backward before forward");
    const std::size_t H = in_shape_[1], W = in_shape_[2], P = H * W, R = in_ch_ * 9;
    if (gy.shape != std::vector<std::size_t>{out_ch_, H, W}) fail(ErrorKind::Data, "conv3x3 backward shape mismatch");
    const double* w = weight_.value.data.data();
    double* gw = weight_.grad.data.data();
    std::vector<double> gcols(R * P, 0.0);
    for (std::size_t o = 0; o < out_ch_; ++o) {
        const double* go = &gy.data[o * P];
        double bsum = 0.0;
        for (std::size_t p = 0; p < P; ++p) bsum += go[p];
        bias_.grad[o] += bsum;
        for (std::size_t r = 0; r < R; ++r) {
            const double* col = &cols_[r * P];
            double* gcol = &gcols[r * P];
            const double k = w[o * R + r];
            for (std::size_t p = 0; p < P; ++p) gcol[p] += k * go[p];
            // four partial sums so the reduction is not latency bound
            double acc[4] = {0.0, 0.0, 0.0, 0.0};
            std::size_t p = 0;
            for (; p + 4 <= P; p += 4)
                for (std::size_t l = 0; l < 4; ++l) acc[l] += go[p + l] * col[p + l];
            for (; p < P; ++p) acc[0] += go[p] * col[p];
            gw[o * R + r] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
        }
    }
    Tensor gx(in_shape_);
    for (std::size_t c = 0; c < in_ch_; ++c) {
        double* gxc = &gx.data[c * P];
        for (int di = -1; di <= 1; ++di) {
            for (int dj = -1; dj <= 1; ++dj) {
                const double* gcol = &gcols[(c * 9 + (di + 1) * 3 + (dj + 1)) * P];
                const std::size_t i0 = di < 0 ? 1 : 0, i1 = di > 0 ? H - 1 : H;
                const std::size_t j0 = dj < 0 ? 1 : 0, j1 = dj > 0 ? W - 1 : W;
                for (std::size_t i = i0; i < i1; ++i)
                    for (std::size_t j = j0; j < j1; ++j) gxc[(i + di) * W + j + dj] += gcol[i * W + j];
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out)
    : in_(in), out_(out), weight_("linear.weight", {out, in}), bias_("linear.bias", {out}) {
    if (in == 0 || out == 0) fail(ErrorKind::Usage, "linear dims must be positive");
}

Tensor Linear::forward(const Tensor& x, Mode) {
    if (x.size() != in_ || x.ndim() != 1)
        fail(ErrorKind::Data, "linear expects [" + std::to_string(in_) + "], got " + shape_string(x.shape));
    input_ = x;
    Tensor y({out_});
    for (std::size_t o = 0; o < out_; ++o) {
        const double* wr = &weight_.value.data[o * in_];
        double acc = bias_.value[o];
        for (std::size_t i = 0; i < in_; ++i) acc += wr[i] * x.data[i];
        y[o] = acc;
    }
    return y;
}

Tensor Linear::backward(const Tensor& gy) {
    if (gy.size() != out_) fail(ErrorKind::Data, "linear backward shape mismatch");
    Tensor gx({in_});
    for (std::size_t o = 0; o < out_; ++o) {
        const double g = gy[o];
        bias_.grad[o] += g;
        const double* wr = &weight_.value.data[o * in_];
        double* gwr = &weight_.grad.data[o * in_];
        for (std::size_t i = 0; i < in_; ++i) {
            gwr[i] += g * input_.data[i];
            gx.data[i] += g * wr[i];
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------

Tensor Gelu::forward(const Tensor& x, Mode) {
    input_ = x;
    Tensor y = x;
    for (double& v : y.data) v = 0.5 * v * std::erfc(-v / std::numbers::sqrt2);
    return y;
}

Tensor Gelu::backward(const Tensor& gy) {
    Tensor gx = gy;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < gx.size(); ++i) {
        const double x = input_.data[i];
        const double cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        gx.data[i] *= cdf + x * pdf;
    }
    return gx;
}

Tensor Relu::forward(const Tensor& x, Mode) {
    input_ = x;
    Tensor y = x;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor Relu::backward(const Tensor& gy) {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i)
        if (!(input_.data[i] > 0.0)) gx.data[i] = 0.0;
    return gx;
}

// ---------------------------------------------------------------------------

Dropout::Dropout(double rate, Rng* rng) : rate_(rate), rng_(rng) {
    if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorKind::Usage, "dropout rate must lie in [0,1)");
}

Tensor Dropout::forward(const Tensor& x, Mode mode) {
    if (mode == Mode::Eval || rate_ == 0.0) {
        mask_.clear();
        return x;
    }
    if (!frozen_ || mask_.size() != x.size()) {
        mask_.assign(x.size(), 0.0);
        const double keep_scale = 1.0 / (1.0 - rate_);
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        for (double& m : mask_) m = u01(*rng_) >= rate_ ? keep_scale : 0.0;
    }
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= mask_[i];
    return y;
}

Tensor Dropout::backward(const Tensor& gy) {
    if (mask_.empty()) return gy;
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] *= mask_[i];
    return gx;
}

// ---------------------------------------------------------------------------

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
    if (x.ndim() != 3) fail(ErrorKind::Data, "global_avg_pool expects [C,H,W], got " + shape_string(x.shape));
    in_shape_ = x.shape;
    const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
    Tensor y({C});
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < HW; ++p) s += x.data[c * HW + p];
        y[c] = s / static_cast<double>(HW);
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& gy) {
    Tensor gx(in_shape_);
    const std::size_t C = in_shape_[0], HW = in_shape_[1] * in_shape_[2];
    for (std::size_t c = 0; c < C; ++c) {
        const double g = gy[c] / static_cast<double>(HW);
        std::fill(gx.data.begin() + static_cast<std::ptrdiff_t>(c * HW),
                  gx.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * HW), g);
    }
    return gx;
}

// ---------------------------------------------------------------------------

Network::Network(std::uint64_t seed) : rng_(std::make_unique<Rng>(seed)) {}

Network Network::build(std::span<const LayerSpec> specs, std::uint64_t seed) {
    Network net(seed);
    // Tracks the feature dimension flowing between layers (0 = unknown yet)
    // and whether the data is still [C,H,W] (unknown until a layer decides).
    std::size_t channels = 0;
    std::optional<bool> spatial;
    for (const auto& s : specs) {
        switch (s.kind) {
            case LayerKind::Conv3x3:
                if (spatial == false) fail(ErrorKind::Usage, "conv3x3 after spatial pooling");
                if (channels && channels != s.in_dim) fail(ErrorKind::Usage, "conv3x3 input channels mismatch");
                net.add(std::make_unique<Conv3x3>(s.in_dim, s.out_dim));
                channels = s.out_dim;
                spatial = true;
                break;
            case LayerKind::Linear:
                if (spatial == true) fail(ErrorKind::Usage, "linear layer needs pooled (1-D) input");
                if (channels && channels != s.in_dim) fail(ErrorKind::Usage, "linear input dim mismatch");
                net.add(std::make_unique<Linear>(s.in_dim, s.out_dim));
                channels = s.out_dim;
                spatial = false;
                break;
            case LayerKind::Gelu: net.add(std::make_unique<Gelu>()); break;
            case LayerKind::Relu: net.add(std::make_unique<Relu>()); break;
            case LayerKind::Dropout: net.add(std::make_unique<Dropout>(s.rate, net.rng_.get())); break;
            case LayerKind::GlobalAvgPool:
                if (spatial == false) fail(ErrorKind::Usage, "global_avg_pool needs [C,H,W] input");
                net.add(std::make_unique<GlobalAvgPool>());
                spatial = false;
                break;
        }
    }
    kaiming_uniform_init(net, seed);
    return net;
}

Tensor Network::forward(const Tensor& x, Mode mode) {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
}

Tensor Network::backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
}

std::vector<Param*> Network::params() {
    std::vector<Param*> out;
    for (auto& l : layers_)
        for (auto* p : l->params()) out.push_back(p);
    return out;
}

void Network::zero_grad() {
    for (auto* p : params()) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
}

void Network::freeze_dropout(bool on) {
    for (auto& l : layers_)
        if (auto* d = dynamic_cast<Dropout*>(l.get())) d->freeze(on);
}

std::vector<LayerSpec> Network::specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l->spec());
    return out;
}

void kaiming_uniform_init(Network& net, std::uint64_t seed) {
    // Separate stream from the dropout generator.
    Rng rng(seed ^ 0x9E3779B97F4A7C15ull);
    for (std::size_t i = 0; i < net.size(); ++i) {
        for (auto* p : net.layer(i).params()) {
            if (p->value.ndim() == 1) {
                std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
                continue;
            }
            const std::size_t fan_in = p->value.size() / p->value.dim(0);
            // Kaiming-uniform with negative slope sqrt(5): bound = 1/sqrt(fan_in).
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& v : p->value.data) v = dist(rng);
        }
    }
}

// ---------------------------------------------------------------------------

double smooth_l1(double y_hat, double y, double alpha, double* grad) {
    if (!(alpha > 0.0)) fail(ErrorKind::Usage, "smooth-L1 alpha must be positive");
    const double d = y_hat - y;
    const double ad = std::abs(d);
    if (ad < alpha) {
        if (grad) *grad = d / alpha;
        return 0.5 * d * d / alpha;
    }
    if (grad) *grad = d > 0.0 ? 1.0 : -1.0;
    return ad - 0.5 * alpha;
}

std::vector<double> softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
    for (double& v : p) v /= z;
    return p;
}

Loss cross_entropy(std::span<const double> logits, std::size_t true_class) {
    if (logits.size() < 2) fail(ErrorKind::Usage, "cross-entropy needs at least two classes");
    if (true_class >= logits.size()) fail(ErrorKind::Usage, "class index out of range");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    Loss out;
    out.value = std::log(z) - (logits[true_class] - mx);
    out.grad = softmax(logits);
    out.grad[true_class] -= 1.0;
    return out;
}

void sgd_step(std::span<Param* const> params, OptimState& st) {
    if (!(st.lr > 0.0)) fail(ErrorKind::Usage, "learning rate must be positive");
    if (!(st.momentum >= 0.0 && st.momentum < 1.0)) fail(ErrorKind::Usage, "momentum must lie in [0,1)");
    if (st.velocity.size() != params.size()) {
        st.velocity.clear();
        for (auto* p : params) st.velocity.emplace_back(p->value.shape);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (double g : params[k]->grad.data)
            if (!std::isfinite(g)) fail(ErrorKind::Numerical, "non-finite gradient in " + params[k]->name);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        Param& p = *params[k];
        auto& v = st.velocity[k].data;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad.data[i] + st.weight_decay * p.value.data[i];
            v[i] = st.momentum * v[i] + g;
            p.value.data[i] -= st.lr * v[i];
            p.grad.data[i] = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------

namespace {

// The floor keeps gradients near the finite-difference roundoff level
// (about 1e-11 for unit-scale losses) from dominating the maximum.
double rel_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

}  // namespace

GradCheckResult grad_check(Network& net, const Tensor& input, const LossFn& loss, GradCheckOptions opts) {
    // Sample dropout masks once, then hold them fixed.
    net.freeze_dropout(false);
    net.forward(input, Mode::Train);
    net.freeze_dropout(true);

    net.zero_grad();
    const Tensor out = net.forward(input, Mode::Train);
    const Loss l = loss(out);
    const Tensor gin = net.backward(Tensor(out.shape, l.grad));

    auto eval = [&](const Tensor& x) { return loss(net.forward(x, Mode::Train)).value; };

    GradCheckResult res;
    auto record = [&](double analytic, double numeric, const std::string& name) {
        const double e = rel_error(analytic, numeric);
        ++res.checked;
        if (e > res.max_rel_error) {
            res.max_rel_error = e;
            res.worst = name;
        }
    };

    for (auto* p : net.params()) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value.data[i];
            p->value.data[i] = saved + opts.step;
            const double fp = eval(input);
            p->value.data[i] = saved - opts.step;
            const double fm = eval(input);
            p->value.data[i] = saved;
            record(p->grad.data[i], (fp - fm) / (2.0 * opts.step), p->name);
        }
    }
    if (opts.check_input) {
        Tensor x = input;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double saved = x.data[i];
            x.data[i] = saved + opts.step;
            const double fp = eval(x);
            x.data[i] = saved - opts.step;
            const double fm = eval(x);
            x.data[i] = saved;
            record(gin.data[i], (fp - fm) / (2.0 * opts.step), "input");
        }
    }
    net.freeze_dropout(false);
    net.zero_grad();
    return res;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, Network& net, const nlohmann::json& meta) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Data, "cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    nlohmann::json header;
    header["format"] = "cada-head-v1";
    auto layers = nlohmann::json::array();
    for (const auto& s : net.specs()) {
        nlohmann::json j;
        j["kind"] = to_string(s.kind);
        if (s.kind == LayerKind::Conv3x3 || s.kind == LayerKind::Linear) {
            j["in_dim"] = s.in_dim;
            j["out_dim"] = s.out_dim;
        }
        if (s.kind == LayerKind::Dropout) j["rate"] = s.rate;
        layers.push_back(std::move(j));
    }
    header["layers"] = std::move(layers);
    header["meta"] = meta;
    const auto params = net.params();
    header["n_params"] = params.size();
    {
        std::ofstream f(dir / "header.json", std::ios::trunc);
        if (!f) fail(ErrorKind::Data, "cannot write checkpoint header in " + dir.string());
        f << header.dump(2) << '\n';
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "param_%03zu.adt", i);
        Tensor t = params[i]->value;
        t.dtype = DType::F64;
        write_tensor(dir / name, t);
    }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto header_path = dir / "header.json";
    if (!std::filesystem::exists(header_path)) fail(ErrorKind::Data, "missing checkpoint: " + header_path.string());
    std::ifstream f(header_path);
    nlohmann::json header;
    std::vector<LayerSpec> specs;
    try {
        header = nlohmann::json::parse(f);
        if (header.at("format") != "cada-head-v1") fail(ErrorKind::Data, "unsupported checkpoint format");
        for (const auto& j : header.at("layers")) {
            LayerSpec s;
            s.kind = parse_layer_kind(j.at("kind").get<std::string>());
            s.in_dim = j.value("in_dim", std::size_t{0});
            s.out_dim = j.value("out_dim", std::size_t{0});
            s.rate = j.value("rate", 0.0);
            specs.push_back(s);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Data, header_path.string() + ": " + e.what());
    }
    LoadedCheckpoint out{Network::build(specs, 0), header.value("meta", nlohmann::json::object())};
    auto params = out.net.params();
    if (header.value("n_params", std::size_t{0}) != params.size())
        fail(ErrorKind::Data, "checkpoint parameter count does not match its layers");
    for (std::size_t i = 0; i < params.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "param_%03zu.adt", i);
        Tensor t = read_tensor(dir / name);
        if (t.shape != params[i]->value.shape)
            fail(ErrorKind::Data, "checkpoint parameter " + std::string(name) + " has shape " + shape_string(t.shape));
        params[i]->value = std::move(t);
    }
    return out;
}

}  // namespace cada::net
