#include "papc/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace papc {

using json = nlohmann::json;

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(shape_numel(t.shape), 0.0);
    return t;
}

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 1) throw DomainError("tensor: non-positive dimension in " + shape_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

namespace {

double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void glorot_init(std::vector<double>& w, std::size_t n_weights, double fan_in, double fan_out,
                 std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < n_weights; ++i) w[i] = (2.0 * uniform01(rng) - 1.0) * limit;
}

// ---------------------------------------------------------------------------

class DenseLayer : public Layer {
  public:
    explicit DenseLayer(int units) : units_(units) {}
    std::string kind() const override { return "dense"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        if (in.size() != 1)
            throw DomainError("dense: expects a flat input, got " + shape_string(in) +
                              " (insert a flatten layer)");
        return {units_};
    }

    void init_params(const std::vector<int>& in_shape, std::mt19937_64& rng) override {
        in_ = in_shape[0];
        params_.assign(static_cast<std::size_t>(units_) * in_ + units_, 0.0);
        glorot_init(params_, static_cast<std::size_t>(units_) * in_, in_, units_, rng);
    }

    Tensor forward(const Tensor& in, ForwardMode, std::mt19937_64&,
                   LayerContext* ctx) const override {
        if (ctx) ctx->input = in;
        Tensor out = Tensor::zeros({units_});
        const double* bias = params_.data() + static_cast<std::size_t>(units_) * in_;
        for (int o = 0; o < units_; ++o) {
            double acc = bias[o];
            const double* w = params_.data() + static_cast<std::size_t>(o) * in_;
            for (int i = 0; i < in_; ++i) acc += w[i] * in.data[i];
            out.data[o] = acc;
        }
        return out;
    }

    Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                    std::vector<double>* param_grad) const override {
        Tensor gin = Tensor::zeros({in_});
        if (param_grad) param_grad->assign(params_.size(), 0.0);
        for (int o = 0; o < units_; ++o) {
            const double g = grad_out.data[o];
            const double* w = params_.data() + static_cast<std::size_t>(o) * in_;
            for (int i = 0; i < in_; ++i) {
                gin.data[i] += g * w[i];
                if (param_grad) (*param_grad)[static_cast<std::size_t>(o) * in_ + i] +=
                    g * ctx.input.data[i];
            }
            if (param_grad) (*param_grad)[static_cast<std::size_t>(units_) * in_ + o] += g;
        }
        return gin;
    }

    std::size_t param_count() const override { return params_.size(); }
    std::vector<double>& params() override { return params_; }
    const std::vector<double>& params() const override { return params_; }

  private:
    int units_;
    int in_ = 0;
    std::vector<double> params_;
};

// ---------------------------------------------------------------------------

class Conv2dLayer : public Layer {
  public:
    Conv2dLayer(int out_ch, int kernel, int stride)
        : oc_(out_ch), k_(kernel), s_(stride) {}
    std::string kind() const override { return "conv2d"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        if (in.size() != 3)
            throw DomainError("conv2d: expects (h,w,c) input, got " + shape_string(in));
        const int oh = (in[0] + s_ - 1) / s_;
        const int ow = (in[1] + s_ - 1) / s_;
        return {oh, ow, oc_};
    }

    void init_params(const std::vector<int>& in_shape, std::mt19937_64& rng) override {
        h_ = in_shape[0];
        w_ = in_shape[1];
        c_ = in_shape[2];
        oh_ = (h_ + s_ - 1) / s_;
        ow_ = (w_ + s_ - 1) / s_;
        pad_h_ = std::max((oh_ - 1) * s_ + k_ - h_, 0) / 2;
        pad_w_ = std::max((ow_ - 1) * s_ + k_ - w_, 0) / 2;
        const std::size_t n_w = static_cast<std::size_t>(k_) * k_ * c_ * oc_;
        params_.assign(n_w + oc_, 0.0);
        glorot_init(params_, n_w, static_cast<double>(k_) * k_ * c_,
                    static_cast<double>(k_) * k_ * oc_, rng);
    }

    Tensor forward(const Tensor& in, ForwardMode, std::mt19937_64&,
                   LayerContext* ctx) const override {
        if (ctx) ctx->input = in;
        Tensor out = Tensor::zeros({oh_, ow_, oc_});
        const double* bias = params_.data() + static_cast<std::size_t>(k_) * k_ * c_ * oc_;
        for (int oh = 0; oh < oh_; ++oh)
            for (int ow = 0; ow < ow_; ++ow)
                for (int oc = 0; oc < oc_; ++oc) {
                    double acc = bias[oc];
                    for (int kh = 0; kh < k_; ++kh) {
                        const int ih = oh * s_ + kh - pad_h_;
                        if (ih < 0 || ih >= h_) continue;
                        for (int kw = 0; kw < k_; ++kw) {
                            const int iw = ow * s_ + kw - pad_w_;
                            if (iw < 0 || iw >= w_) continue;
                            const double* in_px =
                                in.data.data() + (static_cast<std::size_t>(ih) * w_ + iw) * c_;
                            const double* wk =
                                params_.data() +
                                ((static_cast<std::size_t>(kh) * k_ + kw) * c_) * oc_ + oc;
                            for (int ic = 0; ic < c_; ++ic)
                                acc += in_px[ic] * wk[static_cast<std::size_t>(ic) * oc_];
                        }
                    }
                    out.data[(static_cast<std::size_t>(oh) * ow_ + ow) * oc_ + oc] = acc;
                }
        return out;
    }

    Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                    std::vector<double>* param_grad) const override {
        Tensor gin = Tensor::zeros({h_, w_, c_});
        if (param_grad) param_grad->assign(params_.size(), 0.0);
        const std::size_t bias_base = static_cast<std::size_t>(k_) * k_ * c_ * oc_;
        for (int oh = 0; oh < oh_; ++oh)
            for (int ow = 0; ow < ow_; ++ow)
                for (int oc = 0; oc < oc_; ++oc) {
                    const double g =
                        grad_out.data[(static_cast<std::size_t>(oh) * ow_ + ow) * oc_ + oc];
                    if (param_grad) (*param_grad)[bias_base + oc] += g;
                    for (int kh = 0; kh < k_; ++kh) {
                        const int ih = oh * s_ + kh - pad_h_;
                        if (ih < 0 || ih >= h_) continue;
                        for (int kw = 0; kw < k_; ++kw) {
                            const int iw = ow * s_ + kw - pad_w_;
                            if (iw < 0 || iw >= w_) continue;
                            const std::size_t in_base =
                                (static_cast<std::size_t>(ih) * w_ + iw) * c_;
                            const std::size_t wk_base =
                                ((static_cast<std::size_t>(kh) * k_ + kw) * c_) * oc_ + oc;
                            for (int ic = 0; ic < c_; ++ic) {
                                const std::size_t wi = wk_base + static_cast<std::size_t>(ic) * oc_;
                                gin.data[in_base + ic] += g * params_[wi];
                                if (param_grad) (*param_grad)[wi] += g * ctx.input.data[in_base + ic];
                            }
                        }
                    }
                }
        return gin;
    }

    std::size_t param_count() const override { return params_.size(); }
    std::vector<double>& params() override { return params_; }
    const std::vector<double>& params() const override { return params_; }

  private:
    int oc_, k_, s_;
    int h_ = 0, w_ = 0, c_ = 0, oh_ = 0, ow_ = 0, pad_h_ = 0, pad_w_ = 0;
    std::vector<double> params_;
};

// ---------------------------------------------------------------------------

class Conv3dLayer : public Layer {
  public:
    explicit Conv3dLayer(int out_ch) : oc_(out_ch) {}
    std::string kind() const override { return "conv3d"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        if (in.size() != 4)
            throw DomainError("conv3d: expects (d,h,w,c) input, got " + shape_string(in));
        return {in[0], in[1], in[2], oc_};
    }

    void init_params(const std::vector<int>& in_shape, std::mt19937_64& rng) override {
        d_ = in_shape[0];
        h_ = in_shape[1];
        w_ = in_shape[2];
        c_ = in_shape[3];
        const std::size_t n_w = static_cast<std::size_t>(27) * c_ * oc_;
        params_.assign(n_w + oc_, 0.0);
        glorot_init(params_, n_w, 27.0 * c_, 27.0 * oc_, rng);
    }

    Tensor forward(const Tensor& in, ForwardMode, std::mt19937_64&,
                   LayerContext* ctx) const override {
        if (ctx) ctx->input = in;
        Tensor out = Tensor::zeros({d_, h_, w_, oc_});
        const double* bias = params_.data() + static_cast<std::size_t>(27) * c_ * oc_;
        for (int od = 0; od < d_; ++od)
            for (int oh = 0; oh < h_; ++oh)
                for (int ow = 0; ow < w_; ++ow)
                    for (int oc = 0; oc < oc_; ++oc) {
                        double acc = bias[oc];
                        for (int kd = 0; kd < 3; ++kd) {
                            const int id = od + kd - 1;
                            if (id < 0 || id >= d_) continue;
                            for (int kh = 0; kh < 3; ++kh) {
                                const int ih = oh + kh - 1;
                                if (ih < 0 || ih >= h_) continue;
                                for (int kw = 0; kw < 3; ++kw) {
                                    const int iw = ow + kw - 1;
                                    if (iw < 0 || iw >= w_) continue;
                                    const double* in_px =
                                        in.data.data() +
                                        ((static_cast<std::size_t>(id) * h_ + ih) * w_ + iw) * c_;
                                    const double* wk =
                                        params_.data() +
                                        (((static_cast<std::size_t>(kd) * 3 + kh) * 3 + kw) * c_) *
                                            oc_ +
                                        oc;
                                    for (int ic = 0; ic < c_; ++ic)
                                        acc += in_px[ic] * wk[static_cast<std::size_t>(ic) * oc_];
                                }
                            }
                        }
                        out.data[((static_cast<std::size_t>(od) * h_ + oh) * w_ + ow) * oc_ + oc] =
                            acc;
                    }
        return out;
    }

    Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                    std::vector<double>* param_grad) const override {
        Tensor gin = Tensor::zeros({d_, h_, w_, c_});
        if (param_grad) param_grad->assign(params_.size(), 0.0);
        const std::size_t bias_base = static_cast<std::size_t>(27) * c_ * oc_;
        for (int od = 0; od < d_; ++od)
            for (int oh = 0; oh < h_; ++oh)
                for (int ow = 0; ow < w_; ++ow)
                    for (int oc = 0; oc < oc_; ++oc) {
                        const double g =
                            grad_out
                                .data[((static_cast<std::size_t>(od) * h_ + oh) * w_ + ow) * oc_ +
                                      oc];
                        if (param_grad) (*param_grad)[bias_base + oc] += g;
                        for (int kd = 0; kd < 3; ++kd) {
                            const int id = od + kd - 1;
                            if (id < 0 || id >= d_) continue;
                            for (int kh = 0; kh < 3; ++kh) {
                                const int ih = oh + kh - 1;
                                if (ih < 0 || ih >= h_) continue;
                                for (int kw = 0; kw < 3; ++kw) {
                                    const int iw = ow + kw - 1;
                                    if (iw < 0 || iw >= w_) continue;
                                    const std::size_t in_base =
                                        ((static_cast<std::size_t>(id) * h_ + ih) * w_ + iw) * c_;
                                    const std::size_t wk_base =
                                        (((static_cast<std::size_t>(kd) * 3 + kh) * 3 + kw) * c_) *
                                            oc_ +
                                        oc;
                                    for (int ic = 0; ic < c_; ++ic) {
                                        const std::size_t wi =
                                            wk_base + static_cast<std::size_t>(ic) * oc_;
                                        gin.data[in_base + ic] += g * params_[wi];
                                        if (param_grad)
                                            (*param_grad)[wi] += g * ctx.input.data[in_base + ic];
                                    }
                                }
                            }
                        }
                    }
        return gin;
    }

    std::size_t param_count() const override { return params_.size(); }
    std::vector<double>& params() override { return params_; }
    const std::vector<double>& params() const override { return params_; }

  private:
    int oc_;
    int d_ = 0, h_ = 0, w_ = 0, c_ = 0;
    std::vector<double> params_;
};

// ---------------------------------------------------------------------------

/// (1,2,2) pooling: the stack/depth dimension is never reduced.
class MaxPool3dLayer : public Layer {
  public:
    std::string kind() const override { return "maxpool3d"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        if (in.size() != 4)
            throw DomainError("maxpool3d: expects (d,h,w,c) input, got " + shape_string(in));
        return {in[0], (in[1] + 1) / 2, (in[2] + 1) / 2, in[3]};
    }

    void init_params(const std::vector<int>& in_shape, std::mt19937_64&) override {
        d_ = in_shape[0];
        h_ = in_shape[1];
        w_ = in_shape[2];
        c_ = in_shape[3];
        oh_ = (h_ + 1) / 2;
        ow_ = (w_ + 1) / 2;
    }

    Tensor forward(const Tensor& in, ForwardMode, std::mt19937_64&,
                   LayerContext* ctx) const override {
        if (ctx) ctx->input = in;
        Tensor out = Tensor::zeros({d_, oh_, ow_, c_});
        Tensor arg = Tensor::zeros({d_, oh_, ow_, c_});
        for (int d = 0; d < d_; ++d)
            for (int oh = 0; oh < oh_; ++oh)
                for (int ow = 0; ow < ow_; ++ow)
                    for (int ch = 0; ch < c_; ++ch) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t best_idx = 0;
                        for (int ih = 2 * oh; ih < std::min(2 * oh + 2, h_); ++ih)
                            for (int iw = 2 * ow; iw < std::min(2 * ow + 2, w_); ++iw) {
                                const std::size_t idx =
                                    ((static_cast<std::size_t>(d) * h_ + ih) * w_ + iw) * c_ + ch;
                                if (in.data[idx] > best) {
                                    best = in.data[idx];
                                    best_idx = idx;
                                }
                            }
                        const std::size_t oidx =
                            ((static_cast<std::size_t>(d) * oh_ + oh) * ow_ + ow) * c_ + ch;
                        out.data[oidx] = best;
                        arg.data[oidx] = static_cast<double>(best_idx);
                    }
        if (ctx) ctx->aux = std::move(arg);
        return out;
    }

    Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                    std::vector<double>*) const override {
        Tensor gin = Tensor::zeros({d_, h_, w_, c_});
        for (std::size_t i = 0; i < grad_out.data.size(); ++i)
            gin.data[static_cast<std::size_t>(ctx.aux.data[i])] += grad_out.data[i];
        return gin;
    }

  private:
    int d_ = 0, h_ = 0, w_ = 0, c_ = 0, oh_ = 0, ow_ = 0;
};

// ---------------------------------------------------------------------------

class ReluLayer : public Layer {
  public:
    std::string kind() const override { return "relu"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }

    Tensor forward(const Tensor& in, ForwardMode, std::mt19937_64&,
                   LayerContext* ctx) const override {
        if (ctx) ctx->input = in;
        Tensor out = in;
        for (double& v : out.data) v = std::max(v, 0.0);
        return out;
    }

    Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                    std::vector<double>*) const override {
        Tensor gin = grad_out;
        for (std::size_t i = 0; i < gin.data.size(); ++i)
            if (ctx.input.data[i] <= 0.0) gin.data[i] = 0.0;
        return gin;
    }
};

// ---------------------------------------------------------------------------

/// Inverted dropout: kept units scale by 1/(1-p) so deterministic mode is the
/// identity.
class DropoutLayer : public Layer {
  public:
    explicit DropoutLayer(double p) : p_(p) {}
    std::string kind() const override { return "dropout"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }
    double p() const { return p_; }

    Tensor forward(const Tensor& in, ForwardMode mode, std::mt19937_64& rng,
                   LayerContext* ctx) const override {
        if (ctx) ctx->input = in;
        if (mode == ForwardMode::kDeterministic || p_ == 0.0) {
            if (ctx) ctx->aux = Tensor{};  // empty mask = identity in backward
            return in;
        }
        Tensor mask = Tensor::zeros(in.shape);
        const double keep_scale = 1.0 / (1.0 - p_);
        for (double& m : mask.data) m = (uniform01(rng) < p_) ? 0.0 : keep_scale;
        Tensor out = in;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
        if (ctx) ctx->aux = std::move(mask);
        return out;
    }

    Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                    std::vector<double>*) const override {
        if (ctx.aux.data.empty()) return grad_out;
        Tensor gin = grad_out;
        for (std::size_t i = 0; i < gin.data.size(); ++i) gin.data[i] *= ctx.aux.data[i];
        return gin;
    }

  private:
    double p_;
};

// ---------------------------------------------------------------------------

class FlattenLayer : public Layer {
  public:
    std::string kind() const override { return "flatten"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        return {static_cast<int>(shape_numel(in))};
    }

    Tensor forward(const Tensor& in, ForwardMode, std::mt19937_64&,
                   LayerContext* ctx) const override {
        if (ctx) ctx->input = in;
        Tensor out = in;
        out.shape = {static_cast<int>(in.data.size())};
        return out;
    }

    Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                    std::vector<double>*) const override {
        Tensor gin = grad_out;
        gin.shape = ctx.input.shape;
        return gin;
    }
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec) {
    if (spec.kind == "dense") return std::make_unique<DenseLayer>(spec.units);
    if (spec.kind == "conv2d")
        return std::make_unique<Conv2dLayer>(spec.out_channels, spec.kernel, spec.stride);
    if (spec.kind == "conv3d") return std::make_unique<Conv3dLayer>(spec.out_channels);
    if (spec.kind == "maxpool3d") return std::make_unique<MaxPool3dLayer>();
    if (spec.kind == "relu") return std::make_unique<ReluLayer>();
    if (spec.kind == "dropout") return std::make_unique<DropoutLayer>(spec.p);
    if (spec.kind == "flatten") return std::make_unique<FlattenLayer>();
    throw DomainError("network: unknown layer kind '" + spec.kind + "'");
}

}  // namespace

void LayerSpec::validate() const {
    if (kind == "dense") {
        if (units < 1) throw DomainError("dense: units must be >= 1");
    } else if (kind == "conv2d") {
        if (out_channels < 1) throw DomainError("conv2d: out_channels must be >= 1");
        if (kernel < 1) throw DomainError("conv2d: kernel must be >= 1");
        if (stride < 1) throw DomainError("conv2d: stride must be >= 1");
    } else if (kind == "conv3d") {
        if (out_channels < 1) throw DomainError("conv3d: out_channels must be >= 1");
    } else if (kind == "dropout") {
        if (!(p >= 0.0 && p < 1.0)) throw DomainError("dropout: p must be in [0,1)");
    } else if (kind != "maxpool3d" && kind != "relu" && kind != "flatten") {
        throw DomainError("network: unknown layer kind '" + kind + "'");
    }
}

void NetworkSpec::validate() const {
    if (input_shape.empty()) throw DomainError("network: empty input shape");
    shape_numel(input_shape);
    if (layers.empty()) throw DomainError("network: needs at least one layer");
    for (const auto& l : layers) l.validate();
}

std::string network_spec_to_json(const NetworkSpec& spec) {
    json j;
    j["input_shape"] = spec.input_shape;
    j["seed"] = spec.seed;
    j["layers"] = json::array();
    for (const auto& l : spec.layers) {
        json jl;
        jl["kind"] = l.kind;
        if (l.kind == "dense") jl["units"] = l.units;
        if (l.kind == "conv2d") {
            jl["out_channels"] = l.out_channels;
            jl["kernel"] = l.kernel;
            jl["stride"] = l.stride;
        }
        if (l.kind == "conv3d") jl["out_channels"] = l.out_channels;
        if (l.kind == "dropout") jl["p"] = l.p;
        j["layers"].push_back(jl);
    }
    return j.dump();
}

NetworkSpec network_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("network spec: ") + e.what());
    }
    NetworkSpec spec;
    try {
        spec.input_shape = j.at("input_shape").get<std::vector<int>>();
        spec.seed = j.value("seed", std::uint64_t{0});
        for (const auto& jl : j.at("layers")) {
            LayerSpec l;
            l.kind = jl.at("kind").get<std::string>();
            l.units = jl.value("units", 0);
            l.out_channels = jl.value("out_channels", 0);
            l.kernel = jl.value("kernel", 3);
            l.stride = jl.value("stride", 1);
            l.p = jl.value("p", 0.0);
            spec.layers.push_back(l);
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("network spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

Network::Network(const NetworkSpec& spec) : spec_(spec) {
    spec_.validate();
    std::vector<int> shape = spec_.input_shape;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        layers_.push_back(make_layer(spec_.layers[i]));
        const std::vector<int> out = layers_.back()->output_shape(shape);
        std::mt19937_64 rng(mix_seed(spec_.seed, 0x1a7e5000 + i));
        layers_.back()->init_params(shape, rng);
        shape = out;
    }
    output_shape_ = shape;
}

Tensor Network::forward(const Tensor& input, ForwardMode mode, std::uint64_t sample_seed,
                        Trace* trace) const {
    if (input.shape != spec_.input_shape)
        throw DomainError("network: input shape " + shape_string(input.shape) +
                          " does not match spec " + shape_string(spec_.input_shape));
    if (input.data.size() != shape_numel(input.shape))
        throw DomainError("network: tensor data inconsistent with its shape");

    std::mt19937_64 rng(mix_seed(sample_seed, 0xd40b5a11));
    if (trace) trace->layers.assign(layers_.size(), LayerContext{});

    Tensor x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        x = layers_[i]->forward(x, mode, rng, trace ? &trace->layers[i] : nullptr);
    if (trace) trace->output = x;
    return x;
}

const Tensor& Network::activation(const Trace& trace, std::size_t layer_index) const {
    if (trace.layers.size() != layers_.size())
        throw DomainError("network: trace does not belong to this network");
    if (layer_index + 1 < layers_.size()) return trace.layers[layer_index + 1].input;
    if (layer_index + 1 == layers_.size()) return trace.output;
    throw DomainError("network: layer index out of range");
}

std::vector<double> Network::backward(const Trace& trace, const Tensor& output_grad) const {
    if (trace.layers.size() != layers_.size())
        throw DomainError("network: trace does not belong to this network");

    std::vector<std::vector<double>> per_layer(layers_.size());
    Tensor g = output_grad;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        std::vector<double>* pg = layers_[i]->param_count() > 0 ? &per_layer[i] : nullptr;
        g = layers_[i]->backward(g, trace.layers[i], pg);
        if (pg)
            for (double v : *pg)
                if (!std::isfinite(v))
                    throw TrainError("backward: non-finite gradient in layer " +
                                     std::to_string(i) + " (" + layers_[i]->kind() + ")");
    }

    std::vector<double> flat;
    flat.reserve(param_count());
    for (std::size_t i = 0; i < layers_.size(); ++i)
        flat.insert(flat.end(), per_layer[i].begin(), per_layer[i].end());
    return flat;
}

std::size_t Network::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l->param_count();
    return n;
}

std::vector<double> Network::flat_params() const {
    std::vector<double> flat;
    flat.reserve(param_count());
    for (const auto& l : layers_)
        if (l->param_count() > 0)
            flat.insert(flat.end(), l->params().begin(), l->params().end());
    return flat;
}

void Network::set_flat_params(const std::vector<double>& params) {
    if (params.size() != param_count())
        throw DomainError("network: parameter count mismatch (" + std::to_string(params.size()) +
                          " vs " + std::to_string(param_count()) + ")");
    std::size_t offset = 0;
    for (auto& l : layers_)
        if (l->param_count() > 0) {
            std::copy(params.begin() + offset, params.begin() + offset + l->param_count(),
                      l->params().begin());
            offset += l->param_count();
        }
}

Network Network::with_dropout_p(double p) const {
    if (!(p >= 0.0 && p < 1.0)) throw DomainError("dropout: p must be in [0,1)");
    NetworkSpec modified = spec_;
    for (auto& l : modified.layers)
        if (l.kind == "dropout") l.p = p;
    Network out(modified);
    out.set_flat_params(flat_params());
    return out;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw DomainError("train: learning_rate must be > 0");
    if (batch_size < 1) throw DomainError("train: batch_size must be >= 1");
    if (epochs < 1) throw DomainError("train: epochs must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw DomainError("train: betas must be in [0,1)");
    if (!(eps > 0.0)) throw DomainError("train: eps must be > 0");
}

AdamState::AdamState(std::size_t n_params) : m_(n_params, 0.0), v_(n_params, 0.0) {}

void AdamState::step(std::vector<double>& params, const std::vector<double>& grad, double lr,
                     double beta1, double beta2, double eps) {
    if (params.size() != m_.size() || grad.size() != m_.size())
        throw DomainError("adam: size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, t_);
    const double bc2 = 1.0 - std::pow(beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1 * m_[i] + (1.0 - beta1) * grad[i];
        v_[i] = beta2 * v_[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double m_hat = m_[i] / bc1;
        const double v_hat = v_[i] / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

double heteroscedastic_loss(const std::vector<double>& y, const std::vector<double>& mu,
                            const std::vector<double>& s) {
    if (y.size() != mu.size() || y.size() != s.size() || y.empty())
        throw DomainError("loss: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = y[i] - mu[i];
        total += std::exp(-s[i]) * r * r + s[i];
    }
    return total;
}

void heteroscedastic_loss_grad(const std::vector<double>& y, const std::vector<double>& mu,
                               const std::vector<double>& s, std::vector<double>* d_mu,
                               std::vector<double>* d_s) {
    if (y.size() != mu.size() || y.size() != s.size() || y.empty())
        throw DomainError("loss: size mismatch");
    d_mu->assign(y.size(), 0.0);
    d_s->assign(y.size(), 0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = y[i] - mu[i];
        const double e = std::exp(-s[i]);
        (*d_mu)[i] = -2.0 * e * r;
        (*d_s)[i] = -e * r * r + 1.0;
    }
}

double mse_loss(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size() || pred.empty()) throw DomainError("mse: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred[i] - target[i];
        total += r * r;
    }
    return total / static_cast<double>(pred.size());
}

std::vector<double> mse_loss_grad(const std::vector<double>& pred,
                                  const std::vector<double>& target) {
    if (pred.size() != target.size() || pred.empty()) throw DomainError("mse: size mismatch");
    std::vector<double> g(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i)
        g[i] = 2.0 * (pred[i] - target[i]) / static_cast<double>(pred.size());
    return g;
}

void ControlDistribution::validate() const {
    if (!std::isfinite(mean) || !std::isfinite(log_var) || !std::isfinite(epistemic_var) ||
        !std::isfinite(aleatoric_var))
        throw DomainError("control distribution: non-finite field");
    if (epistemic_var < 0.0 || aleatoric_var < 0.0)
        throw DomainError("control distribution: negative variance");
    if (n_mc < 1) throw DomainError("control distribution: n_mc must be >= 1");
}

namespace {

double pairwise_sum(const double* v, std::size_t n) {
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += v[i];
        return s;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

}  // namespace

ControlDistribution mc_predict(const Network& net, const Tensor& input, int n_mc,
                               std::uint64_t seed) {
    if (n_mc < 1) throw DomainError("mc_predict: n_mc must be >= 1");
    if (net.output_shape() != std::vector<int>{2})
        throw DomainError("mc_predict: network must end in a (mu, s) head of shape (2), got " +
                          shape_string(net.output_shape()));

    std::vector<double> mu(n_mc), s(n_mc);
    for (int i = 0; i < n_mc; ++i) {
        const Tensor out = net.forward(input, ForwardMode::kMcSample, mix_seed(seed, i));
        mu[i] = out.data[0];
        s[i] = out.data[1];
    }

    ControlDistribution dist;
    dist.n_mc = n_mc;

    bool all_equal = true;
    for (int i = 1; i < n_mc; ++i)
        if (mu[i] != mu[0]) all_equal = false;
    if (all_equal) {
        // Identical samples carry exactly zero spread; avoid rounding noise.
        dist.mean = mu[0];
        dist.epistemic_var = 0.0;
    } else {
        dist.mean = pairwise_sum(mu.data(), mu.size()) / n_mc;
        std::vector<double> sq(n_mc);
        for (int i = 0; i < n_mc; ++i) sq[i] = (mu[i] - dist.mean) * (mu[i] - dist.mean);
        dist.epistemic_var = pairwise_sum(sq.data(), sq.size()) / n_mc;
    }

    std::vector<double> es(n_mc);
    for (int i = 0; i < n_mc; ++i) es[i] = std::exp(s[i]);
    dist.aleatoric_var = pairwise_sum(es.data(), es.size()) / n_mc;
    dist.log_var = pairwise_sum(s.data(), s.size()) / n_mc;
    dist.validate();
    return dist;
}

namespace {

constexpr char kCheckpointMagic[] = "PAPCNET1";

}  // namespace

void save_network(const Network& net, const std::string& path, int epoch) {
    json header;
    header["spec"] = json::parse(network_spec_to_json(net.spec()));
    header["epoch"] = epoch;
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot open for writing: " + path);
    out.write(kCheckpointMagic, 8);
    const std::uint32_t len = static_cast<std::uint32_t>(header_text.size());
    std::uint8_t len_bytes[4];
    for (int b = 0; b < 4; ++b) len_bytes[b] = static_cast<std::uint8_t>((len >> (8 * b)) & 0xFF);
    out.write(reinterpret_cast<const char*>(len_bytes), 4);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    const std::vector<double> params = net.flat_params();
    std::vector<std::uint8_t> blob(params.size() * 4);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const float f = static_cast<float>(params[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int b = 0; b < 4; ++b)
            blob[i * 4 + b] = static_cast<std::uint8_t>((bits >> (8 * b)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size()));
    if (!out) throw Error("checkpoint: write failed: " + path);
}

Network load_network(const std::string& path, int* epoch) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open for reading: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());

    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw ParseError("checkpoint: missing PAPCNET1 magic at byte 0");
    std::uint32_t len = 0;
    for (int b = 0; b < 4; ++b) len |= static_cast<std::uint32_t>(bytes[8 + b]) << (8 * b);
    if (bytes.size() < 12 + static_cast<std::size_t>(len))
        throw ParseError("checkpoint: truncated header at byte " + std::to_string(bytes.size()));

    json header;
    try {
        header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: bad header: ") + e.what());
    }
    NetworkSpec spec = network_spec_from_json(header.at("spec").dump());
    if (epoch) *epoch = header.value("epoch", 0);

    Network net(spec);
    const std::size_t count = net.param_count();
    const std::size_t blob_at = 12 + static_cast<std::size_t>(len);
    if (bytes.size() != blob_at + count * 4)
        throw ParseError("checkpoint: expected " + std::to_string(blob_at + count * 4) +
                         " bytes, got " + std::to_string(bytes.size()));
    std::vector<double> params(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(bytes[blob_at + i * 4 + b]) << (8 * b);
        float f;
        std::memcpy(&f, &bits, 4);
        params[i] = f;
    }
    net.set_flat_params(params);
    return net;
}

}  // namespace papc
