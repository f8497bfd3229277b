#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "papc/common.hpp"

namespace papc {

/// Dense row-major tensor, float64 throughout; checkpoints store float32.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    static Tensor zeros(std::vector<int> shape);
    std::size_t size() const { return data.size(); }
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

enum class ForwardMode { kTrain, kMcSample, kDeterministic };

/// Per-layer activations saved by forward for the backward pass. Kept outside
/// the layers so concurrent forwards never share mutable state.
struct LayerContext {
    Tensor input;
    Tensor aux;  // dropout mask / maxpool argmax, layer-dependent
};

struct Trace {
    std::vector<LayerContext> layers;
    Tensor output;
};

class Layer {
  public:
    virtual ~Layer() = default;
    virtual std::string kind() const = 0;
    /// Output shape for a given input shape; throws DomainError on mismatch.
    virtual std::vector<int> output_shape(const std::vector<int>& in) const = 0;
    virtual void init_params(const std::vector<int>& in_shape, std::mt19937_64& rng) {}
    virtual Tensor forward(const Tensor& in, ForwardMode mode, std::mt19937_64& rng,
                           LayerContext* ctx) const = 0;
    /// Gradient wrt input; param_grad (when non-null) receives dL/dparams.
    virtual Tensor backward(const Tensor& grad_out, const LayerContext& ctx,
                            std::vector<double>* param_grad) const = 0;
    virtual std::size_t param_count() const { return 0; }
    virtual std::vector<double>& params() {
        static std::vector<double> empty;
        return empty;
    }
    virtual const std::vector<double>& params() const {
        static const std::vector<double> empty;
        return empty;
    }
};

struct LayerSpec {
    std::string kind;      // dense|conv2d|conv3d|maxpool3d|relu|dropout|flatten
    int units = 0;         // dense
    int out_channels = 0;  // conv2d/conv3d
    int kernel = 3;        // conv2d (conv3d is fixed at 3,3,3)
    int stride = 1;        // conv2d
    double p = 0.0;        // dropout

    void validate() const;
};

struct NetworkSpec {
    std::vector<int> input_shape;
    std::vector<LayerSpec> layers;
    std::uint64_t seed = 0;

    void validate() const;
};

std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const std::string& text);

/// Feed-forward network; parameters live in the layers, all other forward
/// state lives in the caller-owned Trace.
class Network {
  public:
    explicit Network(const NetworkSpec& spec);
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    const NetworkSpec& spec() const { return spec_; }
    const std::vector<int>& output_shape() const { return output_shape_; }
    std::size_t layer_count() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return *layers_[i]; }

    /// sample_seed drives dropout masks in train/mc_sample modes; identical
    /// seeds give identical masks.
    Tensor forward(const Tensor& input, ForwardMode mode, std::uint64_t sample_seed = 0,
                   Trace* trace = nullptr) const;
    /// Activation after layer i recorded in a trace from forward().
    const Tensor& activation(const Trace& trace, std::size_t layer_index) const;

    /// Reverse-mode pass; returns dL/dparams aligned with flat_params().
    std::vector<double> backward(const Trace& trace, const Tensor& output_grad) const;

    std::size_t param_count() const;
    std::vector<double> flat_params() const;
    void set_flat_params(const std::vector<double>& params);

    /// Same weights, every dropout layer set to probability p.
    Network with_dropout_p(double p) const;

  private:
    NetworkSpec spec_;
    std::vector<std::unique_ptr<Layer>> layers_;
    std::vector<int> output_shape_;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 16;
    int epochs = 30;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Adam with bias correction.
class AdamState {
  public:
    explicit AdamState(std::size_t n_params);
    void step(std::vector<double>& params, const std::vector<double>& grad, double lr,
              double beta1, double beta2, double eps);
    int steps_taken() const { return t_; }

  private:
    std::vector<double> m_, v_;
    int t_ = 0;
};

/// Eq.-style heteroscedastic regression loss in log-variance form:
/// sum_i exp(-s_i) (y_i - mu_i)^2 + s_i.
double heteroscedastic_loss(const std::vector<double>& y, const std::vector<double>& mu,
                            const std::vector<double>& s);
void heteroscedastic_loss_grad(const std::vector<double>& y, const std::vector<double>& mu,
                               const std::vector<double>& s, std::vector<double>* d_mu,
                               std::vector<double>* d_s);

/// Mean squared error over flattened outputs with its gradient.
double mse_loss(const std::vector<double>& pred, const std::vector<double>& target);
std::vector<double> mse_loss_grad(const std::vector<double>& pred,
                                  const std::vector<double>& target);

struct ControlDistribution {
    double mean = 0.0;           // mu, radians
    double log_var = 0.0;        // mean predicted s over samples
    double epistemic_var = 0.0;  // population variance of mu samples
    double aleatoric_var = 0.0;  // mean exp(s) over samples
    int n_mc = 0;

    void validate() const;
};

/// n_mc seeded mc_sample forwards of a (mu, s) head network.
ControlDistribution mc_predict(const Network& net, const Tensor& input, int n_mc = 25,
                               std::uint64_t seed = 0);

/// Checkpoint: magic "PAPCNET1", uint32 header length, JSON header
/// {"spec":..., "epoch":...}, then little-endian float32 parameters.
void save_network(const Network& net, const std::string& path, int epoch = 0);
Network load_network(const std::string& path, int* epoch = nullptr);

}  // namespace papc
