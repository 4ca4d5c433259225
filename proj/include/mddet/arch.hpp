#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mddet/ops.hpp"
#include "mddet/tensor.hpp"

namespace mddet {

enum class Activation { None, LeakyRelu };

inline constexpr double kLeakySlope = 0.1;

struct ConvSpec {
    int out_ch = 0;
    int k = 3;
    int stride = 1;
    int pad = 1;
    bool norm = true;
    Activation act = Activation::LeakyRelu;
};

struct MaxPoolSpec {};

// One merge input: an earlier layer, optionally compressed by a 1x1
// bottleneck (bottleneck_ch == 0 passes through), then resized by `block`
// so its spatial dims match the other sources.
struct MergeSource {
    int layer = -1;
    int bottleneck_ch = 0;
    int block = 1;
};

struct StackMergeSpec {
    std::vector<MergeSource> sources;
};

struct HeadSpec {
    int out_ch = 0;
};

using LayerSpec = std::variant<ConvSpec, MaxPoolSpec, StackMergeSpec, HeadSpec>;

struct NetworkSpec {
    int in_channels = 3;
    int classes = 0;                                 // K
    std::vector<std::pair<double, double>> anchors;  // (w, h) in cell units
    bool merge_with_maxpool = false;                 // stack vs max ablation switch
    std::vector<LayerSpec> layers;

    int anchor_count() const { return static_cast<int>(anchors.size()); }
    int head_channels() const { return anchor_count() * (classes + 5); }

    std::string serialize() const;
    static NetworkSpec parse(const std::string& text);
    static NetworkSpec load_file(const std::filesystem::path& path);
    void save_file(const std::filesystem::path& path) const;
};

// Reference pair: teacher (deeper, wider) and student (narrow trunk, stacked
// merge of the last three stages, 128-wide tail with two trailing 1x1 convs).
std::pair<NetworkSpec, NetworkSpec> reference_specs(
    int classes, const std::vector<std::pair<double, double>>& anchors);

std::vector<std::pair<double, double>> default_anchors();

enum class ForwardMode { Train, GradCheck, Eval };

class Network {
  public:
    static Network build(const NetworkSpec& spec, std::uint64_t seed);

    // Returns the raw head tensor. Train/GradCheck cache activations for
    // backward; Train additionally folds batch statistics into the running
    // averages. Eval uses running statistics and keeps no gradient caches.
    Tensor4 forward(const Tensor4& batch, ForwardMode mode);

    // Gradients for every trainable parameter; requires a cached forward.
    void backward(const Tensor4& head_grad);

    std::vector<std::span<double>> param_views();
    std::vector<std::span<const double>> grad_views() const;
    // Trainable parameters plus running statistics, in checkpoint order.
    std::vector<std::span<double>> state_views();

    long long param_count() const;
    long long flops_estimate(int input_h, int input_w) const;
    int downsample_factor() const;
    int layer_out_channels(std::size_t i) const { return layers_.at(i).out_channels; }
    const NetworkSpec& spec() const { return spec_; }

  private:
    struct ConvUnit {
        ConvLayer conv;
        bool has_norm = false;  // normalized convs drop the bias (folded into beta)
        NormParams norm;
        Activation act = Activation::None;
        Tensor4 weight_grad;
        std::vector<double> bias_grad, gamma_grad, beta_grad;
        NormCache norm_cache;
    };

    struct SourceCache {
        Tensor4 bottleneck_out;              // post-activation, pre-resize
        std::vector<MaxPoolResult> chain;    // max-merge resize steps
    };

    struct Layer {
        LayerSpec spec;
        std::vector<ConvUnit> units;  // conv/head: 1, merge: 1 per source with bottleneck
        std::vector<std::uint32_t> pool_argmax;
        std::vector<SourceCache> source_caches;
        int out_channels = 0;
        int downsample = 1;
    };

    Tensor4 run_unit(ConvUnit& unit, const Tensor4& in, ForwardMode mode);
    Tensor4 unit_backward(ConvUnit& unit, const Tensor4& unit_in, const Tensor4& unit_out,
                          const Tensor4& out_grad);

    NetworkSpec spec_;
    std::vector<Layer> layers_;
    Tensor4 input_cache_;
    std::vector<Tensor4> acts_;
    bool have_cache_ = false;
};

}  // namespace mddet
