#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tinyvlm/tensor.hpp"

namespace tinyvlm {

enum class LayerKind : std::uint8_t {
    Conv2d = 0,
    DepthwiseConv2d = 1,
    PointwiseConv2d = 2,
    InvertedResidual = 3,
    GlobalAvgPool = 4,
    Linear = 5,
    ReLU6 = 6,
};

const char* to_string(LayerKind k) noexcept;

// Activation extents in HWC order.
struct Shape3 {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t c = 0;

    std::size_t numel() const noexcept { return h * w * c; }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

// One layer of the sequential encoder.
//
// Parameter tensors (all f32, row-major):
//   Conv2d           weight (out, k, k, in), bias (out)
//   DepthwiseConv2d  weight (k, k, c), bias (c)
//   PointwiseConv2d  weight (out, in), bias (out)
//   Linear           weight (out, in), bias (out)
//   InvertedResidual [expand weight (hidden, in), expand bias (hidden)] when expansion > 1,
//                    then depthwise weight (k, k, hidden), bias (hidden),
//                    then project weight (out, hidden), bias (out)
// Inverted residual blocks apply ReLU6 after expand and depthwise, keep the
// projection linear, and add the block input when stride == 1 and in == out.
//
// After calibration every weight tensor carries one symmetric scale per output
// channel and every activation point one per-tensor scale. Activation points are
// the layer output, preceded for inverted residual blocks by the expanded and
// depthwise intermediates.
struct LayerDesc {
    LayerKind kind = LayerKind::ReLU6;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t expansion = 1;
    std::vector<Tensor> params;

    std::vector<std::vector<double>> weight_scales;
    std::vector<double> activation_scales;

    std::size_t hidden_channels() const noexcept { return in_channels * expansion; }
    bool has_residual() const noexcept {
        return kind == LayerKind::InvertedResidual && stride == 1 && in_channels == out_channels;
    }
    std::size_t param_count() const noexcept;
    friend bool operator==(const LayerDesc&, const LayerDesc&) = default;
};

LayerDesc make_conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                      std::vector<float> weight, std::vector<float> bias);
LayerDesc make_depthwise(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding,
                         std::vector<float> weight, std::vector<float> bias);
LayerDesc make_pointwise(std::size_t in, std::size_t out, std::vector<float> weight, std::vector<float> bias);
LayerDesc make_linear(std::size_t in, std::size_t out, std::vector<float> weight, std::vector<float> bias);
// Weights zero-initialised; fill with randomize() or by editing params.
LayerDesc make_inverted_residual(std::size_t in, std::size_t out, std::size_t expansion, std::size_t stride,
                                 std::size_t kernel = 3);
LayerDesc make_gap();
LayerDesc make_relu6();

struct LayerGraph {
    Shape3 input_shape;
    std::vector<LayerDesc> layers;

    // Set by calibrate(): input quantization scale and the symmetric code limit.
    bool calibrated = false;
    double input_scale = 1.0 / kInt8Max;
    std::int32_t qmax = kInt8Max;

    std::size_t output_dim() const;
    std::size_t param_count() const noexcept;
    friend bool operator==(const LayerGraph&, const LayerGraph&) = default;
};

// Checks layer compatibility and returns the output shape of every layer.
std::vector<Shape3> infer_shapes(const LayerGraph& g);
// Output shapes of the intermediates inside layer i followed by the layer output.
std::vector<Shape3> activation_point_shapes(const LayerGraph& g, std::size_t layer);

// Deterministic He-style initialisation of every parameter tensor.
void randomize(LayerGraph& g, std::uint64_t seed, double gain = 1.0);

std::vector<double> forward_f32(const LayerGraph& g, const Tensor& x);

// Float forward returning every activation point (input first, then per layer
// intermediates and outputs in execution order).
struct Activation {
    Shape3 shape;
    std::vector<double> values;
};
std::vector<Activation> forward_f32_trace(const LayerGraph& g, const Tensor& x);

// Post-training quantization: per-output-channel weight scales and per-tensor
// activation scales from max-abs over the samples. qmax widens or narrows the
// symmetric code range (127 for INT8).
LayerGraph calibrate(const LayerGraph& g, std::span<const Tensor> samples, std::int32_t qmax = kInt8Max);

// Integer forward pass; accepts an f32 input (quantized at input_scale) or an i8
// input already in the input code domain.
std::vector<double> forward_i8(const LayerGraph& g, const Tensor& x);

// Per-element upper bound on |forward_i8 - forward_f32| for input x, from
// propagating rounding, weight and saturation errors through each layer.
std::vector<double> forward_i8_error_bound(const LayerGraph& g, const Tensor& x);

// First-order estimate of the standard deviation of forward_i8 - forward_f32 per
// element: every rounding is treated as independent uniform noise and its
// variance is pushed through the linearised float network.
std::vector<double> forward_i8_noise_std(const LayerGraph& g, const Tensor& x);

// Parameters times bytes per value, plus 4 bytes per stored scale for integer precisions.
std::size_t model_size_bytes(const LayerGraph& g, Precision precision);

// Channel count under a width multiplier: nearest multiple of 8, at least 8.
std::size_t scale_channels(std::size_t channels, double width_multiplier);

// Small encoder for tests and examples: 32x32x3 input, three inverted-residual stages.
LayerGraph desk_preset(std::uint64_t seed = 42, std::size_t output_dim = 256);
// MobileNetV2 backbone + GAP + Linear, all channel counts scaled by the width multiplier.
LayerGraph mobilenet_v2(double width_multiplier = 0.35, std::size_t input_hw = 128, std::size_t output_dim = 256,
                        std::uint64_t seed = 42);

// TVG1 container: "TVG1", u16 version, input HWC, layers with TVT1 parameter
// tensors, optional calibration scales, CRC32 trailer.
std::vector<std::uint8_t> serialize_graph(const LayerGraph& g);
LayerGraph deserialize_graph(std::span<const std::uint8_t> bytes);
void write_graph_file(const std::string& path, const LayerGraph& g);
LayerGraph read_graph_file(const std::string& path);

}  // namespace tinyvlm
