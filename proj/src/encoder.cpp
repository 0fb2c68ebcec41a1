#include "tinyvlm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/error.hpp"

namespace tinyvlm {

namespace {

constexpr std::string_view kGraphMagic = "TVG1";
constexpr std::uint16_t kGraphVersion = 1;
constexpr double kRelu6Max = 6.0;

enum class OpType { Full, Depthwise, Dense };

// A weighted primitive inside a layer: convolution, depthwise convolution or a
// per-pixel dense map (pointwise conv / linear).
struct LinearOp {
    OpType type = OpType::Dense;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t in_ch = 0;
    std::size_t out_ch = 0;
    std::size_t weight_param = 0;  // index into LayerDesc::params; bias is weight_param + 1
    bool relu6 = false;
};

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) return 0;
    return (in + 2 * pad - k) / stride + 1;
}

Shape3 op_output_shape(const LinearOp& op, Shape3 in) {
    switch (op.type) {
        case OpType::Full:
        case OpType::Depthwise:
            return {conv_out(in.h, op.kernel, op.stride, op.padding), conv_out(in.w, op.kernel, op.stride, op.padding),
                    op.out_ch};
        case OpType::Dense:
            return {in.h, in.w, op.out_ch};
    }
    return {};
}

// Enumerates every (output index, output channel, input index, weight index) tap.
template <typename Visit>
void for_each_tap(const LinearOp& op, Shape3 in, Shape3 out, Visit&& visit) {
    for (std::size_t oy = 0; oy < out.h; ++oy)
        for (std::size_t ox = 0; ox < out.w; ++ox) {
            const std::size_t obase = (oy * out.w + ox) * out.c;
            if (op.type == OpType::Dense) {
                const std::size_t ibase = (oy * in.w + ox) * in.c;
                for (std::size_t oc = 0; oc < out.c; ++oc)
                    for (std::size_t ic = 0; ic < in.c; ++ic) visit(obase + oc, oc, ibase + ic, oc * in.c + ic);
                continue;
            }
            for (std::size_t ky = 0; ky < op.kernel; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * op.stride + ky) -
                                          static_cast<std::ptrdiff_t>(op.padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
                for (std::size_t kx = 0; kx < op.kernel; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * op.stride + kx) -
                                              static_cast<std::ptrdiff_t>(op.padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
                    const std::size_t ibase = (static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)) * in.c;
                    if (op.type == OpType::Depthwise) {
                        for (std::size_t c = 0; c < out.c; ++c)
                            visit(obase + c, c, ibase + c, (ky * op.kernel + kx) * out.c + c);
                    } else {
                        for (std::size_t oc = 0; oc < out.c; ++oc) {
                            const std::size_t wbase = ((oc * op.kernel + ky) * op.kernel + kx) * in.c;
                            for (std::size_t ic = 0; ic < in.c; ++ic) visit(obase + oc, oc, ibase + ic, wbase + ic);
                        }
                    }
                }
            }
        }
}

std::vector<LinearOp> layer_ops(const LayerDesc& l) {
    switch (l.kind) {
        case LayerKind::Conv2d:
            return {{OpType::Full, l.kernel, l.stride, l.padding, l.in_channels, l.out_channels, 0, false}};
        case LayerKind::DepthwiseConv2d:
            return {{OpType::Depthwise, l.kernel, l.stride, l.padding, l.in_channels, l.out_channels, 0, false}};
        case LayerKind::PointwiseConv2d:
        case LayerKind::Linear:
            return {{OpType::Dense, 1, 1, 0, l.in_channels, l.out_channels, 0, false}};
        case LayerKind::InvertedResidual: {
            std::vector<LinearOp> ops;
            const std::size_t hidden = l.hidden_channels();
            std::size_t p = 0;
            if (l.expansion > 1) {
                ops.push_back({OpType::Dense, 1, 1, 0, l.in_channels, hidden, p, true});
                p += 2;
            }
            ops.push_back({OpType::Depthwise, l.kernel, l.stride, l.padding, hidden, hidden, p, true});
            p += 2;
            ops.push_back({OpType::Dense, 1, 1, 0, hidden, l.out_channels, p, false});
            return ops;
        }
        case LayerKind::GlobalAvgPool:
        case LayerKind::ReLU6:
            return {};
    }
    return {};
}

std::size_t expected_weight_numel(const LinearOp& op) {
    switch (op.type) {
        case OpType::Full: return op.out_ch * op.kernel * op.kernel * op.in_ch;
        case OpType::Depthwise: return op.kernel * op.kernel * op.out_ch;
        case OpType::Dense: return op.out_ch * op.in_ch;
    }
    return 0;
}

std::size_t fan_in(const LinearOp& op) {
    switch (op.type) {
        case OpType::Full: return op.kernel * op.kernel * op.in_ch;
        case OpType::Depthwise: return op.kernel * op.kernel;
        case OpType::Dense: return op.in_ch;
    }
    return 1;
}

// Output channel owning each weight element.
std::size_t weight_channel(const LinearOp& op, std::size_t idx) {
    switch (op.type) {
        case OpType::Full: return idx / (op.kernel * op.kernel * op.in_ch);
        case OpType::Depthwise: return idx % op.out_ch;
        case OpType::Dense: return idx / op.in_ch;
    }
    return 0;
}

std::size_t activation_point_count(const LayerDesc& l) {
    if (l.kind == LayerKind::InvertedResidual) return l.expansion > 1 ? 3 : 2;
    return 1;
}

std::string layer_label(std::size_t i, const LayerDesc& l) {
    return "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
}

double relu6(double x) { return std::clamp(x, 0.0, kRelu6Max); }

void check_params(const LayerDesc& l, std::size_t index) {
    const auto ops = layer_ops(l);
    if (l.params.size() != 2 * ops.size())
        throw Error(ErrorCode::ShapeMismatch, layer_label(index, l) + " has " + std::to_string(l.params.size()) +
                                                  " parameter tensors, expected " + std::to_string(2 * ops.size()));
    for (const auto& op : ops) {
        const auto& w = l.params[op.weight_param];
        const auto& b = l.params[op.weight_param + 1];
        if (w.dtype() != DType::F32 || b.dtype() != DType::F32)
            throw Error(ErrorCode::ShapeMismatch, layer_label(index, l) + " parameters must be f32");
        if (w.numel() != expected_weight_numel(op) || b.numel() != op.out_ch)
            throw Error(ErrorCode::ShapeMismatch, layer_label(index, l) + " parameter size mismatch");
    }
}

std::vector<double> apply_op_f32(const LinearOp& op, const LayerDesc& l, Shape3 in, Shape3 out,
                                 std::span<const double> x) {
    const auto w = l.params[op.weight_param].f32_data();
    const auto b = l.params[op.weight_param + 1].f32_data();
    std::vector<double> y(out.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = b[i % out.c];
    for_each_tap(op, in, out, [&](std::size_t o, std::size_t, std::size_t i, std::size_t wi) {
        y[o] += static_cast<double>(w[wi]) * x[i];
    });
    if (op.relu6)
        for (auto& v : y) v = relu6(v);
    return y;
}

std::vector<double> gap_f32(Shape3 in, std::span<const double> x) {
    std::vector<double> y(in.c, 0.0);
    for (std::size_t p = 0; p < in.h * in.w; ++p)
        for (std::size_t c = 0; c < in.c; ++c) y[c] += x[p * in.c + c];
    for (auto& v : y) v /= static_cast<double>(in.h * in.w);
    return y;
}

void check_input(const LayerGraph& g, const Tensor& x) {
    const auto& s = x.shape();
    const bool ok = (s.size() == 3 && s[0] == g.input_shape.h && s[1] == g.input_shape.w && s[2] == g.input_shape.c);
    if (!ok) {
        std::string got;
        for (auto e : s) got += (got.empty() ? "" : "x") + std::to_string(e);
        throw Error(ErrorCode::ShapeMismatch, "input tensor " + got + " does not match graph input " +
                                                  std::to_string(g.input_shape.h) + "x" +
                                                  std::to_string(g.input_shape.w) + "x" +
                                                  std::to_string(g.input_shape.c));
    }
}

std::vector<double> input_as_double(const Tensor& x) {
    const auto f = x.f32_data();
    return {f.begin(), f.end()};
}

}  // namespace

const char* to_string(LayerKind k) noexcept {
    switch (k) {
        case LayerKind::Conv2d: return "Conv2d";
        case LayerKind::DepthwiseConv2d: return "DepthwiseConv2d";
        case LayerKind::PointwiseConv2d: return "PointwiseConv2d";
        case LayerKind::InvertedResidual: return "InvertedResidual";
        case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
        case LayerKind::Linear: return "Linear";
        case LayerKind::ReLU6: return "ReLU6";
    }
    return "?";
}

std::size_t LayerDesc::param_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
}

LayerDesc make_conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                      std::vector<float> weight, std::vector<float> bias) {
    LayerDesc l;
    l.kind = LayerKind::Conv2d;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.in_channels = in;
    l.out_channels = out;
    l.params = {Tensor::f32({out, kernel, kernel, in}, std::move(weight)), Tensor::f32({out}, std::move(bias))};
    return l;
}

LayerDesc make_depthwise(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding,
                         std::vector<float> weight, std::vector<float> bias) {
    LayerDesc l;
    l.kind = LayerKind::DepthwiseConv2d;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.in_channels = channels;
    l.out_channels = channels;
    l.params = {Tensor::f32({kernel, kernel, channels}, std::move(weight)), Tensor::f32({channels}, std::move(bias))};
    return l;
}

LayerDesc make_pointwise(std::size_t in, std::size_t out, std::vector<float> weight, std::vector<float> bias) {
    LayerDesc l;
    l.kind = LayerKind::PointwiseConv2d;
    l.in_channels = in;
    l.out_channels = out;
    l.params = {Tensor::f32({out, in}, std::move(weight)), Tensor::f32({out}, std::move(bias))};
    return l;
}

LayerDesc make_linear(std::size_t in, std::size_t out, std::vector<float> weight, std::vector<float> bias) {
    LayerDesc l = make_pointwise(in, out, std::move(weight), std::move(bias));
    l.kind = LayerKind::Linear;
    return l;
}

LayerDesc make_inverted_residual(std::size_t in, std::size_t out, std::size_t expansion, std::size_t stride,
                                 std::size_t kernel) {
    if (expansion == 0) throw Error(ErrorCode::InvalidArgument, "expansion factor must be >= 1");
    LayerDesc l;
    l.kind = LayerKind::InvertedResidual;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = kernel / 2;
    l.in_channels = in;
    l.out_channels = out;
    l.expansion = expansion;
    const std::size_t hidden = in * expansion;
    if (expansion > 1) {
        l.params.push_back(Tensor::zeros_f32({hidden, in}));
        l.params.push_back(Tensor::zeros_f32({hidden}));
    }
    l.params.push_back(Tensor::zeros_f32({kernel, kernel, hidden}));
    l.params.push_back(Tensor::zeros_f32({hidden}));
    l.params.push_back(Tensor::zeros_f32({out, hidden}));
    l.params.push_back(Tensor::zeros_f32({out}));
    return l;
}

LayerDesc make_gap() {
    LayerDesc l;
    l.kind = LayerKind::GlobalAvgPool;
    return l;
}

LayerDesc make_relu6() {
    LayerDesc l;
    l.kind = LayerKind::ReLU6;
    return l;
}

std::size_t LayerGraph::output_dim() const {
    if (layers.empty() || layers.back().kind != LayerKind::Linear)
        throw Error(ErrorCode::ShapeMismatch, "graph must end with a Linear layer");
    return layers.back().out_channels;
}

std::size_t LayerGraph::param_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
}

namespace {

std::vector<Shape3> layer_points(const LayerDesc& l, Shape3 in, std::size_t index) {
    const auto label = layer_label(index, l);
    if (l.stride != 1 && l.stride != 2) throw Error(ErrorCode::ShapeMismatch, label + " stride must be 1 or 2");
    if (l.kind == LayerKind::GlobalAvgPool) return {{1, 1, in.c}};
    if (l.kind == LayerKind::ReLU6) return {in};
    if (l.kind == LayerKind::Linear && (in.h != 1 || in.w != 1))
        throw Error(ErrorCode::ShapeMismatch, label + " needs a 1x1 spatial input (add GlobalAvgPool)");
    if (in.c != l.in_channels)
        throw Error(ErrorCode::ShapeMismatch, label + " expects " + std::to_string(l.in_channels) +
                                                  " input channels, got " + std::to_string(in.c));
    if (l.kind == LayerKind::DepthwiseConv2d && l.out_channels != l.in_channels)
        throw Error(ErrorCode::ShapeMismatch, label + " depthwise must keep channel count");
    std::vector<Shape3> pts;
    Shape3 cur = in;
    for (const auto& op : layer_ops(l)) {
        cur = op_output_shape(op, cur);
        if (cur.numel() == 0) throw Error(ErrorCode::ShapeMismatch, label + " produces an empty output");
        pts.push_back(cur);
    }
    return pts;
}

}  // namespace

std::vector<Shape3> activation_point_shapes(const LayerGraph& g, std::size_t layer) {
    if (layer >= g.layers.size()) throw Error(ErrorCode::InvalidArgument, "layer index out of range");
    Shape3 in = g.input_shape;
    for (std::size_t i = 0; i < layer; ++i) in = layer_points(g.layers[i], in, i).back();
    return layer_points(g.layers[layer], in, layer);
}

std::vector<Shape3> infer_shapes(const LayerGraph& g) {
    if (g.input_shape.numel() == 0) throw Error(ErrorCode::UnresolvedShapes, "graph input shape is empty");
    if (g.layers.empty()) throw Error(ErrorCode::ShapeMismatch, "graph has no layers");
    std::vector<Shape3> out;
    Shape3 in = g.input_shape;
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        check_params(g.layers[i], i);
        in = layer_points(g.layers[i], in, i).back();
        out.push_back(in);
    }
    g.output_dim();
    return out;
}

void randomize(LayerGraph& g, std::uint64_t seed, double gain) {
    std::mt19937_64 rng(seed);
    for (auto& l : g.layers) {
        for (const auto& op : layer_ops(l)) {
            std::normal_distribution<double> wdist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in(op))));
            std::normal_distribution<double> bdist(0.0, 0.02 * gain);
            auto& w = l.params[op.weight_param];
            auto& b = l.params[op.weight_param + 1];
            std::vector<float> wv(w.numel()), bv(b.numel());
            for (auto& x : wv) x = static_cast<float>(wdist(rng));
            for (auto& x : bv) x = static_cast<float>(bdist(rng));
            w = Tensor::f32(w.shape(), std::move(wv));
            b = Tensor::f32(b.shape(), std::move(bv));
        }
    }
}

std::vector<Activation> forward_f32_trace(const LayerGraph& g, const Tensor& x) {
    check_input(g, x);
    infer_shapes(g);
    std::vector<Activation> trace;
    trace.push_back({g.input_shape, input_as_double(x)});
    for (const auto& l : g.layers) {
        const Activation in = trace.back();
        switch (l.kind) {
            case LayerKind::GlobalAvgPool:
                trace.push_back({{1, 1, in.shape.c}, gap_f32(in.shape, in.values)});
                break;
            case LayerKind::ReLU6: {
                Activation out = in;
                for (auto& v : out.values) v = relu6(v);
                trace.push_back(std::move(out));
                break;
            }
            default: {
                Activation cur = in;
                const auto ops = layer_ops(l);
                for (std::size_t k = 0; k < ops.size(); ++k) {
                    const Shape3 os = op_output_shape(ops[k], cur.shape);
                    Activation next{os, apply_op_f32(ops[k], l, cur.shape, os, cur.values)};
                    if (k + 1 == ops.size() && l.has_residual())
                        for (std::size_t i = 0; i < next.values.size(); ++i) next.values[i] += in.values[i];
                    trace.push_back(next);
                    cur = std::move(next);
                }
            }
        }
    }
    return trace;
}

std::vector<double> forward_f32(const LayerGraph& g, const Tensor& x) {
    auto trace = forward_f32_trace(g, x);
    return std::move(trace.back().values);
}

LayerGraph calibrate(const LayerGraph& g, std::span<const Tensor> samples, std::int32_t qmax) {
    if (samples.empty()) throw Error(ErrorCode::EmptyInput, "calibration needs at least one sample");
    if (qmax < 1 || qmax > 32767) throw Error(ErrorCode::InvalidArgument, "qmax must be in 1..32767");
    infer_shapes(g);
    LayerGraph out = g;
    out.qmax = qmax;
    out.input_scale = 1.0 / qmax;

    // Max-abs for every activation point, in trace order (input excluded).
    std::vector<double> maxabs;
    for (const auto& s : samples) {
        const auto trace = forward_f32_trace(g, s);
        if (maxabs.empty()) maxabs.assign(trace.size() - 1, 0.0);
        for (std::size_t i = 1; i < trace.size(); ++i) maxabs[i - 1] = std::max(maxabs[i - 1], max_abs(trace[i].values));
    }

    std::size_t point = 0;
    for (std::size_t li = 0; li < out.layers.size(); ++li) {
        auto& l = out.layers[li];
        l.weight_scales.clear();
        for (const auto& op : layer_ops(l)) {
            std::vector<double> ch(op.out_ch, 0.0);
            const auto w = l.params[op.weight_param].f32_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                auto& m = ch[weight_channel(op, i)];
                m = std::max(m, static_cast<double>(std::abs(w[i])));
            }
            // An all-zero channel quantizes to zero codes under any scale.
            for (auto& s : ch) s = s > 0.0 ? s / qmax : 1.0;
            l.weight_scales.push_back(std::move(ch));
        }
        l.activation_scales.clear();
        for (std::size_t k = 0; k < activation_point_count(l); ++k, ++point) {
            if (!(maxabs[point] > 0.0))
                throw Error(ErrorCode::DegenerateActivation,
                            layer_label(li, l) + " activation " + std::to_string(k) + " is zero on every sample");
            l.activation_scales.push_back(maxabs[point] / qmax);
        }
    }
    out.calibrated = true;
    return out;
}

namespace {

struct QuantAct {
    Shape3 shape;
    std::vector<std::int32_t> codes;
    double scale = 1.0;
};

void require_int32(std::int64_t v, const std::string& what) {
    if (v > std::numeric_limits<std::int32_t>::max() || v < std::numeric_limits<std::int32_t>::min())
        throw Error(ErrorCode::AccumulatorOverflow, what + " exceeds the int32 accumulator");
}

// Integer accumulation for one weighted op: returns per-output accumulators with
// the bias folded in at scale in_scale * weight_scale[channel].
std::vector<std::int64_t> accumulate_i8(const LinearOp& op, const LayerDesc& l, std::size_t op_index,
                                        const QuantAct& in, Shape3 out, std::int32_t qmax, const std::string& label) {
    const auto w = l.params[op.weight_param].f32_data();
    const auto b = l.params[op.weight_param + 1].f32_data();
    const auto& ws = l.weight_scales[op_index];
    std::vector<std::int32_t> qw(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) qw[i] = round_clamp(w[i] / ws[weight_channel(op, i)], qmax);
    std::vector<std::int64_t> acc(out.numel(), 0);
    for_each_tap(op, in.shape, out, [&](std::size_t o, std::size_t, std::size_t i, std::size_t wi) {
        acc[o] += static_cast<std::int64_t>(qw[wi]) * in.codes[i];
    });
    std::vector<std::int64_t> qb(out.c);
    for (std::size_t c = 0; c < out.c; ++c) {
        qb[c] = static_cast<std::int64_t>(std::llround(b[c] / (in.scale * ws[c])));
        require_int32(qb[c], label + " bias");
    }
    for (std::size_t o = 0; o < acc.size(); ++o) {
        acc[o] += qb[o % out.c];
        require_int32(acc[o], label + " accumulator");
    }
    return acc;
}

}  // namespace

std::vector<double> forward_i8(const LayerGraph& g, const Tensor& x) {
    if (!g.calibrated) throw Error(ErrorCode::NotCalibrated, "forward_i8 needs a calibrated graph");
    check_input(g, x);
    infer_shapes(g);
    const std::int32_t qmax = g.qmax;

    QuantAct cur{g.input_shape, std::vector<std::int32_t>(x.numel()), g.input_scale};
    if (x.dtype() == DType::I8) {
        const auto q = x.i8_data();
        for (std::size_t i = 0; i < q.size(); ++i) cur.codes[i] = std::clamp<std::int32_t>(q[i], -qmax, qmax);
    } else {
        const auto f = x.f32_data();
        for (std::size_t i = 0; i < f.size(); ++i) cur.codes[i] = round_clamp(f[i] / g.input_scale, qmax);
    }

    for (std::size_t li = 0; li < g.layers.size(); ++li) {
        const auto& l = g.layers[li];
        const auto label = layer_label(li, l);
        const bool last = li + 1 == g.layers.size();
        switch (l.kind) {
            case LayerKind::GlobalAvgPool: {
                const double s_out = l.activation_scales[0];
                QuantAct next{{1, 1, cur.shape.c}, std::vector<std::int32_t>(cur.shape.c), s_out};
                const std::size_t hw = cur.shape.h * cur.shape.w;
                for (std::size_t c = 0; c < cur.shape.c; ++c) {
                    std::int64_t sum = 0;
                    for (std::size_t p = 0; p < hw; ++p) sum += cur.codes[p * cur.shape.c + c];
                    next.codes[c] = round_clamp(static_cast<double>(sum) * cur.scale / static_cast<double>(hw) / s_out, qmax);
                }
                cur = std::move(next);
                break;
            }
            case LayerKind::ReLU6: {
                const double s_out = l.activation_scales[0];
                QuantAct next{cur.shape, std::vector<std::int32_t>(cur.codes.size()), s_out};
                for (std::size_t i = 0; i < cur.codes.size(); ++i)
                    next.codes[i] = round_clamp(relu6(cur.codes[i] * cur.scale) / s_out, qmax);
                cur = std::move(next);
                break;
            }
            default: {
                const QuantAct block_in = cur;
                const auto ops = layer_ops(l);
                for (std::size_t k = 0; k < ops.size(); ++k) {
                    const auto& op = ops[k];
                    const Shape3 os = op_output_shape(op, cur.shape);
                    const auto acc = accumulate_i8(op, l, k, cur, os, qmax, label);
                    const auto& ws = l.weight_scales[k];
                    const bool final_op = k + 1 == ops.size();
                    if (last && final_op) {
                        std::vector<double> y(acc.size());
                        for (std::size_t o = 0; o < acc.size(); ++o)
                            y[o] = static_cast<double>(acc[o]) * cur.scale * ws[o % os.c];
                        return y;
                    }
                    const double s_out = l.activation_scales[k];
                    QuantAct next{os, std::vector<std::int32_t>(acc.size()), s_out};
                    const bool residual = final_op && l.has_residual();
                    for (std::size_t o = 0; o < acc.size(); ++o) {
                        double real = static_cast<double>(acc[o]) * cur.scale * ws[o % os.c];
                        if (op.relu6) real = relu6(real);
                        if (residual) real += block_in.codes[o] * block_in.scale;
                        next.codes[o] = round_clamp(real / s_out, qmax);
                    }
                    cur = std::move(next);
                }
            }
        }
    }
    throw Error(ErrorCode::ShapeMismatch, "graph must end with a Linear layer");
}

std::vector<double> forward_i8_error_bound(const LayerGraph& g, const Tensor& x) {
    if (!g.calibrated) throw Error(ErrorCode::NotCalibrated, "error bound needs a calibrated graph");
    const auto trace = forward_f32_trace(g, x);
    const double qmax = g.qmax;

    // Adds requantization rounding and saturation to a pre-rounding bound.
    auto requant = [qmax](std::vector<double>& err, std::span<const double> ref, double s_out) {
        for (std::size_t i = 0; i < err.size(); ++i)
            err[i] += s_out / 2 + std::max(0.0, std::abs(ref[i]) + err[i] - qmax * s_out);
    };

    std::vector<double> eps(trace[0].values.size());
    for (std::size_t i = 0; i < eps.size(); ++i)
        eps[i] = g.input_scale / 2 + std::max(0.0, std::abs(trace[0].values[i]) - qmax * g.input_scale);

    std::size_t t = 1;
    for (std::size_t li = 0; li < g.layers.size(); ++li) {
        const auto& l = g.layers[li];
        const bool last = li + 1 == g.layers.size();
        const auto& in_act = trace[t - 1];
        switch (l.kind) {
            case LayerKind::GlobalAvgPool: {
                const Shape3 s = in_act.shape;
                std::vector<double> e(s.c, 0.0);
                for (std::size_t p = 0; p < s.h * s.w; ++p)
                    for (std::size_t c = 0; c < s.c; ++c) e[c] += eps[p * s.c + c];
                for (auto& v : e) v /= static_cast<double>(s.h * s.w);
                requant(e, trace[t].values, l.activation_scales[0]);
                eps = std::move(e);
                ++t;
                break;
            }
            case LayerKind::ReLU6:
                requant(eps, trace[t].values, l.activation_scales[0]);
                ++t;
                break;
            default: {
                const std::vector<double> block_eps = eps;
                const auto ops = layer_ops(l);
                Shape3 cur_shape = in_act.shape;
                double in_scale = li == 0 ? g.input_scale : 0.0;
                if (li > 0) {
                    const auto& prev = g.layers[li - 1];
                    in_scale = prev.activation_scales.back();
                }
                for (std::size_t k = 0; k < ops.size(); ++k) {
                    const auto& op = ops[k];
                    const auto& a_in = trace[t - 1].values;
                    const Shape3 os = op_output_shape(op, cur_shape);
                    const auto w = l.params[op.weight_param].f32_data();
                    const auto& ws = l.weight_scales[k];
                    std::vector<double> e(os.numel(), 0.0);
                    for (std::size_t o = 0; o < e.size(); ++o) e[o] = in_scale * ws[o % os.c] / 2;  // bias rounding
                    for_each_tap(op, cur_shape, os, [&](std::size_t o, std::size_t oc, std::size_t i, std::size_t wi) {
                        e[o] += std::abs(static_cast<double>(w[wi])) * eps[i] + ws[oc] / 2 * (std::abs(a_in[i]) + eps[i]);
                    });
                    const bool final_op = k + 1 == ops.size();
                    if (final_op && l.has_residual())
                        for (std::size_t o = 0; o < e.size(); ++o) e[o] += block_eps[o];
                    if (!(last && final_op)) requant(e, trace[t].values, l.activation_scales[k]);
                    eps = std::move(e);
                    in_scale = l.activation_scales[k];
                    cur_shape = os;
                    ++t;
                }
            }
        }
    }
    return eps;
}

std::vector<double> forward_i8_noise_std(const LayerGraph& g, const Tensor& x) {
    if (!g.calibrated) throw Error(ErrorCode::NotCalibrated, "noise estimate needs a calibrated graph");
    const auto trace = forward_f32_trace(g, x);
    auto uniform_var = [](double step) { return step * step / 12.0; };
    // ReLU6 passes noise where the float activation is strictly inside (0, 6).
    auto gate = [](std::vector<double>& var, std::span<const double> ref) {
        for (std::size_t i = 0; i < var.size(); ++i)
            if (!(ref[i] > 0.0 && ref[i] < kRelu6Max)) var[i] = 0.0;
    };

    std::vector<double> var(trace[0].values.size(), uniform_var(g.input_scale));
    std::size_t t = 1;
    double in_scale = g.input_scale;
    for (std::size_t li = 0; li < g.layers.size(); ++li) {
        const auto& l = g.layers[li];
        const bool last = li + 1 == g.layers.size();
        const Shape3 in_shape = trace[t - 1].shape;
        switch (l.kind) {
            case LayerKind::GlobalAvgPool: {
                const double hw = static_cast<double>(in_shape.h * in_shape.w);
                std::vector<double> v(in_shape.c, 0.0);
                for (std::size_t p = 0; p < in_shape.h * in_shape.w; ++p)
                    for (std::size_t c = 0; c < in_shape.c; ++c) v[c] += var[p * in_shape.c + c];
                for (auto& e : v) e = e / (hw * hw) + uniform_var(l.activation_scales[0]);
                var = std::move(v);
                ++t;
                break;
            }
            case LayerKind::ReLU6:
                gate(var, trace[t].values);
                for (auto& e : var) e += uniform_var(l.activation_scales[0]);
                ++t;
                break;
            default: {
                const std::vector<double> block_var = var;
                const auto ops = layer_ops(l);
                Shape3 cur_shape = in_shape;
                for (std::size_t k = 0; k < ops.size(); ++k) {
                    const auto& op = ops[k];
                    const auto& a_in = trace[t - 1].values;
                    const Shape3 os = op_output_shape(op, cur_shape);
                    const auto w = l.params[op.weight_param].f32_data();
                    const auto& ws = l.weight_scales[k];
                    std::vector<double> v(os.numel());
                    for (std::size_t o = 0; o < v.size(); ++o) v[o] = uniform_var(in_scale * ws[o % os.c]);
                    for_each_tap(op, cur_shape, os, [&](std::size_t o, std::size_t oc, std::size_t i, std::size_t wi) {
                        const double wv = w[wi];
                        v[o] += wv * wv * var[i] + uniform_var(ws[oc]) * (a_in[i] * a_in[i] + var[i]);
                    });
                    if (op.relu6) gate(v, trace[t].values);
                    const bool final_op = k + 1 == ops.size();
                    if (final_op && l.has_residual())
                        for (std::size_t o = 0; o < v.size(); ++o) v[o] += block_var[o];
                    if (!(last && final_op))
                        for (auto& e : v) e += uniform_var(l.activation_scales[k]);
                    var = std::move(v);
                    in_scale = l.activation_scales[k];
                    cur_shape = os;
                    ++t;
                }
                continue;
            }
        }
        in_scale = l.activation_scales.back();
    }
    for (auto& e : var) e = std::sqrt(e);
    return var;
}

std::size_t model_size_bytes(const LayerGraph& g, Precision precision) {
    std::size_t bytes = 0;
    for (const auto& l : g.layers) bytes += l.param_count() * bytes_per_value(precision);
    if (precision == Precision::I4) {
        std::size_t params = g.param_count();
        bytes = (params + 1) / 2;
    }
    if (precision == Precision::I8 || precision == Precision::I4) {
        std::size_t scales = 1;  // input scale
        for (const auto& l : g.layers) {
            for (const auto& op : layer_ops(l)) scales += op.out_ch;
            if (l.kind != LayerKind::Linear || &l != &g.layers.back()) scales += activation_point_count(l);
        }
        bytes += 4 * scales;
    }
    return bytes;
}

std::size_t scale_channels(std::size_t channels, double width_multiplier) {
    const double scaled = static_cast<double>(channels) * width_multiplier;
    const auto rounded = static_cast<std::size_t>(std::llround(scaled / 8.0)) * 8;
    return std::max<std::size_t>(8, rounded);
}

LayerGraph desk_preset(std::uint64_t seed, std::size_t output_dim) {
    LayerGraph g;
    g.input_shape = {32, 32, 3};
    g.layers.push_back(make_conv2d(3, 16, 3, 2, 1, std::vector<float>(16 * 9 * 3), std::vector<float>(16)));
    g.layers.push_back(make_relu6());
    g.layers.push_back(make_inverted_residual(16, 16, 1, 1));
    g.layers.push_back(make_inverted_residual(16, 24, 6, 2));
    g.layers.push_back(make_inverted_residual(24, 32, 6, 2));
    g.layers.push_back(make_inverted_residual(32, 32, 6, 1));
    g.layers.push_back(make_pointwise(32, 256, std::vector<float>(256 * 32), std::vector<float>(256)));
    g.layers.push_back(make_relu6());
    g.layers.push_back(make_gap());
    g.layers.push_back(make_linear(256, output_dim, std::vector<float>(output_dim * 256), std::vector<float>(output_dim)));
    randomize(g, seed);
    return g;
}

LayerGraph mobilenet_v2(double width_multiplier, std::size_t input_hw, std::size_t output_dim, std::uint64_t seed) {
    struct Stage {
        std::size_t t, c, n, s;
    };
    static constexpr Stage kStages[] = {{1, 16, 1, 1},  {6, 24, 2, 2},  {6, 32, 3, 2}, {6, 64, 4, 2},
                                        {6, 96, 3, 1},  {6, 160, 3, 2}, {6, 320, 1, 1}};
    LayerGraph g;
    g.input_shape = {input_hw, input_hw, 3};
    std::size_t ch = scale_channels(32, width_multiplier);
    g.layers.push_back(make_conv2d(3, ch, 3, 2, 1, std::vector<float>(ch * 27), std::vector<float>(ch)));
    g.layers.push_back(make_relu6());
    for (const auto& st : kStages) {
        const std::size_t out = scale_channels(st.c, width_multiplier);
        for (std::size_t i = 0; i < st.n; ++i) {
            g.layers.push_back(make_inverted_residual(ch, out, st.t, i == 0 ? st.s : 1));
            ch = out;
        }
    }
    const std::size_t last = scale_channels(1280, width_multiplier);
    g.layers.push_back(make_pointwise(ch, last, std::vector<float>(last * ch), std::vector<float>(last)));
    g.layers.push_back(make_relu6());
    g.layers.push_back(make_gap());
    g.layers.push_back(make_linear(last, output_dim, std::vector<float>(output_dim * last), std::vector<float>(output_dim)));
    randomize(g, seed);
    return g;
}

std::vector<std::uint8_t> serialize_graph(const LayerGraph& g) {
    infer_shapes(g);
    ByteWriter w;
    w.magic(kGraphMagic);
    w.u16(kGraphVersion);
    w.u32(static_cast<std::uint32_t>(g.input_shape.h));
    w.u32(static_cast<std::uint32_t>(g.input_shape.w));
    w.u32(static_cast<std::uint32_t>(g.input_shape.c));
    w.u32(static_cast<std::uint32_t>(g.layers.size()));
    w.u8(g.calibrated ? 1 : 0);
    if (g.calibrated) {
        w.f64(g.input_scale);
        w.i32(g.qmax);
    }
    for (const auto& l : g.layers) {
        w.u8(static_cast<std::uint8_t>(l.kind));
        for (auto v : {l.kernel, l.stride, l.padding, l.in_channels, l.out_channels, l.expansion})
            w.u32(static_cast<std::uint32_t>(v));
        w.u32(static_cast<std::uint32_t>(l.params.size()));
        for (const auto& p : l.params) w.bytes(encode_tensor(p));
        if (g.calibrated) {
            w.u32(static_cast<std::uint32_t>(l.weight_scales.size()));
            for (const auto& group : l.weight_scales) {
                w.u32(static_cast<std::uint32_t>(group.size()));
                for (double s : group) w.f64(s);
            }
            w.u32(static_cast<std::uint32_t>(l.activation_scales.size()));
            for (double s : l.activation_scales) w.f64(s);
        }
    }
    w.crc32_trailer();
    return w.take();
}

LayerGraph deserialize_graph(std::span<const std::uint8_t> bytes) {
    ByteReader probe(bytes);
    probe.expect_magic(kGraphMagic);
    ByteReader r(check_crc32_trailer(bytes));
    r.expect_magic(kGraphMagic);
    const auto version = r.u16();
    if (version != kGraphVersion) throw Error(ErrorCode::UnsupportedVersion, "TVG1 version " + std::to_string(version));
    LayerGraph g;
    g.input_shape.h = r.u32();
    g.input_shape.w = r.u32();
    g.input_shape.c = r.u32();
    const std::size_t n = r.u32();
    const auto cal = r.u8();
    if (cal > 1) throw Error(ErrorCode::ParseError, "bad calibration flag");
    g.calibrated = cal == 1;
    if (g.calibrated) {
        g.input_scale = r.f64();
        g.qmax = r.i32();
    }
    // Each layer header is 29 bytes.
    if (n > r.remaining() / 29) throw Error(ErrorCode::TruncatedFile, "layer count exceeds file size");
    auto read_scales = [&r](std::size_t count) {
        if (count > r.remaining() / 8) throw Error(ErrorCode::TruncatedFile, "scale list exceeds file size");
        std::vector<double> v(count);
        for (auto& s : v) s = r.f64();
        return v;
    };
    for (std::size_t i = 0; i < n; ++i) {
        LayerDesc l;
        const auto kind = r.u8();
        if (kind > static_cast<std::uint8_t>(LayerKind::ReLU6))
            throw Error(ErrorCode::ParseError, "unknown layer kind " + std::to_string(kind));
        l.kind = static_cast<LayerKind>(kind);
        l.kernel = r.u32();
        l.stride = r.u32();
        l.padding = r.u32();
        l.in_channels = r.u32();
        l.out_channels = r.u32();
        l.expansion = r.u32();
        const std::size_t np = r.u32();
        if (np > 6) throw Error(ErrorCode::ParseError, "too many parameter tensors");
        for (std::size_t p = 0; p < np; ++p) {
            std::size_t used = 0;
            l.params.push_back(decode_tensor(r.rest(), &used));
            r.take(used);
        }
        if (g.calibrated) {
            const std::size_t groups = r.u32();
            if (groups > 3) throw Error(ErrorCode::ParseError, "too many weight scale groups");
            for (std::size_t k = 0; k < groups; ++k) l.weight_scales.push_back(read_scales(r.u32()));
            l.activation_scales = read_scales(r.u32());
        }
        g.layers.push_back(std::move(l));
    }
    if (r.remaining() != 0) throw Error(ErrorCode::ParseError, "trailing bytes in TVG1 body");
    infer_shapes(g);
    if (g.calibrated) {
        if (!(g.input_scale > 0.0) || g.qmax < 1) throw Error(ErrorCode::ParseError, "bad input quantization");
        for (std::size_t i = 0; i < g.layers.size(); ++i) {
            const auto& l = g.layers[i];
            const auto ops = layer_ops(l);
            bool ok = l.weight_scales.size() == ops.size() && l.activation_scales.size() == activation_point_count(l);
            for (std::size_t k = 0; ok && k < ops.size(); ++k) ok = l.weight_scales[k].size() == ops[k].out_ch;
            if (!ok) throw Error(ErrorCode::ParseError, layer_label(i, l) + " has inconsistent calibration scales");
        }
    }
    return g;
}

void write_graph_file(const std::string& path, const LayerGraph& g) { write_file_bytes(path, serialize_graph(g)); }

LayerGraph read_graph_file(const std::string& path) { return deserialize_graph(read_file_bytes(path)); }

}  // namespace tinyvlm
