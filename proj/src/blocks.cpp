#include "cubeformer/blocks.hpp"

#include <cmath>

namespace cubeformer {

namespace {

Index scaled(Index channels, double ratio) {
    return std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(channels) * ratio)));
}

}  // namespace

Index BlockConfig::ffn_hidden(Index channels) const { return scaled(channels, ffn_expansion); }
Index BlockConfig::mbconv_hidden(Index channels) const { return scaled(channels, mbconv_expansion); }
Index BlockConfig::se_hidden(Index channels) const {
    if (se_reduction <= 0) throw ConfigurationError("se_reduction must be positive");
    return std::max<Index>(1, channels / se_reduction);
}

template <typename T>
FfnParams<T> make_ffn_params(ParamInit& init, Index channels, const BlockConfig& cfg) {
    const Index hidden = cfg.ffn_hidden(channels);
    FfnParams<T> p;
    p.expand = init.conv<T>(channels, hidden, 1);
    p.dw = init.depthwise<T>(hidden, 3);
    p.project = init.conv<T>(hidden, channels, 1, kResidualOutputGain);
    return p;
}

template <typename T>
CtbParams<T> make_ctb_params(ParamInit& init, Index channels, const BlockConfig& cfg) {
    CtbParams<T> p;
    p.norm1 = init.layer_norm<T>(channels, cfg.ln_eps);
    p.attn = make_attention_params<T>(init, channels, cfg.qkv_kernel);
    p.norm2 = init.layer_norm<T>(channels, cfg.ln_eps);
    p.ffn = make_ffn_params<T>(init, channels, cfg);
    return p;
}

template <typename T>
MbconvParams<T> make_mbconv_params(ParamInit& init, Index channels, const BlockConfig& cfg) {
    const Index hidden = cfg.mbconv_hidden(channels);
    const Index squeeze = cfg.se_hidden(channels);
    MbconvParams<T> p;
    p.expand = init.conv<T>(channels, hidden, 1);
    p.dw = init.depthwise<T>(hidden, 3);
    p.se_reduce = init.conv<T>(hidden, squeeze, 1);
    p.se_expand = init.conv<T>(squeeze, hidden, 1);
    p.project = init.conv<T>(hidden, channels, 1, kResidualOutputGain);
    return p;
}

template <typename T>
EsaParams<T> make_esa_params(ParamInit& init, Index channels) {
    const Index f = BlockConfig::esa_hidden(channels);
    EsaParams<T> p;
    p.reduce = init.conv<T>(channels, f, 1);
    p.skip = init.conv<T>(f, f, 1);
    p.down = init.conv<T>(f, f, 3);
    p.pool_conv = init.conv<T>(f, f, 3);
    p.conv3a = init.conv<T>(f, f, 3);
    p.conv3b = init.conv<T>(f, f, 3);
    p.restore = init.conv<T>(f, channels, 1);
    return p;
}

template <typename T>
CtgParams<T> make_ctg_params(ParamInit& init, Index channels, const BlockConfig& cfg, bool lite) {
    if (lite && channels % 2 != 0) throw ConfigurationError("CTG-lite needs an even channel count");
    const Index attn_channels = lite ? channels / 2 : channels;
    CtgParams<T> p;
    p.mbconv = make_mbconv_params<T>(init, channels, cfg);
    p.intra = make_ctb_params<T>(init, attn_channels, cfg);
    p.inter = make_ctb_params<T>(init, attn_channels, cfg);
    p.esa = make_esa_params<T>(init, channels);
    p.lite = lite;
    return p;
}

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FfnParams<T>& p) {
    return p.project(gelu(p.dw(gelu(p.expand(x)))));
}

template <typename T>
Tensor<T> ctb_forward(const Tensor<T>& x, const CtbParams<T>& p, AttentionKind kind, const BlockConfig& cfg) {
    if (x.ndim() != 3 || x.dim(0) != p.norm1.gamma.numel()) {
        throw ConfigurationError("CTB: input " + shape_str(x.shape()) + " does not match block width " +
                                 std::to_string(p.norm1.gamma.numel()));
    }
    const Tensor<T> normed = p.norm1(x);
    const Tensor<T> attn = kind == AttentionKind::intra
                               ? intra_cube_attention(normed, p.attn, cfg.heads, cfg.intra, cfg.order)
                               : inter_cube_attention(normed, p.attn, cfg.heads, cfg.inter, cfg.order);
    const Tensor<T> mid = x + attn;
    return mid + ffn_forward(p.norm2(mid), p.ffn);
}

template <typename T>
Tensor<T> squeeze_excitation(const Tensor<T>& x, const ConvParams<T>& reduce, const ConvParams<T>& expand) {
    return sigmoid(expand(gelu(reduce(adaptive_avg_pool2d(x, 1, 1)))));
}

template <typename T>
Tensor<T> mbconv_forward(const Tensor<T>& x, const MbconvParams<T>& p) {
    if (x.ndim() != 3 || x.dim(0) != p.expand.weight.dim(1)) {
        throw ConfigurationError("MBConv: input " + shape_str(x.shape()) + " does not match block width");
    }
    const Tensor<T> hidden = gelu(p.dw(gelu(p.expand(x))));
    const Tensor<T> gated = hidden * squeeze_excitation(hidden, p.se_reduce, p.se_expand);
    return x + p.project(gated);
}

template <typename T>
Tensor<T> esa_forward(const Tensor<T>& x, const EsaParams<T>& p) {
    if (x.ndim() != 3) throw ShapeError("ESA: expected (C,H,W) input");
    const Index h = x.dim(1), w = x.dim(2);
    if (h < kEsaMinExtent || w < kEsaMinExtent) {
        throw ConfigurationError("ESA: spatial extent " + std::to_string(h) + "x" + std::to_string(w) +
                                 " is too small for the pooling pyramid (need at least " +
                                 std::to_string(kEsaMinExtent) + ")");
    }
    const Tensor<T> reduced = p.reduce(x);
    const Tensor<T> down = p.down(reduced, 2, 0);
    const Tensor<T> pooled = max_pool2d(down, 7, 3);
    Tensor<T> y = relu(p.pool_conv(pooled));
    y = relu(p.conv3a(y));
    y = p.conv3b(y);
    y = upsample_bilinear(y, h, w);
    const Tensor<T> mask = sigmoid(p.restore(y + p.skip(reduced)));
    return x * mask;
}

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, Index groups) {
    if (x.ndim() != 3) throw ShapeError("channel_shuffle: expected (C,H,W) input");
    const Index c = x.dim(0);
    if (groups <= 0 || c % groups != 0) {
        throw ConfigurationError("channel_shuffle: " + std::to_string(c) + " channels not divisible by " +
                                 std::to_string(groups) + " groups");
    }
    const Index plane = x.dim(1) * x.dim(2);
    const Index per_group = c / groups;
    std::vector<Index> index(static_cast<std::size_t>(x.numel()));
    for (Index i = 0; i < c; ++i) {
        const Index src = (i % groups) * per_group + i / groups;
        for (Index e = 0; e < plane; ++e) index[static_cast<std::size_t>(i * plane + e)] = src * plane + e;
    }
    return gather(x, std::span<const Index>(index), x.shape());
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x) {
    if (x.ndim() != 3) throw ShapeError("channel_split: expected (C,H,W) input");
    if (x.dim(0) % 2 != 0) {
        throw ConfigurationError("channel_split: odd channel count " + std::to_string(x.dim(0)));
    }
    const Index half = x.dim(0) / 2;
    return {slice(x, 0, 0, half), slice(x, 0, half, 2 * half)};
}

template <typename T>
Tensor<T> ctg_forward(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg) {
    Tensor<T> y = channel_shuffle(mbconv_forward(x, p.mbconv), cfg.shuffle_groups);
    y = ctb_forward(y, p.intra, AttentionKind::intra, cfg);
    y = ctb_forward(y, p.inter, AttentionKind::inter, cfg);
    return esa_forward(y, p.esa);
}

template <typename T>
Tensor<T> ctg_lite_features(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg) {
    auto [x1, x2] = channel_split(channel_shuffle(mbconv_forward(x, p.mbconv), cfg.shuffle_groups));
    Tensor<T> y = ctb_forward(x1, p.intra, AttentionKind::intra, cfg);
    y = ctb_forward(y, p.inter, AttentionKind::inter, cfg);
    return concat<T>({y, x2}, 0);
}

template <typename T>
Tensor<T> ctg_lite_forward(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg) {
    return esa_forward(ctg_lite_features(x, p, cfg) + x, p.esa);
}

template <typename T>
Tensor<T> group_forward(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg) {
    return p.lite ? ctg_lite_forward(x, p, cfg) : ctg_forward(x, p, cfg);
}

#define CUBEFORMER_INSTANTIATE_BLOCKS(T)                                                                            \
    template FfnParams<T> make_ffn_params<T>(ParamInit&, Index, const BlockConfig&);                                \
    template CtbParams<T> make_ctb_params<T>(ParamInit&, Index, const BlockConfig&);                                \
    template MbconvParams<T> make_mbconv_params<T>(ParamInit&, Index, const BlockConfig&);                          \
    template EsaParams<T> make_esa_params<T>(ParamInit&, Index);                                                    \
    template CtgParams<T> make_ctg_params<T>(ParamInit&, Index, const BlockConfig&, bool);                          \
    template Tensor<T> ffn_forward(const Tensor<T>&, const FfnParams<T>&);                                          \
    template Tensor<T> ctb_forward(const Tensor<T>&, const CtbParams<T>&, AttentionKind, const BlockConfig&);       \
    template Tensor<T> squeeze_excitation(const Tensor<T>&, const ConvParams<T>&, const ConvParams<T>&);            \
    template Tensor<T> mbconv_forward(const Tensor<T>&, const MbconvParams<T>&);                                    \
    template Tensor<T> esa_forward(const Tensor<T>&, const EsaParams<T>&);                                          \
    template Tensor<T> channel_shuffle(const Tensor<T>&, Index);                                                    \
    template std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>&);                                       \
    template Tensor<T> ctg_forward(const Tensor<T>&, const CtgParams<T>&, const BlockConfig&);                      \
    template Tensor<T> ctg_lite_features(const Tensor<T>&, const CtgParams<T>&, const BlockConfig&);                \
    template Tensor<T> ctg_lite_forward(const Tensor<T>&, const CtgParams<T>&, const BlockConfig&);                 \
    template Tensor<T> group_forward(const Tensor<T>&, const CtgParams<T>&, const BlockConfig&);

CUBEFORMER_INSTANTIATE_BLOCKS(float)
CUBEFORMER_INSTANTIATE_BLOCKS(double)

}  // namespace cubeformer
