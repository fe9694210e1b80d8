#pragma once

#include <string>
#include <utility>

#include "cubeformer/cube_attention.hpp"

namespace cubeformer {

/// Hyper-parameters shared by every block of a cube transformer group.
struct BlockConfig {
    Index heads = 4;
    CubeSpec intra{8, 8, 4, SamplingMode::block};
    CubeSpec inter{8, 8, 4, SamplingMode::grid};
    AffinityOrder order = AffinityOrder::standard;
    Index qkv_kernel = 1;
    double ffn_expansion = 3.0;
    double mbconv_expansion = 2.0;
    Index se_reduction = 4;   // squeeze width = channels / se_reduction
    Index shuffle_groups = 2;
    double ln_eps = 1e-6;

    Index ffn_hidden(Index channels) const;
    Index mbconv_hidden(Index channels) const;
    Index se_hidden(Index channels) const;
    static Index esa_hidden(Index channels) { return std::max<Index>(1, channels / 4); }
};

enum class AttentionKind { intra, inter };

// --- parameter sets -------------------------------------------------------

template <typename T>
struct FfnParams {
    ConvParams<T> expand, dw, project;
};

template <typename T>
struct CtbParams {
    LayerNormParams<T> norm1;
    AttentionParams<T> attn;
    LayerNormParams<T> norm2;
    FfnParams<T> ffn;
};

template <typename T>
struct MbconvParams {
    ConvParams<T> expand, dw, se_reduce, se_expand, project;
};

template <typename T>
struct EsaParams {
    ConvParams<T> reduce, skip, down, pool_conv, conv3a, conv3b, restore;
};

template <typename T>
struct CtgParams {
    MbconvParams<T> mbconv;
    CtbParams<T> intra, inter;
    EsaParams<T> esa;
    bool lite = false;
};

template <typename T> FfnParams<T> make_ffn_params(ParamInit& init, Index channels, const BlockConfig& cfg);
template <typename T> CtbParams<T> make_ctb_params(ParamInit& init, Index channels, const BlockConfig& cfg);
template <typename T> MbconvParams<T> make_mbconv_params(ParamInit& init, Index channels, const BlockConfig& cfg);
template <typename T> EsaParams<T> make_esa_params(ParamInit& init, Index channels);
/// Lite groups run their transformer blocks on half the channels.
template <typename T> CtgParams<T> make_ctg_params(ParamInit& init, Index channels, const BlockConfig& cfg, bool lite);

template <typename T>
void visit_params(FfnParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    visit_params(p.expand, prefix + ".expand", fn);
    visit_params(p.dw, prefix + ".dw", fn);
    visit_params(p.project, prefix + ".project", fn);
}

template <typename T>
void visit_params(CtbParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    visit_params(p.norm1, prefix + ".norm1", fn);
    visit_params(p.attn, prefix + ".attn", fn);
    visit_params(p.norm2, prefix + ".norm2", fn);
    visit_params(p.ffn, prefix + ".ffn", fn);
}

template <typename T>
void visit_params(MbconvParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    visit_params(p.expand, prefix + ".expand", fn);
    visit_params(p.dw, prefix + ".dw", fn);
    visit_params(p.se_reduce, prefix + ".se_reduce", fn);
    visit_params(p.se_expand, prefix + ".se_expand", fn);
    visit_params(p.project, prefix + ".project", fn);
}

template <typename T>
void visit_params(EsaParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    visit_params(p.reduce, prefix + ".reduce", fn);
    visit_params(p.skip, prefix + ".skip", fn);
    visit_params(p.down, prefix + ".down", fn);
    visit_params(p.pool_conv, prefix + ".pool_conv", fn);
    visit_params(p.conv3a, prefix + ".conv3a", fn);
    visit_params(p.conv3b, prefix + ".conv3b", fn);
    visit_params(p.restore, prefix + ".restore", fn);
}

template <typename T>
void visit_params(CtgParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    visit_params(p.mbconv, prefix + ".mbconv", fn);
    visit_params(p.intra, prefix + ".intra", fn);
    visit_params(p.inter, prefix + ".inter", fn);
    visit_params(p.esa, prefix + ".esa", fn);
}

// --- forward passes -------------------------------------------------------

/// 1x1 expand -> GELU -> 3x3 depthwise -> GELU -> 1x1 project.
template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FfnParams<T>& p);

/// F_mid = x + Attn(LN(x)); F_out = F_mid + FFN(LN(F_mid)).
template <typename T>
Tensor<T> ctb_forward(const Tensor<T>& x, const CtbParams<T>& p, AttentionKind kind, const BlockConfig& cfg);

/// Per-channel gate of shape (C,1,1): pool -> reduce -> GELU -> expand -> sigmoid.
template <typename T>
Tensor<T> squeeze_excitation(const Tensor<T>& x, const ConvParams<T>& reduce, const ConvParams<T>& expand);

/// Inverted bottleneck with squeeze-excitation and a residual connection.
template <typename T>
Tensor<T> mbconv_forward(const Tensor<T>& x, const MbconvParams<T>& p);

/// Smallest spatial extent the ESA pooling pyramid accepts.
constexpr Index kEsaMinExtent = 15;

/// Enhanced spatial attention: x * sigmoid(mask(x)).
template <typename T>
Tensor<T> esa_forward(const Tensor<T>& x, const EsaParams<T>& p);

/// Channel i of the output is channel (i mod g) * (C/g) + (i div g) of the input.
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, Index groups);

/// First and second contiguous channel halves.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& x);

/// MBConv -> shuffle -> Intra-CTB -> Inter-CTB -> ESA.
template <typename T>
Tensor<T> ctg_forward(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg);

/// Concat(Inter(Intra(X1)), X2) where X1, X2 = Split(Shuffle(MB(x))).
template <typename T>
Tensor<T> ctg_lite_features(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg);

/// ESA(ctg_lite_features(x) + x).
template <typename T>
Tensor<T> ctg_lite_forward(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg);

/// Dispatches on p.lite.
template <typename T>
Tensor<T> group_forward(const Tensor<T>& x, const CtgParams<T>& p, const BlockConfig& cfg);

}  // namespace cubeformer
