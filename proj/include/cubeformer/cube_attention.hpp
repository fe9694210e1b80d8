#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "cubeformer/params.hpp"

namespace cubeformer {

enum class SamplingMode { block, grid };

std::string to_string(SamplingMode mode);
SamplingMode sampling_mode_from_string(const std::string& s);

/// Cube geometry over a (C,H,W) volume.
///
/// block: (h,w,c) is the extent of each cube; cubes are contiguous
///        neighbourhoods, HWC/(hwc) of them.
/// grid:  (h,w,c) counts grid cells; there are hwc cubes, each of extent
///        (H/h, W/w, C/c), whose voxels are strided by h, w and c along
///        the respective axes so a cube spans the whole volume.
struct CubeSpec {
    Index h = 8;
    Index w = 8;
    Index c = 4;
    SamplingMode mode = SamplingMode::block;

    /// Throws ConfigurationError naming the first axis that does not divide.
    void validate(Index channels, Index height, Index width) const;

    /// (c_extent, h_extent, w_extent) of one cube.
    std::array<Index, 3> cube_extent(Index channels, Index height, Index width) const;
    Index cube_count(Index channels, Index height, Index width) const;
    Index cube_length(Index channels, Index height, Index width) const;

    bool operator==(const CubeSpec&) const = default;
};

/// Voxel order: entry [k * cube_len + e] is the linear (C,H,W) index of
/// element e of cube k. Cubes are ordered (channel, row, column) and
/// elements within a cube likewise.
std::vector<Index> cube_index_map(const CubeSpec& spec, Index channels, Index height, Index width);

template <typename T>
struct CubePartition {
    Tensor<T> cubes;  // (n_cubes, cube_len)
    CubeSpec spec;
    Shape source_shape;
    std::shared_ptr<const std::vector<Index>> index;
};

template <typename T>
CubePartition<T> partition(const Tensor<T>& x, const CubeSpec& spec);

/// Exact inverse of partition(). Throws ShapeError if the cube tensor no
/// longer matches the recorded geometry.
template <typename T>
Tensor<T> merge(const CubePartition<T>& p);

/// Which index the affinity softmax normalizes over relative to the output.
///  standard:   out_i = sum_j A_ij v_j,  A_ij = softmax_j(q_i k_j)
///  transposed: out_j = sum_i v_i A_ij   (literal row-vector reading)
enum class AffinityOrder { standard, transposed };

/// Attention of one flattened cube; voxels are scalar tokens so the logits are
/// the n x n outer product q k^T with no temperature.
template <typename T>
Tensor<T> cube_affinity_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  AffinityOrder order = AffinityOrder::standard);

/// Multi-head cube attention over pre-projected Q, K, V volumes (C,H,W).
/// Channels are split into `heads` contiguous groups; each head volume is
/// partitioned with `spec` and every cube attends independently.
template <typename T>
Tensor<T> cube_attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index heads,
                              const CubeSpec& spec, AffinityOrder order = AffinityOrder::standard);

template <typename T>
struct AttentionParams {
    ConvParams<T> q, k, v, proj;
};

template <typename T>
void visit_params(AttentionParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    visit_params(p.q, prefix + ".q", fn);
    visit_params(p.k, prefix + ".k", fn);
    visit_params(p.v, prefix + ".v", fn);
    visit_params(p.proj, prefix + ".proj", fn);
}

template <typename T>
AttentionParams<T> make_attention_params(ParamInit& init, Index channels, Index qkv_kernel = 1) {
    AttentionParams<T> p;
    p.q = init.conv<T>(channels, channels, qkv_kernel);
    p.k = init.conv<T>(channels, channels, qkv_kernel);
    p.v = init.conv<T>(channels, channels, qkv_kernel);
    p.proj = init.conv<T>(channels, channels, 1, kResidualOutputGain);
    return p;
}

struct AttentionConfig {
    Index heads = 4;
    CubeSpec spec;
    AffinityOrder order = AffinityOrder::standard;
};

/// Q/K/V convolutions -> cube_attention_core -> 1x1 output projection.
template <typename T>
Tensor<T> cube_attention(const Tensor<T>& x, const AttentionParams<T>& params, const AttentionConfig& config);

/// Block-sampled (local) cube attention.
template <typename T>
Tensor<T> intra_cube_attention(const Tensor<T>& x, const AttentionParams<T>& params, Index heads, const CubeSpec& spec,
                               AffinityOrder order = AffinityOrder::standard);

/// Grid-sampled (sparse global) cube attention.
template <typename T>
Tensor<T> inter_cube_attention(const Tensor<T>& x, const AttentionParams<T>& params, Index heads, const CubeSpec& spec,
                               AffinityOrder order = AffinityOrder::standard);

}  // namespace cubeformer
