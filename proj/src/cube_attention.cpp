#include "cubeformer/cube_attention.hpp"

#include <Eigen/Dense>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cubeformer {

std::string to_string(SamplingMode mode) { return mode == SamplingMode::block ? "block" : "grid"; }

SamplingMode sampling_mode_from_string(const std::string& s) {
    if (s == "block") return SamplingMode::block;
    if (s == "grid") return SamplingMode::grid;
    throw ConfigurationError("unknown sampling mode '" + s + "'");
}

void CubeSpec::validate(Index channels, Index height, Index width) const {
    const std::array<std::pair<const char*, std::pair<Index, Index>>, 3> axes{{
        {"height", {height, h}},
        {"width", {width, w}},
        {"channel", {channels, c}},
    }};
    for (const auto& [name, ext] : axes) {
        const auto [extent, factor] = ext;
        if (factor <= 0) throw ConfigurationError(std::string("cube spec: non-positive ") + name + " factor");
        if (extent % factor != 0) {
            throw ConfigurationError(std::string("cube spec (") + to_string(mode) + "): " + name + " extent " +
                                     std::to_string(extent) + " is not divisible by " + std::to_string(factor));
        }
    }
}

std::array<Index, 3> CubeSpec::cube_extent(Index channels, Index height, Index width) const {
    validate(channels, height, width);
    if (mode == SamplingMode::block) return {c, h, w};
    return {channels / c, height / h, width / w};
}

Index CubeSpec::cube_length(Index channels, Index height, Index width) const {
    const auto e = cube_extent(channels, height, width);
    return e[0] * e[1] * e[2];
}

Index CubeSpec::cube_count(Index channels, Index height, Index width) const {
    return channels * height * width / cube_length(channels, height, width);
}

std::vector<Index> cube_index_map(const CubeSpec& spec, Index channels, Index height, Index width) {
    const auto [ec, eh, ew] = spec.cube_extent(channels, height, width);
    const Index nc = channels / ec, nh = height / eh, nw = width / ew;
    std::vector<Index> index;
    index.reserve(static_cast<std::size_t>(channels * height * width));
    for (Index kc = 0; kc < nc; ++kc)
        for (Index ky = 0; ky < nh; ++ky)
            for (Index kx = 0; kx < nw; ++kx)
                for (Index dc = 0; dc < ec; ++dc)
                    for (Index dy = 0; dy < eh; ++dy)
                        for (Index dx = 0; dx < ew; ++dx) {
                            Index ch, y, x;
                            if (spec.mode == SamplingMode::block) {
                                ch = kc * ec + dc;
                                y = ky * eh + dy;
                                x = kx * ew + dx;
                            } else {
                                // nc == spec.c etc.: cube coordinates are offsets, elements stride by the cell count.
                                ch = kc + nc * dc;
                                y = ky + nh * dy;
                                x = kx + nw * dx;
                            }
                            index.push_back((ch * height + y) * width + x);
                        }
    return index;
}

template <typename T>
CubePartition<T> partition(const Tensor<T>& x, const CubeSpec& spec) {
    if (x.ndim() != 3) throw ShapeError("partition: expected (C,H,W) volume, got " + shape_str(x.shape()));
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto index = std::make_shared<const std::vector<Index>>(cube_index_map(spec, c, h, w));
    const Index len = spec.cube_length(c, h, w);
    CubePartition<T> p;
    p.cubes = gather(x, std::span<const Index>(*index), {x.numel() / len, len});
    p.spec = spec;
    p.source_shape = x.shape();
    p.index = std::move(index);
    return p;
}

template <typename T>
Tensor<T> merge(const CubePartition<T>& p) {
    if (!p.index || p.source_shape.size() != 3) throw ShapeError("merge: partition has no index map");
    const Index c = p.source_shape[0], h = p.source_shape[1], w = p.source_shape[2];
    const Index len = p.spec.cube_length(c, h, w);
    const Shape expected{c * h * w / len, len};
    if (p.cubes.shape() != expected) {
        throw ShapeError("merge: cube tensor " + shape_str(p.cubes.shape()) + " does not match expected " +
                         shape_str(expected));
    }
    std::vector<Index> inverse(p.index->size());
    for (std::size_t i = 0; i < p.index->size(); ++i) inverse[static_cast<std::size_t>((*p.index)[i])] = static_cast<Index>(i);
    return gather(p.cubes, std::span<const Index>(inverse), p.source_shape);
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

// Scratch for one cube. S holds the affinity transposed: S(j,i) = A_ij, so
// each column is one softmax row and column-wise reductions vectorize.
template <typename T>
struct CubeScratch {
    VectorX<T> q, k, v, o;
    Mat<T> s, d;

    void resize(Index n) {
        q.resize(n);
        k.resize(n);
        v.resize(n);
        o.resize(n);
        s.resize(n, n);
        d.resize(n, n);
    }

    void affinity() {
        s.noalias() = k * q.transpose();
        const auto mx = s.colwise().maxCoeff().eval();
        s.rowwise() -= mx;
        s = s.array().exp().matrix();
        const auto total = s.colwise().sum().eval();
        s.array().rowwise() /= total.array();
    }
};

int worker_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

int worker_id() {
#ifdef _OPENMP
    return omp_get_thread_num();
#else
    return 0;
#endif
}

}  // namespace

template <typename T>
Tensor<T> cube_attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index heads,
                              const CubeSpec& spec, AffinityOrder order) {
    if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("cube attention: q/k/v must share a (C,H,W) shape, got " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const Index channels = q.dim(0), h = q.dim(1), w = q.dim(2);
    if (heads <= 0 || channels % heads != 0) {
        throw ConfigurationError("cube attention: " + std::to_string(channels) + " channels not divisible by " +
                                 std::to_string(heads) + " heads");
    }
    const Index head_channels = channels / heads;
    auto index = std::make_shared<const std::vector<Index>>(cube_index_map(spec, head_channels, h, w));
    const Index len = spec.cube_length(head_channels, h, w);
    const Index head_size = head_channels * h * w;
    const Index cubes_per_head = head_size / len;
    const Index jobs = heads * cubes_per_head;

    VectorX<T> out(q.numel());
    {
        const T* pq = q.data();
        const T* pk = k.data();
        const T* pv = v.data();
        std::vector<CubeScratch<T>> scratch(static_cast<std::size_t>(worker_count()));
        for (auto& s : scratch) s.resize(len);
#pragma omp parallel for schedule(static)
        for (Index job = 0; job < jobs; ++job) {
            auto& s = scratch[static_cast<std::size_t>(worker_id())];
            const Index base = (job / cubes_per_head) * head_size;
            const Index* idx = index->data() + (job % cubes_per_head) * len;
            for (Index e = 0; e < len; ++e) {
                s.q[e] = pq[base + idx[e]];
                s.k[e] = pk[base + idx[e]];
                s.v[e] = pv[base + idx[e]];
            }
            s.affinity();
            if (order == AffinityOrder::standard) {
                s.o.noalias() = s.s.transpose() * s.v;
            } else {
                s.o.noalias() = s.s * s.v;
            }
            for (Index e = 0; e < len; ++e) out[base + idx[e]] = s.o[e];
        }
    }

    return make_result<T>(q.shape(), std::move(out), {q, k, v}, [=](TensorNode<T>& self) {
        auto* gq = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        auto* gv = parent_grad(self, 2);
        const T* pq = self.parents[0]->data.data();
        const T* pk = self.parents[1]->data.data();
        const T* pv = self.parents[2]->data.data();
        const T* pg = self.grad.data();
        std::vector<CubeScratch<T>> scratch(static_cast<std::size_t>(worker_count()));
        for (auto& s : scratch) s.resize(len);
        // Cubes are disjoint, so every gradient entry is written by exactly one job.
#pragma omp parallel for schedule(static)
        for (Index job = 0; job < jobs; ++job) {
            auto& s = scratch[static_cast<std::size_t>(worker_id())];
            const Index base = (job / cubes_per_head) * head_size;
            const Index* idx = index->data() + (job % cubes_per_head) * len;
            for (Index e = 0; e < len; ++e) {
                s.q[e] = pq[base + idx[e]];
                s.k[e] = pk[base + idx[e]];
                s.v[e] = pv[base + idx[e]];
                s.o[e] = pg[base + idx[e]];  // upstream gradient
            }
            s.affinity();
            // d = dA^T, then softmax backward column-wise.
            VectorX<T> dv;
            if (order == AffinityOrder::standard) {
                dv.noalias() = s.s * s.o;
                s.d.noalias() = s.v * s.o.transpose();
            } else {
                dv.noalias() = s.s.transpose() * s.o;
                s.d.noalias() = s.o * s.v.transpose();
            }
            const auto dots = (s.d.array() * s.s.array()).colwise().sum().eval();
            s.d.array().rowwise() -= dots;
            s.d.array() *= s.s.array();
            // d(j,i) = dlogit_ij with logit_ij = q_i k_j.
            if (gq) {
                const VectorX<T> dq = s.d.transpose() * s.k;
                for (Index e = 0; e < len; ++e) (*gq)[base + idx[e]] += dq[e];
            }
            if (gk) {
                const VectorX<T> dk = s.d * s.q;
                for (Index e = 0; e < len; ++e) (*gk)[base + idx[e]] += dk[e];
            }
            if (gv) {
                for (Index e = 0; e < len; ++e) (*gv)[base + idx[e]] += dv[e];
            }
        }
    });
}

template <typename T>
Tensor<T> cube_affinity_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, AffinityOrder order) {
    if (q.ndim() != 1 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("cube_affinity_attention: q/k/v must be equal-length vectors, got " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const Index n = q.numel();
    const CubeSpec whole{1, n, 1, SamplingMode::block};
    auto as_volume = [n](const Tensor<T>& t) { return reshape(t, {1, 1, n}); };
    return reshape(cube_attention_core(as_volume(q), as_volume(k), as_volume(v), 1, whole, order), {n});
}

template <typename T>
Tensor<T> cube_attention(const Tensor<T>& x, const AttentionParams<T>& params, const AttentionConfig& config) {
    if (x.ndim() != 3) throw ShapeError("cube attention: expected (C,H,W) input, got " + shape_str(x.shape()));
    const Index channels = x.dim(0);
    if (config.heads <= 0 || channels % config.heads != 0) {
        throw ConfigurationError("cube attention: " + std::to_string(channels) + " channels not divisible by " +
                                 std::to_string(config.heads) + " heads");
    }
    config.spec.validate(channels / config.heads, x.dim(1), x.dim(2));
    const Tensor<T> q = params.q(x);
    const Tensor<T> k = params.k(x);
    const Tensor<T> v = params.v(x);
    return params.proj(cube_attention_core(q, k, v, config.heads, config.spec, config.order));
}

template <typename T>
Tensor<T> intra_cube_attention(const Tensor<T>& x, const AttentionParams<T>& params, Index heads, const CubeSpec& spec,
                               AffinityOrder order) {
    if (spec.mode != SamplingMode::block) throw ConfigurationError("intra-cube attention requires block sampling");
    return cube_attention(x, params, AttentionConfig{heads, spec, order});
}

template <typename T>
Tensor<T> inter_cube_attention(const Tensor<T>& x, const AttentionParams<T>& params, Index heads, const CubeSpec& spec,
                               AffinityOrder order) {
    if (spec.mode != SamplingMode::grid) throw ConfigurationError("inter-cube attention requires grid sampling");
    return cube_attention(x, params, AttentionConfig{heads, spec, order});
}

#define CUBEFORMER_INSTANTIATE_ATTENTION(T)                                                                          \
    template CubePartition<T> partition(const Tensor<T>&, const CubeSpec&);                                          \
    template Tensor<T> merge(const CubePartition<T>&);                                                               \
    template Tensor<T> cube_affinity_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, AffinityOrder); \
    template Tensor<T> cube_attention_core(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index,             \
                                           const CubeSpec&, AffinityOrder);                                         \
    template Tensor<T> cube_attention(const Tensor<T>&, const AttentionParams<T>&, const AttentionConfig&);         \
    template Tensor<T> intra_cube_attention(const Tensor<T>&, const AttentionParams<T>&, Index, const CubeSpec&,    \
                                            AffinityOrder);                                                          \
    template Tensor<T> inter_cube_attention(const Tensor<T>&, const AttentionParams<T>&, Index, const CubeSpec&,    \
                                            AffinityOrder);

CUBEFORMER_INSTANTIATE_ATTENTION(float)
CUBEFORMER_INSTANTIATE_ATTENTION(double)

}  // namespace cubeformer
