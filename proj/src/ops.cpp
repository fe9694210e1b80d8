#include "cubeformer/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace cubeformer {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRow = Eigen::Map<const RowMat<T>>;

using IndexMap = std::shared_ptr<const std::vector<Index>>;

// Linear index into `in` for every element of the (larger) broadcast shape `out`.
std::vector<Index> broadcast_index(const Shape& in, const Shape& out) {
    const std::size_t nd = out.size();
    const std::size_t off = nd - in.size();
    std::vector<Index> strides(nd, 0);
    Index s = 1;
    for (std::size_t d = nd; d-- > off;) {
        strides[d] = in[d - off] == 1 ? 0 : s;
        s *= in[d - off];
    }
    const Index n = shape_numel(out);
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::vector<Index> counter(nd, 0);
    Index cur = 0;
    for (Index o = 0; o < n; ++o) {
        idx[static_cast<std::size_t>(o)] = cur;
        for (std::size_t d = nd; d-- > 0;) {
            cur += strides[d];
            if (++counter[d] < out[d]) break;
            cur -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    return idx;
}

void check_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " + shape_str(s));
    }
}

template <typename T>
Tensor<T> gather_impl(const Tensor<T>& x, IndexMap index, Shape shape) {
    // Negative entries read as zero (used for zero padding).
    const auto& idx = *index;
    VectorX<T> out(static_cast<Index>(idx.size()));
    const T* src = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = idx[i] >= 0 ? src[idx[i]] : T(0);
    return make_result<T>(std::move(shape), std::move(out), {x}, [index](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const auto& idx = *index;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= 0) (*g)[idx[i]] += self.grad[static_cast<Index>(i)];
        }
    });
}

enum class BinaryKind { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
    if (a.shape() == b.shape()) {
        VectorX<T> out;
        switch (kind) {
            case BinaryKind::add: out = a.values() + b.values(); break;
            case BinaryKind::sub: out = a.values() - b.values(); break;
            case BinaryKind::mul: out = a.values().cwiseProduct(b.values()); break;
        }
        return make_result<T>(a.shape(), std::move(out), {a, b}, [kind](TensorNode<T>& self) {
            const auto& g = self.grad;
            switch (kind) {
                case BinaryKind::add:
                    accumulate_grad(self, 0, g);
                    accumulate_grad(self, 1, g);
                    break;
                case BinaryKind::sub:
                    accumulate_grad(self, 0, g);
                    accumulate_grad(self, 1, -g);
                    break;
                case BinaryKind::mul:
                    accumulate_grad(self, 0, g.cwiseProduct(self.parents[1]->data));
                    accumulate_grad(self, 1, g.cwiseProduct(self.parents[0]->data));
                    break;
            }
        });
    }
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto ia = std::make_shared<const std::vector<Index>>(broadcast_index(a.shape(), out_shape));
    auto ib = std::make_shared<const std::vector<Index>>(broadcast_index(b.shape(), out_shape));
    const Index n = shape_numel(out_shape);
    VectorX<T> out(n);
    const T* pa = a.data();
    const T* pb = b.data();
    for (Index i = 0; i < n; ++i) {
        const T va = pa[(*ia)[i]];
        const T vb = pb[(*ib)[i]];
        out[i] = kind == BinaryKind::add ? va + vb : kind == BinaryKind::sub ? va - vb : va * vb;
    }
    return make_result<T>(std::move(out_shape), std::move(out), {a, b}, [kind, ia, ib, n](TensorNode<T>& self) {
        const auto& g = self.grad;
        const auto& da = self.parents[0]->data;
        const auto& db = self.parents[1]->data;
        if (auto* ga = parent_grad(self, 0)) {
            for (Index i = 0; i < n; ++i) (*ga)[(*ia)[i]] += kind == BinaryKind::mul ? g[i] * db[(*ib)[i]] : g[i];
        }
        if (auto* gb = parent_grad(self, 1)) {
            for (Index i = 0; i < n; ++i) {
                const T gi = kind == BinaryKind::mul ? g[i] * da[(*ia)[i]] : kind == BinaryKind::sub ? -g[i] : g[i];
                (*gb)[(*ib)[i]] += gi;
            }
        }
    });
}

template <typename T>
void im2col(const T* x, Index channels, Index h, Index w, Index kh, Index kw, Index stride, Index pad, Index out_h,
            Index out_w, T* col) {
    const Index plane = out_h * out_w;
    for (Index c = 0; c < channels; ++c) {
        for (Index u = 0; u < kh; ++u) {
            for (Index v = 0; v < kw; ++v) {
                T* row = col + ((c * kh + u) * kw + v) * plane;
                for (Index i = 0; i < out_h; ++i) {
                    const Index y = i * stride + u - pad;
                    if (y < 0 || y >= h) {
                        std::fill(row + i * out_w, row + (i + 1) * out_w, T(0));
                        continue;
                    }
                    const T* src = x + (c * h + y) * w;
                    for (Index j = 0; j < out_w; ++j) {
                        const Index xx = j * stride + v - pad;
                        row[i * out_w + j] = (xx >= 0 && xx < w) ? src[xx] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, Index channels, Index h, Index w, Index kh, Index kw, Index stride, Index pad, Index out_h,
            Index out_w, T* x) {
    const Index plane = out_h * out_w;
    for (Index c = 0; c < channels; ++c) {
        for (Index u = 0; u < kh; ++u) {
            for (Index v = 0; v < kw; ++v) {
                const T* row = col + ((c * kh + u) * kw + v) * plane;
                for (Index i = 0; i < out_h; ++i) {
                    const Index y = i * stride + u - pad;
                    if (y < 0 || y >= h) continue;
                    T* dst = x + (c * h + y) * w;
                    for (Index j = 0; j < out_w; ++j) {
                        const Index xx = j * stride + v - pad;
                        if (xx >= 0 && xx < w) dst[xx] += row[i * out_w + j];
                    }
                }
            }
        }
    }
}

Index conv_out_extent(Index in, Index k, Index stride, Index pad, const char* op) {
    if (stride <= 0) throw ConfigurationError(std::string(op) + ": stride must be positive");
    if (in + 2 * pad < k) {
        throw ConfigurationError(std::string(op) + ": input extent " + std::to_string(in) + " with padding " +
                                 std::to_string(pad) + " is smaller than kernel " + std::to_string(k));
    }
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        const Index ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const Index eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryKind::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryKind::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryKind::mul);
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    VectorX<T> out = a.values().array() + s;
    return make_result<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& self) { accumulate_grad(self, 0, self.grad); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    VectorX<T> out = a.values() * s;
    return make_result<T>(a.shape(), std::move(out), {a},
                          [s](TensorNode<T>& self) { accumulate_grad(self, 0, self.grad * s); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check_rank(a.shape(), 2, "matmul");
    check_rank(b.shape(), 2, "matmul");
    const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    VectorX<T> out(m * n);
    MapRow<T>(out.data(), m, n).noalias() = CMapRow<T>(a.data(), m, k) * CMapRow<T>(b.data(), k, n);
    return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& self) {
        CMapRow<T> g(self.grad.data(), m, n);
        if (auto* ga = parent_grad(self, 0)) {
            MapRow<T>(ga->data(), m, k).noalias() += g * CMapRow<T>(self.parents[1]->data.data(), k, n).transpose();
        }
        if (auto* gb = parent_grad(self, 1)) {
            MapRow<T>(gb->data(), k, n).noalias() += CMapRow<T>(self.parents[0]->data.data(), m, k).transpose() * g;
        }
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    static constexpr T a = T(0.044715);
    const auto xa = x.values().array();
    VectorX<T> out = (T(0.5) * xa * (T(1) + (c * (xa + a * xa.cube())).tanh())).matrix();
    return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        const auto xa = self.parents[0]->data.array();
        const auto t = (c * (xa + a * xa.cube())).tanh().eval();
        const auto d = (T(0.5) * (T(1) + t) + T(0.5) * xa * (T(1) - t.square()) * c * (T(1) + T(3) * a * xa.square())).eval();
        accumulate_grad(self, 0, (self.grad.array() * d).matrix());
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    VectorX<T> out = (T(1) / (T(1) + (-x.values().array()).exp())).matrix();
    return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        const auto y = self.data.array();
        accumulate_grad(self, 0, (self.grad.array() * y * (T(1) - y)).matrix());
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    VectorX<T> out = x.values().cwiseMax(T(0));
    return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        const auto& in = self.parents[0]->data;
        accumulate_grad(self, 0, (in.array() > T(0)).select(self.grad.array(), T(0)).matrix());
    });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    VectorX<T> out = x.values().cwiseAbs();
    return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        const auto& in = self.parents[0]->data;
        accumulate_grad(self, 0, (self.grad.array() * in.array().sign()).matrix());
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
    }
    return make_result<T>(std::move(shape), x.values(), {x}, [](TensorNode<T>& self) { accumulate_grad(self, 0, self.grad); });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const Index> index, Shape shape) {
    if (shape_numel(shape) != static_cast<Index>(index.size())) {
        throw ShapeError("gather: index length does not match output shape " + shape_str(shape));
    }
    for (Index i : index) {
        if (i < 0 || i >= x.numel()) throw ShapeError("gather: index out of range");
    }
    return gather_impl(x, std::make_shared<const std::vector<Index>>(index.begin(), index.end()), std::move(shape));
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
    const Shape& in = x.shape();
    const std::size_t nd = in.size();
    if (order.size() != nd) throw ShapeError("permute: order rank mismatch for " + shape_str(in));
    std::vector<bool> used(nd, false);
    for (auto o : order) {
        if (o >= nd || used[o]) throw ShapeError("permute: order is not a permutation");
        used[o] = true;
    }
    std::vector<Index> in_strides(nd, 1);
    for (std::size_t d = nd - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * in[d + 1];
    Shape out(nd);
    std::vector<Index> strides(nd);
    for (std::size_t d = 0; d < nd; ++d) {
        out[d] = in[order[d]];
        strides[d] = in_strides[order[d]];
    }
    const Index n = x.numel();
    auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
    std::vector<Index> counter(nd, 0);
    Index cur = 0;
    for (Index o = 0; o < n; ++o) {
        (*idx)[static_cast<std::size_t>(o)] = cur;
        for (std::size_t d = nd; d-- > 0;) {
            cur += strides[d];
            if (++counter[d] < out[d]) break;
            cur -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    return gather_impl<T>(x, std::move(idx), std::move(out));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, Index start, Index end) {
    const Shape& in = x.shape();
    if (axis >= in.size()) throw ShapeError("slice: axis out of range for " + shape_str(in));
    if (start < 0 || end > in[axis] || start >= end) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(end) + ") invalid for extent " +
                         std::to_string(in[axis]));
    }
    Index outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
    for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
    const Index len = end - start;
    auto idx = std::make_shared<std::vector<Index>>();
    idx->reserve(static_cast<std::size_t>(outer * len * inner));
    for (Index o = 0; o < outer; ++o) {
        for (Index a = start; a < end; ++a) {
            const Index base = (o * in[axis] + a) * inner;
            for (Index i = 0; i < inner; ++i) idx->push_back(base + i);
        }
    }
    Shape out = in;
    out[axis] = len;
    return gather_impl<T>(x, std::move(idx), std::move(out));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape out = parts[0].shape();
    if (axis >= out.size()) throw ShapeError("concat: axis out of range");
    out[axis] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != parts[0].dim(d)) {
                throw ShapeError("concat: extent mismatch " + shape_str(s) + " vs " + shape_str(parts[0].shape()));
            }
        }
        out[axis] += s[axis];
    }
    Index outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= out[d];
    for (std::size_t d = axis + 1; d < out.size(); ++d) inner *= out[d];
    VectorX<T> data(shape_numel(out));
    std::vector<Index> widths;
    Index pos = 0;
    for (Index o = 0; o < outer; ++o) {
        for (const auto& p : parts) {
            const Index chunk = p.dim(axis) * inner;
            data.segment(pos, chunk) = p.values().segment(o * chunk, chunk);
            pos += chunk;
        }
    }
    for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
    return make_result<T>(std::move(out), std::move(data), parts, [outer, widths](TensorNode<T>& self) {
        const Index total = std::accumulate(widths.begin(), widths.end(), Index{0});
        Index offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (auto* g = parent_grad(self, k)) {
                for (Index o = 0; o < outer; ++o) {
                    g->segment(o * widths[k], widths[k]) += self.grad.segment(o * total + offset, widths[k]);
                }
            }
            offset += widths[k];
        }
    });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, const std::vector<Index>& sizes) {
    if (axis >= x.ndim()) throw ShapeError("split: axis out of range");
    if (std::accumulate(sizes.begin(), sizes.end(), Index{0}) != x.dim(axis)) {
        throw ShapeError("split: sizes do not sum to extent " + std::to_string(x.dim(axis)));
    }
    std::vector<Tensor<T>> out;
    Index start = 0;
    for (Index s : sizes) {
        out.push_back(slice(x, axis, start, start + s));
        start += s;
    }
    return out;
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, Index top, Index bottom, Index left, Index right, PadMode mode) {
    check_rank(x.shape(), 3, "pad2d");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad2d: negative padding");
    if (mode == PadMode::reflect && (top >= h || bottom >= h || left >= w || right >= w)) {
        throw ShapeError("pad2d: reflect padding must be smaller than the input extent");
    }
    const Index oh = h + top + bottom, ow = w + left + right;
    auto reflect = [](Index i, Index n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * (n - 1) - i;
        return i;
    };
    auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c * oh * ow));
    std::size_t k = 0;
    for (Index ch = 0; ch < c; ++ch) {
        for (Index i = 0; i < oh; ++i) {
            for (Index j = 0; j < ow; ++j) {
                Index y = i - top, xx = j - left;
                if (mode == PadMode::reflect) {
                    y = reflect(y, h);
                    xx = reflect(xx, w);
                    (*idx)[k++] = (ch * h + y) * w + xx;
                } else {
                    (*idx)[k++] = (y < 0 || y >= h || xx < 0 || xx >= w) ? -1 : (ch * h + y) * w + xx;
                }
            }
        }
    }
    return gather_impl<T>(x, std::move(idx), {c, oh, ow});
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    VectorX<T> out(1);
    out[0] = x.values().sum();
    return make_result<T>({1}, std::move(out), {x}, [](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (g) g->array() += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    const T n = static_cast<T>(x.numel());
    VectorX<T> out(1);
    out[0] = x.values().sum() / n;
    return make_result<T>({1}, std::move(out), {x}, [n](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (g) g->array() += self.grad[0] / n;
    });
}

namespace {

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, std::size_t axis, T scale) {
    const Shape& in = x.shape();
    if (axis >= in.size()) throw ShapeError("reduction axis out of range for " + shape_str(in));
    Index outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
    for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
    const Index len = in[axis];
    Shape out_shape = in;
    out_shape[axis] = 1;
    VectorX<T> out = VectorX<T>::Zero(outer * inner);
    for (Index o = 0; o < outer; ++o) {
        for (Index a = 0; a < len; ++a) out.segment(o * inner, inner) += x.values().segment((o * len + a) * inner, inner);
    }
    out *= scale;
    return make_result<T>(std::move(out_shape), std::move(out), {x}, [outer, inner, len, scale](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        for (Index o = 0; o < outer; ++o) {
            for (Index a = 0; a < len; ++a) g->segment((o * len + a) * inner, inner) += self.grad.segment(o * inner, inner) * scale;
        }
    });
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
    return reduce_axis(x, axis, T(1));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.ndim()) throw ShapeError("mean: axis out of range");
    return reduce_axis(x, axis, T(1) / static_cast<T>(x.dim(axis)));
}

template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, Index out_h, Index out_w) {
    check_rank(x.shape(), 3, "adaptive_avg_pool2d");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (out_h <= 0 || out_w <= 0) throw ShapeError("adaptive_avg_pool2d: output extents must be positive");
    auto bin = [](Index i, Index in, Index out) {
        return std::pair<Index, Index>{(i * in) / out, ((i + 1) * in + out - 1) / out};
    };
    VectorX<T> out(c * out_h * out_w);
    const T* src = x.data();
    for (Index ch = 0; ch < c; ++ch) {
        for (Index i = 0; i < out_h; ++i) {
            auto [y0, y1] = bin(i, h, out_h);
            for (Index j = 0; j < out_w; ++j) {
                auto [x0, x1] = bin(j, w, out_w);
                T acc = 0;
                for (Index y = y0; y < y1; ++y)
                    for (Index xx = x0; xx < x1; ++xx) acc += src[(ch * h + y) * w + xx];
                out[(ch * out_h + i) * out_w + j] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
            }
        }
    }
    return make_result<T>({c, out_h, out_w}, std::move(out), {x}, [=](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        for (Index ch = 0; ch < c; ++ch) {
            for (Index i = 0; i < out_h; ++i) {
                auto [y0, y1] = bin(i, h, out_h);
                for (Index j = 0; j < out_w; ++j) {
                    auto [x0, x1] = bin(j, w, out_w);
                    const T gi = self.grad[(ch * out_h + i) * out_w + j] / static_cast<T>((y1 - y0) * (x1 - x0));
                    for (Index y = y0; y < y1; ++y)
                        for (Index xx = x0; xx < x1; ++xx) (*g)[(ch * h + y) * w + xx] += gi;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, Index kernel, Index stride) {
    check_rank(x.shape(), 3, "max_pool2d");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index oh = conv_out_extent(h, kernel, stride, 0, "max_pool2d");
    const Index ow = conv_out_extent(w, kernel, stride, 0, "max_pool2d");
    auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c * oh * ow));
    VectorX<T> out(c * oh * ow);
    const T* src = x.data();
    for (Index ch = 0; ch < c; ++ch) {
        for (Index i = 0; i < oh; ++i) {
            for (Index j = 0; j < ow; ++j) {
                Index best = (ch * h + i * stride) * w + j * stride;
                for (Index u = 0; u < kernel; ++u) {
                    for (Index v = 0; v < kernel; ++v) {
                        const Index k = (ch * h + i * stride + u) * w + j * stride + v;
                        if (src[k] > src[best]) best = k;
                    }
                }
                const Index o = (ch * oh + i) * ow + j;
                (*argmax)[static_cast<std::size_t>(o)] = best;
                out[o] = src[best];
            }
        }
    }
    return gather_impl<T>(x, std::move(argmax), {c, oh, ow});
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, Index out_h, Index out_w) {
    check_rank(x.shape(), 3, "upsample_nearest");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto idx = std::make_shared<std::vector<Index>>();
    idx->reserve(static_cast<std::size_t>(c * out_h * out_w));
    for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < out_h; ++i)
            for (Index j = 0; j < out_w; ++j) idx->push_back((ch * h + (i * h) / out_h) * w + (j * w) / out_w);
    return gather_impl<T>(x, std::move(idx), {c, out_h, out_w});
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, Index out_h, Index out_w) {
    check_rank(x.shape(), 3, "upsample_bilinear");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    struct Tap {
        Index i0, i1;
        T l;
    };
    auto taps = [](Index out, Index in) {
        std::vector<Tap> t(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (Index i = 0; i < out; ++i) {
            const double src = std::max(0.0, (static_cast<double>(i) + 0.5) * scale - 0.5);
            Index i0 = std::min(static_cast<Index>(src), in - 1);
            Index i1 = std::min(i0 + 1, in - 1);
            t[static_cast<std::size_t>(i)] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
        }
        return t;
    };
    auto ty = std::make_shared<const std::vector<Tap>>(taps(out_h, h));
    auto tx = std::make_shared<const std::vector<Tap>>(taps(out_w, w));
    VectorX<T> out(c * out_h * out_w);
    const T* src = x.data();
    for (Index ch = 0; ch < c; ++ch) {
        const T* p = src + ch * h * w;
        for (Index i = 0; i < out_h; ++i) {
            const Tap& a = (*ty)[static_cast<std::size_t>(i)];
            for (Index j = 0; j < out_w; ++j) {
                const Tap& b = (*tx)[static_cast<std::size_t>(j)];
                const T top = p[a.i0 * w + b.i0] * (T(1) - b.l) + p[a.i0 * w + b.i1] * b.l;
                const T bot = p[a.i1 * w + b.i0] * (T(1) - b.l) + p[a.i1 * w + b.i1] * b.l;
                out[(ch * out_h + i) * out_w + j] = top * (T(1) - a.l) + bot * a.l;
            }
        }
    }
    return make_result<T>({c, out_h, out_w}, std::move(out), {x}, [=](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        for (Index ch = 0; ch < c; ++ch) {
            T* p = g->data() + ch * h * w;
            for (Index i = 0; i < out_h; ++i) {
                const Tap& a = (*ty)[static_cast<std::size_t>(i)];
                for (Index j = 0; j < out_w; ++j) {
                    const Tap& b = (*tx)[static_cast<std::size_t>(j)];
                    const T gi = self.grad[(ch * out_h + i) * out_w + j];
                    p[a.i0 * w + b.i0] += gi * (T(1) - a.l) * (T(1) - b.l);
                    p[a.i0 * w + b.i1] += gi * (T(1) - a.l) * b.l;
                    p[a.i1 * w + b.i0] += gi * a.l * (T(1) - b.l);
                    p[a.i1 * w + b.i1] += gi * a.l * b.l;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Index stride, Index pad) {
    check_rank(x.shape(), 3, "conv2d");
    check_rank(weight.shape(), 4, "conv2d weight");
    const Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != cin) {
        throw ConfigurationError("conv2d: input has " + std::to_string(cin) + " channels but weight expects " +
                                 std::to_string(weight.dim(1)));
    }
    if (bias.defined() && bias.numel() != cout) throw ConfigurationError("conv2d: bias length != output channels");
    const Index oh = conv_out_extent(h, kh, stride, pad, "conv2d");
    const Index ow = conv_out_extent(w, kw, stride, pad, "conv2d");
    const Index plane = oh * ow;
    const Index k = cin * kh * kw;
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

    std::shared_ptr<VectorX<T>> col;
    if (!pointwise) {
        col = std::make_shared<VectorX<T>>(k * plane);
        im2col(x.data(), cin, h, w, kh, kw, stride, pad, oh, ow, col->data());
    }
    const T* col_ptr = pointwise ? x.data() : col->data();

    VectorX<T> out(cout * plane);
    MapRow<T> out_m(out.data(), cout, plane);
    out_m.noalias() = CMapRow<T>(weight.data(), cout, k) * CMapRow<T>(col_ptr, k, plane);
    if (bias.defined()) out_m.colwise() += bias.values();

    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>({cout, oh, ow}, std::move(out), inputs, [=](TensorNode<T>& self) {
        CMapRow<T> g(self.grad.data(), cout, plane);
        const T* cols = pointwise ? self.parents[0]->data.data() : col->data();
        if (auto* gw = parent_grad(self, 1)) {
            MapRow<T>(gw->data(), cout, k).noalias() += g * CMapRow<T>(cols, k, plane).transpose();
        }
        if (self.parents.size() > 2) {
            if (auto* gb = parent_grad(self, 2)) *gb += g.rowwise().sum();
        }
        if (auto* gx = parent_grad(self, 0)) {
            const CMapRow<T> wm(self.parents[1]->data.data(), cout, k);
            if (pointwise) {
                MapRow<T>(gx->data(), k, plane).noalias() += wm.transpose() * g;
            } else {
                RowMat<T> dcol = wm.transpose() * g;
                col2im(dcol.data(), cin, h, w, kh, kw, stride, pad, oh, ow, gx->data());
            }
        }
    });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Index stride, Index pad) {
    check_rank(x.shape(), 3, "depthwise_conv2d");
    check_rank(weight.shape(), 4, "depthwise_conv2d weight");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(0) != c || weight.dim(1) != 1) {
        throw ConfigurationError("depthwise_conv2d: weight " + shape_str(weight.shape()) + " does not match " +
                                 std::to_string(c) + " input channels");
    }
    if (bias.defined() && bias.numel() != c) throw ConfigurationError("depthwise_conv2d: bias length != channels");
    const Index oh = conv_out_extent(h, kh, stride, pad, "depthwise_conv2d");
    const Index ow = conv_out_extent(w, kw, stride, pad, "depthwise_conv2d");

    VectorX<T> out(c * oh * ow);
    const T* src = x.data();
    const T* wt = weight.data();
    for (Index ch = 0; ch < c; ++ch) {
        T* dst = out.data() + ch * oh * ow;
        std::fill(dst, dst + oh * ow, bias.defined() ? bias[ch] : T(0));
        for (Index u = 0; u < kh; ++u) {
            for (Index v = 0; v < kw; ++v) {
                const T wv = wt[(ch * kh + u) * kw + v];
                for (Index i = 0; i < oh; ++i) {
                    const Index y = i * stride + u - pad;
                    if (y < 0 || y >= h) continue;
                    const T* row = src + (ch * h + y) * w;
                    T* orow = dst + i * ow;
                    for (Index j = 0; j < ow; ++j) {
                        const Index xx = j * stride + v - pad;
                        if (xx >= 0 && xx < w) orow[j] += wv * row[xx];
                    }
                }
            }
        }
    }
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result<T>({c, oh, ow}, std::move(out), inputs, [=](TensorNode<T>& self) {
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        auto* gb = self.parents.size() > 2 ? parent_grad(self, 2) : nullptr;
        const T* xs = self.parents[0]->data.data();
        const T* ws = self.parents[1]->data.data();
        for (Index ch = 0; ch < c; ++ch) {
            const T* g = self.grad.data() + ch * oh * ow;
            if (gb) (*gb)[ch] += Eigen::Map<const VectorX<T>>(g, oh * ow).sum();
            for (Index u = 0; u < kh; ++u) {
                for (Index v = 0; v < kw; ++v) {
                    const Index widx = (ch * kh + u) * kw + v;
                    T acc = 0;
                    for (Index i = 0; i < oh; ++i) {
                        const Index y = i * stride + u - pad;
                        if (y < 0 || y >= h) continue;
                        const Index rbase = (ch * h + y) * w;
                        for (Index j = 0; j < ow; ++j) {
                            const Index xx = j * stride + v - pad;
                            if (xx < 0 || xx >= w) continue;
                            const T gi = g[i * ow + j];
                            acc += gi * xs[rbase + xx];
                            if (gx) (*gx)[rbase + xx] += gi * ws[widx];
                        }
                    }
                    if (gw) (*gw)[widx] += acc;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
    if (x.ndim() == 0) throw ShapeError("layer_norm: scalar input");
    const Index c = x.dim(0);
    const Index p = x.numel() / c;
    if (gamma.numel() != c || beta.numel() != c) {
        throw ShapeError("layer_norm: gamma/beta length must equal channel count " + std::to_string(c));
    }
    if (eps < 0) throw ConfigurationError("layer_norm: eps must be non-negative");
    const CMapRow<T> xm(x.data(), c, p);
    const auto mu = xm.colwise().mean().eval();
    auto xhat = std::make_shared<RowMat<T>>(xm.rowwise() - mu);
    auto rstd = std::make_shared<Eigen::Matrix<T, 1, Eigen::Dynamic>>(
        ((xhat->array().square().colwise().sum() / static_cast<T>(c)) + static_cast<T>(eps)).rsqrt().matrix());
    // Zero variance with eps = 0 yields 0/0; the centred value is zero there.
    for (Index j = 0; j < p; ++j) {
        if (!std::isfinite((*rstd)[j])) (*rstd)[j] = T(0);
    }
    xhat->array().rowwise() *= rstd->array();
    VectorX<T> out(c * p);
    MapRow<T> om(out.data(), c, p);
    om = (xhat->array().colwise() * gamma.values().array()).colwise() + beta.values().array();
    return make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, [xhat, rstd, c, p](TensorNode<T>& self) {
        const CMapRow<T> g(self.grad.data(), c, p);
        if (auto* gg = parent_grad(self, 1)) *gg += (g.array() * xhat->array()).rowwise().sum().matrix();
        if (auto* gbeta = parent_grad(self, 2)) *gbeta += g.rowwise().sum();
        if (auto* gx = parent_grad(self, 0)) {
            const auto& gamma_v = self.parents[1]->data;
            const RowMat<T> dxhat = (g.array().colwise() * gamma_v.array()).matrix();
            const auto m1 = dxhat.colwise().mean().eval();
            const auto m2 = (dxhat.array() * xhat->array()).colwise().mean().eval();
            MapRow<T> gxm(gx->data(), c, p);
            gxm.array() += ((dxhat.rowwise() - m1).array() - xhat->array().rowwise() * m2.array()).rowwise() *
                           rstd->array();
        }
    });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const Shape& in = x.shape();
    if (axis >= in.size()) throw ShapeError("softmax: axis out of range for " + shape_str(in));
    Index outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
    for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
    const Index len = in[axis];
    VectorX<T> out(x.numel());
    const T* src = x.data();
    for (Index o = 0; o < outer; ++o) {
        for (Index i = 0; i < inner; ++i) {
            const Index base = o * len * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (Index a = 0; a < len; ++a) mx = std::max(mx, src[base + a * inner]);
            T s = 0;
            for (Index a = 0; a < len; ++a) {
                const T e = std::exp(src[base + a * inner] - mx);
                out[base + a * inner] = e;
                s += e;
            }
            for (Index a = 0; a < len; ++a) out[base + a * inner] /= s;
        }
    }
    return make_result<T>(in, std::move(out), {x}, [outer, inner, len](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        const auto& y = self.data;
        for (Index o = 0; o < outer; ++o) {
            for (Index i = 0; i < inner; ++i) {
                const Index base = o * len * inner + i;
                T dot = 0;
                for (Index a = 0; a < len; ++a) dot += self.grad[base + a * inner] * y[base + a * inner];
                for (Index a = 0; a < len; ++a) {
                    const Index k = base + a * inner;
                    (*g)[k] += y[k] * (self.grad[k] - dot);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, Index scale) {
    check_rank(x.shape(), 3, "pixel_shuffle");
    if (scale <= 0 || x.dim(0) % (scale * scale) != 0) {
        throw ConfigurationError("pixel_shuffle: " + std::to_string(x.dim(0)) + " channels not divisible by scale^2 = " +
                                 std::to_string(scale * scale));
    }
    const Index c = x.dim(0) / (scale * scale), h = x.dim(1), w = x.dim(2);
    const Index oh = h * scale, ow = w * scale;
    auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()));
    for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < oh; ++i)
            for (Index j = 0; j < ow; ++j) {
                const Index src_c = ch * scale * scale + (i % scale) * scale + (j % scale);
                (*idx)[static_cast<std::size_t>((ch * oh + i) * ow + j)] = (src_c * h + i / scale) * w + j / scale;
            }
    return gather_impl<T>(x, std::move(idx), {c, oh, ow});
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, Index scale) {
    check_rank(x.shape(), 3, "pixel_unshuffle");
    if (scale <= 0 || x.dim(1) % scale != 0 || x.dim(2) % scale != 0) {
        throw ConfigurationError("pixel_unshuffle: spatial extents not divisible by scale");
    }
    const Index c = x.dim(0), h = x.dim(1) / scale, w = x.dim(2) / scale;
    const Index ih = x.dim(1), iw = x.dim(2);
    auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()));
    for (Index ch = 0; ch < c; ++ch)
        for (Index u = 0; u < scale; ++u)
            for (Index v = 0; v < scale; ++v)
                for (Index i = 0; i < h; ++i)
                    for (Index j = 0; j < w; ++j) {
                        const Index oc = ch * scale * scale + u * scale + v;
                        (*idx)[static_cast<std::size_t>((oc * h + i) * w + j)] = (ch * ih + i * scale + u) * iw + j * scale + v;
                    }
    return gather_impl<T>(x, std::move(idx), {c * scale * scale, h, w});
}

#define CUBEFORMER_INSTANTIATE_OPS(T)                                                                               \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                     \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                     \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                     \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                                             \
    template Tensor<T> mul_scalar(const Tensor<T>&, T);                                                             \
    template Tensor<T> neg(const Tensor<T>&);                                                                       \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> gelu(const Tensor<T>&);                                                                      \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                   \
    template Tensor<T> relu(const Tensor<T>&);                                                                      \
    template Tensor<T> abs(const Tensor<T>&);                                                                       \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                                            \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                                  \
    template Tensor<T> slice(const Tensor<T>&, std::size_t, Index, Index);                                          \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                          \
    template std::vector<Tensor<T>> split(const Tensor<T>&, std::size_t, const std::vector<Index>&);                \
    template Tensor<T> gather(const Tensor<T>&, std::span<const Index>, Shape);                                     \
    template Tensor<T> pad2d(const Tensor<T>&, Index, Index, Index, Index, PadMode);                                \
    template Tensor<T> sum(const Tensor<T>&);                                                                       \
    template Tensor<T> mean(const Tensor<T>&);                                                                      \
    template Tensor<T> sum(const Tensor<T>&, std::size_t);                                                          \
    template Tensor<T> mean(const Tensor<T>&, std::size_t);                                                         \
    template Tensor<T> adaptive_avg_pool2d(const Tensor<T>&, Index, Index);                                         \
    template Tensor<T> max_pool2d(const Tensor<T>&, Index, Index);                                                  \
    template Tensor<T> upsample_nearest(const Tensor<T>&, Index, Index);                                            \
    template Tensor<T> upsample_bilinear(const Tensor<T>&, Index, Index);                                           \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index, Index);                  \
    template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index, Index);        \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);                    \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                      \
    template Tensor<T> pixel_shuffle(const Tensor<T>&, Index);                                                      \
    template Tensor<T> pixel_unshuffle(const Tensor<T>&, Index);

CUBEFORMER_INSTANTIATE_OPS(float)
CUBEFORMER_INSTANTIATE_OPS(double)

}  // namespace cubeformer
