#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cubeformer/errors.hpp"

namespace cubeformer {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline Index shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

/// Shared storage behind a Tensor handle plus the graph edge that produced it.
template <typename T>
struct TensorNode {
    Shape shape;
    VectorX<T> data;
    VectorX<T> grad;  // empty until a gradient flows in
    bool requires_grad = false;

    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads self.grad and accumulates into parents' grads.
    std::function<void(TensorNode&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    VectorX<T>& grad_buffer() {
        if (grad.size() != data.size()) grad = VectorX<T>::Zero(data.size());
        return grad;
    }
};

/// Dense row-major N-d array with optional gradient tracking.
///
/// Handles share storage: copying a Tensor aliases the same node. Values are
/// treated as immutable once an op has produced them; only leaves (parameters)
/// are updated in place by the optimizer.
template <typename T>
class Tensor {
public:
    using Scalar = T;
    using Node = TensorNode<T>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
        for (Index e : shape) {
            if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        }
        node_->data = VectorX<T>::Constant(shape_numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, VectorX<T> data) : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    Tensor(Shape shape, std::initializer_list<T> values)
        : Tensor(std::move(shape), VectorX<T>(Eigen::Map<const VectorX<T>>(values.begin(),
                                                                            static_cast<Index>(values.size())))) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    Index dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t ndim() const { return node_->shape.size(); }
    Index numel() const { return node_->data.size(); }

    const VectorX<T>& values() const { return node_->data; }
    // Mutable access is reserved for leaves (parameter updates, test set-up).
    VectorX<T>& mutable_values() { return node_->data; }
    const T* data() const { return node_->data.data(); }
    T* mutable_data() { return node_->data.data(); }

    T operator[](Index i) const { return node_->data[i]; }
    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool flag = true) {
        node_->requires_grad = flag;
        return *this;
    }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    const VectorX<T>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.resize(0); }

    /// Same values, no history.
    Tensor detach() const { return Tensor(node_->shape, node_->data); }

    Tensor clone() const { return detach(); }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(node_->shape, node_->data.template cast<U>().eval());
    }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Creates an op output and, when any input tracks gradients, records the edge.
template <typename T>
Tensor<T> make_result(Shape shape, VectorX<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
    assert(data.allFinite() && "non-finite value produced by forward op");
    Tensor<T> out(std::move(shape), std::move(data));
    if (!grad_mode_enabled()) return out;
    bool track = false;
    for (const auto& in : inputs) track = track || in.requires_grad();
    if (!track) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) node.parents.push_back(in.node());
    node.backward_fn = std::move(backward_fn);
    return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, VectorX<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
    return make_result(std::move(shape), std::move(data), std::vector<Tensor<T>>(inputs), std::move(backward_fn));
}

/// Accumulates `g` into the gradient of parent `i` if that parent tracks gradients.
template <typename T, typename Derived>
void accumulate_grad(TensorNode<T>& self, std::size_t i, const Eigen::MatrixBase<Derived>& g) {
    auto& parent = *self.parents[i];
    if (!parent.requires_grad) return;
    parent.grad_buffer() += g;
}

template <typename T>
VectorX<T>* parent_grad(TensorNode<T>& self, std::size_t i) {
    auto& parent = *self.parents[i];
    if (!parent.requires_grad) return nullptr;
    return &parent.grad_buffer();
}

/// Topologically ordered record of the ops reachable from a root tensor.
template <typename T>
class Graph {
public:
    explicit Graph(const Tensor<T>& root) {
        if (!root.requires_grad()) return;
        // Iterative post-order DFS; children (parents in data-flow terms) first.
        std::unordered_set<const TensorNode<T>*> seen;
        std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                TensorNode<T>* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    /// Inputs before consumers; the root is last.
    const std::vector<TensorNode<T>*>& nodes() const { return order_; }

    /// Runs the recorded backward functions in reverse topological order.
    /// Returns the number of nodes visited.
    std::size_t backward(const VectorX<T>& seed) {
        if (order_.empty()) return 0;
        TensorNode<T>& root = *order_.back();
        root.grad_buffer() += seed;
        std::size_t visited = 0;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            TensorNode<T>& node = **it;
            ++visited;
            if (node.is_leaf()) continue;
            if (node.grad.size() == node.data.size()) node.backward_fn(node);
            // Intermediate gradients are not needed after propagation.
            node.grad.resize(0);
        }
        return visited;
    }

private:
    std::vector<TensorNode<T>*> order_;
};

/// Populates `grad` on every requires_grad leaf reachable from `loss`.
/// Repeated calls accumulate.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw UsageError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    Graph<T> graph(loss);
    graph.backward(VectorX<T>::Ones(1));
}

}  // namespace cubeformer
