#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "octvae/error.hpp"

namespace octvae {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad; // empty means "no gradient"
    bool requires_grad = false;
    bool is_leaf = true;
    // Leaf gradient produced by a backward pass and not yet reset.
    bool grad_pending = false;
    // Interior node whose graph was released by a backward pass.
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

} // namespace detail

/// Thread-local switch for graph recording. Disable around inference.
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
public:
    NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(previous_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Branch decisions of piecewise operations in evaluation order.
struct BranchRecord {
    std::vector<std::vector<std::uint8_t>> relu_masks;
    std::vector<std::vector<std::size_t>> pool_winners;
    std::uint64_t fingerprint = 0xcbf29ce484222325ULL;
};

/// Thread-local scope that records the branch decisions of ReLU and max-pool
/// calls, or replays a previous record so that every such call takes the
/// recorded branch regardless of its input (evaluation on a fixed linear piece).
class BranchTrace {
public:
    BranchTrace();
    explicit BranchTrace(const BranchRecord& replay);
    ~BranchTrace();
    BranchTrace(const BranchTrace&) = delete;
    BranchTrace& operator=(const BranchTrace&) = delete;

    const BranchRecord& record() const { return record_; }
    std::uint64_t fingerprint() const { return record_.fingerprint; }

    /// Recording: stores `natural` and returns nullptr. Replaying: returns the
    /// recorded decision for this call; a size mismatch throws GraphError.
    const std::vector<std::uint8_t>* relu(std::vector<std::uint8_t> natural);
    const std::vector<std::size_t>* pool(std::vector<std::size_t> natural);

    /// Innermost live trace of this thread, or nullptr.
    static BranchTrace* current();

private:
    void mix(std::uint64_t value) { record_.fingerprint = (record_.fingerprint ^ value) * 0x100000001b3ULL; }

    BranchRecord record_;
    const BranchRecord* replay_ = nullptr;
    std::size_t relu_cursor_ = 0;
    std::size_t pool_cursor_ = 0;
    BranchTrace* previous_;
};

/// N-dimensional row-major array with optional reverse-mode gradient.
///
/// Copies share storage (handle semantics); use clone() for a deep copy.
/// Values are treated as immutable once recorded in a graph; the only
/// sanctioned in-place writers are parameter initialization, checkpoint
/// loading, and the optimizer.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T fill, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T v, bool requires_grad = false) { return from_values({1}, {v}, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> values() const { return node_->value; }
    std::span<T> mutable_values() { return node_->value; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }

    /// Sets the gradient to zeros and re-arms the leaf for the next backward pass.
    void zero_grad();

    /// Propagates d(this)/d(leaf) into every reachable leaf requiring a gradient.
    ///
    /// The tensor must be a single-element result of recorded ops. The graph is
    /// released afterwards; a second call throws GraphError, as does a backward
    /// pass reaching a leaf whose gradient was not reset since the last one.
    void backward() const;

    /// New leaf sharing no storage and no history.
    Tensor clone(bool requires_grad = false) const;
    /// New leaf sharing values, cut from the graph.
    Tensor detach() const;

    const NodePtr& node() const { return node_; }
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

private:
    NodePtr node_;
};

/// Records the result of a differentiable operation.
///
/// The backward closure receives the result node (whose grad is populated)
/// and must accumulate into the grads of `inputs`. Nothing is recorded when
/// grad mode is off or no input requires a gradient.
template <typename T>
Tensor<T> record_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                    std::function<void(detail::Node<T>&)> backward_fn);

extern template class Tensor<float>;
extern template class Tensor<double>;

} // namespace octvae
