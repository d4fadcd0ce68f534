#include "octvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace octvae {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

namespace {
thread_local bool grad_mode_enabled = true;
thread_local BranchTrace* active_trace = nullptr;

void check_shape(const Shape& shape, std::size_t count) {
    for (std::size_t d : shape)
        if (d == 0) throw ContractViolation("tensor shape " + shape_to_string(shape) + " has a zero dimension");
    if (shape_numel(shape) != count)
        throw ContractViolation("tensor shape " + shape_to_string(shape) + " does not match " +
                                std::to_string(count) + " values");
}
} // namespace

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

BranchTrace::BranchTrace() : previous_(active_trace) { active_trace = this; }
BranchTrace::BranchTrace(const BranchRecord& replay) : replay_(&replay), previous_(active_trace) {
    active_trace = this;
}
BranchTrace::~BranchTrace() { active_trace = previous_; }
BranchTrace* BranchTrace::current() { return active_trace; }

const std::vector<std::uint8_t>* BranchTrace::relu(std::vector<std::uint8_t> natural) {
    if (replay_) {
        if (relu_cursor_ >= replay_->relu_masks.size() || replay_->relu_masks[relu_cursor_].size() != natural.size())
            throw GraphError("branch replay out of sync at ReLU call " + std::to_string(relu_cursor_));
        return &replay_->relu_masks[relu_cursor_++];
    }
    for (std::size_t i = 0; i < natural.size(); i += 64) {
        std::uint64_t bits = 0;
        for (std::size_t j = i; j < std::min(natural.size(), i + 64); ++j) bits = (bits << 1) | natural[j];
        mix(bits);
    }
    record_.relu_masks.push_back(std::move(natural));
    return nullptr;
}

const std::vector<std::size_t>* BranchTrace::pool(std::vector<std::size_t> natural) {
    if (replay_) {
        if (pool_cursor_ >= replay_->pool_winners.size() || replay_->pool_winners[pool_cursor_].size() != natural.size())
            throw GraphError("branch replay out of sync at max-pool call " + std::to_string(pool_cursor_));
        return &replay_->pool_winners[pool_cursor_++];
    }
    for (auto w : natural) mix(w);
    record_.pool_winners.push_back(std::move(natural));
    return nullptr;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from_values(std::move(shape), std::vector<T>(n, fill), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_values(Shape shape, std::vector<T> values, bool requires_grad) {
    check_shape(shape, values.size());
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractViolation("item() on tensor of shape " + shape_to_string(shape()));
    return node_->value[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
    node_->grad.assign(node_->value.size(), T(0));
    node_->grad_pending = false;
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
    return from_values(node_->shape, node_->value, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from_values(node_->shape, node_->value, false);
}

template <typename T>
void Tensor<T>::backward() const {
    using Node = detail::Node<T>;
    if (!defined()) throw GraphError("backward() on an undefined tensor");
    if (numel() != 1)
        throw GraphError("backward() requires a scalar loss, got shape " + shape_to_string(shape()));
    if (node_->consumed)
        throw GraphError("backward() on a graph that was already consumed; rebuild it with a new forward pass");
    if (!std::isfinite(static_cast<double>(node_->value[0])))
        throw NumericError("backward() on a non-finite loss");
    if (!node_->requires_grad) throw GraphError("backward() on a tensor that does not require a gradient");

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->is_leaf && n->grad_pending)
            throw GraphError("backward() reached a parameter whose gradient was not reset since the previous "
                             "backward pass; call zero_grad() between steps");
        if (!n->is_leaf && n->consumed)
            throw GraphError("backward() through a graph that was already consumed");
    }

    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->is_leaf || n->grad.empty()) continue;
        n->backward_fn(*n);
    }

    for (Node* n : order) {
        if (n->is_leaf) {
            n->ensure_grad();
            n->grad_pending = true;
        } else {
            n->inputs.clear();
            n->backward_fn = nullptr;
            n->grad.clear();
            n->grad.shrink_to_fit();
            n->consumed = true;
        }
    }
}

template <typename T>
Tensor<T> record_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                    std::function<void(detail::Node<T>&)> backward_fn) {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    const bool track = GradMode::enabled() &&
                       std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    if (track) {
        for (const auto& t : inputs) {
            if (!t.is_leaf() && t.node()->consumed)
                throw GraphError("operation uses a tensor from an already consumed graph");
        }
        node->requires_grad = true;
        node->is_leaf = false;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> record_op(Shape, std::vector<float>, std::vector<Tensor<float>>,
                                 std::function<void(detail::Node<float>&)>);
template Tensor<double> record_op(Shape, std::vector<double>, std::vector<Tensor<double>>,
                                  std::function<void(detail::Node<double>&)>);

} // namespace octvae
