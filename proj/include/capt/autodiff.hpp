#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A GradRecord is a tape: every op evaluates eagerly, appends a node holding
// its value, and (when any input participates in differentiation) a closure
// that scatters the node's gradient into its inputs. backward() replays the
// closures in reverse insertion order.

#include "capt/error.hpp"
#include "capt/tensor.hpp"

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace capt {

/// A named trainable tensor. Frozen parameters never receive gradients.
struct Parameter {
    std::string name;
    Tensor value;
    bool frozen = false;
};

class GradRecord;

/// Handle to a node of a GradRecord. Cheap to copy; valid while the record lives.
class Var {
  public:
    Var() = default;
    Var(GradRecord *record, std::size_t id) : record_(record), id_(id) {}

    [[nodiscard]] const Tensor &value() const;
    [[nodiscard]] const Shape &shape() const { return value().shape(); }
    [[nodiscard]] std::size_t id() const noexcept { return id_; }
    [[nodiscard]] GradRecord *record() const noexcept { return record_; }
    [[nodiscard]] bool valid() const noexcept { return record_ != nullptr; }

  private:
    GradRecord *record_ = nullptr;
    std::size_t id_ = 0;
};

struct ParamGrad {
    Parameter *param;
    Tensor grad;
};

class GradRecord {
  public:
    using BackwardFn = std::function<void(GradRecord &, const Tensor &)>;

    /// With `recording == false` only values are kept, no closures.
    explicit GradRecord(bool recording = true) : recording_(recording) {}

    GradRecord(const GradRecord &) = delete;
    GradRecord &operator=(const GradRecord &) = delete;

    [[nodiscard]] bool recording() const noexcept { return recording_; }

    Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

    /// Registers `p` and returns its leaf. Registering twice yields the same leaf.
    Var param(Parameter &p) {
        if (auto it = param_index_.find(&p); it != param_index_.end()) {
            return Var(this, it->second);
        }
        const bool grad = recording_ && !p.frozen;
        Var v = push(p.value, grad, nullptr);
        param_index_.emplace(&p, v.id());
        params_.push_back(&p);
        return v;
    }

    /// Appends an op result. `fn` is dropped when no input needs a gradient.
    Var push(Tensor value, bool needs_grad, BackwardFn fn) {
        Node node;
        node.value = std::move(value);
        node.needs_grad = recording_ && needs_grad;
        if (node.needs_grad) {
            node.backward = std::move(fn);
        }
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    [[nodiscard]] const Tensor &value(std::size_t id) const { return nodes_.at(id).value; }
    [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
    [[nodiscard]] bool needs_grad(const Var &v) const { return needs_grad(v.id()); }

    /// Gradient buffer of a node, zero-initialised on first access.
    Tensor &grad(std::size_t id) {
        Node &n = nodes_.at(id);
        if (n.grad.empty()) {
            n.grad = Tensor(n.value.shape(), 0.0);
        }
        return n.grad;
    }

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    [[nodiscard]] const std::vector<Parameter *> &parameters() const noexcept { return params_; }

    /// Reverse pass from a scalar loss. Returns one gradient per registered
    /// parameter, in registration order; unused and frozen parameters get zeros.
    std::vector<ParamGrad> backward(const Var &loss) {
        if (loss.record() != this) {
            throw UsageError("backward: loss belongs to a different record");
        }
        if (!recording_) {
            throw UsageError("backward: record was created without gradient recording");
        }
        if (value(loss.id()).size() != 1) {
            throw UsageError("backward: loss must be a scalar, got shape " +
                             shape_string(value(loss.id()).shape()));
        }
        grad(loss.id())[0] = 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node &n = nodes_[i];
            if (n.backward && !n.grad.empty()) {
                n.backward(*this, n.grad);
            }
        }
        std::vector<ParamGrad> out;
        out.reserve(params_.size());
        for (Parameter *p : params_) {
            const Node &n = nodes_[param_index_.at(p)];
            out.push_back({p, n.grad.empty() ? Tensor(p->value.shape(), 0.0) : n.grad});
        }
        return out;
    }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        bool needs_grad = false;
    };

    bool recording_;
    std::deque<Node> nodes_;
    std::vector<Parameter *> params_;
    std::unordered_map<const Parameter *, std::size_t> param_index_;
};

inline const Tensor &Var::value() const { return record_->value(id_); }

/// Free-function spelling of GradRecord::backward.
inline std::vector<ParamGrad> backward(const Var &loss, GradRecord &record) {
    return record.backward(loss);
}

}  // namespace capt
