#pragma once

#include <deque>
#include <functional>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "modt/diffcore/tensor.hpp"

namespace modt::diff {

/// Records differentiable operations in execution order and replays their
/// local gradient rules in reverse. A tape is single-use: `backward` may be
/// called once. Tensors created by a tape live as long as the tape.
///
/// With `recording = false` no rules are stored and no output requires a
/// gradient, which is how evaluation-mode forwards run.
template <class T>
class Tape {
 public:
  using Rule = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  /// New tape-owned tensor. `requires_grad` is dropped when not recording.
  Tensor<T>& emit(Shape shape, Buffer<T> values, bool requires_grad) {
    auto& t = nodes_.emplace_back(std::move(shape), std::move(values), requires_grad && recording_);
    produced_.insert(&t);
    return t;
  }
  Tensor<T>& emit(Shape shape, const std::vector<T>& values, bool requires_grad) {
    return emit(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad);
  }

  Tensor<T>& constant(Shape shape, std::initializer_list<T> values) {
    return emit(std::move(shape), Buffer<T>(values), false);
  }
  Tensor<T>& constant(Shape shape, Buffer<T> values) { return emit(std::move(shape), std::move(values), false); }
  Tensor<T>& constant(Shape shape, const std::vector<T>& values) {
    return emit(std::move(shape), Buffer<T>(values.begin(), values.end()), false);
  }

  /// Register the gradient rule producing `output`. Rules read `output.grad`
  /// and add into the grads of whichever inputs require them.
  void record(std::string_view op, std::vector<Tensor<T>*> inputs, Tensor<T>& output, Rule rule) {
    if (!recording_ || !output.requires_grad) return;
    ops_.push_back(Entry{op, std::move(inputs), &output, std::move(rule)});
  }

  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractViolation("backward() needs a scalar loss, got shape " + shape_string(loss.shape));
    }
    if (!produced_.contains(&loss)) {
      throw ContractViolation("backward() loss was not produced on this tape");
    }
    if (consumed_) throw ContractViolation("backward() already ran on this tape");
    consumed_ = true;
    if (!loss.requires_grad) return;
    loss.ensure_grad();
    loss.grad[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (it->output->has_grad()) it->rule();
    }
  }

  std::size_t num_ops() const noexcept { return ops_.size(); }
  std::size_t num_tensors() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return ops_.at(i).op; }
  const std::vector<Tensor<T>*>& op_inputs(std::size_t i) const { return ops_.at(i).inputs; }
  const Tensor<T>* op_output(std::size_t i) const { return ops_.at(i).output; }

 private:
  struct Entry {
    std::string_view op;
    std::vector<Tensor<T>*> inputs;
    Tensor<T>* output;
    Rule rule;
  };

  bool recording_;
  bool consumed_ = false;
  std::deque<Tensor<T>> nodes_;
  std::unordered_set<const Tensor<T>*> produced_;
  std::vector<Entry> ops_;
};

}  // namespace modt::diff
