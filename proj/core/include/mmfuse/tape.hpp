#pragma once

#include <functional>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

// Reverse-mode tape. Operations append nodes in execution order, so the list
// is already topologically sorted; backward replays it once, newest first.
// One tape per model instance, driven from a single thread.
template <typename T>
class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  void record(const char* name, Tensor<T> out, std::function<void()> fn) {
    nodes_.push_back(Node{name, std::move(out), std::move(fn)});
  }

  size_t size() const { return nodes_.size(); }

  // Drops recorded nodes (and their captured activations). Accumulated leaf
  // gradients are untouched; clear between micro-batch samples to bound
  // activation memory while gradients keep accumulating.
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = seed and visits every node exactly once in
  // reverse order. Node outputs (intermediates) are re-zeroed first, so only
  // leaf gradients accumulate across repeated calls.
  void backward(const Tensor<T>& loss, T seed = T(1)) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    for (auto& node : nodes_) node.out.zero_grad();
    loss.grad_data()[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

 private:
  struct Node {
    const char* name;
    Tensor<T> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

template <typename T>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>& tape_;
  bool prev_;
};

}  // namespace mmfuse
