#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rfat/tensor.hpp"

namespace rfat {

/// Ordered record of differentiable operations for one forward pass.
///
/// Operations register a backward closure on the active tape (see TapeScope)
/// whenever one of their inputs requires a gradient. backward() replays the
/// closures in reverse recording order, exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op_name, std::function<void()> backward_fn);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool replayed() const noexcept { return replayed_; }
  std::vector<std::string> op_names() const;

  /// Seeds d(loss)/d(loss) = 1 and runs every node backward.
  template <typename T>
  void backward(Tensor<T> loss);

  /// The tape operations currently record onto, or nullptr.
  static Tape* active() noexcept;

 private:
  friend class TapeScope;

  struct Node {
    const char* name;
    std::function<void()> backward_fn;
  };

  std::vector<Node> nodes_;
  bool replayed_ = false;
};

/// Makes a tape the active recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the current thread (inference, finite differences).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

template <typename T>
void backward(Tape& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

}  // namespace rfat
