#include "rfat/autograd.hpp"

#include <cmath>

namespace rfat {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Tape::record(const char* op_name, std::function<void()> backward_fn) {
  if (replayed_) throw std::logic_error("Tape::record after backward");
  nodes_.push_back(Node{op_name, std::move(backward_fn)});
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.emplace_back(n.name);
  return names;
}

template <typename T>
void Tape::backward(Tensor<T> loss) {
  if (replayed_) throw std::logic_error("Tape::backward called twice");
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericalError("backward: non-finite loss");
  }
  replayed_ = true;
  if (!loss.requires_grad()) return;
  loss.ensure_grad();
  loss.grad()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward_fn();
    // Release captured intermediates as soon as they are no longer needed.
    it->backward_fn = nullptr;
  }
}

template void Tape::backward<float>(Tensor<float>);
template void Tape::backward<double>(Tensor<double>);

Tape* Tape::active() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace rfat
