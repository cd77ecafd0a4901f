#pragma once

#include "dsamp/grad/tensor.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dsamp::grad {

struct ParamSlot {
  std::string name;
  Matrix value;
  Matrix grad;
  bool grad_populated = false;
};

/// Named, ordered parameter slots. The flat view concatenates slot values in
/// insertion order (row-major within a slot).
class ParamStore {
 public:
  std::size_t add(std::string name, Matrix init) {
    if (index_.count(name)) throw ContractViolation("ParamStore: duplicate slot '" + name + "'");
    const std::size_t idx = slots_.size();
    index_.emplace(name, idx);
    Matrix g = Matrix::Zero(init.rows(), init.cols());
    slots_.push_back(ParamSlot{std::move(name), std::move(init), std::move(g), false});
    return idx;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("ParamStore: no slot '" + name + "'");
    return it->second;
  }

  ParamSlot& operator[](std::size_t i) { return slots_[i]; }
  const ParamSlot& operator[](std::size_t i) const { return slots_[i]; }
  ParamSlot& at(const std::string& name) { return slots_[index_of(name)]; }
  const ParamSlot& at(const std::string& name) const { return slots_[index_of(name)]; }

  std::size_t size() const noexcept { return slots_.size(); }
  std::span<const ParamSlot> slots() const noexcept { return slots_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += static_cast<std::size_t>(s.value.size());
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(numel());
    for (const auto& s : slots_) out.insert(out.end(), s.value.data(), s.value.data() + s.value.size());
    return out;
  }

  void unflatten(std::span<const double> flat) {
    require(flat.size() == numel(), "ParamStore::unflatten: size mismatch");
    std::size_t off = 0;
    for (auto& s : slots_) {
      std::copy_n(flat.data() + off, s.value.size(), s.value.data());
      off += static_cast<std::size_t>(s.value.size());
    }
    ++version_;
  }

  void zero_grad() {
    for (auto& s : slots_) {
      s.grad.setZero();
      s.grad_populated = false;
    }
  }

  bool same_layout(const ParamStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = slots_[i];
      const auto& b = other.slots_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
        return false;
    }
    return true;
  }

  std::uint64_t version() const noexcept { return version_; }
  void bump_version() noexcept { ++version_; }

 private:
  std::vector<ParamSlot> slots_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t version_ = 0;
};

/// Places every slot of `store` on `tape` as a leaf. With requires_grad off,
/// the leaves are constants: gradients still flow through inputs built from
/// them, but never into the parameters.
inline std::vector<Tensor> bind(Tape& tape, const ParamStore& store, bool requires_grad) {
  std::vector<Tensor> out;
  out.reserve(store.size());
  for (const auto& s : store.slots()) out.push_back(tape.leaf(s.value, requires_grad));
  return out;
}

/// Reverse pass from `root`, adding each bound leaf's gradient into the
/// matching slot. Calling twice without zero_grad accumulates twice.
inline void forward_backward(const Tensor& root, std::span<const Tensor> bound, ParamStore& store) {
  require(bound.size() == store.size(), "forward_backward: binding does not match store");
  require(root.rows() == 1 && root.cols() == 1, "forward_backward: root must be a scalar");
  Tape& tape = root.tape();
  tape.zero_grad();
  tape.backward(root);
  for (std::size_t i = 0; i < bound.size(); ++i) {
    if (!bound[i].requires_grad()) continue;
    auto& slot = store[i];
    const Matrix& g = bound[i].grad();
    if (g.size() != 0) slot.grad += g;
    slot.grad_populated = true;
  }
}

}  // namespace dsamp::grad
