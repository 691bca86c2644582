#pragma once
// Dual prioritized experience replay: one ring buffer for normal-operation
// transitions, one for voltage-violation transitions, each with loss-based
// priorities held in a sum tree.  Batches draw ceil(k*B) entries from the
// normal buffer and the remainder from the violation buffer, each
// priority-proportional with replacement; an empty buffer falls back to a
// single-buffer draw.

#include <cmath>
#include <cstddef>
#include <vector>

#include "p2plab/common.hpp"

namespace p2plab::replay {

struct Transition {
  std::vector<double> state;       // global state: all agents' obs, concat
  std::vector<double> action;      // joint action, concat per agent
  double reward = 0.0;             // shared global reward
  std::vector<double> next_state;
  std::vector<double> expert;      // per-agent expert actions, action layout
  bool done = false;
  bool violation = false;
};

// Fixed-capacity sum tree (capacity padded to a power of two).  Leaves hold
// nonnegative priorities; sample(u) walks down to the leaf owning mass u.
class SumTree {
 public:
  explicit SumTree(std::size_t cap) {
    leaf_ = 1;
    while (leaf_ < cap) leaf_ <<= 1;
    tree_.assign(2 * leaf_, 0.0);
  }

  void set(std::size_t idx, double p) {
    std::size_t i = leaf_ + idx;
    tree_[i] = p;
    for (i >>= 1; i >= 1; i >>= 1) tree_[i] = tree_[2 * i] + tree_[2 * i + 1];
  }

  double get(std::size_t idx) const { return tree_[leaf_ + idx]; }
  double total() const { return tree_[1]; }

  std::size_t sample(double u) const {
    std::size_t i = 1;
    while (i < leaf_) {
      i *= 2;
      if (u >= tree_[i]) {
        u -= tree_[i];
        ++i;
      }
    }
    return i - leaf_;
  }

 private:
  std::size_t leaf_;
  std::vector<double> tree_;
};

// One prioritized ring buffer: priority = (|loss| + floor)^alpha.
class PerBuffer {
 public:
  PerBuffer(std::size_t cap, double alpha, double floor)
      : cap_(cap), alpha_(alpha), floor_(floor), slots_(cap), tree_(cap) {
    if (cap == 0) throw ConfigError("replay: capacity must be positive");
  }

  void push(const Transition& tr, double loss) {
    slots_[head_] = tr;
    tree_.set(head_, priority(loss));
    head_ = (head_ + 1) % cap_;
    if (size_ < cap_) ++size_;
  }

  void update(std::size_t idx, double loss) {
    if (idx >= size_) throw DataError("replay: priority index out of range");
    tree_.set(idx, priority(loss));
  }

  std::size_t sample_index(Rng& rng) const {
    if (size_ == 0) throw DataError("replay: sampling from empty buffer");
    std::uniform_real_distribution<double> d(0.0, tree_.total());
    std::size_t idx = tree_.sample(d(rng));
    return idx < size_ ? idx : size_ - 1;  // guard zero-mass padding leaves
  }

  const Transition& at(std::size_t idx) const { return slots_[idx]; }
  std::size_t size() const { return size_; }

 private:
  double priority(double loss) const {
    return std::pow(std::abs(loss) + floor_, alpha_);
  }

  std::size_t cap_, head_ = 0, size_ = 0;
  double alpha_, floor_;
  std::vector<Transition> slots_;
  SumTree tree_;
};

struct SampleRef {
  bool from_violation = false;
  std::size_t idx = 0;
};

class DualReplay {
 public:
  explicit DualReplay(std::size_t cap, double alpha = 0.6,
                      double floor = 1e-6)
      : normal_(cap, alpha, floor), violation_(cap, alpha, floor) {}

  // Routed by the transition's violation flag; priority from |loss_value|.
  void push(const Transition& tr, double loss_value) {
    (tr.violation ? violation_ : normal_).push(tr, loss_value);
  }

  // ceil(k*B) from normal, rest from violation; single-buffer fallback when
  // the other side is empty.  Throws if both are.
  std::vector<SampleRef> sample(std::size_t batch, double k, Rng& rng) const {
    if (normal_.size() == 0 && violation_.size() == 0)
      throw DataError("replay: both buffers empty");
    std::size_t nn;
    if (violation_.size() == 0)
      nn = batch;
    else if (normal_.size() == 0)
      nn = 0;
    else
      nn = static_cast<std::size_t>(
          std::ceil(k * static_cast<double>(batch)));
    if (nn > batch) nn = batch;
    std::vector<SampleRef> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      bool viol = i >= nn;
      const PerBuffer& buf = viol ? violation_ : normal_;
      out.push_back({viol, buf.sample_index(rng)});
    }
    return out;
  }

  const Transition& get(const SampleRef& r) const {
    return (r.from_violation ? violation_ : normal_).at(r.idx);
  }

  void update(const SampleRef& r, double loss) {
    (r.from_violation ? violation_ : normal_).update(r.idx, loss);
  }

  std::size_t size_normal() const { return normal_.size(); }
  std::size_t size_violation() const { return violation_.size(); }
  std::size_t size() const { return normal_.size() + violation_.size(); }

 private:
  PerBuffer normal_, violation_;
};

}  // namespace p2plab::replay
