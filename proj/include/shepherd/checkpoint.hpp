#pragma once

// Forward-trajectory storage with optional checkpointing. With stride k the
// store keeps every k-th snapshot and recomputes the ones in between from the
// preceding checkpoint when a backward sweep asks for them. Stride 1 is plain
// in-memory storage. Checkpoints can be moved out of memory into a
// CheckpointStore (a directory on disk in the harness); then at most two are
// loaded at a time.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "shepherd/model.hpp"

namespace shepherd {

/// Snapshots held at the same time for a given stride: the checkpoints plus
/// one recomputed segment.
inline std::size_t resident_snapshots(std::size_t snapshots, std::size_t stride) {
  const std::size_t checkpoints = (snapshots + stride - 1) / stride;
  return checkpoints + (stride > 1 ? stride - 1 : 0);
}

/// Smallest stride whose resident footprint fits the budget. Throws when even
/// the best stride does not fit.
inline std::size_t choose_stride(std::size_t snapshots, std::size_t bytes_per_snapshot,
                                 std::size_t budget_bytes) {
  if (snapshots == 0) return 1;
  if (budget_bytes < 2 * bytes_per_snapshot) {
    throw Error("memory budget is smaller than two snapshots");
  }
  for (std::size_t k = 1; k <= snapshots; ++k) {
    if (resident_snapshots(snapshots, k) * bytes_per_snapshot <= budget_bytes) return k;
  }
  throw Error("memory budget cannot hold the checkpointed trajectory");
}

/// Out-of-memory home for checkpoints, addressed by checkpoint slot.
template <class State>
class CheckpointStore {
 public:
  virtual ~CheckpointStore() = default;
  virtual void put(std::size_t slot, const State& s) = 0;
  virtual State get(std::size_t slot) = 0;
};

template <class State>
using CheckpointStoreFactory = std::function<std::shared_ptr<CheckpointStore<State>>()>;

/// Stride when checkpoints live in a store. Resident are the initial state,
/// two loaded checkpoints and one segment of k - 1, so k = 1 (every snapshot
/// stored, nothing recomputed) is the smallest stride and fits whenever three
/// snapshots do.
inline std::size_t choose_spilled_stride(std::size_t bytes_per_snapshot, std::size_t budget_bytes) {
  if (budget_bytes < 3 * bytes_per_snapshot) {
    throw Error("memory budget is smaller than three snapshots");
  }
  return 1;
}

template <class State>
class Trajectory {
 public:
  /// Produces snapshot `index + 1` from snapshot `index`.
  using Stepper = std::function<State(const State&, std::size_t index)>;

  Trajectory() = default;
  Trajectory(std::size_t snapshot_count, std::size_t stride, Stepper stepper)
      : count_(snapshot_count), stride_(stride == 0 ? 1 : stride), stepper_(std::move(stepper)) {
    checkpoints_.reserve((count_ + stride_ - 1) / stride_);
  }

  std::size_t size() const { return count_; }
  std::size_t stride() const { return stride_; }
  std::size_t stored() const { return pushed_; }
  std::size_t recomputations() const { return recomputations_; }
  std::size_t peak_resident() const { return peak_resident_; }
  bool complete() const { return pushed_ == count_; }
  bool spilled() const { return store_ != nullptr; }

  /// Send checkpoints to `store` instead of keeping them. Must be called
  /// before the first push.
  void use_store(std::shared_ptr<CheckpointStore<State>> store) {
    if (pushed_ != 0) throw Error("checkpoint store must be set before the first snapshot");
    store_ = std::move(store);
  }

  /// Append the next forward snapshot. Only checkpoints are retained.
  void push(State s) {
    if (pushed_ >= count_) throw Error("trajectory already holds all snapshots");
    if (pushed_ % stride_ == 0) {
      if (store_) {
        store_->put(pushed_ / stride_, s);
        if (pushed_ == 0) front_ = std::move(s);
      } else {
        checkpoints_.push_back(std::move(s));
      }
    }
    ++pushed_;
    note_residency();
  }

  /// Snapshot n. The reference stays valid across a call for n - 1 or n + 1
  /// (a checkpoint and its segment are resident together).
  const State& at(std::size_t n) {
    if (n >= pushed_) throw Error("trajectory snapshot out of range");
    if (n % stride_ == 0) return checkpoint(n / stride_);
    const std::size_t base = n - n % stride_;
    if (!cache_base_ || *cache_base_ != base) fill_segment(base);
    return segment_[n - base - 1];
  }

  const State& front() const { return store_ ? *front_ : checkpoints_.front(); }

 private:
  const State& checkpoint(std::size_t slot) {
    if (!store_) return checkpoints_[slot];
    for (auto& l : loaded_)
      if (l && l->first == slot) return l->second;
    // Two loaded slots: the one a caller may still hold and the new one.
    std::swap(loaded_[0], loaded_[1]);
    loaded_[1].emplace(slot, store_->get(slot));
    note_residency();
    return loaded_[1]->second;
  }

  void fill_segment(std::size_t base) {
    const std::size_t last = std::min(base + stride_ - 1, pushed_ - 1);
    segment_.clear();
    segment_.reserve(stride_);
    const State* prev = &checkpoint(base / stride_);
    for (std::size_t i = base; i < last; ++i) {
      segment_.push_back(stepper_(*prev, i));
      prev = &segment_.back();
      ++recomputations_;
    }
    cache_base_ = base;
    note_residency();
  }

  void note_residency() {
    std::size_t held = checkpoints_.size() + segment_.size();
    if (store_) held += (loaded_[0] ? 1 : 0) + (loaded_[1] ? 1 : 0) + (front_ ? 1 : 0);
    peak_resident_ = std::max(peak_resident_, held);
  }

  std::size_t count_ = 0;
  std::size_t stride_ = 1;
  Stepper stepper_;
  std::vector<State> checkpoints_;
  std::vector<State> segment_;
  std::shared_ptr<CheckpointStore<State>> store_;
  std::optional<std::pair<std::size_t, State>> loaded_[2];
  std::optional<State> front_;
  std::optional<std::size_t> cache_base_;
  std::size_t pushed_ = 0;
  std::size_t recomputations_ = 0;
  std::size_t peak_resident_ = 0;
};

}  // namespace shepherd
