#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssta/world.hpp"

namespace ssta::lifelong {

enum class Strategy { sw, id };
enum class Eviction { smallest_norm, fifo };

inline const char* to_string(Strategy s) { return s == Strategy::sw ? "sw" : "id"; }

inline Strategy parse_strategy(const std::string& s) {
  if (s == "sw") return Strategy::sw;
  if (s == "id") return Strategy::id;
  throw std::invalid_argument("unknown lifelong strategy '" + s + "' (expected sw|id)");
}

template <class S>
struct Entry {
  std::uint64_t id = 0;
  S sample;
  std::optional<double> norm;
};

/**
 * Bounded store of at most D samples. Keeps a running mean over every gradient
 * norm offered through id_offer, stored or not.
 */
template <class S>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity, Eviction eviction = Eviction::smallest_norm)
      : capacity_(capacity), eviction_(eviction) {}

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::deque<Entry<S>>& entries() const noexcept { return entries_; }
  std::uint64_t seen() const noexcept { return seen_; }
  double running_mean() const noexcept { return mean_; }

  /// Sliding window: append, then drop the oldest while over capacity.
  void sw_offer(std::uint64_t id, S sample) {
    entries_.push_back(Entry<S>{id, std::move(sample), std::nullopt});
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  /// Interesting data: stores iff norm exceeds the mean of all earlier norms (0 before any).
  bool id_offer(std::uint64_t id, S sample, double grad_norm) {
    if (!(grad_norm >= 0.0)) throw std::invalid_argument("gradient norm must be nonnegative, got " + std::to_string(grad_norm));
    const bool store = grad_norm > mean_;
    ++seen_;
    mean_ += (grad_norm - mean_) / double(seen_);
    if (!store || capacity_ == 0) return false;
    if (entries_.size() == capacity_) {
      auto victim = entries_.begin();
      if (eviction_ == Eviction::smallest_norm)
        victim = std::min_element(entries_.begin(), entries_.end(),
                                  [](const Entry<S>& a, const Entry<S>& b) { return *a.norm < *b.norm; });
      entries_.erase(victim);
    }
    entries_.push_back(Entry<S>{id, std::move(sample), grad_norm});
    return true;
  }

  /// Index of the most recently stored entry.
  std::size_t newest() const {
    if (entries_.empty()) throw std::logic_error("replay buffer is empty");
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries_.size(); ++i)
      if (entries_[i].id > entries_[best].id) best = i;
    return best;
  }

  /**
   * Entry indices for one mini-batch. The newest entry comes first; the rest are
   * drawn uniformly without replacement, or with replacement when the batch is
   * larger than the buffer.
   */
  std::vector<std::size_t> draw_batch(std::size_t batch, world::Rng& rng) const {
    if (entries_.empty()) throw std::logic_error("draw_batch on an empty replay buffer");
    if (batch == 0) return {};
    const std::size_t n = entries_.size(), first = newest();
    std::vector<std::size_t> out{first};
    if (batch > n) {
      while (out.size() < batch) out.push_back(world::uniform_index(rng, n));
      return out;
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i)
      if (i != first) rest.push_back(i);
    // partial Fisher-Yates
    for (std::size_t i = 0; i + 1 < batch; ++i) {
      const std::size_t j = i + world::uniform_index(rng, rest.size() - i);
      std::swap(rest[i], rest[j]);
      out.push_back(rest[i]);
    }
    return out;
  }

 private:
  std::size_t capacity_;
  Eviction eviction_;
  std::deque<Entry<S>> entries_;
  std::uint64_t seen_ = 0;
  double mean_ = 0.0;
};

}  // namespace ssta::lifelong
