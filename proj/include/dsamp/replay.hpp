#pragma once

#include "dsamp/energies.hpp"
#include "dsamp/kernels.hpp"
#include "dsamp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace dsamp {

class EmptyBufferError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PerConfig {
  std::size_t capacity = 5000;
  double alpha = 1.0;
  double is_beta = 0.1;
  double priority_floor = 1e-6;
};

/// A drawn replay batch. `ids` are insertion serials, stable across
/// evictions, so stale updates are ignored.
struct PerSample {
  std::vector<std::uint64_t> ids;
  TrajectoryBatch batch;
  Vector weights;
  std::vector<double> probabilities;
};

/// Proportional prioritised replay over whole trajectories, FIFO eviction.
class PerBuffer {
 public:
  explicit PerBuffer(PerConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.capacity == 0) throw std::invalid_argument("PER capacity must be positive");
  }

  const PerConfig& config() const noexcept { return cfg_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  std::uint64_t inserted() const noexcept { return next_id_; }
  std::uint64_t sample_calls() const noexcept { return sample_calls_; }

  std::uint64_t insert(Trajectory t, double priority) {
    if (!(priority > 0.0) || !std::isfinite(priority)) priority = cfg_.priority_floor;
    if (items_.size() == cfg_.capacity) {
      items_.pop_front();
      ++front_id_;
    }
    t.provenance = Provenance::replayed;
    items_.push_back({std::move(t), priority});
    return next_id_++;
  }

  void insert_batch(const TrajectoryBatch& b, const Vector& priorities) {
    for (int r = 0; r < b.size(); ++r) insert(b.get(r), priorities(r));
  }

  /// P(i) = p_i^alpha / sum_j p_j^alpha.
  std::vector<double> probabilities() const {
    std::vector<double> p(items_.size());
    double total = 0.0;
    for (std::size_t i = 0; i < items_.size(); ++i) total += p[i] = std::pow(items_[i].priority, cfg_.alpha);
    for (double& v : p) v /= total;
    return p;
  }

  /// k draws with replacement; weight (N P(i))^-beta divided by the batch max.
  PerSample sample(std::size_t k, std::uint64_t seed) {
    if (items_.empty()) throw EmptyBufferError("PER: cannot sample from an empty buffer");
    ++sample_calls_;
    const auto p = probabilities();
    std::vector<double> cdf(p.size());
    std::partial_sum(p.begin(), p.end(), cdf.begin());
    CounterRng rng(seed, stream_id(0x9e4, 0));
    PerSample out;
    std::vector<Trajectory> ts;
    out.weights.resize(static_cast<Index>(k));
    const double n = static_cast<double>(items_.size());
    double wmax = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double u = rng.uniform() * cdf.back();
      std::size_t i = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      i = std::min(i, items_.size() - 1);
      out.ids.push_back(front_id_ + i);
      out.probabilities.push_back(p[i]);
      ts.push_back(items_[i].traj);
      const double w = std::pow(n * p[i], -cfg_.is_beta);
      out.weights(static_cast<Index>(j)) = w;
      wmax = std::max(wmax, w);
    }
    out.weights /= wmax;
    out.batch = TrajectoryBatch::from(ts);
    out.batch.provenance = Provenance::replayed;
    return out;
  }

  void update(const std::vector<std::uint64_t>& ids, const Vector& priorities) {
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (ids[j] < front_id_ || ids[j] >= next_id_) continue;
      double pr = priorities(static_cast<Index>(j));
      if (!(pr > 0.0) || !std::isfinite(pr)) pr = cfg_.priority_floor;
      items_[ids[j] - front_id_].priority = pr;
    }
  }

  bool contains(std::uint64_t id) const noexcept { return id >= front_id_ && id < next_id_; }
  double priority(std::uint64_t id) const { return items_.at(id - front_id_).priority; }

 private:
  struct Item {
    Trajectory traj;
    double priority;
  };
  PerConfig cfg_;
  std::deque<Item> items_;
  std::uint64_t front_id_ = 0;
  std::uint64_t next_id_ = 0;
  std::uint64_t sample_calls_ = 0;
};

struct LangevinConfig {
  double step = 5e-3;
  int n_steps = 5;
};

/// Terminal states for backward-sampled training, refreshed by unadjusted
/// Langevin steps. Ring buffer with FIFO overwrite at capacity.
class TerminalBuffer {
 public:
  TerminalBuffer(int dim, std::size_t capacity = 600000) : dim_(dim), capacity_(capacity) {
    if (capacity == 0 || dim < 1) throw std::invalid_argument("terminal buffer: bad shape");
  }

  std::size_t size() const noexcept { return size_; }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return size_ == 0; }

  void insert(const Matrix& x) {
    grad::require(x.cols() == dim_, "terminal buffer: dimension mismatch");
    for (Index r = 0; r < x.rows(); ++r) {
      if (!x.row(r).allFinite()) continue;
      if (states_.rows() < static_cast<Index>(capacity_) && size_ == static_cast<std::size_t>(states_.rows()))
        states_.conservativeResize(std::min<Index>(static_cast<Index>(capacity_),
                                                   std::max<Index>(1024, 2 * states_.rows())),
                                   dim_);
      states_.row(static_cast<Index>(head_)) = x.row(r);
      head_ = (head_ + 1) % capacity_;
      size_ = std::min(size_ + 1, capacity_);
    }
  }

  Matrix states() const { return ordered(); }

  Matrix sample(std::size_t k, std::uint64_t seed) const {
    if (empty()) throw EmptyBufferError("terminal buffer: cannot sample from an empty buffer");
    CounterRng rng(seed, stream_id(0x7e2, 0));
    Matrix out(static_cast<Index>(k), dim_);
    for (std::size_t j = 0; j < k; ++j) out.row(static_cast<Index>(j)) = states_.row(static_cast<Index>(slot(rng.below(size_))));
    return out;
  }

  /// x <- x - eta grad E(x) + sqrt(2 eta) xi, n_steps times for every
  /// state; states that become non-finite are removed.
  void langevin_refresh(const EnergySpec& energy, const LangevinConfig& lc, std::uint64_t seed) {
    if (!(lc.step >= 0.0) || lc.n_steps < 0) throw std::invalid_argument("langevin: bad step configuration");
    Matrix x = ordered();
    CounterRng rng(seed, stream_id(0x1a9, 0));
    const double noise = std::sqrt(2.0 * lc.step);
    RowVector g(dim_);
    std::vector<Index> keep;
    keep.reserve(static_cast<std::size_t>(x.rows()));
    for (Index r = 0; r < x.rows(); ++r) {
      auto row = x.row(r);
      bool ok = true;
      for (int s = 0; s < lc.n_steps && ok; ++s) {
        try {
          dsamp::energy(energy, row, &g);
        } catch (const EnergyError&) {
          ok = false;
          break;
        }
        for (int j = 0; j < dim_; ++j) row(j) += -lc.step * g(j) + noise * rng.normal();
        ok = row.allFinite();
      }
      if (ok) keep.push_back(r);
    }
    states_.resize(static_cast<Index>(keep.size()), dim_);
    for (std::size_t k = 0; k < keep.size(); ++k) states_.row(static_cast<Index>(k)) = x.row(keep[k]);
    size_ = keep.size();
    head_ = size_ % capacity_;
  }

 private:
  std::size_t slot(std::size_t i) const {
    // Index i in insertion order (0 = oldest).
    if (size_ < capacity_) return i;
    return (head_ + i) % capacity_;
  }

  Matrix ordered() const {
    Matrix out(static_cast<Index>(size_), dim_);
    for (std::size_t i = 0; i < size_; ++i) out.row(static_cast<Index>(i)) = states_.row(static_cast<Index>(slot(i)));
    return out;
  }

  int dim_;
  std::size_t capacity_;
  Matrix states_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
};

}  // namespace dsamp
