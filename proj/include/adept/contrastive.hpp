#pragma once

// InfoNCE over a FIFO queue of momentum keys.

#include <cmath>
#include <string>
#include <vector>

#include "adept/errors.hpp"
#include "adept/tensor.hpp"

namespace adept {

/// Fixed-capacity ring buffer of unit-norm key vectors.
class FeatureQueue {
 public:
  static constexpr double kNormTolerance = 1e-6;

  FeatureQueue() = default;
  FeatureQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim), storage_(capacity * dim) {
    if (capacity == 0 || dim == 0) throw ParameterError("FeatureQueue: capacity and dim must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return fill_; }
  std::size_t cursor() const { return cursor_; }
  bool empty() const { return fill_ == 0; }

  void clear() {
    fill_ = 0;
    cursor_ = 0;
  }

  /// Writes each row of keys [B, dim] at the cursor, overwriting the oldest entries.
  void enqueue(const Tensor& keys) {
    if (keys.rank() != 2 || keys.dim(1) != dim_) {
      throw DimensionError("FeatureQueue::enqueue: expected [B," + std::to_string(dim_) + "], got " +
                           shape_str(keys.shape()));
    }
    const std::size_t b = keys.dim(0);
    if (b > capacity_) {
      throw ContractError("FeatureQueue::enqueue: batch of " + std::to_string(b) + " exceeds capacity " +
                          std::to_string(capacity_));
    }
    for (std::size_t r = 0; r < b; ++r) {
      double n2 = 0.0;
      for (std::size_t c = 0; c < dim_; ++c) n2 += keys.at(r, c) * keys.at(r, c);
      if (std::abs(std::sqrt(n2) - 1.0) > kNormTolerance) {
        throw ContractError("FeatureQueue::enqueue: key " + std::to_string(r) + " has norm " +
                            std::to_string(std::sqrt(n2)));
      }
    }
    for (std::size_t r = 0; r < b; ++r) {
      std::copy_n(keys.data().begin() + r * dim_, dim_, storage_.begin() + cursor_ * dim_);
      cursor_ = (cursor_ + 1) % capacity_;
      fill_ = std::min(fill_ + 1, capacity_);
    }
  }

  /// Entries oldest first, [size, dim], detached.
  Tensor snapshot() const {
    if (fill_ == 0) throw StateError("FeatureQueue: queue is empty");
    std::vector<double> out(fill_ * dim_);
    const std::size_t start = fill_ < capacity_ ? 0 : cursor_;
    for (std::size_t i = 0; i < fill_; ++i) {
      const std::size_t slot = (start + i) % capacity_;
      std::copy_n(storage_.begin() + slot * dim_, dim_, out.begin() + i * dim_);
    }
    return Tensor::from({fill_, dim_}, std::move(out));
  }

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::size_t cursor_ = 0;
  std::size_t fill_ = 0;
  std::vector<double> storage_;
};

/// InfoNCE loss  -log[ exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.S_i/tau)) ].
///
/// With include_positive = false the positive term is dropped from the
/// denominator (the literal single-sum form); that variant can be negative.
/// q is [1,d] or [d]; k_pos must not require gradients.
inline Tensor info_nce(const Tensor& q, const Tensor& k_pos, const Tensor& negatives, double tau,
                       bool include_positive = true) {
  if (!(tau > 0.0)) throw ParameterError("info_nce: temperature must be positive");
  if (k_pos.requires_grad() || negatives.requires_grad()) {
    throw ContractError("info_nce: keys must be detached from the graph");
  }
  const std::size_t d = q.numel();
  if (k_pos.numel() != d || negatives.rank() != 2 || negatives.dim(1) != d) {
    throw DimensionError("info_nce: shape mismatch q" + shape_str(q.shape()) + " k" + shape_str(k_pos.shape()) +
                         " queue" + shape_str(negatives.shape()));
  }
  const Tensor qr = reshape(q, {1, d});
  const Tensor pos = scale(matmul(qr, reshape(k_pos, {d, 1})), 1.0 / tau);        // [1,1]
  const Tensor neg = scale(matmul(qr, transpose(negatives)), 1.0 / tau);         // [1,S]
  const Tensor denom = include_positive ? logsumexp(concat({pos, neg}, 1)) : logsumexp(neg);
  return sub(denom, reshape(pos, Shape{}));
}

inline Tensor info_nce(const Tensor& q, const Tensor& k_pos, const FeatureQueue& queue, double tau,
                       bool include_positive = true) {
  if (!(tau > 0.0)) throw ParameterError("info_nce: temperature must be positive");
  if (queue.empty()) throw StateError("info_nce: queue is empty");
  return info_nce(q, k_pos, queue.snapshot(), tau, include_positive);
}

inline void enqueue_dequeue(FeatureQueue& queue, const Tensor& batch_keys) { queue.enqueue(batch_keys); }

}  // namespace adept
