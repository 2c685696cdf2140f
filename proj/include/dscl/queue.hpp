#pragma once

// Labeled FIFO memory of detached EMA embeddings.

#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dscl/errors.hpp"
#include "dscl/synthdata.hpp"
#include "dscl/tensor.hpp"

namespace dscl {

// Frozen view of the queue: row k of `embeddings` is entry k (oldest first).
class QueueSnapshot {
 public:
  QueueSnapshot() : data_(std::make_shared<Data>()) {}
  QueueSnapshot(Tensor embeddings, std::vector<ClassId> labels)
      : data_(std::make_shared<Data>(Data{std::move(embeddings), std::move(labels)})) {}

  std::size_t size() const { return data_->labels.size(); }
  bool empty() const { return size() == 0; }
  std::size_t dim() const { return data_->embeddings.rank() == 2 ? data_->embeddings.dim(1) : 0; }
  const Tensor& embeddings() const { return data_->embeddings; }
  const std::vector<ClassId>& labels() const { return data_->labels; }
  std::span<const double> row(std::size_t k) const { return data_->embeddings.row(k); }

  // Positions whose label equals `label` (P); everything else is N.
  std::vector<std::size_t> positives_of(ClassId label) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < size(); ++k)
      if (data_->labels[k] == label) out.push_back(k);
    return out;
  }
  std::vector<std::size_t> negatives_of(ClassId label) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < size(); ++k)
      if (data_->labels[k] != label) out.push_back(k);
    return out;
  }
  std::size_t count_of(ClassId label) const {
    std::size_t n = 0;
    for (ClassId y : data_->labels) n += y == label;
    return n;
  }

 private:
  struct Data {
    Tensor embeddings;
    std::vector<ClassId> labels;
  };
  std::shared_ptr<const Data> data_;
};

class MemoryQueue {
 public:
  static constexpr double kUnitNormTolerance = 1e-9;

  MemoryQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
    if (capacity == 0) throw ConfigError("queue capacity must be positive");
    if (dim == 0) throw ConfigError("queue embedding dimension must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return labels_.size(); }
  bool full() const { return size() == capacity_; }
  std::uint64_t total_inserted() const { return inserted_; }
  double fill_fraction() const { return static_cast<double>(size()) / static_cast<double>(capacity_); }

  // `embeddings` is [B, dim] with unit-norm rows; values are copied (no gradient history).
  void enqueue_batch(const Tensor& embeddings, std::span<const ClassId> labels) {
    if (labels.empty() && embeddings.size() == 0) return;
    require_rank(embeddings, 2, "enqueue_batch");
    if (embeddings.dim(1) != dim_) {
      throw StructuralError("enqueue_batch: embeddings " + shape_str(embeddings.shape()) + " vs queue dim " +
                            std::to_string(dim_));
    }
    if (embeddings.dim(0) != labels.size()) {
      throw StructuralError("enqueue_batch: " + std::to_string(embeddings.dim(0)) + " embeddings vs " +
                            std::to_string(labels.size()) + " labels");
    }
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const double n = l2_norm(embeddings.row(r));
      if (std::abs(n - 1.0) > kUnitNormTolerance) {
        throw ContractError("enqueue_batch: row " + std::to_string(r) + " has norm " + std::to_string(n));
      }
    }
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const auto row = embeddings.row(r);
      rows_.insert(rows_.end(), row.begin(), row.end());
      labels_.push_back(labels[r]);
      ++inserted_;
    }
    if (size() > capacity_) {
      const std::size_t drop = size() - capacity_;
      rows_.erase(rows_.begin(), rows_.begin() + static_cast<std::ptrdiff_t>(drop * dim_));
      labels_.erase(labels_.begin(), labels_.begin() + static_cast<std::ptrdiff_t>(drop));
    }
  }

  QueueSnapshot snapshot() const {
    return QueueSnapshot(Tensor(Shape{size(), dim_}, std::vector<double>(rows_.begin(), rows_.end())),
                         std::vector<ClassId>(labels_.begin(), labels_.end()));
  }

  void clear() {
    rows_.clear();
    labels_.clear();
  }

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::deque<double> rows_;
  std::deque<ClassId> labels_;
  std::uint64_t inserted_ = 0;
};

}  // namespace dscl
