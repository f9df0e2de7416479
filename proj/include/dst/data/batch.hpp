#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "dst/data/sample.hpp"
#include "dst/numcore/errors.hpp"
#include "dst/numcore/ops.hpp"

namespace dst::data {

using num::Segment;

/// Padded batch: row block b of `features` holds sample b, zero-padded to
/// max_length rows; mask(b, t) is 1 for valid frames.
struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> lengths;
  std::size_t max_length = 0;
  Tensor features;
  std::vector<std::uint8_t> mask;

  std::size_t size() const { return indices.size(); }
  std::uint8_t mask_at(std::size_t b, std::size_t t) const { return mask[b * max_length + t]; }

  std::vector<Segment> segments() const {
    std::vector<Segment> s;
    for (std::size_t b = 0; b < size(); ++b) s.push_back({b * max_length, max_length, lengths[b]});
    return s;
  }
};

// Valid frames only, stacked back to back.
struct PackedBatch {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
  Tensor features;
  std::vector<Segment> segments;
};

inline PackedBatch pack(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  PackedBatch p;
  std::size_t rows = 0;
  const std::size_t dim = samples.at(indices.empty() ? 0 : indices[0]).dim();
  for (std::size_t i : indices) {
    if (samples.at(i).dim() != dim) throw DimensionError("pack: samples have differing feature dims");
    rows += samples[i].valid;
  }
  p.features = Tensor::matrix(rows, dim);
  std::size_t at = 0;
  for (std::size_t i : indices) {
    const Sample& s = samples[i];
    std::copy(s.features.data(), s.features.data() + s.valid * dim, p.features.data() + at * dim);
    p.segments.push_back({at, s.valid, s.valid});
    p.indices.push_back(i);
    p.labels.push_back(s.label);
    at += s.valid;
  }
  return p;
}

inline Batch pad(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  Batch b;
  for (std::size_t i : indices) b.max_length = std::max(b.max_length, samples.at(i).valid);
  const std::size_t dim = indices.empty() ? 0 : samples[indices[0]].dim();
  b.features = Tensor::matrix(indices.size() * b.max_length, dim);
  b.mask.assign(indices.size() * b.max_length, 0);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& s = samples[indices[k]];
    if (s.dim() != dim) throw DimensionError("batch: samples have differing feature dims");
    std::copy(s.features.data(), s.features.data() + s.valid * dim,
              b.features.data() + k * b.max_length * dim);
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(k * b.max_length), s.valid, 1);
    b.indices.push_back(indices[k]);
    b.labels.push_back(s.label);
    b.lengths.push_back(s.valid);
  }
  return b;
}

// Fisher-Yates driven by uniform_index, so the order depends only on the seed.
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[num::uniform_index(rng, i)]);
  return order;
}

/// Deterministic batch order for one epoch; shuffle_seed == nullopt keeps
/// sample order.
class BatchIterator {
 public:
  BatchIterator(const std::vector<Sample>& samples, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed)
      : samples_(&samples), batch_size_(batch_size) {
    if (batch_size == 0) throw ContractError("batch size must be >= 1");
    if (shuffle_seed) {
      order_ = shuffled_order(samples.size(), *shuffle_seed);
    } else {
      order_.resize(samples.size());
      std::iota(order_.begin(), order_.end(), 0);
    }
  }

  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

  std::span<const std::size_t> indices(std::size_t b) const {
    const std::size_t lo = b * batch_size_;
    return std::span(order_).subspan(lo, std::min(batch_size_, order_.size() - lo));
  }

  Batch padded(std::size_t b) const { return pad(*samples_, indices(b)); }
  PackedBatch packed(std::size_t b) const { return pack(*samples_, indices(b)); }

  bool next(Batch& out) {
    if (cursor_ >= batch_count()) return false;
    out = padded(cursor_++);
    return true;
  }

 private:
  const std::vector<Sample>* samples_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Splits off a validation set; "test"-tagged records are dropped. When any
/// record is tagged "valid" (or "validation") the tags decide; otherwise the
/// last `fraction` of a seeded shuffle of the rest validates.
inline std::pair<std::vector<Sample>, std::vector<Sample>> split_validation(std::vector<Sample> samples,
                                                                            double fraction, std::uint64_t seed) {
  auto is_valid = [](const Sample& s) { return s.split == "valid" || s.split == "validation"; };
  std::erase_if(samples, [](const Sample& s) { return s.split == "test"; });
  std::vector<Sample> train, valid;
  if (std::any_of(samples.begin(), samples.end(), is_valid)) {
    for (auto& s : samples) {
      if (is_valid(s))
        valid.push_back(std::move(s));
      else if (s.split.empty() || s.split == "train")
        train.push_back(std::move(s));
    }
    return {std::move(train), std::move(valid)};
  }
  const auto order = shuffled_order(samples.size(), seed);
  const std::size_t n_valid = static_cast<std::size_t>(std::llround(fraction * double(samples.size())));
  for (std::size_t k = 0; k < order.size(); ++k)
    (k + n_valid >= order.size() ? valid : train).push_back(std::move(samples[order[k]]));
  return {std::move(train), std::move(valid)};
}

}  // namespace dst::data
