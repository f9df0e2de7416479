#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dst/numcore/tensor.hpp"

namespace dst::data {

using num::Tensor;

struct Sample {
  std::string id;
  Tensor features;  // length x feature_dim
  std::size_t valid = 0;
  std::size_t label = 0;
  std::vector<std::uint8_t> cue_mask;  // one 0/1 byte per frame; empty when unknown
  std::string split;                   // "train", "valid", "test" or empty

  std::size_t length() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
};

}  // namespace dst::data
