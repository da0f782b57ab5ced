#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "less/toymodel.hpp"

namespace less::testing {

inline const std::vector<std::uint8_t>& corpus() {
  static const std::vector<std::uint8_t> bytes = [] {
    const std::string path = std::string(LESS_DATA_DIR) + "/moby_dick.txt";
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("missing test corpus " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  }();
  return bytes;
}

inline ModelConfig small_config(std::size_t context_len = 128) {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_layers = 2;
  c.context_len = context_len;
  c.seed = 3;
  return c;
}

// Briefly pretrained small model, shared by every test in the binary.
inline const ToyModel& small_model() {
  static const ToyModel m = [] {
    PretrainOptions o;
    o.steps = 150;
    o.warmup = 20;
    return pretrain(small_config(), corpus(), o).model;
  }();
  return m;
}

}  // namespace less::testing
