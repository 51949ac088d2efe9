#pragma once

#include <string>
#include <vector>

#include "selfdet/tensor.hpp"

namespace selfdet::nn {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

/// Binary layout, all integers and reals little-endian:
///   magic "SDCKPT01", u64 count,
///   count x { u32 name_len, name bytes, u32 ndim, ndim x u64 extent, u64 offset },
///   payload of f64 values; offset counts f64 elements from the payload start.
void save_arrays(const std::string& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_arrays(const std::string& path);

}  // namespace selfdet::nn
