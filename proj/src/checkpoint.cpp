#include "selfdet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace selfdet::nn {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    T out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
    return out;
  }
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error(path + ": truncated checkpoint");
  return to_little(v);
}

void put_real(std::ostream& os, double v) { put(os, std::bit_cast<std::uint64_t>(v)); }
double get_real(std::istream& is, const std::string& path) {
  return std::bit_cast<double>(get<std::uint64_t>(is, path));
}

}  // namespace

void save_arrays(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(os, arrays.size());
  std::uint64_t offset = 0;
  for (const NamedArray& a : arrays) {
    if (numel(a.shape) != a.data.size()) {
      throw std::invalid_argument("save_arrays: '" + a.name + "' data does not match its shape");
    }
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(os, offset);
    offset += a.data.size();
  }
  for (const NamedArray& a : arrays)
    for (double v : a.data) put_real(os, v);
  if (!os) throw std::runtime_error("write failed for checkpoint " + path);
}

std::vector<NamedArray> load_arrays(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path + ": not a checkpoint file");
  }
  const auto count = get<std::uint64_t>(is, path);
  std::vector<NamedArray> arrays(count);
  std::vector<std::uint64_t> offsets(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    arrays[i].name.resize(len);
    is.read(arrays[i].name.data(), len);
    const auto ndim = get<std::uint32_t>(is, path);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      arrays[i].shape.push_back(static_cast<int>(get<std::uint64_t>(is, path)));
    }
    offsets[i] = get<std::uint64_t>(is, path);
  }
  std::uint64_t expected = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    if (offsets[i] != expected) throw std::runtime_error(path + ": inconsistent checkpoint index");
    const std::size_t n = numel(arrays[i].shape);
    arrays[i].data.resize(n);
    for (std::size_t k = 0; k < n; ++k) arrays[i].data[k] = get_real(is, path);
    expected += n;
  }
  return arrays;
}

}  // namespace selfdet::nn
