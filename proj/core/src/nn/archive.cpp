#include "pcos/nn/archive.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "pcos/errors.hpp"

namespace pcos::nn {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes little-endian");

namespace {

constexpr std::array<char, 8> kMagic{'P', 'C', 'O', 'S', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw CheckpointError("tensor archive truncated");
  }
  return value;
}

}  // namespace

void write_tensors(std::ostream& out,
                   const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor->rank()));
    for (int d : tensor->shape()) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(tensor->data()),
              static_cast<std::streamsize>(tensor->size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing tensor archive");
}

TensorMap read_tensors(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw CheckpointError("not a tensor archive (bad magic)");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) {
    throw CheckpointError("unsupported tensor archive version " + std::to_string(version));
  }
  const auto count = get<std::uint64_t>(in);
  TensorMap tensors;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in);
    if (name_len > kMaxName) throw CheckpointError("tensor archive: implausible name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw CheckpointError("tensor archive truncated");
    const auto rank = get<std::uint32_t>(in);
    if (rank > kMaxRank) throw CheckpointError("tensor archive: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      d = get<std::int32_t>(in);
      if (d < 0) throw CheckpointError("tensor archive: negative dimension in " + name);
    }
    std::vector<double> values(element_count(shape));
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw CheckpointError("tensor archive truncated in " + name);
    }
    if (!tensors.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw CheckpointError("tensor archive: duplicate entry " + name);
    }
  }
  return tensors;
}

TensorMap read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  try {
    return read_tensors(in);
  } catch (const CheckpointError& e) {
    throw CheckpointError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace pcos::nn
