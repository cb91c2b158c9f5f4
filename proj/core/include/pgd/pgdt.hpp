#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pgd/tensor.hpp"

// PGDT tensor file format:
//   bytes 0-3  magic "PGDT"
//   byte  4    version (1)
//   byte  5    dtype code (1 = f32, 2 = f64)
//   byte  6    ndim
//   then ndim little-endian u32 extents, then little-endian values in
//   row-major order.
namespace pgd::pgdt {

inline constexpr std::uint8_t kVersion = 1;

std::vector<std::uint8_t> encode(const Tensor& t);
Tensor decode(const std::vector<std::uint8_t>& bytes);

void save(const Tensor& t, const std::filesystem::path& path);
Tensor load(const std::filesystem::path& path);

}  // namespace pgd::pgdt
