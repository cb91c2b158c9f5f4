#include "pgd/pgdt.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace pgd::pgdt {

namespace {

static_assert(std::endian::native == std::endian::little, "PGDT I/O assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode(const Tensor& t) {
  if (t.ndim() > 255) throw IoError("PGDT: too many dimensions");
  std::vector<std::uint8_t> out{'P', 'G', 'D', 'T', kVersion, static_cast<std::uint8_t>(t.dtype()),
                                static_cast<std::uint8_t>(t.ndim())};
  for (auto e : t.shape()) {
    if (e > 0xFFFFFFFFll) throw IoError("PGDT: extent exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(e));
  }
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(d.data());
    out.insert(out.end(), bytes, bytes + d.size() * sizeof(T));
  });
  return out;
}

Tensor decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 7 || std::memcmp(bytes.data(), "PGDT", 4) != 0) throw IoError("PGDT: bad magic");
  if (bytes[4] != kVersion) throw IoError("PGDT: unsupported version " + std::to_string(bytes[4]));
  const std::uint8_t code = bytes[5];
  if (code != 1 && code != 2) throw IoError("PGDT: unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const std::size_t ndim = bytes[6];
  if (bytes.size() < 7 + 4 * ndim) throw IoError("PGDT: truncated header");
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i) shape[i] = get_u32(bytes.data() + 7 + 4 * i);
  Tensor t = Tensor::empty(shape, dtype);
  const std::size_t offset = 7 + 4 * ndim;
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    if (bytes.size() != offset + d.size() * sizeof(T)) {
      throw IoError("PGDT: payload size " + std::to_string(bytes.size() - offset) + " does not match shape " +
                    to_string(shape));
    }
    std::memcpy(d.data(), bytes.data() + offset, d.size() * sizeof(T));
  });
  return t;
}

void save(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace pgd::pgdt
