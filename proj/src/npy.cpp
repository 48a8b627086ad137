#include "lfcbm/npy.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <regex>
#include <sstream>

#include "lfcbm/error.hpp"

namespace lfcbm {

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "\x93NUMPY";

struct NpyHeader {
  std::string descr;
  bool fortran_order = false;
  std::vector<std::size_t> shape;
  std::size_t data_offset = 0;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

NpyHeader parse_header(const std::string& bytes, const std::filesystem::path& path) {
  const auto fail = [&](const std::string& why) {
    return Error("malformed header in " + path.string() + ": " + why);
  };
  if (bytes.size() < 10 || bytes.compare(0, 6, kMagic, 6) != 0) throw fail("missing \\x93NUMPY magic");
  const auto major = static_cast<unsigned char>(bytes[6]);
  std::size_t header_len = 0;
  std::size_t prefix = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
    prefix = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw fail("truncated length field");
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 4);
    header_len = len;
    prefix = 12;
  } else {
    throw fail("unsupported version " + std::to_string(major));
  }
  if (bytes.size() < prefix + header_len) throw fail("truncated header");
  const std::string dict = bytes.substr(prefix, header_len);

  NpyHeader h;
  h.data_offset = prefix + header_len;
  std::smatch m;
  static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  if (!std::regex_search(dict, m, descr_re)) throw fail("no descr");
  h.descr = m[1];
  if (!std::regex_search(dict, m, order_re)) throw fail("no fortran_order");
  h.fortran_order = m[1] == "True";
  if (!std::regex_search(dict, m, shape_re)) throw fail("no shape");
  std::string dims = m[1];
  std::stringstream ds(dims);
  std::string item;
  while (std::getline(ds, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item.substr(first), &used);
      h.shape.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw fail("bad shape entry '" + item + "'");
    }
  }
  return h;
}

std::string make_header(const std::string& descr, const std::string& shape) {
  std::string dict = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': " + shape + ", }";
  // Magic(6) + version(2) + length(2) + dict + padding + '\n' is a multiple of 64.
  const std::size_t unpadded = 10 + dict.size() + 1;
  const std::size_t padding = (64 - unpadded % 64) % 64;
  dict.append(padding, ' ');
  dict.push_back('\n');
  std::string out(kMagic, 6);
  out.push_back('\x01');
  out.push_back('\x00');
  out.push_back(static_cast<char>(dict.size() & 0xff));
  out.push_back(static_cast<char>((dict.size() >> 8) & 0xff));
  out += dict;
  return out;
}

void write_bytes(const std::filesystem::path& path, const std::string& header, const void* data,
                 std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  if (n > 0) out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error("I/O failure writing " + path.string());
}

}  // namespace

Tensor read_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  const NpyHeader h = parse_header(bytes, path);
  if (h.fortran_order) throw Error("unsupported order in " + path.string() + ": Fortran order");
  if (h.shape.size() != 2)
    throw Error("unsupported shape in " + path.string() + ": expected 2-D, got " +
                std::to_string(h.shape.size()) + "-D");
  std::size_t width = 0;
  if (h.descr == "<f4") {
    width = 4;
  } else if (h.descr == "<f8") {
    width = 8;
  } else {
    throw Error("unsupported dtype in " + path.string() + ": " + h.descr);
  }
  const std::size_t rows = h.shape[0], cols = h.shape[1];
  const std::size_t count = rows * cols;
  if (bytes.size() - h.data_offset != count * width)
    throw Error("malformed header in " + path.string() + ": payload size does not match shape");

  Tensor t(rows, cols);
  const char* p = bytes.data() + h.data_offset;
  for (std::size_t i = 0; i < count; ++i) {
    float v;
    if (width == 4) {
      std::memcpy(&v, p + 4 * i, 4);
    } else {
      double d;
      std::memcpy(&d, p + 8 * i, 8);
      v = static_cast<float>(d);
    }
    if (!std::isfinite(v))
      throw Error("non-finite value in " + path.string() + " at (" + std::to_string(i / cols) + "," +
                  std::to_string(i % cols) + ")");
    t.data[i] = v;
  }
  return t;
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  if (t.data.size() != t.rows * t.cols) throw Error("tensor data length != rows*cols");
  for (std::size_t i = 0; i < t.data.size(); ++i)
    if (!std::isfinite(t.data[i]))
      throw Error("refusing to write non-finite value at (" + std::to_string(i / t.cols) + "," +
                  std::to_string(i % t.cols) + ")");
  const std::string shape = "(" + std::to_string(t.rows) + ", " + std::to_string(t.cols) + ")";
  write_bytes(path, make_header("<f4", shape), t.data.data(), t.data.size() * sizeof(float));
}

std::vector<std::int64_t> read_labels(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  const NpyHeader h = parse_header(bytes, path);
  if (h.fortran_order && h.shape.size() > 1) throw Error("unsupported order in " + path.string());
  if (h.shape.size() != 1) throw Error("labels in " + path.string() + " must be 1-D");
  const std::size_t n = h.shape[0];
  std::vector<std::int64_t> out(n);
  const char* p = bytes.data() + h.data_offset;
  if (h.descr == "<i8") {
    if (bytes.size() - h.data_offset != n * 8) throw Error("malformed header in " + path.string());
    std::memcpy(out.data(), p, n * 8);
  } else if (h.descr == "<i4") {
    if (bytes.size() - h.data_offset != n * 4) throw Error("malformed header in " + path.string());
    for (std::size_t i = 0; i < n; ++i) {
      std::int32_t v;
      std::memcpy(&v, p + 4 * i, 4);
      out[i] = v;
    }
  } else {
    throw Error("unsupported label dtype in " + path.string() + ": " + h.descr);
  }
  return out;
}

void write_labels(const std::vector<std::int64_t>& labels, const std::filesystem::path& path) {
  const std::string shape = "(" + std::to_string(labels.size()) + ",)";
  write_bytes(path, make_header("<i8", shape), labels.data(), labels.size() * sizeof(std::int64_t));
}

std::string sha256_bytes(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest.data(), &len) != 1)
    throw Error("sha256 failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_bytes(read_all(path)); }

}  // namespace lfcbm
