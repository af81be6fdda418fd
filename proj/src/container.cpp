#include "kvlab/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "kvlab/error.hpp"

namespace kvlab {
namespace {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T read_le(const std::uint8_t* p) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

std::size_t dtype_size(const std::string& dtype, std::size_t offset) {
  if (dtype == "f64") return 8;
  if (dtype == "f32" || dtype == "i32") return 4;
  throw ParseError(offset, "unknown dtype '" + dtype + "'");
}

template <typename Scalar>
ArrayRecord make_record(const std::string& name, const char* dtype,
                        const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& m) {
  ArrayRecord rec{name, dtype, {m.rows(), m.cols()}, {}};
  rec.bytes.reserve(static_cast<std::size_t>(m.size()) * sizeof(Scalar));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) append_le(rec.bytes, m(i, j));
  return rec;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> read_matrix(const ArrayRecord& rec, const char* dtype) {
  if (rec.dtype != dtype)
    throw Error(ErrorCode::kParse, "array '" + rec.name + "' has dtype " + rec.dtype + ", expected " + dtype);
  Eigen::Index rows = 1, cols = 1;
  if (rec.shape.size() == 2) {
    rows = rec.shape[0];
    cols = rec.shape[1];
  } else if (rec.shape.size() == 1) {
    rows = rec.shape[0];
  } else {
    throw Error(ErrorCode::kParse, "array '" + rec.name + "' is not 1-D or 2-D");
  }
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
  const std::uint8_t* p = rec.bytes.data();
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j, p += sizeof(Scalar)) m(i, j) = read_le<Scalar>(p);
  return m;
}

}  // namespace

void Container::add(const std::string& name, const Eigen::MatrixXd& m) {
  arrays.push_back(make_record<double>(name, "f64", m));
}

void Container::add(const std::string& name, const Eigen::MatrixXf& m) {
  arrays.push_back(make_record<float>(name, "f32", m));
}

void Container::add(const std::string& name, const Eigen::VectorXd& v) {
  ArrayRecord rec = make_record<double>(name, "f64", Eigen::MatrixXd(v));
  rec.shape = {v.size()};
  arrays.push_back(std::move(rec));
}

void Container::add(const std::string& name, const std::vector<int>& values) {
  ArrayRecord rec{name, "i32", {static_cast<std::int64_t>(values.size())}, {}};
  for (int v : values) append_le(rec.bytes, static_cast<std::int32_t>(v));
  arrays.push_back(std::move(rec));
}

const ArrayRecord& Container::find(const std::string& name) const {
  for (const auto& rec : arrays)
    if (rec.name == name) return rec;
  throw Error(ErrorCode::kParse, "container of kind '" + kind + "' has no array '" + name + "'");
}

bool Container::contains(const std::string& name) const {
  for (const auto& rec : arrays)
    if (rec.name == name) return true;
  return false;
}

Eigen::MatrixXd Container::matrix_f64(const std::string& name) const { return read_matrix<double>(find(name), "f64"); }

Eigen::MatrixXf Container::matrix_f32(const std::string& name) const { return read_matrix<float>(find(name), "f32"); }

Eigen::VectorXd Container::vector_f64(const std::string& name) const {
  Eigen::MatrixXd m = matrix_f64(name);
  return Eigen::Map<Eigen::VectorXd>(m.data(), m.size());
}

std::vector<int> Container::ints(const std::string& name) const {
  const ArrayRecord& rec = find(name);
  if (rec.dtype != "i32") throw Error(ErrorCode::kParse, "array '" + name + "' is not i32");
  std::vector<int> out(rec.bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = read_le<std::int32_t>(rec.bytes.data() + 4 * i);
  return out;
}

std::vector<std::uint8_t> encode(const Container& c) {
  nlohmann::json header;
  header["version"] = kContainerVersion;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["arrays"] = nlohmann::json::array();
  for (const auto& rec : c.arrays)
    header["arrays"].push_back({{"name", rec.name}, {"dtype", rec.dtype}, {"shape", rec.shape}});
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 8);
  append_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& rec : c.arrays) out.insert(out.end(), rec.bytes.begin(), rec.bytes.end());
  return out;
}

Container decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw ParseError(bytes.size(), "truncated container preamble");
  if (std::memcmp(bytes.data(), kContainerMagic, 8) != 0) throw ParseError(0, "bad magic");
  const std::uint64_t header_len = read_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw ParseError(8, "header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(16 + e.byte, std::string("malformed JSON header: ") + e.what());
  }

  Container c;
  std::size_t offset = 16 + header_len;
  try {
    if (header.at("version").get<int>() != kContainerVersion) throw ParseError(16, "unsupported container version");
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    for (const auto& entry : header.at("arrays")) {
      ArrayRecord rec;
      rec.name = entry.at("name").get<std::string>();
      rec.dtype = entry.at("dtype").get<std::string>();
      rec.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      std::size_t count = 1;
      for (auto s : rec.shape) {
        if (s < 0) throw ParseError(16, "negative shape in array '" + rec.name + "'");
        count *= static_cast<std::size_t>(s);
      }
      const std::size_t n = count * dtype_size(rec.dtype, 16);
      if (n > bytes.size() - offset) throw ParseError(offset, "payload of array '" + rec.name + "' is truncated");
      rec.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                       bytes.begin() + static_cast<std::ptrdiff_t>(offset + n));
      offset += n;
      c.arrays.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(16, std::string("malformed header field: ") + e.what());
  }
  if (offset != bytes.size()) throw ParseError(offset, "trailing bytes after payload");
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

void write_container(const Container& c, const std::filesystem::path& path) { write_file_bytes(path, encode(c)); }

Container read_container(const std::filesystem::path& path) { return decode(read_file_bytes(path)); }

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
  Container c = read_container(path);
  if (c.kind != expected_kind)
    throw Error(ErrorCode::kParse, path.string() + " holds '" + c.kind + "', expected '" + expected_kind + "'");
  return c;
}

}  // namespace kvlab
