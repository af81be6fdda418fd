#pragma once

// Binary container shared by weight, cache, key and cloaked-cache files:
//
//   bytes 0..7   magic "KVLAB001"
//   bytes 8..15  header length N, unsigned 64-bit little-endian
//   next N bytes UTF-8 JSON header {"version", "kind", "meta", "arrays"}
//   payload      each array of "arrays", in order, row-major, little-endian
//
// Array dtypes: "f64", "f32", "i32".

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace kvlab {

inline constexpr char kContainerMagic[8] = {'K', 'V', 'L', 'A', 'B', '0', '0', '1'};
inline constexpr int kContainerVersion = 1;

struct ArrayRecord {
  std::string name;
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;  // little-endian payload
};

struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ArrayRecord> arrays;

  void add(const std::string& name, const Eigen::MatrixXd& m);
  void add(const std::string& name, const Eigen::MatrixXf& m);
  void add(const std::string& name, const Eigen::VectorXd& v);
  void add(const std::string& name, const std::vector<int>& values);

  const ArrayRecord& find(const std::string& name) const;
  bool contains(const std::string& name) const;
  Eigen::MatrixXd matrix_f64(const std::string& name) const;
  Eigen::MatrixXf matrix_f32(const std::string& name) const;
  Eigen::VectorXd vector_f64(const std::string& name) const;
  std::vector<int> ints(const std::string& name) const;
};

std::vector<std::uint8_t> encode(const Container& c);
Container decode(std::span<const std::uint8_t> bytes);

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);
// Reads and checks kind.
Container read_container(const std::filesystem::path& path, const std::string& expected_kind);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace kvlab
