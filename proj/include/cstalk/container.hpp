#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace cstalk {

inline constexpr char kContainerMagic[4] = {'C', 'S', 'T', 'K'};
inline constexpr std::uint32_t kContainerVersion = 1;

/// Row-major float32 array with an arbitrary shape.
struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  static NamedArray from_matrix(std::string name, const Eigen::MatrixXd& m);
  /// Views the array as rows x (product of remaining dims).
  Eigen::MatrixXd to_matrix() const;
  std::size_t element_count() const;
};

/// Binary layout, little-endian throughout:
///   "CSTK" | u32 version | u32 json_len | json bytes | u32 array_count |
///   per array: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data[]
struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;
  bool has_array(const std::string& name) const;
};

std::string encode_container(const Container& c);
/// Throws FormatError (with byte offset) on corrupt or truncated input and
/// VersionError on an unknown version.
Container decode_container(const std::string& bytes);

void save_container(const Container& c, const std::filesystem::path& path);
Container load_container(const std::filesystem::path& path);

}  // namespace cstalk
