#include "cstalk/container.hpp"

#include <bit>
#include <cstring>

#include "cstalk/error.hpp"
#include "cstalk/rig.hpp"

namespace cstalk {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError("truncated container at byte offset " + std::to_string(pos_) + " while reading " + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

NamedArray NamedArray::from_matrix(std::string name, const Eigen::MatrixXd& m) {
  NamedArray a;
  a.name = std::move(name);
  a.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  a.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      a.data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
  return a;
}

std::size_t NamedArray::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Eigen::MatrixXd NamedArray::to_matrix() const {
  const Eigen::Index rows = shape.empty() ? 1 : shape[0];
  const Eigen::Index cols = rows == 0 ? 0 : static_cast<Eigen::Index>(element_count()) / rows;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  return m;
}

const NamedArray& Container::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw FormatError("container has no array named '" + name + "'");
}

bool Container::has_array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

std::string encode_container(const Container& c) {
  std::string out(kContainerMagic, 4);
  put_u32(out, kContainerVersion);
  const std::string json = c.header.dump();
  put_u32(out, static_cast<std::uint32_t>(json.size()));
  out += json;
  put_u32(out, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    if (a.data.size() != a.element_count())
      throw ShapeError("array '" + a.name + "' data does not match its shape");
    put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u32(out, d);
    out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(float));
  }
  return out;
}

Container decode_container(const std::string& bytes) {
  Reader in(bytes);
  const std::string magic = in.raw(4, "magic");
  if (std::memcmp(magic.data(), kContainerMagic, 4) != 0) throw FormatError("bad magic at byte offset 0");
  const std::size_t version_at = in.pos();
  const std::uint32_t version = in.u32("version");
  if (version != kContainerVersion)
    throw VersionError("unsupported container version " + std::to_string(version) + " at byte offset " +
                       std::to_string(version_at));
  Container c;
  const std::uint32_t json_len = in.u32("header length");
  const std::size_t json_at = in.pos();
  const std::string json = in.raw(json_len, "header");
  try {
    c.header = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt header JSON at byte offset " + std::to_string(json_at) + ": " + e.what());
  }
  const std::uint32_t count = in.u32("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    const std::uint32_t name_len = in.u32("array name length");
    a.name = in.raw(name_len, "array name");
    const std::uint32_t ndim = in.u32("array rank");
    if (ndim > 8) throw FormatError("implausible rank at byte offset " + std::to_string(in.pos() - 4));
    for (std::uint32_t d = 0; d < ndim; ++d) a.shape.push_back(in.u32("array shape"));
    const std::size_t n = a.element_count();
    in.need(n * sizeof(float), "array data");
    const std::string raw = in.raw(n * sizeof(float), "array data");
    a.data.resize(n);
    std::memcpy(a.data.data(), raw.data(), raw.size());
    c.arrays.push_back(std::move(a));
  }
  if (!in.done()) throw FormatError("trailing bytes at byte offset " + std::to_string(in.pos()));
  return c;
}

void save_container(const Container& c, const std::filesystem::path& path) {
  write_text_file(path, encode_container(c));
}

Container load_container(const std::filesystem::path& path) { return decode_container(read_text_file(path)); }

}  // namespace cstalk
