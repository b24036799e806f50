// SPDX-License-Identifier: Apache-2.0
#include "mullama/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "mullama/errors.hpp"

namespace mullama {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'U', 'L', 'L', 'A', 'M', 'A', '\x01'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void doubles(double* dst, std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(double)) throw LoadError("archive truncated");
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw LoadError("archive truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

}  // namespace

NamedTensor to_tensor(const Matrix& m) { return {{m.rows(), m.cols()}, m.data()}; }
NamedTensor to_tensor(const Vector& v) { return {{v.size()}, v}; }

void from_tensor(const NamedTensor& t, Matrix& m, const std::string& name) {
  const std::vector<std::size_t> want{m.rows(), m.cols()};
  if (t.shape != want) {
    throw LoadError("tensor '" + name + "' has shape " + shape_str(t.shape) + ", expected " +
                    shape_str(want));
  }
  m.data() = t.values;
}

void from_tensor(const NamedTensor& t, Vector& v, const std::string& name) {
  const std::vector<std::size_t> want{v.size()};
  if (t.shape != want) {
    throw LoadError("tensor '" + name + "' has shape " + shape_str(t.shape) + ", expected " +
                    shape_str(want));
  }
  v = t.values;
}

std::map<std::string, NamedTensor> Archive::section(const std::string& prefix) const {
  std::map<std::string, NamedTensor> out;
  for (auto it = tensors.lower_bound(prefix); it != tensors.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) break;
    out.emplace(it->first.substr(prefix.size()), it->second);
  }
  return out;
}

void Archive::put_section(const std::string& prefix,
                          const std::map<std::string, NamedTensor>& part) {
  for (const auto& [name, t] : part) tensors[prefix + name] = t;
}

std::vector<std::uint8_t> serialize_archive(const Archive& a) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kArchiveVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(a.metadata.size()));
  out.insert(out.end(), a.metadata.begin(), a.metadata.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& [name, t] : a.tensors) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.values.size()) {
      throw ConfigError("tensor '" + name + "' shape does not match its value count");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.values.data());
    out.insert(out.end(), p, p + t.values.size() * sizeof(double));
  }
  return out;
}

Archive deserialize_archive(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw LoadError("not a mullama archive (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kArchiveVersion) {
    throw LoadError("archive version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kArchiveVersion) + ")");
  }
  Archive a;
  a.metadata = r.str(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.get<std::uint32_t>());
    NamedTensor t;
    const auto ndim = r.get<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      n *= t.shape.back();
    }
    t.values.resize(n);
    r.doubles(t.values.data(), n);
    if (!a.tensors.emplace(std::move(name), std::move(t)).second) {
      throw LoadError("archive contains a duplicate tensor name");
    }
  }
  if (!r.done()) throw LoadError("trailing bytes after archive payload");
  return a;
}

void save_archive(const std::filesystem::path& path, const Archive& a) {
  const auto bytes = serialize_archive(a);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_archive(bytes);
}

void require_exact_names(const std::map<std::string, NamedTensor>& got,
                         const std::vector<std::string>& expected, const std::string& what) {
  const std::set<std::string> want(expected.begin(), expected.end());
  std::vector<std::string> unknown, missing;
  for (const auto& [name, _] : got) {
    if (!want.contains(name)) unknown.push_back(name);
  }
  for (const auto& name : want) {
    if (!got.contains(name)) missing.push_back(name);
  }
  if (unknown.empty() && missing.empty()) return;
  std::ostringstream os;
  os << what << ": parameter names do not match";
  if (!unknown.empty()) {
    os << "; unknown:";
    for (const auto& n : unknown) os << ' ' << n;
  }
  if (!missing.empty()) {
    os << "; missing:";
    for (const auto& n : missing) os << ' ' << n;
  }
  throw LoadError(os.str());
}

}  // namespace mullama
