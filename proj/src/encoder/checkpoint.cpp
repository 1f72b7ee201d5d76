#include "mhssm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace mhssm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'H', 'S', 'S', 'M', 'C', 'K', 'P'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : s_(bytes), path_(path) {}

  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (n > s_.size() - pos_) throw std::runtime_error("checkpoint " + path_ + ": truncated");
    const char* p = s_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return s_.size(); }

 private:
  const std::string& s_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const std::string* Checkpoint::find_blob(const std::string& name) const {
  for (const auto& [n, b] : blobs)
    if (n == name) return &b;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string header, data;
  header.append(kMagic, sizeof(kMagic));
  put<std::uint32_t>(header, kCheckpointVersion);
  put<std::uint32_t>(header, static_cast<std::uint32_t>(ckpt.tensors.size() + ckpt.blobs.size()));
  auto entry = [&](const std::string& name, std::uint8_t dtype, const Shape& shape, const char* bytes,
                   std::size_t nbytes) {
    put<std::uint32_t>(header, static_cast<std::uint32_t>(name.size()));
    header += name;
    put<std::uint8_t>(header, dtype);
    put<std::uint32_t>(header, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put<std::uint64_t>(header, d);
    put<std::uint64_t>(header, data.size());
    put<std::uint64_t>(header, nbytes);
    data.append(bytes, nbytes);
  };
  for (const auto& [name, t] : ckpt.tensors) {
    entry(name, 0, t.shape(), reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
  }
  for (const auto& [name, b] : ckpt.blobs) entry(name, 1, {b.size()}, b.data(), b.size());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);
  if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint " + path + ": bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  struct Entry {
    std::string name;
    std::uint8_t dtype;
    Shape shape;
    std::uint64_t offset, nbytes;
  };
  std::vector<Entry> entries(r.get<std::uint32_t>());
  for (auto& e : entries) {
    const auto n = r.get<std::uint32_t>();
    e.name.assign(r.take(n), n);
    e.dtype = r.get<std::uint8_t>();
    e.shape.resize(r.get<std::uint32_t>());
    for (auto& d : e.shape) d = r.get<std::uint64_t>();
    e.offset = r.get<std::uint64_t>();
    e.nbytes = r.get<std::uint64_t>();
  }
  const std::size_t base = r.pos();
  Checkpoint ckpt;
  for (const auto& e : entries) {
    if (e.offset > bytes.size() - base || e.nbytes > bytes.size() - base - e.offset) {
      throw std::runtime_error("checkpoint " + path + ": entry '" + e.name + "' out of range");
    }
    const char* p = bytes.data() + base + e.offset;
    if (e.dtype == 0) {
      if (e.nbytes != shape_size(e.shape) * sizeof(double)) {
        throw std::runtime_error("checkpoint " + path + ": entry '" + e.name + "' size mismatch");
      }
      std::vector<double> v(shape_size(e.shape));
      std::memcpy(v.data(), p, e.nbytes);
      ckpt.tensors.emplace_back(e.name, Tensor(e.shape, std::move(v)));
    } else if (e.dtype == 1) {
      ckpt.blobs.emplace_back(e.name, std::string(p, e.nbytes));
    } else {
      throw std::runtime_error("checkpoint " + path + ": entry '" + e.name + "' has unknown dtype " +
                               std::to_string(e.dtype));
    }
  }
  return ckpt;
}

}  // namespace mhssm
