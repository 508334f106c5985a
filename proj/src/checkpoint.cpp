#include "tsode/diffkit/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>

#include "tsode/faults.hpp"

namespace tsode::diffkit {

namespace {

constexpr char kMagic[4] = {'T', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct FileCloser {
  void operator()(FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_bytes(FILE* f, const void* p, std::size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) throw ConfigFault("short write: " + path);
}

void read_bytes(FILE* f, void* p, std::size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) throw ConfigFault("corrupt checkpoint (truncated): " + path);
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ConfigFault("cannot write checkpoint: " + path);
  write_bytes(f.get(), kMagic, 4, path);
  write_bytes(f.get(), &kVersion, 4, path);
  const std::uint64_t count = tensors.size();
  write_bytes(f.get(), &count, 8, path);
  for (const auto& nt : tensors) {
    const std::uint32_t name_len = static_cast<std::uint32_t>(nt.name.size());
    write_bytes(f.get(), &name_len, 4, path);
    write_bytes(f.get(), nt.name.data(), name_len, path);
    const std::int32_t rows = nt.t.rows, cols = nt.t.cols;
    write_bytes(f.get(), &rows, 4, path);
    write_bytes(f.get(), &cols, 4, path);
    write_bytes(f.get(), nt.t.v.data(), sizeof(double) * nt.t.v.size(), path);
  }
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ConfigFault("cannot open checkpoint: " + path);
  char magic[4];
  read_bytes(f.get(), magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ConfigFault("corrupt checkpoint (bad magic): " + path);
  std::uint32_t version = 0;
  read_bytes(f.get(), &version, 4, path);
  if (version != kVersion) throw ConfigFault("unsupported checkpoint version: " + path);
  std::uint64_t count = 0;
  read_bytes(f.get(), &count, 8, path);
  if (count > 1u << 20) throw ConfigFault("corrupt checkpoint (absurd tensor count): " + path);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    read_bytes(f.get(), &name_len, 4, path);
    if (name_len > 4096) throw ConfigFault("corrupt checkpoint (absurd name length): " + path);
    NamedTensor nt;
    nt.name.resize(name_len);
    read_bytes(f.get(), nt.name.data(), name_len, path);
    std::int32_t rows = 0, cols = 0;
    read_bytes(f.get(), &rows, 4, path);
    read_bytes(f.get(), &cols, 4, path);
    if (rows < 1 || cols < 1 || static_cast<std::int64_t>(rows) * cols > (1 << 26))
      throw ConfigFault("corrupt checkpoint (bad shape): " + path);
    nt.t = Tensor(rows, cols);
    read_bytes(f.get(), nt.t.v.data(), sizeof(double) * nt.t.v.size(), path);
    out.push_back(std::move(nt));
  }
  return out;
}

}  // namespace tsode::diffkit
