#pragma once

// Checkpoint container (all integers little-endian):
//
//   magic      8 bytes  "SEMATCK\0"
//   version    u32      kCheckpointVersion
//   manifest   u64 length + UTF-8 JSON (config hash, epoch, metrics, ...)
//   count      u32      number of tensors
//   tensor     u32 name length, name, 4 x i32 extents (NCHW),
//              u64 element count, float32 payload
//
// Model parameters, running statistics and optimizer moments are stored as
// named tensors; optimizer moments use the "adam.m/" and "adam.v/" prefixes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "semattnet/optim.hpp"

namespace semattnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'M', 'A', 'T', 'C', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;
};

namespace ckpt_detail {
template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}
template <class U>
U get(std::istream& is, const std::string& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U)))
    throw FormatError("checkpoint '" + path + "' is truncated");
  return v;
}
}  // namespace ckpt_detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  using namespace ckpt_detail;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint '" + path.string() + "'");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    const std::string manifest = ck.manifest.dump();
    put<std::uint64_t>(os, manifest.size());
    os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      for (int e : {t.n(), t.c(), t.h(), t.w()}) put<std::int32_t>(os, e);
      put<std::uint64_t>(os, t.size());
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!os) throw DataError("failed writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path.string() + "'");
  const std::string p = path.string();
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("'" + p + "' is not a checkpoint");
  const auto version = get<std::uint32_t>(is, p);
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint '" + p + "' has format version " + std::to_string(version) +
                       ", expected " + std::to_string(kCheckpointVersion));
  Checkpoint ck;
  const auto mlen = get<std::uint64_t>(is, p);
  std::string manifest(mlen, '\0');
  if (!is.read(manifest.data(), static_cast<std::streamsize>(mlen)))
    throw FormatError("checkpoint '" + p + "' is truncated");
  try {
    ck.manifest = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + p + "': bad manifest: " + e.what());
  }
  const auto count = get<std::uint32_t>(is, p);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto nlen = get<std::uint32_t>(is, p);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw FormatError("checkpoint '" + p + "' is truncated");
    Shape s;
    s.n = get<std::int32_t>(is, p);
    s.c = get<std::int32_t>(is, p);
    s.h = get<std::int32_t>(is, p);
    s.w = get<std::int32_t>(is, p);
    const auto elems = get<std::uint64_t>(is, p);
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0 || elems != s.numel())
      throw FormatError("checkpoint '" + p + "': tensor '" + name + "' has inconsistent extents");
    Tensor<float> t(s);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(elems * sizeof(float))))
      throw FormatError("checkpoint '" + p + "' is truncated");
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

// ---- model/optimizer state <-> checkpoint tensors

template <class T>
void store_to_checkpoint(const ParamStore<T>& store, Checkpoint& ck) {
  for (const auto& name : store.param_names()) ck.tensors[name] = store.param(name).value().template cast<float>();
  for (const auto& name : store.buffer_names()) ck.tensors[name] = store.buffer(name).template cast<float>();
}

template <class T>
void optimizer_to_checkpoint(const Adam<T>& opt, Checkpoint& ck) {
  for (const auto& [name, mv] : opt.state()) {
    ck.tensors["adam.m/" + name] = mv.first.template cast<float>();
    ck.tensors["adam.v/" + name] = mv.second.template cast<float>();
  }
  ck.manifest["optimizer"] = {{"steps", opt.step_count()}, {"lr", opt.lr()}};
}

namespace ckpt_detail {
template <class T>
void assign(Tensor<T>& dst, const Tensor<float>& src, const std::string& name) {
  if (dst.shape() != src.shape())
    throw VersionError("checkpoint tensor '" + name + "' has shape " + src.shape().str() +
                       ", model expects " + dst.shape().str());
  dst = src.cast<T>();
}
}  // namespace ckpt_detail

// Loads parameters and buffers. With `strict`, every model tensor must be
// present; otherwise missing names keep their current values. Returns the
// number of tensors loaded.
template <class T>
std::size_t load_store(ParamStore<T>& store, const Checkpoint& ck, bool strict = true) {
  std::size_t loaded = 0;
  auto load_one = [&](const std::string& name, Tensor<T>& dst) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) {
      if (strict) throw VersionError("checkpoint lacks tensor '" + name + "'");
      return;
    }
    ckpt_detail::assign(dst, it->second, name);
    ++loaded;
  };
  for (const auto& name : store.param_names()) load_one(name, store.param(name).mutable_value());
  for (const auto& name : store.buffer_names()) load_one(name, store.buffer(name));
  return loaded;
}

template <class T>
void load_optimizer(Adam<T>& opt, const Checkpoint& ck) {
  opt.state().clear();
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("adam.m/", 0) != 0) continue;
    const std::string param = name.substr(7);
    auto v = ck.tensors.find("adam.v/" + param);
    if (v == ck.tensors.end()) throw FormatError("checkpoint: missing second moment for '" + param + "'");
    opt.state().emplace(param, std::make_pair(t.template cast<T>(), v->second.template cast<T>()));
  }
  if (ck.manifest.contains("optimizer")) {
    opt.set_step_count(ck.manifest["optimizer"].value("steps", 0L));
    opt.set_lr(ck.manifest["optimizer"].value("lr", opt.lr()));
  }
}

}  // namespace semattnet
