#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mrff/errors.hpp"
#include "mrff/federated.hpp"

// Checkpoint file layout, version 1. All integers and floats are stored
// little-endian in their native width; strings are u64 length + bytes.
//
//   magic      8 bytes "MRFFCKPT"
//   version    u32 (1)
//   real_size  u32 (4 for float models, 8 for double)
//   round      u64
//   f          u64 blocks, u64 groups, f64[blocks*groups]
//   shared     param_block
//   clients    u64 count, then per client:
//                i64 id, param_block (PRIVATE), u64 moment count,
//                per moment: string name, i64 step, u64 n, real[n] m, real[n] v,
//                u64 k, i32[k] last assignment
//   reports    u64 count, then per report the fields of RoundReport in
//              declaration order (shares as u64 blocks, u64 groups, f64[])
//
// param_block: u64 count, per parameter: string name, u8 partition, i32 block,
// i32 group, u8 trainable, u64 rank, u64[rank] dims, real[numel] values.
// Parameter and client order is the in-memory order (sorted by name / id).
namespace mrff {

inline constexpr char kCheckpointMagic[8] = {'M', 'R', 'F', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw LoadError("cannot open checkpoint for writing: " + path);
  }

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  template <typename T>
  void put_array(const T* data, std::size_t n) {
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  }

  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void finish() {
    out_.flush();
    if (!out_) throw LoadError("failed writing checkpoint: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw LoadError("cannot open checkpoint: " + path);
  }

  template <typename T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }

  template <typename T>
  std::vector<T> get_array(std::size_t n) {
    if (n > (std::uint64_t{1} << 32)) fail("implausible array length " + std::to_string(n));
    std::vector<T> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    check();
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint64_t>();
    if (n > (1u << 20)) fail("implausible string length " + std::to_string(n));
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }

  [[noreturn]] void fail(const std::string& what) const { throw LoadError(path_ + ": " + what); }

 private:
  void check() {
    if (!in_) fail("truncated checkpoint");
  }

  std::string path_;
  std::ifstream in_;
};

template <typename Real>
void write_params(BinaryWriter& w, const ParameterSet<Real>& params) {
  w.put<std::uint64_t>(params.size());
  for (const auto& [name, e] : params) {
    w.put_string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.tag.kind));
    w.put<std::int32_t>(e.tag.block);
    w.put<std::int32_t>(e.tag.group);
    w.put<std::uint8_t>(e.trainable ? 1 : 0);
    w.put<std::uint64_t>(e.tensor.rank());
    for (std::size_t d : e.tensor.shape()) w.put<std::uint64_t>(d);
    w.put_array(e.tensor.data().data(), e.tensor.numel());
  }
}

// Overwrites the values of `params` in place; names, tags and shapes must match.
template <typename Real>
void read_params_into(BinaryReader& r, const ParameterSet<Real>& params, const std::string& what) {
  const auto count = r.get<std::uint64_t>();
  if (count != params.size()) {
    r.fail(what + ": " + std::to_string(count) + " parameters stored, model has " + std::to_string(params.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = r.get_string();
    if (!params.contains(name)) r.fail(what + ": unknown parameter " + name);
    const auto& entry = params.entry(name);
    PartitionTag tag;
    tag.kind = static_cast<Partition>(r.get<std::uint8_t>());
    tag.block = r.get<std::int32_t>();
    tag.group = r.get<std::int32_t>();
    r.get<std::uint8_t>();
    if (!(tag == entry.tag)) r.fail(what + ": partition of " + name + " is " + tag.str() + ", expected " + entry.tag.str());
    const auto rank = r.get<std::uint64_t>();
    std::vector<std::size_t> dims;
    for (std::uint64_t k = 0; k < rank && k < 8; ++k) dims.push_back(r.get<std::uint64_t>());
    if (rank > 8 || !(Shape(dims) == entry.tensor.shape())) {
      r.fail(what + ": shape of " + name + " differs from " + shape_str(entry.tensor.shape()));
    }
    const auto values = r.get_array<Real>(entry.tensor.numel());
    Tensor<Real> t = entry.tensor;
    std::copy(values.begin(), values.end(), t.data().begin());
  }
}

inline void write_proportions(BinaryWriter& w, const GroupProportions& f) {
  w.put<std::uint64_t>(f.blocks);
  w.put<std::uint64_t>(f.groups);
  w.put_array(f.values.data(), f.values.size());
}

inline GroupProportions read_proportions(BinaryReader& r) {
  GroupProportions f;
  f.blocks = r.get<std::uint64_t>();
  f.groups = r.get<std::uint64_t>();
  if (f.blocks > 1024 || f.groups > 1024) r.fail("implausible group proportion dimensions");
  f.values = r.get_array<double>(f.blocks * f.groups);
  return f;
}

inline void write_split(BinaryWriter& w, const SplitMetrics& m) {
  w.put(m.auc);
  w.put(m.logloss);
  w.put<std::uint64_t>(m.impressions);
}

inline SplitMetrics read_split(BinaryReader& r) {
  SplitMetrics m;
  m.auc = r.get<double>();
  m.logloss = r.get<double>();
  m.impressions = r.get<std::uint64_t>();
  return m;
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const std::string& path, const Federation<Real>& fed) {
  detail::BinaryWriter w(path);
  w.put_array(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(Real));
  const auto& server = fed.server();
  w.put<std::uint64_t>(server.round);
  detail::write_proportions(w, server.f);
  detail::write_params(w, server.shared);

  w.put<std::uint64_t>(fed.clients().size());
  for (const auto& c : fed.clients()) {
    w.put<std::int64_t>(c.id);
    detail::write_params(w, c.private_params);
    w.put<std::uint64_t>(c.optimizer.moments.size());
    for (const auto& [name, mom] : c.optimizer.moments) {
      w.put_string(name);
      w.put<std::int64_t>(mom.step);
      w.put<std::uint64_t>(mom.m.size());
      w.put_array(mom.m.data(), mom.m.size());
      w.put_array(mom.v.data(), mom.v.size());
    }
    w.put<std::uint64_t>(c.last_assignment.size());
    for (int g : c.last_assignment) w.put<std::int32_t>(g);
  }

  w.put<std::uint64_t>(fed.reports().size());
  for (const auto& rep : fed.reports()) {
    w.put<std::uint64_t>(rep.round);
    w.put<std::uint8_t>(rep.evaluated ? 1 : 0);
    detail::write_split(w, rep.val);
    detail::write_split(w, rep.test);
    w.put(rep.rec_loss);
    w.put(rep.balance_loss);
    detail::write_proportions(w, rep.shares);
    w.put<std::uint64_t>(rep.participants);
    w.put<std::uint64_t>(rep.skipped);
    w.put(rep.noise_strength);
    w.put(rep.wall_seconds);
  }
  w.finish();
}

// Restores a federation built from the same config and data. Structural
// mismatches (parameter names, shapes, client ids) raise LoadError.
template <typename Real>
void load_checkpoint(const std::string& path, Federation<Real>& fed) {
  detail::BinaryReader r(path);
  const auto magic = r.get_array<char>(sizeof(kCheckpointMagic));
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) r.fail("not an MRFF checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const auto real_size = r.get<std::uint32_t>();
  if (real_size != sizeof(Real)) {
    r.fail("checkpoint stores " + std::to_string(real_size * 8) + "-bit parameters, model uses " +
           std::to_string(sizeof(Real) * 8) + "-bit");
  }
  auto& server = fed.server();
  const auto round = r.get<std::uint64_t>();
  auto f = detail::read_proportions(r);
  if (f.blocks != server.f.blocks || f.groups != server.f.groups) r.fail("group proportion dimensions differ");
  detail::read_params_into(r, server.shared, "shared parameters");
  server.f = std::move(f);
  server.round = round;

  auto& clients = fed.clients();
  const auto n_clients = r.get<std::uint64_t>();
  if (n_clients != clients.size()) {
    r.fail(std::to_string(n_clients) + " clients stored, federation has " + std::to_string(clients.size()));
  }
  for (auto& c : clients) {
    const auto id = r.get<std::int64_t>();
    if (id != c.id) r.fail("client id " + std::to_string(id) + " where " + std::to_string(c.id) + " was expected");
    detail::read_params_into(r, c.private_params, "client " + std::to_string(id));
    c.optimizer.moments.clear();
    const auto n_moments = r.get<std::uint64_t>();
    for (std::uint64_t k = 0; k < n_moments; ++k) {
      const auto name = r.get_string();
      AdamMoments<Real> mom;
      mom.step = r.get<std::int64_t>();
      const auto n = r.get<std::uint64_t>();
      mom.m = r.get_array<Real>(n);
      mom.v = r.get_array<Real>(n);
      c.optimizer.moments.emplace(name, std::move(mom));
    }
    const auto n_assign = r.get<std::uint64_t>();
    if (n_assign > 1024) r.fail("implausible assignment length");
    c.last_assignment.clear();
    for (std::uint64_t k = 0; k < n_assign; ++k) c.last_assignment.push_back(r.get<std::int32_t>());
  }

  auto& reports = fed.reports();
  reports.clear();
  const auto n_reports = r.get<std::uint64_t>();
  for (std::uint64_t k = 0; k < n_reports; ++k) {
    RoundReport rep;
    rep.round = r.get<std::uint64_t>();
    rep.evaluated = r.get<std::uint8_t>() != 0;
    rep.val = detail::read_split(r);
    rep.test = detail::read_split(r);
    rep.rec_loss = r.get<double>();
    rep.balance_loss = r.get<double>();
    rep.shares = detail::read_proportions(r);
    rep.participants = r.get<std::uint64_t>();
    rep.skipped = r.get<std::uint64_t>();
    rep.noise_strength = r.get<double>();
    rep.wall_seconds = r.get<double>();
    reports.push_back(std::move(rep));
  }
}

}  // namespace mrff
