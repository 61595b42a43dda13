#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "mrff/data.hpp"
#include "mrff/federated.hpp"

namespace mrff::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("mrff_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Small synthetic population for federation tests.
struct TinyWorld {
  SyntheticLog synth;
  ModelConfig model;
  ItemCatalog catalog;
  std::vector<UserSequences> data;
};

inline TinyWorld tiny_world(std::size_t users = 12, std::uint64_t seed = 5, bool group_ffn = true) {
  SyntheticSpec spec;
  spec.n_users = users;
  spec.n_items = 16;
  spec.items_per_cluster = 4;
  spec.n_clusters = 4;
  spec.min_len = 8;
  spec.max_len = 12;
  spec.seed = seed;
  TinyWorld w;
  w.synth = synthetic_generate(spec);
  w.model.d_model = 4;
  w.model.n_heads = 2;
  w.model.blocks = 2;
  w.model.groups = 3;
  w.model.max_seq_len = 5;
  w.model.ffn_hidden = 6;
  w.model.gate_hidden = 5;
  w.model.pred_hidden = {6};
  w.model.group_ffn = group_ffn;
  w.model.attr_vocab = w.synth.log.attr_vocab();
  w.catalog = ItemCatalog::from_log(w.synth.log);
  w.data = build_sequences(w.synth.log, leave_one_out_split(w.synth.log), w.model.max_seq_len);
  return w;
}

template <typename Real>
std::vector<Real> values_of(const ParameterSet<Real>& p) {
  std::vector<Real> out;
  for (const auto& [name, e] : p) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

}  // namespace mrff::testing
