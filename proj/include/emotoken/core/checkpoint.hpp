#pragma once

// Versioned binary container for model parameters.
//
// Layout (little-endian):
//   "EMTK" u32 version
//   u32 meta_count, then meta_count x (str key, str value)
//   u32 block_count, then block_count x
//       (str name, u32 rows, u32 cols, u8 dtype [1=f32, 2=f64], data)
// where str = u32 length + bytes.

#include "emotoken/core/nn.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace emotoken {

struct CheckpointBlock {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  bool f64 = false;
  std::vector<double> data;
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  const CheckpointBlock* find(const std::string& name) const;
  const std::vector<CheckpointBlock>& blocks() const { return blocks_; }
  void add(CheckpointBlock block);

  template <typename S>
  void store(const nn::ParamList<S>& params) {
    for (const auto* p : params) {
      CheckpointBlock b;
      b.name = p->name;
      b.rows = static_cast<std::uint32_t>(p->value.rows());
      b.cols = static_cast<std::uint32_t>(p->value.cols());
      b.f64 = sizeof(S) == 8;
      b.data.assign(p->value.data(), p->value.data() + p->value.size());
      add(std::move(b));
    }
  }

  template <typename S>
  void restore(const nn::ParamList<S>& params) const {
    for (auto* p : params) {
      const CheckpointBlock* b = find(p->name);
      if (!b) throw DataError("checkpoint: missing parameter block '" + p->name + "'");
      if (b->rows != p->value.rows() || b->cols != p->value.cols())
        throw DataError("checkpoint: shape mismatch for '" + p->name + "'");
      for (std::size_t i = 0; i < b->data.size(); ++i) p->value.data()[i] = static_cast<S>(b->data[i]);
      p->zero_grad();
    }
  }

  std::string get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;

 private:
  std::vector<CheckpointBlock> blocks_;
};

}  // namespace emotoken
