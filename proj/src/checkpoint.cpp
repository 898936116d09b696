#include "emotoken/core/checkpoint.hpp"
#include "emotoken/core/binary_io.hpp"

#include <fstream>

namespace emotoken {

void Checkpoint::add(CheckpointBlock block) {
  for (auto& b : blocks_)
    if (b.name == block.name) {
      b = std::move(block);
      return;
    }
  blocks_.push_back(std::move(block));
}

const CheckpointBlock* Checkpoint::find(const std::string& name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return &b;
  return nullptr;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path);
  os.write("EMTK", 4);
  bin::put<std::uint32_t>(os, kVersion);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    bin::put_string(os, k);
    bin::put_string(os, v);
  }
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(blocks_.size()));
  for (const auto& b : blocks_) {
    bin::put_string(os, b.name);
    bin::put<std::uint32_t>(os, b.rows);
    bin::put<std::uint32_t>(os, b.cols);
    bin::put<std::uint8_t>(os, b.f64 ? 2 : 1);
    for (double v : b.data) {
      if (b.f64)
        bin::put<double>(os, v);
      else
        bin::put<float>(os, static_cast<float>(v));
    }
  }
  if (!os) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  bin::expect_magic(is, "EMTK");
  auto version = bin::get<std::uint32_t>(is);
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto nmeta = bin::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = bin::get_string(is);
    ck.meta[k] = bin::get_string(is);
  }
  auto nblocks = bin::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    CheckpointBlock b;
    b.name = bin::get_string(is);
    b.rows = bin::get<std::uint32_t>(is);
    b.cols = bin::get<std::uint32_t>(is);
    auto dtype = bin::get<std::uint8_t>(is);
    if (dtype != 1 && dtype != 2) throw DataError("checkpoint: unknown dtype in block " + b.name);
    b.f64 = dtype == 2;
    const std::size_t n = static_cast<std::size_t>(b.rows) * b.cols;
    if (n > (1ull << 31)) throw DataError("checkpoint: block too large");
    b.data.resize(n);
    for (std::size_t j = 0; j < n; ++j) b.data[j] = b.f64 ? bin::get<double>(is) : bin::get<float>(is);
    ck.blocks_.push_back(std::move(b));
  }
  return ck;
}

std::string Checkpoint::get(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw DataError("checkpoint: missing metadata '" + key + "'");
  return it->second;
}

long long Checkpoint::get_int(const std::string& key) const { return std::stoll(get(key)); }

double Checkpoint::get_double(const std::string& key) const { return std::stod(get(key)); }

}  // namespace emotoken
