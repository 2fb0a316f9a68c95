#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "coe/config.hpp"

namespace coe {

struct Batch {
  int batch = 0;
  int seq = 0;
  std::vector<std::int32_t> inputs;   // [batch × seq]
  std::vector<std::int32_t> targets;  // [batch × seq], next-token labels

  std::span<const std::int32_t> input_row(int b) const {
    return {inputs.data() + static_cast<std::size_t>(b) * seq, static_cast<std::size_t>(seq)};
  }
  std::span<const std::int32_t> target_row(int b) const {
    return {targets.data() + static_cast<std::size_t>(b) * seq, static_cast<std::size_t>(seq)};
  }
};

// Deterministic token source. Training batches are a pure function of
// (seed, step); validation batches are a pure function of the corpus alone.
class DataStream {
 public:
  static DataStream bytes_from_file(const std::string& path, double val_fraction);
  static DataStream copy_task(int alphabet, int period);
  static DataStream from_config(const DataConfig& data, double val_fraction);

  Batch train_batch(std::uint64_t seed, std::int64_t step, int batch, int seq) const;
  // Fixed held-out windows; at most `max_windows` batches of `batch` rows.
  std::vector<Batch> val_batches(int batch, int seq, int max_windows) const;

  bool is_copy_task() const { return task_ == Task::kCopy; }
  std::int64_t train_bytes() const { return train_len_; }
  std::int64_t val_bytes() const {
    return static_cast<std::int64_t>(corpus_.size()) - train_len_;
  }

 private:
  enum class Task { kBytes, kCopy };
  Task task_ = Task::kBytes;
  std::vector<std::uint8_t> corpus_;
  std::int64_t train_len_ = 0;  // train window is [0, train_len_), val is the tail
  int alphabet_ = 64;
  int period_ = 8;

  void fill_copy_rows(Batch& b, std::uint64_t seed, const char* purpose, std::int64_t index) const;
};

// Deterministic English-like filler text for demos and smoke corpora.
std::vector<std::uint8_t> generate_pseudo_text(std::uint64_t seed, std::size_t bytes);

}  // namespace coe
