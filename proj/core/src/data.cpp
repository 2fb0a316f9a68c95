#include "coe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "coe/rng.hpp"

namespace coe {

DataStream DataStream::bytes_from_file(const std::string& path, double val_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("data: cannot open corpus '" + path + "'");
  DataStream ds;
  ds.task_ = Task::kBytes;
  ds.corpus_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (ds.corpus_.size() < 256)
    throw ConfigError("data: corpus '" + path + "' is too small (" +
                      std::to_string(ds.corpus_.size()) + " bytes)");
  // Hold out the final fraction contiguously; train and validation windows
  // never overlap.
  const auto held = std::max<std::int64_t>(
      64, static_cast<std::int64_t>(std::llround(val_fraction * static_cast<double>(ds.corpus_.size()))));
  ds.train_len_ = static_cast<std::int64_t>(ds.corpus_.size()) - held;
  if (ds.train_len_ < 128)
    throw ConfigError("data: corpus too small for the requested validation fraction");
  return ds;
}

DataStream DataStream::copy_task(int alphabet, int period) {
  DataStream ds;
  ds.task_ = Task::kCopy;
  ds.alphabet_ = alphabet;
  ds.period_ = period;
  return ds;
}

DataStream DataStream::from_config(const DataConfig& data, double val_fraction) {
  data.validate();
  if (data.task == "copy") return copy_task(data.copy_alphabet, data.copy_period);
  return bytes_from_file(data.path, val_fraction);
}

void DataStream::fill_copy_rows(Batch& b, std::uint64_t seed, const char* purpose,
                                std::int64_t index) const {
  // Period-`period_` repeating sequences: every token from position `period_`
  // on equals the token `period_` places back, so the next-token target is
  // predictable from context everywhere past the seed prefix.
  for (int row = 0; row < b.batch; ++row) {
    RngStream rng(seed, purpose, static_cast<std::uint64_t>(index * b.batch + row));
    std::vector<std::int32_t> seq(static_cast<std::size_t>(b.seq) + 1);
    for (std::size_t i = 0; i < seq.size(); ++i)
      seq[i] = i < static_cast<std::size_t>(period_)
                   ? static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(alphabet_)))
                   : seq[i - static_cast<std::size_t>(period_)];
    for (int i = 0; i < b.seq; ++i) {
      b.inputs[static_cast<std::size_t>(row) * b.seq + i] = seq[static_cast<std::size_t>(i)];
      b.targets[static_cast<std::size_t>(row) * b.seq + i] = seq[static_cast<std::size_t>(i) + 1];
    }
  }
}

Batch DataStream::train_batch(std::uint64_t seed, std::int64_t step, int batch, int seq) const {
  Batch b;
  b.batch = batch;
  b.seq = seq;
  b.inputs.resize(static_cast<std::size_t>(batch) * seq);
  b.targets.resize(static_cast<std::size_t>(batch) * seq);
  if (task_ == Task::kCopy) {
    fill_copy_rows(b, seed, "data/copy", step);
    return b;
  }
  const std::int64_t max_start = train_len_ - seq - 1;
  if (max_start < 0)
    throw ConfigError("data: sequence length " + std::to_string(seq) +
                      " does not fit the training window");
  RngStream rng(seed, "data/bytes", static_cast<std::uint64_t>(step));
  for (int row = 0; row < batch; ++row) {
    const auto start =
        static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(max_start + 1)));
    for (int i = 0; i < seq; ++i) {
      b.inputs[static_cast<std::size_t>(row) * seq + i] = corpus_[static_cast<std::size_t>(start + i)];
      b.targets[static_cast<std::size_t>(row) * seq + i] =
          corpus_[static_cast<std::size_t>(start + i + 1)];
    }
  }
  return b;
}

std::vector<Batch> DataStream::val_batches(int batch, int seq, int max_windows) const {
  std::vector<Batch> out;
  if (task_ == Task::kCopy) {
    // Fixed validation set drawn from a stream the training batches never use.
    for (int w = 0; w < max_windows; ++w) {
      Batch b;
      b.batch = batch;
      b.seq = seq;
      b.inputs.resize(static_cast<std::size_t>(batch) * seq);
      b.targets.resize(static_cast<std::size_t>(batch) * seq);
      fill_copy_rows(b, /*seed=*/0, "data/copy-val", w);
      out.push_back(std::move(b));
    }
    return out;
  }
  std::vector<std::pair<std::int64_t, std::int64_t>> windows;  // start offsets
  for (std::int64_t start = train_len_;
       start + seq + 1 <= static_cast<std::int64_t>(corpus_.size()); start += seq)
    windows.emplace_back(start, start + seq);
  if (windows.empty())
    throw ConfigError("data: validation split has no full window of length " + std::to_string(seq));
  std::int64_t taken = 0;
  while (taken < static_cast<std::int64_t>(windows.size()) &&
         out.size() < static_cast<std::size_t>(max_windows)) {
    Batch b;
    b.batch = 0;
    b.seq = seq;
    for (int row = 0; row < batch && taken < static_cast<std::int64_t>(windows.size()); ++row, ++taken) {
      const auto start = windows[static_cast<std::size_t>(taken)].first;
      for (int i = 0; i < seq; ++i) {
        b.inputs.push_back(corpus_[static_cast<std::size_t>(start + i)]);
        b.targets.push_back(corpus_[static_cast<std::size_t>(start + i + 1)]);
      }
      ++b.batch;
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<std::uint8_t> generate_pseudo_text(std::uint64_t seed, std::size_t bytes) {
  // Zipf-weighted lexicon of pronounceable words arranged into sentences and
  // paragraphs. Low per-byte entropy, stable statistics.
  static const char* kOnsets[] = {"b",  "br", "c",  "cl", "d",  "dr", "f",  "fl", "g",  "gr",
                                  "h",  "j",  "k",  "l",  "m",  "n",  "p",  "pr", "qu", "r",
                                  "s",  "sh", "sl", "st", "t",  "th", "tr", "v",  "w",  "z"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou"};
  static const char* kCodas[] = {"",  "n",  "r",  "s",  "t",  "l",  "m",  "d",
                                 "g", "nd", "st", "rt", "nt", "ck", "sh", "ng"};
  RngStream lex_rng(seed, "pseudo-text/lexicon");
  std::vector<std::string> lexicon;
  lexicon.reserve(512);
  for (int i = 0; i < 512; ++i) {
    std::string w = kOnsets[lex_rng.next_below(std::size(kOnsets))];
    w += kVowels[lex_rng.next_below(std::size(kVowels))];
    w += kCodas[lex_rng.next_below(std::size(kCodas))];
    if (lex_rng.next_unit() < 0.35) {
      w += kOnsets[lex_rng.next_below(std::size(kOnsets))];
      w += kVowels[lex_rng.next_below(std::size(kVowels))];
      w += kCodas[lex_rng.next_below(std::size(kCodas))];
    }
    lexicon.push_back(std::move(w));
  }

  RngStream rng(seed, "pseudo-text/body");
  auto zipf_word = [&]() -> const std::string& {
    // Approximate Zipf by squaring a uniform draw.
    const double u = rng.next_unit();
    const auto idx = static_cast<std::size_t>(u * u * static_cast<double>(lexicon.size() - 1));
    return lexicon[idx];
  };

  std::vector<std::uint8_t> text;
  text.reserve(bytes + 128);
  std::size_t line_len = 0;
  while (text.size() < bytes) {
    const int words = 4 + static_cast<int>(rng.next_below(10));
    for (int w = 0; w < words && text.size() < bytes; ++w) {
      std::string token = zipf_word();
      if (w == 0) token[0] = static_cast<char>(std::toupper(token[0]));
      for (char c : token) text.push_back(static_cast<std::uint8_t>(c));
      line_len += token.size() + 1;
      if (w + 1 < words) {
        if (line_len > 70) {
          text.push_back('\n');
          line_len = 0;
        } else {
          text.push_back(' ');
        }
      }
    }
    text.push_back('.');
    if (rng.next_unit() < 0.12) {
      text.push_back('\n');
      text.push_back('\n');
      line_len = 0;
    } else {
      text.push_back(' ');
      line_len += 2;
    }
  }
  text.resize(bytes);
  return text;
}

}  // namespace coe
