#pragma once

// Deterministic desk-scale tasks: Gaussian-cluster classification and
// character-level next-token prediction over a UTF-8 text file.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "peerdistill/batch.hpp"

namespace peerdistill {

enum class DatasetKind { SyntheticClassification, CharLm };

std::string_view to_string(DatasetKind kind);

enum class Split { Train, Validation, Test };

struct Dataset {
  DatasetKind kind = DatasetKind::SyntheticClassification;
  // Feature dimension (classification) or sequence length (char LM).
  std::size_t width = 0;
  // Classes (classification) or vocabulary size (char LM).
  std::size_t num_classes = 0;
  std::size_t num_examples = 0;

  std::vector<double> features;      // [num_examples x width], classification
  std::vector<std::int32_t> tokens;  // [num_examples x width], char LM
  // One per example (classification) or one per position (char LM).
  std::vector<std::int32_t> labels;

  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;

  std::vector<char32_t> vocab;  // char LM: index -> code point

  const std::vector<std::size_t>& split(Split s) const;
  Batch gather(std::span<const std::size_t> indices) const;
  Batch whole(Split s) const { return gather(split(s)); }
};

// Class means uniform on the unit sphere, points mean + N(0, sigma^2 I),
// shuffled 80/10/10 train/validation/test split.
Dataset make_synthetic(std::size_t num_classes, std::size_t dims,
                       std::size_t per_class, double noise_sigma,
                       std::uint64_t seed);

// Vocabulary of distinct code points (sorted), non-overlapping windows of
// seq_len characters labelled with the following character, and a
// contiguous 90/5/5 split. The split does not depend on `seed`; it is kept
// in the manifest for provenance.
Dataset load_char_corpus(const std::filesystem::path& path, std::size_t seq_len,
                         std::uint64_t seed);
Dataset char_corpus_from_text(std::string_view utf8, std::size_t seq_len);

// Decodes UTF-8, throwing DataError with the byte offset of the first
// malformed sequence.
std::u32string decode_utf8(std::string_view bytes);
std::string encode_utf8(std::u32string_view text);

// kind, sizes, vocab, and an FNV-1a checksum of each split's index list.
nlohmann::json manifest(const Dataset& data);

// Shuffled minibatches over a fixed index pool. Each epoch is a fresh
// permutation drawn from a generator seeded with (seed, epoch); the final
// partial batch of an epoch is emitted as is. The dataset must outlive the
// stream.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::vector<std::size_t> pool,
              std::size_t batch_size, std::uint64_t seed);
  BatchStream(const Dataset& data, Split split, std::size_t batch_size,
              std::uint64_t seed);

  Batch next();

  std::size_t epoch() const { return epoch_; }
  std::size_t batch_size() const { return batch_size_; }

 private:
  void reshuffle();

  const Dataset* data_;
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
};

// Standard seed-mixing finalizer.
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace peerdistill
