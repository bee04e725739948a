#include "peerdistill/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "peerdistill/error.hpp"
#include "peerdistill/io.hpp"

namespace peerdistill {

std::string_view to_string(DatasetKind kind) {
  return kind == DatasetKind::CharLm ? "char_lm" : "synthetic_classification";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

const std::vector<std::size_t>& Dataset::split(Split s) const {
  switch (s) {
    case Split::Train:
      return train;
    case Split::Validation:
      return validation;
    default:
      return test;
  }
}

Batch Dataset::gather(std::span<const std::size_t> indices) const {
  Batch b;
  b.rows = indices.size();
  b.width = width;
  b.indices.assign(indices.begin(), indices.end());
  if (kind == DatasetKind::SyntheticClassification) {
    b.features.reserve(indices.size() * width);
    for (std::size_t i : indices) {
      b.features.insert(b.features.end(), features.begin() + static_cast<std::ptrdiff_t>(i * width),
                        features.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
      b.labels.push_back(labels[i]);
    }
  } else {
    b.tokens.reserve(indices.size() * width);
    b.labels.reserve(indices.size() * width);
    for (std::size_t i : indices) {
      const auto lo = static_cast<std::ptrdiff_t>(i * width);
      const auto hi = static_cast<std::ptrdiff_t>((i + 1) * width);
      b.tokens.insert(b.tokens.end(), tokens.begin() + lo, tokens.begin() + hi);
      b.labels.insert(b.labels.end(), labels.begin() + lo, labels.begin() + hi);
    }
  }
  return b;
}

Dataset make_synthetic(std::size_t num_classes, std::size_t dims,
                       std::size_t per_class, double noise_sigma,
                       std::uint64_t seed) {
  if (num_classes < 1 || dims < 1 || per_class < 1) {
    throw ConfigError("synthetic task: num_classes, dims and per_class must be >= 1");
  }
  if (!(noise_sigma > 0.0)) throw ConfigError("synthetic task: noise_sigma must be > 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  std::vector<double> means(num_classes * dims);
  for (std::size_t c = 0; c < num_classes; ++c) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t k = 0; k < dims; ++k) {
        const double v = gauss(rng);
        means[c * dims + k] = v;
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < dims; ++k) means[c * dims + k] /= norm;
  }

  Dataset d;
  d.kind = DatasetKind::SyntheticClassification;
  d.width = dims;
  d.num_classes = num_classes;
  d.num_examples = num_classes * per_class;
  d.features.resize(d.num_examples * dims);
  d.labels.resize(d.num_examples);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t n = c * per_class + i;
      d.labels[n] = static_cast<std::int32_t>(c);
      for (std::size_t k = 0; k < dims; ++k)
        d.features[n * dims + k] = means[c * dims + k] + noise_sigma * gauss(rng);
    }
  }

  std::vector<std::size_t> order(d.num_examples);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = d.num_examples * 8 / 10;
  const std::size_t n_val = d.num_examples / 10;
  d.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                      order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  d.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return d;
}

std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  auto fail = [&](std::size_t at) {
    throw DataError("invalid UTF-8 at byte offset " + std::to_string(at));
  };
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      fail(i);
    }
    if (i + len > s.size()) fail(i);
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) fail(i);
      cp = (cp << 6) | (b & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
                          (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) fail(i);
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string encode_utf8(std::u32string_view text) {
  std::string out;
  for (char32_t cp : text) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

Dataset char_corpus_from_text(std::string_view utf8, std::size_t seq_len) {
  if (seq_len < 1) throw ConfigError("char corpus: seq_len must be >= 1");
  const std::u32string text = decode_utf8(utf8);
  if (text.empty()) throw DataError("char corpus: empty text");
  if (text.size() < seq_len + 1) {
    throw DataError("char corpus: " + std::to_string(text.size()) +
                    " characters is too short for seq_len " + std::to_string(seq_len));
  }

  Dataset d;
  d.kind = DatasetKind::CharLm;
  d.width = seq_len;
  std::map<char32_t, std::int32_t> index;
  for (char32_t c : text) index.emplace(c, 0);
  for (auto& [c, i] : index) {
    i = static_cast<std::int32_t>(d.vocab.size());
    d.vocab.push_back(c);
  }
  d.num_classes = d.vocab.size();

  d.num_examples = (text.size() - 1) / seq_len;
  d.tokens.reserve(d.num_examples * seq_len);
  d.labels.reserve(d.num_examples * seq_len);
  for (std::size_t w = 0; w < d.num_examples; ++w) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      d.tokens.push_back(index.at(text[w * seq_len + t]));
      d.labels.push_back(index.at(text[w * seq_len + t + 1]));
    }
  }

  const std::size_t n = d.num_examples;
  std::size_t n_val = n * 5 / 100, n_test = n * 5 / 100;
  if (n >= 3) {
    n_val = std::max<std::size_t>(n_val, 1);
    n_test = std::max<std::size_t>(n_test, 1);
  }
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) {
      d.train.push_back(i);
    } else if (i < n_train + n_val) {
      d.validation.push_back(i);
    } else {
      d.test.push_back(i);
    }
  }
  return d;
}

Dataset load_char_corpus(const std::filesystem::path& path, std::size_t seq_len,
                         std::uint64_t /*seed*/) {
  const std::string bytes = read_file(path);
  if (bytes.empty()) throw DataError(path.string() + ": empty corpus file");
  try {
    return char_corpus_from_text(bytes, seq_len);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

nlohmann::json manifest(const Dataset& d) {
  auto checksum = [](const std::vector<std::size_t>& idx) {
    std::uint64_t h = fnv1a64({});
    for (std::size_t i : idx) {
      const auto v = static_cast<std::uint64_t>(i);
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&v), sizeof v), h);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
  };
  nlohmann::json j{
      {"kind", std::string(to_string(d.kind))},
      {"num_examples", d.num_examples},
      {"width", d.width},
      {"num_classes", d.num_classes},
      {"splits",
       {{"train", {{"size", d.train.size()}, {"checksum", checksum(d.train)}}},
        {"validation", {{"size", d.validation.size()}, {"checksum", checksum(d.validation)}}},
        {"test", {{"size", d.test.size()}, {"checksum", checksum(d.test)}}}}}};
  if (d.kind == DatasetKind::CharLm) {
    nlohmann::json vocab = nlohmann::json::array();
    for (char32_t c : d.vocab) vocab.push_back(encode_utf8(std::u32string(1, c)));
    j["vocab"] = vocab;
  }
  return j;
}

BatchStream::BatchStream(const Dataset& data, std::vector<std::size_t> pool,
                         std::size_t batch_size, std::uint64_t seed)
    : data_(&data), pool_(std::move(pool)), batch_size_(batch_size), seed_(seed) {
  if (pool_.empty()) throw DataError("batch stream over an empty index set");
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  reshuffle();
}

BatchStream::BatchStream(const Dataset& data, Split split, std::size_t batch_size,
                         std::uint64_t seed)
    : BatchStream(data, data.split(split), batch_size, seed) {}

void BatchStream::reshuffle() {
  order_ = pool_;
  std::mt19937_64 rng(splitmix64(seed_ ^ splitmix64(epoch_ + 1)));
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

Batch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t take = std::min(batch_size_, order_.size() - cursor_);
  Batch b = data_->gather(std::span(order_).subspan(cursor_, take));
  cursor_ += take;
  return b;
}

}  // namespace peerdistill
