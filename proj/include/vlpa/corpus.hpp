#pragma once

// Synthetic image-caption corpus: 3x32x32 images of colored rectangles on a
// noise background, captioned by templated token sequences over a fixed
// 500-token vocabulary with a synonym table.

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "vlpa/error.hpp"
#include "vlpa/io.hpp"
#include "vlpa/rng.hpp"
#include "vlpa/tensor.hpp"

namespace vlpa {

using TokenId = std::size_t;
using Tokens = std::vector<TokenId>;

inline constexpr std::size_t kVocabSize = 500;
inline constexpr std::size_t kMaxTextLen = 30;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageNumel = kImageChannels * kImageSide * kImageSide;
inline constexpr TokenId kPadToken = 0;

inline Shape image_shape() { return {kImageChannels, kImageSide, kImageSide}; }

// Fixed vocabulary. Content tokens come in groups of three interchangeable
// surface forms sharing one concept id.
class Vocabulary {
 public:
  enum class Kind { kPad, kFunction, kContent, kFiller, kUnused };

  static const Vocabulary& standard() {
    static const Vocabulary v = build();
    return v;
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(TokenId t) const { return words_.at(t); }
  Kind kind(TokenId t) const { return kinds_.at(t); }
  bool is_content(TokenId t) const { return kinds_.at(t) == Kind::kContent; }
  // The two alternates of a content token; empty for other tokens.
  const std::vector<TokenId>& synonyms(TokenId t) const { return synonyms_.at(t); }
  // Concept id shared by synonymous tokens; every other token is its own concept.
  std::size_t concept_of(TokenId t) const { return concept_.at(t); }
  std::size_t concept_count() const { return concept_count_; }

  TokenId id(const std::string& w) const {
    for (TokenId i = 0; i < words_.size(); ++i)
      if (words_[i] == w) return i;
    throw ConfigError("vocabulary: unknown word '" + w + "'");
  }

  // Content groups, in order, as token ids of their canonical form.
  const std::vector<TokenId>& colors() const { return colors_; }
  const std::vector<TokenId>& sizes() const { return sizes_; }
  const std::vector<TokenId>& shapes() const { return shapes_; }
  const std::vector<TokenId>& positions() const { return positions_; }
  const std::vector<TokenId>& counts() const { return counts_; }
  const std::vector<TokenId>& fillers() const { return fillers_; }

  std::string render(const Tokens& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ' ';
      out += tokens[i] < words_.size() ? words_[tokens[i]] : "<oov>";
    }
    return out;
  }

 private:
  static Vocabulary build() {
    Vocabulary v;
    auto add = [&](const std::string& w, Kind k) {
      v.words_.push_back(w);
      v.kinds_.push_back(k);
      v.synonyms_.emplace_back();
      v.concept_.push_back(v.concept_count_++);
      return v.words_.size() - 1;
    };
    auto add_group = [&](std::array<const char*, 3> forms, std::vector<TokenId>& into) {
      const std::size_t c = v.concept_count_++;
      TokenId first = v.words_.size();
      for (const char* f : forms) {
        v.words_.push_back(f);
        v.kinds_.push_back(Kind::kContent);
        v.concept_.push_back(c);
        v.synonyms_.emplace_back();
      }
      for (TokenId i = 0; i < 3; ++i)
        for (TokenId j = 0; j < 3; ++j)
          if (i != j) v.synonyms_[first + i].push_back(first + j);
      into.push_back(first);
    };
    add("<pad>", Kind::kPad);
    for (const char* w : {"a", "photo", "of", "with", "at", "and", "object", "objects", "there",
                          "is", "are", "showing", "image", "in", "the"})
      add(w, Kind::kFunction);
    add_group({"red", "crimson", "scarlet"}, v.colors_);
    add_group({"green", "emerald", "lime"}, v.colors_);
    add_group({"blue", "azure", "navy"}, v.colors_);
    add_group({"yellow", "golden", "amber"}, v.colors_);
    add_group({"magenta", "pink", "fuchsia"}, v.colors_);
    add_group({"cyan", "teal", "aqua"}, v.colors_);
    add_group({"white", "ivory", "snowy"}, v.colors_);
    add_group({"orange", "tangerine", "apricot"}, v.colors_);
    add_group({"small", "tiny", "little"}, v.sizes_);
    add_group({"large", "big", "huge"}, v.sizes_);
    add_group({"square", "block", "cube"}, v.shapes_);
    add_group({"bar", "strip", "band"}, v.shapes_);
    add_group({"pillar", "column", "tower"}, v.shapes_);
    add_group({"top-left", "upper-left", "northwest"}, v.positions_);
    add_group({"top", "upper-middle", "north"}, v.positions_);
    add_group({"top-right", "upper-right", "northeast"}, v.positions_);
    add_group({"left", "middle-left", "west"}, v.positions_);
    add_group({"center", "middle", "centre"}, v.positions_);
    add_group({"right", "middle-right", "east"}, v.positions_);
    add_group({"bottom-left", "lower-left", "southwest"}, v.positions_);
    add_group({"bottom", "lower-middle", "south"}, v.positions_);
    add_group({"bottom-right", "lower-right", "southeast"}, v.positions_);
    add_group({"one", "single", "lone"}, v.counts_);
    add_group({"two", "pair", "couple"}, v.counts_);
    add_group({"three", "trio", "triple"}, v.counts_);
    for (int i = 0; i < 40; ++i) v.fillers_.push_back(add("style" + std::to_string(i), Kind::kFiller));
    while (v.words_.size() < kVocabSize) add("w" + std::to_string(v.words_.size()), Kind::kUnused);
    return v;
  }

  std::vector<std::string> words_;
  std::vector<Kind> kinds_;
  std::vector<std::vector<TokenId>> synonyms_;
  std::vector<std::size_t> concept_;
  std::size_t concept_count_ = 0;
  std::vector<TokenId> colors_, sizes_, shapes_, positions_, counts_, fillers_;
};

struct Record {
  int pair_id = 0;
  Tokens tokens;
  Tensor image{image_shape()};
};

struct CorpusParams {
  std::size_t size = 4352;
  std::size_t heldout = 256;
  std::uint64_t seed = 7;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  // Probability of inserting a filler token into a caption.
  double filler_prob = 0.3;
  // Probability of rendering a content concept with a synonym instead of its canonical form.
  double synonym_prob = 0.5;

  void validate() const {
    if (size < 64) throw ConfigError("corpus: size must be >= 64, got " + std::to_string(size));
    if (heldout == 0 || heldout >= size)
      throw ConfigError("corpus: heldout must be in [1, size), got " + std::to_string(heldout));
    if (min_objects < 1 || max_objects > 3 || min_objects > max_objects)
      throw ConfigError("corpus: object count range must lie within [1,3]");
    if (filler_prob < 0 || filler_prob > 1 || synonym_prob < 0 || synonym_prob > 1)
      throw ConfigError("corpus: probabilities must lie in [0,1]");
  }

  nlohmann::json to_json() const {
    return {{"size", size},           {"heldout", heldout},       {"seed", seed},
            {"min_objects", min_objects}, {"max_objects", max_objects}, {"filler_prob", filler_prob},
            {"synonym_prob", synonym_prob}};
  }
};

// Records [0, train_size) are the training split, the rest are held out.
struct SyntheticCorpus {
  CorpusParams params;
  std::vector<Record> records;

  std::size_t train_size() const { return records.size() - params.heldout; }
  std::span<const Record> train() const { return std::span(records).first(train_size()); }
  std::span<const Record> heldout() const { return std::span(records).subspan(train_size()); }

  const Record& by_pair_id(int id) const {
    for (const auto& r : records)
      if (r.pair_id == id) return r;
    throw UsageError("corpus: no pair with id " + std::to_string(id));
  }

  std::string content_hash() const {
    io::Fnv1a h;
    for (const auto& r : records) {
      h.update_value(r.pair_id);
      for (TokenId t : r.tokens) h.update_value(static_cast<std::uint32_t>(t));
      h.update(r.image.data().data(), r.image.size() * sizeof(double));
    }
    return h.hex();
  }
};

namespace detail {

struct RectSpec {
  std::size_t w, h;
};

// Pixel extents per (size, shape) class.
inline RectSpec rect_extent(std::size_t size_cls, std::size_t shape_cls) {
  static const RectSpec table[2][3] = {{{6, 6}, {9, 4}, {4, 9}}, {{10, 10}, {13, 6}, {6, 13}}};
  return table[size_cls][shape_cls];
}

inline const std::array<std::array<double, 3>, 8>& palette() {
  static const std::array<std::array<double, 3>, 8> p = {{{0.9, 0.1, 0.1},
                                                          {0.1, 0.8, 0.15},
                                                          {0.15, 0.25, 0.95},
                                                          {0.95, 0.9, 0.1},
                                                          {0.9, 0.15, 0.85},
                                                          {0.1, 0.85, 0.9},
                                                          {0.97, 0.97, 0.97},
                                                          {1.0, 0.55, 0.05}}};
  return p;
}

}  // namespace detail

// Deterministic corpus generation from `params.seed`.
inline SyntheticCorpus generate_corpus(const CorpusParams& params) {
  params.validate();
  const auto& vocab = Vocabulary::standard();
  Rng rng(params.seed);
  SyntheticCorpus corpus;
  corpus.params = params;
  corpus.records.reserve(params.size);

  auto surface = [&](TokenId canonical) -> TokenId {
    if (rng.bernoulli(params.synonym_prob)) return vocab.synonyms(canonical)[rng.below(2)];
    return canonical;
  };

  for (std::size_t n = 0; n < params.size; ++n) {
    Record rec;
    rec.pair_id = static_cast<int>(n);
    Tensor& img = rec.image;
    for (double& v : img.data()) v = rng.uniform(0.0, 0.25);

    const std::size_t k = params.min_objects + rng.below(params.max_objects - params.min_objects + 1);
    std::vector<std::size_t> cells = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    std::shuffle(cells.begin(), cells.end(), rng.engine());

    struct Obj {
      std::size_t color, size, shape, cell;
    };
    std::vector<Obj> objs;
    for (std::size_t o = 0; o < k; ++o) objs.push_back({rng.below(8), rng.below(2), rng.below(3), cells[o]});

    for (const Obj& o : objs) {
      const auto ext = detail::rect_extent(o.size, o.shape);
      const double cx = 5.5 + 10.5 * static_cast<double>(o.cell % 3) + rng.uniform(-1.0, 1.0);
      const double cy = 5.5 + 10.5 * static_cast<double>(o.cell / 3) + rng.uniform(-1.0, 1.0);
      const long x0 = std::lround(cx - static_cast<double>(ext.w) / 2.0);
      const long y0 = std::lround(cy - static_cast<double>(ext.h) / 2.0);
      const auto& col = detail::palette()[o.color];
      double jitter[3];
      for (double& j : jitter) j = rng.uniform(-0.05, 0.05);
      for (long y = y0; y < y0 + static_cast<long>(ext.h); ++y)
        for (long x = x0; x < x0 + static_cast<long>(ext.w); ++x) {
          if (x < 0 || y < 0 || x >= 32 || y >= 32) continue;
          for (std::size_t c = 0; c < 3; ++c)
            img[(c * 32 + static_cast<std::size_t>(y)) * 32 + static_cast<std::size_t>(x)] =
                std::clamp(col[c] + jitter[c], 0.0, 1.0);
        }
    }

    Tokens& t = rec.tokens;
    const bool there_template = rng.bernoulli(0.5);
    if (there_template) {
      t.push_back(vocab.id("there"));
      t.push_back(vocab.id(k == 1 ? "is" : "are"));
    } else {
      t.push_back(vocab.id("a"));
      if (rng.bernoulli(params.filler_prob)) t.push_back(vocab.fillers()[rng.below(vocab.fillers().size())]);
      t.push_back(vocab.id("photo"));
      t.push_back(vocab.id("of"));
    }
    t.push_back(surface(vocab.counts()[k - 1]));
    t.push_back(vocab.id(k == 1 ? "object" : "objects"));
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t i = 0; i < k; ++i) {
      const Obj& o = objs[order[i]];
      if (i) t.push_back(vocab.id("and"));
      t.push_back(surface(vocab.colors()[o.color]));
      t.push_back(surface(vocab.sizes()[o.size]));
      t.push_back(surface(vocab.shapes()[o.shape]));
      t.push_back(vocab.id("at"));
      t.push_back(surface(vocab.positions()[o.cell]));
    }
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

inline void validate_tokens(const Tokens& tokens, const char* op) {
  if (tokens.empty()) throw UsageError(std::string(op) + ": empty token sequence");
  if (tokens.size() > kMaxTextLen)
    throw UsageError(std::string(op) + ": sequence length " + std::to_string(tokens.size()) +
                     " exceeds " + std::to_string(kMaxTextLen));
  for (TokenId t : tokens)
    if (t >= kVocabSize) throw UsageError(std::string(op) + ": token id " + std::to_string(t) + " >= V");
}

// ---------------------------------------------------------------------------
// Persistence: corpus.jsonl + images/<pair_id>.f64 + corpus_meta.json
// ---------------------------------------------------------------------------

inline void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ostringstream lines;
  for (const auto& r : corpus.records) {
    const std::string rel = "images/" + std::to_string(r.pair_id) + ".f64";
    io::write_f64(dir / rel, r.image.data());
    nlohmann::json j = {{"pair_id", r.pair_id}, {"tokens", r.tokens}, {"image", rel}};
    lines << j.dump() << '\n';
  }
  io::write_file(dir / "corpus.jsonl", lines.str());
  nlohmann::json meta = corpus.params.to_json();
  meta["content_hash"] = corpus.content_hash();
  io::write_file(dir / "corpus_meta.json", meta.dump(2) + "\n");
}

inline SyntheticCorpus load_corpus(const std::filesystem::path& dir) {
  SyntheticCorpus corpus;
  auto meta = nlohmann::json::parse(io::read_file(dir / "corpus_meta.json"));
  corpus.params.size = meta.at("size");
  corpus.params.heldout = meta.at("heldout");
  corpus.params.seed = meta.at("seed");
  corpus.params.min_objects = meta.at("min_objects");
  corpus.params.max_objects = meta.at("max_objects");
  corpus.params.filler_prob = meta.at("filler_prob");
  corpus.params.synonym_prob = meta.at("synonym_prob");
  std::istringstream in(io::read_file(dir / "corpus.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Record r;
    r.pair_id = j.at("pair_id");
    r.tokens = j.at("tokens").get<Tokens>();
    validate_tokens(r.tokens, "load_corpus");
    r.image = Tensor(image_shape(), io::read_f64(dir / j.at("image").get<std::string>(), kImageNumel));
    corpus.records.push_back(std::move(r));
  }
  if (corpus.records.size() != corpus.params.size)
    throw ConfigError("load_corpus: expected " + std::to_string(corpus.params.size) + " records, found " +
                      std::to_string(corpus.records.size()));
  return corpus;
}

}  // namespace vlpa
