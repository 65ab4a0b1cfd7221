#include "mla/synthworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "mla/errors.hpp"
#include "mla/rng.hpp"

namespace mla {

namespace {

const std::vector<std::string> kFunctionWords = {"the", "and", "here"};
constexpr int kMaxConceptsPerRecord = 4;
constexpr int kSeparationRetries = 64;

// Short pronounceable CVCV words for concepts.
std::string make_word(Rng& rng) {
  static const std::string cons = "bdfgklmnprstvz";
  static const std::string vows = "aeiou";
  std::string w;
  for (int i = 0; i < 2; ++i) {
    w += cons[static_cast<size_t>(rng.below(cons.size()))];
    w += vows[static_cast<size_t>(rng.below(vows.size()))];
  }
  return w;
}

// Seeded permutation of 'a'..'z'; bijective per language.
std::array<char, 26> letter_cipher(Rng rng) {
  std::array<char, 26> map;
  for (int i = 0; i < 26; ++i) map[static_cast<size_t>(i)] = static_cast<char>('a' + i);
  for (int i = 25; i > 0; --i)
    std::swap(map[static_cast<size_t>(i)], map[rng.below(static_cast<uint64_t>(i) + 1)]);
  return map;
}

template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

double row_distance(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

const char* order_rule_name(OrderRule r) {
  switch (r) {
    case OrderRule::Identity: return "identity";
    case OrderRule::Reversed: return "reversed";
    case OrderRule::Permuted: return "permuted";
  }
  return "?";
}

OrderRule order_rule_from_name(const std::string& name) {
  for (OrderRule r : {OrderRule::Identity, OrderRule::Reversed, OrderRule::Permuted})
    if (name == order_rule_name(r)) return r;
  raise(ErrorCode::Parse, "unknown order rule: " + name);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  for (Split s : {Split::Train, Split::Dev, Split::Test})
    if (name == split_name(s)) return s;
  raise(ErrorCode::Parse, "unknown split: " + name);
}

void WorldConfig::validate() const {
  if (concepts < 2) raise(ErrorCode::Config, "world.concepts must be >= 2");
  if (patch_dim < 1 || patches < 1)
    raise(ErrorCode::Config, "world patch dimensions must be >= 1");
  if (noise < 0.0) raise(ErrorCode::Config, "world.noise must be >= 0");
  std::set<std::string> tags;
  for (const auto& l : languages) {
    if (l.tag.empty() || l.tag == kNativeTag)
      raise(ErrorCode::Config, "invalid language tag '" + l.tag + "'");
    if (!tags.insert(l.tag).second)
      raise(ErrorCode::Config, "duplicate language tag '" + l.tag + "'");
    if (l.overlap < 0.0 || l.overlap > 1.0)
      raise(ErrorCode::Config, "language overlap must be in [0, 1]");
  }
  if (pretrain_pairs < 1 || translation_pairs < 1 || image_text_pairs < 1)
    raise(ErrorCode::Config, "corpus sizes must be >= 1");
}

std::vector<const SampleRecord*> split_view(const Corpus& corpus, Split s) {
  std::vector<const SampleRecord*> out;
  for (const auto& r : corpus)
    if (r.split == s) out.push_back(&r);
  return out;
}

SyntheticWorld SyntheticWorld::build(const WorldConfig& cfg) {
  cfg.validate();
  SyntheticWorld w;
  w.cfg_ = cfg;
  w.function_words_ = kFunctionWords;
  Rng root(cfg.seed);

  // Concept words, unique and distinct from function words.
  Rng word_rng = root.fork("words");
  std::set<std::string> used(kFunctionWords.begin(), kFunctionWords.end());
  for (int c = 0; c < cfg.concepts; ++c) {
    std::string word;
    do {
      word = make_word(word_rng);
    } while (!used.insert(word).second);
    w.concept_words_.push_back(word);
  }

  // Prototypes with pairwise separation > 4 sigma; regenerate on violation.
  const double min_required = 4.0 * cfg.noise;
  bool ok = false;
  for (int attempt = 0; attempt < kSeparationRetries && !ok; ++attempt) {
    Rng proto_rng = root.fork("proto").fork(static_cast<uint64_t>(attempt));
    w.prototypes_.clear();
    for (int c = 0; c < cfg.concepts; ++c) {
      Tensor p({cfg.patch_dim}, Dtype::F32);
      for (size_t i = 0; i < p.numel(); ++i) p.set(i, proto_rng.normal());
      w.prototypes_.push_back(std::move(p));
    }
    double mind = w.min_prototype_distance();
    ok = mind > min_required && mind > 0.0;
  }
  if (!ok)
    raise(ErrorCode::Config, "could not separate prototypes by 4*noise after " +
                                 std::to_string(kSeparationRetries) + " attempts");

  // Which native words share a surface form across overlap-enabled languages
  // is a property of the world, so all languages agree on it.
  std::vector<std::string> lexicon = w.native_lexicon();
  std::vector<std::string> overlap_order = lexicon;
  Rng ov_rng = root.fork("overlap");
  seeded_shuffle(overlap_order, ov_rng);

  for (const auto& lang : cfg.languages) {
    auto cipher = letter_cipher(Rng(lang.seed).fork("cipher"));
    size_t n_overlap = static_cast<size_t>(lang.overlap * static_cast<double>(lexicon.size()));
    std::set<std::string> shared(overlap_order.begin(),
                                 overlap_order.begin() + static_cast<long>(n_overlap));
    std::map<std::string, std::string> enc, dec;
    for (const auto& word : lexicon) {
      std::string surface;
      if (shared.count(word)) {
        surface = "xx_" + word;
      } else {
        surface = lang.tag + "_";
        for (char ch : word) surface += cipher[static_cast<size_t>(ch - 'a')];
      }
      enc[word] = surface;
      dec[surface] = word;
    }
    w.encode_maps_[lang.tag] = std::move(enc);
    w.decode_maps_[lang.tag] = std::move(dec);
  }
  return w;
}

const Tensor& SyntheticWorld::prototype(int concept_id) const {
  if (concept_id < 0 || concept_id >= cfg_.concepts)
    raise(ErrorCode::InvalidArgument, "unknown concept id " + std::to_string(concept_id));
  return prototypes_[static_cast<size_t>(concept_id)];
}

double SyntheticWorld::min_prototype_distance() const {
  double mind = std::numeric_limits<double>::infinity();
  for (size_t a = 0; a < prototypes_.size(); ++a)
    for (size_t b = a + 1; b < prototypes_.size(); ++b)
      mind = std::min(mind, row_distance(prototypes_[a], prototypes_[b]));
  return mind;
}

std::vector<std::string> SyntheticWorld::native_lexicon() const {
  std::vector<std::string> out = function_words_;
  out.insert(out.end(), concept_words_.begin(), concept_words_.end());
  return out;
}

std::vector<std::string> SyntheticWorld::surface_lexicon(const std::string& lang) const {
  const auto& enc = encode_maps_.at(spec(lang).tag);
  std::vector<std::string> out;
  out.reserve(enc.size());
  for (const auto& [word, surface] : enc) {
    (void)word;
    out.push_back(surface);
  }
  std::sort(out.begin(), out.end());
  return out;
}

const std::string& SyntheticWorld::concept_word(int concept_id) const {
  if (concept_id < 0 || concept_id >= cfg_.concepts)
    raise(ErrorCode::InvalidArgument, "unknown concept id " + std::to_string(concept_id));
  return concept_words_[static_cast<size_t>(concept_id)];
}

const LanguageSpec& SyntheticWorld::spec(const std::string& tag) const {
  for (const auto& l : cfg_.languages)
    if (l.tag == tag) return l;
  raise(ErrorCode::Language, "unknown language: " + tag);
}

std::vector<std::string> SyntheticWorld::apply_order(std::vector<std::string> tokens,
                                                     const LanguageSpec& lang,
                                                     bool inverse) const {
  switch (lang.order) {
    case OrderRule::Identity:
      return tokens;
    case OrderRule::Reversed:
      std::reverse(tokens.begin(), tokens.end());
      return tokens;
    case OrderRule::Permuted: {
      const size_t n = tokens.size();
      std::vector<size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng = Rng(lang.seed).fork("perm").fork(static_cast<uint64_t>(n));
      seeded_shuffle(perm, rng);
      std::vector<std::string> out(n);
      for (size_t i = 0; i < n; ++i) {
        if (inverse)
          out[perm[i]] = tokens[i];
        else
          out[i] = tokens[perm[i]];
      }
      return out;
    }
  }
  return tokens;
}

std::vector<std::string> SyntheticWorld::utter(std::span<const int> concepts,
                                               const std::string& lang) const {
  if (concepts.empty()) raise(ErrorCode::InvalidArgument, "utter: empty concept list");
  std::vector<std::string> tokens;
  tokens.push_back(function_words_[0]);  // "the"
  for (size_t i = 0; i < concepts.size(); ++i) {
    if (i > 0) tokens.push_back(function_words_[1]);  // "and"
    tokens.push_back(concept_word(concepts[i]));
  }
  tokens.push_back(function_words_[2]);  // "here"
  if (lang == kNativeTag) return tokens;
  const LanguageSpec& l = spec(lang);
  const auto& enc = encode_maps_.at(l.tag);
  for (auto& tok : tokens) tok = enc.at(tok);
  return apply_order(std::move(tokens), l, /*inverse=*/false);
}

std::vector<std::string> SyntheticWorld::decode(std::span<const std::string> tokens,
                                                const std::string& lang) const {
  const LanguageSpec& l = spec(lang);
  std::vector<std::string> out(tokens.begin(), tokens.end());
  out = apply_order(std::move(out), l, /*inverse=*/true);
  const auto& dec = decode_maps_.at(l.tag);
  for (auto& tok : out) {
    auto it = dec.find(tok);
    if (it == dec.end()) raise(ErrorCode::Vocab, "cannot decode token: " + tok);
    tok = it->second;
  }
  return out;
}

Tensor SyntheticWorld::render_image(std::span<const int> concepts,
                                    uint64_t sample_seed) const {
  if (concepts.empty()) raise(ErrorCode::InvalidArgument, "render_image: empty concept set");
  if (static_cast<int>(concepts.size()) > cfg_.patches)
    raise(ErrorCode::InvalidArgument, "render_image: more concepts than patches");
  for (int c : concepts) (void)prototype(c);

  Rng rng = Rng(cfg_.seed).fork("image").fork(sample_seed);
  // Distinct patch positions for the concepts.
  std::vector<int> positions(static_cast<size_t>(cfg_.patches));
  std::iota(positions.begin(), positions.end(), 0);
  seeded_shuffle(positions, rng);

  Tensor img({cfg_.patches, cfg_.patch_dim}, Dtype::F32);
  for (int p = 0; p < cfg_.patches; ++p)
    for (int j = 0; j < cfg_.patch_dim; ++j)
      img.set(p, j, cfg_.noise * rng.normal());
  for (size_t k = 0; k < concepts.size(); ++k) {
    const Tensor& proto = prototype(concepts[k]);
    const int p = positions[k];
    for (int j = 0; j < cfg_.patch_dim; ++j)
      img.set(p, j, proto[static_cast<size_t>(j)] + cfg_.noise * rng.normal());
  }
  return img;
}

std::vector<int> SyntheticWorld::sample_concepts(Rng& rng) const {
  const int max_k = std::min(kMaxConceptsPerRecord, std::min(cfg_.concepts, cfg_.patches));
  const int k = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(max_k)));
  std::vector<int> all(static_cast<size_t>(cfg_.concepts));
  std::iota(all.begin(), all.end(), 0);
  seeded_shuffle(all, rng);
  return {all.begin(), all.begin() + k};
}

void SyntheticWorld::assign_splits(Corpus& corpus, uint64_t seed) const {
  // Ranked by a per-record hash: exact 80/10/10 sizes, and the marker travels
  // with the record so corpus concatenation never perturbs membership.
  const size_t n = corpus.size();
  std::vector<std::pair<uint64_t, size_t>> order(n);
  for (size_t i = 0; i < n; ++i)
    order[i] = {Rng(seed).fork("split").fork(static_cast<uint64_t>(corpus[i].id)).next_u64(), i};
  std::sort(order.begin(), order.end());
  const size_t dev = n / 10, test = n / 10;
  const size_t train = n - dev - test;
  for (size_t rank = 0; rank < n; ++rank) {
    Split s = rank < train ? Split::Train : (rank < train + dev ? Split::Dev : Split::Test);
    corpus[order[rank].second].split = s;
  }
}

Corpus SyntheticWorld::gen_parallel_corpus(std::span<const std::string> langs, int n,
                                           uint64_t seed) const {
  if (n < 1) raise(ErrorCode::InvalidArgument, "corpus size must be >= 1");
  for (const auto& l : langs) (void)spec(l);
  Corpus out;
  out.reserve(static_cast<size_t>(n));
  for (int id = 0; id < n; ++id) {
    Rng rng = Rng(seed).fork("rec").fork(static_cast<uint64_t>(id));
    SampleRecord rec;
    rec.id = id;
    rec.concepts = sample_concepts(rng);
    rec.text[kNativeTag] = utter(rec.concepts, kNativeTag);
    for (const auto& l : langs) rec.text[l] = utter(rec.concepts, l);
    out.push_back(std::move(rec));
  }
  assign_splits(out, seed);
  return out;
}

Corpus SyntheticWorld::gen_image_text_corpus(std::span<const std::string> langs, int n,
                                             uint64_t seed) const {
  if (n < 1) raise(ErrorCode::InvalidArgument, "corpus size must be >= 1");
  for (const auto& l : langs) (void)spec(l);
  Corpus out;
  out.reserve(static_cast<size_t>(n));
  for (int id = 0; id < n; ++id) {
    Rng rng = Rng(seed).fork("rec").fork(static_cast<uint64_t>(id));
    SampleRecord rec;
    rec.id = id;
    rec.concepts = sample_concepts(rng);
    rec.image = render_image(rec.concepts, rng.fork("img").next_u64());
    rec.text[kNativeTag] = utter(rec.concepts, kNativeTag);
    for (const auto& l : langs) rec.text[l] = utter(rec.concepts, l);
    out.push_back(std::move(rec));
  }
  assign_splits(out, seed);
  return out;
}

}  // namespace mla
