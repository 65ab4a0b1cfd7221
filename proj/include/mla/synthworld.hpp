#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mla/tensor.hpp"

namespace mla {

inline constexpr const char* kNativeTag = "native";

enum class OrderRule { Identity, Reversed, Permuted };
const char* order_rule_name(OrderRule r);
OrderRule order_rule_from_name(const std::string& name);

// A cipher language: an invertible word mapping plus a word-order rule.
// overlap is the fraction of native words whose surface form is shared
// across all overlap-enabled languages (and hence shares embedding rows).
struct LanguageSpec {
  std::string tag;
  OrderRule order = OrderRule::Identity;
  uint64_t seed = 0;
  double overlap = 0.0;

  bool operator==(const LanguageSpec&) const = default;
};

struct WorldConfig {
  uint64_t seed = 7;
  int concepts = 32;
  int patch_dim = 16;
  int patches = 16;
  double noise = 0.05;
  std::vector<LanguageSpec> languages;
  int pretrain_pairs = 5000;
  int translation_pairs = 2000;
  int image_text_pairs = 1000;

  void validate() const;
  bool operator==(const WorldConfig&) const = default;
};

enum class Split { Train, Dev, Test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct SampleRecord {
  long id = 0;
  Split split = Split::Train;
  std::vector<int> concepts;
  std::optional<Tensor> image;  // [patches x patch_dim]
  std::map<std::string, std::vector<std::string>> text;  // tag -> tokens
};

using Corpus = std::vector<SampleRecord>;

std::vector<const SampleRecord*> split_view(const Corpus& corpus, Split s);

// Seeded universe of concepts with visual prototypes and cipher languages.
// Everything derived from it is a pure function of (config, arguments), so
// regeneration is byte-identical.
class SyntheticWorld {
 public:
  static SyntheticWorld build(const WorldConfig& cfg);

  const WorldConfig& config() const { return cfg_; }
  const Tensor& prototype(int concept_id) const;
  double min_prototype_distance() const;

  // Native lexicon: function words then one word per concept, fixed order.
  std::vector<std::string> native_lexicon() const;
  std::vector<std::string> surface_lexicon(const std::string& lang) const;
  const std::string& concept_word(int concept_id) const;

  std::vector<std::string> utter(std::span<const int> concepts,
                                 const std::string& lang) const;
  std::vector<std::string> decode(std::span<const std::string> tokens,
                                  const std::string& lang) const;

  Tensor render_image(std::span<const int> concepts, uint64_t sample_seed) const;

  Corpus gen_parallel_corpus(std::span<const std::string> langs, int n, uint64_t seed) const;
  Corpus gen_image_text_corpus(std::span<const std::string> langs, int n,
                               uint64_t seed) const;

 private:
  const LanguageSpec& spec(const std::string& tag) const;
  std::vector<std::string> apply_order(std::vector<std::string> tokens,
                                       const LanguageSpec& lang, bool inverse) const;
  std::vector<int> sample_concepts(class Rng& rng) const;
  void assign_splits(Corpus& corpus, uint64_t seed) const;

  WorldConfig cfg_;
  std::vector<Tensor> prototypes_;
  std::vector<std::string> concept_words_;
  std::vector<std::string> function_words_;
  // Per language: native word -> surface form and its inverse.
  std::map<std::string, std::map<std::string, std::string>> encode_maps_;
  std::map<std::string, std::map<std::string, std::string>> decode_maps_;
};

}  // namespace mla
