#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mla/registry.hpp"
#include "mla/tape.hpp"

namespace mla {

struct ModelConfig {
  int num_layers = 4;
  int model_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int proj_dim = 32;
  int acquirer_hidden = 16;
  int embed_dim = 48;  // non-native embedding width, projected to model_dim
  int max_text_len = 16;
  int patch_count = 16;
  int patch_dim = 16;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Word-level vocabulary. Ids 0/1 are the reserved sequence markers; every
// encoded sequence is framed by them.
class Vocab {
 public:
  static constexpr int kSos = 0;
  static constexpr int kEos = 1;
  static constexpr const char* kSosToken = "[SOS]";
  static constexpr const char* kEosToken = "[EOS]";

  Vocab();
  int add(const std::string& token);  // idempotent
  std::optional<int> lookup(const std::string& token) const;
  int require(const std::string& token) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

// Dual-encoder model: a text encoder and a vision encoder trained together on
// native image-text pairs, plus a shared non-native embedding block and
// per-language acquirer stacks that extend the frozen text path to new
// languages. All parameters live in the registry; encode paths are pure
// functions of the current parameter values.
class Model {
 public:
  Model(ModelConfig cfg, std::span<const std::string> native_words, uint64_t seed,
        Dtype dtype = Dtype::F32);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  Dtype dtype() const { return dtype_; }
  const Vocab& native_vocab() const { return native_vocab_; }
  const Vocab& nonnative_vocab() const { return nonnative_vocab_; }

  // Frames with [SOS]/[EOS] and validates vocabulary membership and length.
  std::vector<int> native_ids(std::span<const std::string> words) const;
  std::vector<int> nonnative_ids(std::span<const std::string> words) const;

  // Grows the shared non-native vocabulary; new embedding rows are seeded per
  // token so the result does not depend on insertion order. Returns all ids.
  std::vector<int> add_tokens(std::span<const std::string> words, uint64_t seed);
  // Creates the per-layer acquirer stack for a new language (up-projection
  // zero-initialized, so insertion is an exact identity) and marks it
  // trainable. Touches no other parameter.
  void register_language(const std::string& tag, uint64_t seed);
  void add_language(const std::string& tag, std::span<const std::string> surface_words,
                    uint64_t seed);
  bool has_language(const std::string& tag) const;
  const std::vector<std::string>& languages() const { return languages_; }

  Tensor encode_native_text(std::span<const int> ids) const;
  Tensor encode_nonnative_text(std::span<const int> ids, const std::string& lang) const;
  Tensor encode_nonnative_text_bypassing_acquirers(std::span<const int> ids) const;
  Tensor encode_image(const Tensor& patches) const;
  Tensor acquirer_forward(const Tensor& x, const std::string& lang, int layer_index) const;

  // Tape-recorded variants used by training; outputs are [1 x proj_dim].
  Var build_native_text(Tape& t, std::span<const int> ids);
  Var build_nonnative_text(Tape& t, std::span<const int> ids, const std::string& lang,
                           bool bypass_acquirers = false);
  Var build_image(Tape& t, const Tensor& patches);
  Var build_acquirer(Tape& t, Var x, const std::string& lang, int layer_index);

  ParamRegistry& registry() { return reg_; }
  const ParamRegistry& registry() const { return reg_; }

  struct Selector {
    std::vector<Component> components;           // Acquirer here means all languages
    std::vector<std::string> acquirer_languages; // specific stacks
    std::optional<std::vector<int>> embedding_rows;  // rows of the non-native table
  };
  // Returns the number of entries whose flag changed meaning was applied to;
  // raises if the selector resolves to nothing. Values are never modified.
  int set_trainable(const Selector& sel, bool flag);
  void freeze_all();
  // Restricts non-native embedding updates to the given rows (empty optional
  // lifts the restriction).
  void set_embedding_row_mask(const std::optional<std::vector<int>>& rows);

  uint64_t component_digest(Component c) const;
  uint64_t acquirer_digest(const std::string& lang) const;
  size_t trainable_value_count() const;
  static long long acquirer_param_count(int layers, int dim, int hidden);

  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);

 private:
  struct LayerW {
    ParamEntry *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    ParamEntry *ln1g, *ln1b, *ln2g, *ln2b;
    ParamEntry *w1, *b1, *w2, *b2;
  };
  struct AcqW {
    ParamEntry *wd, *bd, *wu, *bu;
  };

  Model() = default;  // checkpoint loading fills everything by hand

  void init_params(uint64_t seed);
  void wire();
  Var lvar(Tape& t, ParamEntry* e) const { return t.leaf(&e->tensor, e->trainable); }
  Var param(Tape& t, const std::string& name);
  Var transformer_layer(Tape& t, Var x, const LayerW& w, bool causal);
  void validate_text(std::span<const int> ids, const Vocab& vocab) const;
  Tensor run_forward_only(const std::function<Var(Tape&)>& build) const;
  const std::vector<AcqW>& acquirers(const std::string& lang) const;

  ModelConfig cfg_;
  Dtype dtype_ = Dtype::F32;
  ParamRegistry reg_;
  Vocab native_vocab_;
  Vocab nonnative_vocab_;
  std::vector<std::string> languages_;
  std::map<std::string, std::vector<AcqW>> acq_;
  std::vector<LayerW> text_layers_;
  std::vector<LayerW> vision_layers_;
};

// Spec'd checkpoint entry points.
inline void save_checkpoint(const Model& m, const std::filesystem::path& dir) { m.save(dir); }
inline Model load_checkpoint(const std::filesystem::path& dir) { return Model::load(dir); }

}  // namespace mla
