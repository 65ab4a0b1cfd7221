#include "mla/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mla/errors.hpp"
#include "mla/rng.hpp"

namespace mla {

namespace {
constexpr double kLnEps = 1e-5;

void fill_normal(Tensor& t, Rng rng, double std) {
  for (size_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * std);
}
}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) raise(ErrorCode::Config, std::string("model config: ") + what + " must be >= 1");
  };
  positive(num_layers, "num_layers");
  positive(model_dim, "model_dim");
  positive(num_heads, "num_heads");
  positive(ffn_dim, "ffn_dim");
  positive(proj_dim, "proj_dim");
  positive(acquirer_hidden, "acquirer_hidden");
  positive(embed_dim, "embed_dim");
  positive(max_text_len, "max_text_len");
  positive(patch_count, "patch_count");
  positive(patch_dim, "patch_dim");
  if (model_dim % num_heads != 0)
    raise(ErrorCode::Config, "model config: model_dim must be divisible by num_heads");
}

Vocab::Vocab() {
  tokens_ = {kSosToken, kEosToken};
  index_[kSosToken] = kSos;
  index_[kEosToken] = kEos;
}

int Vocab::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  int id = size();
  tokens_.push_back(token);
  index_[token] = id;
  return id;
}

std::optional<int> Vocab::lookup(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocab::require(const std::string& token) const {
  auto id = lookup(token);
  if (!id) raise(ErrorCode::Vocab, "unknown token: " + token);
  return *id;
}

Model::Model(ModelConfig cfg, std::span<const std::string> native_words, uint64_t seed,
             Dtype dtype)
    : cfg_(cfg), dtype_(dtype) {
  cfg_.validate();
  for (const auto& w : native_words) native_vocab_.add(w);
  init_params(seed);
  wire();
}

void Model::init_params(uint64_t seed) {
  Rng root(seed);
  const int d = cfg_.model_dim;
  const double attn_std = 0.5 / std::sqrt(static_cast<double>(d));
  const double ffn_out_std = 0.5 / std::sqrt(static_cast<double>(cfg_.ffn_dim));

  auto normal = [&](std::string name, Component c, std::vector<int> shape, double std,
                    bool row_sparse = false) {
    Tensor t(std::move(shape), dtype_);
    fill_normal(t, root.fork(name), std);
    reg_.add(std::move(name), c, "", std::move(t), row_sparse);
  };
  auto zeros = [&](std::string name, Component c, std::vector<int> shape) {
    reg_.add(std::move(name), c, "", Tensor(std::move(shape), dtype_));
  };
  auto ones = [&](std::string name, Component c, std::vector<int> shape) {
    Tensor t(std::move(shape), dtype_);
    t.fill(1.0);
    reg_.add(std::move(name), c, "", std::move(t));
  };
  auto layer_block = [&](const std::string& prefix, Component c) {
    normal(prefix + ".attn.wq", c, {d, d}, attn_std);
    zeros(prefix + ".attn.bq", c, {d});
    normal(prefix + ".attn.wk", c, {d, d}, attn_std);
    zeros(prefix + ".attn.bk", c, {d});
    normal(prefix + ".attn.wv", c, {d, d}, attn_std);
    zeros(prefix + ".attn.bv", c, {d});
    normal(prefix + ".attn.wo", c, {d, d}, attn_std);
    zeros(prefix + ".attn.bo", c, {d});
    ones(prefix + ".ln1.gain", c, {d});
    zeros(prefix + ".ln1.bias", c, {d});
    ones(prefix + ".ln2.gain", c, {d});
    zeros(prefix + ".ln2.bias", c, {d});
    normal(prefix + ".ffn.w1", c, {d, cfg_.ffn_dim}, attn_std);
    zeros(prefix + ".ffn.b1", c, {cfg_.ffn_dim});
    normal(prefix + ".ffn.w2", c, {cfg_.ffn_dim, d}, ffn_out_std);
    zeros(prefix + ".ffn.b2", c, {d});
  };

  normal("text.embed", Component::TextEncoder, {native_vocab_.size(), d}, 0.02, true);
  normal("text.pos", Component::TextEncoder, {cfg_.max_text_len, d}, 0.01);
  for (int i = 0; i < cfg_.num_layers; ++i)
    layer_block("text.l" + std::to_string(i), Component::TextEncoder);

  normal("vision.patch_proj", Component::VisionEncoder, {cfg_.patch_dim, d},
         0.5 / std::sqrt(static_cast<double>(cfg_.patch_dim)));
  normal("vision.class", Component::VisionEncoder, {1, d}, 0.02);
  normal("vision.pos", Component::VisionEncoder, {cfg_.patch_count + 1, d}, 0.01);
  for (int i = 0; i < cfg_.num_layers; ++i)
    layer_block("vision.l" + std::to_string(i), Component::VisionEncoder);

  normal("heads.wa", Component::Heads, {d, cfg_.proj_dim}, attn_std);
  normal("heads.wb", Component::Heads, {d, cfg_.proj_dim}, attn_std);

  // The non-native table starts with the two reserved marker rows and grows
  // as languages contribute tokens.
  normal("nonnative.embed", Component::NonNativeEmbedding,
         {nonnative_vocab_.size(), cfg_.embed_dim}, 0.02, true);
  normal("nonnative.proj", Component::NonNativeEmbedding, {cfg_.embed_dim, d},
         0.5 / std::sqrt(static_cast<double>(cfg_.embed_dim)));
}

void Model::wire() {
  auto layer_ptrs = [&](const std::string& prefix) {
    LayerW w;
    w.wq = &reg_.at(prefix + ".attn.wq");
    w.bq = &reg_.at(prefix + ".attn.bq");
    w.wk = &reg_.at(prefix + ".attn.wk");
    w.bk = &reg_.at(prefix + ".attn.bk");
    w.wv = &reg_.at(prefix + ".attn.wv");
    w.bv = &reg_.at(prefix + ".attn.bv");
    w.wo = &reg_.at(prefix + ".attn.wo");
    w.bo = &reg_.at(prefix + ".attn.bo");
    w.ln1g = &reg_.at(prefix + ".ln1.gain");
    w.ln1b = &reg_.at(prefix + ".ln1.bias");
    w.ln2g = &reg_.at(prefix + ".ln2.gain");
    w.ln2b = &reg_.at(prefix + ".ln2.bias");
    w.w1 = &reg_.at(prefix + ".ffn.w1");
    w.b1 = &reg_.at(prefix + ".ffn.b1");
    w.w2 = &reg_.at(prefix + ".ffn.w2");
    w.b2 = &reg_.at(prefix + ".ffn.b2");
    return w;
  };
  text_layers_.clear();
  vision_layers_.clear();
  for (int i = 0; i < cfg_.num_layers; ++i) {
    text_layers_.push_back(layer_ptrs("text.l" + std::to_string(i)));
    vision_layers_.push_back(layer_ptrs("vision.l" + std::to_string(i)));
  }
  acq_.clear();
  for (const auto& lang : languages_) {
    std::vector<AcqW> stack;
    for (int i = 0; i < cfg_.num_layers; ++i) {
      std::string prefix = "acq." + lang + ".l" + std::to_string(i);
      AcqW a;
      a.wd = &reg_.at(prefix + ".down.w");
      a.bd = &reg_.at(prefix + ".down.b");
      a.wu = &reg_.at(prefix + ".up.w");
      a.bu = &reg_.at(prefix + ".up.b");
      stack.push_back(a);
    }
    acq_[lang] = std::move(stack);
  }
}

std::vector<int> Model::add_tokens(std::span<const std::string> words, uint64_t seed) {
  ParamEntry& u = reg_.at("nonnative.embed");
  Rng root(seed);
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) {
    if (auto existing = nonnative_vocab_.lookup(w)) {
      ids.push_back(*existing);
      continue;
    }
    int id = nonnative_vocab_.add(w);
    Tensor row({1, cfg_.embed_dim}, dtype_);
    fill_normal(row, root.fork("u:" + w), 0.02);
    u.tensor.append_rows(row);
    ids.push_back(id);
  }
  return ids;
}

void Model::register_language(const std::string& tag, uint64_t seed) {
  if (tag.empty() || tag == "native")
    raise(ErrorCode::Language, "invalid language tag: '" + tag + "'");
  if (has_language(tag)) raise(ErrorCode::Language, "language already registered: " + tag);
  Rng root(seed);
  const int d = cfg_.model_dim, h = cfg_.acquirer_hidden;
  std::vector<AcqW> stack;
  for (int i = 0; i < cfg_.num_layers; ++i) {
    std::string prefix = "acq." + tag + ".l" + std::to_string(i);
    Tensor wd({d, h}, dtype_);
    fill_normal(wd, root.fork(prefix + ".down.w"), 0.02);
    AcqW a;
    a.wd = &reg_.add(prefix + ".down.w", Component::Acquirer, tag, std::move(wd));
    a.bd = &reg_.add(prefix + ".down.b", Component::Acquirer, tag, Tensor({h}, dtype_));
    a.wu = &reg_.add(prefix + ".up.w", Component::Acquirer, tag, Tensor({h, d}, dtype_));
    a.bu = &reg_.add(prefix + ".up.b", Component::Acquirer, tag, Tensor({d}, dtype_));
    a.wd->trainable = a.bd->trainable = a.wu->trainable = a.bu->trainable = true;
    stack.push_back(a);
  }
  languages_.push_back(tag);
  acq_[tag] = std::move(stack);
}

void Model::add_language(const std::string& tag, std::span<const std::string> surface_words,
                         uint64_t seed) {
  add_tokens(surface_words, seed);
  register_language(tag, seed);
}

bool Model::has_language(const std::string& tag) const { return acq_.count(tag) != 0; }

const std::vector<Model::AcqW>& Model::acquirers(const std::string& lang) const {
  auto it = acq_.find(lang);
  if (it == acq_.end()) raise(ErrorCode::Language, "unknown language: " + lang);
  return it->second;
}

std::vector<int> Model::native_ids(std::span<const std::string> words) const {
  std::vector<int> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(Vocab::kSos);
  for (const auto& w : words) ids.push_back(native_vocab_.require(w));
  ids.push_back(Vocab::kEos);
  validate_text(ids, native_vocab_);
  return ids;
}

std::vector<int> Model::nonnative_ids(std::span<const std::string> words) const {
  std::vector<int> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(Vocab::kSos);
  for (const auto& w : words) ids.push_back(nonnative_vocab_.require(w));
  ids.push_back(Vocab::kEos);
  validate_text(ids, nonnative_vocab_);
  return ids;
}

void Model::validate_text(std::span<const int> ids, const Vocab& vocab) const {
  if (ids.size() < 2 || ids.front() != Vocab::kSos || ids.back() != Vocab::kEos)
    raise(ErrorCode::Contract, "token sequence must be framed by [SOS]/[EOS]");
  if (static_cast<int>(ids.size()) > cfg_.max_text_len)
    raise(ErrorCode::Length, "sequence length " + std::to_string(ids.size()) +
                                 " exceeds max_text_len " + std::to_string(cfg_.max_text_len));
  for (int id : ids)
    if (id < 0 || id >= vocab.size())
      raise(ErrorCode::Vocab, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(vocab.size()));
}

Var Model::param(Tape& t, const std::string& name) { return lvar(t, &reg_.at(name)); }

Var Model::transformer_layer(Tape& t, Var x, const LayerW& w, bool causal) {
  Var a = t.layer_norm(x, lvar(t, w.ln1g), lvar(t, w.ln1b), kLnEps);
  Var q = t.affine(a, lvar(t, w.wq), lvar(t, w.bq));
  Var k = t.affine(a, lvar(t, w.wk), lvar(t, w.bk));
  Var v = t.affine(a, lvar(t, w.wv), lvar(t, w.bv));
  Var ctx = t.attention(q, k, v, cfg_.num_heads, causal);
  Var x1 = t.add(x, t.affine(ctx, lvar(t, w.wo), lvar(t, w.bo)));
  Var a2 = t.layer_norm(x1, lvar(t, w.ln2g), lvar(t, w.ln2b), kLnEps);
  Var f = t.affine(t.gelu(t.affine(a2, lvar(t, w.w1), lvar(t, w.b1))), lvar(t, w.w2),
                   lvar(t, w.b2));
  return t.add(x1, f);
}

Var Model::build_native_text(Tape& t, std::span<const int> ids) {
  validate_text(ids, native_vocab_);
  const int s = static_cast<int>(ids.size());
  Var emb = t.embedding_rows(param(t, "text.embed"), {ids.begin(), ids.end()});
  Var x = t.add(emb, t.slice_rows(param(t, "text.pos"), 0, s));
  for (int i = 0; i < cfg_.num_layers; ++i)
    x = transformer_layer(t, x, text_layers_[static_cast<size_t>(i)], true);
  return t.matmul(t.row(x, s - 1), param(t, "heads.wa"));
}

Var Model::build_nonnative_text(Tape& t, std::span<const int> ids, const std::string& lang,
                                bool bypass_acquirers) {
  const std::vector<AcqW>* stack = nullptr;
  if (!bypass_acquirers) stack = &acquirers(lang);
  validate_text(ids, nonnative_vocab_);
  const int s = static_cast<int>(ids.size());
  Var emb = t.embedding_rows(param(t, "nonnative.embed"), {ids.begin(), ids.end()});
  Var proj = t.matmul(emb, param(t, "nonnative.proj"));
  Var x = t.add(proj, t.slice_rows(param(t, "text.pos"), 0, s));
  for (int i = 0; i < cfg_.num_layers; ++i) {
    x = transformer_layer(t, x, text_layers_[static_cast<size_t>(i)], true);
    if (stack) {
      const AcqW& a = (*stack)[static_cast<size_t>(i)];
      Var hdn = t.relu(t.affine(x, lvar(t, a.wd), lvar(t, a.bd)));
      x = t.add(x, t.affine(hdn, lvar(t, a.wu), lvar(t, a.bu)));
    }
  }
  return t.matmul(t.row(x, s - 1), param(t, "heads.wa"));
}

Var Model::build_image(Tape& t, const Tensor& patches) {
  if (patches.rank() != 2 || patches.dim(0) != cfg_.patch_count ||
      patches.dim(1) != cfg_.patch_dim)
    raise(ErrorCode::Shape, "expected patches [" + std::to_string(cfg_.patch_count) + "x" +
                                std::to_string(cfg_.patch_dim) + "], got " +
                                patches.shape_str());
  Var p = t.constant(patches);
  Var pe = t.matmul(p, param(t, "vision.patch_proj"));
  Var x = t.concat_rows({param(t, "vision.class"), pe});
  x = t.add(x, t.slice_rows(param(t, "vision.pos"), 0, cfg_.patch_count + 1));
  for (int i = 0; i < cfg_.num_layers; ++i)
    x = transformer_layer(t, x, vision_layers_[static_cast<size_t>(i)], false);
  return t.matmul(t.row(x, 0), param(t, "heads.wb"));
}

Var Model::build_acquirer(Tape& t, Var x, const std::string& lang, int layer_index) {
  const auto& stack = acquirers(lang);
  if (layer_index < 0 || layer_index >= cfg_.num_layers)
    raise(ErrorCode::InvalidArgument,
          "acquirer layer index " + std::to_string(layer_index) + " out of range");
  const AcqW& a = stack[static_cast<size_t>(layer_index)];
  Var hdn = t.relu(t.affine(x, lvar(t, a.wd), lvar(t, a.bd)));
  return t.add(x, t.affine(hdn, lvar(t, a.wu), lvar(t, a.bu)));
}

Tensor Model::run_forward_only(const std::function<Var(Tape&)>& build) const {
  // Forward-only tapes never write gradients, so the parameter access below
  // is read-only despite the non-const wiring.
  Tape t(dtype_, /*record_grads=*/false);
  Var out = build(t);
  const Tensor& v = t.value(out);
  return Tensor::from({static_cast<int>(v.numel())},
                      std::vector<double>(v.data(), v.data() + v.numel()), dtype_);
}

Tensor Model::encode_native_text(std::span<const int> ids) const {
  auto* self = const_cast<Model*>(this);
  return run_forward_only([&](Tape& t) { return self->build_native_text(t, ids); });
}

Tensor Model::encode_nonnative_text(std::span<const int> ids, const std::string& lang) const {
  auto* self = const_cast<Model*>(this);
  return run_forward_only([&](Tape& t) { return self->build_nonnative_text(t, ids, lang); });
}

Tensor Model::encode_nonnative_text_bypassing_acquirers(std::span<const int> ids) const {
  auto* self = const_cast<Model*>(this);
  return run_forward_only(
      [&](Tape& t) { return self->build_nonnative_text(t, ids, "", /*bypass=*/true); });
}

Tensor Model::encode_image(const Tensor& patches) const {
  auto* self = const_cast<Model*>(this);
  return run_forward_only([&](Tape& t) { return self->build_image(t, patches); });
}

Tensor Model::acquirer_forward(const Tensor& x, const std::string& lang,
                               int layer_index) const {
  auto* self = const_cast<Model*>(this);
  Tape t(dtype_, /*record_grads=*/false);
  Var out = self->build_acquirer(t, t.constant(x), lang, layer_index);
  return t.value(out);
}

int Model::set_trainable(const Selector& sel, bool flag) {
  int touched = 0;
  std::set<std::string> langs(sel.acquirer_languages.begin(), sel.acquirer_languages.end());
  for (const auto& lang : langs)
    if (!has_language(lang)) raise(ErrorCode::Language, "unknown language: " + lang);
  bool all_acquirers = std::find(sel.components.begin(), sel.components.end(),
                                 Component::Acquirer) != sel.components.end();
  for (size_t i = 0; i < reg_.size(); ++i) {
    ParamEntry& e = reg_.entry(i);
    bool match = false;
    if (e.component == Component::Acquirer)
      match = all_acquirers || langs.count(e.language) != 0;
    else
      match = std::find(sel.components.begin(), sel.components.end(), e.component) !=
              sel.components.end();
    if (match) {
      e.trainable = flag;
      ++touched;
    }
  }
  if (sel.embedding_rows) {
    ParamEntry& u = reg_.at("nonnative.embed");
    for (int r : *sel.embedding_rows)
      if (r < 0 || r >= u.tensor.dim(0))
        raise(ErrorCode::InvalidArgument, "embedding row " + std::to_string(r) + " out of range");
    u.trainable = flag;
    if (flag) {
      std::vector<uint8_t> mask(static_cast<size_t>(u.tensor.dim(0)), 0);
      for (int r : *sel.embedding_rows) mask[static_cast<size_t>(r)] = 1;
      u.row_mask = std::move(mask);
    } else {
      u.row_mask.reset();
    }
    ++touched;
  }
  if (touched == 0) raise(ErrorCode::InvalidArgument, "selector matched no parameters");
  return touched;
}

void Model::freeze_all() {
  for (size_t i = 0; i < reg_.size(); ++i) {
    reg_.entry(i).trainable = false;
    reg_.entry(i).row_mask.reset();
  }
}

void Model::set_embedding_row_mask(const std::optional<std::vector<int>>& rows) {
  ParamEntry& u = reg_.at("nonnative.embed");
  if (!rows) {
    u.row_mask.reset();
    return;
  }
  std::vector<uint8_t> mask(static_cast<size_t>(u.tensor.dim(0)), 0);
  for (int r : *rows) {
    if (r < 0 || r >= u.tensor.dim(0))
      raise(ErrorCode::InvalidArgument, "embedding row " + std::to_string(r) + " out of range");
    mask[static_cast<size_t>(r)] = 1;
  }
  u.row_mask = std::move(mask);
}

uint64_t Model::component_digest(Component c) const {
  return reg_.digest([c](const ParamEntry& e) { return e.component == c; });
}

uint64_t Model::acquirer_digest(const std::string& lang) const {
  return reg_.digest([&](const ParamEntry& e) {
    return e.component == Component::Acquirer && e.language == lang;
  });
}

size_t Model::trainable_value_count() const {
  return reg_.count_values([](const ParamEntry& e) { return e.trainable; });
}

long long Model::acquirer_param_count(int layers, int dim, int hidden) {
  return static_cast<long long>(layers) *
         (2LL * dim * hidden + hidden + dim);
}

}  // namespace mla
