#include "mla/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mla/digest.hpp"
#include "mla/errors.hpp"
#include "mla/rng.hpp"

namespace mla {

using nlohmann::json;

namespace {

// Strict object walker: every key must be consumed exactly once.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) raise(ErrorCode::Config, path_ + ": expected an object");
  }
  ~Fields() = default;

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& get(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = get(key).get<T>();
    } catch (const json::exception&) {
      raise(ErrorCode::Config, path_ + "." + key + ": wrong type");
    }
  }
  void finish() {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      if (!seen_.count(key))
        raise(ErrorCode::Config, "unknown key " + path_ + "." + key);
    }
  }
  std::string sub(const std::string& key) const { return path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

LanguageSpec parse_language(const json& j, const std::string& path) {
  Fields f(j, path);
  LanguageSpec l;
  f.read("tag", l.tag);
  if (f.has("order")) l.order = order_rule_from_name(f.get("order").get<std::string>());
  f.read("seed", l.seed);
  f.read("overlap", l.overlap);
  f.finish();
  if (l.tag.empty()) raise(ErrorCode::Config, path + ".tag: required");
  return l;
}

WorldConfig parse_world(const json& j, const std::string& path, WorldConfig w) {
  Fields f(j, path);
  f.read("seed", w.seed);
  f.read("concepts", w.concepts);
  f.read("patch_dim", w.patch_dim);
  f.read("patches", w.patches);
  f.read("noise", w.noise);
  f.read("pretrain_pairs", w.pretrain_pairs);
  f.read("translation_pairs", w.translation_pairs);
  f.read("image_text_pairs", w.image_text_pairs);
  if (f.has("languages")) {
    const json& langs = f.get("languages");
    if (!langs.is_array()) raise(ErrorCode::Config, path + ".languages: expected an array");
    w.languages.clear();
    for (size_t i = 0; i < langs.size(); ++i)
      w.languages.push_back(
          parse_language(langs.at(i), path + ".languages[" + std::to_string(i) + "]"));
  }
  f.finish();
  return w;
}

ModelConfig parse_model(const json& j, const std::string& path, ModelConfig m) {
  Fields f(j, path);
  f.read("num_layers", m.num_layers);
  f.read("model_dim", m.model_dim);
  f.read("num_heads", m.num_heads);
  f.read("ffn_dim", m.ffn_dim);
  f.read("proj_dim", m.proj_dim);
  f.read("acquirer_hidden", m.acquirer_hidden);
  f.read("embed_dim", m.embed_dim);
  f.read("max_text_len", m.max_text_len);
  f.read("patch_count", m.patch_count);
  f.read("patch_dim", m.patch_dim);
  f.finish();
  return m;
}

LossConfig parse_loss(const json& j, const std::string& path, LossConfig l) {
  Fields f(j, path);
  f.read("temperature", l.temperature);
  if (f.has("nlt_objective"))
    l.nlt_objective = objective_from_name(f.get("nlt_objective").get<std::string>());
  if (f.has("le_objective"))
    l.le_objective = objective_from_name(f.get("le_objective").get<std::string>());
  f.finish();
  if (!(l.temperature > 0.0)) raise(ErrorCode::Config, path + ".temperature: must be > 0");
  return l;
}

StageConfig parse_stage(const json& j, const std::string& path) {
  Fields f(j, path);
  StageConfig s;
  if (!f.has("kind")) raise(ErrorCode::Config, path + ".kind: required");
  s.kind = stage_kind_from_name(f.get("kind").get<std::string>());
  f.read("steps", s.steps);
  f.read("lr", s.lr);
  f.read("warmup_fraction", s.warmup_fraction);
  f.read("batch", s.batch);
  f.read("languages", s.languages);
  f.read("seed", s.seed);
  if (f.has("interleave")) {
    const auto v = f.get("interleave").get<std::string>();
    if (v == "batch")
      s.interleave = Interleave::Batch;
    else if (v == "epoch")
      s.interleave = Interleave::Epoch;
    else
      raise(ErrorCode::Config, path + ".interleave: expected 'batch' or 'epoch'");
  }
  if (f.has("objective"))
    s.objective = objective_from_name(f.get("objective").get<std::string>());
  if (f.has("embedding_row_scope")) {
    try {
      s.embedding_row_scope = f.get("embedding_row_scope").get<std::vector<int>>();
    } catch (const json::exception&) {
      raise(ErrorCode::Config, path + ".embedding_row_scope: wrong type");
    }
  }
  f.read("train_embedding_proj", s.train_embedding_proj);
  f.finish();
  return s;
}

PathsConfig parse_paths(const json& j, const std::string& path, PathsConfig p) {
  Fields f(j, path);
  f.read("corpora", p.corpora);
  f.read("runs", p.runs);
  f.finish();
  return p;
}

json language_to_json(const LanguageSpec& l) {
  return json{{"tag", l.tag},
              {"order", order_rule_name(l.order)},
              {"seed", l.seed},
              {"overlap", l.overlap}};
}

json stage_to_json(const StageConfig& s) {
  json j{{"kind", stage_kind_name(s.kind)},
         {"steps", s.steps},
         {"lr", s.lr},
         {"warmup_fraction", s.warmup_fraction},
         {"batch", s.batch},
         {"languages", s.languages},
         {"seed", s.seed},
         {"interleave", s.interleave == Interleave::Batch ? "batch" : "epoch"},
         {"train_embedding_proj", s.train_embedding_proj}};
  if (s.objective) j["objective"] = objective_name(*s.objective);
  if (s.embedding_row_scope) j["embedding_row_scope"] = *s.embedding_row_scope;
  return j;
}

}  // namespace

void RunConfig::validate() const {
  world.validate();
  model.validate();
  loss.validate();
  std::set<std::string> tags;
  for (const auto& l : world.languages) tags.insert(l.tag);
  for (const auto& s : stages) {
    s.validate();
    for (const auto& lang : s.languages)
      if (!tags.count(lang))
        raise(ErrorCode::Config, "stage references unknown language '" + lang + "'");
  }
  if (language_filter)
    for (const auto& lang : *language_filter)
      if (lang != kNativeTag && !tags.count(lang))
        raise(ErrorCode::Config, "language filter references unknown language '" + lang + "'");
}

std::vector<std::string> RunConfig::effective_languages(
    const std::vector<std::string>& base) const {
  if (!language_filter) return base;
  std::vector<std::string> out;
  for (const auto& lang : base)
    if (std::find(language_filter->begin(), language_filter->end(), lang) !=
        language_filter->end())
      out.push_back(lang);
  return out;
}

RunConfig default_run_config() {
  RunConfig c;
  c.world.languages = {
      {"alpha", OrderRule::Identity, 101, 0.0},
      {"beta", OrderRule::Reversed, 102, 0.0},
      {"gamma", OrderRule::Permuted, 103, 0.0},
      {"delta", OrderRule::Identity, 104, 0.0},  // reserved for extension runs
  };
  const std::vector<std::string> trained = {"alpha", "beta", "gamma"};

  StageConfig pre;
  pre.kind = StageKind::VlpPretrain;
  pre.steps = 600;
  pre.lr = 1e-3;
  pre.batch = 32;
  pre.seed = 11;

  StageConfig nlt;
  nlt.kind = StageKind::Nlt;
  nlt.steps = 450;
  nlt.lr = 2e-3;
  nlt.batch = 32;
  nlt.languages = trained;
  nlt.seed = 12;

  StageConfig le;
  le.kind = StageKind::Le;
  le.steps = 240;
  le.lr = 5e-4;
  le.batch = 32;
  le.languages = trained;
  le.seed = 13;

  c.stages = {pre, nlt, le};
  return c;
}

RunConfig parse_run_config(const std::string& json_text) {
  std::string text = json_text;
  // An empty document means "all defaults".
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) text = "{}";
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::Config, std::string("config: ") + e.what());
  }
  RunConfig c = default_run_config();
  Fields f(j, "config");
  if (f.has("world")) c.world = parse_world(f.get("world"), "world", c.world);
  if (f.has("model")) c.model = parse_model(f.get("model"), "model", c.model);
  if (f.has("loss")) c.loss = parse_loss(f.get("loss"), "loss", c.loss);
  if (f.has("stages")) {
    const json& stages = f.get("stages");
    if (!stages.is_array()) raise(ErrorCode::Config, "stages: expected an array");
    c.stages.clear();
    for (size_t i = 0; i < stages.size(); ++i)
      c.stages.push_back(parse_stage(stages.at(i), "stages[" + std::to_string(i) + "]"));
  }
  if (f.has("paths")) c.paths = parse_paths(f.get("paths"), "paths", c.paths);
  if (f.has("seed_override")) {
    uint64_t s = 0;
    f.read("seed_override", s);
    apply_seed_override(c, s);
  }
  if (f.has("language_filter")) {
    try {
      c.language_filter = f.get("language_filter").get<std::vector<std::string>>();
    } catch (const json::exception&) {
      raise(ErrorCode::Config, "language_filter: wrong type");
    }
  }
  f.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::Io, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string echo_run_config(const RunConfig& cfg) {
  json j;
  json langs = json::array();
  for (const auto& l : cfg.world.languages) langs.push_back(language_to_json(l));
  j["world"] = json{{"seed", cfg.world.seed},
                    {"concepts", cfg.world.concepts},
                    {"patch_dim", cfg.world.patch_dim},
                    {"patches", cfg.world.patches},
                    {"noise", cfg.world.noise},
                    {"languages", std::move(langs)},
                    {"pretrain_pairs", cfg.world.pretrain_pairs},
                    {"translation_pairs", cfg.world.translation_pairs},
                    {"image_text_pairs", cfg.world.image_text_pairs}};
  j["model"] = json{{"num_layers", cfg.model.num_layers},
                    {"model_dim", cfg.model.model_dim},
                    {"num_heads", cfg.model.num_heads},
                    {"ffn_dim", cfg.model.ffn_dim},
                    {"proj_dim", cfg.model.proj_dim},
                    {"acquirer_hidden", cfg.model.acquirer_hidden},
                    {"embed_dim", cfg.model.embed_dim},
                    {"max_text_len", cfg.model.max_text_len},
                    {"patch_count", cfg.model.patch_count},
                    {"patch_dim", cfg.model.patch_dim}};
  j["loss"] = json{{"temperature", cfg.loss.temperature},
                   {"nlt_objective", objective_name(cfg.loss.nlt_objective)},
                   {"le_objective", objective_name(cfg.loss.le_objective)}};
  json stages = json::array();
  for (const auto& s : cfg.stages) stages.push_back(stage_to_json(s));
  j["stages"] = std::move(stages);
  j["paths"] = json{{"corpora", cfg.paths.corpora}, {"runs", cfg.paths.runs}};
  if (cfg.seed_override) j["seed_override"] = *cfg.seed_override;
  if (cfg.language_filter) j["language_filter"] = *cfg.language_filter;
  return j.dump(2) + "\n";
}

uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(echo_run_config(cfg)); }

void apply_seed_override(RunConfig& cfg, uint64_t seed) {
  cfg.seed_override = seed;
  cfg.world.seed = seed;
  Rng root(seed);
  for (size_t i = 0; i < cfg.stages.size(); ++i)
    cfg.stages[i].seed = root.fork("stage").fork(i).next_u64();
}

}  // namespace mla
