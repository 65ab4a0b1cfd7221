#include "mla/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "mla/corpus_io.hpp"
#include "mla/digest.hpp"
#include "mla/errors.hpp"
#include "mla/rng.hpp"

namespace mla::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

std::optional<std::string> read_text_if_exists(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_config_echo(const RunConfig& cfg, const fs::path& run_dir) {
  write_text(run_dir / "config.json", echo_run_config(cfg));
}

// Languages a trained pipeline touches: union of all stage language lists.
std::vector<std::string> scheduled_languages(const RunConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& s : cfg.stages)
    for (const auto& l : s.languages)
      if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
  return out;
}

std::vector<std::string> sorted_tokens(const Corpus& corpus, const std::string& tag) {
  std::set<std::string> toks;
  for (const auto& rec : corpus) {
    auto it = rec.text.find(tag);
    if (it != rec.text.end()) toks.insert(it->second.begin(), it->second.end());
  }
  return {toks.begin(), toks.end()};
}

Model build_fresh_model(const RunConfig& cfg, const Corpus& native_corpus, uint64_t seed) {
  auto lexicon = sorted_tokens(native_corpus, kNativeTag);
  if (lexicon.empty()) raise(ErrorCode::Data, "native corpus has no text");
  return Model(cfg.model, lexicon, seed);
}

void register_scheduled_languages(Model& model, const RunConfig& cfg,
                                  const TrainingData& data,
                                  const std::vector<std::string>& langs) {
  for (const auto& lang : langs) {
    if (model.has_language(lang)) continue;
    auto it = data.languages.find(lang);
    if (it == data.languages.end()) raise(ErrorCode::Data, "no corpora for '" + lang + "'");
    std::set<std::string> toks;
    for (const Corpus* c : {&it->second.translations, &it->second.image_text})
      for (const auto& rec : *c) {
        auto t = rec.text.find(lang);
        if (t != rec.text.end()) toks.insert(t->second.begin(), t->second.end());
      }
    std::vector<std::string> lexicon(toks.begin(), toks.end());
    uint64_t seed = 0;
    for (const auto& l : cfg.world.languages)
      if (l.tag == lang) seed = l.seed;
    model.add_language(lang, lexicon, seed);
  }
}

const StageConfig& stage_of_kind(const RunConfig& cfg, StageKind kind) {
  for (const auto& s : cfg.stages)
    if (s.kind == kind) return s;
  raise(ErrorCode::Config,
        std::string("config has no stage of kind ") + stage_kind_name(kind));
}

json reports_json(const std::vector<TrainReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(train_report_to_json(r));
  return arr;
}

}  // namespace

fs::path create_run_dir(const RunConfig& cfg, const std::string& command,
                        const std::optional<fs::path>& out_base) {
  const fs::path base = out_base.value_or(fs::path(cfg.paths.runs));
  const std::string name =
      command + "-" + hex64(config_hash(cfg)).substr(8) + "-" + timestamp_now();
  fs::path dir = base / name;
  // Run directories are write-once; disambiguate a same-second rerun.
  int suffix = 0;
  while (fs::exists(dir)) dir = base / (name + "-" + std::to_string(++suffix));
  fs::create_directories(dir);
  return dir;
}

fs::path corpora_dir(const RunConfig& cfg) { return cfg.paths.corpora; }

fs::path pretrain_corpus_path(const RunConfig& cfg) {
  return corpora_dir(cfg) / "pretrain.jsonl";
}

fs::path translation_corpus_path(const RunConfig& cfg, const std::string& lang) {
  return corpora_dir(cfg) / ("nlt_" + lang + ".jsonl");
}

fs::path image_text_corpus_path(const RunConfig& cfg, const std::string& lang) {
  return corpora_dir(cfg) / ("le_" + lang + ".jsonl");
}

json world_gen(const RunConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  write_config_echo(cfg, run_dir);
  SyntheticWorld world = SyntheticWorld::build(cfg.world);
  fs::create_directories(corpora_dir(cfg));

  Rng root(cfg.world.seed);
  json files = json::array();
  int reused = 0;

  auto emit = [&](const fs::path& path, const Corpus& corpus) {
    const std::string text = corpus_to_jsonl(corpus);
    if (auto existing = read_text_if_exists(path)) {
      if (*existing == text) {
        ++reused;
        files.push_back(json{{"path", path.string()}, {"records", corpus.size()}, {"reused", true}});
        return;
      }
      raise(ErrorCode::Io, "refusing to overwrite existing corpus " + path.string());
    }
    write_text(path, text);
    files.push_back(json{{"path", path.string()}, {"records", corpus.size()}, {"reused", false}});
  };

  // Native pre-training corpus carries image-text pairs in the native
  // language only; per-language corpora carry that language plus native.
  emit(pretrain_corpus_path(cfg),
       world.gen_image_text_corpus({}, cfg.world.pretrain_pairs,
                                   root.fork("pretrain").next_u64()));
  for (const auto& lang : cfg.world.languages) {
    std::vector<std::string> tags = {lang.tag};
    emit(translation_corpus_path(cfg, lang.tag),
         world.gen_parallel_corpus(tags, cfg.world.translation_pairs,
                                   root.fork("nlt:" + lang.tag).next_u64()));
    emit(image_text_corpus_path(cfg, lang.tag),
         world.gen_image_text_corpus(tags, cfg.world.image_text_pairs,
                                     root.fork("le:" + lang.tag).next_u64()));
  }
  json out{{"command", "world-gen"},
           {"run_dir", run_dir.string()},
           {"corpora_dir", corpora_dir(cfg).string()},
           {"files", std::move(files)},
           {"reused", reused},
           {"min_prototype_distance", world.min_prototype_distance()}};
  write_text(run_dir / "report.json", out.dump(2) + "\n");
  return out;
}

TrainingData load_training_data(const RunConfig& cfg,
                                const std::vector<std::string>& languages,
                                bool need_translations, bool need_images) {
  TrainingData data;
  data.native_image_text = read_corpus(pretrain_corpus_path(cfg));
  for (const auto& lang : languages) {
    LanguageData ld;
    if (need_translations) ld.translations = read_corpus(translation_corpus_path(cfg, lang));
    if (need_images) ld.image_text = read_corpus(image_text_corpus_path(cfg, lang));
    data.languages[lang] = std::move(ld);
  }
  return data;
}

json run_pretrain(const RunConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  write_config_echo(cfg, run_dir);
  const StageConfig& stage = stage_of_kind(cfg, StageKind::VlpPretrain);
  Corpus native = read_corpus(pretrain_corpus_path(cfg));
  Model model = build_fresh_model(cfg, native, stage.seed);
  TrainReport report = pretrain_vlp(model, native, stage, cfg.loss);
  const fs::path ckpt = run_dir / "checkpoint";
  model.save(ckpt);
  report.checkpoint_path = ckpt.string();
  json out{{"command", "pretrain"},
           {"run_dir", run_dir.string()},
           {"checkpoint", ckpt.string()},
           {"reports", reports_json({report})}};
  write_text(run_dir / "report.json", out.dump(2) + "\n");
  return out;
}

json run_stage_cmd(const RunConfig& cfg, StageKind kind, const fs::path& checkpoint,
                   const fs::path& run_dir) {
  cfg.validate();
  write_config_echo(cfg, run_dir);
  const StageConfig& stage = stage_of_kind(cfg, kind);
  Model model = Model::load(checkpoint);
  const auto langs = cfg.effective_languages(stage.languages);
  if (langs.empty()) raise(ErrorCode::Config, "no languages selected for stage");
  StageConfig effective = stage;
  effective.languages = langs;
  const bool needs_translations = kind == StageKind::Nlt || kind == StageKind::Joint;
  const bool needs_images = kind == StageKind::Le || kind == StageKind::Joint;
  TrainingData data = load_training_data(cfg, langs, needs_translations, needs_images);
  register_scheduled_languages(model, cfg, data, langs);
  TrainReport report;
  switch (kind) {
    case StageKind::Nlt: report = run_nlt_stage(model, data, effective, cfg.loss); break;
    case StageKind::Le: report = run_le_stage(model, data, effective, cfg.loss); break;
    case StageKind::Joint: report = run_joint_stage(model, data, effective, cfg.loss); break;
    case StageKind::VlpPretrain:
      raise(ErrorCode::Config, "use the pretrain command for pre-training");
  }
  const fs::path ckpt = run_dir / "checkpoint";
  model.save(ckpt);
  report.checkpoint_path = ckpt.string();
  json out{{"command", std::string("train-") + stage_kind_name(kind)},
           {"run_dir", run_dir.string()},
           {"checkpoint", ckpt.string()},
           {"reports", reports_json({report})}};
  write_text(run_dir / "report.json", out.dump(2) + "\n");
  return out;
}

json run_schedule_cmd(const RunConfig& cfg, const std::optional<fs::path>& checkpoint,
                      const fs::path& run_dir) {
  cfg.validate();
  validate_schedule(cfg.stages);
  write_config_echo(cfg, run_dir);

  const bool fresh = cfg.stages.front().kind == StageKind::VlpPretrain;
  if (!fresh && !checkpoint)
    raise(ErrorCode::Config, "schedule does not pre-train; --checkpoint is required");

  const auto langs = cfg.effective_languages(scheduled_languages(cfg));
  TrainingData data = load_training_data(cfg, langs, true, true);

  std::optional<Model> model;
  if (fresh) {
    model.emplace(build_fresh_model(cfg, data.native_image_text, cfg.stages.front().seed));
  } else {
    model.emplace(Model::load(*checkpoint));
  }
  register_scheduled_languages(*model, cfg, data, langs);

  std::vector<TrainReport> reports;
  int index = 0;
  for (const auto& stage : cfg.stages) {
    StageConfig effective = stage;
    if (stage.kind != StageKind::VlpPretrain)
      effective.languages = cfg.effective_languages(stage.languages);
    std::vector<StageConfig> one = {effective};
    auto rs = run_schedule(*model, data, one, cfg.loss);
    const fs::path ckpt =
        run_dir / ("stage" + std::to_string(index) + "-" + stage_kind_name(stage.kind)) /
        "checkpoint";
    model->save(ckpt);
    rs.front().checkpoint_path = ckpt.string();
    reports.push_back(std::move(rs.front()));
    ++index;
  }
  const fs::path final_ckpt = run_dir / "checkpoint";
  model->save(final_ckpt);

  json out{{"command", "run-schedule"},
           {"run_dir", run_dir.string()},
           {"checkpoint", final_ckpt.string()},
           {"reports", reports_json(reports)}};
  write_text(run_dir / "report.json", out.dump(2) + "\n");
  return out;
}

json run_extend(const RunConfig& cfg, const fs::path& checkpoint, const std::string& language,
                bool rows_only, bool with_le, const fs::path& run_dir) {
  cfg.validate();
  write_config_echo(cfg, run_dir);
  Model model = Model::load(checkpoint);

  LanguageData data;
  data.translations = read_corpus(translation_corpus_path(cfg, language));
  data.image_text = read_corpus(image_text_corpus_path(cfg, language));

  StageConfig nlt = stage_of_kind(cfg, StageKind::Nlt);
  std::optional<StageConfig> le;
  if (with_le) le = stage_of_kind(cfg, StageKind::Le);

  uint64_t seed = 0;
  for (const auto& l : cfg.world.languages)
    if (l.tag == language) seed = l.seed;

  auto reports = extend_language(model, language, data, nlt, le,
                                 rows_only ? FreezePolicy::RowsOnly : FreezePolicy::FullEmbedding,
                                 cfg.loss, seed);
  const fs::path ckpt = run_dir / "checkpoint";
  model.save(ckpt);
  for (auto& r : reports) r.checkpoint_path = ckpt.string();
  json out{{"command", "extend"},
           {"run_dir", run_dir.string()},
           {"language", language},
           {"policy", rows_only ? "rows-only" : "full-embedding"},
           {"checkpoint", ckpt.string()},
           {"reports", reports_json(reports)}};
  write_text(run_dir / "report.json", out.dump(2) + "\n");
  return out;
}

json run_eval(const RunConfig& cfg, const fs::path& checkpoint, const std::string& split,
              const std::optional<fs::path>& csv_path, const fs::path& run_dir) {
  cfg.validate();
  write_config_echo(cfg, run_dir);
  Model model = Model::load(checkpoint);
  const Split sp = split_from_name(split);

  std::vector<std::string> langs = {kNativeTag};
  for (const auto& l : model.languages()) langs.push_back(l);
  langs = cfg.effective_languages(langs);
  if (langs.empty()) raise(ErrorCode::Config, "no languages selected for eval");

  json arr = json::array();
  std::string csv = "language,split,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,ar\n";
  for (const auto& lang : langs) {
    Corpus corpus = lang == kNativeTag
                        ? read_corpus(pretrain_corpus_path(cfg))
                        : read_corpus(image_text_corpus_path(cfg, lang));
    RetrievalReport rep = retrieval_eval(model, corpus, sp, lang);
    arr.push_back(retrieval_report_to_json(rep));
    csv += retrieval_report_csv_row(rep);
  }
  if (csv_path) write_text(*csv_path, csv);
  write_text(run_dir / "eval.csv", csv);
  json out{{"command", "eval"},
           {"run_dir", run_dir.string()},
           {"split", split},
           {"reports", std::move(arr)}};
  write_text(run_dir / "report.json", out.dump(2) + "\n");
  return out;
}

json run_export(const RunConfig& cfg, const fs::path& checkpoint, const std::string& split,
                const fs::path& tsv_path, const fs::path& run_dir) {
  cfg.validate();
  write_config_echo(cfg, run_dir);
  Model model = Model::load(checkpoint);
  const Split sp = split_from_name(split);

  std::vector<std::string> langs = {kNativeTag};
  for (const auto& l : model.languages()) langs.push_back(l);
  langs = cfg.effective_languages(langs);

  // Export rows come from each language's own evaluation corpus plus the
  // native corpus; records are the split's, in id order.
  std::ostringstream tsv;
  size_t rows = 0;
  for (const auto& lang : langs) {
    Corpus corpus = lang == kNativeTag
                        ? read_corpus(pretrain_corpus_path(cfg))
                        : read_corpus(image_text_corpus_path(cfg, lang));
    Corpus filtered;
    for (auto& rec : corpus)
      if (rec.split == sp) filtered.push_back(std::move(rec));
    std::vector<std::string> one = {lang};
    export_embeddings(model, filtered, one, tsv);
    rows += filtered.size() * 2;  // image + text per record
  }
  write_text(tsv_path, tsv.str());
  json out{{"command", "export-embeddings"},
           {"run_dir", run_dir.string()},
           {"tsv", tsv_path.string()},
           {"rows", rows}};
  write_text(run_dir / "report.json", out.dump(2) + "\n");
  return out;
}

json grad_check_report() {
  GradCheckReport rep = run_grad_check_battery();
  json sections = json::object();
  for (const auto& [name, value] : rep.sections) sections[name] = value;
  return json{{"command", "grad-check"},
              {"sections", std::move(sections)},
              {"max_rel_error", rep.max_rel_error},
              {"wall_seconds", rep.wall_seconds},
              {"threshold", 1e-4},
              {"pass", rep.max_rel_error < 1e-4}};
}

json train_report_to_json(const TrainReport& r) {
  json digests_before = json::object(), digests_after = json::object();
  for (const auto& [k, v] : r.frozen_digest_before) digests_before[k] = hex64(v);
  for (const auto& [k, v] : r.frozen_digest_after) digests_after[k] = hex64(v);
  json lang_loss = json::object();
  for (const auto& [k, v] : r.mean_language_loss) lang_loss[k] = v;
  return json{{"stage", r.stage},
              {"steps", r.steps},
              {"final_loss", r.loss_trace.empty() ? 0.0 : r.loss_trace.back()},
              {"mean_language_loss", std::move(lang_loss)},
              {"frozen_digest_before", std::move(digests_before)},
              {"frozen_digest_after", std::move(digests_after)},
              {"wall_seconds", r.wall_seconds},
              {"checkpoint", r.checkpoint_path}};
}

json retrieval_report_to_json(const RetrievalReport& r) {
  return json{{"language", r.language},
              {"split", r.split},
              {"candidates", r.candidates},
              {"recall_i2t", {r.recall_i2t[0], r.recall_i2t[1], r.recall_i2t[2]}},
              {"recall_t2i", {r.recall_t2i[0], r.recall_t2i[1], r.recall_t2i[2]}},
              {"average_recall", r.average_recall}};
}

std::string retrieval_report_csv_row(const RetrievalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.language << ',' << r.split;
  for (double v : r.recall_i2t) os << ',' << v;
  for (double v : r.recall_t2i) os << ',' << v;
  os << ',' << r.average_recall << "\n";
  return os.str();
}

}  // namespace mla::pipeline
