#include "mla/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "mla/errors.hpp"
#include "mla/rng.hpp"

namespace mla {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<size_t> train_indices(const Corpus& corpus) {
  std::vector<size_t> idx;
  for (size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].split == Split::Train) idx.push_back(i);
  if (idx.empty()) raise(ErrorCode::Data, "corpus has no training records");
  return idx;
}

std::vector<const SampleRecord*> sample_batch(const Corpus& corpus,
                                              const std::vector<size_t>& train_idx, int batch,
                                              Rng rng) {
  std::vector<const SampleRecord*> out;
  out.reserve(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i)
    out.push_back(&corpus[train_idx[rng.below(train_idx.size())]]);
  return out;
}

Tensor stack_embeddings(const std::vector<Tensor>& rows) {
  const int b = static_cast<int>(rows.size());
  const int p = static_cast<int>(rows[0].numel());
  std::vector<double> v;
  v.reserve(static_cast<size_t>(b) * p);
  for (const auto& r : rows) v.insert(v.end(), r.data(), r.data() + r.numel());
  return Tensor::from({b, p}, std::move(v), rows[0].dtype());
}

const std::vector<std::string>& record_text(const SampleRecord& rec, const std::string& tag) {
  auto it = rec.text.find(tag);
  if (it == rec.text.end())
    raise(ErrorCode::Data,
          "record " + std::to_string(rec.id) + " has no text for language '" + tag + "'");
  return it->second;
}

// Components that must not move during the acquisition stages.
const std::vector<Component> kFrozenDuringAcquisition = {
    Component::TextEncoder, Component::VisionEncoder, Component::Heads};

std::map<std::string, uint64_t> digest_components(const Model& model,
                                                  const std::vector<Component>& comps) {
  std::map<std::string, uint64_t> out;
  for (Component c : comps) out[component_name(c)] = model.component_digest(c);
  return out;
}

struct LanguageSchedule {
  std::vector<std::string> languages;
  Interleave interleave;
  int steps;

  const std::string& at(int step) const {
    const int n = static_cast<int>(languages.size());
    if (interleave == Interleave::Batch) return languages[static_cast<size_t>(step % n)];
    const int block = std::max(1, (steps + n - 1) / n);
    return languages[static_cast<size_t>(std::min(step / block, n - 1))];
  }
};

// Marks exactly the acquisition-stage trainable set: current language's
// acquirers plus the non-native embedding block, honoring the stage's
// embedding scope.
void apply_acquisition_flags(Model& model, const StageConfig& cfg, const std::string& current) {
  model.freeze_all();
  for (const auto& lang : cfg.languages) {
    Model::Selector sel;
    sel.acquirer_languages = {lang};
    model.set_trainable(sel, lang == current);
  }
  ParamEntry& u = model.registry().at("nonnative.embed");
  u.trainable = true;
  ParamEntry& we = model.registry().at("nonnative.proj");
  we.trainable = cfg.train_embedding_proj;
  model.set_embedding_row_mask(cfg.embedding_row_scope);
}

void check_frozen(const TrainReport& report) {
  for (const auto& [name, before] : report.frozen_digest_before) {
    auto it = report.frozen_digest_after.find(name);
    if (it == report.frozen_digest_after.end() || it->second != before)
      raise(ErrorCode::Contract, "frozen component changed during " + report.stage + ": " + name);
  }
}

}  // namespace

const char* stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::VlpPretrain: return "vlp_pretrain";
    case StageKind::Nlt: return "nlt";
    case StageKind::Le: return "le";
    case StageKind::Joint: return "joint";
  }
  return "?";
}

StageKind stage_kind_from_name(const std::string& name) {
  for (StageKind k : {StageKind::VlpPretrain, StageKind::Nlt, StageKind::Le, StageKind::Joint})
    if (name == stage_kind_name(k)) return k;
  raise(ErrorCode::Parse, "unknown stage kind: " + name);
}

void StageConfig::validate() const {
  if (steps < 1) raise(ErrorCode::Config, "stage.steps must be >= 1");
  if (!(lr > 0.0)) raise(ErrorCode::Config, "stage.lr must be > 0");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
    raise(ErrorCode::Config, "stage.warmup_fraction must be in [0, 1]");
  if (batch < 1) raise(ErrorCode::Config, "stage.batch must be >= 1");
  if (kind != StageKind::VlpPretrain && languages.empty())
    raise(ErrorCode::Config, "stage needs at least one language");
}

int StageConfig::warmup_steps() const {
  return static_cast<int>(std::ceil(warmup_fraction * static_cast<double>(steps)));
}

double lr_at(int step, const StageConfig& cfg) {
  if (step < 0 || step >= cfg.steps)
    raise(ErrorCode::InvalidArgument,
          "lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.steps) + ")");
  const int warm = cfg.warmup_steps();
  if (step < warm) return cfg.lr * static_cast<double>(step) / static_cast<double>(warm);
  return cfg.lr;
}

TrainReport pretrain_vlp(Model& model, const Corpus& native_corpus, const StageConfig& cfg,
                         const LossConfig& loss) {
  cfg.validate();
  loss.validate();
  if (native_corpus.empty()) raise(ErrorCode::Data, "pretraining corpus is empty");
  const auto t0 = Clock::now();
  TrainReport report;
  report.stage = stage_kind_name(StageKind::VlpPretrain);
  report.steps = cfg.steps;
  report.frozen_digest_before =
      digest_components(model, {Component::NonNativeEmbedding, Component::Acquirer});

  model.freeze_all();
  model.set_trainable(
      {{Component::TextEncoder, Component::VisionEncoder, Component::Heads}, {}, {}}, true);

  const auto train_idx = train_indices(native_corpus);
  AdamState adam;
  Rng root(cfg.seed);
  for (int step = 0; step < cfg.steps; ++step) {
    auto batch = sample_batch(native_corpus, train_idx, cfg.batch,
                              root.fork("batch").fork(static_cast<uint64_t>(step)));
    Tape tape(model.dtype());
    std::vector<Var> img_rows, txt_rows;
    for (const auto* rec : batch) {
      if (!rec->image) raise(ErrorCode::Data, "pretraining record lacks an image");
      img_rows.push_back(model.build_image(tape, *rec->image));
      auto ids = model.native_ids(record_text(*rec, kNativeTag));
      txt_rows.push_back(model.build_native_text(tape, ids));
    }
    Var v = tape.stack_rows(img_rows);
    Var s = tape.stack_rows(txt_rows);
    Var l = pair_loss(tape, cfg.objective.value_or(loss.le_objective), v, s, loss.temperature);
    const double loss_value = tape.scalar(l);
    if (!std::isfinite(loss_value))
      raise(ErrorCode::Contract, "non-finite loss at pretrain step " + std::to_string(step));
    report.loss_trace.push_back(loss_value);
    report.language_sequence.push_back(kNativeTag);
    tape.backward(l);
    adam.step(model.registry(), lr_at(step, cfg));
  }
  model.freeze_all();
  report.mean_language_loss[kNativeTag] =
      report.loss_trace.empty()
          ? 0.0
          : std::accumulate(report.loss_trace.begin(), report.loss_trace.end(), 0.0) /
                static_cast<double>(report.loss_trace.size());
  report.frozen_digest_after =
      digest_components(model, {Component::NonNativeEmbedding, Component::Acquirer});
  check_frozen(report);
  report.wall_seconds = seconds_since(t0);
  return report;
}

namespace {

// Shared driver for the acquisition stages (nlt / le / joint).
TrainReport run_acquisition_stage(Model& model, const TrainingData& data,
                                  const StageConfig& cfg, const LossConfig& loss) {
  cfg.validate();
  loss.validate();
  const auto t0 = Clock::now();
  TrainReport report;
  report.stage = stage_kind_name(cfg.kind);
  report.steps = cfg.steps;
  report.frozen_digest_before = digest_components(model, kFrozenDuringAcquisition);

  struct LangRig {
    const Corpus* translations = nullptr;
    std::vector<size_t> translation_idx;
    const Corpus* image_text = nullptr;
    std::vector<size_t> image_idx;
  };
  std::map<std::string, LangRig> rigs;
  const bool needs_translations = cfg.kind == StageKind::Nlt || cfg.kind == StageKind::Joint;
  const bool needs_images = cfg.kind == StageKind::Le || cfg.kind == StageKind::Joint;
  for (const auto& lang : cfg.languages) {
    if (!model.has_language(lang)) raise(ErrorCode::Language, "unknown language: " + lang);
    auto it = data.languages.find(lang);
    if (it == data.languages.end())
      raise(ErrorCode::Data, "no corpora for language '" + lang + "'");
    LangRig rig;
    if (needs_translations) {
      if (it->second.translations.empty())
        raise(ErrorCode::Data, "no translation corpus for language '" + lang + "'");
      rig.translations = &it->second.translations;
      rig.translation_idx = train_indices(*rig.translations);
    }
    if (needs_images) {
      if (it->second.image_text.empty())
        raise(ErrorCode::Data, "no image-text corpus for language '" + lang + "'");
      rig.image_text = &it->second.image_text;
      rig.image_idx = train_indices(*rig.image_text);
    }
    rigs[lang] = std::move(rig);
  }

  LanguageSchedule schedule{cfg.languages, cfg.interleave, cfg.steps};
  AdamState adam;
  Rng root(cfg.seed);
  std::map<std::string, std::pair<double, int>> lang_loss;

  for (int step = 0; step < cfg.steps; ++step) {
    const std::string& lang = schedule.at(step);
    const LangRig& rig = rigs[lang];
    apply_acquisition_flags(model, cfg, lang);
    Rng step_rng = root.fork("batch").fork(static_cast<uint64_t>(step));

    Tape tape(model.dtype());
    Var loss_var;

    auto translation_term = [&](Objective objective) {
      auto batch = sample_batch(*rig.translations, rig.translation_idx, cfg.batch,
                                step_rng.fork("t"));
      std::vector<Tensor> targets;
      std::vector<Var> rows;
      for (const auto* rec : batch) {
        auto native = model.native_ids(record_text(*rec, kNativeTag));
        targets.push_back(model.encode_native_text(native));  // gradient-free targets
        auto ids = model.nonnative_ids(record_text(*rec, lang));
        rows.push_back(model.build_nonnative_text(tape, ids, lang));
      }
      Var anchors = tape.constant(stack_embeddings(targets));
      return pair_loss(tape, objective, anchors, tape.stack_rows(rows), loss.temperature);
    };
    auto exposure_term = [&](Objective objective) {
      auto batch =
          sample_batch(*rig.image_text, rig.image_idx, cfg.batch, step_rng.fork("i"));
      std::vector<Tensor> images;
      std::vector<Var> rows;
      for (const auto* rec : batch) {
        if (!rec->image) raise(ErrorCode::Data, "image-text record lacks an image");
        images.push_back(model.encode_image(*rec->image));  // vision tower frozen
        auto ids = model.nonnative_ids(record_text(*rec, lang));
        rows.push_back(model.build_nonnative_text(tape, ids, lang));
      }
      Var anchors = tape.constant(stack_embeddings(images));
      return pair_loss(tape, objective, anchors, tape.stack_rows(rows), loss.temperature);
    };

    switch (cfg.kind) {
      case StageKind::Nlt:
        loss_var = translation_term(cfg.objective.value_or(loss.nlt_objective));
        break;
      case StageKind::Le:
        loss_var = exposure_term(cfg.objective.value_or(loss.le_objective));
        break;
      case StageKind::Joint:
        loss_var = tape.add(translation_term(loss.nlt_objective),
                            exposure_term(loss.le_objective));
        break;
      case StageKind::VlpPretrain:
        raise(ErrorCode::Contract, "pretraining is not an acquisition stage");
    }

    const double loss_value = tape.scalar(loss_var);
    if (!std::isfinite(loss_value))
      raise(ErrorCode::Contract, "non-finite loss at step " + std::to_string(step));
    report.loss_trace.push_back(loss_value);
    report.language_sequence.push_back(lang);
    auto& [sum, count] = lang_loss[lang];
    sum += loss_value;
    ++count;
    tape.backward(loss_var);
    adam.step(model.registry(), lr_at(step, cfg));
  }

  model.freeze_all();
  for (const auto& [lang, acc] : lang_loss)
    report.mean_language_loss[lang] = acc.first / std::max(1, acc.second);
  report.frozen_digest_after = digest_components(model, kFrozenDuringAcquisition);
  check_frozen(report);
  report.wall_seconds = seconds_since(t0);
  return report;
}

}  // namespace

TrainReport run_nlt_stage(Model& model, const TrainingData& data, const StageConfig& cfg,
                          const LossConfig& loss) {
  if (cfg.kind != StageKind::Nlt) raise(ErrorCode::Config, "stage kind must be nlt");
  return run_acquisition_stage(model, data, cfg, loss);
}

TrainReport run_le_stage(Model& model, const TrainingData& data, const StageConfig& cfg,
                         const LossConfig& loss) {
  if (cfg.kind != StageKind::Le) raise(ErrorCode::Config, "stage kind must be le");
  return run_acquisition_stage(model, data, cfg, loss);
}

TrainReport run_joint_stage(Model& model, const TrainingData& data, const StageConfig& cfg,
                            const LossConfig& loss) {
  if (cfg.kind != StageKind::Joint) raise(ErrorCode::Config, "stage kind must be joint");
  return run_acquisition_stage(model, data, cfg, loss);
}

void validate_schedule(const std::vector<StageConfig>& stages) {
  if (stages.empty()) raise(ErrorCode::Schedule, "empty schedule");
  std::vector<StageKind> kinds;
  for (const auto& s : stages) kinds.push_back(s.kind);
  size_t start = 0;
  if (kinds[0] == StageKind::VlpPretrain) start = 1;
  for (size_t i = start; i < kinds.size(); ++i)
    if (kinds[i] == StageKind::VlpPretrain)
      raise(ErrorCode::Schedule, "pre-training must come first");
  std::vector<StageKind> rest(kinds.begin() + static_cast<long>(start), kinds.end());
  const std::vector<std::vector<StageKind>> supported = {
      {},
      {StageKind::Nlt},
      {StageKind::Le},
      {StageKind::Joint},
      {StageKind::Nlt, StageKind::Le},
      {StageKind::Nlt, StageKind::Joint},
  };
  if (std::find(supported.begin(), supported.end(), rest) == supported.end()) {
    std::string got;
    for (StageKind k : rest) got += std::string(got.empty() ? "" : ",") + stage_kind_name(k);
    raise(ErrorCode::Schedule, "unsupported stage arrangement: [" + got + "]");
  }
}

std::vector<TrainReport> run_schedule(Model& model, const TrainingData& data,
                                      const std::vector<StageConfig>& stages,
                                      const LossConfig& loss) {
  validate_schedule(stages);
  std::vector<TrainReport> reports;
  for (const auto& stage : stages) {
    switch (stage.kind) {
      case StageKind::VlpPretrain:
        reports.push_back(pretrain_vlp(model, data.native_image_text, stage, loss));
        break;
      case StageKind::Nlt:
      case StageKind::Le:
      case StageKind::Joint:
        reports.push_back(run_acquisition_stage(model, data, stage, loss));
        break;
    }
  }
  return reports;
}

std::vector<TrainReport> extend_language(Model& model, const std::string& new_lang,
                                         const LanguageData& data, const StageConfig& nlt_cfg,
                                         const std::optional<StageConfig>& le_cfg,
                                         FreezePolicy policy, const LossConfig& loss,
                                         uint64_t register_seed) {
  if (model.has_language(new_lang))
    raise(ErrorCode::Language, "language already registered: " + new_lang);

  // Lexicon = every token the new language's corpora use, in sorted order.
  std::set<std::string> tokens;
  for (const Corpus* c : {&data.translations, &data.image_text})
    for (const auto& rec : *c) {
      auto it = rec.text.find(new_lang);
      if (it == rec.text.end())
        raise(ErrorCode::Data, "extension corpus record lacks text for '" + new_lang + "'");
      tokens.insert(it->second.begin(), it->second.end());
    }
  std::vector<std::string> lexicon(tokens.begin(), tokens.end());
  std::vector<int> rows = model.add_tokens(lexicon, register_seed);
  model.register_language(new_lang, register_seed);

  TrainingData td;
  td.languages[new_lang] = data;

  auto scoped = [&](StageConfig cfg) {
    cfg.languages = {new_lang};
    if (policy == FreezePolicy::RowsOnly) {
      cfg.embedding_row_scope = rows;
      cfg.train_embedding_proj = false;
    } else {
      cfg.embedding_row_scope.reset();
      cfg.train_embedding_proj = true;
    }
    return cfg;
  };

  std::vector<TrainReport> reports;
  reports.push_back(run_acquisition_stage(model, td, scoped(nlt_cfg), loss));
  if (le_cfg) reports.push_back(run_acquisition_stage(model, td, scoped(*le_cfg), loss));
  return reports;
}

}  // namespace mla
