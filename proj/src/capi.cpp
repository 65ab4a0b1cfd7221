#include "mla.h"

#include <cstdlib>
#include <cstring>
#include <sstream>

#include "mla/config.hpp"
#include "mla/errors.hpp"
#include "mla/model.hpp"
#include "mla/pipeline.hpp"

using namespace mla;

struct mla_config {
  RunConfig cfg;
};

struct mla_model {
  Model model;
};

namespace {

thread_local std::string g_last_error;

mla_status map_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument: return MLA_ERR_INVALID_ARGUMENT;
    case ErrorCode::Shape: return MLA_ERR_SHAPE;
    case ErrorCode::Vocab: return MLA_ERR_VOCAB;
    case ErrorCode::Length: return MLA_ERR_LENGTH;
    case ErrorCode::Language: return MLA_ERR_LANGUAGE;
    case ErrorCode::Config: return MLA_ERR_CONFIG;
    case ErrorCode::Data: return MLA_ERR_DATA;
    case ErrorCode::Io: return MLA_ERR_IO;
    case ErrorCode::Parse: return MLA_ERR_PARSE;
    case ErrorCode::CkptVersion: return MLA_ERR_CKPT_VERSION;
    case ErrorCode::CkptCorrupt: return MLA_ERR_CKPT_CORRUPT;
    case ErrorCode::Schedule: return MLA_ERR_SCHEDULE;
    case ErrorCode::Contract: return MLA_ERR_CONTRACT;
    case ErrorCode::Degenerate: return MLA_ERR_DEGENERATE;
    case ErrorCode::Internal: return MLA_ERR_INTERNAL;
  }
  return MLA_ERR_INTERNAL;
}

template <typename F>
mla_status wrap(F&& f) noexcept {
  try {
    f();
    g_last_error.clear();
    return MLA_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return map_code(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MLA_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return MLA_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void set_report(char** report_json, const nlohmann::json& j) {
  if (report_json) *report_json = dup_string(j.dump(2));
}

void require(bool cond, const char* what) {
  if (!cond) raise(ErrorCode::InvalidArgument, what);
}

std::optional<std::filesystem::path> opt_path(const char* p) {
  if (!p) return std::nullopt;
  return std::filesystem::path(p);
}

std::filesystem::path make_run_dir(const RunConfig& cfg, const std::string& command,
                                   const char* out_dir) {
  return pipeline::create_run_dir(cfg, command, opt_path(out_dir));
}

}  // namespace

extern "C" {

const char* mla_status_name(mla_status status) {
  switch (status) {
    case MLA_OK: return "ok";
    case MLA_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case MLA_ERR_SHAPE: return "shape";
    case MLA_ERR_VOCAB: return "vocab";
    case MLA_ERR_LENGTH: return "length";
    case MLA_ERR_LANGUAGE: return "language";
    case MLA_ERR_CONFIG: return "config";
    case MLA_ERR_DATA: return "data";
    case MLA_ERR_IO: return "io";
    case MLA_ERR_PARSE: return "parse";
    case MLA_ERR_CKPT_VERSION: return "checkpoint_version";
    case MLA_ERR_CKPT_CORRUPT: return "checkpoint_corrupt";
    case MLA_ERR_SCHEDULE: return "schedule";
    case MLA_ERR_CONTRACT: return "contract";
    case MLA_ERR_DEGENERATE: return "degenerate";
    case MLA_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* mla_last_error(void) { return g_last_error.c_str(); }

void mla_string_free(char* s) { std::free(s); }

mla_status mla_config_default(mla_config** out) {
  return wrap([&] {
    require(out != nullptr, "out must not be null");
    *out = new mla_config{default_run_config()};
  });
}

mla_status mla_config_load(const char* path, mla_config** out) {
  return wrap([&] {
    require(path && out, "path and out must not be null");
    *out = new mla_config{load_run_config(path)};
  });
}

mla_status mla_config_parse(const char* json_text, mla_config** out) {
  return wrap([&] {
    require(json_text && out, "json_text and out must not be null");
    *out = new mla_config{parse_run_config(json_text)};
  });
}

mla_status mla_config_set_seed(mla_config* cfg, uint64_t seed) {
  return wrap([&] {
    require(cfg != nullptr, "cfg must not be null");
    apply_seed_override(cfg->cfg, seed);
  });
}

mla_status mla_config_set_languages(mla_config* cfg, const char* languages) {
  return wrap([&] {
    require(cfg && languages, "cfg and languages must not be null");
    std::vector<std::string> out;
    std::istringstream ss(languages);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) out.push_back(tok);
    require(!out.empty(), "language list is empty");
    cfg->cfg.language_filter = out;
    cfg->cfg.validate();
  });
}

char* mla_config_echo(const mla_config* cfg) {
  if (!cfg) return nullptr;
  return dup_string(echo_run_config(cfg->cfg));
}

void mla_config_free(mla_config* cfg) { delete cfg; }

mla_status mla_world_gen(const mla_config* cfg, const char* out_dir, char** report_json) {
  return wrap([&] {
    require(cfg != nullptr, "cfg must not be null");
    auto dir = make_run_dir(cfg->cfg, "world-gen", out_dir);
    set_report(report_json, pipeline::world_gen(cfg->cfg, dir));
  });
}

mla_status mla_run_pretrain(const mla_config* cfg, const char* out_dir, char** report_json) {
  return wrap([&] {
    require(cfg != nullptr, "cfg must not be null");
    auto dir = make_run_dir(cfg->cfg, "pretrain", out_dir);
    set_report(report_json, pipeline::run_pretrain(cfg->cfg, dir));
  });
}

mla_status mla_run_stage(const mla_config* cfg, const char* kind, const char* checkpoint_dir,
                         const char* out_dir, char** report_json) {
  return wrap([&] {
    require(cfg && kind && checkpoint_dir, "cfg, kind and checkpoint_dir must not be null");
    StageKind k = stage_kind_from_name(kind);
    require(k != StageKind::VlpPretrain, "use mla_run_pretrain for pre-training");
    auto dir = make_run_dir(cfg->cfg, std::string("train-") + kind, out_dir);
    set_report(report_json, pipeline::run_stage_cmd(cfg->cfg, k, checkpoint_dir, dir));
  });
}

mla_status mla_run_schedule(const mla_config* cfg, const char* checkpoint_dir_or_null,
                            const char* out_dir, char** report_json) {
  return wrap([&] {
    require(cfg != nullptr, "cfg must not be null");
    auto dir = make_run_dir(cfg->cfg, "run-schedule", out_dir);
    set_report(report_json,
               pipeline::run_schedule_cmd(cfg->cfg, opt_path(checkpoint_dir_or_null), dir));
  });
}

mla_status mla_run_extend(const mla_config* cfg, const char* checkpoint_dir,
                          const char* language, int rows_only, int with_le,
                          const char* out_dir, char** report_json) {
  return wrap([&] {
    require(cfg && checkpoint_dir && language,
            "cfg, checkpoint_dir and language must not be null");
    auto dir = make_run_dir(cfg->cfg, "extend", out_dir);
    set_report(report_json, pipeline::run_extend(cfg->cfg, checkpoint_dir, language,
                                                 rows_only != 0, with_le != 0, dir));
  });
}

mla_status mla_run_eval(const mla_config* cfg, const char* checkpoint_dir, const char* split,
                        const char* csv_path_or_null, const char* out_dir,
                        char** report_json) {
  return wrap([&] {
    require(cfg && checkpoint_dir && split, "cfg, checkpoint_dir and split must not be null");
    auto dir = make_run_dir(cfg->cfg, "eval", out_dir);
    set_report(report_json, pipeline::run_eval(cfg->cfg, checkpoint_dir, split,
                                               opt_path(csv_path_or_null), dir));
  });
}

mla_status mla_export_embeddings(const mla_config* cfg, const char* checkpoint_dir,
                                 const char* split, const char* tsv_path,
                                 const char* out_dir, char** report_json) {
  return wrap([&] {
    require(cfg && checkpoint_dir && split && tsv_path,
            "cfg, checkpoint_dir, split and tsv_path must not be null");
    auto dir = make_run_dir(cfg->cfg, "export-embeddings", out_dir);
    set_report(report_json,
               pipeline::run_export(cfg->cfg, checkpoint_dir, split, tsv_path, dir));
  });
}

mla_status mla_grad_check(double* out_max_rel_error, char** report_json) {
  return wrap([&] {
    auto j = pipeline::grad_check_report();
    if (out_max_rel_error) *out_max_rel_error = j.at("max_rel_error").get<double>();
    set_report(report_json, j);
  });
}

mla_status mla_model_load(const char* checkpoint_dir, mla_model** out) {
  return wrap([&] {
    require(checkpoint_dir && out, "checkpoint_dir and out must not be null");
    *out = new mla_model{Model::load(checkpoint_dir)};
  });
}

mla_status mla_model_save(const mla_model* model, const char* checkpoint_dir) {
  return wrap([&] {
    require(model && checkpoint_dir, "model and checkpoint_dir must not be null");
    model->model.save(checkpoint_dir);
  });
}

void mla_model_free(mla_model* model) { delete model; }

char* mla_model_info(const mla_model* model) {
  if (!model) return nullptr;
  const Model& m = model->model;
  size_t total = 0;
  m.registry().for_each([&](const ParamEntry& e) { total += e.tensor.numel(); });
  nlohmann::json j{
      {"languages", m.languages()},
      {"native_vocab_size", m.native_vocab().size()},
      {"nonnative_vocab_size", m.nonnative_vocab().size()},
      {"parameter_count", total},
      {"proj_dim", m.config().proj_dim},
      {"num_layers", m.config().num_layers},
      {"model_dim", m.config().model_dim},
  };
  return dup_string(j.dump(2));
}

mla_status mla_model_encode_text(const mla_model* model, const char* language_or_null,
                                 const char* const* tokens, size_t num_tokens, float* out,
                                 size_t out_capacity, size_t* out_size) {
  return wrap([&] {
    require(model && out, "model and out must not be null");
    require(tokens != nullptr || num_tokens == 0, "tokens must not be null");
    const Model& m = model->model;
    const size_t p = static_cast<size_t>(m.config().proj_dim);
    require(out_capacity >= p, "output buffer too small");
    std::vector<std::string> words(tokens, tokens + num_tokens);
    Tensor e;
    if (language_or_null == nullptr)
      e = m.encode_native_text(m.native_ids(words));
    else
      e = m.encode_nonnative_text(m.nonnative_ids(words), language_or_null);
    for (size_t i = 0; i < p; ++i) out[i] = static_cast<float>(e[i]);
    if (out_size) *out_size = p;
  });
}

mla_status mla_model_encode_image(const mla_model* model, const float* patches,
                                  size_t num_patches, size_t patch_dim, float* out,
                                  size_t out_capacity, size_t* out_size) {
  return wrap([&] {
    require(model && patches && out, "model, patches and out must not be null");
    const Model& m = model->model;
    const size_t p = static_cast<size_t>(m.config().proj_dim);
    require(out_capacity >= p, "output buffer too small");
    std::vector<double> values(patches, patches + num_patches * patch_dim);
    Tensor t = Tensor::from({static_cast<int>(num_patches), static_cast<int>(patch_dim)},
                            std::move(values), m.dtype());
    Tensor e = m.encode_image(t);
    for (size_t i = 0; i < p; ++i) out[i] = static_cast<float>(e[i]);
    if (out_size) *out_size = p;
  });
}

}  // extern "C"
