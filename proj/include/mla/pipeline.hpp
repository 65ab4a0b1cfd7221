#pragma once

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "mla/config.hpp"
#include "mla/eval.hpp"
#include "mla/gradcheck.hpp"
#include "mla/training.hpp"

namespace mla::pipeline {

// Run directories are named <command>-<config hash>-<timestamp> under the
// configured runs root (or an explicit --out base). Each run writes its
// resolved config echo next to its outputs.
std::filesystem::path create_run_dir(const RunConfig& cfg, const std::string& command,
                                     const std::optional<std::filesystem::path>& out_base);

std::filesystem::path corpora_dir(const RunConfig& cfg);
std::filesystem::path pretrain_corpus_path(const RunConfig& cfg);
std::filesystem::path translation_corpus_path(const RunConfig& cfg, const std::string& lang);
std::filesystem::path image_text_corpus_path(const RunConfig& cfg, const std::string& lang);

// Generates every configured corpus deterministically; re-running with the
// same config detects byte-identical files and reports reuse instead of
// rewriting. A conflicting existing file is an error, never overwritten.
nlohmann::json world_gen(const RunConfig& cfg, const std::filesystem::path& run_dir);

TrainingData load_training_data(const RunConfig& cfg,
                                const std::vector<std::string>& languages,
                                bool need_translations, bool need_images);

// Builds the fresh model (vocabulary from the native corpus) and runs the
// pre-training stage from the config.
nlohmann::json run_pretrain(const RunConfig& cfg, const std::filesystem::path& run_dir);

nlohmann::json run_stage_cmd(const RunConfig& cfg, StageKind kind,
                             const std::filesystem::path& checkpoint,
                             const std::filesystem::path& run_dir);

// Executes the configured stage list; starts fresh when the schedule leads
// with pre-training, otherwise continues from the given checkpoint.
nlohmann::json run_schedule_cmd(const RunConfig& cfg,
                                const std::optional<std::filesystem::path>& checkpoint,
                                const std::filesystem::path& run_dir);

nlohmann::json run_extend(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                          const std::string& language, bool rows_only, bool with_le,
                          const std::filesystem::path& run_dir);

nlohmann::json run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                        const std::string& split,
                        const std::optional<std::filesystem::path>& csv_path,
                        const std::filesystem::path& run_dir);

nlohmann::json run_export(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                          const std::string& split, const std::filesystem::path& tsv_path,
                          const std::filesystem::path& run_dir);

nlohmann::json grad_check_report();

nlohmann::json train_report_to_json(const TrainReport& r);
nlohmann::json retrieval_report_to_json(const RetrievalReport& r);
std::string retrieval_report_csv_row(const RetrievalReport& r);

}  // namespace mla::pipeline
