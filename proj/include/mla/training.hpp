#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mla/model.hpp"
#include "mla/objectives.hpp"
#include "mla/optimizer.hpp"
#include "mla/synthworld.hpp"

namespace mla {

enum class StageKind { VlpPretrain, Nlt, Le, Joint };
const char* stage_kind_name(StageKind k);
StageKind stage_kind_from_name(const std::string& name);

enum class Interleave { Batch, Epoch };

struct StageConfig {
  StageKind kind = StageKind::Nlt;
  int steps = 100;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  int batch = 32;
  std::vector<std::string> languages;
  uint64_t seed = 1;
  // Batch: strict per-batch round-robin across languages. Epoch: contiguous
  // per-language blocks.
  Interleave interleave = Interleave::Batch;
  // Overrides the LossConfig default for this stage kind (objective swaps).
  std::optional<Objective> objective;
  // Restricts non-native embedding updates to these rows (language extension
  // under the rows-only policy). Empty optional trains the whole table.
  std::optional<std::vector<int>> embedding_row_scope;
  // Whether the embedding input projection trains alongside the table.
  bool train_embedding_proj = true;

  void validate() const;
  int warmup_steps() const;
  bool operator==(const StageConfig&) const = default;
};

// Linear ramp from 0 to the peak over the warmup steps, then constant.
double lr_at(int step, const StageConfig& cfg);

struct TrainReport {
  std::string stage;
  int steps = 0;
  std::vector<double> loss_trace;
  std::vector<std::string> language_sequence;
  std::map<std::string, double> mean_language_loss;
  std::map<std::string, uint64_t> frozen_digest_before;
  std::map<std::string, uint64_t> frozen_digest_after;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
};

struct LanguageData {
  Corpus translations;
  Corpus image_text;
};

struct TrainingData {
  Corpus native_image_text;
  std::map<std::string, LanguageData> languages;
};

// Trains both towers and the projection heads on native image-text pairs with
// the contrastive objective, then freezes everything.
TrainReport pretrain_vlp(Model& model, const Corpus& native_corpus, const StageConfig& cfg,
                         const LossConfig& loss);

// Native-transfer stage: round-robin over languages; each batch trains the
// current language's acquirers plus the non-native embedding block against
// frozen native targets.
TrainReport run_nlt_stage(Model& model, const TrainingData& data, const StageConfig& cfg,
                          const LossConfig& loss);

// Exposure stage: like the above but against frozen image embeddings.
TrainReport run_le_stage(Model& model, const TrainingData& data, const StageConfig& cfg,
                         const LossConfig& loss);

// Both objectives summed per step, a translation batch plus an image batch.
TrainReport run_joint_stage(Model& model, const TrainingData& data, const StageConfig& cfg,
                            const LossConfig& loss);

// Raises unless the stage kinds form a supported arrangement: an optional
// leading pre-train followed by one of {}, {nlt}, {le}, {joint}, {nlt,le},
// {nlt,joint}.
void validate_schedule(const std::vector<StageConfig>& stages);

std::vector<TrainReport> run_schedule(Model& model, const TrainingData& data,
                                      const std::vector<StageConfig>& stages,
                                      const LossConfig& loss);

enum class FreezePolicy { RowsOnly, FullEmbedding };

// Registers a new language on a trained model and trains it alone; under the
// rows-only policy only its acquirers and the embedding rows of its own
// tokens move, so every other language's encodings stay bit-identical.
std::vector<TrainReport> extend_language(Model& model, const std::string& new_lang,
                                         const LanguageData& data, const StageConfig& nlt_cfg,
                                         const std::optional<StageConfig>& le_cfg,
                                         FreezePolicy policy, const LossConfig& loss,
                                         uint64_t register_seed);

}  // namespace mla
