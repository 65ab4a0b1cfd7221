#pragma once

#include <array>
#include <ostream>
#include <span>
#include <string>

#include "mla/model.hpp"
#include "mla/synthworld.hpp"

namespace mla {

// MLA_FORGE_THREADS caps worker parallelism for read-only encoding work;
// defaults to 1 so runs are trivially bit-reproducible. Results are written
// by index, so any thread count produces identical output.
int worker_threads();
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

inline constexpr std::array<int, 3> kRecallKs = {1, 5, 10};

struct RetrievalReport {
  std::string language;
  std::string split;
  std::array<double, 3> recall_i2t{};  // k = 1, 5, 10
  std::array<double, 3> recall_t2i{};
  double average_recall = 0.0;
  int candidates = 0;
};

// Fraction of queries whose true candidate ranks within the top k under
// descending similarity; ties resolve toward the lower candidate index.
double recall_at_k(const Tensor& sim, std::span<const int> truth, int k);

// Builds the full report from paired embedding matrices (row i of images
// pairs with row i of texts).
RetrievalReport report_from_embeddings(const Tensor& images, const Tensor& texts,
                                       const std::string& language, const std::string& split);

// Encodes the split's images and texts in the given language (or native) and
// scores both retrieval directions over the whole split as one candidate pool.
RetrievalReport retrieval_eval(const Model& model, const Corpus& corpus, Split split,
                               const std::string& language);

// Mean-pooled frame embeddings; more than 12 frames are uniformly subsampled
// down to 12 first.
Tensor encode_video(const Model& model, std::span<const Tensor> frames);

// One TSV row per (record, modality/language): id, tag, then the embedding
// values with round-trip-exact formatting.
void export_embeddings(const Model& model, const Corpus& records,
                       std::span<const std::string> languages, std::ostream& out);

}  // namespace mla
