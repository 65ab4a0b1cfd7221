#pragma once

#include <filesystem>

#include "mla/synthworld.hpp"

namespace mla {

// JSONL, one record per line:
//   {"id": int, "split": "train"|"dev"|"test", "concepts": [int],
//    "image": [[float; patch_dim]; patches],   // image-text corpora only
//    "text": {"<lang>": ["tok", ...], ...}}
// Floats are written with round-trip-exact formatting, so regeneration with
// the same seed produces byte-identical files.
std::string corpus_to_jsonl(const Corpus& corpus);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace mla
