#include "mla/eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <string_view>
#include <thread>

#include "mla/errors.hpp"
#include "mla/objectives.hpp"

namespace mla {

int worker_threads() {
  const char* env = std::getenv("MLA_FORGE_THREADS");
  if (!env) return 1;
  int v = 1;
  auto res = std::from_chars(env, env + std::string_view(env).size(), v);
  if (res.ec != std::errc{} || v < 1) return 1;
  return v;
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  const int threads = std::min<size_t>(static_cast<size_t>(worker_threads()), n);
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<size_t> next{0};
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

double recall_at_k(const Tensor& sim, std::span<const int> truth, int k) {
  if (sim.rank() != 2) raise(ErrorCode::Shape, "recall_at_k: similarity must be rank-2");
  const int q = sim.dim(0), c = sim.dim(1);
  if (k < 1) raise(ErrorCode::InvalidArgument, "recall_at_k: k must be >= 1");
  if (k > c)
    raise(ErrorCode::Config, "recall_at_k: k=" + std::to_string(k) +
                                 " exceeds candidate count " + std::to_string(c));
  if (static_cast<int>(truth.size()) != q)
    raise(ErrorCode::Shape, "recall_at_k: truth size does not match query count");
  int hits = 0;
  for (int i = 0; i < q; ++i) {
    const int t = truth[static_cast<size_t>(i)];
    if (t < 0 || t >= c)
      raise(ErrorCode::InvalidArgument, "recall_at_k: truth index out of range");
    const double score = sim.at(i, t);
    int rank = 0;
    for (int j = 0; j < c; ++j) {
      const double s = sim.at(i, j);
      if (s > score || (s == score && j < t)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(q);
}

RetrievalReport report_from_embeddings(const Tensor& images, const Tensor& texts,
                                       const std::string& language,
                                       const std::string& split) {
  if (images.rank() != 2 || !images.same_shape(texts))
    raise(ErrorCode::Shape, "report_from_embeddings: expected equal [C x p] matrices");
  const int c = images.dim(0), p = images.dim(1);
  // Cosine similarity; sim[i][j] = image i vs text j.
  std::vector<double> inorm(static_cast<size_t>(c)), tnorm(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) {
    double si = 0, st = 0;
    for (int j = 0; j < p; ++j) {
      si += images.at(i, j) * images.at(i, j);
      st += texts.at(i, j) * texts.at(i, j);
    }
    if (si == 0.0 || st == 0.0)
      raise(ErrorCode::Degenerate, "report_from_embeddings: zero-norm embedding row");
    inorm[static_cast<size_t>(i)] = std::sqrt(si);
    tnorm[static_cast<size_t>(i)] = std::sqrt(st);
  }
  Tensor sim({c, c}, Dtype::F64);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      double dot = 0;
      for (int k = 0; k < p; ++k) dot += images.at(i, k) * texts.at(j, k);
      sim.set(i, j, dot / (inorm[static_cast<size_t>(i)] * tnorm[static_cast<size_t>(j)]));
    }
  Tensor sim_t({c, c}, Dtype::F64);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) sim_t.set(i, j, sim.at(j, i));

  std::vector<int> truth(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) truth[static_cast<size_t>(i)] = i;

  RetrievalReport rep;
  rep.language = language;
  rep.split = split;
  rep.candidates = c;
  double total = 0;
  for (size_t ki = 0; ki < kRecallKs.size(); ++ki) {
    rep.recall_i2t[ki] = recall_at_k(sim, truth, kRecallKs[ki]);
    rep.recall_t2i[ki] = recall_at_k(sim_t, truth, kRecallKs[ki]);
    total += rep.recall_i2t[ki] + rep.recall_t2i[ki];
  }
  rep.average_recall = total / 6.0;
  return rep;
}

RetrievalReport retrieval_eval(const Model& model, const Corpus& corpus, Split split,
                               const std::string& language) {
  auto records = split_view(corpus, split);
  if (records.empty())
    raise(ErrorCode::Data, std::string("empty split: ") + split_name(split));
  const int c = static_cast<int>(records.size());
  const int p = model.config().proj_dim;
  Tensor images({c, p}, Dtype::F64);
  Tensor texts({c, p}, Dtype::F64);
  parallel_for(static_cast<size_t>(c), [&](size_t i) {
    const SampleRecord& rec = *records[i];
    if (!rec.image)
      raise(ErrorCode::Data, "record " + std::to_string(rec.id) + " has no image");
    Tensor v = model.encode_image(*rec.image);
    auto it = rec.text.find(language);
    if (it == rec.text.end())
      raise(ErrorCode::Data,
            "record " + std::to_string(rec.id) + " has no text for '" + language + "'");
    Tensor s = language == kNativeTag
                   ? model.encode_native_text(model.native_ids(it->second))
                   : model.encode_nonnative_text(model.nonnative_ids(it->second), language);
    for (int j = 0; j < p; ++j) {
      images.set(static_cast<int>(i), j, v[static_cast<size_t>(j)]);
      texts.set(static_cast<int>(i), j, s[static_cast<size_t>(j)]);
    }
  });
  return report_from_embeddings(images, texts, language, split_name(split));
}

Tensor encode_video(const Model& model, std::span<const Tensor> frames) {
  if (frames.empty()) raise(ErrorCode::InvalidArgument, "encode_video: no frames");
  constexpr size_t kMaxFrames = 12;
  std::vector<const Tensor*> picked;
  if (frames.size() <= kMaxFrames) {
    for (const auto& f : frames) picked.push_back(&f);
  } else {
    for (size_t i = 0; i < kMaxFrames; ++i)
      picked.push_back(&frames[i * frames.size() / kMaxFrames]);
  }
  const int p = model.config().proj_dim;
  std::vector<double> acc(static_cast<size_t>(p), 0.0);
  for (const Tensor* f : picked) {
    Tensor e = model.encode_image(*f);
    for (int j = 0; j < p; ++j) acc[static_cast<size_t>(j)] += e[static_cast<size_t>(j)];
  }
  for (double& x : acc) x /= static_cast<double>(picked.size());
  return Tensor::from({p}, std::move(acc), model.dtype());
}

namespace {
std::string format_value(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
}  // namespace

void export_embeddings(const Model& model, const Corpus& records,
                       std::span<const std::string> languages, std::ostream& out) {
  std::vector<std::string> lines(records.size());
  parallel_for(records.size(), [&](size_t i) {
    const SampleRecord& rec = records[i];
    std::string block;
    auto emit = [&](const std::string& tag, const Tensor& e) {
      block += std::to_string(rec.id);
      block += '\t';
      block += tag;
      for (size_t j = 0; j < e.numel(); ++j) {
        block += '\t';
        block += format_value(e[j]);
      }
      block += '\n';
    };
    if (rec.image) emit("image", model.encode_image(*rec.image));
    for (const auto& lang : languages) {
      auto it = rec.text.find(lang);
      if (it == rec.text.end())
        raise(ErrorCode::Data,
              "record " + std::to_string(rec.id) + " has no text for '" + lang + "'");
      Tensor e = lang == kNativeTag
                     ? model.encode_native_text(model.native_ids(it->second))
                     : model.encode_nonnative_text(model.nonnative_ids(it->second), lang);
      emit(lang, e);
    }
    lines[i] = std::move(block);
  });
  for (const auto& l : lines) out << l;
}

}  // namespace mla
