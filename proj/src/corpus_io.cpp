#include "mla/corpus_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mla/errors.hpp"

namespace mla {

using nlohmann::json;

std::string corpus_to_jsonl(const Corpus& corpus) {
  std::ostringstream out;
  for (const auto& rec : corpus) {
    json j;
    j["id"] = rec.id;
    j["split"] = split_name(rec.split);
    j["concepts"] = rec.concepts;
    if (rec.image) {
      const Tensor& img = *rec.image;
      json rows = json::array();
      for (int r = 0; r < img.dim(0); ++r) {
        json row = json::array();
        for (int c = 0; c < img.dim(1); ++c) row.push_back(img.at(r, c));
        rows.push_back(std::move(row));
      }
      j["image"] = std::move(rows);
    }
    json text = json::object();
    for (const auto& [lang, tokens] : rec.text) text[lang] = tokens;
    j["text"] = std::move(text);
    out << j.dump() << "\n";
  }
  return out.str();
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::Io, "cannot write " + path.string());
  out << corpus_to_jsonl(corpus);
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::Io, "cannot open " + path.string());
  Corpus out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      raise(ErrorCode::Parse,
            path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    auto field_error = [&](const std::string& what) {
      raise(ErrorCode::Parse,
            path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    SampleRecord rec;
    try {
      if (!j.contains("id")) field_error("record missing 'id'");
      rec.id = j.at("id").get<long>();
      if (!j.contains("split")) field_error("record missing 'split'");
      rec.split = split_from_name(j.at("split").get<std::string>());
      if (!j.contains("concepts")) field_error("record missing 'concepts'");
      rec.concepts = j.at("concepts").get<std::vector<int>>();
      if (!j.contains("text")) field_error("record missing 'text'");
      for (const auto& [lang, tokens] : j.at("text").items())
        rec.text[lang] = tokens.get<std::vector<std::string>>();
      if (j.contains("image")) {
        const auto& rows = j.at("image");
        const int n = static_cast<int>(rows.size());
        if (n == 0) field_error("empty image");
        const int d = static_cast<int>(rows.at(0).size());
        std::vector<double> values;
        values.reserve(static_cast<size_t>(n) * d);
        for (const auto& row : rows) {
          if (static_cast<int>(row.size()) != d) field_error("ragged image rows");
          for (const auto& x : row) values.push_back(x.get<double>());
        }
        rec.image = Tensor::from({n, d}, std::move(values), Dtype::F32);
      }
    } catch (const json::exception& e) {
      raise(ErrorCode::Parse,
            path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace mla
