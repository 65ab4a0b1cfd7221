// Checkpoint directory format: manifest.json describing config, vocabularies,
// registered languages and ordered parameter records, plus params.bin holding
// the little-endian float32 payload in manifest order behind a small header
// (magic, version, payload length) and a trailing FNV-1a checksum. Loading
// either fully succeeds or throws without constructing a model.

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mla/digest.hpp"
#include "mla/errors.hpp"
#include "mla/model.hpp"

namespace mla {

namespace {

constexpr uint32_t kFormatVersion = 1;
constexpr char kMagic[4] = {'M', 'L', 'A', 'P'};

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"num_layers", c.num_layers},
              {"model_dim", c.model_dim},
              {"num_heads", c.num_heads},
              {"ffn_dim", c.ffn_dim},
              {"proj_dim", c.proj_dim},
              {"acquirer_hidden", c.acquirer_hidden},
              {"embed_dim", c.embed_dim},
              {"max_text_len", c.max_text_len},
              {"patch_count", c.patch_count},
              {"patch_dim", c.patch_dim}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.acquirer_hidden = j.at("acquirer_hidden").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.max_text_len = j.at("max_text_len").get<int>();
  c.patch_count = j.at("patch_count").get<int>();
  c.patch_dim = j.at("patch_dim").get<int>();
  return c;
}

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

uint32_t get_u32(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void Model::save(const std::filesystem::path& dir) const {
  if (dtype_ != Dtype::F32)
    raise(ErrorCode::Contract, "checkpoints are float32; model is in 64-bit mode");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);

  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config"] = config_to_json(cfg_);
  manifest["languages"] = languages_;
  manifest["native_vocab"] = native_vocab_.tokens();
  manifest["nonnative_vocab"] = nonnative_vocab_.tokens();

  std::vector<unsigned char> payload;
  json params = json::array();
  uint64_t offset = 0;
  reg_.for_each([&](const ParamEntry& e) {
    params.push_back(json{{"name", e.name},
                          {"component", component_name(e.component)},
                          {"language", e.language},
                          {"shape", e.tensor.shape()},
                          {"offset", offset},
                          {"trainable", e.trainable},
                          {"row_sparse", e.row_sparse}});
    for (size_t i = 0; i < e.tensor.numel(); ++i) {
      float f = static_cast<float>(e.tensor[i]);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(payload, bits);
    }
    offset += e.tensor.numel() * 4;
  });
  manifest["params"] = std::move(params);

  {
    std::ofstream out(dir / "manifest.json");
    if (!out) raise(ErrorCode::Io, "cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
  }
  {
    std::vector<unsigned char> blob;
    blob.reserve(payload.size() + 24);
    blob.insert(blob.end(), kMagic, kMagic + 4);
    put_u32(blob, kFormatVersion);
    put_u64(blob, payload.size());
    blob.insert(blob.end(), payload.begin(), payload.end());
    put_u64(blob, Fnv1a64().update(payload.data(), payload.size()).value());
    std::ofstream out(dir / "params.bin", std::ios::binary);
    if (!out) raise(ErrorCode::Io, "cannot write " + (dir / "params.bin").string());
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size()));
  }
}

Model Model::load(const std::filesystem::path& dir) {
  json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) raise(ErrorCode::Io, "cannot open " + (dir / "manifest.json").string());
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      raise(ErrorCode::Parse, "manifest.json: " + std::string(e.what()));
    }
  }
  uint32_t version = 0;
  try {
    version = manifest.at("format_version").get<uint32_t>();
  } catch (const json::exception& e) {
    raise(ErrorCode::Parse, "manifest.json: " + std::string(e.what()));
  }
  if (version != kFormatVersion)
    raise(ErrorCode::CkptVersion, "unsupported checkpoint format version " +
                                      std::to_string(version) + ", expected " +
                                      std::to_string(kFormatVersion));

  auto blob = read_file(dir / "params.bin");
  if (blob.size() < 24 || std::memcmp(blob.data(), kMagic, 4) != 0)
    raise(ErrorCode::CkptCorrupt, "params.bin: bad magic or truncated header");
  if (get_u32(blob.data() + 4) != kFormatVersion)
    raise(ErrorCode::CkptCorrupt, "params.bin: header version mismatch");
  const uint64_t payload_len = get_u64(blob.data() + 8);
  if (blob.size() != 20 + payload_len + 8)
    raise(ErrorCode::CkptCorrupt, "params.bin: payload length field disagrees with file size");
  const unsigned char* payload = blob.data() + 20;
  const uint64_t checksum = get_u64(payload + payload_len);
  if (Fnv1a64().update(payload, payload_len).value() != checksum)
    raise(ErrorCode::CkptCorrupt, "params.bin: checksum mismatch");

  Model m;
  try {
    m.cfg_ = config_from_json(manifest.at("config"));
    m.cfg_.validate();
    m.dtype_ = Dtype::F32;
    for (const auto& tok : manifest.at("native_vocab").get<std::vector<std::string>>())
      m.native_vocab_.add(tok);
    for (const auto& tok : manifest.at("nonnative_vocab").get<std::vector<std::string>>())
      m.nonnative_vocab_.add(tok);
    m.languages_ = manifest.at("languages").get<std::vector<std::string>>();

    uint64_t expected_offset = 0;
    for (const auto& rec : manifest.at("params")) {
      const auto name = rec.at("name").get<std::string>();
      const auto shape = rec.at("shape").get<std::vector<int>>();
      const auto offset = rec.at("offset").get<uint64_t>();
      if (offset != expected_offset)
        raise(ErrorCode::CkptCorrupt, "manifest offset for " + name + " is inconsistent");
      const size_t count = shape_numel(shape);
      if (offset + count * 4 > payload_len)
        raise(ErrorCode::CkptCorrupt,
              "manifest shapes exceed blob payload at parameter " + name);
      std::vector<double> values(count);
      for (size_t i = 0; i < count; ++i) {
        uint32_t bits = get_u32(payload + offset + i * 4);
        float f;
        std::memcpy(&f, &bits, 4);
        values[i] = static_cast<double>(f);
      }
      ParamEntry& e =
          m.reg_.add(name, component_from_name(rec.at("component").get<std::string>()),
                     rec.at("language").get<std::string>(),
                     Tensor::from(shape, std::move(values), Dtype::F32),
                     rec.at("row_sparse").get<bool>());
      e.trainable = rec.at("trainable").get<bool>();
      expected_offset = offset + count * 4;
    }
    if (expected_offset != payload_len)
      raise(ErrorCode::CkptCorrupt, "blob payload larger than manifest describes");
  } catch (const json::exception& e) {
    raise(ErrorCode::Parse, "manifest.json: " + std::string(e.what()));
  }

  // Wiring resolves every expected parameter name; a manifest missing one
  // fails here before the model escapes.
  try {
    m.wire();
  } catch (const Error& e) {
    raise(ErrorCode::CkptCorrupt, std::string("manifest incomplete: ") + e.what());
  }
  const ParamEntry& te = m.reg_.at("text.embed");
  if (te.tensor.dim(0) != m.native_vocab_.size())
    raise(ErrorCode::CkptCorrupt, "native vocabulary size disagrees with embedding table");
  const ParamEntry& u = m.reg_.at("nonnative.embed");
  if (u.tensor.dim(0) != m.nonnative_vocab_.size())
    raise(ErrorCode::CkptCorrupt, "non-native vocabulary size disagrees with embedding table");
  return m;
}

}  // namespace mla
