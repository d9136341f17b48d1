#include "layerskip/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace layerskip {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

std::uint32_t crc_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers}, {"dim", c.dim},       {"n_heads", c.n_heads},
              {"vocab", c.vocab},       {"max_context", c.max_context}, {"ffn_hidden", c.ffn_hidden}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.dim = j.at("dim").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.max_context = j.at("max_context").get<int>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  return c;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, need(sizeof(U), what), sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  const char* take(std::size_t n, const char* what) {
    const char* p = need(n, what);
    pos_ += n;
    return p;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const char* need(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
    return bytes_.data() + pos_;
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelParams& params, const CheckpointMetadata& metadata) {
  std::string payload;
  payload.reserve(params.parameter_count() * sizeof(float));
  json manifest = json::array();
  params.for_each_parameter([&](const std::string& name, const Parameter& p) {
    manifest.push_back(json{{"name", name}, {"shape", p.value.shape()}});
    payload.append(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(float));
  });
  json header{{"model", config_to_json(params.config)},
              {"metadata", metadata},
              {"tensors", manifest},
              {"payload_crc32", crc_of(payload.data(), payload.size())}};
  const std::string header_text = header.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header_text.size());
  put<std::uint32_t>(out, crc_of(header_text.data(), header_text.size()));
  out += header_text;
  out += payload;
  return out;
}

void save_checkpoint(const ModelParams& params, const CheckpointMetadata& metadata, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params, metadata);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  const char* magic = in.take(4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("bad magic (not an LSKP checkpoint)", 0);
  const std::size_t version_at = in.pos();
  const auto version = in.get<std::uint32_t>("format version");
  if (version > kCheckpointVersion) {
    throw UnsupportedVersion("checkpoint format version " + std::to_string(version) + " is newer than supported version " +
                                 std::to_string(kCheckpointVersion),
                             version_at);
  }
  if (version == 0) throw CheckpointError("invalid format version 0", version_at);
  const auto header_len = in.get<std::uint64_t>("header length");
  const auto header_crc = in.get<std::uint32_t>("header checksum");
  const std::size_t header_at = in.pos();
  if (header_len > in.remaining()) throw CheckpointError("truncated checkpoint header", header_at);
  const char* header_bytes = in.take(header_len, "header");
  if (crc_of(header_bytes, header_len) != header_crc) throw CheckpointError("header checksum mismatch", header_at);

  json header;
  ModelConfig config;
  try {
    header = json::parse(header_bytes, header_bytes + header_len);
    config = config_from_json(header.at("model"));
    config.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed header: ") + e.what(), header_at);
  }

  Checkpoint ckpt;
  ckpt.params = ModelParams::zeros(config);
  ckpt.metadata = header.value("metadata", CheckpointMetadata{});
  const json& manifest = header.at("tensors");
  const std::size_t payload_at = in.pos();
  std::size_t index = 0;
  ckpt.params.for_each_parameter([&](const std::string& name, Parameter& p) {
    if (index >= manifest.size()) throw CheckpointError("manifest is missing tensor " + name, header_at);
    const json& entry = manifest[index++];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("shape").get<std::vector<std::size_t>>() != p.value.shape()) {
      throw CheckpointError("manifest entry " + std::to_string(index - 1) + " does not match " + name, header_at);
    }
    const std::size_t n = p.value.size() * sizeof(float);
    const std::size_t at = in.pos();
    if (n > in.remaining()) throw CheckpointError("truncated tensor data for " + name, at);
    std::memcpy(p.value.data(), in.take(n, "tensor data"), n);
  });
  if (index != manifest.size()) throw CheckpointError("manifest lists extra tensors", header_at);
  if (in.remaining() != 0) throw CheckpointError("trailing bytes after tensor data", in.pos());
  const auto expected_crc = header.at("payload_crc32").get<std::uint32_t>();
  if (crc_of(bytes.data() + payload_at, bytes.size() - payload_at) != expected_crc) {
    throw CheckpointError("tensor payload checksum mismatch", payload_at);
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace layerskip
