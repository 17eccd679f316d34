#include "parafill/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "parafill/hash.hpp"
#include "parafill/types.hpp"

namespace parafill::checkpoint {

namespace {

constexpr char kMagic[8] = {'P', 'F', 'C', 'K', 'P', 'T', '\0', '\1'};
constexpr std::size_t kDigestChars = 64;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::string_view take(std::size_t n) {
    if (data_.size() - pos_ < n) throw DataError("checkpoint truncated");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    std::memcpy(&v, take(4).data(), 4);
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

model::Transformer<float> Checkpoint::to_model() const {
  model::Transformer<float> m(config);
  if (m.params().size() != params.size()) throw DataError("checkpoint parameter count does not match its config");
  m.params() = params;
  return m;
}

std::string serialize(const Checkpoint& ckpt) {
  model::Layout layout(ckpt.config);
  if (layout.total() != ckpt.params.size()) throw UsageError("parameter count does not match the config");
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kFormatVersion);
  const std::string header = nlohmann::json{{"config", ckpt.config}, {"vocab_hash", ckpt.vocab_hash}, {"meta", ckpt.meta}}.dump();
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_u32(out, static_cast<std::uint32_t>(layout.tensors().size()));
  for (const auto& t : layout.tensors()) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.rows));
    put_u32(out, static_cast<std::uint32_t>(t.cols));
    out.append(reinterpret_cast<const char*>(ckpt.params.data() + t.offset), t.size() * sizeof(float));
  }
  out += sha256_hex(out);
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 4 + kDigestChars) throw DataError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw DataError("not a checkpoint file (bad magic)");
  std::string_view body(bytes.data(), bytes.size() - kDigestChars);
  if (sha256_hex(body) != std::string_view(bytes).substr(body.size()))
    throw DataError("checkpoint corrupted: checksum mismatch");

  Reader r(body);
  r.take(sizeof kMagic);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw DataError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kFormatVersion) + ")");
  Checkpoint ckpt;
  try {
    auto header = nlohmann::json::parse(r.take(r.u32()));
    ckpt.config = header.at("config").get<model::ModelConfig>();
    ckpt.vocab_hash = header.at("vocab_hash").get<std::string>();
    ckpt.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header invalid: ") + e.what());
  }
  ckpt.config.validate();
  model::Layout layout(ckpt.config);
  ckpt.params.assign(layout.total(), 0.0f);
  const std::uint32_t count = r.u32();
  if (count != layout.tensors().size()) throw DataError("checkpoint tensor count does not match its config");
  for (const auto& t : layout.tensors()) {
    const std::string_view name = r.take(r.u32());
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (name != t.name || rows != t.rows || cols != t.cols)
      throw DataError("checkpoint tensor " + std::string(name) + " does not match expected " + t.name);
    std::memcpy(ckpt.params.data() + t.offset, r.take(t.size() * sizeof(float)).data(), t.size() * sizeof(float));
  }
  if (!r.done()) throw DataError("checkpoint has trailing bytes");
  return ckpt;
}

void save(const std::filesystem::path& path, const model::Transformer<float>& model, const std::string& vocab_hash,
          const nlohmann::json& meta) {
  Checkpoint ckpt{model.config(), vocab_hash, meta, model.params()};
  write_file_atomic(path, serialize(ckpt));
}

Checkpoint load(const std::filesystem::path& path, const std::optional<std::string>& expected_vocab_hash) {
  Checkpoint ckpt = deserialize(read_file(path));
  if (expected_vocab_hash && *expected_vocab_hash != ckpt.vocab_hash)
    throw DataError("vocabulary hash mismatch: checkpoint " + ckpt.vocab_hash + ", vocabulary " + *expected_vocab_hash);
  return ckpt;
}

}  // namespace parafill::checkpoint
