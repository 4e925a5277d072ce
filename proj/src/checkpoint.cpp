#include "blockrank/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <memory>

namespace blockrank {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 8> kMagic = {'B', 'L', 'K', 'R', 'A', 'N', 'K', '\x01'};
constexpr std::uint32_t kFormatVersion = 1;

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256 update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw Error("sha256 final failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kHex[md[i] >> 4];
      out += kHex[md[i] & 0xf];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

struct NamedTensor {
  std::string name;
  const Mat<float>* data;
};

std::vector<NamedTensor> collect(const Parameters<float>& p, const std::string& prefix) {
  std::vector<NamedTensor> out;
  p.for_each([&](const std::string& name, const Mat<float>& m) { out.push_back({prefix + name, &m}); });
  return out;
}

template <typename Int>
void write_le(std::ostream& out, Int v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename Int>
Int read_le(std::istream& in) {
  Int v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw Error("checkpoint truncated");
  return v;
}

}  // namespace

nlohmann::json CheckpointMeta::to_json() const {
  return {{"step", step}, {"config", config}, {"metrics", metrics}, {"content_digest", content_digest}};
}

CheckpointMeta CheckpointMeta::from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.step = j.value("step", 0);
  m.config = j.value("config", nlohmann::json::object());
  m.metrics = j.value("metrics", nlohmann::json::object());
  m.content_digest = j.value("content_digest", std::string());
  return m;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

template <typename T>
std::string parameter_digest(const Parameters<T>& params) {
  Sha256 h;
  params.for_each([&](const std::string&, const Mat<T>& m) {
    h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(T));
  });
  return h.hex();
}

template std::string parameter_digest<float>(const Parameters<float>&);
template std::string parameter_digest<double>(const Parameters<double>&);

CheckpointMeta save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                               const Parameters<float>& params, const OptimizerState* optimizer,
                               CheckpointMeta meta) {
  auto tensors = collect(params, "");
  if (optimizer) {
    for (auto& t : collect(optimizer->m, "optim.m.")) tensors.push_back(t);
    for (auto& t : collect(optimizer->v, "optim.v.")) tensors.push_back(t);
  }

  Sha256 digest;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.data->size()) * sizeof(float);
    entries.push_back({{"name", t.name},
                       {"shape", {t.data->rows(), t.data->cols()}},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    digest.update(t.data->data(), nbytes);
    offset += nbytes;
  }
  meta.content_digest = digest.hex();

  nlohmann::json manifest = {
      {"format", "blockrank-checkpoint"},
      {"version", kFormatVersion},
      {"dtype", "float32"},
      {"endianness", "little"},
      {"config", cfg.to_json()},
      {"tensors", std::move(entries)},
      {"optimizer_step", optimizer ? optimizer->step : -1},
      {"meta", meta.to_json()},
  };
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(out, kFormatVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.data->data()),
              static_cast<std::streamsize>(static_cast<std::size_t>(t.data->size()) * sizeof(float)));
  if (!out) throw Error("failed writing checkpoint " + path.string());
  return meta;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw Error(path.string() + " is not a blockrank checkpoint");
  const auto version = read_le<std::uint32_t>(in);
  if (version != kFormatVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto manifest_len = read_le<std::uint64_t>(in);
  std::string text(manifest_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_len));
  if (!in) throw Error("checkpoint manifest truncated");
  const auto manifest = nlohmann::json::parse(text);
  if (manifest.at("dtype") != "float32") throw Error("unsupported checkpoint dtype");

  Checkpoint ck;
  ck.config = ModelConfig::from_json(manifest.at("config"));
  ck.meta = CheckpointMeta::from_json(manifest.at("meta"));
  ck.params = init_parameters<float>(ck.config, 0);
  const int opt_step = manifest.value("optimizer_step", -1);
  if (opt_step >= 0) {
    ck.optimizer = OptimizerState{ck.params.zeros_like(), ck.params.zeros_like(), opt_step};
  }

  std::vector<NamedTensor> targets = collect(ck.params, "");
  if (ck.optimizer) {
    for (auto& t : collect(ck.optimizer->m, "optim.m.")) targets.push_back(t);
    for (auto& t : collect(ck.optimizer->v, "optim.v.")) targets.push_back(t);
  }
  const auto& entries = manifest.at("tensors");
  if (entries.size() != targets.size())
    throw Error("checkpoint holds " + std::to_string(entries.size()) + " tensors, expected " +
                std::to_string(targets.size()));

  Sha256 digest;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& e = entries[i];
    auto* dst = const_cast<Mat<float>*>(targets[i].data);
    if (e.at("name") != targets[i].name) throw Error("unexpected tensor " + e.at("name").get<std::string>());
    const auto rows = e.at("shape").at(0).get<Eigen::Index>();
    const auto cols = e.at("shape").at(1).get<Eigen::Index>();
    if (rows != dst->rows() || cols != dst->cols()) throw Error("shape mismatch for " + targets[i].name);
    const auto nbytes = static_cast<std::streamsize>(dst->size() * static_cast<Eigen::Index>(sizeof(float)));
    in.read(reinterpret_cast<char*>(dst->data()), nbytes);
    if (!in) throw Error("checkpoint payload truncated at " + targets[i].name);
    digest.update(dst->data(), static_cast<std::size_t>(nbytes));
  }
  if (digest.hex() != ck.meta.content_digest) throw Error("checkpoint digest mismatch for " + path.string());
  return ck;
}

}  // namespace blockrank
