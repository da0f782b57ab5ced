#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <json.hpp>
#include <memory>

#include "less/cli.hpp"

#ifndef LESS_VERSION
#define LESS_VERSION "unknown"
#endif

namespace less::cli {
namespace {

class Sha1 {
 public:
  Sha1() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha1(), nullptr) != 1) throw std::runtime_error("SHA-1 init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("SHA-1 update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw std::runtime_error("SHA-1 final failed");
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

void blob_header(Sha1& h, std::uintmax_t size) {
  const std::string head = "blob " + std::to_string(size);
  h.update(head.data(), head.size() + 1);  // includes the NUL
}

}  // namespace

std::string git_hash(std::string_view content) {
  Sha1 h;
  blob_header(h, content.size());
  h.update(content.data(), content.size());
  return h.hex();
}

std::string git_hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact(path);
  Sha1 h;
  blob_header(h, std::filesystem::file_size(path));
  std::array<char, 1 << 16> buf;
  while (is) {
    is.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return h.hex();
}

std::filesystem::path Manifest::write(const RunConfig& cfg) const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["version"] = LESS_VERSION;
  j["compiler"] = __VERSION__;
  j["seed"] = cfg.seed;
  j["model_seed"] = cfg.effective_model_seed();

  const auto entries = cfg.entries();
  std::string canonical;
  for (const auto& [k, v] : entries) canonical += k + "=" + v + "\n";
  j["config"] = entries;
  j["config_hash"] = git_hash(canonical);

  auto& in = j["inputs"] = nlohmann::ordered_json::object();
  for (const auto& [label, path] : inputs) in[label] = {{"path", path}, {"hash", git_hash_file(path)}};
  auto& outs = j["outputs"] = nlohmann::ordered_json::object();
  for (const auto& rel : outputs) outs[rel.generic_string()] = git_hash_file(cfg.out / rel);
  if (!notes.empty()) j["options"] = notes;

  const auto dir = cfg.out / "manifests";
  std::filesystem::create_directories(dir);
  const auto path = dir / (command + ".json");
  std::ofstream os(path, std::ios::binary);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return path;
}

}  // namespace less::cli
