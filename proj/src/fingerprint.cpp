#include "ser/fingerprint.hpp"

#include <array>
#include <fstream>

#include <json.hpp>
#include <openssl/evp.h>

#include "binary_io.hpp"
#include "ser/common.hpp"

namespace ser {

using nlohmann::json;

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(detail::read_file(path.string())); }

RunManifest::RunManifest(std::filesystem::path run_dir) : run_dir_(std::move(run_dir)) {}

RunManifest RunManifest::load(const std::filesystem::path& run_dir) {
  RunManifest m(run_dir);
  const auto path = run_dir / "run_manifest.json";
  if (!std::filesystem::exists(path)) return m;
  try {
    const json j = json::parse(detail::read_file(path.string()));
    for (const auto& [name, a] : j.at("artifacts").items()) {
      ArtifactRecord r;
      r.path = a.at("path").get<std::string>();
      r.sha256 = a.at("sha256").get<std::string>();
      r.kind = a.at("kind").get<std::string>();
      r.command = a.value("command", std::string());
      r.inputs = a.value("inputs", std::map<std::string, std::string>());
      m.artifacts_[name] = std::move(r);
    }
  } catch (const json::exception& e) {
    throw Error(path.string() + ": malformed run manifest: " + e.what());
  }
  return m;
}

void RunManifest::save() const {
  json artifacts = json::object();
  for (const auto& [name, r] : artifacts_)
    artifacts[name] = {{"path", r.path}, {"sha256", r.sha256}, {"kind", r.kind}, {"command", r.command},
                       {"inputs", r.inputs}};
  std::filesystem::create_directories(run_dir_);
  detail::write_file((run_dir_ / "run_manifest.json").string(), json{{"artifacts", artifacts}}.dump(2) + "\n");
}

const ArtifactRecord& RunManifest::record(const std::string& name, const std::string& relative,
                                          const std::string& kind, const std::string& command,
                                          std::map<std::string, std::string> inputs) {
  ArtifactRecord r{relative, sha256_file(resolve(relative)), kind, command, std::move(inputs)};
  return artifacts_[name] = std::move(r);
}

const ArtifactRecord* RunManifest::find(const std::string& name) const {
  auto it = artifacts_.find(name);
  return it == artifacts_.end() ? nullptr : &it->second;
}

std::string RunManifest::verify(const std::string& name, const std::optional<std::string>& kind) const {
  const ArtifactRecord* r = find(name);
  if (!r) throw Error("fingerprint check failed: no '" + name + "' artifact recorded in " + run_dir_.string());
  if (kind && r->kind != *kind)
    throw Error("fingerprint check failed: '" + name + "' has kind '" + r->kind + "', expected '" + *kind + "'");
  const auto path = resolve(r->path);
  if (!std::filesystem::exists(path)) throw Error("fingerprint check failed: " + path.string() + " is missing");
  const std::string actual = sha256_file(path);
  if (actual != r->sha256)
    throw Error("fingerprint mismatch for '" + name + "' (" + path.string() +
                "): the file changed since it was recorded; rerun the producing command");
  return actual;
}

}  // namespace ser
