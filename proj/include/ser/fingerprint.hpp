#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace ser {

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

struct ArtifactRecord {
  std::string path;  // relative to the run directory
  std::string sha256;
  std::string kind;
  std::string command;
  std::map<std::string, std::string> inputs;  // artifact name -> fingerprint consumed
};

/// `run_manifest.json` of a run directory: every artifact a command wrote,
/// with its content hash and the fingerprints of the inputs it was built from.
class RunManifest {
public:
  explicit RunManifest(std::filesystem::path run_dir);

  /// Reads the manifest if one exists.
  static RunManifest load(const std::filesystem::path& run_dir);
  void save() const;

  const std::filesystem::path& run_dir() const { return run_dir_; }
  std::filesystem::path resolve(const std::string& relative) const { return run_dir_ / relative; }

  /// Hashes the file at `relative` and records it under `name`.
  const ArtifactRecord& record(const std::string& name, const std::string& relative, const std::string& kind,
                               const std::string& command, std::map<std::string, std::string> inputs = {});
  const ArtifactRecord* find(const std::string& name) const;

  /// Checks that `name` was recorded, still hashes to its fingerprint and,
  /// when given, has the expected kind. Returns the fingerprint.
  std::string verify(const std::string& name, const std::optional<std::string>& kind = std::nullopt) const;

  const std::map<std::string, ArtifactRecord>& artifacts() const { return artifacts_; }

private:
  std::filesystem::path run_dir_;
  std::map<std::string, ArtifactRecord> artifacts_;
};

}  // namespace ser
