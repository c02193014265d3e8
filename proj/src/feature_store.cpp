#include "ser/feature_store.hpp"

#include <fstream>
#include <iterator>

#include "binary_io.hpp"

namespace ser {

namespace detail {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path);
}

}  // namespace detail

std::string encode_feature_store(const FeatureTable& table) {
  table.validate();
  detail::ByteWriter w;
  w.put_bytes("SERF");
  w.put(kFeatureStoreVersion);
  w.put(static_cast<std::uint64_t>(table.rows()));
  w.put(static_cast<std::uint32_t>(table.dim()));
  w.put(static_cast<std::uint8_t>(table.kind));
  w.put(static_cast<std::uint8_t>(table.normalization));
  for (Index i = 0; i < table.rows(); ++i)
    for (Index j = 0; j < table.dim(); ++j) w.put(static_cast<float>(table.matrix(i, j)));
  for (const auto& id : table.utterance_ids) w.put_string(id);
  return w.bytes();
}

FeatureTable decode_feature_store(const std::string& bytes, const std::string& what) {
  detail::ByteReader r(bytes, what);
  if (r.get_bytes(4) != "SERF") throw Error(what + ": bad magic, not a feature store");
  const auto version = r.get<std::uint16_t>();
  if (version != kFeatureStoreVersion) throw Error(what + ": unsupported version " + std::to_string(version));
  const auto rows = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint32_t>();
  const auto kind = r.get<std::uint8_t>();
  const auto norm = r.get<std::uint8_t>();
  if (kind > 2) throw Error(what + ": unknown feature kind " + std::to_string(kind));
  if (norm > 1) throw Error(what + ": unknown normalization " + std::to_string(norm));
  FeatureTable table;
  table.kind = static_cast<FeatureKind>(kind);
  table.normalization = static_cast<Normalization>(norm);
  table.matrix.resize(static_cast<Index>(rows), static_cast<Index>(dim));
  for (Index i = 0; i < table.rows(); ++i)
    for (Index j = 0; j < table.dim(); ++j) table.matrix(i, j) = r.get<float>();
  table.utterance_ids.reserve(rows);
  for (std::uint64_t i = 0; i < rows; ++i) table.utterance_ids.push_back(r.get_string());
  if (!r.at_end()) throw Error(what + ": trailing bytes after id table");
  table.validate();
  return table;
}

void write_feature_store(const std::filesystem::path& path, const FeatureTable& table) {
  detail::write_file(path.string(), encode_feature_store(table));
}

FeatureTable read_feature_store(const std::filesystem::path& path) {
  return decode_feature_store(detail::read_file(path.string()), path.string());
}

}  // namespace ser
