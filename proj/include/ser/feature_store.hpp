#pragma once

#include <filesystem>
#include <string>

#include "ser/features.hpp"

namespace ser {

/// Binary feature store:
///   "SERF" | u16 version | u64 n_rows | u32 dim | u8 feature_kind | u8 normalization
///   | n_rows*dim float32, row-major | n_rows x (u32 length, UTF-8 id)
/// All integers and floats little-endian. Values are stored as float32.
inline constexpr std::uint16_t kFeatureStoreVersion = 1;

std::string encode_feature_store(const FeatureTable& table);
FeatureTable decode_feature_store(const std::string& bytes, const std::string& what = "feature store");

void write_feature_store(const std::filesystem::path& path, const FeatureTable& table);
FeatureTable read_feature_store(const std::filesystem::path& path);

}  // namespace ser
