#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "ser/nn.hpp"

namespace ser::nn {

/// Model checkpoint container, little-endian:
///   "SERM" | u16 version | u32 input_dim | u32 n_layers
///   per layer: u32 units | u8 activation | f64 dropout | u8 batch_norm
///              | weight (units x fan_in, row-major f32) | bias f32
///              | [gamma, beta, running_mean, running_var] f32 when batch_norm
///   u8 has_optimizer
///   [u8 kind | f64 lr | f64 beta1 | f64 beta2 | f64 rms_decay | f64 epsilon
///    | u64 steps | u64 n | n f32 first moment | n f32 second moment]
/// Parameters are stored as float32.
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  Mlp model;
  std::optional<Optimizer> optimizer;
};

std::string encode_checkpoint(const Mlp& model, const Optimizer* optimizer = nullptr);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const Mlp& model, const Optimizer* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ser::nn
