#include "ser/common.hpp"

namespace ser {

std::string to_string(Task task) {
  return task == Task::valence ? "valence" : "arousal";
}

Task parse_task(const std::string& name) {
  if (name == "valence") return Task::valence;
  if (name == "arousal") return Task::arousal;
  throw Error("unknown task '" + name + "'");
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& salt) {
  // FNV-1a over the salt, folded with the seed through splitmix64.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : salt) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace ser
