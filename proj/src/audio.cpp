#include "ser/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ser {

namespace {

std::uint32_t read_u32(const char* p) {
  const auto* u = reinterpret_cast<const unsigned char*>(p);
  return std::uint32_t(u[0]) | std::uint32_t(u[1]) << 8 | std::uint32_t(u[2]) << 16 |
         std::uint32_t(u[3]) << 24;
}

std::uint16_t read_u16(const char* p) {
  const auto* u = reinterpret_cast<const unsigned char*>(p);
  return std::uint16_t(u[0] | u[1] << 8);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

struct WavLayout {
  int sample_rate = 0;
  int bits = 0;
  bool is_float = false;
  std::size_t data_offset = 0;
  std::size_t data_bytes = 0;
};

WavLayout parse_header(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw Error(name + ": not a RIFF/WAVE file");
  WavLayout layout;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const std::size_t size = read_u32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (size < 16 || body + size > bytes.size()) throw Error(name + ": truncated fmt chunk");
      std::uint16_t format = read_u16(bytes.data() + body);
      const std::uint16_t channels = read_u16(bytes.data() + body + 2);
      layout.sample_rate = static_cast<int>(read_u32(bytes.data() + body + 4));
      layout.bits = read_u16(bytes.data() + body + 14);
      if (format == 0xfffe && size >= 26) format = read_u16(bytes.data() + body + 24);
      if (channels != 1)
        throw Error(name + ": expected mono audio, got " + std::to_string(channels) + " channels");
      if (format == 1 && layout.bits == 16) {
        layout.is_float = false;
      } else if (format == 3 && layout.bits == 32) {
        layout.is_float = true;
      } else {
        throw Error(name + ": unsupported WAV encoding (format " + std::to_string(format) + ", " +
                    std::to_string(layout.bits) + " bits)");
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw Error(name + ": data chunk before fmt chunk");
      layout.data_offset = body;
      layout.data_bytes = std::min(size, bytes.size() - body);
      return layout;
    }
    pos = body + size + (size & 1);
  }
  throw Error(name + ": missing data chunk");
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

AudioClip decode(const std::string& bytes, const WavLayout& layout, std::size_t first,
                 std::size_t count) {
  AudioClip clip;
  clip.sample_rate = layout.sample_rate;
  clip.samples.resize(static_cast<Index>(count));
  const std::size_t width = static_cast<std::size_t>(layout.bits / 8);
  const char* base = bytes.data() + layout.data_offset + first * width;
  for (std::size_t i = 0; i < count; ++i) {
    if (layout.is_float) {
      float v;
      std::uint32_t raw = read_u32(base + i * 4);
      std::memcpy(&v, &raw, 4);
      clip.samples[static_cast<Index>(i)] = v;
    } else {
      const auto raw = static_cast<std::int16_t>(read_u16(base + i * 2));
      clip.samples[static_cast<Index>(i)] = raw / 32768.0;
    }
  }
  return clip;
}

}  // namespace

void validate(const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw Error("audio clip has non-positive sample rate");
  if (clip.samples.size() == 0) throw Error("audio clip is empty");
  if (!clip.samples.allFinite()) throw Error("audio clip contains non-finite samples");
}

AudioClip read_wav(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  const WavLayout layout = parse_header(bytes, path.string());
  const std::size_t count = layout.data_bytes / static_cast<std::size_t>(layout.bits / 8);
  return decode(bytes, layout, 0, count);
}

AudioClip read_wav_range(const std::filesystem::path& path, double begin_s, double end_s) {
  const std::string bytes = slurp(path);
  const WavLayout layout = parse_header(bytes, path.string());
  const auto total = static_cast<long long>(layout.data_bytes / static_cast<std::size_t>(layout.bits / 8));
  const auto first = std::clamp<long long>(std::llround(begin_s * layout.sample_rate), 0, total);
  const auto last = std::clamp<long long>(std::llround(end_s * layout.sample_rate), first, total);
  return decode(bytes, layout, static_cast<std::size_t>(first), static_cast<std::size_t>(last - first));
}

std::string encode_wav_pcm16(const AudioClip& clip) {
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (Index i = 0; i < clip.samples.size(); ++i) {
    const double v = std::clamp(clip.samples[i], -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(std::clamp(v * 32768.0, -32768.0, 32767.0)));
    put_u16(out, static_cast<std::uint16_t>(q));
  }
  return out;
}

void write_wav_pcm16(const std::filesystem::path& path, const AudioClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::string bytes = encode_wav_pcm16(clip);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace ser
