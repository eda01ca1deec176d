#include "psep/wave.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace psep {

namespace {

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(b[0]) | uint16_t(b[1]) << 8;
}

void write_u32(std::ostream& out, uint32_t v) {
  char b[4] = {char(v & 0xff), char(v >> 8 & 0xff), char(v >> 16 & 0xff), char(v >> 24 & 0xff)};
  out.write(b, 4);
}

void write_u16(std::ostream& out, uint16_t v) {
  char b[2] = {char(v & 0xff), char(v >> 8 & 0xff)};
  out.write(b, 2);
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_wav: cannot open " + path);

  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0)
    throw std::runtime_error("read_wav: not a RIFF file: " + path);
  read_u32(in);  // riff size
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0)
    throw std::runtime_error("read_wav: not a WAVE file: " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  bool have_fmt = false;
  Waveform w;

  // Walk chunks; only fmt and data matter, anything else is skipped.
  while (in) {
    in.read(tag, 4);
    if (!in) break;
    uint32_t size = read_u32(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = read_u16(in);
      channels = read_u16(in);
      sample_rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw std::runtime_error("read_wav: data chunk before fmt: " + path);
      if (format != 1) throw std::runtime_error("read_wav: PCM required: " + path);
      if (channels != 1) throw std::runtime_error("read_wav: mono required: " + path);
      if (bits != 16) throw std::runtime_error("read_wav: 16-bit samples required: " + path);
      const uint32_t n = size / 2;
      std::vector<char> raw(size);
      in.read(raw.data(), size);
      if (!in) throw std::runtime_error("read_wav: truncated data chunk: " + path);
      w.samples.resize(n);
      for (uint32_t i = 0; i < n; ++i) {
        int16_t s = int16_t(uint16_t(uint8_t(raw[2 * i])) | uint16_t(uint8_t(raw[2 * i + 1])) << 8);
        w.samples[i] = s / 32768.0;
      }
      w.sample_rate_hz = static_cast<int>(sample_rate);
      return w;
    } else {
      in.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw std::runtime_error("read_wav: no data chunk found: " + path);
}

void write_wav(const std::string& path, const Waveform& w) {
  if (w.sample_rate_hz <= 0) throw std::invalid_argument("write_wav: sample_rate_hz must be > 0");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_wav: cannot open " + path);

  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  const uint32_t data_bytes = n * 2;
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, static_cast<uint32_t>(w.sample_rate_hz));
  write_u32(out, static_cast<uint32_t>(w.sample_rate_hz) * 2);
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (uint32_t i = 0; i < n; ++i) {
    double v = std::lrint(w.samples[i] * 32768.0);
    if (v > 32767.0) v = 32767.0;
    if (v < -32768.0) v = -32768.0;
    auto s = static_cast<int16_t>(v);
    char b[2] = {char(uint16_t(s) & 0xff), char(uint16_t(s) >> 8 & 0xff)};
    out.write(b, 2);
  }
  if (!out) throw std::runtime_error("write_wav: write failed: " + path);
}

}  // namespace psep
