#include "thgen/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace thgen::audio {

namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void check_rate(const Waveform& w) {
  require(w.sample_rate_hz == kSampleRate,
          "waveform: sample rate must be 16000 Hz, got " + std::to_string(w.sample_rate_hz));
}

}  // namespace

std::size_t num_frames(std::size_t num_samples, std::size_t window, std::size_t hop) {
  require(hop > 0, "num_frames: hop must be positive");
  require(num_samples >= window, "num_frames: waveform shorter than one window (" +
                                     std::to_string(num_samples) + " < " + std::to_string(window) + ")");
  return (num_samples - window) / hop + 1;
}

void fft_inplace(std::vector<double>& a) {
  const std::size_t n = a.size() / 2;
  require(a.size() % 2 == 0 && is_power_of_two(n), "fft: length must be a power of two");

  // Bit-reversal permutation over complex pairs.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(a[2 * i], a[2 * j]);
      std::swap(a[2 * i + 1], a[2 * j + 1]);
    }
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < half; ++j) {
        const double wr = std::cos(ang * static_cast<double>(j));
        const double wi = std::sin(ang * static_cast<double>(j));
        const std::size_t u = 2 * (i + j), v = 2 * (i + j + half);
        const double vr = a[v] * wr - a[v + 1] * wi;
        const double vi = a[v] * wi + a[v + 1] * wr;
        a[v] = a[u] - vr;
        a[v + 1] = a[u + 1] - vi;
        a[u] += vr;
        a[u + 1] += vi;
      }
    }
  }
}

Mat stft_power(const Waveform& w, std::size_t window, std::size_t hop, std::size_t n_fft) {
  check_rate(w);
  require(n_fft >= window && is_power_of_two(n_fft), "stft_power: n_fft must be a power of two >= window");
  const std::size_t frames = num_frames(w.samples.size(), window, hop);
  const std::size_t bins = n_fft / 2 + 1;

  std::vector<double> hann(window);
  for (std::size_t i = 0; i < window; ++i) {
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                   static_cast<double>(window));
  }

  Mat out(frames, bins);
  std::vector<double> buf;
  for (std::size_t t = 0; t < frames; ++t) {
    buf.assign(2 * n_fft, 0.0);
    const double* x = w.samples.data() + t * hop;
    for (std::size_t i = 0; i < window; ++i) buf[2 * i] = hann[i] * x[i];
    fft_inplace(buf);
    for (std::size_t k = 0; k < bins; ++k) {
      out(t, k) = buf[2 * k] * buf[2 * k] + buf[2 * k + 1] * buf[2 * k + 1];
    }
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Mat mel_filterbank(std::size_t n_mels, double f_min, double f_max, std::size_t n_fft,
                   int sample_rate_hz) {
  require(n_mels >= 1, "mel_filterbank: n_mels must be >= 1");
  require(f_min >= 0.0 && f_max > f_min && f_max <= sample_rate_hz / 2.0,
          "mel_filterbank: need 0 <= f_min < f_max <= Nyquist");
  const std::size_t bins = n_fft / 2 + 1;

  // n_mels + 2 edge points uniform on the mel scale.
  const double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);
  std::vector<double> edges_hz(n_mels + 2);
  for (std::size_t i = 0; i < edges_hz.size(); ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n_mels + 1);
    edges_hz[i] = mel_to_hz(mel_lo + frac * (mel_hi - mel_lo));
  }

  Mat fb(n_mels, bins);
  const double bin_hz = static_cast<double>(sample_rate_hz) / static_cast<double>(n_fft);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges_hz[m], center = edges_hz[m + 1], hi = edges_hz[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double wgt = 0.0;
      if (f > lo && f < center) {
        wgt = (f - lo) / (center - lo);
      } else if (f == center) {
        wgt = 1.0;
      } else if (f > center && f < hi) {
        wgt = (hi - f) / (hi - center);
      }
      fb(m, k) = wgt;
    }
  }
  return fb;
}

FbankSequence fbank(const Waveform& w, const FbankConfig& cfg) {
  check_rate(w);
  const Mat power = stft_power(w, cfg.window, cfg.hop, cfg.n_fft);
  const Mat fb = mel_filterbank(cfg.n_mels, cfg.f_min, cfg.f_max, cfg.n_fft, w.sample_rate_hz);

  FbankSequence seq;
  seq.n_mels = cfg.n_mels;
  seq.frames = Mat(power.rows, cfg.n_mels);
  for (std::size_t t = 0; t < power.rows; ++t) {
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < power.cols; ++k) e += fb(m, k) * power(t, k);
      seq.frames(t, m) = std::log(e + cfg.log_floor);
    }
  }
  return seq;
}

// ---- WAV IO ----

namespace {

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

[[noreturn]] void wav_error(const std::string& path, const std::string& what) {
  throw std::runtime_error("unsupported WAV file " + path + ": " + what);
}

}  // namespace

Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open WAV file " + path);

  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0) wav_error(path, "missing RIFF header");
  read_u32(in);  // riff size, unused
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0) wav_error(path, "not a WAVE form");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::vector<char> payload;

  while (in.read(tag, 4)) {
    std::uint32_t chunk_size = read_u32(in);
    if (!in) wav_error(path, "truncated chunk header");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (chunk_size < 16) wav_error(path, "fmt chunk too small");
      format = read_u16(in);
      channels = read_u16(in);
      rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      in.ignore(chunk_size - 16);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      payload.resize(chunk_size);
      in.read(payload.data(), chunk_size);
      if (static_cast<std::uint32_t>(in.gcount()) != chunk_size) wav_error(path, "truncated data chunk");
    } else {
      in.ignore(chunk_size + (chunk_size & 1));  // chunks are word-aligned
    }
  }

  if (!have_fmt) wav_error(path, "missing fmt chunk");
  if (format != 1) wav_error(path, "audio format " + std::to_string(format) + " (need PCM)");
  if (channels != 1) wav_error(path, std::to_string(channels) + " channels (need mono)");
  if (bits != 16) wav_error(path, std::to_string(bits) + "-bit samples (need 16)");
  if (rate != kSampleRate) wav_error(path, std::to_string(rate) + " Hz (need 16000)");
  if (payload.size() % 2 != 0) wav_error(path, "odd data chunk size");

  Waveform w;
  w.sample_rate_hz = static_cast<int>(rate);
  w.samples.resize(payload.size() / 2);
  for (std::size_t i = 0; i < w.samples.size(); ++i) {
    const std::int16_t s = static_cast<std::int16_t>(
        static_cast<unsigned char>(payload[2 * i]) |
        (static_cast<unsigned char>(payload[2 * i + 1]) << 8));
    w.samples[i] = static_cast<double>(s) / 32768.0;
  }
  return w;
}

void save_wav(const std::string& path, const Waveform& w) {
  require(w.sample_rate_hz == kSampleRate, "save_wav: sample rate must be 16000 Hz");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write WAV file " + path);

  const std::uint32_t data_size = static_cast<std::uint32_t>(w.samples.size() * 2);
  out.write("RIFF", 4);
  write_u32(out, 36 + data_size);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, kSampleRate);
  write_u32(out, kSampleRate * 2);  // byte rate
  write_u16(out, 2);                // block align
  write_u16(out, 16);               // bits
  out.write("data", 4);
  write_u32(out, data_size);
  for (double s : w.samples) {
    const double clamped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    const auto q = static_cast<std::int16_t>(std::lrint(clamped * 32768.0));
    write_u16(out, static_cast<std::uint16_t>(q));
  }
  if (!out) throw std::runtime_error("failed writing WAV file " + path);
}

}  // namespace thgen::audio
