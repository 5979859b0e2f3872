#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "thgen/mat.hpp"

namespace thgen::audio {

constexpr int kSampleRate = 16000;

// Mono waveform; only 16 kHz material is accepted anywhere downstream.
struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate_hz = kSampleRate;
};

struct FbankConfig {
  std::size_t n_mels = 80;
  std::size_t window = 320;  // 20 ms @ 16 kHz
  std::size_t hop = 160;     // 10 ms
  std::size_t n_fft = 512;
  double f_min = 0.0;
  double f_max = 8000.0;
  double log_floor = 1e-10;
};

struct FbankSequence {
  Mat frames;  // T x n_mels log-mel energies
  int frame_shift_ms = 10;
  int frame_length_ms = 20;
  std::size_t n_mels = 80;
};

// floor((num_samples - window)/hop) + 1; throws if num_samples < window.
std::size_t num_frames(std::size_t num_samples, std::size_t window = 320, std::size_t hop = 160);

// Hann-windowed, zero-padded power spectra: T x (n_fft/2 + 1).
Mat stft_power(const Waveform& w, std::size_t window = 320, std::size_t hop = 160,
               std::size_t n_fft = 512);

// Triangular filters with centers uniform on the mel scale: n_mels x (n_fft/2 + 1).
Mat mel_filterbank(std::size_t n_mels = 80, double f_min = 0.0, double f_max = 8000.0,
                   std::size_t n_fft = 512, int sample_rate_hz = kSampleRate);

FbankSequence fbank(const Waveform& w, const FbankConfig& cfg = {});

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// In-place radix-2 FFT over interleaved complex data (re, im, re, im, ...).
// Length must be a power of two.
void fft_inplace(std::vector<double>& interleaved);

// RIFF/WAVE, PCM 16-bit little-endian, mono, 16 kHz; samples scaled by 1/32768.
// Anything else raises std::runtime_error naming the offending field.
Waveform load_wav(const std::string& path);
void save_wav(const std::string& path, const Waveform& w);

}  // namespace thgen::audio
