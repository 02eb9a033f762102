// SPDX-License-Identifier: Apache-2.0
//
// Procedural, class-conditioned image dataset. Each class has a distinct
// pattern family; some are local textures (bars, gratings, checkers), some
// are global layouts (which half of the image is bright), so both the
// convolutional and the token path have something to pick up.
//
// Pattern families (class c uses family c % 10; c / 10 shifts the spatial
// frequency band so more than ten classes stay separable):
//   0 horizontal bars      5 ring
//   1 vertical bars        6 checkerboard
//   2 diagonal bars        7 bright left half
//   3 anti-diagonal bars   8 bright top half
//   4 gaussian blob        9 fine grating, random orientation
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dmf/error.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

struct DatasetSpec {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t classes = 10;
  std::size_t samples = 2000;
  double noise = 0.25;
  std::uint64_t seed = 0;
};

class SynthDataset {
 public:
  static constexpr std::size_t kFamilies = 10;

  explicit SynthDataset(DatasetSpec spec) : spec_(spec) {
    if (spec_.image_size < 8) throw ConfigError("dataset: image_size must be at least 8");
    if (spec_.channels == 0) throw ConfigError("dataset: channels must be positive");
    if (spec_.classes < 2) throw ConfigError("dataset: at least two classes are required");
    if (spec_.samples < spec_.classes)
      throw ConfigError("dataset: samples (" + std::to_string(spec_.samples) + ") fewer than classes (" +
                        std::to_string(spec_.classes) + ")");
    const std::size_t S = sample_numel();
    images_.resize(spec_.samples * S);
    labels_.resize(spec_.samples);
    for (std::size_t i = 0; i < spec_.samples; ++i) {
      labels_[i] = static_cast<int>(i % spec_.classes);  // balanced by construction
      render(i, labels_[i], std::span<float>(images_.data() + i * S, S));
    }
  }

  const DatasetSpec& spec() const { return spec_; }
  std::size_t size() const { return spec_.samples; }
  std::size_t sample_numel() const { return spec_.channels * spec_.image_size * spec_.image_size; }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  std::span<const float> image(std::size_t i) const {
    return {images_.data() + i * sample_numel(), sample_numel()};
  }

  /// Stacks the given samples into an [n, C, H, W] tensor plus labels.
  template <class T>
  std::pair<Tensor<T>, std::vector<int>> batch(const std::vector<std::size_t>& idx) const {
    const std::size_t S = sample_numel();
    std::vector<T> data(idx.size() * S);
    std::vector<int> y(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (idx[b] >= size()) throw ConfigError("dataset: sample index out of range");
      const auto img = image(idx[b]);
      std::transform(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(b * S),
                     [](float v) { return static_cast<T>(v); });
      y[b] = labels_[idx[b]];
    }
    return {Tensor<T>::from({idx.size(), spec_.channels, spec_.image_size, spec_.image_size}, std::move(data)), y};
  }

  /// Raw dump: little-endian header (u32 count, u32 C, u32 H, u32 W) followed by
  /// float32 images, then one int32 label per sample.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("dataset: cannot write '" + path + "'");
    const std::uint32_t hdr[4] = {static_cast<std::uint32_t>(size()), static_cast<std::uint32_t>(spec_.channels),
                                  static_cast<std::uint32_t>(spec_.image_size),
                                  static_cast<std::uint32_t>(spec_.image_size)};
    out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    out.write(reinterpret_cast<const char*>(images_.data()), static_cast<std::streamsize>(images_.size() * 4));
    std::vector<std::int32_t> l(labels_.begin(), labels_.end());
    out.write(reinterpret_cast<const char*>(l.data()), static_cast<std::streamsize>(l.size() * 4));
    if (!out) throw FormatError("dataset: write to '" + path + "' failed");
  }

  /// Binary PPM (P6) of one sample, channels 0..2 mapped to RGB.
  void save_ppm(std::size_t i, const std::string& path) const {
    const std::size_t H = spec_.image_size, C = spec_.channels;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("dataset: cannot write '" + path + "'");
    out << "P6\n" << H << " " << H << "\n255\n";
    const auto img = image(i);
    for (std::size_t p = 0; p < H * H; ++p)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = img[std::min(c, C - 1) * H * H + p];
        out.put(static_cast<char>(std::clamp(static_cast<int>(std::lround(127.5f + 60.0f * v)), 0, 255)));
      }
  }

 private:
  void render(std::size_t index, int cls, std::span<float> dst) const {
    // Per-sample stream: independent of generation order.
    std::seed_seq seq{static_cast<std::uint32_t>(spec_.seed), static_cast<std::uint32_t>(spec_.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spec_.noise);

    const std::size_t H = spec_.image_size, C = spec_.channels;
    const double n = static_cast<double>(H);
    const int family = cls % static_cast<int>(kFamilies);
    const double band = 1.0 + 0.5 * static_cast<double>(cls / static_cast<int>(kFamilies));
    const double two_pi = 2.0 * std::numbers::pi;

    const double phase = two_pi * u(rng);
    const double cycles = band * (2.0 + 2.0 * u(rng));   // 2..4 cycles per image for bar families
    const double fine = std::max(2.5, (3.0 + u(rng)) / band);  // grating period in pixels
    const double theta = std::numbers::pi * u(rng);
    const double cx = n * (0.3 + 0.4 * u(rng)), cy = n * (0.3 + 0.4 * u(rng));
    const double sigma = n * (0.08 + 0.08 * u(rng)) / band;
    const double radius = n * (0.2 + 0.12 * u(rng)) / band;
    const double width = n * 0.06;
    const double checker = std::max(2.0, n * (0.12 + 0.1 * u(rng)) / band);
    const double split = n * (0.4 + 0.2 * u(rng));

    std::vector<double> gain(C);
    for (auto& g : gain) g = 0.6 + 0.8 * u(rng);
    const double offset = 0.4 * (u(rng) - 0.5);

    std::vector<double> pattern(H * H);
    for (std::size_t yi = 0; yi < H; ++yi)
      for (std::size_t xi = 0; xi < H; ++xi) {
        const double x = static_cast<double>(xi) + 0.5, y = static_cast<double>(yi) + 0.5;
        double v = 0.0;
        switch (family) {
          case 0: v = std::sin(two_pi * cycles * y / n + phase); break;
          case 1: v = std::sin(two_pi * cycles * x / n + phase); break;
          case 2: v = std::sin(two_pi * cycles * (x + y) / (n * std::numbers::sqrt2) + phase); break;
          case 3: v = std::sin(two_pi * cycles * (x - y) / (n * std::numbers::sqrt2) + phase); break;
          case 4: {
            const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            v = 2.0 * std::exp(-r2 / (2.0 * sigma * sigma)) - 0.5;
            break;
          }
          case 5: {
            const double r = std::hypot(x - cx, y - cy);
            v = 2.0 * std::exp(-(r - radius) * (r - radius) / (2.0 * width * width)) - 0.5;
            break;
          }
          case 6: {
            const int a = static_cast<int>(std::floor(x / checker)), b = static_cast<int>(std::floor(y / checker));
            v = ((a + b) % 2 == 0) ? 1.0 : -1.0;
            break;
          }
          case 7: v = x < split ? 1.0 : -1.0; break;
          case 8: v = y < split ? 1.0 : -1.0; break;
          default: {
            const double t = x * std::cos(theta) + y * std::sin(theta);
            v = std::sin(two_pi * t / fine + phase);
            break;
          }
        }
        pattern[yi * H + xi] = v;
      }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * H; ++p)
        dst[c * H * H + p] = static_cast<float>(gain[c] * pattern[p] + offset + noise(rng));
  }

  DatasetSpec spec_;
  std::vector<float> images_;
  std::vector<int> labels_;
};

}  // namespace dmf
