#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace memvit {

// Procedural texture classification task. A texture family (family_seed)
// fixes a pool of integer-frequency gratings with colors; the label rule
// (seed) picks, for every class, a subset of the pool with amplitudes. Two
// specs sharing family_seed but differing in seed form a transfer pair.
struct SyntheticTaskSpec {
  std::uint64_t seed = 1;
  std::uint64_t family_seed = 1;
  std::size_t num_classes = 10;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t samples_per_class = 100;
  std::size_t freq_min = 1;  // cycles per image
  std::size_t freq_max = 6;
  std::size_t pool_size = 12;
  std::size_t gratings_per_class = 3;
  double noise_std = 0.1;
  double overlap = 0.0;  // 0 = distinct signatures, 1 = identical classes
  double amplitude_jitter = 0.2;
  double test_fraction = 0.2;
  double holdout_fraction = 0.05;

  // Throws ConfigError on an invalid spec.
  void validate() const;
};

struct Grating {
  int fx = 1, fy = 0;
  std::vector<double> color;  // per channel
};

// Expected spectral signature of one class: amplitude per pool grating.
struct ClassSignature {
  std::vector<double> amplitude;
};

struct Dataset {
  std::size_t height = 0, width = 0, channels = 0, num_classes = 0;
  std::vector<float> pixels;  // [n, h, w, c] in [0, 1], quantized to k / 255
  std::vector<int> labels;
  std::vector<std::size_t> train, holdout, test;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return height * width * channels; }
  std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_numel(), image_numel()}; }

  // Images and labels for the given indices as a [B, h, w, c] batch.
  template <typename T>
  Tensor<T> images(std::span<const std::size_t> indices) const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

std::vector<Grating> texture_family(const SyntheticTaskSpec& spec);
std::vector<ClassSignature> class_signatures(const SyntheticTaskSpec& spec);

Dataset generate(const SyntheticTaskSpec& spec);

// Seeded shuffle: the first test_fraction of indices go to test, then
// holdout_fraction of the remaining pool to holdout, the rest to train.
void assign_splits(Dataset& data, std::uint64_t seed, double test_fraction = 0.2, double holdout_fraction = 0.05);

// Little-endian "MTDS" v1 dataset file.
void save_binary(const Dataset& data, const std::filesystem::path& path);
Dataset load_binary(const std::filesystem::path& path, std::uint64_t split_seed = 0, double test_fraction = 0.2,
                    double holdout_fraction = 0.05);
std::vector<std::uint8_t> encode_binary(const Dataset& data);
Dataset decode_binary(std::span<const std::uint8_t> bytes);

// Classifies by comparing the measured amplitude at every pool frequency
// against each class signature (nearest signature in L2).
int nearest_signature(std::span<const float> image, const SyntheticTaskSpec& spec,
                      const std::vector<Grating>& family, const std::vector<ClassSignature>& signatures);

// Horizontal flip with probability 1/2 per image, then zero-pad by crop_pad
// and crop a random window of the original size. batch is [B, h, w, c].
template <typename T>
Tensor<T> augment(const Tensor<T>& batch, bool flip, std::size_t crop_pad, std::mt19937_64& rng);

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& batch);

}  // namespace memvit
