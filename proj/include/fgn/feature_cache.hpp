// SPDX-License-Identifier: Apache-2.0
//
// Binary feature-cache format and synthetic feature generation.
//
// Cache layout (little-endian, fixed width):
//   bytes 0..3    magic "FGNF"
//   bytes 4..7    version, uint32, currently 1
//   bytes 8..31   n, d_f, C as uint64
//   then          n * d_f features as float64, row-major
//   then          n labels as uint32
// Total length is exactly 4 + 4 + 24 + 8*n*d_f + 4*n bytes; anything else
// is rejected.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fgn/affine_head.hpp"
#include "fgn/io.hpp"

namespace fgn {

static_assert(std::endian::native == std::endian::little,
              "the feature cache writer assumes a little-endian host");

inline constexpr char kCacheMagic[4] = {'F', 'G', 'N', 'F'};
inline constexpr std::uint32_t kCacheVersion = 1;

inline void write_feature_cache(const std::string& path,
                                const FeatureBatch& batch) {
  batch.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);

  const std::uint64_t n = static_cast<std::uint64_t>(batch.size());
  const std::uint64_t d_f = static_cast<std::uint64_t>(batch.feature_dim());
  const std::uint64_t c = static_cast<std::uint64_t>(batch.num_classes);

  out.write(kCacheMagic, 4);
  const std::uint32_t version = kCacheVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(&d_f), 8);
  out.write(reinterpret_cast<const char*>(&c), 8);

  std::vector<double> row(batch.feature_dim());
  for (int i = 0; i < batch.size(); ++i) {
    for (int k = 0; k < batch.feature_dim(); ++k) row[k] = batch.features(i, k);
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(8 * row.size()));
  }
  for (int i = 0; i < batch.size(); ++i) {
    const std::uint32_t label = static_cast<std::uint32_t>(batch.labels[i]);
    out.write(reinterpret_cast<const char*>(&label), 4);
  }
  if (!out) throw IoError("write failed: " + path);
}

inline FeatureBatch read_feature_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open for reading: " + path);
  const std::streamsize file_size = in.tellg();
  in.seekg(0);

  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t n = 0, d_f = 0, c = 0;
  if (file_size < 32) throw IoError("feature cache truncated: " + path);
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&n), 8);
  in.read(reinterpret_cast<char*>(&d_f), 8);
  in.read(reinterpret_cast<char*>(&c), 8);
  if (std::memcmp(magic, kCacheMagic, 4) != 0)
    throw IoError("feature cache has wrong magic: " + path);
  if (version != kCacheVersion)
    throw IoError("unsupported feature cache version: " + path);

  const std::uint64_t expected = 32 + 8 * n * d_f + 4 * n;
  if (static_cast<std::uint64_t>(file_size) != expected)
    throw IoError("feature cache length mismatch: " + path);

  FeatureBatch batch;
  batch.num_classes = static_cast<int>(c);
  batch.features.resize(static_cast<Eigen::Index>(n),
                        static_cast<Eigen::Index>(d_f));
  std::vector<double> row(d_f);
  for (std::uint64_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(8 * d_f));
    for (std::uint64_t k = 0; k < d_f; ++k)
      batch.features(static_cast<Eigen::Index>(i),
                     static_cast<Eigen::Index>(k)) = row[k];
  }
  batch.labels.resize(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t label = 0;
    in.read(reinterpret_cast<char*>(&label), 4);
    if (label >= c) throw IoError("feature cache label out of range: " + path);
    batch.labels[static_cast<Eigen::Index>(i)] = static_cast<int>(label);
  }
  if (!in) throw IoError("read failed: " + path);
  batch.validate();
  return batch;
}

// Standard-normal features with uniform random labels.
inline FeatureBatch make_gaussian_features(int n, int d_f, int c,
                                           std::uint64_t seed) {
  if (n < 1 || d_f < 1 || c < 2)
    throw std::invalid_argument("make_gaussian_features: invalid sizes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, c - 1);
  FeatureBatch batch;
  batch.num_classes = c;
  batch.features.resize(n, d_f);
  batch.labels.resize(n);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d_f; ++k) batch.features(i, k) = normal(rng);
  for (int i = 0; i < n; ++i) batch.labels[i] = label(rng);
  return batch;
}

// Class means drawn uniformly on a sphere of the given radius, features as
// mean plus isotropic noise. Labels are balanced round-robin, so every class
// is populated whenever n >= C.
inline FeatureBatch make_clustered_features(int n, int d_f, int c,
                                            std::uint64_t seed,
                                            double radius = 3.0,
                                            double noise = 1.0) {
  if (n < 1 || d_f < 1 || c < 2)
    throw std::invalid_argument("make_clustered_features: invalid sizes");
  if (!(radius >= 0.0) || !(noise >= 0.0))
    throw std::invalid_argument("make_clustered_features: invalid scales");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix means(c, d_f);
  for (int j = 0; j < c; ++j) {
    Vector direction(d_f);
    do {
      for (int k = 0; k < d_f; ++k) direction[k] = normal(rng);
    } while (direction.norm() == 0.0);
    means.row(j) = (radius / direction.norm()) * direction.transpose();
  }

  FeatureBatch batch;
  batch.num_classes = c;
  batch.features.resize(n, d_f);
  batch.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int label = i % c;
    batch.labels[i] = label;
    for (int k = 0; k < d_f; ++k)
      batch.features(i, k) = means(label, k) + noise * normal(rng);
  }
  return batch;
}

// Label-stratified split: for each class, a seeded shuffle sends a fixed
// fraction to the eval side (floored, and never the whole class).
inline std::pair<FeatureBatch, FeatureBatch> stratified_split(
    const FeatureBatch& full, double eval_fraction, std::uint64_t seed) {
  full.validate();
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0))
    throw std::invalid_argument("stratified_split: fraction must be in [0,1)");

  std::mt19937_64 rng(seed);
  std::vector<int> train_idx, eval_idx;
  for (int cls = 0; cls < full.num_classes; ++cls) {
    std::vector<int> members;
    for (int i = 0; i < full.size(); ++i)
      if (full.labels[i] == cls) members.push_back(i);
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    int take = static_cast<int>(eval_fraction * members.size());
    take = std::min<int>(take, static_cast<int>(members.size()) - 1);
    for (size_t j = 0; j < members.size(); ++j)
      (j < static_cast<size_t>(take) ? eval_idx : train_idx)
          .push_back(members[j]);
  }
  if (train_idx.empty())
    throw std::invalid_argument("stratified_split: empty training side");
  if (eval_idx.empty())
    throw std::invalid_argument("stratified_split: empty evaluation side");

  const auto gather = [&](const std::vector<int>& idx) {
    FeatureBatch out;
    out.num_classes = full.num_classes;
    out.features.resize(static_cast<Eigen::Index>(idx.size()),
                        full.feature_dim());
    out.labels.resize(static_cast<Eigen::Index>(idx.size()));
    for (size_t j = 0; j < idx.size(); ++j) {
      out.features.row(static_cast<Eigen::Index>(j)) =
          full.features.row(idx[j]);
      out.labels[static_cast<Eigen::Index>(j)] = full.labels[idx[j]];
    }
    return out;
  };
  return {gather(train_idx), gather(eval_idx)};
}

}  // namespace fgn
