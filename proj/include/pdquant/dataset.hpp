#pragma once

#include <string>
#include <vector>

#include "pdquant/rng.hpp"
#include "pdquant/tensor.hpp"

namespace pdq {

/// Synthetic desk-scale tasks.
///   Clusters:         Gaussian class clusters in R^dim (easy, closed-form
///                     friendly).
///   ClustersHeavyTail: a few large-scale class-carrying dimensions on top
///                     of many small noise dimensions; the per-sample value
///                     distribution is heavy-tailed and the tail carries
///                     the label information.
///   Shapes:           rendered 16x16 grayscale glyphs (circle, square,
///                     triangle, ...) with jitter and noise.
enum class TaskKind { Clusters, ClustersHeavyTail, Shapes };

const char* task_name(TaskKind k);
TaskKind parse_task(const std::string& name);

struct DatasetSpec {
  TaskKind kind = TaskKind::Clusters;
  int classes = 8;
  int dim = 16;        // clusters input dimension
  int image_size = 16; // shapes edge length
  int train_per_class = 256;
  int val_per_class = 64;
  uint64_t seed = 0;
  float center_std = 1.0f;   // clusters: coordinate std of class centers
  float noise = 0.5f;        // clusters: within-class noise
  int signal_dims = 4;       // heavy-tail: class-carrying dimensions
  float tail_scale = 4.0f;   // heavy-tail: scale of the signal dimensions
  float noise_scale = 0.12f; // heavy-tail: scale of the bulk dimensions
};

struct ToyDataset {
  DatasetSpec spec;
  Tensor train_x;  // [N, dim] or [N, 1, S, S]
  std::vector<int> train_y;
  Tensor val_x;
  std::vector<int> val_y;

  Shape sample_shape() const;
  int64_t train_size() const { return train_x.dim(0); }
  int64_t val_size() const { return val_x.dim(0); }
};

/// Class-balanced train and validation splits, deterministic in spec.seed.
ToyDataset generate_dataset(const DatasetSpec& spec);

void save_dataset(const ToyDataset& data, const std::string& path);
ToyDataset load_dataset(const std::string& path);

/// Random calibration subset of the train split (indices into train_x).
std::vector<int> sample_calibration(const ToyDataset& data, int count, Rng& rng);

}  // namespace pdq
