#include "pdquant/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "pdquant/container.hpp"

namespace pdq {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct Split {
  Tensor x;
  std::vector<int> y;
};

Split gen_clusters(const DatasetSpec& spec, const std::vector<Tensor>& centers, int per_class,
                   Rng& rng) {
  int64_t n = static_cast<int64_t>(spec.classes) * per_class;
  Tensor x({n, spec.dim});
  std::vector<int> y(static_cast<size_t>(n));
  int64_t row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    for (int k = 0; k < per_class; ++k, ++row) {
      float* px = x.data() + row * spec.dim;
      const float* pc = centers[static_cast<size_t>(c)].data();
      for (int d = 0; d < spec.dim; ++d) px[d] = pc[d] + spec.noise * rng.normal();
      y[static_cast<size_t>(row)] = c;
    }
  }
  return {std::move(x), std::move(y)};
}

/// Nonnegative activation-like values shaped like a rectified feature map:
/// a dense half-normal bulk at noise_scale (it dominates the squared-error
/// mass through sheer count) plus a sparse log-normal tail on each class's
/// signal_dims dimensions. The tail carries the label and stretches the
/// min-max range, so aggressive clipping looks cheap to a local metric but
/// destroys exactly the values the prediction depends on.
Split gen_heavytail(const DatasetSpec& spec, const std::vector<Tensor>&, int per_class, Rng& rng) {
  require(spec.signal_dims > 0 && spec.signal_dims * spec.classes < spec.dim,
          "generate_dataset: heavy-tail task needs signal_dims*classes < dim");
  int64_t n = static_cast<int64_t>(spec.classes) * per_class;
  Tensor x({n, spec.dim});
  std::vector<int> y(static_cast<size_t>(n));
  int64_t row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    for (int k = 0; k < per_class; ++k, ++row) {
      float* px = x.data() + row * spec.dim;
      for (int d = 0; d < spec.dim; ++d) px[d] = std::abs(spec.noise_scale * rng.normal());
      for (int s = 0; s < spec.signal_dims; ++s) {
        if (rng.uniform() < 0.6f) {
          px[c * spec.signal_dims + s] = spec.tail_scale * std::exp(0.5f * rng.normal());
        }
      }
      y[static_cast<size_t>(row)] = c;
    }
  }
  return {std::move(x), std::move(y)};
}

/// Rasterizes one glyph class into a [S,S] image. Classes: 0 disc, 1 ring,
/// 2 filled square, 3 square outline, 4 triangle up, 5 triangle down,
/// 6 plus, 7 diagonal cross, 8 horizontal bar, 9 vertical bar.
void draw_shape(float* img, int s, int cls, float cx, float cy, float r, float intensity) {
  auto put = [&](int i, int j, float v) {
    if (i >= 0 && i < s && j >= 0 && j < s) img[i * s + j] = std::max(img[i * s + j], v);
  };
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      float dy = static_cast<float>(i) - cy;
      float dx = static_cast<float>(j) - cx;
      float ad = std::max(std::abs(dx), std::abs(dy));
      float dist = std::sqrt(dx * dx + dy * dy);
      bool on = false;
      switch (cls) {
        case 0: on = dist <= r; break;
        case 1: on = dist <= r && dist >= r * 0.55f; break;
        case 2: on = ad <= r * 0.85f; break;
        case 3: on = ad <= r * 0.85f && ad >= r * 0.45f; break;
        case 4: on = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.6f; break;
        case 5: on = dy >= -r && dy <= r && std::abs(dx) <= (r - dy) * 0.6f; break;
        case 6: on = (std::abs(dx) <= r * 0.3f && std::abs(dy) <= r) ||
                     (std::abs(dy) <= r * 0.3f && std::abs(dx) <= r);
                break;
        case 7: on = (std::abs(dx - dy) <= r * 0.45f || std::abs(dx + dy) <= r * 0.45f) &&
                     ad <= r;
                break;
        case 8: on = std::abs(dy) <= r * 0.35f && std::abs(dx) <= r; break;
        case 9: on = std::abs(dx) <= r * 0.35f && std::abs(dy) <= r; break;
        default: break;
      }
      if (on) put(i, j, intensity);
    }
  }
}

Split gen_shapes(const DatasetSpec& spec, int per_class, Rng& rng) {
  require(spec.classes <= 10, "generate_dataset: shapes supports at most 10 classes");
  int s = spec.image_size;
  int64_t n = static_cast<int64_t>(spec.classes) * per_class;
  Tensor x({n, 1, s, s});
  std::vector<int> y(static_cast<size_t>(n));
  int64_t row = 0;
  float mid = static_cast<float>(s - 1) / 2.0f;
  for (int c = 0; c < spec.classes; ++c) {
    for (int k = 0; k < per_class; ++k, ++row) {
      float* img = x.data() + row * s * s;
      float cx = mid + rng.uniform(-2.0f, 2.0f);
      float cy = mid + rng.uniform(-2.0f, 2.0f);
      float radius = static_cast<float>(s) * rng.uniform(0.22f, 0.3f);
      float intensity = rng.uniform(0.7f, 1.0f);
      draw_shape(img, s, c, cx, cy, radius, intensity);
      for (int i = 0; i < s * s; ++i) {
        img[i] = std::clamp(img[i] + 0.05f * rng.normal(), 0.0f, 1.0f);
      }
      y[static_cast<size_t>(row)] = c;
    }
  }
  return {std::move(x), std::move(y)};
}

}  // namespace

const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Clusters: return "clusters";
    case TaskKind::ClustersHeavyTail: return "clusters-heavytail";
    case TaskKind::Shapes: return "shapes";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  for (TaskKind k : {TaskKind::Clusters, TaskKind::ClustersHeavyTail, TaskKind::Shapes}) {
    if (name == task_name(k)) return k;
  }
  throw std::invalid_argument("unknown task: " + name);
}

Shape ToyDataset::sample_shape() const {
  return Shape(train_x.shape().begin() + 1, train_x.shape().end());
}

ToyDataset generate_dataset(const DatasetSpec& spec) {
  require(spec.classes >= 2, "generate_dataset: need at least 2 classes");
  require(spec.train_per_class >= 2 && spec.val_per_class >= 1,
          "generate_dataset: split sizes too small");
  Rng rng(spec.seed);
  Rng center_rng = rng.fork(1);
  Rng train_rng = rng.fork(2);
  Rng val_rng = rng.fork(3);

  ToyDataset data;
  data.spec = spec;
  if (spec.kind == TaskKind::Shapes) {
    Split tr = gen_shapes(spec, spec.train_per_class, train_rng);
    Split va = gen_shapes(spec, spec.val_per_class, val_rng);
    data.train_x = std::move(tr.x);
    data.train_y = std::move(tr.y);
    data.val_x = std::move(va.x);
    data.val_y = std::move(va.y);
    return data;
  }

  std::vector<Tensor> centers;
  if (spec.kind == TaskKind::Clusters) {
    for (int c = 0; c < spec.classes; ++c) {
      Tensor center({spec.dim});
      for (auto& v : center.values_mut()) v = spec.center_std * center_rng.normal();
      centers.push_back(std::move(center));
    }
  }
  Split tr = spec.kind == TaskKind::ClustersHeavyTail
                 ? gen_heavytail(spec, centers, spec.train_per_class, train_rng)
                 : gen_clusters(spec, centers, spec.train_per_class, train_rng);
  Split va = spec.kind == TaskKind::ClustersHeavyTail
                 ? gen_heavytail(spec, centers, spec.val_per_class, val_rng)
                 : gen_clusters(spec, centers, spec.val_per_class, val_rng);
  data.train_x = std::move(tr.x);
  data.train_y = std::move(tr.y);
  data.val_x = std::move(va.x);
  data.val_y = std::move(va.y);
  return data;
}

namespace {

Tensor labels_to_tensor(const std::vector<int>& y) {
  Tensor t({static_cast<int64_t>(y.size())});
  for (size_t i = 0; i < y.size(); ++i) t.data()[static_cast<int64_t>(i)] = static_cast<float>(y[i]);
  return t;
}

std::vector<int> labels_from_tensor(const Tensor& t) {
  std::vector<int> y(static_cast<size_t>(t.size()));
  for (int64_t i = 0; i < t.size(); ++i) y[static_cast<size_t>(i)] = static_cast<int>(t.at(i));
  return y;
}

}  // namespace

void save_dataset(const ToyDataset& data, const std::string& path) {
  nlohmann::json header;
  header["task"] = task_name(data.spec.kind);
  header["classes"] = data.spec.classes;
  header["dim"] = data.spec.dim;
  header["image_size"] = data.spec.image_size;
  header["train_per_class"] = data.spec.train_per_class;
  header["val_per_class"] = data.spec.val_per_class;
  header["seed"] = data.spec.seed;
  header["center_std"] = data.spec.center_std;
  header["noise"] = data.spec.noise;
  header["signal_dims"] = data.spec.signal_dims;
  header["tail_scale"] = data.spec.tail_scale;
  header["noise_scale"] = data.spec.noise_scale;
  std::vector<NamedTensor> payload{{"train_x", data.train_x},
                                   {"train_y", labels_to_tensor(data.train_y)},
                                   {"val_x", data.val_x},
                                   {"val_y", labels_to_tensor(data.val_y)}};
  write_container(path, "PDQS", 1, std::move(header), payload);
}

ToyDataset load_dataset(const std::string& path) {
  Container c = read_container(path, "PDQS", 1);
  ToyDataset data;
  data.spec.kind = parse_task(c.header.at("task").get<std::string>());
  data.spec.classes = c.header.at("classes").get<int>();
  data.spec.dim = c.header.at("dim").get<int>();
  data.spec.image_size = c.header.at("image_size").get<int>();
  data.spec.train_per_class = c.header.at("train_per_class").get<int>();
  data.spec.val_per_class = c.header.at("val_per_class").get<int>();
  data.spec.seed = c.header.at("seed").get<uint64_t>();
  data.spec.center_std = c.header.at("center_std").get<float>();
  data.spec.noise = c.header.at("noise").get<float>();
  data.spec.signal_dims = c.header.at("signal_dims").get<int>();
  data.spec.tail_scale = c.header.at("tail_scale").get<float>();
  data.spec.noise_scale = c.header.at("noise_scale").get<float>();
  data.train_x = c.tensor("train_x");
  data.train_y = labels_from_tensor(c.tensor("train_y"));
  data.val_x = c.tensor("val_x");
  data.val_y = labels_from_tensor(c.tensor("val_y"));
  return data;
}

std::vector<int> sample_calibration(const ToyDataset& data, int count, Rng& rng) {
  require(count >= 1, "sample_calibration: count must be positive");
  require(count <= data.train_size(), "sample_calibration: count exceeds the train split");
  return rng.sample_indices(static_cast<int>(data.train_size()), count);
}

}  // namespace pdq
