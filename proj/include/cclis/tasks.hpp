#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cclis/tensor.hpp"

namespace cclis {

struct LabeledSet {
  Tensor inputs;  // (n x input_dim)
  std::vector<int> labels;
  std::vector<std::size_t> ids;  // globally unique sample ids

  std::size_t size() const { return labels.size(); }
};

struct Task {
  int id = 0;  // 1-based task index
  std::vector<int> classes;
  LabeledSet train;
  LabeledSet test;
};

/// Ordered tasks with pairwise-disjoint class sets. The same stream object
/// serves both evaluation scenarios; nothing in it depends on the scenario.
struct TaskStream {
  std::vector<Task> tasks;
  std::size_t input_dim = 0;
  int total_classes = 0;

  int num_tasks() const { return static_cast<int>(tasks.size()); }
};

enum class AugmentKind { identity, gaussian_noise, crop_flip };

struct AugmentorConfig {
  AugmentKind kind = AugmentKind::identity;
  double strength = 0.0;  // noise sigma, or max pixel shift for crop_flip
  int height = 0, width = 0, channels = 0;  // image geometry for crop_flip
};

/// Same shape out; identity (and sigma 0) return the input bitwise.
inline Tensor augment(const Tensor& batch, const AugmentorConfig& cfg, std::mt19937_64& rng) {
  if (cfg.strength < 0.0) throw std::invalid_argument("augment: strength must be >= 0");
  if (cfg.kind == AugmentKind::identity || cfg.strength == 0.0) return batch;
  Tensor out = batch;
  if (cfg.kind == AugmentKind::gaussian_noise) {
    std::normal_distribution<double> n(0.0, cfg.strength);
    for (auto& v : out.values) v += n(rng);
    return out;
  }
  // crop_flip: random shift with zero padding, then horizontal flip with p=0.5
  const int h = cfg.height, w = cfg.width, c = cfg.channels;
  if (h <= 0 || w <= 0 || c <= 0)
    throw std::invalid_argument("augment: crop_flip needs image geometry");
  if (static_cast<std::size_t>(h * w * c) != batch.cols())
    throw std::invalid_argument("augment: image geometry does not match row width");
  const int max_shift = static_cast<int>(cfg.strength);
  std::uniform_int_distribution<int> shift(-max_shift, max_shift);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const int dy = shift(rng), dx = shift(rng);
    const bool do_flip = flip(rng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = y + dy;
        int sx = x + dx;
        if (do_flip) sx = w - 1 - sx;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t dst = static_cast<std::size_t>((y * w + x) * c + ch);
          double v = 0.0;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w)
            v = batch.at(r, static_cast<std::size_t>((sy * w + sx) * c + ch));
          out.at(r, dst) = v;
        }
      }
  }
  return out;
}

/// Gaussian clusters with class means on a circle in the first two input
/// dimensions; adjacent means sit inter_class_margin apart, so the margin
/// population between neighbouring classes is controllable. 80/20 train/test
/// split per class, deterministic per seed.
inline TaskStream gen_synthetic_stream(int num_tasks, int classes_per_task, int n_per_class,
                                       std::size_t input_dim, double cluster_spread,
                                       double inter_class_margin, std::uint64_t seed) {
  if (num_tasks < 1 || classes_per_task < 1 || n_per_class < 1)
    throw std::invalid_argument("gen_synthetic_stream: counts must be >= 1");
  if (input_dim < 2) throw std::invalid_argument("gen_synthetic_stream: input_dim must be >= 2");
  const int total = num_tasks * classes_per_task;
  const double radius =
      total > 1 ? inter_class_margin / (2.0 * std::sin(std::numbers::pi / total)) : 0.0;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  TaskStream stream;
  stream.input_dim = input_dim;
  stream.total_classes = total;
  const int n_test = n_per_class / 5;
  const int n_train = n_per_class - n_test;
  std::size_t next_id = 0;

  for (int t = 0; t < num_tasks; ++t) {
    Task task;
    task.id = t + 1;
    LabeledSet train, test;
    train.inputs = Tensor::zeros({static_cast<std::size_t>(n_train * classes_per_task), input_dim});
    test.inputs = Tensor::zeros({static_cast<std::size_t>(n_test * classes_per_task), input_dim});
    std::size_t tr = 0, te = 0;
    for (int k = 0; k < classes_per_task; ++k) {
      const int cls = t * classes_per_task + k;
      task.classes.push_back(cls);
      const double angle = 2.0 * std::numbers::pi * cls / total;
      const double mx = radius * std::cos(angle);
      const double my = radius * std::sin(angle);
      for (int s = 0; s < n_per_class; ++s) {
        std::vector<double> row(input_dim);
        for (std::size_t d = 0; d < input_dim; ++d) row[d] = cluster_spread * noise(rng);
        row[0] += mx;
        row[1] += my;
        if (s < n_train) {
          for (std::size_t d = 0; d < input_dim; ++d) train.inputs.at(tr, d) = row[d];
          train.labels.push_back(cls);
          train.ids.push_back(next_id++);
          ++tr;
        } else {
          for (std::size_t d = 0; d < input_dim; ++d) test.inputs.at(te, d) = row[d];
          test.labels.push_back(cls);
          test.ids.push_back(next_id++);
          ++te;
        }
      }
    }
    task.train = std::move(train);
    task.test = std::move(test);
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

// --- raw image file ---
// header: magic "CLIS", version u16, count u32, height u16, width u16,
// channels u8; then per record: label u16, pixels u8 row-major. Little-endian.

struct ImageRecord {
  std::uint16_t label = 0;
  std::vector<std::uint8_t> pixels;
};

inline constexpr std::uint16_t kImageFileVersion = 1;

inline void write_image_file(const std::string& path, std::uint16_t height, std::uint16_t width,
                             std::uint8_t channels, const std::vector<ImageRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_image_file: cannot open " + path);
  os.write("CLIS", 4);
  const std::uint16_t version = kImageFileVersion;
  const std::uint32_t count = static_cast<std::uint32_t>(records.size());
  os.write(reinterpret_cast<const char*>(&version), 2);
  os.write(reinterpret_cast<const char*>(&count), 4);
  os.write(reinterpret_cast<const char*>(&height), 2);
  os.write(reinterpret_cast<const char*>(&width), 2);
  os.write(reinterpret_cast<const char*>(&channels), 1);
  const std::size_t npix = static_cast<std::size_t>(height) * width * channels;
  for (const auto& rec : records) {
    if (rec.pixels.size() != npix)
      throw std::invalid_argument("write_image_file: record pixel count mismatch");
    os.write(reinterpret_cast<const char*>(&rec.label), 2);
    os.write(reinterpret_cast<const char*>(rec.pixels.data()),
             static_cast<std::streamsize>(npix));
  }
  if (!os) throw std::runtime_error("write_image_file: write failed for " + path);
}

namespace detail {

[[noreturn]] inline void image_error(const std::string& what, std::size_t offset) {
  throw std::runtime_error("image file: " + what + " at byte offset " +
                           std::to_string(offset));
}

}  // namespace detail

/// Classes partitioned into tasks per task_splits; pixels scaled to [0, 1]
/// and flattened. 80/20 per-class train/test split in file order.
inline TaskStream load_image_stream(const std::string& path,
                                    const std::vector<std::vector<int>>& task_splits) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_image_stream: cannot open " + path);
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CLIS") detail::image_error("bad magic", 0);
  std::uint16_t version = 0, height = 0, width = 0;
  std::uint32_t count = 0;
  std::uint8_t channels = 0;
  is.read(reinterpret_cast<char*>(&version), 2);
  is.read(reinterpret_cast<char*>(&count), 4);
  is.read(reinterpret_cast<char*>(&height), 2);
  is.read(reinterpret_cast<char*>(&width), 2);
  is.read(reinterpret_cast<char*>(&channels), 1);
  if (!is) detail::image_error("truncated header", 4);
  if (version != kImageFileVersion) detail::image_error("unsupported version", 4);
  if (height == 0 || width == 0 || channels == 0) detail::image_error("bad geometry", 8);

  std::map<int, int> class_to_task;
  for (std::size_t t = 0; t < task_splits.size(); ++t) {
    if (task_splits[t].empty())
      throw std::invalid_argument("load_image_stream: empty task split " + std::to_string(t));
    for (int cls : task_splits[t]) {
      if (class_to_task.count(cls))
        throw std::invalid_argument("load_image_stream: class " + std::to_string(cls) +
                                    " in more than one split");
      class_to_task[cls] = static_cast<int>(t);
    }
  }

  const std::size_t npix = static_cast<std::size_t>(height) * width * channels;
  const std::size_t header_size = 4 + 2 + 4 + 2 + 2 + 1;
  std::map<int, std::vector<std::pair<std::size_t, std::vector<double>>>> by_class;
  std::vector<std::uint8_t> buf(npix);
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::size_t offset = header_size + static_cast<std::size_t>(r) * (2 + npix);
    std::uint16_t label = 0;
    is.read(reinterpret_cast<char*>(&label), 2);
    if (!is) detail::image_error("truncated record label", offset);
    if (!class_to_task.count(label)) detail::image_error("label out of range", offset);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(npix));
    if (!is) detail::image_error("truncated pixel payload", offset + 2);
    std::vector<double> row(npix);
    for (std::size_t i = 0; i < npix; ++i) row[i] = buf[i] / 255.0;
    by_class[label].emplace_back(r, std::move(row));
  }
  for (const auto& [cls, task] : class_to_task)
    if (!by_class.count(cls))
      throw std::invalid_argument("load_image_stream: split names class " +
                                  std::to_string(cls) + " with no samples");

  TaskStream stream;
  stream.input_dim = npix;
  stream.total_classes = static_cast<int>(class_to_task.size());
  for (std::size_t t = 0; t < task_splits.size(); ++t) {
    Task task;
    task.id = static_cast<int>(t) + 1;
    task.classes = task_splits[t];
    std::vector<std::pair<std::size_t, std::vector<double>>*> train_rows, test_rows;
    std::vector<int> train_labels, test_labels;
    for (int cls : task_splits[t]) {
      auto& rows = by_class[cls];
      const std::size_t n_test = rows.size() / 5;
      const std::size_t n_train = rows.size() - n_test;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (i < n_train) {
          train_rows.push_back(&rows[i]);
          train_labels.push_back(cls);
        } else {
          test_rows.push_back(&rows[i]);
          test_labels.push_back(cls);
        }
      }
    }
    auto fill = [&](const std::vector<std::pair<std::size_t, std::vector<double>>*>& rows,
                    std::vector<int> labels) {
      LabeledSet set;
      set.inputs = Tensor::zeros({rows.size(), npix});
      set.labels = std::move(labels);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        set.ids.push_back(rows[i]->first);
        std::copy(rows[i]->second.begin(), rows[i]->second.end(),
                  set.inputs.values.begin() + i * npix);
      }
      return set;
    };
    task.train = fill(train_rows, std::move(train_labels));
    task.test = fill(test_rows, std::move(test_labels));
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

}  // namespace cclis
