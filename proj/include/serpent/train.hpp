#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "serpent/checkpoint.hpp"
#include "serpent/metrics.hpp"
#include "serpent/model.hpp"
#include "serpent/optim.hpp"
#include "serpent/synthetic.hpp"

namespace serpent {

struct TrainOptions {
  int epochs = 30;
  int batch = 8;
  AdamOptions adam;
  std::uint64_t seed = 0;
  bool augment = true;
  /// Best-IoU checkpoint destination; empty keeps it in memory only.
  std::filesystem::path checkpoint;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double val_iou = 0;
  double val_f1 = 0;
  double wall_seconds = 0;
};

/// One tab-separated log line: epoch, loss, val IoU, val F1, wall seconds.
inline std::string format_record(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d\t%.6f\t%.6f\t%.6f\t%.3f", r.epoch, r.loss, r.val_iou, r.val_f1, r.wall_seconds);
  return buf;
}

struct TrainResult {
  std::vector<EpochRecord> records;
  double best_iou = -1;
  int best_epoch = 0;
  Checkpoint best;
};

/// Stacks images (or masks) into an (N,1,H,W) tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<const Image*>& images) {
  detail::require(!images.empty(), "stack_images: empty batch");
  const int H = images[0]->height, W = images[0]->width;
  std::vector<T> v;
  v.reserve(images.size() * static_cast<std::size_t>(H) * W);
  for (const Image* img : images) {
    if (img->height != H || img->width != W) throw DataError("batch images differ in size");
    v.insert(v.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor<T>::from(Shape{static_cast<int>(images.size()), 1, H, W}, std::move(v));
}

/// Thresholded crack masks for a list of images, evaluated in batches
/// without recording gradients.
inline std::vector<Mask> predict_masks(const DSCformer<float>& model, const std::vector<const Image*>& images, int batch = 8) {
  NoGradGuard guard;
  std::vector<Mask> out;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    std::vector<const Image*> chunk(images.begin() + start, images.begin() + end);
    const auto logits = model.forward(stack_images<float>(chunk));
    const auto cls = predict_classes(logits);
    const std::size_t HW = static_cast<std::size_t>(chunk[0]->height) * chunk[0]->width;
    for (std::size_t i = 0; i < chunk.size(); ++i)
      out.emplace_back(chunk[i]->height, chunk[i]->width,
                       std::vector<std::uint8_t>(cls.begin() + i * HW, cls.begin() + (i + 1) * HW));
  }
  return out;
}

inline MetricsReport evaluate(const DSCformer<float>& model, const std::vector<LabeledImage>& data, int batch = 8) {
  std::vector<const Image*> images;
  for (const auto& d : data) images.push_back(&d.image);
  const auto preds = predict_masks(model, images, batch);
  std::vector<ImageMetrics> per;
  for (std::size_t i = 0; i < data.size(); ++i) per.push_back(image_metrics(preds[i], Mask::from_image(data[i].mask)));
  return aggregate(per);
}

inline std::uint64_t augment_seed(std::uint64_t seed, int epoch, std::size_t index) {
  return derive_seed(derive_seed(seed, 0xa0a0 + static_cast<std::uint64_t>(epoch)), index);
}

/// Seeded Fisher-Yates permutation of 0..n-1 for one epoch.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(derive_seed(seed, 0x5a5a0000 + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, i - 1))]);
  return order;
}

/// Trains `model` in place. Every epoch shuffles, augments, and steps Adam
/// over all batches, then scores the validation set; the best-IoU parameters
/// are kept (and written to opts.checkpoint when set). `on_epoch` receives
/// each record as soon as it is complete.
inline TrainResult train_loop(DSCformer<float>& model, const std::vector<LabeledImage>& train,
                              const std::vector<LabeledImage>& val, const TrainOptions& opts,
                              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (train.empty()) throw DataError("training set is empty");
  if (val.empty()) throw DataError("validation set is empty");
  if (opts.epochs < 1 || opts.batch < 1) throw ConfigError("epochs and batch must be positive");
  auto params = model.parameters();
  require_unique_names(params);
  Adam<float> opt(params, opts.adam);
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto order = epoch_order(opts.seed, epoch, train.size());
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opts.batch));
      std::vector<Sample> samples;
      for (std::size_t k = start; k < end; ++k) {
        Sample s{train[order[k]].image, train[order[k]].mask, 0, {}};
        samples.push_back(opts.augment ? augment(s, augment_seed(opts.seed, epoch, order[k])) : std::move(s));
      }
      std::vector<const Image*> imgs, masks;
      for (const auto& s : samples) {
        imgs.push_back(&s.image);
        masks.push_back(&s.mask);
      }
      const auto loss = combined_loss(model.forward(stack_images<float>(imgs)), stack_images<float>(masks));
      if (!std::isfinite(loss.item()))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches + 1));
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += loss.item();
      ++batches;
    }
    const auto report = evaluate(model, val, opts.batch);
    EpochRecord rec{epoch, loss_sum / batches, report.iou.mean, report.f1.mean,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.records.push_back(rec);
    if (rec.val_iou > result.best_iou) {
      result.best_iou = rec.val_iou;
      result.best_epoch = epoch;
      result.best = to_checkpoint(params);
      if (!opts.checkpoint.empty()) save_checkpoint(opts.checkpoint, params);
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace serpent
