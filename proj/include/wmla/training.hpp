#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wmla/model.hpp"

namespace wmla {

// Deterministic seq2seq toy tasks; targets are exact functions of sources and
// end with EOS.
struct SyntheticTask {
  enum class Kind { copy, reverse };
  Kind kind = Kind::copy;
  int64_t vocab_size = 64;
  int64_t min_len = 4;
  int64_t max_len = 16;
  int64_t sample_count = 2000;
  uint64_t seed = 1;
};

SyntheticTask::Kind task_kind_from_string(const std::string& s);
const char* to_string(SyntheticTask::Kind k);

std::vector<Example> generate_dataset(const SyntheticTask& task);

// Deterministic split: the last max(1, n/10) examples are held out.
struct DatasetSplit {
  std::vector<Example> train;
  std::vector<Example> heldout;
};
DatasetSplit split_dataset(std::vector<Example> all);

struct TrainConfig {
  int64_t epochs = 3;
  double learning_rate = 1e-3;
  int64_t batch_size = 32;
  enum class Optimizer { sgd, adam } optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  uint64_t seed = 0;
  double gradient_clip = 1.0;  // global norm bound, <= 0 disables
};

// Which tensors stay untouched during fine-tuning. The DSO discipline freezes
// the whole encoder and the decoder's cross-attention blocks.
struct FreezeSet {
  bool encoder = false;
  bool cross_attention = false;

  bool frozen(const std::string& tensor_name) const;
  static FreezeSet none() { return {}; }
  static FreezeSet dso() { return {true, true}; }
};

// Mean token-level cross-entropy over non-pad target positions of the batch.
double forward_loss(const Model& m, const std::vector<Example>& batch);

struct BatchStats {
  double loss = 0.0;
  double token_accuracy = 0.0;
  int64_t positions = 0;
};

// Analytic gradients of forward_loss for every trainable tensor, returned as a
// model-shaped container. Frozen tensors come back exactly zero. Per-example
// gradients may be computed in parallel; they are reduced in example order, so
// the result is bitwise reproducible.
Model backward(const Model& m, const std::vector<Example>& batch,
               const FreezeSet& freeze = FreezeSet::none(), BatchStats* stats = nullptr);

struct FdCoordinate {
  std::string tensor;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct FdReport {
  std::vector<FdCoordinate> coords;
  std::vector<std::pair<std::string, double>> per_tensor_max;
  double max_rel_err = 0.0;
  double flag_threshold = 1e-3;
  bool ok() const { return max_rel_err <= flag_threshold; }
};

// Central differences (h = 1e-5) at sample_count random coordinates drawn
// uniformly over all trainable scalars; relative error uses
// |a - n| / max(|a|, |n|, 1e-6).
FdReport finite_diff_check(const Model& m, const std::vector<Example>& batch,
                           int64_t sample_count, uint64_t seed);

struct EpochMetric {
  int64_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double token_accuracy = 0.0;
};

struct FinetuneResult {
  Model model;
  std::vector<EpochMetric> trace;
};

// Minibatch training with the configured optimizer and gradient clipping.
// Bitwise deterministic given (weights, task seed, train seed). Throws
// NumericalError if the loss leaves the finite range.
FinetuneResult finetune(Model model, const SyntheticTask& task, const TrainConfig& cfg,
                        const FreezeSet& freeze = FreezeSet::none());

struct EvalMetrics {
  double loss = 0.0;
  double token_accuracy = 0.0;
};

EvalMetrics evaluate(const Model& m, const std::vector<Example>& examples);

}  // namespace wmla
