// Teacher-forced training: example construction, loss, AdamW, the epoch loop.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cofs/layout.hpp"
#include "cofs/model.hpp"
#include "cofs/rng.hpp"
#include "cofs/tensor.hpp"

namespace cofs {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  std::size_t warmup_steps = 2000;
  double clip_norm = 30.0;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 1000;
  std::size_t val_every = 5;     // epochs between validation rounds
  std::size_t patience = 20;     // validation rounds without improvement
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool rotation_augment = true;
  std::uint64_t seed = 0;
  // Wall-clock and step budgets; 0 disables. A final validation round runs
  // when either is hit.
  double max_seconds = 0.0;
  std::size_t max_steps = 0;

  void validate() const;
};

// key = value lines, '#' comments; unknown keys are errors.
TrainConfig parse_train_config(std::istream& in);
TrainConfig read_train_config_file(const std::string& path);

struct TrainingExample {
  BoundaryRaster boundary;
  TokenSequence condition;
  TokenSequence target;
};

// Random object order, optional rotation by U(0, 2pi), and a condition with a
// masking ratio drawn from U(0, 1).
TrainingExample make_training_example(const Layout& layout, Rng& rng, const AttributeNormalizer& normalizer,
                                      std::size_t max_objects, bool rotate);

struct LossTerms {
  Tensor total;                  // mean over all target positions
  double class_ce = 0.0;         // summed cross-entropy of class / end targets
  double scalar_nll = 0.0;       // summed mixture NLL of scalar targets
  std::size_t class_targets = 0;
  std::size_t scalar_targets = 0;

  std::size_t targets() const { return class_targets + scalar_targets; }
};

// Decoder row i of each example reads tokens 0..i and predicts token i + 1.
// Class and EOS targets go through the class head (EOS as the end symbol),
// scalars through the mixture head.
LossTerms sequence_loss(const Model& model, std::span<const TrainingExample> batch);

// Learning rate for 1-based step `step`: linear warmup, then constant.
double learning_rate_at(std::size_t step, const TrainConfig& cfg);

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 1e-3);

  // theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  double nll = 0.0;   // per target token
  double class_ce = 0.0;
  double scalar_nll = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double elapsed_seconds = 0.0;  // since train() started; not serialized
};

std::string metrics_json(const EpochMetrics& m);

struct TrainResult {
  std::vector<EpochMetrics> history;  // one train record per epoch, plus val rounds
  double baseline_val_nll = 0.0;      // untrained model, epoch 0
  double best_val_nll = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  bool early_stopped = false;
  bool budget_exhausted = false;
};

// Fixed validation examples: a pure function of (layouts, seed).
std::vector<TrainingExample> make_validation_set(std::span<const Layout> layouts, const AttributeNormalizer& normalizer,
                                                 std::size_t max_objects, std::uint64_t seed);

// Per-token NLL of the model on fixed examples, evaluated in chunks.
EpochMetrics evaluate(const Model& model, std::span<const TrainingExample> examples, std::size_t chunk = 64);

// Trains in place. On return the model holds the weights of the best
// validation round. Metrics records are written to `metrics` if given.
TrainResult train(Model& model, std::span<const Layout> train_set, std::span<const Layout> val_set,
                  const AttributeNormalizer& normalizer, const TrainConfig& cfg, std::ostream* metrics = nullptr);

// Copies every class-count-independent weight of `source` into a model for
// `num_classes` classes; class embeddings and the class head are redrawn
// from N(0, 0.01). With an unchanged class count the copy is exact.
Model transfer_init(const Model& source, std::size_t num_classes, std::uint64_t seed);

}  // namespace cofs
