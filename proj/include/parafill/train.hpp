#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/assembly.hpp"
#include "parafill/model.hpp"

namespace parafill::train {

/// Loss became NaN or infinite; carries the step diagnostics in the message.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // matrices only
  double grad_clip = 1.0;     // global L2 norm; 0 disables
};

struct TrainConfig {
  OptimConfig optim;
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  std::size_t warmup_steps = 50;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of the peak lr
  std::uint64_t seed = 0;
  std::size_t log_every = 1;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing fields keep the values already in `c`.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to
/// peak * min_ratio at `total` steps.
double lr_at(std::size_t step, std::size_t total, std::size_t warmup, double peak, double min_ratio);

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::size_t t = 0;
};

struct StepResult {
  double loss = 0.0;  // mean NLL over every counted token of the batch
  std::size_t tokens = 0;
  double grad_norm = 0.0;  // before clipping
  double max_logit = 0.0;
};

/// One decoupled-weight-decay Adam update on the batch mean loss. Throws
/// NumericError when the loss is not finite (parameters stay untouched).
StepResult train_step(model::Transformer<float>& model, const std::vector<const assembly::TrainingSample*>& batch,
                      AdamState& state, const OptimConfig& optim, double lr, std::mt19937_64* dropout_rng,
                      std::size_t batch_id = 0);

struct TrainSummary {
  std::size_t steps = 0;
  std::size_t tokens_seen = 0;
  std::vector<double> losses;  // per step
};

/// Samples for one epoch; called once per epoch so conditioning can be
/// resampled.
using EpochSamples = std::function<std::vector<assembly::TrainingSample>(std::size_t epoch)>;

/// Runs the full schedule. Sample order is shuffled per epoch from the seed.
/// Writes one JSON line {step, epoch, loss, lr, tokens_seen} per logged step
/// to `log` when non-null.
TrainSummary train(model::Transformer<float>& model, const EpochSamples& samples, std::size_t samples_per_epoch,
                   const TrainConfig& cfg, std::ostream* log = nullptr);

}  // namespace parafill::train
