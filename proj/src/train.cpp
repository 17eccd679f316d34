#include "parafill/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "parafill/types.hpp"

namespace parafill::train {

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.optim.lr},
       {"beta1", c.optim.beta1},
       {"beta2", c.optim.beta2},
       {"eps", c.optim.eps},
       {"weight_decay", c.optim.weight_decay},
       {"grad_clip", c.optim.grad_clip},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"warmup_steps", c.warmup_steps},
       {"min_lr_ratio", c.min_lr_ratio},
       {"seed", c.seed},
       {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.optim.lr = j.value("lr", c.optim.lr);
  c.optim.beta1 = j.value("beta1", c.optim.beta1);
  c.optim.beta2 = j.value("beta2", c.optim.beta2);
  c.optim.eps = j.value("eps", c.optim.eps);
  c.optim.weight_decay = j.value("weight_decay", c.optim.weight_decay);
  c.optim.grad_clip = j.value("grad_clip", c.optim.grad_clip);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  if (c.batch_size == 0) throw UsageError("batch_size must be positive");
  if (c.optim.lr < 0.0) throw UsageError("lr must be non-negative");
}

double lr_at(std::size_t step, std::size_t total, std::size_t warmup, double peak, double min_ratio) {
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return peak;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(1, total - warmup - 1)));
  const double floor = peak * min_ratio;
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

StepResult train_step(model::Transformer<float>& model, const std::vector<const assembly::TrainingSample*>& batch,
                      AdamState& state, const OptimConfig& optim, double lr, std::mt19937_64* dropout_rng,
                      std::size_t batch_id) {
  if (batch.empty()) throw UsageError("empty batch");
  auto& params = model.params();
  const std::size_t n = params.size();
  if (state.m.size() != n) {
    state.m.assign(n, 0.0f);
    state.v.assign(n, 0.0f);
    state.t = 0;
  }

  std::size_t tokens = 0;
  for (const auto* s : batch) {
    for (std::size_t i = 1; i < s->loss_mask.size(); ++i) tokens += s->loss_mask[i] != 0 ? 1 : 0;
  }
  if (tokens == 0) throw DataError("empty loss support");

  model::ParamVector<float> grad(n, 0.0f);
  StepResult out;
  out.tokens = tokens;
  double nll = 0.0;
  for (const auto* s : batch) {
    // Padding carries no loss, so only the attended prefix is run.
    const std::size_t len = s->attention_len > 0 ? s->attention_len : s->ids.size();
    model::Sequence seq{std::span(s->ids).first(len), std::span(s->segments).first(len)};
    auto r = model.loss_and_grad(seq, std::span(s->loss_mask).first(len), &grad, 1.0 / static_cast<double>(tokens), dropout_rng);
    nll += r.nll;
    out.max_logit = std::max(out.max_logit, r.max_logit);
  }
  out.loss = nll / static_cast<double>(tokens);
  if (!std::isfinite(out.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss " << out.loss << " at batch " << batch_id << " (max logit " << out.max_logit << ")";
    throw NumericError(msg.str());
  }

  double sq = 0.0;
  for (float g : grad) sq += static_cast<double>(g) * g;
  out.grad_norm = std::sqrt(sq);
  const double clip = optim.grad_clip > 0.0 && out.grad_norm > optim.grad_clip ? optim.grad_clip / out.grad_norm : 1.0;

  ++state.t;
  const double bc1 = 1.0 - std::pow(optim.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(optim.beta2, static_cast<double>(state.t));
  for (const auto& t : model.layout().tensors()) {
    const double decay = t.decay ? optim.weight_decay : 0.0;
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
      const double g = static_cast<double>(grad[i]) * clip;
      const double m = optim.beta1 * state.m[i] + (1.0 - optim.beta1) * g;
      const double v = optim.beta2 * state.v[i] + (1.0 - optim.beta2) * g * g;
      state.m[i] = static_cast<float>(m);
      state.v[i] = static_cast<float>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + optim.eps) + decay * params[i];
      params[i] = static_cast<float>(params[i] - lr * update);
    }
  }
  return out;
}

TrainSummary train(model::Transformer<float>& model, const EpochSamples& samples, std::size_t samples_per_epoch,
                   const TrainConfig& cfg, std::ostream* log) {
  if (cfg.batch_size == 0) throw UsageError("batch_size must be positive");
  const std::size_t steps_per_epoch = (samples_per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  AdamState state;
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainSummary summary;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto data = samples(epoch);
    if (data.empty()) throw DataError("no training samples");
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(cfg.seed + 1000003ULL * (epoch + 1));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<const assembly::TrainingSample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&data[order[i]]);
      const double lr = lr_at(summary.steps, total, cfg.warmup_steps, cfg.optim.lr, cfg.min_lr_ratio);
      auto r = train_step(model, batch, state, cfg.optim, lr, &dropout_rng, summary.steps);
      summary.tokens_seen += r.tokens;
      summary.losses.push_back(r.loss);
      if (log != nullptr && cfg.log_every > 0 && summary.steps % cfg.log_every == 0) {
        *log << nlohmann::json{{"step", summary.steps},
                               {"epoch", epoch},
                               {"loss", r.loss},
                               {"lr", lr},
                               {"tokens_seen", summary.tokens_seen}}
                    .dump()
             << '\n'
             << std::flush;
      }
      ++summary.steps;
    }
  }
  return summary;
}

}  // namespace parafill::train
