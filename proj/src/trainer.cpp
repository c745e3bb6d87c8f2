#include "ct/trainer.hpp"

#include <cmath>
#include <filesystem>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace ct::lm {

void TrainPlan::validate() const {
  if (!(lr > 0)) throw ConfigError("train plan: lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train plan: betas must lie in [0,1)");
  if (weight_decay < 0) throw ConfigError("train plan: weight_decay must be non-negative");
  if (!(grad_clip > 0)) throw ConfigError("train plan: grad_clip must be positive");
  if (warmup_steps < 0) throw ConfigError("train plan: warmup_steps must be non-negative");
  if (batch_size < 1) throw ConfigError("train plan: batch_size must be >= 1");
  if (eval_interval < 1) throw ConfigError("train plan: eval_interval must be >= 1");
}

void to_json(nlohmann::json& j, const TrainPlan& p) {
  j = nlohmann::json{{"lr", p.lr},
                     {"beta1", p.beta1},
                     {"beta2", p.beta2},
                     {"eps", p.eps},
                     {"weight_decay", p.weight_decay},
                     {"grad_clip", p.grad_clip},
                     {"warmup_steps", p.warmup_steps},
                     {"min_lr_ratio", p.min_lr_ratio},
                     {"batch_size", p.batch_size},
                     {"total_tokens", p.total_tokens},
                     {"eval_interval", p.eval_interval},
                     {"checkpoint_interval", p.checkpoint_interval},
                     {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, TrainPlan& p) {
  TrainPlan d;
  p.lr = j.value("lr", d.lr);
  p.beta1 = j.value("beta1", d.beta1);
  p.beta2 = j.value("beta2", d.beta2);
  p.eps = j.value("eps", d.eps);
  p.weight_decay = j.value("weight_decay", d.weight_decay);
  p.grad_clip = j.value("grad_clip", d.grad_clip);
  p.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  p.min_lr_ratio = j.value("min_lr_ratio", d.min_lr_ratio);
  p.batch_size = j.value("batch_size", d.batch_size);
  p.total_tokens = j.value("total_tokens", d.total_tokens);
  p.eval_interval = j.value("eval_interval", d.eval_interval);
  p.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
  p.seed = j.value("seed", d.seed);
}

double learning_rate(const TrainPlan& plan, long step, long total_steps) {
  if (plan.warmup_steps > 0 && step <= plan.warmup_steps)
    return plan.lr * double(step) / double(plan.warmup_steps);
  const double min_lr = plan.lr * plan.min_lr_ratio;
  if (step >= total_steps) return min_lr;
  const double progress = double(step - plan.warmup_steps) / double(std::max<long>(1, total_steps - plan.warmup_steps));
  return min_lr + 0.5 * (1.0 + std::cos(M_PI * progress)) * (plan.lr - min_lr);
}

template <typename T>
double adamw_step(Params<T>& params, Params<T>& grads, AdamState<T>& state, const TrainPlan& plan,
                  long step, double lr) {
  if (step < 1) throw ValidationError("adamw_step: step must be >= 1");
  if (state.m.size() != params.values.size()) state = AdamState<T>(params.values.size());
  double sq = 0;
  for (const auto& s : grads.layout.slots) {
    const T* g = grads.at(s.offset);
    double ssq = 0;
    for (std::size_t i = 0; i < s.size; ++i) ssq += double(g[i]) * double(g[i]);
    if (!std::isfinite(ssq)) throw NumericalError(fmt::format("non-finite gradient in tensor '{}'", s.name));
    sq += ssq;
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > plan.grad_clip ? plan.grad_clip / norm : 1.0;
  const double bc1 = 1.0 - std::pow(plan.beta1, double(step));
  const double bc2 = 1.0 - std::pow(plan.beta2, double(step));
  for (const auto& s : params.layout.slots) {
    T* w = params.at(s.offset);
    const T* g = grads.at(s.offset);
    T* m = state.m.data() + s.offset;
    T* v = state.v.data() + s.offset;
    const double wd = s.decay ? plan.weight_decay : 0.0;
    for (std::size_t i = 0; i < s.size; ++i) {
      const double gi = double(g[i]) * clip;
      m[i] = T(plan.beta1 * m[i] + (1 - plan.beta1) * gi);
      v[i] = T(plan.beta2 * v[i] + (1 - plan.beta2) * gi * gi);
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      w[i] = T(w[i] - lr * (mhat / (std::sqrt(vhat) + plan.eps) + wd * w[i]));
    }
  }
  return norm;
}

std::vector<int> training_row(const corpus::LabeledSequence& s, int bos, int eos, int context_len) {
  std::vector<int> row;
  row.reserve(s.tokens.size() + 2);
  row.push_back(bos);
  row.insert(row.end(), s.tokens.begin(), s.tokens.end());
  row.push_back(eos);
  if (int(row.size()) > context_len + 1) row.resize(context_len + 1);
  return row;
}

std::vector<double> validation_loss(const Params<float>& params,
                                    const std::vector<corpus::LabeledSequence>& validation,
                                    int n_languages, const Specials& sp) {
  std::vector<Batch> per(n_languages);
  for (auto& b : per) b.pad_id = sp.pad;
  for (const auto& s : validation)
    per.at(s.language).rows.push_back(training_row(s, sp.bos, sp.eos, params.config.context_len));
  std::vector<double> out(n_languages, std::numeric_limits<double>::quiet_NaN());
  for (int l = 0; l < n_languages; ++l)
    if (!per[l].rows.empty()) out[l] = loss_only(params, per[l]);
  return out;
}

TrainResult train_lm(const ModelConfig& config, const TrainPlan& plan,
                     const std::vector<corpus::LabeledSequence>& train,
                     const std::vector<corpus::LabeledSequence>& validation, int n_languages,
                     const Specials& sp, const TrainCallbacks& cb) {
  config.validate();
  plan.validate();
  if (int(train.size()) < plan.batch_size)
    throw ValidationError(fmt::format("training stream has {} sequences, shorter than one batch of {}",
                                      train.size(), plan.batch_size));
  std::vector<std::vector<int>> rows;
  long row_tokens = 0;
  for (const auto& s : train) {
    if (s.tokens.empty()) throw ValidationError("training sequence is not encoded");
    rows.push_back(training_row(s, sp.bos, sp.eos, config.context_len));
    row_tokens += long(rows.back().size()) - 1;
  }
  const double tokens_per_step = double(row_tokens) / double(rows.size()) * plan.batch_size;
  const long total_steps =
      std::max<long>(1, long(std::ceil(double(plan.resolved_total_tokens(config)) / tokens_per_step)));

  TrainResult res{init_model<float>(config), {}, {}};
  AdamState<float> adam(res.params.values.size());
  std::vector<int> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::size_t cursor = order.size();
  int epoch = 0;
  long tokens_seen = 0;
  double first_loss = -1;

  auto checkpoint = [&](long step) {
    if (cb.checkpoint_dir.empty()) return;
    const std::string path = (std::filesystem::path(cb.checkpoint_dir) / fmt::format("step_{:07d}.ckpt", step)).string();
    save_checkpoint(res.params, path, nlohmann::json{{"step", step}, {"tokens_seen", tokens_seen}});
    res.checkpoints.push_back(path);
  };

  for (long step = 1; step <= total_steps; ++step) {
    Batch batch;
    batch.pad_id = sp.pad;
    while (int(batch.rows.size()) < plan.batch_size) {
      if (cursor == order.size()) {
        Rng rng(plan.seed * 7919ULL + std::uint64_t(epoch++));
        rng.shuffle(order);
        cursor = 0;
      }
      batch.rows.push_back(rows[order[cursor++]]);
    }
    ForwardOptions fo{config.dropout > 0, plan.seed ^ std::uint64_t(step)};
    auto lg = loss_and_grads(res.params, batch, fo);
    if (!std::isfinite(lg.loss)) throw NumericalError(fmt::format("training loss is non-finite at step {}", step));
    if (first_loss < 0) first_loss = lg.loss;
    const double lr = learning_rate(plan, step, total_steps);
    adamw_step(res.params, lg.grads, adam, plan, step, lr);
    tokens_seen += lg.tokens;

    LossPoint pt{step, tokens_seen, lr, lg.loss, {}};
    if (step % plan.eval_interval == 0 || step == total_steps) {
      if (!validation.empty()) pt.val_loss = validation_loss(res.params, validation, n_languages, sp);
      if (cb.on_eval) cb.on_eval(pt);
    }
    res.history.push_back(std::move(pt));
    if (plan.checkpoint_interval > 0 && step % plan.checkpoint_interval == 0 && step != total_steps)
      checkpoint(step);
  }
  checkpoint(total_steps);
  return res;
}

std::string history_csv(const std::vector<LossPoint>& history, const std::vector<std::string>& languages) {
  std::string out = "step,tokens_seen,lr,train_loss";
  for (const auto& l : languages) out += ",val_" + l;
  out += "\n";
  for (const auto& p : history) {
    out += fmt::format("{},{},{:.6e},{:.6f}", p.step, p.tokens_seen, p.lr, p.train_loss);
    for (std::size_t l = 0; l < languages.size(); ++l)
      out += l < p.val_loss.size() ? fmt::format(",{:.6f}", p.val_loss[l]) : std::string(",");
    out += "\n";
  }
  return out;
}

template double adamw_step<float>(Params<float>&, Params<float>&, AdamState<float>&, const TrainPlan&, long, double);
template double adamw_step<double>(Params<double>&, Params<double>&, AdamState<double>&, const TrainPlan&, long,
                                   double);

}  // namespace ct::lm
