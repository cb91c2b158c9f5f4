#include "pgd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "pgd/metrics.hpp"
#include "pgd/ops.hpp"
#include "pgd/random.hpp"

namespace pgd {

namespace {

std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& ids, std::int64_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ids.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i), ids.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void clip_gradients(ModelState& model, double limit) {
  double sq = 0.0;
  for (auto& [_, p] : model.params) {
    if (!p.grad().defined()) continue;
    for (double g : p.grad().to_vector()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= limit) return;
  const double scale = limit / norm;
  for (auto& [_, p] : model.params) {
    if (!p.grad().defined()) continue;
    Tensor g = p.grad();
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (auto& v : g.data<T>()) v = static_cast<T>(v * scale);
    });
  }
}

struct ValidationPass {
  double loss = 0.0;
  std::vector<double> dsc;
  std::vector<double> jaccard;
};

ValidationPass validate_epoch(const ModelState& model, const std::vector<SegSample>& data,
                              const std::vector<std::size_t>& ids, const TrainConfig& cfg, LossPhase phase) {
  NoGradGuard no_grad;
  const std::int64_t K = model.config.num_classes;
  ValidationPass r;
  std::vector<std::vector<double>> per_dsc(static_cast<std::size_t>(K)), per_jac(static_cast<std::size_t>(K));
  double weighted = 0.0;
  for (const auto& which : batches_of(ids, cfg.batch_size)) {
    const Batch b = make_batch(data, which, cfg.dtype);
    const Tensor logits = forward(model, b.images);
    const Tensor loss = combined_loss(ops::softmax_channels(logits), b.labels, cfg.loss, phase);
    weighted += loss.item() * static_cast<double>(which.size());
    const Tensor pred = argmax_classes(logits);
    const std::int64_t P = pred.numel() / static_cast<std::int64_t>(which.size());
    const auto flat = pred.to_vector();
    for (std::size_t s = 0; s < which.size(); ++s) {
      const Tensor ps = Tensor::from_values({P}, std::span<const double>(flat).subspan(s * P, P));
      const Tensor ts = data[which[s]].clean_label.reshaped({P});
      for (int k = 0; k < K; ++k) {
        per_dsc[static_cast<std::size_t>(k)].push_back(dsc(ps, ts, k));
        per_jac[static_cast<std::size_t>(k)].push_back(jaccard(ps, ts, k));
      }
    }
  }
  r.loss = ids.empty() ? 0.0 : weighted / static_cast<double>(ids.size());
  for (int k = 0; k < K; ++k) {
    r.dsc.push_back(mean_std(per_dsc[static_cast<std::size_t>(k)]).mean);
    r.jaccard.push_back(mean_std(per_jac[static_cast<std::size_t>(k)]).mean);
  }
  return r;
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (epochs < 0) throw ConfigError("train.epochs: must be >= 0");
  if (min_epochs_before_switch < 0) throw ConfigError("train.min_epochs_before_switch: must be >= 0");
  if (grad_clip < 0.0) throw ConfigError("train.grad_clip: must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.adam.beta1: must lie in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.adam.beta2: must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("train.adam.eps: must be > 0");
  loss.validate();
}

std::map<std::string, Tensor> AdamState::to_tensors() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : m) out["adam.m." + name] = t;
  for (const auto& [name, t] : v) out["adam.v." + name] = t;
  out["adam.step"] = Tensor::scalar(static_cast<double>(step));
  return out;
}

AdamState AdamState::from_tensors(const std::map<std::string, Tensor>& tensors) {
  AdamState s;
  for (const auto& [name, t] : tensors) {
    if (name.rfind("adam.m.", 0) == 0) s.m[name.substr(7)] = t;
    else if (name.rfind("adam.v.", 0) == 0) s.v[name.substr(7)] = t;
    else if (name == "adam.step") s.step = static_cast<std::int64_t>(t.item());
  }
  return s;
}

void adam_step(ModelState& model, AdamState& state, const AdamConfig& cfg, double learning_rate) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : model.params) {
    const Tensor g = p.grad();
    if (g.defined()) {
      try {
        g.check_finite("gradient of " + name);
      } catch (const NumericError&) {
        throw NumericError("adam_step: non-finite gradient in layer '" + name + "'");
      }
    }
    auto [mit, fresh_m] = state.m.try_emplace(name);
    if (fresh_m) mit->second = Tensor::zeros(p.shape(), p.dtype());
    auto [vit, fresh_v] = state.v.try_emplace(name);
    if (fresh_v) vit->second = Tensor::zeros(p.shape(), p.dtype());
    if (mit->second.shape() != p.shape() || vit->second.shape() != p.shape()) {
      throw ShapeError("adam_step: moment buffers of '" + name + "' do not match the parameter shape");
    }
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = p.template data<T>();
      auto m = mit->second.template data<T>();
      auto v = vit->second.template data<T>();
      const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
      const T lr = static_cast<T>(learning_rate), eps = static_cast<T>(cfg.eps);
      const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
      const T* gp = g.defined() ? g.template data<T>().data() : nullptr;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = gp ? gp[i] : T(0);
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        w[i] -= lr * (m[i] * ic1) / (std::sqrt(v[i] * ic2) + eps);
      }
    });
  }
}

TrainResult train(const ModelState& initial, const std::vector<SegSample>& data,
                  const std::vector<std::size_t>& train_ids, const std::vector<std::size_t>& val_ids,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.empty() || train_ids.empty()) throw ConfigError("train: the training set is empty");
  if (static_cast<std::int64_t>(cfg.loss.class_weights.size()) != initial.config.num_classes) {
    throw ConfigError("loss.class_weights: expected " + std::to_string(initial.config.num_classes) + " weights");
  }
  TrainResult r;
  r.final_state = initial.to(cfg.dtype);
  r.best_state = r.final_state.clone();
  double best_dsc = -1.0;
  LossPhase phase = LossPhase::FL;
  std::vector<double> history;

  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = phase;
    const auto order = random::permutation(train_ids.size(), random::mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> shuffled;
    for (auto i : order) shuffled.push_back(train_ids[i]);

    double loss_sum = 0.0, pt_sum = 0.0;
    std::int64_t pt_count = 0;
    std::int64_t batch_index = 0;
    for (const auto& which : batches_of(shuffled, cfg.batch_size)) {
      ++batch_index;
      const Batch b = make_batch(data, which, cfg.dtype);
      r.final_state.zero_grad();
      try {
        const Tensor probs = ops::softmax_channels(forward(r.final_state, b.images));
        const Tensor loss = combined_loss(probs, b.labels, cfg.loss, phase);
        backward(loss);
        loss_sum += loss.item() * static_cast<double>(which.size());
        {
          NoGradGuard no_grad;
          const Tensor pt = truth_probability(probs.detach(), b.labels);
          for (double v : pt.to_vector()) pt_sum += v;
          pt_count += pt.numel();
        }
        if (cfg.grad_clip > 0.0) clip_gradients(r.final_state, cfg.grad_clip);
        adam_step(r.final_state, r.adam, cfg.adam, cfg.learning_rate);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) + ": " +
                           e.what());
      }
    }
    r.final_state.zero_grad();
    rec.train_loss = loss_sum / static_cast<double>(train_ids.size());
    rec.mean_pt = pt_sum / static_cast<double>(pt_count);

    if (!val_ids.empty()) {
      const ValidationPass v = validate_epoch(r.final_state, data, val_ids, cfg, phase);
      rec.val_loss = v.loss;
      rec.val_dsc = v.dsc;
      rec.val_jaccard = v.jaccard;
      const double tumor = v.dsc.back();
      if (tumor > best_dsc) {
        best_dsc = tumor;
        r.best_epoch = epoch;
        r.best_state = r.final_state.clone();
      }
    }
    r.records.push_back(rec);
    if (on_epoch) on_epoch(rec);

    history.push_back(rec.mean_pt);
    if (cfg.loss.noise_suppression && epoch >= cfg.min_epochs_before_switch &&
        switch_scheduler(history, cfg.loss.switch_threshold) == LossPhase::NSFL) {
      phase = LossPhase::NSFL;
    }
  }
  return r;
}

EvalResult evaluate(const ModelState& model, const std::vector<SegSample>& data, const std::vector<std::size_t>& ids,
                    std::int64_t batch_size) {
  NoGradGuard no_grad;
  const std::int64_t K = model.config.num_classes;
  EvalResult r;
  r.dsc.resize(static_cast<std::size_t>(K));
  r.jaccard.resize(static_cast<std::size_t>(K));
  for (const auto& which : batches_of(ids, batch_size)) {
    const Batch b = make_batch(data, which, model.dtype());
    const Tensor pred = argmax_classes(forward(model, b.images));
    const std::int64_t P = pred.numel() / static_cast<std::int64_t>(which.size());
    const auto flat = pred.to_vector();
    for (std::size_t s = 0; s < which.size(); ++s) {
      const Tensor ps = Tensor::from_values({P}, std::span<const double>(flat).subspan(s * P, P));
      const Tensor ts = data[which[s]].clean_label.reshaped({P});
      for (int k = 0; k < K; ++k) {
        r.dsc[static_cast<std::size_t>(k)].push_back(dsc(ps, ts, k));
        r.jaccard[static_cast<std::size_t>(k)].push_back(jaccard(ps, ts, k));
      }
    }
  }
  return r;
}

std::string metrics_csv(const std::vector<EpochRecord>& records) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& r : records) {
    auto cls = [&](std::size_t k) { return k < r.val_dsc.size() ? format_number(r.val_dsc[k]) : std::string("nan"); };
    os << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.val_loss) << ',' << cls(0) << ','
       << cls(1) << ',' << cls(2) << ',' << format_number(r.mean_pt) << ',' << to_string(r.phase) << '\n';
  }
  return os.str();
}

}  // namespace pgd
