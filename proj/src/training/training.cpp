#include "cofs/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "cofs/distributions.hpp"

namespace cofs {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be nonnegative");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (val_every == 0) fail("val_every must be positive");
  if (patience == 0) fail("patience must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(max_seconds >= 0.0)) fail("max_seconds must be nonnegative");
}

TrainConfig parse_train_config(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  TrainConfig c;
  for (const auto& [key, node] : tree) {
    if (!node.empty()) throw std::invalid_argument("train config: sections are not supported ('" + key + "')");
    try {
      if (key == "learning_rate") c.learning_rate = node.get_value<double>();
      else if (key == "weight_decay") c.weight_decay = node.get_value<double>();
      else if (key == "warmup_steps") c.warmup_steps = node.get_value<std::size_t>();
      else if (key == "clip_norm") c.clip_norm = node.get_value<double>();
      else if (key == "batch_size") c.batch_size = node.get_value<std::size_t>();
      else if (key == "max_epochs") c.max_epochs = node.get_value<std::size_t>();
      else if (key == "val_every") c.val_every = node.get_value<std::size_t>();
      else if (key == "patience") c.patience = node.get_value<std::size_t>();
      else if (key == "beta1") c.beta1 = node.get_value<double>();
      else if (key == "beta2") c.beta2 = node.get_value<double>();
      else if (key == "adam_eps") c.adam_eps = node.get_value<double>();
      else if (key == "rotation_augment") c.rotation_augment = node.get_value<bool>();
      else if (key == "seed") c.seed = node.get_value<std::uint64_t>();
      else if (key == "max_seconds") c.max_seconds = node.get_value<double>();
      else if (key == "max_steps") c.max_steps = node.get_value<std::size_t>();
      else throw std::invalid_argument("train config: unknown key '" + key + "'");
    } catch (const pt::ptree_bad_data&) {
      throw std::invalid_argument("train config: bad value for '" + key + "'");
    }
  }
  c.validate();
  return c;
}

TrainConfig read_train_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open train config " + path);
  return parse_train_config(in);
}

TrainingExample make_training_example(const Layout& layout, Rng& rng, const AttributeNormalizer& normalizer,
                                      std::size_t max_objects, bool rotate) {
  TrainingExample ex;
  const std::vector<std::size_t> perm = rng.permutation(layout.boxes.size());
  if (rotate) {
    Layout rotated = rotate_augment(layout, rng.uniform(0.0, 2.0 * std::numbers::pi));
    ex.target = flatten(rotated, perm, normalizer, max_objects);
    ex.boundary = std::move(rotated.boundary);
  } else {
    ex.target = flatten(layout, perm, normalizer, max_objects);
    ex.boundary = layout.boundary;
  }
  ex.condition = build_condition(ex.target, rng.uniform(), rng);
  return ex;
}

LossTerms sequence_loss(const Model& model, std::span<const TrainingExample> batch) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  std::vector<ForwardItem> items;
  items.reserve(batch.size());
  for (const auto& ex : batch) {
    if (ex.target.size() < 2) throw std::invalid_argument("loss: target sequence too short");
    if (ex.condition.size() != ex.target.size()) throw std::invalid_argument("loss: condition and target lengths differ");
    items.push_back({&ex.boundary, &ex.condition, &ex.target, ex.target.size() - 1});
  }
  const DecodedBatch out = model.forward(items);

  std::vector<std::size_t> class_rows, class_ids, scalar_rows;
  std::vector<double> scalar_values;
  const std::size_t end = model.config().end_symbol();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TokenSequence& s = batch[b].target;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const TokenValue& next = s.tokens[i + 1];
      const std::size_t row = out.row_offset[b] + i;
      switch (next.kind) {
        case TokenKind::Scalar:
          scalar_rows.push_back(row);
          scalar_values.push_back(next.scalar);
          break;
        case TokenKind::Class:
          class_rows.push_back(row);
          class_ids.push_back(next.cls);
          break;
        case TokenKind::Eos:
          class_rows.push_back(row);
          class_ids.push_back(end);
          break;
        default: throw std::invalid_argument("loss: target sequence contains MASK or SOS after position 0");
      }
    }
  }

  LossTerms terms;
  terms.class_targets = class_rows.size();
  terms.scalar_targets = scalar_rows.size();
  Tensor ce = cross_entropy_sum(model.class_head(gather_rows(out.hidden, class_rows)), class_ids);
  terms.class_ce = ce.item();
  Tensor sum = ce;
  if (!scalar_rows.empty()) {
    Tensor nll = logistic_mixture_nll_sum(model.mixture_head(gather_rows(out.hidden, scalar_rows)), scalar_values);
    terms.scalar_nll = nll.item();
    sum = add(sum, nll);
  }
  terms.total = scale(sum, 1.0 / static_cast<double>(terms.targets()));
  return terms;
}

double learning_rate_at(std::size_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.learning_rate;
  return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= f;
  }
  return norm;
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    auto theta = params_[i].mutable_values();
    auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      const double mh = m[k] / c1, vh = v[k] / c2;
      theta[k] -= lr * (mh / (std::sqrt(vh) + eps_) + wd_ * theta[k]);
    }
  }
}

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["split"] = m.split;
  j["nll"] = m.nll;
  j["classCE"] = m.class_ce;
  j["scalarNLL"] = m.scalar_nll;
  j["gradNorm"] = m.grad_norm;
  j["lr"] = m.lr;
  return j.dump();
}

std::vector<TrainingExample> make_validation_set(std::span<const Layout> layouts, const AttributeNormalizer& normalizer,
                                                 std::size_t max_objects, std::uint64_t seed) {
  std::vector<TrainingExample> out;
  out.reserve(layouts.size());
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    Rng rng = Rng::derive(seed, i);
    out.push_back(make_training_example(layouts[i], rng, normalizer, max_objects, true));
  }
  return out;
}

namespace {

struct Accumulator {
  double weighted_total = 0.0, class_ce = 0.0, scalar_nll = 0.0;
  std::size_t targets = 0, class_targets = 0, scalar_targets = 0;

  void add(const LossTerms& t) {
    weighted_total += t.total.item() * static_cast<double>(t.targets());
    class_ce += t.class_ce;
    scalar_nll += t.scalar_nll;
    targets += t.targets();
    class_targets += t.class_targets;
    scalar_targets += t.scalar_targets;
  }

  EpochMetrics metrics(std::size_t epoch, const char* split) const {
    EpochMetrics m;
    m.epoch = epoch;
    m.split = split;
    m.nll = targets ? weighted_total / static_cast<double>(targets) : 0.0;
    m.class_ce = class_targets ? class_ce / static_cast<double>(class_targets) : 0.0;
    m.scalar_nll = scalar_targets ? scalar_nll / static_cast<double>(scalar_targets) : 0.0;
    return m;
  }
};

void copy_weights(const Model& from, Model& to) {
  auto src = from.named_parameters();
  auto dst = to.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto v = src[i].second.values();
    std::copy(v.begin(), v.end(), dst[i].second.mutable_values().begin());
  }
}

}  // namespace

EpochMetrics evaluate(const Model& model, std::span<const TrainingExample> examples, std::size_t chunk) {
  NoGradGuard no_grad;
  Accumulator acc;
  for (std::size_t begin = 0; begin < examples.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, examples.size() - begin);
    acc.add(sequence_loss(model, examples.subspan(begin, n)));
  }
  return acc.metrics(0, "val");
}

TrainResult train(Model& model, std::span<const Layout> train_set, std::span<const Layout> val_set,
                  const AttributeNormalizer& normalizer, const TrainConfig& cfg, std::ostream* metrics) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation set");
  const std::size_t kmax = model.config().max_objects;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  TrainResult result;
  auto record = [&](EpochMetrics m) {
    m.elapsed_seconds = elapsed();
    result.history.push_back(m);
    if (metrics) *metrics << metrics_json(m) << '\n' << std::flush;
  };

  const std::vector<TrainingExample> val = make_validation_set(val_set, normalizer, kmax, cfg.seed ^ 0x76616c00u);
  EpochMetrics base = evaluate(model, val);
  record(base);
  result.baseline_val_nll = result.best_val_nll = base.nll;
  Model best = model.clone();

  std::vector<Tensor> params = model.parameters();
  AdamW opt(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Rng rng(cfg.seed);
  std::size_t stale_rounds = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Accumulator acc;
    double grad_norm_sum = 0.0, lr = 0.0;
    std::size_t batches = 0;
    const std::vector<std::size_t> order = rng.permutation(train_set.size());
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - begin);
      std::vector<TrainingExample> batch;
      batch.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        batch.push_back(make_training_example(train_set[order[begin + i]], rng, normalizer, kmax, cfg.rotation_augment));
      }
      model.zero_grad();
      LossTerms terms = sequence_loss(model, batch);
      if (!std::isfinite(terms.total.item())) {
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(opt.steps() + 1));
      }
      backward(terms.total);
      grad_norm_sum += clip_grad_norm(params, cfg.clip_norm);
      lr = learning_rate_at(opt.steps() + 1, cfg);
      opt.step(lr);
      acc.add(terms);
      ++batches;
      if ((cfg.max_steps && opt.steps() >= cfg.max_steps) || (cfg.max_seconds > 0.0 && elapsed() >= cfg.max_seconds)) {
        result.budget_exhausted = true;
        break;
      }
    }
    EpochMetrics m = acc.metrics(epoch, "train");
    m.grad_norm = grad_norm_sum / static_cast<double>(batches);
    m.lr = lr;
    record(m);
    result.epochs_run = epoch;
    result.steps = opt.steps();

    if (epoch % cfg.val_every == 0 || result.budget_exhausted || epoch == cfg.max_epochs) {
      EpochMetrics v = evaluate(model, val);
      v.epoch = epoch;
      v.lr = lr;
      record(v);
      if (v.nll < result.best_val_nll) {
        result.best_val_nll = v.nll;
        result.best_epoch = epoch;
        copy_weights(model, best);
        stale_rounds = 0;
      } else if (++stale_rounds >= cfg.patience) {
        result.early_stopped = true;
      }
    }
    if (result.early_stopped || result.budget_exhausted) break;
  }
  copy_weights(best, model);
  return result;
}

Model transfer_init(const Model& source, std::size_t num_classes, std::uint64_t seed) {
  ModelConfig cfg = source.config();
  const bool same = cfg.num_classes == num_classes;
  cfg.num_classes = num_classes;
  Model target(cfg, seed);
  auto src = source.named_parameters();
  auto dst = target.named_parameters();
  Rng rng(seed);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const std::string& name = dst[i].first;
    const bool class_dependent = name == "embed.class" || name == "head.class.w" || name == "head.class.b";
    auto out = dst[i].second.mutable_values();
    if (!class_dependent || same) {
      auto v = src[i].second.values();
      if (v.size() != out.size()) throw std::invalid_argument("transfer_init: incompatible parameter " + name);
      std::copy(v.begin(), v.end(), out.begin());
    } else {
      for (double& x : out) x = rng.normal(0.0, 0.01);
    }
  }
  return target;
}

}  // namespace cofs
