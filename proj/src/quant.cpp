#include "pibinn/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "pibinn/errors.hpp"
#include "pibinn/rng.hpp"

namespace pibinn {

QatMode parse_qat_mode(std::string_view s) {
  if (s == "lazy") return QatMode::LazyProjection;
  if (s == "prox") return QatMode::ProxRegularized;
  throw ConfigError("unknown quantization mode '" + std::string(s) + "' (expected lazy|prox)");
}

std::string_view to_string(QatMode m) noexcept {
  return m == QatMode::LazyProjection ? "lazy" : "prox";
}

ScaleAxis parse_scale_axis(std::string_view s) {
  if (s == "row") return ScaleAxis::Row;
  if (s == "column") return ScaleAxis::Column;
  if (s == "matrix") return ScaleAxis::Matrix;
  throw ConfigError("unknown scale axis '" + std::string(s) + "' (expected row|column|matrix)");
}

std::string_view to_string(ScaleAxis a) noexcept {
  switch (a) {
    case ScaleAxis::Row: return "row";
    case ScaleAxis::Column: return "column";
    case ScaleAxis::Matrix: return "matrix";
  }
  return "row";
}

double QuantConfig::learning_rate(std::size_t epoch) const {
  if (decay_every == 0) return lr0;
  return lr0 * std::pow(decay, static_cast<double>(epoch / decay_every));
}

void QuantConfig::validate() const {
  if (!(lambda0 > 0.0) || !std::isfinite(lambda0)) throw ConfigError("lambda0 must be positive");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be >= 0");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must lie in (0, 1]");
}

nlohmann::ordered_json to_json(const QuantConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(c.mode);
  j["lambda0"] = c.lambda0;
  j["beta"] = c.beta;
  j["lr0"] = c.lr0;
  j["decay"] = c.decay;
  j["decay_every"] = c.decay_every;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["optimizer"] = to_string(c.optimizer);
  return j;
}

namespace {

template <typename T>
T get_as(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("quant.") + key + " has the wrong type");
  }
}

std::size_t get_count(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(std::string("quant.") + key + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

QuantConfig quant_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("quant section must be an object");
  static const char* known[] = {"mode", "lambda0", "beta", "lr0", "decay",
                                "decay_every", "epochs", "seed", "optimizer"};
  for (const auto& [k, _] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) ==
        std::end(known)) {
      throw ConfigError("unknown key quant." + k);
    }
  }
  QuantConfig c;
  if (j.contains("mode")) c.mode = parse_qat_mode(get_as<std::string>(j, "mode"));
  if (j.contains("lambda0")) c.lambda0 = get_as<double>(j, "lambda0");
  if (j.contains("beta")) c.beta = get_as<double>(j, "beta");
  if (j.contains("lr0")) c.lr0 = get_as<double>(j, "lr0");
  if (j.contains("decay")) c.decay = get_as<double>(j, "decay");
  if (j.contains("decay_every")) c.decay_every = get_count(j, "decay_every");
  if (j.contains("epochs")) c.epochs = get_count(j, "epochs");
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer()) {
      throw ConfigError("quant.seed must be an integer");
    }
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("optimizer")) {
    try {
      c.optimizer = parse_optimizer(get_as<std::string>(j, "optimizer"));
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  }
  c.validate();
  return c;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const rng::Key key{seed, 0x5a0ff1eULL + epoch};
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = rng::bits(key, i) % i;
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

void for_each_batch(const Split& split, const EpochOptions& opts,
                    const std::function<void(const Batch&, const Batch&)>& fn) {
  const std::size_t total = split.size();
  if (total == 0) throw InvalidArgument("empty training split");
  const std::size_t bs = opts.batch_size == 0 ? total : std::min(opts.batch_size, total);
  const auto order = epoch_order(total, opts.seed, opts.epoch);
  Batch y(split.y.rows(), 0), x(split.x.rows(), 0);
  for (std::size_t start = 0; start < total; start += bs) {
    const std::size_t len = std::min(bs, total - start);
    y.resize(split.y.rows(), static_cast<Eigen::Index>(len));
    x.resize(split.x.rows(), static_cast<Eigen::Index>(len));
    for (std::size_t i = 0; i < len; ++i) {
      const auto c = static_cast<Eigen::Index>(order[start + i]);
      y.col(static_cast<Eigen::Index>(i)) = split.y.col(c);
      x.col(static_cast<Eigen::Index>(i)) = split.x.col(c);
    }
    fn(y, x);
  }
}

namespace {

void check_gradients(const Gradients& g, const EpochOptions& opts, std::size_t batch) {
  if (g.all_finite() && std::isfinite(g.loss)) return;
  std::string where;
  for (std::size_t k = 0; k < g.dW.size(); ++k) {
    if (!all_finite(g.dW[k]) || !std::isfinite(g.dtheta[k])) {
      where = ", layer " + std::to_string(k + 1);
      break;
    }
  }
  throw NumericError("non-finite gradient in epoch " + std::to_string(opts.epoch) + ", batch " +
                     std::to_string(batch) + where + " (loss " + std::to_string(g.loss) + ")");
}

void clamp_thresholds(std::vector<LayerParams>& layers) {
  for (auto& l : layers) l.theta = std::max(l.theta, 0.0);
}

}  // namespace

double train_epoch(UnrolledNet& net, Optimizer& optimizer, const LinearOperator& sensing,
                   const Split& split, double lr, const EpochOptions& opts) {
  double sum = 0.0;
  std::size_t batches = 0;
  for_each_batch(split, opts, [&](const Batch& y, const Batch& x) {
    const Gradients g = loss_and_gradients(net, sensing, y, x, opts.loss, opts.workers);
    check_gradients(g, opts, batches);
    optimizer.step(parameter_spans(net), gradient_spans(g), lr);
    clamp_thresholds(net.layers);
    enforce_mask(net);
    sum += g.loss;
    ++batches;
  });
  return sum / static_cast<double>(batches);
}

double train_epoch(FcnNet& net, Optimizer& optimizer, const Split& split, double lr,
                   const EpochOptions& opts) {
  double sum = 0.0;
  std::size_t batches = 0;
  for_each_batch(split, opts, [&](const Batch& y, const Batch& x) {
    const ForwardTrace trace = forward(net, y);
    const Gradients g = backward(net, y, x, trace, opts.loss);
    check_gradients(g, opts, batches);
    optimizer.step(parameter_spans(net), gradient_spans(g), lr);
    clamp_thresholds(net.layers);
    sum += g.loss;
    ++batches;
  });
  return sum / static_cast<double>(batches);
}

DenseMatrix sign_project(const DenseMatrix& latent, double lambda0,
                         const std::optional<SparsityMask>& mask) {
  if (!(lambda0 > 0.0)) throw InvalidArgument("lambda0 must be positive");
  DenseMatrix out(latent.rows(), latent.cols());
  for (Eigen::Index r = 0; r < latent.rows(); ++r) {
    for (Eigen::Index c = 0; c < latent.cols(); ++c) {
      out(r, c) = latent(r, c) < 0.0 ? -lambda0 : lambda0;
    }
  }
  if (mask) apply_mask_inplace(out, *mask);
  return out;
}

ShadowState ShadowState::from_net(const UnrolledNet& net, double lambda0, OptimizerKind kind) {
  ShadowState s{net, lambda0, Optimizer(kind)};
  s.latent.quant_mode = QuantMode::HighRes;
  s.latent.scale = 1.0;
  s.latent.lambda0 = lambda0;
  return s;
}

Projection one_bit_projection(double lambda0, const std::optional<SparsityMask>& mask) {
  return [lambda0, mask](const DenseMatrix& w) { return sign_project(w, lambda0, mask); };
}

Projection ternary_projection(ScaleAxis axis, const std::optional<SparsityMask>& mask) {
  return [axis, mask](const DenseMatrix& w) {
    DenseMatrix out = ternary_project(mask ? apply_mask(w, *mask) : w, axis).reconstruction();
    if (mask) apply_mask_inplace(out, *mask);
    return out;
  };
}

Projection channelwise_projection(const std::optional<SparsityMask>& mask) {
  return [mask](const DenseMatrix& w) {
    DenseMatrix out = channelwise_binarize(mask ? apply_mask(w, *mask) : w).reconstruction();
    if (mask) apply_mask_inplace(out, *mask);
    return out;
  };
}

void refresh_projection(UnrolledNet& net, const ShadowState& shadow, const Projection& project) {
  if (net.depth() != shadow.latent.depth()) throw InvalidArgument("shadow depth differs from net");
  for (std::size_t k = 0; k < net.depth(); ++k) {
    const auto& src = shadow.latent.layers[k];
    if (src.W.rows() != net.layers[k].W.rows() || src.W.cols() != net.layers[k].W.cols()) {
      throw InvalidArgument("shadow layer " + std::to_string(k) + " shape differs from net");
    }
    net.layers[k].W = project(src.W);
    net.layers[k].theta = src.theta;
  }
  net.lambda0 = shadow.lambda0;
}

double ste_epoch(UnrolledNet& net, ShadowState& shadow, const LinearOperator& sensing,
                 const Split& split, double lr, const EpochOptions& opts,
                 const Projection& project) {
  double sum = 0.0;
  std::size_t batches = 0;
  for_each_batch(split, opts, [&](const Batch& y, const Batch& x) {
    Gradients g = loss_and_gradients(net, sensing, y, x, opts.loss, opts.workers);
    check_gradients(g, opts, batches);
    const double mult = net.weight_multiplier();
    if (mult != 1.0) {
      for (auto& d : g.dW) d /= mult;
    }
    shadow.optimizer.step(parameter_spans(shadow.latent), gradient_spans(g), lr);
    clamp_thresholds(shadow.latent.layers);
    enforce_mask(shadow.latent);
    refresh_projection(net, shadow, project);
    sum += g.loss;
    ++batches;
  });
  return sum / static_cast<double>(batches);
}

double prox_regularizer(double w, double lambda0) {
  return std::min(std::abs(w - lambda0), std::abs(w + lambda0));
}

double prox_step(double w, double t, double lambda0) {
  if (!(t >= 0.0)) throw InvalidArgument("prox step size must be >= 0");
  const double anchor = w < 0.0 ? -lambda0 : lambda0;
  if (w > anchor) return std::max(anchor, w - t);
  return std::min(anchor, w + t);
}

double prox_epoch(UnrolledNet& net, ShadowState& shadow, const LinearOperator& sensing,
                  const Split& split, double lr, double beta, const EpochOptions& opts) {
  if (!(beta >= 0.0)) throw InvalidArgument("beta must be >= 0");
  const double t = lr * beta;
  double sum = 0.0;
  std::size_t batches = 0;
  for_each_batch(split, opts, [&](const Batch& y, const Batch& x) {
    const Gradients g = loss_and_gradients(shadow.latent, sensing, y, x, opts.loss, opts.workers);
    check_gradients(g, opts, batches);
    shadow.optimizer.step(parameter_spans(shadow.latent), gradient_spans(g), lr);
    clamp_thresholds(shadow.latent.layers);
    if (t > 0.0) {
      for (auto& l : shadow.latent.layers) {
        for (Eigen::Index i = 0; i < l.W.size(); ++i) {
          l.W.data()[i] = prox_step(l.W.data()[i], t, shadow.lambda0);
        }
      }
    }
    enforce_mask(shadow.latent);
    sum += g.loss;
    ++batches;
  });
  refresh_projection(net, shadow, one_bit_projection(shadow.lambda0, net.mask));
  return sum / static_cast<double>(batches);
}

namespace {

double full_loss(const UnrolledNet& net, const LinearOperator& sensing, const Split& split,
                 LossKind kind) {
  return batch_loss(forward(net, sensing, split.y).output(), split.x, kind);
}

}  // namespace

ScaleResult stage2_scale(UnrolledNet& net, const LinearOperator& sensing, const Split& split,
                         double lr, std::size_t epochs, const EpochOptions& opts,
                         OptimizerKind optimizer, const ScaleEpochHook& on_epoch) {
  if (net.quant_mode != QuantMode::OneBitGlobal) {
    throw InvalidArgument("scale optimization needs a one-bit net");
  }
  if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
  net.scale = 1.0;
  ScaleResult res;
  res.initial_loss = full_loss(net, sensing, split, opts.loss);
  if (!std::isfinite(res.initial_loss)) throw NumericError("initial scale loss is not finite");
  res.best_loss = res.initial_loss;
  double best_scale = 1.0;
  double prev = res.initial_loss;
  std::size_t rising = 0;
  Optimizer opt(optimizer);
  EpochOptions eo = opts;
  for (std::size_t e = 0; e < epochs; ++e) {
    eo.epoch = opts.epoch + e;
    std::size_t batch = 0;
    for_each_batch(split, eo, [&](const Batch& y, const Batch& x) {
      const Gradients g = loss_and_gradients(net, sensing, y, x, eo.loss, eo.workers);
      if (!std::isfinite(g.dscale)) {
        throw NumericError("non-finite scale gradient in epoch " + std::to_string(eo.epoch) +
                           ", batch " + std::to_string(batch));
      }
      double s = net.scale;
      const double d = g.dscale;
      opt.step({std::span<double>(&s, 1)}, {std::span<const double>(&d, 1)}, lr);
      net.scale = std::max(s, std::numeric_limits<double>::min());
      ++batch;
    });
    double l = std::numeric_limits<double>::infinity();
    try {
      l = full_loss(net, sensing, split, eo.loss);
    } catch (const NumericError&) {
    }
    res.epoch_losses.push_back(l);
    if (on_epoch) on_epoch(eo.epoch, l);
    if (l < res.best_loss) {
      res.best_loss = l;
      best_scale = net.scale;
    }
    rising = (l > prev || !std::isfinite(l)) ? rising + 1 : 0;
    prev = l;
    if (rising >= kDivergencePatience) {
      res.diverged = true;
      break;
    }
  }
  net.scale = best_scale;
  res.scale = best_scale;
  return res;
}

DenseMatrix ScaledSigns::reconstruction() const {
  DenseMatrix out = levels;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      const std::size_t g = axis == ScaleAxis::Row      ? static_cast<std::size_t>(r)
                            : axis == ScaleAxis::Column ? static_cast<std::size_t>(c)
                                                        : 0;
      out(r, c) *= scales.at(g);
    }
  }
  return out;
}

namespace {

std::vector<double> group_mean_abs(const DenseMatrix& w, ScaleAxis axis) {
  switch (axis) {
    case ScaleAxis::Row: {
      std::vector<double> s(static_cast<std::size_t>(w.rows()));
      for (Eigen::Index r = 0; r < w.rows(); ++r) s[r] = w.cols() ? w.row(r).cwiseAbs().mean() : 0.0;
      return s;
    }
    case ScaleAxis::Column: {
      std::vector<double> s(static_cast<std::size_t>(w.cols()));
      for (Eigen::Index c = 0; c < w.cols(); ++c) s[c] = w.rows() ? w.col(c).cwiseAbs().mean() : 0.0;
      return s;
    }
    case ScaleAxis::Matrix:
      return {w.size() ? w.cwiseAbs().mean() : 0.0};
  }
  return {};
}

}  // namespace

ScaledSigns ternary_project(const DenseMatrix& w, ScaleAxis axis) {
  ScaledSigns out;
  out.axis = axis;
  out.scales = group_mean_abs(w, axis);
  for (auto& g : out.scales) {
    if (g == 0.0) g = 1.0;
  }
  out.levels.resize(w.rows(), w.cols());
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      const std::size_t g = axis == ScaleAxis::Row      ? static_cast<std::size_t>(r)
                            : axis == ScaleAxis::Column ? static_cast<std::size_t>(c)
                                                        : 0;
      const double v = w(r, c) / out.scales[g];
      out.levels(r, c) = (v > -kTernaryCut && v < kTernaryCut) ? 0.0 : (v < 0.0 ? -1.0 : 1.0);
    }
  }
  return out;
}

ScaledSigns channelwise_binarize(const DenseMatrix& w) {
  ScaledSigns out;
  out.axis = ScaleAxis::Row;
  out.scales = group_mean_abs(w, ScaleAxis::Row);
  out.levels = w.unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
  return out;
}

std::uint64_t stored_weight_count(const UnrolledNet& net) {
  std::uint64_t total = 0;
  for (const auto& l : net.layers) {
    total += net.mask ? net.mask->active_count() : static_cast<std::uint64_t>(l.W.size());
  }
  return total;
}

std::uint64_t effective_bits(const UnrolledNet& net, ScaleAxis axis) {
  const std::uint64_t w = stored_weight_count(net);
  const std::uint64_t k = net.depth();
  std::uint64_t groups = 0;
  for (const auto& l : net.layers) {
    groups += axis == ScaleAxis::Row      ? static_cast<std::uint64_t>(l.W.rows())
              : axis == ScaleAxis::Column ? static_cast<std::uint64_t>(l.W.cols())
                                          : 1;
  }
  switch (net.quant_mode) {
    case QuantMode::HighRes: return 32 * w + 32 * k;
    case QuantMode::OneBitGlobal: return w + 32 * k + 32;
    case QuantMode::Ternary: return 2 * w + 32 * groups + 32 * k;
    case QuantMode::ChannelWise: {
      std::uint64_t rows = 0;
      for (const auto& l : net.layers) rows += static_cast<std::uint64_t>(l.W.rows());
      return w + 32 * rows + 32 * k;
    }
  }
  return 0;
}

}  // namespace pibinn
