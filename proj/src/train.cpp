#include "pibinn/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pibinn/errors.hpp"
#include "pibinn/log.hpp"
#include "pibinn/rng.hpp"

namespace pibinn {

using nlohmann::json;
using nlohmann::ordered_json;

ModelKind parse_model_kind(std::string_view s) {
  if (s == "dun") return ModelKind::Dun;
  if (s == "fcn") return ModelKind::Fcn;
  throw ConfigError("unknown model kind '" + std::string(s) + "' (expected dun|fcn)");
}

std::string_view to_string(ModelKind k) noexcept { return k == ModelKind::Dun ? "dun" : "fcn"; }

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* s : known) ok = ok || k == s;
    if (!ok) throw ConfigError("unknown key " + where + "." + k);
  }
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

std::size_t count_field(const json& j, const char* key, const std::string& where) {
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(where + "." + key + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

double finite_field(const json& j, const char* key, const std::string& where) {
  if (!j.at(key).is_number()) throw ConfigError(where + "." + key + " must be a number");
  const double v = j.at(key).get<double>();
  if (!std::isfinite(v)) throw ConfigError(where + "." + key + " must be finite");
  return v;
}

template <typename F>
auto as_config(F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

ordered_json to_json(const ModelSpec& m) {
  ordered_json j;
  j["kind"] = to_string(m.kind);
  j["layers"] = m.layers;
  j["delta"] = m.delta;
  j["activation"] = to_string(m.activation);
  j["quant_mode"] = to_string(m.quant_mode);
  j["use_structure"] = m.use_structure;
  j["tied_blocks"] = m.tied_blocks;
  j["theta0"] = m.theta0;
  j["loss"] = to_string(m.loss);
  return j;
}

ModelSpec model_spec_from_json(const json& j) {
  const std::string w = "model";
  reject_unknown(j, {"kind", "layers", "delta", "activation", "quant_mode", "use_structure",
                     "tied_blocks", "theta0", "loss"}, w);
  ModelSpec m;
  if (j.contains("kind")) m.kind = parse_model_kind(field<std::string>(j, "kind", w));
  if (!j.contains("layers")) throw ConfigError("model.layers is required");
  m.layers = count_field(j, "layers", w);
  if (m.layers == 0) throw ConfigError("model.layers must be >= 1");
  if (j.contains("delta")) m.delta = finite_field(j, "delta", w);
  if (!(m.delta > 0.0 && m.delta <= 1.0)) throw ConfigError("model.delta must lie in (0, 1]");
  if (j.contains("activation")) {
    m.activation = as_config([&] { return parse_activation(field<std::string>(j, "activation", w)); });
  }
  if (j.contains("quant_mode")) {
    m.quant_mode = as_config([&] { return parse_quant_mode(field<std::string>(j, "quant_mode", w)); });
  }
  if (j.contains("use_structure")) m.use_structure = field<bool>(j, "use_structure", w);
  if (j.contains("tied_blocks")) m.tied_blocks = field<bool>(j, "tied_blocks", w);
  if (j.contains("theta0")) m.theta0 = finite_field(j, "theta0", w);
  if (m.theta0 < 0.0) throw ConfigError("model.theta0 must be >= 0");
  if (j.contains("loss")) m.loss = as_config([&] { return parse_loss_kind(field<std::string>(j, "loss", w)); });
  if (m.kind == ModelKind::Fcn && m.quant_mode != QuantMode::HighRes) {
    throw ConfigError("the fully connected baseline only supports quant_mode high_res");
  }
  return m;
}

double StageSchedule::learning_rate(std::size_t epoch) const {
  if (decay_every == 0) return lr0;
  return lr0 * std::pow(decay, static_cast<double>(epoch / decay_every));
}

ordered_json to_json(const StageSchedule& s) {
  ordered_json j;
  j["epochs"] = s.epochs;
  j["lr0"] = s.lr0;
  j["decay"] = s.decay;
  j["decay_every"] = s.decay_every;
  j["optimizer"] = to_string(s.optimizer);
  return j;
}

StageSchedule stage_schedule_from_json(const json& j, const std::string& where) {
  reject_unknown(j, {"epochs", "lr0", "decay", "decay_every", "optimizer"}, where);
  StageSchedule s;
  if (!j.contains("epochs")) throw ConfigError(where + ".epochs is required");
  s.epochs = count_field(j, "epochs", where);
  if (j.contains("lr0")) s.lr0 = finite_field(j, "lr0", where);
  if (j.contains("decay")) s.decay = finite_field(j, "decay", where);
  if (j.contains("decay_every")) s.decay_every = count_field(j, "decay_every", where);
  if (j.contains("optimizer")) {
    s.optimizer = as_config([&] { return parse_optimizer(field<std::string>(j, "optimizer", where)); });
  }
  if (!(s.lr0 > 0.0)) throw ConfigError(where + ".lr0 must be positive");
  if (!(s.decay > 0.0 && s.decay <= 1.0)) throw ConfigError(where + ".decay must lie in (0, 1]");
  return s;
}

void TrainConfig::validate() const {
  quant.validate();
  if (model.quant_mode != QuantMode::OneBitGlobal && model.kind == ModelKind::Dun &&
      quant.mode == QatMode::ProxRegularized && model.quant_mode != QuantMode::HighRes) {
    throw ConfigError("quant.mode prox is only defined for one_bit nets");
  }
  if (workers == 0) throw ConfigError("workers must be >= 1");
}

TrainConfig train_config_from_json(const json& j) {
  const std::string w = "train";
  reject_unknown(j, {"model", "pretrain", "no_pretrain", "quant", "stage2", "scale_axis",
                     "batch_size", "seed"}, w);
  TrainConfig c;
  if (!j.contains("model")) throw ConfigError("train.model is required");
  c.model = model_spec_from_json(j["model"]);
  if (j.contains("no_pretrain")) c.pretrain_enabled = !field<bool>(j, "no_pretrain", w);
  const bool quantized = c.model.quant_mode != QuantMode::HighRes;
  const bool needs_pretrain = c.pretrain_enabled || !quantized;
  if (j.contains("pretrain")) {
    c.pretrain = stage_schedule_from_json(j["pretrain"], "pretrain");
  } else if (needs_pretrain) {
    throw ConfigError(quantized ? "pretrain.epochs is required (or set no_pretrain)"
                                : "pretrain.epochs is required for full-precision training");
  }
  if (j.contains("quant")) {
    c.quant = quant_config_from_json(j["quant"]);
    if (quantized && !j["quant"].contains("epochs")) throw ConfigError("quant.epochs is required");
  } else if (quantized) {
    throw ConfigError("quant section is required for quantized models");
  }
  if (j.contains("stage2")) {
    c.stage2 = stage_schedule_from_json(j["stage2"], "stage2");
  } else if (c.model.quant_mode == QuantMode::OneBitGlobal) {
    throw ConfigError("stage2.epochs is required for one_bit models");
  }
  if (j.contains("scale_axis")) {
    c.scale_axis = parse_scale_axis(field<std::string>(j, "scale_axis", w));
  }
  if (j.contains("batch_size")) {
    c.batch_size = count_field(j, "batch_size", w);
    if (c.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer()) throw ConfigError("train.seed must be an integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  c.validate();
  return c;
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["model"] = to_json(c.model);
  j["no_pretrain"] = !c.pretrain_enabled;
  j["pretrain"] = to_json(c.pretrain);
  j["quant"] = to_json(c.quant);
  j["stage2"] = to_json(c.stage2);
  j["scale_axis"] = to_string(c.scale_axis);
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  return j;
}

Model init_model(const ModelSpec& spec, const Dataset& data, std::uint64_t seed) {
  const std::size_t m = rows(data.sensing);
  const std::size_t n = cols(data.sensing);
  if (spec.kind == ModelKind::Fcn) {
    return make_fcn(spec.layers, m, n, spec.activation, spec.theta0, seed);
  }
  const auto* block = std::get_if<BlockDiagOperator>(&data.sensing);
  const bool structured = spec.use_structure && data.spec.structure.has_value() && block;
  DenseMatrix w0;
  if (structured && spec.tied_blocks) {
    w0 = block->block();
  } else if (block) {
    w0 = block->materialize();
  } else {
    w0 = std::get<DenseMatrix>(data.sensing);
  }
  const double norm = spectral_norm(block ? block->block() : w0);
  const double lip = norm * norm;
  if (!(lip > 0.0)) throw NumericError("sensing operator has zero norm");
  UnrolledNet net = make_net(spec.layers, w0 / lip, spec.theta0 / lip, spec.activation, spec.delta);
  if (structured) {
    net.structure = data.spec.structure;
    net.tied_blocks = spec.tied_blocks;
    if (!spec.tied_blocks) {
      net.mask = mask_from_block(*data.spec.structure);
      enforce_mask(net);
    }
  }
  return net;
}

Batch predict(const Model& model, const LinearOperator& sensing, const Batch& y) {
  if (const auto* net = std::get_if<UnrolledNet>(&model)) return forward(*net, sensing, y).output();
  return forward(std::get<FcnNet>(model), y).output();
}

std::vector<double> layer_curve(const Model& model, const LinearOperator& sensing, const Split& split) {
  if (const auto* net = std::get_if<UnrolledNet>(&model)) {
    return per_layer_errors(*net, sensing, split.y, split.x);
  }
  const ForwardTrace t = forward(std::get<FcnNet>(model), split.y);
  std::vector<double> out;
  for (std::size_t k = 1; k < t.states.size(); ++k) out.push_back(nmse_db(t.states[k], split.x));
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

EpochOptions stage_options(const TrainConfig& c, std::uint64_t stage) {
  EpochOptions o;
  o.batch_size = c.batch_size;
  o.seed = rng::mix64(c.seed ^ (0x57a6e000ULL + stage));
  o.loss = c.model.loss;
  o.workers = c.workers;
  return o;
}

template <typename F>
void with_context(const std::string& stage, std::size_t epoch, F&& f) {
  try {
    f();
  } catch (const NumericError& e) {
    throw NumericError(stage + " epoch " + std::to_string(epoch) + ": " + e.what());
  }
}

void record(TrainResult& res, const EpochHook& hook, EpochRecord rec) {
  log::debug(rec.stage + " epoch " + std::to_string(rec.epoch) + " loss " + std::to_string(rec.loss));
  if (!std::isfinite(rec.loss)) {
    throw NumericError(rec.stage + " epoch " + std::to_string(rec.epoch) + ": loss is not finite");
  }
  res.history.push_back(rec);
  if (hook) hook(res.history.back(), res.model);
}

Projection stage1_projection(const TrainConfig& c, const UnrolledNet& net) {
  switch (c.model.quant_mode) {
    case QuantMode::OneBitGlobal: return one_bit_projection(c.quant.lambda0, net.mask);
    case QuantMode::Ternary: return ternary_projection(c.scale_axis, net.mask);
    case QuantMode::ChannelWise: return channelwise_projection(net.mask);
    case QuantMode::HighRes: break;
  }
  return [](const DenseMatrix& w) { return w; };
}

}  // namespace

TrainResult train_model(const TrainConfig& config, const Dataset& data, const EpochHook& hook) {
  return train_model_from(config, data, init_model(config.model, data, config.seed), false, hook);
}

TrainResult train_model_from(const TrainConfig& config, const Dataset& data, Model start,
                             bool pretrained, const EpochHook& hook) {
  config.validate();
  TrainResult res{std::move(start), {}, {}, std::nullopt, std::nullopt};
  const Split& train = data.train;

  if (auto* fcn = std::get_if<FcnNet>(&res.model)) {
    const auto t0 = Clock::now();
    Optimizer opt(config.pretrain.optimizer);
    EpochOptions o = stage_options(config, 0);
    for (std::size_t e = 0; e < config.pretrain.epochs; ++e) {
      o.epoch = e;
      const double lr = config.pretrain.learning_rate(e);
      double l = 0.0;
      with_context("train", e, [&] { l = train_epoch(*fcn, opt, train, lr, o); });
      record(res, hook, {"train", e, lr, l, 1.0});
    }
    res.wall_times.push_back({"train", seconds_since(t0)});
    return res;
  }

  auto& net = std::get<UnrolledNet>(res.model);
  net.quant_mode = QuantMode::HighRes;
  net.scale = 1.0;
  const QuantMode target = config.model.quant_mode;

  if (!pretrained && (config.pretrain_enabled || target == QuantMode::HighRes)) {
    const auto t0 = Clock::now();
    Optimizer opt(config.pretrain.optimizer);
    EpochOptions o = stage_options(config, 0);
    for (std::size_t e = 0; e < config.pretrain.epochs; ++e) {
      o.epoch = e;
      const double lr = config.pretrain.learning_rate(e);
      double l = 0.0;
      with_context("pretrain", e, [&] { l = train_epoch(net, opt, data.sensing, train, lr, o); });
      record(res, hook, {"pretrain", e, lr, l, 1.0});
    }
    res.wall_times.push_back({"pretrain", seconds_since(t0)});
  }
  if (target == QuantMode::HighRes) return res;

  {
    const auto t0 = Clock::now();
    ShadowState shadow = ShadowState::from_net(net, config.quant.lambda0, config.quant.optimizer);
    const Projection project = stage1_projection(config, net);
    net.quant_mode = target;
    net.lambda0 = config.quant.lambda0;
    refresh_projection(net, shadow, project);
    EpochOptions o = stage_options(config, 1);
    const bool prox = target == QuantMode::OneBitGlobal && config.quant.mode == QatMode::ProxRegularized;
    for (std::size_t e = 0; e < config.quant.epochs; ++e) {
      o.epoch = e;
      const double lr = config.quant.learning_rate(e);
      double l = 0.0;
      with_context("stage1", e, [&] {
        l = prox ? prox_epoch(net, shadow, data.sensing, train, lr, config.quant.beta, o)
                 : ste_epoch(net, shadow, data.sensing, train, lr, o, project);
      });
      record(res, hook, {"stage1", e, lr, l, 1.0});
    }
    res.wall_times.push_back({"stage1", seconds_since(t0)});
  }
  if (target != QuantMode::OneBitGlobal) return res;

  res.stage1_net = net;
  if (config.stage2.epochs > 0) {
    const auto t0 = Clock::now();
    EpochOptions o = stage_options(config, 2);
    ScaleResult sr;
    with_context("stage2", 0, [&] {
      sr = stage2_scale(net, data.sensing, train, config.stage2.lr0, config.stage2.epochs, o,
                        config.stage2.optimizer, [&](std::size_t e, double l) {
                          // diverging epochs may log inf; no finiteness check here
                          res.history.push_back({"stage2", e, config.stage2.lr0, l, net.scale});
                          if (hook) hook(res.history.back(), res.model);
                        });
    });
    res.wall_times.push_back({"stage2", seconds_since(t0)});
    if (sr.diverged) log::info("stage2 stopped after repeated loss increases; keeping best scale");
    log::info("stage2 learned effective scale " + std::to_string(sr.scale * net.lambda0));
    res.stage2 = std::move(sr);
  }
  return res;
}

std::uint64_t model_bits(const Model& model, ScaleAxis axis) {
  if (const auto* net = std::get_if<UnrolledNet>(&model)) return effective_bits(*net, axis);
  const auto& f = std::get<FcnNet>(model);
  std::uint64_t w = 0;
  for (const auto& l : f.layers) w += static_cast<std::uint64_t>(l.W.size());
  const std::uint64_t thr = f.activation == Activation::Relu ? 0 : f.depth();
  return 32 * (w + thr);
}

std::uint64_t model_params(const Model& model) {
  if (const auto* net = std::get_if<UnrolledNet>(&model)) {
    std::uint64_t p = stored_weight_count(*net) + net->depth();
    if (net->quant_mode == QuantMode::OneBitGlobal) p += 1;
    return p;
  }
  const auto& f = std::get<FcnNet>(model);
  std::uint64_t p = 0;
  for (const auto& l : f.layers) p += static_cast<std::uint64_t>(l.W.size());
  return p + (f.activation == Activation::Relu ? 0 : f.depth());
}

MetricsReport evaluate(const Model& model, const Dataset& data, ScaleAxis axis) {
  const double tr = nmse_db(predict(model, data.sensing, data.train.y), data.train.x);
  const double te = nmse_db(predict(model, data.sensing, data.test.y), data.test.x);
  MetricsReport r = make_report(tr, te);
  r.layer_curve = layer_curve(model, data.sensing, data.test);
  r.bits = model_bits(model, axis);
  r.params = model_params(model);
  return r;
}

namespace {

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

const json& need(const json& j, const char* key) {
  if (!j.contains(key)) throw CorruptManifest(std::string("checkpoint is missing '") + key + "'");
  return j[key];
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::vector<LayerParams>& layers =
      std::holds_alternative<UnrolledNet>(model) ? std::get<UnrolledNet>(model).layers
                                                 : std::get<FcnNet>(model).layers;
  ordered_json j;
  j["format"] = "pibinn-checkpoint";
  j["version"] = 1;
  std::vector<double> values;
  ordered_json shapes = ordered_json::array();
  for (const auto& l : layers) {
    shapes.push_back({l.W.rows(), l.W.cols()});
    values.insert(values.end(), l.W.data(), l.W.data() + l.W.size());
  }
  for (const auto& l : layers) values.push_back(l.theta);
  if (const auto* net = std::get_if<UnrolledNet>(&model)) {
    j["kind"] = "dun";
    j["layers"] = net->depth();
    j["delta"] = net->delta;
    j["activation"] = to_string(net->activation);
    j["quant_mode"] = to_string(net->quant_mode);
    j["lambda0"] = net->lambda0;
    j["scale"] = net->scale;
    if (net->structure) {
      j["structure"] = {{"u", net->structure->u}, {"v", net->structure->v}, {"p", net->structure->p}};
    } else {
      j["structure"] = nullptr;
    }
    j["tied_blocks"] = net->tied_blocks;
    if (net->mask) {
      ordered_json pos = ordered_json::array();
      for (const auto& [r, c] : net->mask->active_positions()) pos.push_back({r, c});
      j["mask"] = {{"rows", net->mask->rows()}, {"cols", net->mask->cols()}, {"active", pos}};
    } else {
      j["mask"] = nullptr;
    }
  } else {
    const auto& f = std::get<FcnNet>(model);
    j["kind"] = "fcn";
    j["layers"] = f.depth();
    j["activation"] = to_string(f.activation);
  }
  j["shapes"] = shapes;
  j["file"] = "weights.bin";
  j["values"] = values.size();
  auto tmp = dir / "weights.bin.tmp";
  write_f64(tmp, values);
  std::filesystem::rename(tmp, dir / "weights.bin", ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
  write_text_atomic(dir / "checkpoint.json", j.dump(2) + "\n");
}

Model load_checkpoint(const std::filesystem::path& dir) {
  json j;
  {
    std::ifstream in(dir / "checkpoint.json");
    if (!in) throw IoError("cannot open " + (dir / "checkpoint.json").string());
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw CorruptManifest(std::string("checkpoint.json is not valid JSON: ") + e.what());
    }
  }
  if (!j.is_object() || j.value("format", "") != "pibinn-checkpoint") {
    throw CorruptManifest("checkpoint.json is not a checkpoint manifest");
  }
  try {
    const auto& shapes = need(j, "shapes");
    const auto k = need(j, "layers").get<std::size_t>();
    if (!shapes.is_array() || shapes.size() != k || k == 0) throw CorruptManifest("checkpoint shapes do not match layers");
    std::size_t count = k;
    for (const auto& s : shapes) count += s.at(0).get<std::size_t>() * s.at(1).get<std::size_t>();
    if (need(j, "values").get<std::size_t>() != count) throw CorruptManifest("checkpoint value count disagrees with shapes");
    const auto values = read_f64(dir / need(j, "file").get<std::string>(), count);
    std::vector<LayerParams> layers;
    std::size_t off = 0;
    for (const auto& s : shapes) {
      const auto r = s.at(0).get<Eigen::Index>();
      const auto c = s.at(1).get<Eigen::Index>();
      LayerParams lp;
      lp.W = Eigen::Map<const DenseMatrix>(values.data() + off, r, c);
      off += static_cast<std::size_t>(r * c);
      layers.push_back(std::move(lp));
    }
    for (auto& l : layers) l.theta = values[off++];
    const auto kind = need(j, "kind").get<std::string>();
    if (kind == "fcn") {
      FcnNet f;
      f.layers = std::move(layers);
      f.activation = parse_activation(need(j, "activation").get<std::string>());
      return f;
    }
    if (kind != "dun") throw CorruptManifest("unknown checkpoint kind '" + kind + "'");
    UnrolledNet net;
    net.layers = std::move(layers);
    net.delta = need(j, "delta").get<double>();
    net.activation = parse_activation(need(j, "activation").get<std::string>());
    net.quant_mode = parse_quant_mode(need(j, "quant_mode").get<std::string>());
    net.lambda0 = need(j, "lambda0").get<double>();
    net.scale = need(j, "scale").get<double>();
    net.tied_blocks = need(j, "tied_blocks").get<bool>();
    if (const auto& s = need(j, "structure"); !s.is_null()) {
      net.structure = BlockStructure(s.at("u").get<std::size_t>(), s.at("v").get<std::size_t>(),
                                     s.at("p").get<std::size_t>());
    }
    if (const auto& m = need(j, "mask"); !m.is_null()) {
      std::vector<std::pair<std::size_t, std::size_t>> pos;
      for (const auto& p : m.at("active")) pos.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
      net.mask = SparsityMask(m.at("rows").get<std::size_t>(), m.at("cols").get<std::size_t>(), pos);
    }
    net.validate();
    return net;
  } catch (const json::exception& e) {
    throw CorruptManifest(std::string("checkpoint field has the wrong type: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw CorruptManifest(std::string("checkpoint describes an invalid net: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptManifest(std::string("checkpoint field invalid: ") + e.what());
  }
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "stage,epoch,lr,loss,scale\n";
  for (const auto& r : history) {
    out << r.stage << ',' << r.epoch << ',' << r.lr << ',' << r.loss << ',' << r.scale << '\n';
  }
  return out.str();
}

}  // namespace pibinn
