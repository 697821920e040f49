#include "pibinn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "pibinn/diag.hpp"
#include "pibinn/errors.hpp"
#include "pibinn/log.hpp"
#include "pibinn/physics.hpp"

namespace pibinn::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* s : known) ok = ok || k == s;
    if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

std::string string_field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": '" + key + "' is required");
  if (!j[key].is_string()) throw ConfigError(where + ": '" + key + "' must be a string");
  return j[key].get<std::string>();
}

fs::path relative_to(const fs::path& p, const fs::path& base) {
  return p.is_absolute() ? p : base / p;
}

fs::path config_dir(const fs::path& config) {
  const auto parent = config.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

fs::path output_dir(const Options& opts, const json& cfg) {
  if (opts.out) return *opts.out;
  if (cfg.contains("out")) {
    if (!cfg["out"].is_string()) throw ConfigError("'out' must be a string");
    return relative_to(cfg["out"].get<std::string>(), config_dir(opts.config));
  }
  throw ConfigError("no output directory: pass --out or set 'out' in the config");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string fmt_num(double v) {
  if (std::isinf(v) && v < 0) v = kCsvDbFloor;
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

TrainConfig train_section(const json& cfg, const Options& opts, const std::string& where) {
  if (!cfg.contains("train")) throw ConfigError(where + ": 'train' is required");
  TrainConfig tc;
  try {
    tc = train_config_from_json(cfg["train"]);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  if (opts.seed) tc.seed = *opts.seed;
  tc.workers = opts.workers;
  return tc;
}

void check_compatible(const Model& model, const Dataset& d) {
  std::size_t m = 0, n = 0;
  if (const auto* net = std::get_if<UnrolledNet>(&model)) {
    m = net->measurement_dim();
    n = net->signal_dim();
  } else {
    const auto& f = std::get<FcnNet>(model);
    m = static_cast<std::size_t>(f.layers.front().W.rows());
    n = static_cast<std::size_t>(f.layers.back().W.cols());
  }
  if (m != rows(d.sensing) || n != cols(d.sensing)) {
    throw ShapeMismatch("checkpoint expects " + std::to_string(m) + "x" + std::to_string(n) +
                        " measurements/signals but the dataset is " + std::to_string(rows(d.sensing)) +
                        "x" + std::to_string(cols(d.sensing)));
  }
  if (const auto* net = std::get_if<UnrolledNet>(&model); net && net->uses_block_weights()) {
    const auto* op = std::get_if<BlockDiagOperator>(&d.sensing);
    if (!op || op->repeat() != net->structure->u) {
      throw ShapeMismatch("checkpoint uses block weights but the dataset has no matching block operator");
    }
  }
}

std::optional<SpectralVariant> variant_for(const UnrolledNet& net, const std::optional<std::string>& v) {
  if (v) return parse_spectral_variant(*v);
  if (net.activation == Activation::HardThreshold) return SpectralVariant::HardThreshold;
  if (net.activation == Activation::SoftThreshold) return SpectralVariant::SoftThreshold;
  return std::nullopt;
}

std::vector<std::size_t> parse_index_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      throw ConfigError("--support: '" + tok + "' is not an index");
    }
    if (pos != tok.size()) throw ConfigError("--support: '" + tok + "' is not an index");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

/// Averaged over layers; nullopt for tied block nets or nets without a
/// structure.
std::optional<double> ternary_overlap(const Model& model, const Dataset& d) {
  const auto* net = std::get_if<UnrolledNet>(&model);
  if (!net || net->quant_mode != QuantMode::Ternary || !d.spec.structure || net->uses_block_weights()) {
    return std::nullopt;
  }
  const SparsityMask physics = mask_from_block(*d.spec.structure);
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& l : net->layers) {
    if (static_cast<std::size_t>(l.W.rows()) != physics.rows() ||
        static_cast<std::size_t>(l.W.cols()) != physics.cols()) {
      return std::nullopt;
    }
    if (const auto f = overlap_fraction(mask_from_nonzeros(l.W), physics)) {
      sum += *f;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

}  // namespace

json read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path.string() + " must be a JSON object");
  return j;
}

Dataset DatasetRef::resolve() const {
  if (dir) return load_dataset(*dir);
  return gen_dataset(*spec);
}

bool DatasetRef::same_as(const DatasetRef& other) const {
  if (dir && other.dir) {
    std::error_code ec;
    if (fs::equivalent(*dir, *other.dir, ec)) return true;
    return fs::weakly_canonical(*dir, ec) == fs::weakly_canonical(*other.dir, ec);
  }
  if (spec && other.spec) return to_json(*spec) == to_json(*other.spec);
  return false;
}

DatasetRef dataset_ref_from_json(const json& j, const fs::path& base) {
  if (!j.contains("dataset")) throw ConfigError("'dataset' is required");
  const auto& d = j["dataset"];
  DatasetRef ref;
  if (d.is_string()) {
    ref.dir = relative_to(d.get<std::string>(), base);
  } else if (d.is_object()) {
    ref.spec = dataset_spec_from_json(d);
  } else {
    throw ConfigError("'dataset' must be a directory path or a dataset spec object");
  }
  return ref;
}

int cmd_gen_data(const Options& opts) {
  const json cfg = read_config(opts.config);
  reject_unknown(cfg, {"dataset", "out"}, "gen-data config");
  if (!cfg.contains("dataset") || !cfg["dataset"].is_object()) {
    throw ConfigError("gen-data config: 'dataset' must be a dataset spec object");
  }
  json spec_json = cfg["dataset"];
  if (opts.seed) spec_json["seed"] = *opts.seed;
  const DatasetSpec spec = dataset_spec_from_json(spec_json);
  const fs::path out = output_dir(opts, cfg);
  log::info("generating dataset into " + out.string());
  const Dataset d = gen_dataset(spec);
  ensure_dir(out);
  save_dataset(d, out);
  load_dataset(out);
  std::cout << out.string() << '\n';
  return kExitOk;
}

int cmd_train(const Options& opts) {
  const json cfg = read_config(opts.config);
  reject_unknown(cfg, {"dataset", "train", "out"}, "train config");
  const DatasetRef ref = dataset_ref_from_json(cfg, config_dir(opts.config));
  const TrainConfig tc = train_section(cfg, opts, "train config");
  const fs::path out = output_dir(opts, cfg);

  const Dataset d = ref.resolve();
  ensure_dir(out);
  write_text(out / "config.json", ordered_json{{"train", to_json(tc)}}.dump(2) + "\n");
  const fs::path ckpt = out / "checkpoint";
  save_checkpoint(init_model(tc.model, d, tc.seed), ckpt);
  log::info("training " + std::string(to_string(tc.model.quant_mode)) + " K=" +
            std::to_string(tc.model.layers));
  TrainResult res = train_model(tc, d, [&](const EpochRecord& rec, const Model& m) {
    save_checkpoint(m, ckpt);
    if (log::enabled(log::Level::Info) && (rec.epoch + 1) % 10 == 0) {
      log::info(rec.stage + " epoch " + std::to_string(rec.epoch + 1) + " loss " + fmt_num(rec.loss));
    }
  });
  save_checkpoint(res.model, ckpt);
  write_text(out / "history.csv", history_csv(res.history));

  MetricsReport rep = evaluate(res.model, d, tc.scale_axis);
  rep.wall_times = res.wall_times;
  if (const auto* net = std::get_if<UnrolledNet>(&res.model); net && d.spec.fixed_support) {
    if (const auto v = variant_for(*net, std::nullopt)) {
      rep.fk_curve = spectral_fk(*net, d.sensing, *d.spec.fixed_support, *v);
    }
  }
  rep.overlap = ternary_overlap(res.model, d);
  emit_report(rep, out / "metrics", ReportFormat::Json);
  emit_report(rep, out / "metrics", ReportFormat::Csv);

  ordered_json summary;
  summary["train_nmse_db"] = db_to_json(rep.train_nmse_db);
  summary["test_nmse_db"] = db_to_json(rep.test_nmse_db);
  if (res.stage1_net) {
    summary["stage1_train_nmse_db"] = db_to_json(nmse_db(predict(*res.stage1_net, d.sensing, d.train.y), d.train.x));
    summary["stage1_test_nmse_db"] = db_to_json(nmse_db(predict(*res.stage1_net, d.sensing, d.test.y), d.test.x));
    summary["lambda0"] = res.stage1_net->lambda0;
  }
  if (res.stage2) {
    const auto& net = std::get<UnrolledNet>(res.model);
    summary["scale"] = res.stage2->scale;
    summary["effective_scale"] = res.stage2->scale * net.lambda0;
    summary["stage2_initial_loss"] = res.stage2->initial_loss;
    summary["stage2_best_loss"] = res.stage2->best_loss;
    summary["stage2_diverged"] = res.stage2->diverged;
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  log::info("test NMSE " + fmt_num(rep.test_nmse_db) + " dB");
  std::cout << to_json(rep).dump(2) << '\n';
  return kExitOk;
}

int cmd_eval(const Options& opts) {
  const json cfg = read_config(opts.config);
  reject_unknown(cfg, {"dataset", "checkpoint", "scale_axis", "out"}, "eval config");
  const DatasetRef ref = dataset_ref_from_json(cfg, config_dir(opts.config));
  const fs::path ckpt = relative_to(string_field(cfg, "checkpoint", "eval config"), config_dir(opts.config));
  ScaleAxis axis = ScaleAxis::Row;
  if (cfg.contains("scale_axis")) axis = parse_scale_axis(string_field(cfg, "scale_axis", "eval config"));
  std::optional<fs::path> out;
  if (opts.out || cfg.contains("out")) out = output_dir(opts, cfg);

  const Model model = load_checkpoint(ckpt);
  const Dataset d = ref.resolve();
  check_compatible(model, d);
  MetricsReport rep = evaluate(model, d, axis);
  rep.overlap = ternary_overlap(model, d);
  if (out) {
    ensure_dir(*out);
    emit_report(rep, *out / "eval", ReportFormat::Json);
    emit_report(rep, *out / "eval", ReportFormat::Csv);
  }
  std::cout << to_json(rep).dump(2) << '\n';
  return kExitOk;
}

int cmd_diagnose(const Options& opts) {
  const json cfg = read_config(opts.config);
  reject_unknown(cfg, {"dataset", "checkpoint", "support", "variant", "delta", "split", "out"},
                 "diagnose config");
  const DatasetRef ref = dataset_ref_from_json(cfg, config_dir(opts.config));
  const fs::path ckpt = relative_to(string_field(cfg, "checkpoint", "diagnose config"), config_dir(opts.config));
  std::optional<std::vector<std::size_t>> support_idx;
  if (opts.support) {
    support_idx = parse_index_list(*opts.support);
  } else if (cfg.contains("support")) {
    try {
      support_idx = cfg["support"].get<std::vector<std::size_t>>();
    } catch (const json::exception&) {
      throw ConfigError("diagnose config: 'support' must be a list of indices");
    }
  }
  std::optional<std::string> variant = opts.variant;
  if (!variant && cfg.contains("variant")) variant = string_field(cfg, "variant", "diagnose config");
  if (variant) parse_spectral_variant(*variant);
  std::optional<double> delta = opts.delta;
  if (!delta && cfg.contains("delta")) {
    if (!cfg["delta"].is_number()) throw ConfigError("diagnose config: 'delta' must be a number");
    delta = cfg["delta"].get<double>();
  }
  if (delta && !(*delta > 0.0 && *delta <= 1.0)) throw ConfigError("delta must lie in (0, 1]");
  std::string split_name = "test";
  if (cfg.contains("split")) split_name = string_field(cfg, "split", "diagnose config");
  if (split_name != "train" && split_name != "test") throw ConfigError("diagnose config: 'split' must be train|test");
  const fs::path out = output_dir(opts, cfg);

  const Model model = load_checkpoint(ckpt);
  const auto* net = std::get_if<UnrolledNet>(&model);
  if (!net) throw ConfigError("diagnose needs an unrolled-network checkpoint");
  const Dataset d = ref.resolve();
  check_compatible(model, d);
  const auto v = variant_for(*net, variant);
  if (!v) throw ConfigError("--variant is required for nets without a thresholding activation");

  IndexSet support;
  if (support_idx) {
    support = IndexSet(*support_idx, net->signal_dim());
  } else if (d.spec.fixed_support) {
    support = *d.spec.fixed_support;
  } else {
    throw ConfigError("spectral diagnostics need a support: pass --support or use a dataset with a fixed support");
  }
  if (support.empty()) throw ConfigError("--support must name at least one index");
  const double dl = delta.value_or(net->delta);
  const Split& split = split_name == "train" ? d.train : d.test;

  const auto good = good_set_check(*net, d.sensing, support, *v, dl);
  const ForwardTrace trace = forward(*net, d.sensing, split.y);
  const auto theta = theory_theta(trace, *net, d.sensing, split.x);
  const auto curve = per_layer_errors(*net, d.sensing, split.y, split.x);

  ordered_json j;
  j["support"] = support.indices();
  j["variant"] = *v == SpectralVariant::HardThreshold ? "ht" : "st";
  j["delta"] = dl;
  j["split"] = split_name;
  j["effective_scale"] = net->weight_multiplier() * (net->quant_mode == QuantMode::OneBitGlobal ? net->lambda0 : 1.0);
  bool all_good = true;
  ordered_json layers = ordered_json::array();
  std::ostringstream csv;
  csv << "layer,fk,good,mu,theory_theta,layer_nmse_db\n";
  for (std::size_t k = 0; k < net->depth(); ++k) {
    const double mu = layer_coherence(*net, k, d.sensing);
    all_good = all_good && good[k].good;
    ordered_json l;
    l["layer"] = k + 1;
    l["fk"] = good[k].fk;
    l["good"] = good[k].good;
    l["mu"] = mu;
    l["theory_theta"] = theta[k];
    l["layer_nmse_db"] = db_to_json(curve[k]);
    l["self_products"] = good[k].self_products;
    layers.push_back(std::move(l));
    csv << k + 1 << ',' << fmt_num(good[k].fk) << ',' << (good[k].good ? 1 : 0) << ',' << fmt_num(mu)
        << ',' << fmt_num(theta[k]) << ',' << fmt_num(curve[k]) << '\n';
  }
  j["all_good"] = all_good;
  j["layers"] = std::move(layers);
  ensure_dir(out);
  write_text(out / "diagnostics.json", j.dump(2) + "\n");
  write_text(out / "diagnostics.csv", csv.str());
  std::cout << csv.str();
  return kExitOk;
}

int cmd_compare(const Options& opts) {
  const json cfg = read_config(opts.config);
  reject_unknown(cfg, {"dataset", "runs", "out"}, "compare config");
  const fs::path base = config_dir(opts.config);
  if (!cfg.contains("runs") || !cfg["runs"].is_array() || cfg["runs"].empty()) {
    throw ConfigError("compare config: 'runs' must be a non-empty list");
  }
  struct Run {
    std::string name;
    DatasetRef data;
    TrainConfig train;
  };
  std::vector<Run> runs;
  std::optional<DatasetRef> shared;
  if (cfg.contains("dataset")) shared = dataset_ref_from_json(cfg, base);
  for (std::size_t i = 0; i < cfg["runs"].size(); ++i) {
    json entry = cfg["runs"][i];
    fs::path entry_base = base;
    const std::string where = "compare run " + std::to_string(i + 1);
    if (entry.is_string()) {
      const fs::path p = relative_to(entry.get<std::string>(), base);
      entry = read_config(p);
      entry_base = config_dir(p);
    }
    reject_unknown(entry, {"name", "dataset", "train", "out"}, where);
    Run r;
    r.name = entry.contains("name") ? string_field(entry, "name", where) : "run" + std::to_string(i + 1);
    if (entry.contains("dataset")) {
      r.data = dataset_ref_from_json(entry, entry_base);
    } else if (shared) {
      r.data = *shared;
    } else {
      throw ConfigError(where + ": no dataset (set 'dataset' at the top level or in the run)");
    }
    r.train = train_section(entry, opts, where);
    if (!runs.empty() && !r.data.same_as(runs.front().data)) {
      throw ConfigError(where + " uses a different dataset than '" + runs.front().name + "'");
    }
    runs.push_back(std::move(r));
  }
  const fs::path out = output_dir(opts, cfg);

  const Dataset d = runs.front().data.resolve();
  ensure_dir(out);
  std::ostringstream csv;
  csv << "scheme,quant_mode,train_nmse_db,test_nmse_db,gap_db,params,bits,overlap_fraction\n";
  ordered_json rows = ordered_json::array();
  for (const auto& r : runs) {
    log::info("compare: training " + r.name);
    TrainResult res = train_model(r.train, d);
    MetricsReport rep = evaluate(res.model, d, r.train.scale_axis);
    rep.wall_times = res.wall_times;
    rep.overlap = ternary_overlap(res.model, d);
    save_checkpoint(res.model, out / r.name);
    const std::string mode = r.train.model.kind == ModelKind::Fcn ? "fcn" : std::string(to_string(r.train.model.quant_mode));
    csv << r.name << ',' << mode << ',' << fmt_num(rep.train_nmse_db) << ',' << fmt_num(rep.test_nmse_db)
        << ',' << fmt_num(rep.gap_db) << ',' << rep.params << ',' << rep.bits << ','
        << (rep.overlap ? fmt_num(*rep.overlap) : "") << '\n';
    ordered_json row = to_json(rep);
    row["scheme"] = r.name;
    row["quant_mode"] = mode;
    rows.push_back(std::move(row));
  }
  write_text(out / "compare.csv", csv.str());
  write_text(out / "compare.json", rows.dump(2) + "\n");
  std::cout << csv.str();
  return kExitOk;
}

int cmd_bits(const Options& opts) {
  const json cfg = read_config(opts.config);
  reject_unknown(cfg, {"model", "layers", "m", "n"}, "bits config");
  const BitModel model = parse_bit_model(string_field(cfg, "model", "bits config"));
  std::uint64_t vals[3] = {0, 0, 0};
  const char* keys[3] = {"layers", "m", "n"};
  for (int i = 0; i < 3; ++i) {
    if (!cfg.contains(keys[i]) || !cfg[keys[i]].is_number_integer() || cfg[keys[i]].get<long long>() < 1) {
      throw ConfigError(std::string("bits config: '") + keys[i] + "' must be a positive integer");
    }
    vals[i] = cfg[keys[i]].get<std::uint64_t>();
  }
  std::cout << bit_count(model, vals[0], vals[1], vals[2]) << '\n';
  return kExitOk;
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    if (width.size() < r.size()) width.resize(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream out;
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    for (std::size_t i = 0; i < rows[ri].size(); ++i) {
      out << (i ? "  " : "") << std::left << std::setw(static_cast<int>(width[i])) << rows[ri][i];
    }
    out << '\n';
    if (ri == 0) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i ? 2 : 0);
      out << std::string(total, '-') << '\n';
    }
  }
  return out.str();
}

std::string json_cell(const json& v) {
  if (v.is_number_float()) return fmt_num(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "";
  return v.dump();
}

std::vector<std::vector<std::string>> json_rows(const json& j) {
  std::vector<std::vector<std::string>> rows;
  if (j.is_array()) {
    std::vector<std::string> keys;
    for (const auto& e : j) {
      for (const auto& [k, v] : e.items()) {
        if (!v.is_structured() && std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
      }
    }
    rows.push_back(keys);
    for (const auto& e : j) {
      std::vector<std::string> r;
      for (const auto& k : keys) r.push_back(e.contains(k) ? json_cell(e[k]) : "");
      rows.push_back(std::move(r));
    }
    return rows;
  }
  rows.push_back({"field", "value"});
  for (const auto& [k, v] : j.items()) {
    if (v.is_array() && !v.empty() && !v.front().is_structured()) {
      for (std::size_t i = 0; i < v.size(); ++i) rows.push_back({k + "[" + std::to_string(i + 1) + "]", json_cell(v[i])});
    } else if (v.is_array()) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        for (const auto& [k2, v2] : v[i].items()) {
          if (!v2.is_structured()) rows.push_back({k + "[" + std::to_string(i + 1) + "]." + k2, json_cell(v2)});
        }
      }
    } else {
      rows.push_back({k, json_cell(v)});
    }
  }
  return rows;
}

}  // namespace

int cmd_fmt(const Options& opts) {
  const json cfg = read_config(opts.config);
  reject_unknown(cfg, {"input", "out"}, "fmt config");
  const fs::path input = relative_to(string_field(cfg, "input", "fmt config"), config_dir(opts.config));
  std::optional<fs::path> out;
  if (opts.out || cfg.contains("out")) out = output_dir(opts, cfg);
  std::string table;
  if (input.extension() == ".csv") {
    table = render_table(read_csv_rows(input));
  } else {
    std::ifstream in(input);
    if (!in) throw IoError("cannot open " + input.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw IoError(input.string() + " is not valid JSON: " + std::string(e.what()));
    }
    table = render_table(json_rows(j));
  }
  if (out) {
    ensure_dir(*out);
    write_text(*out / (input.stem().string() + ".txt"), table);
  }
  std::cout << table;
  return kExitOk;
}

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitIo;
  if (dynamic_cast<const InvalidArgument*>(&e)) return kExitConfig;
  if (dynamic_cast<const DimensionError*>(&e)) return kExitConfig;
  return 1;
}

int run(int argc, char** argv) {
  if (!log::init_from_env()) {
    std::cerr << "PIBINN_LOG must be one of error|info|debug\n";
    return kExitConfig;
  }
  CLI::App app{"One-bit unrolled networks: data, training, evaluation, diagnostics"};
  app.require_subcommand(1);
  Options opts;
  std::string out, support, variant;
  std::uint64_t seed = 0;
  double delta = 0.0;
  const std::pair<const char*, int (*)(const Options&)> commands[] = {
      {"gen-data", cmd_gen_data}, {"train", cmd_train},     {"eval", cmd_eval}, {"diagnose", cmd_diagnose},
      {"compare", cmd_compare},   {"bits", cmd_bits},       {"fmt", cmd_fmt}};
  const char* help[] = {"generate and persist a synthetic dataset",
                        "pretrain, quantize and scale a network",
                        "evaluate a checkpoint on a dataset",
                        "spectral and coherence diagnostics of a checkpoint",
                        "train several schemes on one dataset and tabulate them",
                        "storage bits of a reference model",
                        "render a JSON or CSV report as a table"};
  std::vector<CLI::App*> subs;
  std::vector<std::string> cfg_paths(std::size(commands));
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    auto* sub = app.add_subcommand(commands[i].first, help[i]);
    sub->add_option("--config", cfg_paths[i], "JSON config")->required();
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--workers", opts.workers, "worker threads")->check(CLI::PositiveNumber);
    if (std::string_view(commands[i].first) == "diagnose") {
      sub->add_option("--support", support, "comma-separated support indices");
      sub->add_option("--variant", variant, "st|ht");
      sub->add_option("--delta", delta, "delta override");
    }
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  for (std::size_t i = 0; i < subs.size(); ++i) {
    auto* sub = subs[i];
    if (!sub->parsed()) continue;
    opts.config = cfg_paths[i];
    if (sub->count("--out")) opts.out = out;
    if (sub->count("--seed")) opts.seed = seed;
    if (sub->get_option_no_throw("--support") && sub->count("--support")) opts.support = support;
    if (sub->get_option_no_throw("--variant") && sub->count("--variant")) opts.variant = variant;
    if (sub->get_option_no_throw("--delta") && sub->count("--delta")) opts.delta = delta;
    try {
      return commands[i].second(opts);
    } catch (const std::exception& e) {
      log::error(std::string(commands[i].first) + ": " + e.what());
      return exit_code_for(e);
    }
  }
  return kExitConfig;
}

}  // namespace pibinn::cli
