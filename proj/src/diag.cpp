#include "pibinn/diag.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "pibinn/errors.hpp"
#include "pibinn/unroll.hpp"

namespace pibinn {

double nmse_ratio(const Batch& estimates, const Batch& truths) {
  if (estimates.rows() != truths.rows() || estimates.cols() != truths.cols()) {
    throw DimensionError("nmse: estimate and truth shapes differ");
  }
  double sum = 0.0;
  std::size_t counted = 0;
  for (Eigen::Index c = 0; c < truths.cols(); ++c) {
    const double denom = truths.col(c).squaredNorm();
    if (denom == 0.0) continue;
    sum += (estimates.col(c) - truths.col(c)).squaredNorm() / denom;
    ++counted;
  }
  if (counted == 0) throw InvalidArgument("nmse: no sample with a nonzero target");
  return sum / static_cast<double>(counted);
}

std::size_t zero_target_count(const Batch& truths) {
  std::size_t n = 0;
  for (Eigen::Index c = 0; c < truths.cols(); ++c) n += truths.col(c).squaredNorm() == 0.0;
  return n;
}

double nmse_db(const Batch& estimates, const Batch& truths) {
  const double ratio = nmse_ratio(estimates, truths);
  if (ratio < kNmseFloor) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(ratio);
}

double gen_gap(double train_nmse_db, double test_nmse_db) {
  if (!std::isfinite(train_nmse_db) || !std::isfinite(test_nmse_db)) {
    throw InvalidArgument("gen_gap: inputs must be finite");
  }
  return test_nmse_db - train_nmse_db;
}

double mu_coherence(const DenseMatrix& w, const DenseMatrix& q) {
  if (w.rows() != q.rows()) throw DimensionError("mu_coherence: row counts differ");
  const Eigen::MatrixXd g = w.transpose() * q;
  double mu = 0.0;
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      if (i != j) mu = std::max(mu, std::abs(g(i, j)));
    }
  }
  return mu;
}

double spectral_term(const DenseMatrix& w_support, const DenseMatrix& q_support, double delta) {
  if (w_support.rows() != q_support.rows() || w_support.cols() != q_support.cols()) {
    throw DimensionError("spectral_term: support submatrices differ in shape");
  }
  const auto s = w_support.cols();
  DenseMatrix m = delta * DenseMatrix::Identity(s, s) - w_support.transpose() * q_support;
  return spectral_norm(m);
}

SpectralVariant parse_spectral_variant(std::string_view s) {
  if (s == "st" || s == "soft") return SpectralVariant::SoftThreshold;
  if (s == "ht" || s == "hard") return SpectralVariant::HardThreshold;
  throw ConfigError("unknown spectral variant '" + std::string(s) + "' (st|ht)");
}

namespace {

// Column j of BlockDiag_u(block) lives in block j / p at local column j % p.
DenseMatrix block_columns(const DenseMatrix& block, std::size_t repeat, const IndexSet& support) {
  const auto v = block.rows();
  const auto p = static_cast<std::size_t>(block.cols());
  DenseMatrix out = DenseMatrix::Zero(v * repeat, support.size());
  for (std::size_t c = 0; c < support.size(); ++c) {
    const std::size_t j = support.indices()[c];
    const std::size_t b = j / p;
    if (b >= repeat) throw InvalidArgument("support index outside the block operator");
    out.block(b * v, c, v, 1) = block.col(j % p);
  }
  return out;
}

}  // namespace

DenseMatrix effective_weight_columns(const UnrolledNet& net, std::size_t layer,
                                     const IndexSet& support) {
  const auto& w = net.layers.at(layer).W;
  const double mult = net.weight_multiplier();
  if (net.uses_block_weights()) return mult * block_columns(w, net.structure->u, support);
  return mult * submatrix(w, std::nullopt, support);
}

DenseMatrix sensing_columns(const LinearOperator& sensing, const IndexSet& support) {
  if (const auto* dense = std::get_if<DenseMatrix>(&sensing)) {
    return submatrix(*dense, std::nullopt, support);
  }
  const auto& op = std::get<BlockDiagOperator>(sensing);
  return block_columns(op.block(), op.repeat(), support);
}

double layer_coherence(const UnrolledNet& net, std::size_t layer, const LinearOperator& sensing) {
  const double mult = net.weight_multiplier();
  const auto& w = net.layers.at(layer).W;
  if (net.uses_block_weights()) {
    const auto* op = std::get_if<BlockDiagOperator>(&sensing);
    if (op == nullptr) throw InvalidArgument("tied block net needs a block sensing operator");
    // Cross-block products vanish, so the largest off-diagonal product is
    // found inside one block.
    return mult * mu_coherence(w, op->block());
  }
  const auto* dense = std::get_if<DenseMatrix>(&sensing);
  if (dense == nullptr) {
    return mult * mu_coherence(w, std::get<BlockDiagOperator>(sensing).materialize());
  }
  return mult * mu_coherence(w, *dense);
}

std::vector<double> spectral_fk(const UnrolledNet& net, const LinearOperator& sensing,
                                const IndexSet& support, SpectralVariant variant,
                                std::optional<double> delta) {
  if (support.ambient() != cols(sensing)) {
    throw DimensionError("spectral_fk: support ambient dimension differs from signal length");
  }
  const double d = delta.value_or(net.delta);
  const DenseMatrix a_s = sensing_columns(sensing, support);
  const double s = static_cast<double>(support.size());
  std::vector<double> fk;
  fk.reserve(net.depth());
  for (std::size_t k = 0; k < net.depth(); ++k) {
    double f = spectral_term(effective_weight_columns(net, k, support), a_s, d);
    if (variant == SpectralVariant::SoftThreshold) f += layer_coherence(net, k, sensing) * s;
    fk.push_back(f);
  }
  return fk;
}

std::vector<GoodSetLayer> good_set_check(const UnrolledNet& net, const LinearOperator& sensing,
                                         const IndexSet& support, SpectralVariant variant,
                                         double delta) {
  const auto fk = spectral_fk(net, sensing, support, variant, delta);
  const DenseMatrix a_s = sensing_columns(sensing, support);
  std::vector<GoodSetLayer> out;
  for (std::size_t k = 0; k < fk.size(); ++k) {
    GoodSetLayer layer;
    layer.fk = fk[k];
    layer.good = fk[k] < 1.0;
    const DenseMatrix w_s = effective_weight_columns(net, k, support);
    for (Eigen::Index i = 0; i < w_s.cols(); ++i) {
      layer.self_products.push_back(w_s.col(i).dot(a_s.col(i)));
    }
    out.push_back(std::move(layer));
  }
  return out;
}

std::vector<double> theory_theta(const ForwardTrace& trace, const UnrolledNet& net,
                                 const LinearOperator& sensing, const Batch& x_opt) {
  if (trace.states.size() != net.depth() + 1) {
    throw InvalidArgument("theory_theta: trace depth does not match the net");
  }
  std::vector<double> theta;
  for (std::size_t k = 0; k < net.depth(); ++k) {
    const Batch& prev = trace.states[k];
    if (prev.rows() != x_opt.rows() || prev.cols() != x_opt.cols()) {
      throw DimensionError("theory_theta: trace and targets differ in shape");
    }
    double worst = 0.0;
    for (Eigen::Index c = 0; c < prev.cols(); ++c) {
      worst = std::max(worst, (prev.col(c) - x_opt.col(c)).lpNorm<1>());
    }
    theta.push_back(layer_coherence(net, k, sensing) * worst);
  }
  return theta;
}

BitModel parse_bit_model(std::string_view s) {
  if (s == "fcn-relu") return BitModel::FcnRelu;
  if (s == "fcn-st") return BitModel::FcnSt;
  if (s == "dun") return BitModel::Dun;
  if (s == "one-bit") return BitModel::OneBitDun;
  throw ConfigError("unknown bit model '" + std::string(s) + "' (fcn-relu|fcn-st|dun|one-bit)");
}

std::uint64_t bit_count(BitModel model, std::uint64_t layers, std::uint64_t m, std::uint64_t n) {
  if (layers == 0) throw InvalidArgument("bit_count: K must be >= 1");
  const std::uint64_t fcn_weights = m * n + (layers - 1) * n * n;
  switch (model) {
    case BitModel::FcnRelu: return 32 * fcn_weights;
    case BitModel::FcnSt: return 32 * fcn_weights + 32 * layers;
    case BitModel::Dun: return 32 * layers * (m * n + 1);
    case BitModel::OneBitDun: return layers * (m * n + 32);
  }
  return 0;
}

MetricsReport make_report(double train_nmse_db, double test_nmse_db) {
  MetricsReport r;
  r.train_nmse_db = train_nmse_db;
  r.test_nmse_db = test_nmse_db;
  r.gap_db = test_nmse_db - train_nmse_db;
  return r;
}

nlohmann::ordered_json db_to_json(double db) {
  if (std::isinf(db) && db < 0) return "-inf";
  if (!std::isfinite(db)) return nullptr;
  return db;
}

double db_from_json(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "-inf") {
    return -std::numeric_limits<double>::infinity();
  }
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["train_nmse_db"] = db_to_json(r.train_nmse_db);
  j["test_nmse_db"] = db_to_json(r.test_nmse_db);
  // -inf - -inf is NaN; report the gap only when it is a number.
  j["gap_db"] = std::isfinite(r.gap_db) ? nlohmann::ordered_json(r.gap_db) : db_to_json(r.gap_db);
  j["bits"] = r.bits;
  j["params"] = r.params;
  j["fk_curve"] = r.fk_curve;
  j["overlap"] = r.overlap ? nlohmann::ordered_json(*r.overlap) : nlohmann::ordered_json(nullptr);
  auto curve = nlohmann::ordered_json::array();
  for (double v : r.layer_curve) curve.push_back(db_to_json(v));
  j["layer_curve"] = curve;
  auto times = nlohmann::ordered_json::array();
  for (const auto& t : r.wall_times) times.push_back({{"stage", t.stage}, {"seconds", t.seconds}});
  j["wall_times"] = times;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.train_nmse_db = db_from_json(j.at("train_nmse_db"));
  r.test_nmse_db = db_from_json(j.at("test_nmse_db"));
  r.gap_db = db_from_json(j.at("gap_db"));
  r.bits = j.at("bits").get<std::uint64_t>();
  r.params = j.at("params").get<std::uint64_t>();
  r.fk_curve = j.at("fk_curve").get<std::vector<double>>();
  if (!j.at("overlap").is_null()) r.overlap = j.at("overlap").get<double>();
  for (const auto& v : j.at("layer_curve")) r.layer_curve.push_back(db_from_json(v));
  for (const auto& t : j.at("wall_times")) {
    r.wall_times.push_back({t.at("stage").get<std::string>(), t.at("seconds").get<double>()});
  }
  return r;
}

std::string report_csv(const MetricsReport& r) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "layer,layer_nmse_db,fk\n";
  const std::size_t rows = std::max(r.layer_curve.size(), r.fk_curve.size());
  const auto db_cell = [](double v) { return std::isinf(v) && v < 0 ? kCsvDbFloor : v; };
  for (std::size_t k = 0; k < rows; ++k) {
    out << (k + 1) << ',';
    if (k < r.layer_curve.size()) out << db_cell(r.layer_curve[k]);
    out << ',';
    if (k < r.fk_curve.size()) out << r.fk_curve[k];
    out << '\n';
  }
  return out.str();
}

void emit_report(const MetricsReport& report, const std::filesystem::path& base,
                 ReportFormat format) {
  std::filesystem::path path = base;
  path += format == ReportFormat::Json ? ".json" : ".csv";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report " + path.string());
  if (format == ReportFormat::Json) {
    out << to_json(report).dump(2) << '\n';
  } else {
    out << report_csv(report);
  }
  if (!out) throw IoError("failed writing report " + path.string());
}

}  // namespace pibinn
