// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

#include <sys/resource.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "pibinn/diag.hpp"
#include "pibinn/log.hpp"
#include "pibinn/physics.hpp"
#include "pibinn/quant.hpp"
#include "pibinn/train.hpp"

using namespace pibinn;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double test_db(const Model& m, const Dataset& d) { return nmse_db(predict(m, d.sensing, d.test.y), d.test.x); }

// ---- shared runs ----

const Dataset& synthetic() {
  static const Dataset d = [] {
    DatasetSpec s;
    s.seed = 7;
    return gen_dataset(s);
  }();
  return d;
}

TrainConfig sweep_config(std::size_t k, QuantMode mode, double lambda0) {
  TrainConfig c;
  c.model.layers = k;
  c.model.quant_mode = mode;
  c.pretrain.epochs = 50;
  c.quant.epochs = 50;
  c.quant.lambda0 = lambda0;
  c.stage2.epochs = 100;
  return c;
}

struct Pretrained {
  Model model;
  double seconds = 0.0;
};

const Pretrained& pretrained(std::size_t k) {
  static std::map<std::size_t, Pretrained> cache;
  auto it = cache.find(k);
  if (it == cache.end()) {
    const auto t0 = Clock::now();
    TrainResult r = train_model(sweep_config(k, QuantMode::HighRes, 0.02), synthetic());
    it = cache.emplace(k, Pretrained{std::move(r.model), since(t0)}).first;
  }
  return it->second;
}

const Dataset& desk_blocks() {
  static const Dataset d = [] {
    DatasetSpec s;
    s.p_nonzero = 0.1;
    s.n_train = 2000;
    s.n_test = 500;
    s.seed = 1;
    return gen_block_dataset(BlockStructure(10, 10, 20), s);
  }();
  return d;
}

TrainConfig desk_config(QuantMode mode) {
  TrainConfig c;
  c.model.layers = 10;
  c.model.quant_mode = mode;
  c.pretrain.epochs = 30;
  c.quant.epochs = 30;
  c.seed = 1;
  if (mode == QuantMode::OneBitGlobal) {
    c.quant.lambda0 = 0.1;
    c.stage2.epochs = 50;
  } else {
    c.model.use_structure = false;
  }
  return c;
}

const TrainResult& desk_pibinn() {
  static const TrainResult r = train_model(desk_config(QuantMode::OneBitGlobal), desk_blocks());
  return r;
}

// ---- criteria ----

Verdict bit_counts() {
  const auto t0 = Clock::now();
  struct Row {
    BitModel model;
    std::uint64_t k, expect;
  };
  const Row rows[] = {{BitModel::FcnRelu, 5, 1440000},  {BitModel::FcnSt, 5, 1440160},
                      {BitModel::Dun, 5, 800160},       {BitModel::OneBitDun, 5, 25160},
                      {BitModel::OneBitDun, 10, 50320}, {BitModel::OneBitDun, 15, 75480},
                      {BitModel::OneBitDun, 20, 100640}, {BitModel::OneBitDun, 22, 110704},
                      {BitModel::OneBitDun, 25, 125800}};
  int exact = 0;
  for (const auto& r : rows) exact += bit_count(r.model, r.k, 50, 100) == r.expect;
  const double s = since(t0);
  return {exact == 9 && s < 1.0, fmt("bit counts %d/9 exact, %.3f s", exact, s)};
}

Verdict gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t coords = 0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Activation act = i % 2 ? Activation::HardThreshold : Activation::SoftThreshold;
    const double delta = (i / 2) % 2 ? 0.9 : 1.0;
    const bool one_bit = (i / 4) % 2;
    const auto c = gradcheck::random_case(5000 + i, act, delta, one_bit);
    const auto r = gradcheck::check(c.net, c.a, c.y, c.x, LossKind::SquaredError);
    worst = std::max(worst, r.max_rel);
    coords += r.checked;
  }
  const double s = since(t0);
  return {worst <= 1e-5 && s < 60.0,
          fmt("50 nets, %zu coordinates, max relative error %.2e, %.1f s", coords, worst, s)};
}

Verdict oracles() {
  const auto t0 = Clock::now();
  double prox_err = 0.0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const double w = oracle::uniform(31, i, -3, 3);
    const double t = oracle::uniform(32, i, 0, 1);
    const double l = oracle::uniform(33, i, 0.01, 1.5);
    prox_err = std::max(prox_err, std::abs(prox_step(w, t, l) - oracle::prox_grid(w, t, l)));
  }
  double norm_err = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const std::size_t r = 2 + i % 11, c = 2 + (i / 11) % 9;
    const DenseMatrix m = oracle::random_matrix(r, c, 700 + i, 1.0 / std::sqrt(static_cast<double>(r)));
    norm_err = std::max(norm_err, std::abs(spectral_norm(m) - oracle::spectral_norm(m)));
  }
  double block_err = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const std::size_t v = 1 + i % 5, p = 1 + i % 7, u = 1 + i % 4;
    const BlockDiagOperator op(oracle::random_matrix(v, p, 900 + i), u);
    const DenseMatrix full = oracle::block_diag(op.block(), u);
    const Batch x = oracle::random_matrix(p * u, 3, 950 + i);
    const Batch y = oracle::random_matrix(v * u, 3, 980 + i);
    block_err = std::max(block_err, (pibinn::apply(op, x) - full * x).cwiseAbs().maxCoeff());
    block_err = std::max(block_err, (pibinn::apply_transpose(op, y) - full.transpose() * y).cwiseAbs().maxCoeff());
  }
  const double s = since(t0);
  return {prox_err <= 1e-5 && norm_err <= 1e-6 && block_err <= 1e-12 && s < 120.0,
          fmt("prox %.1e, spectral norm %.1e, block operator %.1e, %.1f s", prox_err, norm_err, block_err, s)};
}

Verdict scaling_trend() {
  const auto t0 = Clock::now();
  double db[3];
  const std::size_t ks[3] = {5, 10, 20};
  double pre_seconds = 0.0;
  for (int i = 0; i < 3; ++i) {
    const Pretrained& p = pretrained(ks[i]);
    pre_seconds += p.seconds;
    const TrainResult r = train_model_from(sweep_config(ks[i], QuantMode::OneBitGlobal, 0.04), synthetic(),
                                           p.model, true);
    db[i] = test_db(r.model, synthetic());
  }
  const double total = since(t0);
  const bool steps = db[1] <= db[0] - 2.0 && db[2] <= db[1] - 2.0;
  return {steps && db[2] <= -14.0 && total <= 900.0,
          fmt("one-bit test NMSE K=5 %.2f, K=10 %.2f, K=20 %.2f dB, %.0f s (pretraining %.0f s)", db[0], db[1],
              db[2], total, pre_seconds)};
}

Verdict high_res() {
  const Pretrained& p = pretrained(5);
  const double db = test_db(p.model, synthetic());
  return {db <= -13.0 && p.seconds <= 300.0, fmt("high-res K=5 test NMSE %.2f dB, %.0f s", db, p.seconds)};
}

Verdict scale_stage() {
  const auto t0 = Clock::now();
  const TrainResult r = train_model_from(sweep_config(20, QuantMode::OneBitGlobal, 0.02), synthetic(),
                                         pretrained(20).model, true);
  const double fixed = test_db(Model(*r.stage1_net), synthetic());
  const double learned = test_db(r.model, synthetic());
  const double eff = r.stage2->scale * std::get<UnrolledNet>(r.model).lambda0;
  return {learned <= fixed - 1.0 && eff >= 0.03 && eff <= 0.10,
          fmt("K=20 fixed scale 0.02 gives %.2f dB, learned scale %.4f gives %.2f dB, %.0f s", fixed, eff, learned,
              since(t0))};
}

long peak_rss_kib() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return u.ru_maxrss;
}

Verdict structured() {
  const BlockStructure big(100, 50, 100);
  const bool counts = structured_param_count(big, 20) == 100000 && structured_param_count(big, 10) == 50000;

  // full-size structure, a few samples: a dense operator alone would need 400 MB
  DatasetSpec s;
  s.n_train = 16;
  s.n_test = 8;
  s.seed = 3;
  const Dataset large = gen_block_dataset(big, s);
  TrainConfig c;
  c.model.layers = 20;
  c.model.quant_mode = QuantMode::OneBitGlobal;
  c.pretrain.epochs = 1;
  c.quant.epochs = 1;
  c.stage2.epochs = 1;
  c.batch_size = 8;
  const TrainResult lr = train_model(c, large);
  const auto& lnet = std::get<UnrolledNet>(lr.model);
  const long rss_mib = peak_rss_kib() / 1024;
  const bool large_ok = lnet.layers[0].W.rows() == 50 && lnet.layers[0].W.cols() == 100 &&
                        std::isfinite(test_db(lr.model, large)) && rss_mib < 200;

  const TrainResult& r = desk_pibinn();
  const auto& net = std::get<UnrolledNet>(r.model);
  const auto* op = std::get_if<BlockDiagOperator>(&desk_blocks().sensing);
  bool block_only = op != nullptr && op->block().rows() == 10 && op->block().cols() == 20;
  for (const auto& l : net.layers) block_only = block_only && l.W.rows() == 10 && l.W.cols() == 20;
  const double db = test_db(r.model, desk_blocks());
  const bool desk_ok = block_only && model_params(r.model) == 2011 && db < 0.0;
  return {counts && large_ok && desk_ok,
          fmt("counts 100000/50000 %s; desk run u=10 v=10 p=20 K=10 stores 10x20 blocks, %llu params, test %.2f dB; "
              "full-size run peak RSS %ld MiB",
              counts ? "exact" : "WRONG", static_cast<unsigned long long>(model_params(r.model)), db, rss_mib)};
}

Verdict spectral() {
  const auto t0 = Clock::now();
  int good_seeds = 0;
  std::ostringstream worst;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const DatasetSpec spec = dataset_spec_from_json(
        {{"p_nonzero", 0.5}, {"support_size", 10u}, {"n_train", 4000u}, {"n_test", 1000u}, {"seed", seed}});
    const Dataset d = gen_dataset(spec);
    TrainConfig c;
    c.model.layers = 5;
    c.model.activation = Activation::HardThreshold;
    c.model.quant_mode = QuantMode::OneBitGlobal;
    c.pretrain.epochs = 50;
    c.quant.epochs = 50;
    c.quant.lambda0 = 0.02;
    c.stage2.epochs = 0;
    c.seed = seed;
    const TrainResult r = train_model(c, d);
    const auto fk = spectral_fk(std::get<UnrolledNet>(r.model), d.sensing, *spec.fixed_support,
                                SpectralVariant::HardThreshold, 1.0);
    const double top = *std::max_element(fk.begin(), fk.end());
    good_seeds += top < 1.0;
    worst << (seed > 1 ? " " : "") << fmt("%.3f", top);
  }
  return {good_seeds >= 4, fmt("%d/5 seeds with f_k < 1 on every layer (max f_k per seed: %s), %.0f s", good_seeds,
                               worst.str().c_str(), since(t0))};
}

Verdict schemes() {
  const auto t0 = Clock::now();
  const TrainResult& p = desk_pibinn();
  const TrainResult t = train_model(desk_config(QuantMode::Ternary), desk_blocks());
  const double pdb = test_db(p.model, desk_blocks()), tdb = test_db(t.model, desk_blocks());
  const auto pbits = model_bits(p.model), tbits = model_bits(t.model);
  return {pbits < tbits && pdb <= tdb + 0.5,
          fmt("PIBiNN %.2f dB with %llu bits, dense ternary %.2f dB with %llu bits, %.0f s", pdb,
              static_cast<unsigned long long>(pbits), tdb, static_cast<unsigned long long>(tbits), since(t0))};
}

Verdict sample_efficiency() {
  const auto t0 = Clock::now();
  DatasetSpec s;
  s.seed = 1;
  const Dataset full = gen_dataset(s);
  Dataset small = full;
  small.train = full.train.subset(400);

  TrainConfig dun;
  dun.model.layers = 5;
  dun.pretrain.epochs = 200;
  dun.seed = 1;
  TrainConfig fcn;
  fcn.model.layers = 5;
  fcn.model.kind = ModelKind::Fcn;
  fcn.pretrain.epochs = 100;
  fcn.seed = 1;
  const double ddb = test_db(train_model(dun, small).model, full);
  const double fdb = test_db(train_model(fcn, full).model, full);
  const double s_total = since(t0);
  return {ddb <= fdb && s_total <= 600.0,
          fmt("DUN on 400 samples %.2f dB, FCN with soft thresholds on 4000 samples %.2f dB, %.0f s", ddb, fdb,
              s_total)};
}

}  // namespace

int main() {
  if (std::getenv("PIBINN_LOG") == nullptr) log::set_level(log::Level::Error);
  else if (!log::init_from_env()) return 2;

  const std::pair<int, std::function<Verdict()>> criteria[] = {
      {1, bit_counts},  {2, gradients}, {3, oracles},  {4, scaling_trend}, {5, high_res},
      {6, scale_stage}, {7, structured}, {8, spectral}, {9, schemes},      {10, sample_efficiency}};
  int failed = 0;
  for (const auto& [id, run] : criteria) {
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s criterion %d: %s\n", v.pass ? "PASS" : "FAIL", id, v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
