#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pibinn/errors.hpp"
#include "pibinn/train.hpp"

using namespace pibinn;
namespace fs = std::filesystem;

namespace {

Dataset tiny_data(std::optional<BlockStructure> s = std::nullopt) {
  DatasetSpec spec;
  spec.m = 8;
  spec.n = 16;
  spec.p_nonzero = 0.2;
  spec.n_train = 64;
  spec.n_test = 32;
  spec.seed = 3;
  return s ? gen_block_dataset(*s, spec) : gen_dataset(spec);
}

TrainConfig cfg(const char* text) { return train_config_from_json(nlohmann::json::parse(text)); }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pibinn_test_train_" + name);
  fs::remove_all(p);
  return p;
}

void same_net(const UnrolledNet& a, const UnrolledNet& b) {
  REQUIRE(a.depth() == b.depth());
  for (std::size_t k = 0; k < a.depth(); ++k) {
    CHECK(a.layers[k].W == b.layers[k].W);
    CHECK(a.layers[k].theta == b.layers[k].theta);
  }
  CHECK(a.scale == b.scale);
  CHECK(a.lambda0 == b.lambda0);
  CHECK(a.quant_mode == b.quant_mode);
  CHECK(a.activation == b.activation);
  CHECK(a.delta == b.delta);
  CHECK(a.structure == b.structure);
  CHECK(a.mask == b.mask);
  CHECK(a.tied_blocks == b.tied_blocks);
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(cfg(R"({"model":{"layers":3},"pretrain":{"epochs":2}})"));
  const TrainConfig ob = cfg(R"({"model":{"layers":3,"quant_mode":"one_bit"},"pretrain":{"epochs":2},
                                "quant":{"epochs":1,"lambda0":0.04},"stage2":{"epochs":4},"seed":9})");
  CHECK(ob.quant.lambda0 == 0.04);
  CHECK(ob.stage2.epochs == 4);
  CHECK(ob.seed == 9);
  const TrainConfig round = train_config_from_json(nlohmann::json::parse(to_json(ob).dump()));
  CHECK(round.quant.lambda0 == 0.04);
  CHECK(round.model.quant_mode == QuantMode::OneBitGlobal);

  const char* bad[] = {
      R"({"pretrain":{"epochs":1}})",
      R"({"model":{},"pretrain":{"epochs":1}})",
      R"({"model":{"layers":0},"pretrain":{"epochs":1}})",
      R"({"model":{"layers":2,"delta":1.5},"pretrain":{"epochs":1}})",
      R"({"model":{"layers":2,"quant_mode":"int4"},"pretrain":{"epochs":1}})",
      R"({"model":{"layers":2},"pretrain":{}})",
      R"({"model":{"layers":2},"pretrain":{"epochs":1,"lr0":-1}})",
      R"({"model":{"layers":2,"quant_mode":"one_bit"},"pretrain":{"epochs":1},"quant":{"epochs":1}})",
      R"({"model":{"layers":2,"quant_mode":"one_bit"},"pretrain":{"epochs":1},"stage2":{"epochs":1}})",
      R"({"model":{"layers":2,"quant_mode":"ternary"},"pretrain":{"epochs":1},"quant":{"epochs":1,"mode":"prox"}})",
      R"({"model":{"layers":2,"kind":"fcn","quant_mode":"one_bit"},"pretrain":{"epochs":1}})",
      R"({"model":{"layers":2},"pretrain":{"epochs":1},"batch_size":0})",
      R"({"model":{"layers":2},"pretrain":{"epochs":1},"colour":"red"})",
  };
  for (const char* text : bad) {
    INFO(text);
    CHECK_THROWS_AS(cfg(text), ConfigError);
  }
}

TEST_CASE("initialization") {
  const Dataset d = tiny_data();
  const ModelSpec spec = model_spec_from_json(nlohmann::json::parse(R"({"layers":3})"));
  const auto net = std::get<UnrolledNet>(init_model(spec, d, 0));
  const auto& a = std::get<DenseMatrix>(d.sensing);
  const double l = spectral_norm(a) * spectral_norm(a);
  for (const auto& layer : net.layers) {
    CHECK((layer.W - a / l).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(layer.theta == doctest::Approx(0.1 / l));
  }

  const Dataset b = tiny_data(BlockStructure(3, 8, 16));
  const auto tied = std::get<UnrolledNet>(init_model(spec, b, 0));
  CHECK(tied.layers[0].W.rows() == 8);
  CHECK(tied.structure == BlockStructure(3, 8, 16));
  ModelSpec untied = spec;
  untied.tied_blocks = false;
  const auto full = std::get<UnrolledNet>(init_model(untied, b, 0));
  CHECK(full.layers[0].W.rows() == 24);
  REQUIRE(full.mask.has_value());
  CHECK(*full.mask == mask_from_block(BlockStructure(3, 8, 16)));
  CHECK(apply_mask(full.layers[0].W, *full.mask) == full.layers[0].W);
}

TEST_CASE("zero epochs return the initialization") {
  const Dataset d = tiny_data();
  const TrainConfig c = cfg(R"({"model":{"layers":3},"pretrain":{"epochs":0}})");
  const TrainResult r = train_model(c, d);
  same_net(std::get<UnrolledNet>(r.model), std::get<UnrolledNet>(init_model(c.model, d, c.seed)));
  CHECK(r.history.empty());
}

TEST_CASE("training is deterministic and records every epoch") {
  const Dataset d = tiny_data();
  const TrainConfig c = cfg(R"({"model":{"layers":3,"quant_mode":"one_bit"},"pretrain":{"epochs":3},
                               "quant":{"epochs":2,"lambda0":0.05},"stage2":{"epochs":4},"batch_size":16,"seed":5})");
  std::size_t calls = 0;
  const TrainResult a = train_model(c, d, [&](const EpochRecord&, const Model&) { ++calls; });
  const TrainResult b = train_model(c, d);
  CHECK(calls == 9);
  REQUIRE(a.history.size() == 9);
  CHECK(a.history[0].stage == "pretrain");
  CHECK(a.history[3].stage == "stage1");
  CHECK(a.history[8].stage == "stage2");
  for (std::size_t i = 0; i < 9; ++i) CHECK(a.history[i].loss == b.history[i].loss);
  same_net(std::get<UnrolledNet>(a.model), std::get<UnrolledNet>(b.model));
  REQUIRE(a.stage2.has_value());
  REQUIRE(a.stage1_net.has_value());
  CHECK(a.stage1_net->scale == 1.0);
  CHECK(std::get<UnrolledNet>(a.model).scale == a.stage2->scale);
  CHECK(a.wall_times.size() == 3);

  const auto& net = std::get<UnrolledNet>(a.model);
  for (const auto& l : net.layers)
    for (Eigen::Index i = 0; i < l.W.size(); ++i) CHECK(std::abs(l.W.data()[i]) == 0.05);

  TrainConfig other = c;
  other.seed = 6;
  CHECK(train_model(other, d).history[0].loss != a.history[0].loss);

  const std::string csv = history_csv(a.history);
  CHECK(csv.rfind("stage,epoch,lr,loss,scale\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);
}

TEST_CASE("worker count does not change the result") {
  const Dataset d = tiny_data();
  TrainConfig c = cfg(R"({"model":{"layers":2},"pretrain":{"epochs":2},"batch_size":32})");
  const TrainResult one = train_model(c, d);
  c.workers = 3;
  const TrainResult three = train_model(c, d);
  const auto& a = std::get<UnrolledNet>(one.model);
  const auto& b = std::get<UnrolledNet>(three.model);
  for (std::size_t k = 0; k < 2; ++k) CHECK((a.layers[k].W - b.layers[k].W).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("baselines train") {
  const Dataset d = tiny_data();
  for (const char* mode : {"ternary", "channel_wise"}) {
    const std::string text = std::string(R"({"model":{"layers":2,"quant_mode":")") + mode +
                             R"("},"pretrain":{"epochs":1},"quant":{"epochs":1}})";
    const TrainResult r = train_model(cfg(text.c_str()), d);
    const auto& net = std::get<UnrolledNet>(r.model);
    for (const auto& l : net.layers) {
      for (Eigen::Index r = 0; r < l.W.rows(); ++r) {
        const double g = l.W.row(r).cwiseAbs().maxCoeff();
        for (Eigen::Index c = 0; c < l.W.cols(); ++c) {
          const double v = std::abs(l.W(r, c));
          CHECK((v == g || (v == 0.0 && net.quant_mode == QuantMode::Ternary)));
        }
      }
    }
    CHECK_FALSE(r.stage2.has_value());
  }
  const TrainResult f = train_model(cfg(R"({"model":{"layers":2,"kind":"fcn"},"pretrain":{"epochs":1}})"), d);
  CHECK(std::holds_alternative<FcnNet>(f.model));
  CHECK(f.history[0].stage == "train");
}

TEST_CASE("numeric blow-up names the stage and epoch") {
  const Dataset d = tiny_data();
  const TrainConfig c = cfg(R"({"model":{"layers":3},"pretrain":{"epochs":5,"lr0":1e300,"optimizer":"sgd"}})");
  try {
    train_model(c, d);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("pretrain") != std::string::npos);
    CHECK(msg.find("epoch") != std::string::npos);
  }
}

TEST_CASE("metrics and bit accounting") {
  const Dataset d = tiny_data();
  TrainConfig c = cfg(R"({"model":{"layers":2,"quant_mode":"one_bit"},"pretrain":{"epochs":1},
                         "quant":{"epochs":1},"stage2":{"epochs":1}})");
  const TrainResult r = train_model(c, d);
  const MetricsReport m = evaluate(r.model, d);
  const auto& net = std::get<UnrolledNet>(r.model);
  CHECK(m.train_nmse_db == doctest::Approx(nmse_db(predict(r.model, d.sensing, d.train.y), d.train.x)).epsilon(1e-12));
  CHECK(m.gap_db == doctest::Approx(m.test_nmse_db - m.train_nmse_db));
  CHECK(m.bits == 2 * 8 * 16 + 64 + 32);
  CHECK(m.params == 2 * 8 * 16 + 2 + 1);
  CHECK(m.layer_curve.size() == 2);
  CHECK(m.layer_curve.back() == doctest::Approx(m.test_nmse_db).epsilon(1e-12));
  CHECK(model_bits(r.model) == effective_bits(net));

  UnrolledNet zero = net;
  for (auto& l : zero.layers) l.W.setZero();
  zero.quant_mode = QuantMode::HighRes;
  CHECK(evaluate(Model(zero), d).test_nmse_db == doctest::Approx(0.0));
}

TEST_CASE("checkpoints") {
  const Dataset b = tiny_data(BlockStructure(2, 8, 16));
  const TrainConfig c = cfg(R"({"model":{"layers":2,"quant_mode":"one_bit","tied_blocks":false},
                               "pretrain":{"epochs":1},"quant":{"epochs":1},"stage2":{"epochs":2}})");
  const TrainResult r = train_model(c, b);
  const fs::path dir = scratch("ckpt");
  save_checkpoint(r.model, dir);
  CHECK(fs::exists(dir / "checkpoint.json"));
  CHECK(fs::exists(dir / "weights.bin"));
  CHECK_FALSE(fs::exists(dir / "checkpoint.json.tmp"));
  same_net(std::get<UnrolledNet>(load_checkpoint(dir)), std::get<UnrolledNet>(r.model));

  const Dataset d = tiny_data();
  const TrainResult f = train_model(cfg(R"({"model":{"layers":3,"kind":"fcn"},"pretrain":{"epochs":1}})"), d);
  const fs::path fdir = scratch("ckpt_fcn");
  save_checkpoint(f.model, fdir);
  const auto back = std::get<FcnNet>(load_checkpoint(fdir));
  CHECK(predict(Model(back), d.sensing, d.test.y) == predict(f.model, d.sensing, d.test.y));

  SUBCASE("truncated weights") {
    fs::resize_file(dir / "weights.bin", fs::file_size(dir / "weights.bin") - 8);
    CHECK_THROWS_AS(load_checkpoint(dir), TruncatedFile);
  }
  SUBCASE("bad manifest") {
    std::ofstream(dir / "checkpoint.json") << "[1, 2";
    CHECK_THROWS_AS(load_checkpoint(dir), CorruptManifest);
  }
  SUBCASE("shape conflict") {
    auto j = nlohmann::json::parse(std::ifstream(dir / "checkpoint.json"));
    j["layers"] = 3;
    std::ofstream(dir / "checkpoint.json") << j.dump();
    CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  }
  fs::remove_all(dir);
  fs::remove_all(fdir);
}
