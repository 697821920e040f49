#include "pibinn/data.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "pibinn/errors.hpp"

namespace pibinn {
namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void DatasetSpec::validate() const {
  if (m == 0 || n == 0) throw ConfigError("dataset: m and n must be >= 1");
  if (!(p_nonzero > 0.0 && p_nonzero <= 1.0)) throw ConfigError("dataset: p_nonzero must lie in (0, 1]");
  if (n_train == 0) throw ConfigError("dataset: n_train must be >= 1");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("dataset: noise_std must be >= 0");
  if (structure && (structure->v != m || structure->p != n)) {
    throw ConfigError("dataset: with a block structure, m and n must equal the block sizes v and p");
  }
  if (fixed_support && fixed_support->ambient() != signal_dim()) {
    throw ConfigError("dataset: fixed_support ambient dimension must equal the signal length");
  }
}

ordered_json to_json(const DatasetSpec& s) {
  ordered_json j;
  j["m"] = s.m;
  j["n"] = s.n;
  j["p_nonzero"] = s.p_nonzero;
  j["n_train"] = s.n_train;
  j["n_test"] = s.n_test;
  j["noise_std"] = s.noise_std;
  j["seed"] = s.seed;
  j["fixed_support"] = s.fixed_support ? ordered_json(s.fixed_support->indices()) : ordered_json(nullptr);
  if (s.structure) {
    j["structure"] = {{"block", {{"u", s.structure->u}, {"v", s.structure->v}, {"p", s.structure->p}}}};
  } else {
    j["structure"] = nullptr;
  }
  return j;
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset: key '") + key + "' has the wrong type: " + e.what());
  }
}

}  // namespace

DatasetSpec dataset_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
  static const char* known[] = {"m", "n", "p_nonzero", "n_train", "n_test", "noise_std",
                                "seed", "fixed_support", "structure", "support_size"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("dataset: unknown key '" + key + "'");
  }
  for (const char* key : {"m", "n", "n_train", "n_test", "seed", "support_size"}) {
    if (j.contains(key) && !j.at(key).is_null() && !j.at(key).is_number_unsigned()) {
      throw ConfigError(std::string("dataset: '") + key + "' must be a non-negative integer");
    }
  }
  DatasetSpec s;
  s.m = get_or<std::size_t>(j, "m", s.m);
  s.n = get_or<std::size_t>(j, "n", s.n);
  s.p_nonzero = get_or<double>(j, "p_nonzero", s.p_nonzero);
  s.n_train = get_or<std::size_t>(j, "n_train", s.n_train);
  s.n_test = get_or<std::size_t>(j, "n_test", s.n_test);
  s.noise_std = get_or<double>(j, "noise_std", s.noise_std);
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed);
  if (j.contains("structure") && !j.at("structure").is_null()) {
    const auto& b = j.at("structure").contains("block") ? j.at("structure").at("block") : j.at("structure");
    try {
      s.structure = BlockStructure(b.at("u").get<std::size_t>(), b.at("v").get<std::size_t>(),
                                   b.at("p").get<std::size_t>());
    } catch (const json::exception& e) {
      throw ConfigError(std::string("dataset: bad structure: ") + e.what());
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    }
  }
  try {
    if (j.contains("fixed_support") && !j.at("fixed_support").is_null()) {
      s.fixed_support = IndexSet(j.at("fixed_support").get<std::vector<std::size_t>>(), s.signal_dim());
    } else if (j.contains("support_size") && !j.at("support_size").is_null()) {
      // Deterministic support drawn from the seed: first `size` entries of a
      // seeded permutation.
      const auto size = j.at("support_size").get<std::size_t>();
      const std::size_t dim = s.signal_dim();
      if (size == 0 || size > dim) throw ConfigError("dataset: support_size must lie in [1, n]");
      std::vector<std::size_t> perm(dim);
      for (std::size_t i = 0; i < dim; ++i) perm[i] = i;
      const rng::Key key{s.seed, 0x50990570ULL};
      for (std::size_t i = dim; i-- > 1;) std::swap(perm[i], perm[rng::bits(key, i) % (i + 1)]);
      perm.resize(size);
      s.fixed_support = IndexSet(std::move(perm), dim);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset: bad fixed_support: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  s.validate();
  return s;
}

Split Split::subset(std::size_t count) const {
  count = std::min(count, size());
  Split out;
  out.y = y.leftCols(count);
  out.x = x.leftCols(count);
  out.supports.assign(supports.begin(), supports.begin() + static_cast<std::ptrdiff_t>(count));
  return out;
}

DenseMatrix gen_sensing(std::size_t m, std::size_t n, std::uint64_t seed) {
  if (m == 0 || n == 0) throw InvalidArgument("gen_sensing: m and n must be >= 1");
  DenseMatrix a(m, n);
  const rng::Key key{seed, streams::kSensing};
  const double sd = 1.0 / std::sqrt(static_cast<double>(m));
  for (std::size_t i = 0; i < m * n; ++i) a.data()[i] = sd * rng::normal(key, i);
  return a;
}

Split gen_signals(const DatasetSpec& spec, std::size_t count, rng::Key key) {
  const std::size_t dim = spec.signal_dim();
  Split out;
  out.x = Batch::Zero(dim, count);
  out.supports.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const rng::Key sample = rng::child(key, s);
    const rng::Key values{sample.seed, sample.stream + 1};
    std::vector<std::size_t> support;
    const auto consider = [&](std::size_t j) {
      if (rng::uniform(sample, j) < spec.p_nonzero) {
        out.x(j, s) = rng::normal(values, j);
        support.push_back(j);
      }
    };
    if (spec.fixed_support) {
      for (std::size_t j : spec.fixed_support->indices()) consider(j);
    } else {
      for (std::size_t j = 0; j < dim; ++j) consider(j);
    }
    out.supports.emplace_back(std::move(support), dim);
  }
  return out;
}

Batch measure(const LinearOperator& sensing, const Batch& x, double noise_std, rng::Key key) {
  if (!(noise_std >= 0.0)) throw InvalidArgument("measure: noise_std must be >= 0");
  Batch y = apply(sensing, x);
  if (noise_std > 0.0) {
    for (Eigen::Index s = 0; s < y.cols(); ++s) {
      const rng::Key sample = rng::child(key, static_cast<std::uint64_t>(s));
      for (Eigen::Index i = 0; i < y.rows(); ++i) y(i, s) += noise_std * rng::normal(sample, i);
    }
  }
  return y;
}

namespace {

Dataset fill_splits(DatasetSpec spec, LinearOperator sensing) {
  Dataset d{std::move(spec), std::move(sensing), {}, {}};
  d.train = gen_signals(d.spec, d.spec.n_train, {d.spec.seed, streams::kTrainSignals});
  d.test = gen_signals(d.spec, d.spec.n_test, {d.spec.seed, streams::kTestSignals});
  d.train.y = measure(d.sensing, d.train.x, d.spec.noise_std, {d.spec.seed, streams::kTrainNoise});
  d.test.y = measure(d.sensing, d.test.x, d.spec.noise_std, {d.spec.seed, streams::kTestNoise});
  return d;
}

}  // namespace

Dataset gen_dataset(const DatasetSpec& spec) {
  if (spec.structure) return gen_block_dataset(*spec.structure, spec);
  spec.validate();
  return fill_splits(spec, gen_sensing(spec.m, spec.n, spec.seed));
}

Dataset gen_block_dataset(const BlockStructure& structure, DatasetSpec spec) {
  spec.structure = structure;
  spec.m = structure.v;
  spec.n = structure.p;
  spec.validate();
  BlockDiagOperator op(gen_sensing(structure.v, structure.p, spec.seed), structure.u);
  return fill_splits(std::move(spec), std::move(op));
}

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const auto next_token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    if (tok.empty()) throw IoError("malformed PGM header in " + path.string());
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P5" && magic != "P2") throw IoError("not a PGM file (P2/P5): " + path.string());
  GrayImage img;
  std::size_t maxval = 0;
  try {
    img.width = std::stoul(next_token());
    img.height = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::logic_error&) {
    throw IoError("malformed PGM header in " + path.string());
  }
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) {
    throw IoError("unsupported PGM dimensions or maxval in " + path.string());
  }
  const std::size_t count = img.width * img.height;
  img.pixels.resize(count);
  const double scale = 1.0 / static_cast<double>(maxval);
  if (magic == "P2") {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        img.pixels[i] = static_cast<double>(std::stoul(next_token())) * scale;
      } catch (const std::logic_error&) {
        throw IoError("malformed PGM pixel data in " + path.string());
      }
    }
    return img;
  }
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw TruncatedFile("PGM pixel data truncated in " + path.string());
  }
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned v = bytes_per == 1 ? raw[i] : (raw[2 * i] << 8u) | raw[2 * i + 1];
    img.pixels[i] = static_cast<double>(v) * scale;
  }
  return img;
}

void write_pgm(const fs::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  for (double p : image.pixels) {
    const double c = std::clamp(p, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (!out) throw IoError("failed writing image " + path.string());
}

Batch extract_patches(const GrayImage& image, std::size_t patch, std::size_t count,
                      std::uint64_t seed) {
  if (patch == 0 || image.width < patch || image.height < patch) {
    throw InvalidArgument("extract_patches: image smaller than the patch size");
  }
  const rng::Key key{seed, streams::kPatches};
  const std::size_t rows_avail = image.height - patch + 1;
  const std::size_t cols_avail = image.width - patch + 1;
  Batch out(patch * patch, count);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t r0 = rng::bits(key, 2 * s) % rows_avail;
    const std::size_t c0 = rng::bits(key, 2 * s + 1) % cols_avail;
    for (std::size_t i = 0; i < patch; ++i) {
      for (std::size_t j = 0; j < patch; ++j) out(i * patch + j, s) = image.at(r0 + i, c0 + j);
    }
    out.col(s).array() -= out.col(s).mean();
  }
  return out;
}

Split dct_sense(const Batch& patches, const DenseMatrix& phi, const DenseMatrix& dct,
                double noise_std, std::uint64_t seed) {
  if (dct.rows() != dct.cols() || dct.cols() != patches.rows() || phi.cols() != dct.rows()) {
    throw DimensionError("dct_sense: Phi columns, D rows and patch length must agree");
  }
  Split out;
  out.x = dct * patches;
  Batch noisy = patches;
  if (noise_std > 0.0) {
    const rng::Key key{seed, streams::kTrainNoise};
    for (Eigen::Index s = 0; s < noisy.cols(); ++s) {
      const rng::Key sample = rng::child(key, static_cast<std::uint64_t>(s));
      for (Eigen::Index i = 0; i < noisy.rows(); ++i) noisy(i, s) += noise_std * rng::normal(sample, i);
    }
  }
  out.y = phi * (dct * noisy);
  for (Eigen::Index s = 0; s < out.x.cols(); ++s) {
    std::vector<std::size_t> support;
    for (Eigen::Index i = 0; i < out.x.rows(); ++i) {
      if (std::abs(out.x(i, s)) > 1e-12) support.push_back(static_cast<std::size_t>(i));
    }
    out.supports.emplace_back(std::move(support), static_cast<std::size_t>(out.x.rows()));
  }
  return out;
}

Vector contaminate(const Vector& clean, const Vector& artifact, double kappa) {
  if (clean.size() != artifact.size()) throw DimensionError("contaminate: length mismatch");
  return clean + kappa * artifact;
}

double contamination_snr_db(const Vector& clean, const Vector& artifact, double kappa) {
  if (clean.size() != artifact.size()) throw DimensionError("contamination_snr_db: length mismatch");
  return 10.0 * std::log10(clean.squaredNorm() / (kappa * artifact).squaredNorm());
}

void write_f64(const fs::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<double> read_f64(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> buf(count * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
    throw TruncatedFile(path.string() + " is truncated: expected " + std::to_string(buf.size()) +
                        " bytes, read " + std::to_string(in.gcount()));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ShapeMismatch(path.string() + " holds more data than the manifest declares");
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

namespace {

std::vector<double> flatten_columns(const Batch& a, const Batch& b) {
  std::vector<double> out(static_cast<std::size_t>(a.size() + b.size()));
  std::memcpy(out.data(), a.data(), sizeof(double) * a.size());
  if (b.size() > 0) std::memcpy(out.data() + a.size(), b.data(), sizeof(double) * b.size());
  return out;
}

ordered_json supports_json(const Split& s) {
  auto arr = ordered_json::array();
  for (const auto& sup : s.supports) arr.push_back(sup.indices());
  return arr;
}

const json& require(const json& j, const char* key) {
  if (!j.contains(key)) throw CorruptManifest(std::string("manifest is missing '") + key + "'");
  return j.at(key);
}

}  // namespace

void save_dataset(const Dataset& d, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

  ordered_json manifest;
  manifest["format"] = "pibinn-dataset";
  manifest["version"] = 1;
  manifest["spec"] = to_json(d.spec);
  if (const auto* dense = std::get_if<DenseMatrix>(&d.sensing)) {
    manifest["sensing"] = {{"kind", "dense"}, {"rows", dense->rows()}, {"cols", dense->cols()}, {"file", "A.bin"}};
    write_f64(dir / "A.bin", std::vector<double>(dense->data(), dense->data() + dense->size()));
  } else {
    const auto& op = std::get<BlockDiagOperator>(d.sensing);
    const auto& b = op.block();
    manifest["sensing"] = {{"kind", "block"}, {"rows", b.rows()}, {"cols", b.cols()},
                           {"repeat", op.repeat()}, {"file", "block.bin"}};
    write_f64(dir / "block.bin", std::vector<double>(b.data(), b.data() + b.size()));
  }
  manifest["measurements"] = {{"file", "Y.bin"}, {"length", d.train.y.rows()}};
  manifest["signals"] = {{"file", "X.bin"}, {"length", d.train.x.rows()}};
  manifest["n_train"] = d.train.size();
  manifest["n_test"] = d.test.size();
  manifest["support_file"] = "support.json";

  write_f64(dir / "Y.bin", flatten_columns(d.train.y, d.test.y));
  write_f64(dir / "X.bin", flatten_columns(d.train.x, d.test.x));
  {
    std::ofstream out(dir / "support.json", std::ios::trunc);
    if (!out) throw IoError("cannot write support.json");
    out << ordered_json{{"train", supports_json(d.train)}, {"test", supports_json(d.test)}}.dump() << '\n';
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest.json");
}

Dataset load_dataset(const fs::path& dir) {
  json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
    try {
      manifest = json::parse(in);
    } catch (const json::exception& e) {
      throw CorruptManifest(std::string("manifest.json is not valid JSON: ") + e.what());
    }
  }
  if (!manifest.is_object() || manifest.value("format", "") != "pibinn-dataset") {
    throw CorruptManifest("manifest.json is not a dataset manifest");
  }
  try {
    DatasetSpec spec;
    try {
      spec = dataset_spec_from_json(require(manifest, "spec"));
    } catch (const ConfigError& e) {
      throw CorruptManifest(std::string("manifest spec invalid: ") + e.what());
    }
    const auto n_train = require(manifest, "n_train").get<std::size_t>();
    const auto n_test = require(manifest, "n_test").get<std::size_t>();
    const auto& sj = require(manifest, "sensing");
    const auto rows = require(sj, "rows").get<std::size_t>();
    const auto cols = require(sj, "cols").get<std::size_t>();
    const std::string kind = require(sj, "kind").get<std::string>();
    if (rows != spec.m || cols != spec.n) {
      throw ShapeMismatch("sensing shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " conflicts with spec m=" + std::to_string(spec.m) + ", n=" + std::to_string(spec.n));
    }
    if (n_train != spec.n_train || n_test != spec.n_test) {
      throw ShapeMismatch("sample counts conflict with the spec");
    }
    const auto values = read_f64(dir / require(sj, "file").get<std::string>(), rows * cols);
    DenseMatrix a = Eigen::Map<const DenseMatrix>(values.data(), rows, cols);
    LinearOperator sensing = a;
    if (kind == "block") {
      const auto repeat = require(sj, "repeat").get<std::size_t>();
      if (!spec.structure || spec.structure->u != repeat) {
        throw ShapeMismatch("block repeat conflicts with the spec structure");
      }
      sensing = BlockDiagOperator(std::move(a), repeat);
    } else if (kind != "dense") {
      throw CorruptManifest("unknown sensing kind '" + kind + "'");
    } else if (spec.structure) {
      throw ShapeMismatch("spec declares a block structure but the sensing file is dense");
    }

    const auto m_len = require(require(manifest, "measurements"), "length").get<std::size_t>();
    const auto n_len = require(require(manifest, "signals"), "length").get<std::size_t>();
    if (m_len != spec.measurement_dim() || n_len != spec.signal_dim()) {
      throw ShapeMismatch("measurement/signal lengths conflict with the spec");
    }
    const std::size_t total = n_train + n_test;
    const auto yv = read_f64(dir / require(manifest["measurements"], "file").get<std::string>(), m_len * total);
    const auto xv = read_f64(dir / require(manifest["signals"], "file").get<std::string>(), n_len * total);
    Eigen::Map<const Batch> ym(yv.data(), m_len, total);
    Eigen::Map<const Batch> xm(xv.data(), n_len, total);

    Dataset d{spec, std::move(sensing), {}, {}};
    d.train.y = ym.leftCols(n_train);
    d.test.y = ym.rightCols(n_test);
    d.train.x = xm.leftCols(n_train);
    d.test.x = xm.rightCols(n_test);

    json supports;
    {
      std::ifstream in(dir / manifest.value("support_file", "support.json"));
      if (!in) throw IoError("cannot open support.json");
      try {
        supports = json::parse(in);
      } catch (const json::exception& e) {
        throw CorruptManifest(std::string("support.json is not valid JSON: ") + e.what());
      }
    }
    const auto read_supports = [&](const char* key, Split& split) {
      const auto& arr = require(supports, key);
      if (arr.size() != split.size()) throw ShapeMismatch(std::string("support list '") + key + "' has the wrong length");
      for (const auto& s : arr) split.supports.emplace_back(s.get<std::vector<std::size_t>>(), n_len);
    };
    read_supports("train", d.train);
    read_supports("test", d.test);
    return d;
  } catch (const json::exception& e) {
    throw CorruptManifest(std::string("manifest has a bad field: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw CorruptManifest(std::string("manifest content invalid: ") + e.what());
  }
}

}  // namespace pibinn
