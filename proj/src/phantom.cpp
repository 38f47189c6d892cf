#include "dalace/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dalace/hashing.hpp"
#include "dalace/rng.hpp"
#include "dalace/serialize.hpp"

namespace fs = std::filesystem;

namespace dalace::phantom {

namespace {
constexpr uint64_t kLayoutSalt = 0x4c41594f55545331ull;   // layout stream
constexpr uint64_t kNoiseSalt = 0x52454e4445523031ull;    // render stream
constexpr uint64_t kRoleSalt = 0x524f4c45u;               // source/target split
constexpr char kMagic[4] = {'P', 'H', 'M', '\0'};
}  // namespace

const char* contrast_curve_name(ContrastCurve c) {
  switch (c) {
    case ContrastCurve::Identity: return "identity";
    case ContrastCurve::Gamma: return "gamma";
    case ContrastCurve::SmoothStep: return "smoothstep";
    case ContrastCurve::Inverted: return "inverted";
  }
  return "identity";
}

ContrastCurve contrast_curve_from(const std::string& name) {
  if (name == "identity") return ContrastCurve::Identity;
  if (name == "gamma") return ContrastCurve::Gamma;
  if (name == "smoothstep") return ContrastCurve::SmoothStep;
  if (name == "inverted") return ContrastCurve::Inverted;
  fail(ErrorCode::InvalidConfig, "unknown contrast curve: " + name);
}

double apply_contrast(ContrastCurve curve, double gamma, double x) {
  x = std::clamp(x, 0.0, 1.0);
  switch (curve) {
    case ContrastCurve::Identity: return x;
    case ContrastCurve::Gamma: return std::pow(x, gamma);
    case ContrastCurve::SmoothStep: return x * x * (3.0 - 2.0 * x);
    case ContrastCurve::Inverted: return 1.0 - x;
  }
  return x;
}

void ModalitySpec::validate() const {
  require(!lut.empty(), ErrorCode::InvalidConfig, "modality lut empty");
  for (const auto& ci : lut) {
    require(ci.mean >= 0.0 && ci.mean <= 1.0, ErrorCode::InvalidConfig,
            "class mean outside [0,1]");
    require(ci.std >= 0.0, ErrorCode::InvalidConfig, "class std negative");
  }
  require(noise_sigma >= 0.0, ErrorCode::InvalidConfig, "noise_sigma negative");
  require(bias_amplitude >= 0.0 && bias_amplitude <= 0.5, ErrorCode::InvalidConfig,
          "bias amplitude outside [0,0.5]");
  require(gamma > 0.0, ErrorCode::InvalidConfig, "gamma must be positive");
}

std::vector<ModalitySpec> default_modalities() {
  // Class order: background, target, then four distractor classes. Means are
  // pre-curve; the post-curve per-class separations stay above
  // kDefaultShiftMargin for every spec pair. Spec 1's last distractor lands
  // exactly on its target intensity so thresholding cannot solve it.
  std::vector<ModalitySpec> specs(4);

  specs[0].id = 0;
  specs[0].lut = {{0.15, 0.02}, {0.65, 0.02}, {0.45, 0.02},
                  {0.80, 0.02}, {0.30, 0.02}, {0.55, 0.02}};
  specs[0].bias_amplitude = 0.05;
  specs[0].bias_freq = 1.0;
  specs[0].noise_sigma = 0.01;
  specs[0].curve = ContrastCurve::Identity;

  specs[1].id = 1;
  specs[1].lut = {{0.675, 0.03}, {0.396, 0.03}, {0.605, 0.03},
                  {0.312, 0.03}, {0.760, 0.03}, {0.396, 0.03}};
  specs[1].bias_amplitude = 0.15;
  specs[1].bias_freq = 2.0;
  specs[1].noise_sigma = 0.02;
  specs[1].curve = ContrastCurve::Gamma;
  specs[1].gamma = 1.3;

  specs[2].id = 2;
  specs[2].lut = {{0.40, 0.06}, {0.80, 0.06}, {0.58, 0.06},
                  {0.475, 0.06}, {0.30, 0.06}, {0.65, 0.06}};
  specs[2].bias_amplitude = 0.20;
  specs[2].bias_freq = 3.0;
  specs[2].noise_sigma = 0.03;
  specs[2].curve = ContrastCurve::SmoothStep;

  specs[3].id = 3;
  specs[3].lut = {{0.50, 0.03}, {0.88, 0.03}, {0.62, 0.03},
                  {0.40, 0.03}, {0.55, 0.03}, {0.38, 0.03}};
  specs[3].bias_amplitude = 0.15;
  specs[3].bias_freq = 2.0;
  specs[3].noise_sigma = 0.02;
  specs[3].curve = ContrastCurve::Inverted;

  for (const auto& s : specs) s.validate();
  return specs;
}

namespace {

void paint_ellipse(Tensor<uint8_t>& label, const Organ& o) {
  const int64_t H = label.dim(0), W = label.dim(1);
  const double cr = std::cos(o.rot), sr = std::sin(o.rot);
  const int64_t y0 = std::max<int64_t>(0, int64_t(o.cy - std::max(o.ax, o.ay) - 1));
  const int64_t y1 = std::min<int64_t>(H, int64_t(o.cy + std::max(o.ax, o.ay) + 2));
  const int64_t x0 = std::max<int64_t>(0, int64_t(o.cx - std::max(o.ax, o.ay) - 1));
  const int64_t x1 = std::min<int64_t>(W, int64_t(o.cx + std::max(o.ax, o.ay) + 2));
  for (int64_t y = y0; y < y1; ++y) {
    for (int64_t x = x0; x < x1; ++x) {
      const double dx = (double(x) + 0.5) - o.cx;
      const double dy = (double(y) + 0.5) - o.cy;
      const double u = (dx * cr + dy * sr) / o.ax;
      const double v = (-dx * sr + dy * cr) / o.ay;
      if (u * u + v * v <= 1.0) label[y * W + x] = uint8_t(o.cls);
    }
  }
}

}  // namespace

uint64_t noise_seed_for(uint64_t corpus_seed, int64_t anatomy_seed, int modality_id) {
  return hash_mix(hash_mix(corpus_seed, uint64_t(anatomy_seed)),
                  uint64_t(modality_id) ^ kNoiseSalt);
}

AnatomyLayout generate_layout(int64_t seed, const LayoutConfig& cfg) {
  require(seed >= 0, ErrorCode::InvalidConfig, "layout seed must be >= 0");
  require(cfg.resolution >= 32, ErrorCode::InvalidConfig, "resolution must be >= 32");
  require(cfg.min_distractors >= 0 && cfg.max_distractors >= cfg.min_distractors,
          ErrorCode::InvalidConfig, "bad distractor range");

  const int R = cfg.resolution;
  Rng rng(hash_mix(uint64_t(seed), kLayoutSalt));

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    AnatomyLayout layout;
    layout.seed = seed;
    layout.resolution = R;
    layout.label_map = Tensor<uint8_t>::zeros({R, R});

    // Distractors first; the target is painted last so class 1 is always a
    // single intact ellipse.
    const int nd = cfg.min_distractors +
                   int(rng.uniform_int(uint64_t(cfg.max_distractors - cfg.min_distractors + 1)));
    for (int i = 0; i < nd; ++i) {
      Organ o;
      o.cx = rng.uniform(0.08, 0.92) * R;
      o.cy = rng.uniform(0.08, 0.92) * R;
      o.ax = rng.uniform(0.05, 0.16) * R;
      o.ay = rng.uniform(0.05, 0.16) * R;
      o.rot = rng.uniform(0.0, M_PI);
      o.cls = 2 + i;
      layout.organs.push_back(o);
      paint_ellipse(layout.label_map, o);
    }

    Organ t;
    t.cx = rng.uniform(0.32, 0.68) * R;
    t.cy = rng.uniform(0.32, 0.68) * R;
    t.ax = rng.uniform(0.16, 0.33) * R;
    t.ay = rng.uniform(0.16, 0.33) * R;
    t.rot = rng.uniform(0.0, M_PI);
    t.cls = 1;
    layout.organs.push_back(t);
    paint_ellipse(layout.label_map, t);

    int64_t target_px = 0;
    for (int64_t i = 0; i < layout.label_map.numel(); ++i)
      if (layout.label_map[i] == 1) ++target_px;
    const double frac = double(target_px) / double(R) / double(R);
    if (frac >= cfg.min_target_frac && frac <= cfg.max_target_frac) return layout;
  }
  fail(ErrorCode::LayoutInfeasible,
       "no layout satisfied target fraction [" + std::to_string(cfg.min_target_frac) + "," +
           std::to_string(cfg.max_target_frac) + "] after " + std::to_string(cfg.max_attempts) +
           " attempts");
}

PhantomSample render(const AnatomyLayout& layout, const ModalitySpec& spec, uint64_t noise_seed) {
  spec.validate();
  const int64_t R = layout.resolution;
  require(layout.label_map.rank() == 2 && layout.label_map.dim(0) == R, ErrorCode::ShapeMismatch,
          "layout label map");

  PhantomSample s;
  s.modality_id = spec.id;
  s.anatomy_seed = layout.seed;
  s.image = Tensor<float>::zeros({R, R});
  s.mask = Tensor<uint8_t>::zeros({R, R});

  Rng rng(hash_mix(noise_seed, kNoiseSalt));
  const double phase_x = rng.uniform();
  const double phase_y = rng.uniform();

  for (int64_t y = 0; y < R; ++y) {
    for (int64_t x = 0; x < R; ++x) {
      const uint8_t cls = layout.label_map[y * R + x];
      require(cls < spec.lut.size(), ErrorCode::InvalidConfig,
              "modality lut does not cover class " + std::to_string(int(cls)));
      // Texture and additive noise are drawn for every pixel regardless of
      // scale so the stream layout is independent of the spec values.
      const double texture = rng.gaussian();
      const double noise = rng.gaussian();
      const double base = spec.lut[cls].mean + spec.lut[cls].std * texture;
      const double bias =
          1.0 + spec.bias_amplitude *
                    std::sin(2.0 * M_PI * (spec.bias_freq * (double(x) + 0.5) / double(R) + phase_x)) *
                    std::sin(2.0 * M_PI * (spec.bias_freq * (double(y) + 0.5) / double(R) + phase_y));
      const double v = apply_contrast(spec.curve, spec.gamma, base * bias + spec.noise_sigma * noise);
      s.image[y * R + x] = float(std::clamp(v, 0.0, 1.0));
      s.mask[y * R + x] = cls == 1 ? 1 : 0;
    }
  }
  return s;
}

std::vector<int> assign_folds(const std::vector<int64_t>& anatomy_seeds) {
  std::vector<size_t> order(anatomy_seeds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const uint64_t ha = splitmix64(uint64_t(anatomy_seeds[a]));
    const uint64_t hb = splitmix64(uint64_t(anatomy_seeds[b]));
    return ha != hb ? ha < hb : anatomy_seeds[a] < anatomy_seeds[b];
  });
  std::vector<int> folds(anatomy_seeds.size());
  for (size_t rank = 0; rank < order.size(); ++rank)
    folds[order[rank]] = int(rank % kNumFolds);
  return folds;
}

DomainRole role_of(int64_t anatomy_seed, const std::vector<int64_t>& fold_seeds) {
  std::vector<int64_t> sorted = fold_seeds;
  std::sort(sorted.begin(), sorted.end(), [](int64_t a, int64_t b) {
    const uint64_t ha = splitmix64(uint64_t(a) ^ kRoleSalt);
    const uint64_t hb = splitmix64(uint64_t(b) ^ kRoleSalt);
    return ha != hb ? ha < hb : a < b;
  });
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] == anatomy_seed) return i < sorted.size() / 2 ? DomainRole::Source : DomainRole::Target;
  }
  fail(ErrorCode::InvalidConfig, "anatomy seed not in fold: " + std::to_string(anatomy_seed));
}

std::string DatasetManifest::json() const {
  nlohmann::ordered_json j;
  j["version"] = version;
  j["samples"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    j["samples"].push_back({{"file", e.file},
                            {"modality_id", e.modality_id},
                            {"anatomy_seed", e.anatomy_seed},
                            {"fold", e.fold}});
  }
  j["folds"] = nlohmann::ordered_json::array();
  for (const auto& f : folds) j["folds"].push_back(f);
  return j.dump(2) + "\n";
}

void save_sample(const std::string& path, const PhantomSample& s) {
  require(s.image.rank() == 2 && s.has_mask(), ErrorCode::InvalidConfig,
          "sample must carry image and mask");
  const int64_t H = s.image.dim(0), W = s.image.dim(1);
  BinWriter w(path);
  w.bytes(kMagic, 4);
  w.u32(kSampleFormatVersion);
  w.u32(uint32_t(H));
  w.u32(uint32_t(W));
  w.u32(uint32_t(s.modality_id));
  w.i64(s.anatomy_seed);
  w.u32(0);  // reserved; pads the header to 32 bytes
  w.f32s(s.image.data(), size_t(H * W));
  w.bytes(s.mask.data(), size_t(H * W));
  require(w.out.good(), ErrorCode::IoError, "write failed: " + path);
}

PhantomSample load_sample(const std::string& path, bool with_mask) {
  BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  require(std::memcmp(magic, kMagic, 4) == 0, ErrorCode::IoError, "bad magic: " + path);
  const uint32_t version = r.u32();
  require(version == kSampleFormatVersion, ErrorCode::VersionMismatch,
          "sample format version " + std::to_string(version) + " in " + path);
  const int64_t H = r.u32();
  const int64_t W = r.u32();
  PhantomSample s;
  s.modality_id = int(r.u32());
  s.anatomy_seed = r.i64();
  r.u32();  // reserved
  s.image = Tensor<float>::zeros({H, W});
  r.f32s(s.image.data(), size_t(H * W));
  if (with_mask) {
    s.mask = Tensor<uint8_t>::zeros({H, W});
    r.bytes(s.mask.data(), size_t(H * W));
  }
  return s;
}

DatasetManifest build_corpus(const CorpusConfig& cfg) {
  require(cfg.n_anatomies >= 50, ErrorCode::AnatomiesTooFew,
          "need at least 50 anatomies, got " + std::to_string(cfg.n_anatomies));
  require(cfg.specs.size() >= 2, ErrorCode::InvalidConfig, "need at least 2 modality specs");
  for (const auto& s : cfg.specs) s.validate();
  for (size_t i = 0; i < cfg.specs.size(); ++i) {
    for (size_t j = i + 1; j < cfg.specs.size(); ++j) {
      const auto& a = cfg.specs[i];
      const auto& b = cfg.specs[j];
      bool differ = a.curve != b.curve || (a.curve == ContrastCurve::Gamma && a.gamma != b.gamma);
      if (!differ && a.lut.size() == b.lut.size()) {
        for (size_t c = 0; c < a.lut.size(); ++c)
          if (a.lut[c].mean != b.lut[c].mean || a.lut[c].std != b.lut[c].std) differ = true;
      } else if (a.lut.size() != b.lut.size()) {
        differ = true;
      }
      require(differ, ErrorCode::InvalidConfig,
              "modality specs " + std::to_string(a.id) + " and " + std::to_string(b.id) +
                  " are indistinguishable");
    }
  }

  std::vector<int64_t> seeds(size_t(cfg.n_anatomies));
  for (int i = 0; i < cfg.n_anatomies; ++i) seeds[size_t(i)] = i;
  const std::vector<int> folds = assign_folds(seeds);

  DatasetManifest m;
  m.root = cfg.root;
  for (size_t i = 0; i < seeds.size(); ++i) {
    for (const auto& spec : cfg.specs) {
      ManifestEntry e;
      e.anatomy_seed = seeds[i];
      e.modality_id = spec.id;
      e.fold = folds[i];
      e.file = "samples/" + std::to_string(e.anatomy_seed) + "_" + std::to_string(e.modality_id) +
               ".phm";
      m.entries.push_back(e);
    }
    m.folds[size_t(folds[i])].push_back(seeds[i]);
  }
  std::sort(m.entries.begin(), m.entries.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
    return a.anatomy_seed != b.anatomy_seed ? a.anatomy_seed < b.anatomy_seed
                                            : a.modality_id < b.modality_id;
  });
  for (auto& f : m.folds) std::sort(f.begin(), f.end());

  std::error_code ec;
  fs::create_directories(fs::path(cfg.root) / "samples", ec);
  require(!ec, ErrorCode::IoError, "cannot create " + cfg.root + ": " + ec.message());

  for (size_t i = 0; i < seeds.size(); ++i) {
    const AnatomyLayout layout = generate_layout(seeds[i], cfg.layout);
    for (const auto& spec : cfg.specs) {
      PhantomSample s = render(layout, spec, noise_seed_for(cfg.seed, seeds[i], spec.id));
      const std::string path = (fs::path(cfg.root) / "samples" /
                                (std::to_string(seeds[i]) + "_" + std::to_string(spec.id) + ".phm"))
                                   .string();
      save_sample(path, s);
    }
  }

  // Manifest last: its presence marks a complete corpus.
  const std::string mpath = (fs::path(cfg.root) / "manifest.json").string();
  std::ofstream out(mpath, std::ios::binary);
  require(out.good(), ErrorCode::IoError, "cannot write " + mpath);
  out << m.json();
  require(out.good(), ErrorCode::IoError, "write failed: " + mpath);
  return m;
}

DatasetManifest load_manifest(const std::string& root) {
  const std::string mpath = (fs::path(root) / "manifest.json").string();
  std::ifstream in(mpath, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open " + mpath);
  nlohmann::json j;
  in >> j;
  DatasetManifest m;
  m.root = root;
  m.version = j.at("version").get<uint32_t>();
  require(m.version == kManifestVersion, ErrorCode::VersionMismatch,
          "manifest version " + std::to_string(m.version));
  for (const auto& e : j.at("samples")) {
    ManifestEntry me;
    me.file = e.at("file").get<std::string>();
    me.modality_id = e.at("modality_id").get<int>();
    me.anatomy_seed = e.at("anatomy_seed").get<int64_t>();
    me.fold = e.at("fold").get<int>();
    require(me.fold >= 0 && me.fold < kNumFolds, ErrorCode::IoError, "fold out of range");
    m.entries.push_back(me);
  }
  const auto& folds = j.at("folds");
  require(folds.size() == kNumFolds, ErrorCode::IoError, "manifest must carry 5 folds");
  for (int f = 0; f < kNumFolds; ++f)
    m.folds[size_t(f)] = folds[size_t(f)].get<std::vector<int64_t>>();
  return m;
}

Experiment experiment_from(const std::string& name) {
  if (name == "da" || name == "DA") return Experiment::DA;
  if (name == "dal" || name == "DAL") return Experiment::DAL;
  if (name == "joint") return Experiment::Joint;
  fail(ErrorCode::UnknownExperiment, name);
}

const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::DA: return "da";
    case Experiment::DAL: return "dal";
    case Experiment::Joint: return "joint";
  }
  return "?";
}

void SplitAudit::record(const PhantomSample& s) {
  anatomy_reads.push_back(s.anatomy_seed);
  if (s.has_mask()) {
    if (mask_loads_by_modality.size() <= size_t(s.modality_id))
      mask_loads_by_modality.resize(size_t(s.modality_id) + 1, 0);
    ++mask_loads_by_modality[size_t(s.modality_id)];
  }
}

std::vector<PhantomSample> load_split(const DatasetManifest& m, SplitRole role, Experiment exp,
                                      int fold, const SplitOptions& opt, SplitAudit* audit) {
  require(fold >= 0 && fold < kNumFolds, ErrorCode::InvalidConfig, "fold out of range");

  std::vector<int> modality_ids;
  for (const auto& e : m.entries)
    if (std::find(modality_ids.begin(), modality_ids.end(), e.modality_id) == modality_ids.end())
      modality_ids.push_back(e.modality_id);
  std::sort(modality_ids.begin(), modality_ids.end());
  require(std::find(modality_ids.begin(), modality_ids.end(), opt.source_modality) !=
                  modality_ids.end() &&
              std::find(modality_ids.begin(), modality_ids.end(), opt.target_modality) !=
                  modality_ids.end(),
          ErrorCode::InvalidConfig, "source/target modality not in corpus");

  auto role_for = [&](const ManifestEntry& e) {
    return role_of(e.anatomy_seed, m.folds[size_t(e.fold)]);
  };

  auto wants_modality = [&](int mod) {
    if (role == SplitRole::Source) return mod == opt.source_modality;
    if (exp == Experiment::DAL) {
      if (role == SplitRole::Target || role == SplitRole::Test) return mod != opt.source_modality;
    }
    if (exp == Experiment::Joint && role == SplitRole::Test)
      return mod == opt.source_modality || mod == opt.target_modality;
    return mod == opt.target_modality;
  };

  std::vector<PhantomSample> out;
  for (const auto& e : m.entries) {
    const bool in_test_fold = e.fold == fold;
    if (role == SplitRole::Test ? !in_test_fold : in_test_fold) continue;
    if (!wants_modality(e.modality_id)) continue;

    const DomainRole dr = role_for(e);
    bool keep = false;
    bool with_mask = true;
    switch (role) {
      case SplitRole::Source:
        keep = dr == DomainRole::Source;
        break;
      case SplitRole::Target:
        keep = dr == DomainRole::Target;
        // Unsupervised target regimes physically withhold the masks.
        with_mask = exp == Experiment::Joint;
        break;
      case SplitRole::Test:
        if (exp == Experiment::Joint)
          keep = (e.modality_id == opt.source_modality && dr == DomainRole::Source) ||
                 (e.modality_id == opt.target_modality && dr == DomainRole::Target);
        else
          keep = dr == DomainRole::Target;
        break;
    }
    if (!keep) continue;

    const std::string path = (fs::path(m.root) / e.file).string();
    PhantomSample s = load_sample(path, with_mask);
    if (audit) audit->record(s);
    if (role == SplitRole::Target && exp == Experiment::DAL) {
      s.modality_id = -1;  // domain-agnostic regime: no per-sample domain label
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string manifest_sha256(const DatasetManifest& m) { return sha256_hex(m.json()); }

}  // namespace dalace::phantom
