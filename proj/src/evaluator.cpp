#include "dalace/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace dalace::eval {

using phantom::DomainRole;
using phantom::SplitRole;

double dice(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth) {
  check_same_shape(pred, truth, "dice");
  int64_t a = 0, b = 0, inter = 0;
  const uint8_t* pp = pred.data();
  const uint8_t* pt = truth.data();
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool ia = pp[i] != 0, ib = pt[i] != 0;
    a += ia;
    b += ib;
    inter += (ia && ib);
  }
  if (a + b == 0) return 1.0;  // both empty
  return 2.0 * double(inter) / double(a + b);
}

namespace {

VarPtr<float> image_var(const Tensor<float>& image) {
  require(image.rank() == 2, ErrorCode::ShapeMismatch, "expected a [H,W] image");
  return constant(image.reshaped({1, 1, image.dim(0), image.dim(1)}).clone());
}

Tensor<uint8_t> argmax_mask(const Tensor<float>& probs) {
  // probs: [1,C,H,W] -> [H,W] argmax (binary for C == 2)
  const int64_t C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  Tensor<uint8_t> mask({H, W});
  const float* p = probs.data();
  for (int64_t i = 0; i < H * W; ++i) {
    int best = 0;
    float bv = p[i];
    for (int64_t c = 1; c < C; ++c)
      if (p[c * H * W + i] > bv) {
        bv = p[c * H * W + i];
        best = int(c);
      }
    mask[i] = uint8_t(best);
  }
  return mask;
}

}  // namespace

Tensor<float> agnostic_image(ModelState<float>& state, const Tensor<float>& image, Side side) {
  ParamFreeze freeze;
  auto x = image_var(image);
  auto a = anatomy_encode(state, side, x, /*training=*/false);
  auto agn = generate_agnostic(state, side, a);
  return agn->val.reshaped({image.dim(0), image.dim(1)}).clone();
}

Tensor<uint8_t> predict_mask(ModelState<float>& state, const Tensor<float>& image, Side side,
                             bool agnostic_route) {
  ParamFreeze freeze;
  auto x = image_var(image);
  VarPtr<float> seg_in = x;
  if (agnostic_route) {
    auto a = anatomy_encode(state, side, x, /*training=*/false);
    seg_in = generate_agnostic(state, side, a);
  }
  auto probs = segment(state, seg_in);
  return argmax_mask(probs->val);
}

Tensor<float> transfer_modality(ModelState<float>& state, const Tensor<float>& content_image,
                                Side content_side, const Tensor<float>& style_image,
                                Side style_side) {
  ParamFreeze freeze;
  auto content = image_var(content_image);
  auto style = image_var(style_image);
  auto a = anatomy_encode(state, content_side, content, /*training=*/false);
  auto m = modality_encode(state, style_side, style);
  auto out = generate(state, style_side, a, m);
  return out->val.reshaped({content_image.dim(0), content_image.dim(1)}).clone();
}

std::vector<ReferenceEntry> reference_scores(Experiment exp) {
  switch (exp) {
    case Experiment::DA:
      return {{"lowerbound", 0.260, 0.072}, {"upperbound", 0.869, 0.044},
              {"cyclegan", 0.721, 0.049},   {"td-gan", 0.793, 0.066},
              {"dadr", 0.806, 0.035},       {"dalace", 0.847, 0.041}};
    case Experiment::DAL:
      return {{"lowerbound", 0.228, 0.130}, {"upperbound", 0.823, 0.057},
              {"cyclegan", 0.522, 0.064},   {"td-gan", 0.719, 0.089},
              {"dadr", 0.742, 0.045},       {"dalace", 0.794, 0.044}};
    case Experiment::Joint:
      return {{"dalace_ct", 0.911, 0.013},
              {"dalace_mr", 0.907, 0.049},
              {"unet_ct", 0.901, 0.020},
              {"unet_mr", 0.869, 0.044},
              {"dadr_ct", 0.912, 0.012},
              {"dadr_mr", 0.891, 0.040}};
  }
  return {};
}

std::vector<ReferenceEntry> reference_ablation_scores() {
  return {{"apm_only_da", 0.776, 0.078},  {"apm_only_dal", 0.702, 0.132},
          {"dam_only_da", 0.806, 0.035},  {"dam_only_dal", 0.742, 0.041},
          {"full_da", 0.847, 0.041},      {"full_dal", 0.794, 0.044},
          {"no_disentangle_da", 0.793, 0.0}, {"no_disentangle_dal", 0.719, 0.0}};
}

Side inference_side(int modality_id, const phantom::SplitOptions& opt) {
  return modality_id == opt.source_modality ? Side::Source : Side::Target;
}

namespace {

struct MeanStd {
  double mean = 0.0, stdev = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= double(xs.size());
  for (double x : xs) r.stdev += (x - r.mean) * (x - r.mean);
  r.stdev = std::sqrt(r.stdev / double(xs.size()));
  return r;
}

FoldScore score_samples(ModelState<float>& state, const std::vector<PhantomSample>& test,
                        const phantom::SplitOptions& opt, bool agnostic_route, int fold) {
  FoldScore fs;
  fs.fold = fold;
  fs.n_samples = int(test.size());
  std::vector<double> all;
  std::map<int, std::vector<double>> per_mod;
  for (const auto& s : test) {
    const Side side = inference_side(s.modality_id, opt);
    const auto pred = predict_mask(state, s.image, side, agnostic_route);
    const double d = dice(pred, s.mask);
    all.push_back(d);
    per_mod[s.modality_id].push_back(d);
  }
  const auto ms = mean_std(all);
  fs.mean = ms.mean;
  fs.stdev = ms.stdev;
  for (auto& [mod, xs] : per_mod) fs.per_modality[mod] = mean_std(xs).mean;
  return fs;
}

void aggregate(EvalReport& rep) {
  std::vector<double> fold_means;
  std::map<int, std::vector<double>> per_mod;
  for (const auto& f : rep.folds) {
    fold_means.push_back(f.mean);
    for (auto& [mod, v] : f.per_modality) per_mod[mod].push_back(v);
  }
  const auto ms = mean_std(fold_means);
  rep.mean = ms.mean;
  rep.stdev = ms.stdev;
  for (auto& [mod, xs] : per_mod) rep.per_modality[mod] = mean_std(xs).mean;
}

void aggregate(BoundScore& b) {
  std::vector<double> means;
  for (const auto& f : b.folds) means.push_back(f.mean);
  const auto ms = mean_std(means);
  b.mean = ms.mean;
  b.stdev = ms.stdev;
}

// No anatomy seed read during training may sit in the test fold, and
// unsupervised regimes must never hand out a target-modality mask.
bool audit_clean(const phantom::SplitAudit& train_audit, const DatasetManifest& m, int fold,
                 Experiment exp, const phantom::SplitOptions& opt) {
  std::set<int64_t> test_fold(m.folds[size_t(fold)].begin(), m.folds[size_t(fold)].end());
  for (int64_t seed : train_audit.anatomy_reads)
    if (test_fold.count(seed)) return false;
  if (exp != Experiment::Joint) {
    for (size_t mod = 0; mod < train_audit.mask_loads_by_modality.size(); ++mod) {
      if (int(mod) != opt.source_modality && train_audit.mask_loads_by_modality[mod] > 0)
        return false;
    }
  }
  return true;
}

}  // namespace

FoldScore score_fold(ModelState<float>& state, const DatasetManifest& m, Experiment exp, int fold,
                     const phantom::SplitOptions& opt, bool agnostic_route,
                     phantom::SplitAudit* audit) {
  const auto test = phantom::load_split(m, SplitRole::Test, exp, fold, opt, audit);
  require(!test.empty(), ErrorCode::InvalidConfig, "empty test split");
  return score_samples(state, test, opt, agnostic_route, fold);
}

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::NoDisentangle: return "no_disentangle";
    case Ablation::NoAPM: return "no_apm";
    case Ablation::NoDAM: return "no_dam";
  }
  return "?";
}

Ablation ablation_from(const std::string& name) {
  if (name == "no_disentangle" || name == "disentangle") return Ablation::NoDisentangle;
  if (name == "no_apm" || name == "apm") return Ablation::NoAPM;
  if (name == "no_dam" || name == "dam") return Ablation::NoDAM;
  fail(ErrorCode::InvalidConfig, "unknown ablation: " + name);
}

std::string EvalReport::json() const {
  nlohmann::ordered_json j;
  j["experiment"] = experiment;
  j["dsc_mean"] = mean;
  j["dsc_std"] = stdev;
  j["folds"] = nlohmann::ordered_json::array();
  for (const auto& f : folds) {
    nlohmann::ordered_json jf{{"fold", f.fold},
                              {"dsc_mean", f.mean},
                              {"dsc_std", f.stdev},
                              {"n_samples", f.n_samples}};
    for (auto& [mod, v] : f.per_modality) jf["per_modality"][std::to_string(mod)] = v;
    j["folds"].push_back(jf);
  }
  for (auto& [mod, v] : per_modality) j["per_modality"][std::to_string(mod)] = v;
  auto bound_json = [](const BoundScore& b) {
    nlohmann::ordered_json jb{{"dsc_mean", b.mean}, {"dsc_std", b.stdev}};
    jb["folds"] = nlohmann::ordered_json::array();
    for (const auto& f : b.folds)
      jb["folds"].push_back({{"fold", f.fold}, {"dsc_mean", f.mean}, {"dsc_std", f.stdev}});
    return jb;
  };
  if (lowerbound) j["lowerbound"] = bound_json(*lowerbound);
  if (upperbound) j["upperbound"] = bound_json(*upperbound);
  j["reference_full_scale"] = nlohmann::ordered_json::array();
  for (const auto& r : reference)
    j["reference_full_scale"].push_back({{"method", r.label}, {"dsc", r.mean}, {"std", r.stdev}});
  j["reference_note"] =
      "full-scale published results attached for context; not desk-scale targets";
  if (disentangle) {
    nlohmann::ordered_json jd;
    for (auto& [mod, v] : disentangle->dsc_per_modality)
      jd["dsc_per_modality"][std::to_string(mod)] = v;
    jd["raw_pairwise_l1"] = disentangle->raw_pairwise_l1;
    jd["agnostic_pairwise_l1"] = disentangle->agnostic_pairwise_l1;
    jd["erasure_ratio"] = disentangle->erasure_ratio;
    jd["transfer_hist_distance"] = disentangle->transfer_hist_distance;
    jd["transfer_dsc"] = disentangle->transfer_dsc;
    j["disentanglement"] = jd;
  }
  j["manifest_hash"] = manifest_hash;
  j["audit_ok"] = audit_ok;
  if (!config_json.empty()) j["config"] = nlohmann::json::parse(config_json);
  return j.dump(2) + "\n";
}

std::string EvalReport::csv() const {
  std::ostringstream os;
  os << "method,DSC,std\n";
  os.precision(4);
  os << std::fixed;
  if (lowerbound) os << "lowerbound," << lowerbound->mean << "," << lowerbound->stdev << "\n";
  if (upperbound) os << "upperbound," << upperbound->mean << "," << upperbound->stdev << "\n";
  os << experiment << "," << mean << "," << stdev << "\n";
  return os.str();
}

void EvalReport::save(const std::string& dir, const std::string& stem) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::IoError, "cannot create " + dir);
  std::ofstream js((fs::path(dir) / (stem + ".json")).string(), std::ios::binary);
  require(js.good(), ErrorCode::IoError, "cannot write report json");
  js << json();
  std::ofstream cs((fs::path(dir) / (stem + ".csv")).string(), std::ios::binary);
  require(cs.good(), ErrorCode::IoError, "cannot write report csv");
  cs << csv();
}

EvalReport run_protocol(Experiment exp, const ProtocolConfig& cfg, const DatasetManifest& m) {
  EvalReport rep;
  rep.experiment = phantom::experiment_name(exp);
  if (cfg.train.disable_apm || cfg.train.disable_dam || cfg.train.disable_disentangle) {
    std::string tag = "ablation:";
    if (cfg.train.disable_disentangle) tag += "no_disentangle";
    else if (cfg.train.disable_apm && cfg.train.disable_dam) tag += "no_apm_no_dam";
    else if (cfg.train.disable_apm) tag += "no_apm";
    else tag += "no_dam";
    rep.experiment = tag + ":" + rep.experiment;
  }
  rep.manifest_hash = phantom::manifest_sha256(m);
  rep.reference = reference_scores(exp);

  BoundScore lower, upper;
  const bool agnostic_route = !cfg.train.disable_disentangle;

  for (int fold : cfg.folds) {
    trainer::TrainConfig tc = cfg.train;
    tc.experiment = exp == Experiment::Joint ? Experiment::Joint : exp;
    // Fold-distinct but seed-matched runs: one base seed, mixed with the fold.
    tc.seed = hash_mix(cfg.train.seed, uint64_t(fold));

    std::string fold_dir;
    if (!cfg.work_dir.empty()) {
      fold_dir = (fs::path(cfg.work_dir) / (rep.experiment + "_fold" + std::to_string(fold)))
                     .string();
      // Replace ':' so the path stays shell-friendly.
      std::replace(fold_dir.begin(), fold_dir.end(), ':', '_');
    }

    phantom::SplitAudit train_audit;
    auto result = trainer::train(tc, m, fold, fold_dir, "", &train_audit);
    rep.config_json = result.log.config_json;

    FoldScore fs = score_fold(result.state, m, exp, fold, tc.split, agnostic_route);
    rep.folds.push_back(fs);
    rep.audit_ok = rep.audit_ok && audit_clean(train_audit, m, fold, exp, tc.split);

    if (cfg.with_disentangle_stats && fold == cfg.folds.front()) {
      rep.disentangle =
          disentanglement_stats(result.state, m, fold, tc.split, agnostic_route);
    }

    if (cfg.run_baselines) {
      trainer::BaselineConfig bc = cfg.baseline;
      bc.arch = cfg.train.arch;
      bc.seed = hash_mix(cfg.train.seed ^ 0x10ull, uint64_t(fold));

      // Lowerbound: supervised on raw source images, tested on the raw
      // target-side test split. Its training never touches target data.
      phantom::SplitAudit lb_audit;
      auto src = phantom::load_split(m, SplitRole::Source, exp, fold, tc.split, &lb_audit);
      auto lb_model = trainer::train_segmenter_baseline(bc, src);
      FoldScore lb = score_fold(lb_model, m, exp, fold, tc.split, /*agnostic_route=*/false);
      lower.folds.push_back(lb);
      bool lb_ok = true;
      for (size_t mod = 0; mod < lb_audit.mask_loads_by_modality.size(); ++mod)
        if (int(mod) != tc.split.source_modality && lb_audit.mask_loads_by_modality[mod] > 0)
          lb_ok = false;
      rep.audit_ok = rep.audit_ok && lb_ok;

      // Upperbound: supervised on the target-side training anatomies with
      // their masks (the joint loader exposes them), tested the same way.
      auto tgt = phantom::load_split(m, SplitRole::Target, Experiment::Joint, fold, tc.split);
      bc.seed = hash_mix(cfg.train.seed ^ 0x20ull, uint64_t(fold));
      auto ub_model = trainer::train_segmenter_baseline(bc, tgt);
      FoldScore ub;
      if (exp == Experiment::Joint) {
        // Target-only supervised comparison: evaluate on the target-modality
        // half of the joint test split.
        auto test = phantom::load_split(m, SplitRole::Test, Experiment::DA, fold, tc.split);
        ub = score_samples(ub_model, test, tc.split, false, fold);
      } else {
        auto test = phantom::load_split(m, SplitRole::Test, exp, fold, tc.split);
        ub = score_samples(ub_model, test, tc.split, false, fold);
      }
      upper.folds.push_back(ub);
    }
  }

  aggregate(rep);
  if (cfg.run_baselines) {
    aggregate(lower);
    aggregate(upper);
    rep.lowerbound = lower;
    rep.upperbound = upper;
  }
  return rep;
}

AblationReport run_ablation(Ablation which, const ProtocolConfig& cfg, const DatasetManifest& m) {
  const Experiment exp = cfg.train.experiment;
  AblationReport rep;

  ProtocolConfig full_cfg = cfg;
  full_cfg.train.disable_apm = false;
  full_cfg.train.disable_dam = false;
  full_cfg.train.disable_disentangle = false;
  rep.full = run_protocol(exp, full_cfg, m);

  ProtocolConfig ab_cfg = cfg;
  ab_cfg.run_baselines = false;
  switch (which) {
    case Ablation::NoDisentangle: ab_cfg.train.disable_disentangle = true; break;
    case Ablation::NoAPM: ab_cfg.train.disable_apm = true; break;
    case Ablation::NoDAM: ab_cfg.train.disable_dam = true; break;
  }
  rep.ablated = run_protocol(exp, ab_cfg, m);
  rep.ablated.reference = reference_ablation_scores();
  return rep;
}

namespace {

std::vector<double> intensity_histogram(const Tensor<float>& img, int bins = 32) {
  std::vector<double> h(size_t(bins), 0.0);
  for (int64_t i = 0; i < img.numel(); ++i) {
    int b = int(std::clamp(double(img[i]), 0.0, 1.0) * bins);
    if (b == bins) b = bins - 1;
    h[size_t(b)] += 1.0;
  }
  for (auto& v : h) v /= double(img.numel());
  return h;
}

double hist_l1(const Tensor<float>& a, const Tensor<float>& b) {
  const auto ha = intensity_histogram(a), hb = intensity_histogram(b);
  double d = 0.0;
  for (size_t i = 0; i < ha.size(); ++i) d += std::abs(ha[i] - hb[i]);
  return d;
}

double image_l1(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(double(a[i]) - double(b[i]));
  return s / double(a.numel());
}

}  // namespace

DisentangleStats disentanglement_stats(ModelState<float>& state, const DatasetManifest& m,
                                       int fold, const phantom::SplitOptions& opt,
                                       bool agnostic_route) {
  DisentangleStats st;

  // Test-fold target-role anatomies rendered in every modality.
  std::vector<int> modalities;
  for (const auto& e : m.entries)
    if (std::find(modalities.begin(), modalities.end(), e.modality_id) == modalities.end())
      modalities.push_back(e.modality_id);
  std::sort(modalities.begin(), modalities.end());

  const auto& fold_seeds = m.folds[size_t(fold)];
  std::vector<int64_t> anatomies;
  for (int64_t seed : fold_seeds)
    if (phantom::role_of(seed, fold_seeds) == DomainRole::Target) anatomies.push_back(seed);
  require(!anatomies.empty(), ErrorCode::InvalidConfig, "no target-role anatomies in fold");

  auto sample_path = [&](int64_t seed, int mod) {
    return (fs::path(m.root) / "samples" /
            (std::to_string(seed) + "_" + std::to_string(mod) + ".phm"))
        .string();
  };

  std::map<int, std::vector<double>> dsc_per_mod;
  double raw_sum = 0.0, agn_sum = 0.0;
  int64_t pair_count = 0;

  for (int64_t seed : anatomies) {
    std::vector<Tensor<float>> raws, agns;
    for (int mod : modalities) {
      const auto s = phantom::load_sample(sample_path(seed, mod));
      const Side side = inference_side(mod, opt);
      dsc_per_mod[mod].push_back(dice(predict_mask(state, s.image, side, agnostic_route), s.mask));
      raws.push_back(s.image);
      agns.push_back(agnostic_route ? agnostic_image(state, s.image, side) : s.image);
    }
    for (size_t i = 0; i < raws.size(); ++i) {
      for (size_t j = i + 1; j < raws.size(); ++j) {
        raw_sum += image_l1(raws[i], raws[j]);
        agn_sum += image_l1(agns[i], agns[j]);
        ++pair_count;
      }
    }
  }

  for (auto& [mod, xs] : dsc_per_mod) {
    double s = 0.0;
    for (double x : xs) s += x;
    st.dsc_per_modality[mod] = s / double(xs.size());
  }
  st.raw_pairwise_l1 = raw_sum / double(pair_count);
  st.agnostic_pairwise_l1 = agn_sum / double(pair_count);
  st.erasure_ratio =
      st.raw_pairwise_l1 > 0 ? st.agnostic_pairwise_l1 / st.raw_pairwise_l1 : 0.0;

  // Style swap: content from the source modality, style from each target
  // modality of the next anatomy (unpaired), scored against the content mask.
  double hist_sum = 0.0, tdsc_sum = 0.0;
  int64_t t_count = 0;
  for (size_t ai = 0; ai < anatomies.size(); ++ai) {
    const auto content = phantom::load_sample(sample_path(anatomies[ai], opt.source_modality));
    const auto style_seed = anatomies[(ai + 1) % anatomies.size()];
    for (int mod : modalities) {
      if (mod == opt.source_modality) continue;
      const auto style = phantom::load_sample(sample_path(style_seed, mod), /*with_mask=*/false);
      const auto transferred = transfer_modality(state, content.image, Side::Source, style.image,
                                                 inference_side(mod, opt));
      hist_sum += hist_l1(content.image, transferred);
      tdsc_sum += dice(predict_mask(state, transferred, inference_side(mod, opt), agnostic_route),
                       content.mask);
      ++t_count;
    }
  }
  st.transfer_hist_distance = hist_sum / double(t_count);
  st.transfer_dsc = tdsc_sum / double(t_count);
  return st;
}

}  // namespace dalace::eval
