#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dalace/trainer.hpp"

namespace dalace::eval {

using nets::ModelState;
using nets::Side;
using phantom::DatasetManifest;
using phantom::Experiment;
using phantom::PhantomSample;

// Dice similarity coefficient 2|A∩B| / (|A|+|B|). Both masks empty -> 1,
// exactly one empty -> 0.
double dice(const Tensor<uint8_t>& pred, const Tensor<uint8_t>& truth);

// Inference path: encode with the given domain head, render the
// domain-agnostic image, segment, argmax. The signature deliberately takes
// no modality label. With agnostic_route=false the raw image goes straight
// into the segmenter (baselines and the no-disentanglement ablation).
Tensor<uint8_t> predict_mask(ModelState<float>& state, const Tensor<float>& image, Side side,
                             bool agnostic_route = true);

// Anatomy from the content image, rendering from the style image; generation
// runs on the style image's domain head.
Tensor<float> transfer_modality(ModelState<float>& state, const Tensor<float>& content_image,
                                Side content_side, const Tensor<float>& style_image,
                                Side style_side);

// Domain-agnostic rendering of an arbitrary image (value only).
Tensor<float> agnostic_image(ModelState<float>& state, const Tensor<float>& image, Side side);

// --- reports ----------------------------------------------------------------

struct ReferenceEntry {
  std::string label;
  double mean = 0.0;
  double stdev = 0.0;
};

// Full-scale reference results reported by the original DALACE study;
// attached to reports for context, never asserted as desk-scale targets.
std::vector<ReferenceEntry> reference_scores(Experiment exp);
std::vector<ReferenceEntry> reference_ablation_scores();

struct FoldScore {
  int fold = 0;
  double mean = 0.0;
  double stdev = 0.0;
  int n_samples = 0;
  std::map<int, double> per_modality;  // modality id -> mean DSC
};

struct BoundScore {
  std::vector<FoldScore> folds;
  double mean = 0.0;
  double stdev = 0.0;
};

struct DisentangleStats {
  std::map<int, double> dsc_per_modality;  // anatomy preservation per modality
  double raw_pairwise_l1 = 0.0;       // same anatomy across modalities, raw
  double agnostic_pairwise_l1 = 0.0;  // same anatomy across modalities, agnostic
  double erasure_ratio = 0.0;         // agnostic / raw
  double transfer_hist_distance = 0.0;  // 32-bin L1, content vs transferred
  double transfer_dsc = 0.0;  // predict(transfer) vs content mask (known-mask oracle)
};

struct EvalReport {
  std::string experiment;  // "da" | "dal" | "joint" | "ablation:..."
  std::vector<FoldScore> folds;
  double mean = 0.0;
  double stdev = 0.0;
  std::map<int, double> per_modality;
  std::optional<BoundScore> lowerbound;
  std::optional<BoundScore> upperbound;
  std::vector<ReferenceEntry> reference;
  std::optional<DisentangleStats> disentangle;
  std::string manifest_hash;
  std::string config_json;
  bool audit_ok = true;  // no test-fold read during training, no target-mask
                         // read in unsupervised regimes

  std::string json() const;
  std::string csv() const;  // "method,DSC,std" table
  void save(const std::string& dir, const std::string& stem) const;
};

// --- protocols ----------------------------------------------------------------

struct ProtocolConfig {
  trainer::TrainConfig train;
  trainer::BaselineConfig baseline;
  std::vector<int> folds = {0, 1, 2, 3, 4};
  std::string work_dir;  // per-fold checkpoints/logs when non-empty
  bool run_baselines = true;
  bool with_disentangle_stats = false;
};

// 5-fold cross-validation of the full model plus the source-only lowerbound
// and target-supervised upperbound.
EvalReport run_protocol(Experiment exp, const ProtocolConfig& cfg, const DatasetManifest& m);

enum class Ablation { NoDisentangle, NoAPM, NoDAM };

const char* ablation_name(Ablation a);
Ablation ablation_from(const std::string& name);

struct AblationReport {
  EvalReport full;     // paired full-model run, matched seeds/folds
  EvalReport ablated;
};

AblationReport run_ablation(Ablation which, const ProtocolConfig& cfg, const DatasetManifest& m);

// Disentanglement statistics over the test fold of a trained model.
DisentangleStats disentanglement_stats(ModelState<float>& state, const DatasetManifest& m,
                                       int fold, const phantom::SplitOptions& opt,
                                       bool agnostic_route = true);

// Evaluate one trained state on its test split (used by the CLI and the
// acceptance suite to score existing checkpoints).
FoldScore score_fold(ModelState<float>& state, const DatasetManifest& m, Experiment exp, int fold,
                     const phantom::SplitOptions& opt, bool agnostic_route = true,
                     phantom::SplitAudit* audit = nullptr);

// Side used at inference for a sample of the given modality.
Side inference_side(int modality_id, const phantom::SplitOptions& opt);

}  // namespace dalace::eval
