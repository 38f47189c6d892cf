#pragma once

// Synthetic multi-modality phantom corpus: one 2-D "anatomy" (a set of
// ellipse organs, class 1 being the segmentation target) rendered under K
// modality specs that differ in intensity mapping, bias field, noise and
// contrast curve. Ground truth is known for every modality, which is what
// makes the cross-modality experiments fully scoreable.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dalace/tensor.hpp"

namespace dalace::phantom {

struct Organ {
  double cx, cy;    // center, pixel units
  double ax, ay;    // half-axes, pixel units
  double rot;       // radians
  int cls;          // 1 = target, >= 2 distractor
};

struct AnatomyLayout {
  int64_t seed = 0;
  int resolution = 0;
  Tensor<uint8_t> label_map;  // [H,W], values 0..L
  std::vector<Organ> organs;
};

struct LayoutConfig {
  int resolution = 64;
  int min_distractors = 2;
  int max_distractors = 4;
  double min_target_frac = 0.05;
  double max_target_frac = 0.40;
  int max_attempts = 64;
};

enum class ContrastCurve { Identity, Gamma, SmoothStep, Inverted };

const char* contrast_curve_name(ContrastCurve c);
ContrastCurve contrast_curve_from(const std::string& name);
double apply_contrast(ContrastCurve curve, double gamma, double x);

struct ClassIntensity {
  double mean = 0.0;  // in [0,1]
  double std = 0.0;   // per-pixel texture scale
};

struct ModalitySpec {
  int id = 0;
  std::vector<ClassIntensity> lut;  // indexed by class
  double bias_amplitude = 0.0;      // in [0, 0.5]
  double bias_freq = 1.0;           // cycles across the image
  double noise_sigma = 0.0;
  ContrastCurve curve = ContrastCurve::Identity;
  double gamma = 1.0;

  void validate() const;
};

// Four defaults mirroring one source modality plus three visually distinct
// target renderings. Class means are placed so every pair of specs keeps a
// per-class gap above the default shift margin, while one distractor class
// in spec 1 deliberately lands on the target's intensity.
std::vector<ModalitySpec> default_modalities();
constexpr double kDefaultShiftMargin = 0.04;

struct PhantomSample {
  Tensor<float> image;   // [H,W], values in [0,1]
  Tensor<uint8_t> mask;  // [H,W] binary; empty when the split withholds it
  int modality_id = -1;
  int64_t anatomy_seed = -1;

  bool has_mask() const { return mask.defined(); }
};

struct ManifestEntry {
  std::string file;  // relative to the corpus root
  int modality_id = 0;
  int64_t anatomy_seed = 0;
  int fold = 0;
};

inline constexpr int kNumFolds = 5;
inline constexpr uint32_t kSampleFormatVersion = 1;
inline constexpr uint32_t kManifestVersion = 1;

struct DatasetManifest {
  std::string root;
  uint32_t version = kManifestVersion;
  std::vector<ManifestEntry> entries;
  std::array<std::vector<int64_t>, kNumFolds> folds;

  std::string json() const;  // deterministic byte layout
};

struct CorpusConfig {
  std::string root;
  int n_anatomies = 100;
  uint64_t seed = 1;
  LayoutConfig layout;
  std::vector<ModalitySpec> specs = default_modalities();
};

// --- operations -----------------------------------------------------------

AnatomyLayout generate_layout(int64_t seed, const LayoutConfig& cfg);

PhantomSample render(const AnatomyLayout& layout, const ModalitySpec& spec, uint64_t noise_seed);

// Render-noise seed used by build_corpus (the layout seed is the anatomy
// seed itself), exposed so tests can reproduce individual samples without
// building a corpus.
uint64_t noise_seed_for(uint64_t corpus_seed, int64_t anatomy_seed, int modality_id);

// Balanced deterministic fold assignment: anatomy seeds ranked by hash,
// rank mod 5. All renderings of one anatomy share its fold.
std::vector<int> assign_folds(const std::vector<int64_t>& anatomy_seeds);

// Unpaired-regime role split: within each fold, seeds ranked by a second
// hash; the first half plays the source domain, the rest the target domain.
enum class DomainRole { Source, Target };
DomainRole role_of(int64_t anatomy_seed, const std::vector<int64_t>& fold_seeds);

DatasetManifest build_corpus(const CorpusConfig& cfg);
DatasetManifest load_manifest(const std::string& root);

void save_sample(const std::string& path, const PhantomSample& s);
PhantomSample load_sample(const std::string& path, bool with_mask = true);

enum class SplitRole { Source, Target, Test };
enum class Experiment { DA, DAL, Joint };

Experiment experiment_from(const std::string& name);
const char* experiment_name(Experiment e);

struct SplitOptions {
  int source_modality = 0;
  int target_modality = 1;  // DA target; DAL mixes every non-source modality
};

// Read accounting for protocol audits: which anatomies were touched and how
// many mask-bearing samples were handed out per modality.
struct SplitAudit {
  std::vector<int64_t> anatomy_reads;
  std::vector<int64_t> mask_loads_by_modality;

  void record(const PhantomSample& s);
};

std::vector<PhantomSample> load_split(const DatasetManifest& m, SplitRole role, Experiment exp,
                                      int fold, const SplitOptions& opt = {},
                                      SplitAudit* audit = nullptr);

std::string manifest_sha256(const DatasetManifest& m);

}  // namespace dalace::phantom
