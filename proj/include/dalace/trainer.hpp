#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dalace/networks.hpp"
#include "dalace/objectives.hpp"
#include "dalace/phantom.hpp"

namespace dalace::trainer {

struct TrainConfig {
  nets::ArchConfig arch;
  int epochs = 200;  // 2600 at full scale
  int batch_size = 8;
  double lr_main = 1e-3;
  double lr_pair = 1e-4;
  objectives::LossWeights weights;
  uint64_t seed = 1;
  phantom::Experiment experiment = phantom::Experiment::DA;
  phantom::SplitOptions split;

  // Ablation switches (see the evaluator's ablation harness).
  bool disable_apm = false;
  bool disable_dam = false;
  bool disable_disentangle = false;

  // Relative weights of the supervision terms against L_recon; the paper
  // scale fixes only alpha/beta, so these default to 1.
  double w_adv_cross = 1.0;
  double w_ce = 1.0;
  double w_adv_pair = 1.0;

  bool saturating_gan = false;  // literal generator objective
  int checkpoint_every = 50;

  int warmup_epochs() const {
    if (weights.pair_warmup_epochs >= 0) return weights.pair_warmup_epochs;
    return int(std::lround(double(epochs) * 600.0 / 2600.0));
  }

  void validate() const {
    arch.validate();
    weights.validate();
    require(epochs > 0 && batch_size > 0, ErrorCode::InvalidConfig, "epochs/batch must be > 0");
    require(lr_main > 0.0 && lr_pair > 0.0, ErrorCode::InvalidConfig, "learning rates must be > 0");
    require(warmup_epochs() < epochs, ErrorCode::InvalidConfig,
            "pair warmup must be shorter than the run");
  }
};

struct EpochRecord {
  int64_t epoch = 0;
  objectives::LossBreakdown losses;
  double val_dsc = 0.0;
  double wall_seconds = 0.0;
  uint64_t seed = 0;
};

struct RunLog {
  std::vector<EpochRecord> records;
  std::string config_json;    // snapshot of the effective TrainConfig
  std::string manifest_hash;  // content hash of the dataset manifest

  std::string csv() const;
  void save(const std::string& csv_path, const std::string& config_path) const;
};

// One optimization step over one source batch and one target batch.
struct StepBatch {
  Tensor<float> src_images;  // [B,1,R,R]
  Tensor<uint8_t> src_masks; // [B,R,R]
  Tensor<float> tgt_images;  // [B,1,R,R]
  Tensor<uint8_t> tgt_masks; // joint experiment only
};

objectives::LossBreakdown train_step(nets::ModelState<float>& state, const StepBatch& batch,
                                     const TrainConfig& cfg, int64_t epoch);

struct TrainResult {
  nets::ModelState<float> state;
  RunLog log;
};

// Full run over one cross-validation fold. Checkpoints land in out_dir when
// given (final checkpoint name: "final.ckpt"); resume_from restarts an
// interrupted run from its last checkpoint.
TrainResult train(const TrainConfig& cfg, const phantom::DatasetManifest& manifest, int fold,
                  const std::string& out_dir = "",
                  const std::string& resume_from = "",
                  phantom::SplitAudit* audit = nullptr);

// Plain supervised segmenter on raw images, used for the lower/upper bound
// protocols. Only the U-Net inside the returned state is trained.
struct BaselineConfig {
  nets::ArchConfig arch;
  int epochs = 120;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 1;
};

nets::ModelState<float> train_segmenter_baseline(const BaselineConfig& cfg,
                                                 const std::vector<phantom::PhantomSample>& data);

// Composes a batch tensor pair from samples; exposed for tests.
Tensor<float> batch_images(const std::vector<phantom::PhantomSample>& samples,
                           const std::vector<size_t>& idx);
Tensor<uint8_t> batch_masks(const std::vector<phantom::PhantomSample>& samples,
                            const std::vector<size_t>& idx);

}  // namespace dalace::trainer
