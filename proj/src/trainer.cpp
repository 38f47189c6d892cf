#include "dalace/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dalace/evaluator.hpp"

namespace fs = std::filesystem;

namespace dalace::trainer {

using nets::ModelState;
using nets::Side;
using objectives::LossBreakdown;
using phantom::Experiment;
using phantom::PhantomSample;

Tensor<float> batch_images(const std::vector<PhantomSample>& samples,
                           const std::vector<size_t>& idx) {
  require(!idx.empty(), ErrorCode::InvalidConfig, "empty batch");
  const int64_t H = samples[idx[0]].image.dim(0), W = samples[idx[0]].image.dim(1);
  Tensor<float> out({int64_t(idx.size()), 1, H, W});
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto& img = samples[idx[b]].image;
    check_same_shape(img, samples[idx[0]].image, "batch_images");
    std::memcpy(out.data() + int64_t(b) * H * W, img.data(), size_t(H * W) * sizeof(float));
  }
  return out;
}

Tensor<uint8_t> batch_masks(const std::vector<PhantomSample>& samples,
                            const std::vector<size_t>& idx) {
  require(!idx.empty(), ErrorCode::InvalidConfig, "empty batch");
  const int64_t H = samples[idx[0]].image.dim(0), W = samples[idx[0]].image.dim(1);
  Tensor<uint8_t> out({int64_t(idx.size()), H, W});
  for (size_t b = 0; b < idx.size(); ++b) {
    require(samples[idx[b]].has_mask(), ErrorCode::InvalidConfig, "sample lacks a mask");
    std::memcpy(out.data() + int64_t(b) * H * W, samples[idx[b]].mask.data(), size_t(H * W));
  }
  return out;
}

namespace {

double checked(double v, const char* term) {
  require(std::isfinite(v), ErrorCode::NonfiniteLoss, term);
  return v;
}

using Var = VarPtr<float>;

}  // namespace

LossBreakdown train_step(ModelState<float>& state, const StepBatch& batch, const TrainConfig& cfg,
                         int64_t epoch) {
  cfg.validate();
  require(batch.src_images.defined() && batch.tgt_images.defined(), ErrorCode::InvalidConfig,
          "train_step needs both batches");
  LossBreakdown out;
  const bool dam_on = !cfg.disable_dam && !cfg.disable_disentangle;
  const bool apm_on = !cfg.disable_apm && !cfg.disable_disentangle;
  const bool joint = cfg.experiment == Experiment::Joint;

  state.opt_gen.lr = float(cfg.lr_main);
  state.opt_dam.lr = float(cfg.lr_main);
  state.opt_seg.lr = float(cfg.lr_main);
  state.opt_pair_d.lr = float(cfg.lr_pair);
  state.opt_pair_g.lr = float(cfg.lr_pair);

  // --- phase 1: encoders + generators on L_recon (+ generator-side DAM) ---
  Var x_src = constant(batch.src_images.clone());
  Var x_tgt = constant(batch.tgt_images.clone());
  Tensor<float> fake_tgt_value, fake_src_value;  // kept for phase 2
  {
    state.opt_gen.zero_grad();
    Var a_src = anatomy_encode(state, Side::Source, x_src, /*training=*/true);
    Var m_src = modality_encode(state, Side::Source, x_src);
    Var a_tgt = anatomy_encode(state, Side::Target, x_tgt, true);
    Var m_tgt = modality_encode(state, Side::Target, x_tgt);

    Var recon_src = generate(state, Side::Source, a_src, m_src);
    Var recon_tgt = generate(state, Side::Target, a_tgt, m_tgt);
    Var l_img = objectives::image_recon_loss(x_src, x_tgt, recon_src, recon_tgt);

    std::vector<std::pair<float, Var>> total_terms;
    Var l_latent;
    if (!cfg.disable_disentangle) {
      // Swap modality codes, regenerate, re-encode.
      Var x_src2tgt = generate(state, Side::Target, a_src, m_tgt);
      Var x_tgt2src = generate(state, Side::Source, a_tgt, m_src);
      Var re_a_src = anatomy_encode(state, Side::Target, x_src2tgt, true);
      Var re_m_tgt = modality_encode(state, Side::Target, x_src2tgt);
      Var re_a_tgt = anatomy_encode(state, Side::Source, x_tgt2src, true);
      Var re_m_src = modality_encode(state, Side::Source, x_tgt2src);
      l_latent = objectives::latent_recon_loss(a_src, m_src, a_tgt, m_tgt, re_a_src, re_m_src,
                                               re_a_tgt, re_m_tgt);
      fake_tgt_value = x_src2tgt->val;
      fake_src_value = x_tgt2src->val;

      if (dam_on) {
        Var d_fake_tgt = discriminate_domain(state, Side::Target, x_src2tgt);
        Var d_fake_src = discriminate_domain(state, Side::Source, x_tgt2src);
        // Generator side only; the discriminators are updated in phase 2.
        Var gen_adv = cfg.saturating_gan
                          ? weighted_sum<float>(
                                {{1.f, log1m_mean(d_fake_tgt, float(objectives::kProbFloor))},
                                 {1.f, log1m_mean(d_fake_src, float(objectives::kProbFloor))}})
                          : weighted_sum<float>(
                                {{1.f, neg_log_mean(d_fake_tgt, float(objectives::kProbFloor))},
                                 {1.f, neg_log_mean(d_fake_src, float(objectives::kProbFloor))}});
        out.l_adv_cross_gen = checked(gen_adv->val[0], "l_adv_cross_gen");
        total_terms.push_back({float(cfg.w_adv_cross), gen_adv});
      }
    } else {
      l_latent = constant(Tensor<float>::scalar(0.f));
    }

    Var l_recon = objectives::recon_loss(cfg.weights, l_img, l_latent);
    total_terms.push_back({1.f, l_recon});
    Var total = weighted_sum<float>(total_terms);

    out.l_img = checked(l_img->val[0], "l_img");
    out.l_latent = checked(l_latent->val[0], "l_latent");
    out.l_recon = checked(l_recon->val[0], "l_recon");

    backward(total);
    state.opt_gen.step();
  }

  // --- phase 2: DAM discriminators on real vs (detached) transferred ---
  if (dam_on) {
    state.opt_dam.zero_grad();
    Var d_real_tgt = discriminate_domain(state, Side::Target, x_tgt);
    Var d_fake_tgt = discriminate_domain(state, Side::Target, constant(fake_tgt_value));
    Var d_real_src = discriminate_domain(state, Side::Source, x_src);
    Var d_fake_src = discriminate_domain(state, Side::Source, constant(fake_src_value));
    auto adv = objectives::domain_adv_loss(d_real_tgt, d_fake_tgt, d_real_src, d_fake_src,
                                           cfg.saturating_gan);
    out.l_adv_cross = checked(adv.disc->val[0], "l_adv_cross");
    backward(adv.disc);
    state.opt_dam.step();
  }

  // --- phase 3: segmenter on domain-agnostic source images (CE updates S
  // only; in the joint experiment both domains carry masks) ---
  Tensor<float> agn_src_value, agn_tgt_value;
  {
    state.opt_seg.zero_grad();
    Var seg_in_src;
    if (cfg.disable_disentangle) {
      seg_in_src = x_src;  // no agnostic route without disentanglement
    } else {
      ParamFreeze freeze;
      Var a = anatomy_encode(state, Side::Source, detach(x_src), true);
      Var agn = generate_agnostic(state, Side::Source, a);
      agn_src_value = agn->val;
      seg_in_src = constant(agn_src_value);
    }
    Var probs_src = segment(state, seg_in_src);
    Var l_ce = objectives::ce_loss(probs_src, batch.src_masks);
    if (joint) {
      require(batch.tgt_masks.defined(), ErrorCode::InvalidConfig,
              "joint experiment needs target masks");
      Var seg_in_tgt;
      if (cfg.disable_disentangle) {
        seg_in_tgt = x_tgt;
      } else {
        ParamFreeze freeze;
        Var a = anatomy_encode(state, Side::Target, detach(x_tgt), true);
        Var agn = generate_agnostic(state, Side::Target, a);
        agn_tgt_value = agn->val;
        seg_in_tgt = constant(agn_tgt_value);
      }
      Var l_ce_tgt = objectives::ce_loss(segment(state, seg_in_tgt), batch.tgt_masks);
      l_ce = weighted_sum<float>({{0.5f, l_ce}, {0.5f, l_ce_tgt}});
    }
    out.l_ce = checked(l_ce->val[0], "l_ce");
    Var total = weighted_sum<float>({{float(cfg.w_ce), l_ce}});
    backward(total);
    state.opt_seg.step();
  }

  // --- phase 4: conditional pair adversary (after warmup) ---
  if (apm_on) {
    const bool apply = epoch >= cfg.warmup_epochs();
    // Target-side agnostic image + predictions, values only.
    Var probs_src, probs_tgt;
    {
      ParamFreeze freeze;
      if (!agn_tgt_value.defined()) {
        Var a = anatomy_encode(state, Side::Target, detach(x_tgt), true);
        agn_tgt_value = generate_agnostic(state, Side::Target, a)->val;
      }
      probs_src = segment(state, constant(agn_src_value));
      probs_tgt = segment(state, constant(agn_tgt_value));
    }

    // (a) pair discriminator update.
    state.opt_pair_d.zero_grad();
    Var d_src_pair = discriminate_pair(state, constant(agn_src_value), detach(probs_src));
    Var d_tgt_pair = discriminate_pair(state, constant(agn_tgt_value), detach(probs_tgt));
    auto pair = objectives::pair_adv_loss(d_src_pair, d_tgt_pair, cfg.saturating_gan);
    out.l_adv_pair = checked(pair.disc->val[0], "l_adv_pair");
    if (apply) {
      backward(pair.disc);
      state.opt_pair_d.step();
    }

    // (b) generator-side update through the frozen segmenter and
    // discriminator; gradients reach the target-side anatomy encoder and
    // generator only.
    state.opt_pair_g.zero_grad();
    Var a_tgt_g = anatomy_encode(state, Side::Target, x_tgt, true);
    Var agn_tgt_g = generate_agnostic(state, Side::Target, a_tgt_g);
    Var probs_tgt_g, d_gen;
    {
      ParamFreeze freeze;
      probs_tgt_g = segment(state, agn_tgt_g);
      d_gen = discriminate_pair(state, agn_tgt_g, probs_tgt_g);
    }
    Var gen_loss = cfg.saturating_gan ? log1m_mean(d_gen, float(objectives::kProbFloor))
                                      : neg_log_mean(d_gen, float(objectives::kProbFloor));
    out.l_adv_pair_gen = checked(gen_loss->val[0], "l_adv_pair_gen");
    if (apply) {
      Var total = weighted_sum<float>({{float(cfg.w_adv_pair), gen_loss}});
      backward(total);
      state.opt_pair_g.step();
    }
  }

  require(state.params_finite(), ErrorCode::NonfiniteLoss, "non-finite parameter after step");
  return out;
}

namespace {

std::vector<size_t> permutation(size_t n, uint64_t seed) {
  std::vector<size_t> p(n);
  std::iota(p.begin(), p.end(), size_t(0));
  Rng rng(seed);
  for (size_t i = n; i > 1; --i) std::swap(p[i - 1], p[size_t(rng.uniform_int(i))]);
  return p;
}

std::string config_snapshot(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["arch"] = {{"input_resolution", cfg.arch.input_resolution},
               {"base_channels", cfg.arch.base_channels},
               {"anatomy_channels", cfg.arch.anatomy_channels},
               {"modality_dim", cfg.arch.modality_dim},
               {"n_residual", cfg.arch.n_residual},
               {"n_classes", cfg.arch.n_classes},
               {"anatomy_instance_norm", cfg.arch.anatomy_instance_norm}};
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr_main"] = cfg.lr_main;
  j["lr_pair"] = cfg.lr_pair;
  j["alpha"] = cfg.weights.alpha;
  j["beta"] = cfg.weights.beta;
  j["pair_warmup_epochs"] = cfg.warmup_epochs();
  j["seed"] = cfg.seed;
  j["experiment"] = phantom::experiment_name(cfg.experiment);
  j["source_modality"] = cfg.split.source_modality;
  j["target_modality"] = cfg.split.target_modality;
  j["disable_apm"] = cfg.disable_apm;
  j["disable_dam"] = cfg.disable_dam;
  j["disable_disentangle"] = cfg.disable_disentangle;
  j["w_adv_cross"] = cfg.w_adv_cross;
  j["w_ce"] = cfg.w_ce;
  j["w_adv_pair"] = cfg.w_adv_pair;
  j["saturating_gan"] = cfg.saturating_gan;
  return j.dump(2) + "\n";
}

}  // namespace

std::string RunLog::csv() const {
  std::ostringstream os;
  os << "epoch,l_img,l_latent,l_recon,l_adv_cross,l_adv_cross_gen,l_ce,l_adv_pair,"
        "l_adv_pair_gen,val_dsc,wall_seconds,seed\n";
  os.precision(9);
  for (const auto& r : records) {
    os << r.epoch << ',' << r.losses.l_img << ',' << r.losses.l_latent << ',' << r.losses.l_recon
       << ',' << r.losses.l_adv_cross << ',' << r.losses.l_adv_cross_gen << ',' << r.losses.l_ce
       << ',' << r.losses.l_adv_pair << ',' << r.losses.l_adv_pair_gen << ',' << r.val_dsc << ','
       << r.wall_seconds << ',' << r.seed << '\n';
  }
  return os.str();
}

void RunLog::save(const std::string& csv_path, const std::string& config_path) const {
  std::ofstream c(csv_path, std::ios::binary);
  require(c.good(), ErrorCode::IoError, "cannot write " + csv_path);
  c << csv();
  std::ofstream k(config_path, std::ios::binary);
  require(k.good(), ErrorCode::IoError, "cannot write " + config_path);
  k << config_json;
}

TrainResult train(const TrainConfig& cfg, const phantom::DatasetManifest& manifest, int fold,
                  const std::string& out_dir, const std::string& resume_from,
                  phantom::SplitAudit* audit) {
  cfg.validate();
  using phantom::SplitRole;

  auto source = phantom::load_split(manifest, SplitRole::Source, cfg.experiment, fold, cfg.split,
                                    audit);
  auto target = phantom::load_split(manifest, SplitRole::Target, cfg.experiment, fold, cfg.split,
                                    audit);
  require(!source.empty() && !target.empty(), ErrorCode::InvalidConfig, "empty training split");

  TrainResult res{nets::init_model<float>(cfg.arch, cfg.seed), {}};
  if (!resume_from.empty()) {
    res.state = nets::load_checkpoint(resume_from, cfg.arch);
  }
  res.log.config_json = config_snapshot(cfg);
  res.log.manifest_hash = phantom::manifest_sha256(manifest);

  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    require(!ec, ErrorCode::IoError, "cannot create " + out_dir);
  }

  const size_t B = size_t(cfg.batch_size);
  const int64_t steps = std::max<int64_t>(1, int64_t(source.size() / B));
  const bool joint = cfg.experiment == Experiment::Joint;

  // A small source-side validation set scores the segmentation path each
  // epoch with labels the protocol legitimately owns.
  std::vector<size_t> val_idx;
  for (size_t i = 0; i < std::min<size_t>(16, source.size()); ++i) val_idx.push_back(i);

  for (int64_t epoch = res.state.epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto src_perm = permutation(source.size(), hash_mix(cfg.seed, uint64_t(epoch) * 2 + 0));
    const auto tgt_perm = permutation(target.size(), hash_mix(cfg.seed, uint64_t(epoch) * 2 + 1));

    LossBreakdown epoch_losses;
    for (int64_t s = 0; s < steps; ++s) {
      std::vector<size_t> src_idx(B), tgt_idx(B);
      for (size_t i = 0; i < B; ++i) {
        src_idx[i] = src_perm[(size_t(s) * B + i) % src_perm.size()];
        tgt_idx[i] = tgt_perm[(size_t(s) * B + i) % tgt_perm.size()];
      }
      StepBatch batch;
      batch.src_images = batch_images(source, src_idx);
      batch.src_masks = batch_masks(source, src_idx);
      batch.tgt_images = batch_images(target, tgt_idx);
      if (joint) batch.tgt_masks = batch_masks(target, tgt_idx);

      const LossBreakdown lb = train_step(res.state, batch, cfg, epoch);
      epoch_losses.l_img += lb.l_img / double(steps);
      epoch_losses.l_latent += lb.l_latent / double(steps);
      epoch_losses.l_recon += lb.l_recon / double(steps);
      epoch_losses.l_adv_cross += lb.l_adv_cross / double(steps);
      epoch_losses.l_adv_cross_gen += lb.l_adv_cross_gen / double(steps);
      epoch_losses.l_ce += lb.l_ce / double(steps);
      epoch_losses.l_adv_pair += lb.l_adv_pair / double(steps);
      epoch_losses.l_adv_pair_gen += lb.l_adv_pair_gen / double(steps);
    }

    double val = 0.0;
    for (size_t i : val_idx) {
      const auto pred = eval::predict_mask(res.state, source[i].image, Side::Source,
                                           !cfg.disable_disentangle);
      val += eval::dice(pred, source[i].mask);
    }
    if (!val_idx.empty()) val /= double(val_idx.size());

    EpochRecord rec;
    rec.epoch = epoch;
    rec.losses = epoch_losses;
    rec.val_dsc = val;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.seed = cfg.seed;
    res.log.records.push_back(rec);

    res.state.epoch = epoch + 1;
    if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
      nets::save_checkpoint(res.state, (fs::path(out_dir) / "last.ckpt").string());
    }
  }

  if (!out_dir.empty()) {
    nets::save_checkpoint(res.state, (fs::path(out_dir) / "final.ckpt").string());
    res.log.save((fs::path(out_dir) / "runlog.csv").string(),
                 (fs::path(out_dir) / "config.json").string());
  }
  return res;
}

nets::ModelState<float> train_segmenter_baseline(const BaselineConfig& cfg,
                                                 const std::vector<PhantomSample>& data) {
  cfg.arch.validate();
  require(!data.empty(), ErrorCode::InvalidConfig, "baseline needs data");
  for (const auto& s : data)
    require(s.has_mask(), ErrorCode::InvalidConfig, "baseline training sample lacks a mask");

  nets::ModelState<float> m = nets::init_model<float>(cfg.arch, cfg.seed);
  m.opt_seg.lr = float(cfg.lr);
  const size_t B = size_t(cfg.batch_size);
  const int64_t steps = std::max<int64_t>(1, int64_t(data.size() / B));
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = permutation(data.size(), hash_mix(cfg.seed ^ 0xBA5Eull, uint64_t(epoch)));
    for (int64_t s = 0; s < steps; ++s) {
      std::vector<size_t> idx(B);
      for (size_t i = 0; i < B; ++i) idx[i] = perm[(size_t(s) * B + i) % perm.size()];
      m.opt_seg.zero_grad();
      auto probs = segment(m, constant(batch_images(data, idx)));
      auto loss = objectives::ce_loss(probs, batch_masks(data, idx));
      require(std::isfinite(double(loss->val[0])), ErrorCode::NonfiniteLoss, "baseline l_ce");
      backward(loss);
      m.opt_seg.step();
    }
    m.epoch = epoch + 1;
  }
  return m;
}

}  // namespace dalace::trainer
