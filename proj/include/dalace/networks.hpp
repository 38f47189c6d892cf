#pragma once

// The learnable pipeline: two anatomy encoders, two modality encoders, two
// style-based generators (MLP + AdaIN residual blocks), the two
// domain discriminators, the conditional pair discriminator and the U-Net
// segmenter. Everything is templated on the scalar type so the float
// training stack and the double gradient-check stack share one definition.

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "dalace/nn.hpp"
#include "dalace/rng.hpp"

namespace dalace::nets {

struct ArchConfig {
  int input_resolution = 64;
  int base_channels = 16;      // 64 at full scale
  int anatomy_channels = 64;   // 256 at full scale
  int modality_dim = 8;
  int n_residual = 4;
  int n_classes = 2;
  // The residual stages of the anatomy encoders normalize with batch
  // statistics by default; instance statistics are available for
  // sensitivity runs.
  bool anatomy_instance_norm = false;

  void validate() const {
    require(input_resolution >= 4 && input_resolution % 4 == 0, ErrorCode::InvalidConfig,
            "input_resolution must be a positive multiple of 4");
    require(base_channels > 0 && anatomy_channels > 0 && modality_dim > 0 && n_residual > 0 &&
                n_classes >= 2,
            ErrorCode::InvalidConfig, "architecture sizes must be positive");
  }

  int64_t code_resolution() const { return input_resolution / 4; }
};

inline ArchConfig desk_arch() { return ArchConfig{}; }

inline ArchConfig paper_scale_arch() {
  ArchConfig a;
  a.input_resolution = 256;
  a.base_channels = 64;
  a.anatomy_channels = 256;
  return a;
}

// The labeled domain drives the Source head; every unlabeled/target-domain
// image goes through the Target head.
enum class Side { Source = 0, Target = 1 };

inline const char* side_name(Side s) { return s == Side::Source ? "src" : "tgt"; }

// --- building blocks -------------------------------------------------------

// conv-norm-relu-conv-norm residual stage, normalization per ArchConfig.
template <typename T>
struct ResBlockNorm {
  Conv2dLayer<T> conv1, conv2;
  BatchNorm2dLayer<T> bn1, bn2;
  bool instance_norm = false;

  void init(const std::string& name, int64_t ch, bool instance, Rng& rng) {
    instance_norm = instance;
    conv1.init(name + ".conv1", ch, ch, 3, 1, rng);
    conv2.init(name + ".conv2", ch, ch, 3, 1, rng);
    bn1.init(name + ".norm1", ch);
    bn2.init(name + ".norm2", ch);
  }

  VarPtr<T> norm(BatchNorm2dLayer<T>& bn, const VarPtr<T>& x, bool training) {
    if (!instance_norm) return bn(x, training);
    const int64_t B = x->val.dim(0);
    return adain(x, broadcast_rows(leaf(bn.gamma), B), broadcast_rows(leaf(bn.beta), B), bn.eps);
  }

  VarPtr<T> operator()(const VarPtr<T>& x, bool training) {
    auto h = relu(norm(bn1, conv1(x), training));
    h = norm(bn2, conv2(h), training);
    return relu(add(h, x));
  }

  void collect(std::vector<Param<T>*>& out) {
    conv1.collect(out);
    conv2.collect(out);
    bn1.collect(out);
    bn2.collect(out);
  }
};

// --- anatomy encoder: 1x stride-1, 2x stride-2, n residual stages ----------

template <typename T>
struct AnatomyEncoder {
  Conv2dLayer<T> c1, c2, c3;
  std::vector<ResBlockNorm<T>> res;
  int input_resolution = 0;

  void init(const std::string& name, const ArchConfig& a, Rng& rng) {
    input_resolution = a.input_resolution;
    c1.init(name + ".c1", 1, a.base_channels, 3, 1, rng);
    c2.init(name + ".c2", a.base_channels, 2 * a.base_channels, 3, 2, rng);
    c3.init(name + ".c3", 2 * a.base_channels, a.anatomy_channels, 3, 2, rng);
    res.resize(size_t(a.n_residual));
    for (int i = 0; i < a.n_residual; ++i)
      res[size_t(i)].init(name + ".res" + std::to_string(i), a.anatomy_channels,
                          a.anatomy_instance_norm, rng);
  }

  VarPtr<T> operator()(const VarPtr<T>& x, bool training) {
    require(x->val.rank() == 4 && x->val.dim(1) == 1 && x->val.dim(2) == input_resolution &&
                x->val.dim(3) == input_resolution,
            ErrorCode::ShapeMismatch,
            "anatomy encoder expects [B,1," + std::to_string(input_resolution) + "," +
                std::to_string(input_resolution) + "], got " + x->val.shape_str());
    auto h = relu(c1(x));
    h = relu(c2(h));
    h = relu(c3(h));
    for (auto& r : res) h = r(h, training);
    return h;
  }

  void collect(std::vector<Param<T>*>& out) {
    c1.collect(out);
    c2.collect(out);
    c3.collect(out);
    for (auto& r : res) r.collect(out);
  }
};

// --- modality encoder: stride-2 cascade, GAP, fc, no normalization ---------

template <typename T>
struct ModalityEncoder {
  Conv2dLayer<T> c1, c2, c3, c4, c5;
  LinearLayer<T> fc;
  int input_resolution = 0;

  void init(const std::string& name, const ArchConfig& a, Rng& rng) {
    input_resolution = a.input_resolution;
    const int64_t b = a.base_channels;
    c1.init(name + ".c1", 1, b, 3, 1, rng);
    c2.init(name + ".c2", b, 2 * b, 3, 2, rng);
    c3.init(name + ".c3", 2 * b, 4 * b, 3, 2, rng);
    c4.init(name + ".c4", 4 * b, 4 * b, 3, 2, rng);
    c5.init(name + ".c5", 4 * b, 4 * b, 3, 2, rng);
    fc.init(name + ".fc", 4 * b, a.modality_dim, rng);
  }

  VarPtr<T> operator()(const VarPtr<T>& x) {
    require(x->val.rank() == 4 && x->val.dim(1) == 1 && x->val.dim(2) == input_resolution &&
                x->val.dim(3) == input_resolution,
            ErrorCode::ShapeMismatch, "modality encoder input " + x->val.shape_str());
    auto h = relu(c1(x));
    h = relu(c2(h));
    h = relu(c3(h));
    h = relu(c4(h));
    h = relu(c5(h));
    return fc(global_avg_pool(h));
  }

  void collect(std::vector<Param<T>*>& out) {
    c1.collect(out);
    c2.collect(out);
    c3.collect(out);
    c4.collect(out);
    c5.collect(out);
    fc.collect(out);
  }
};

// --- style-based generator --------------------------------------------------

// Residual stage whose normalization is AdaIN driven by externally supplied
// per-sample affine parameters (two AdaIN layers per stage).
template <typename T>
struct ResBlockAdaIN {
  Conv2dLayer<T> conv1, conv2;

  void init(const std::string& name, int64_t ch, Rng& rng) {
    conv1.init(name + ".conv1", ch, ch, 3, 1, rng);
    conv2.init(name + ".conv2", ch, ch, 3, 1, rng);
  }

  VarPtr<T> operator()(const VarPtr<T>& x, const VarPtr<T>& g1, const VarPtr<T>& b1,
                       const VarPtr<T>& g2, const VarPtr<T>& b2, T eps) {
    auto h = relu(adain(conv1(x), g1, b1, eps));
    h = adain(conv2(h), g2, b2, eps);
    return relu(add(h, x));
  }

  void collect(std::vector<Param<T>*>& out) {
    conv1.collect(out);
    conv2.collect(out);
  }
};

// A zero modality code selects the MLP's bias-only affine parameters: that
// fixed rendering is the domain-agnostic image.
struct Agnostic {};

template <typename T>
struct StyleGenerator {
  LinearLayer<T> mlp1, mlp2, mlp3;
  std::vector<ResBlockAdaIN<T>> res;
  Conv2dLayer<T> up_conv1, up_conv2, out_conv;
  int modality_dim = 0;
  int64_t ch = 0;
  T adain_eps = T(1e-5);

  void init(const std::string& name, const ArchConfig& a, Rng& rng) {
    modality_dim = a.modality_dim;
    ch = a.anatomy_channels;
    const int64_t hidden = 4 * a.modality_dim;
    const int64_t n_affine = 2 * a.n_residual * 2 * ch;  // (gamma,beta) x 2 AdaIN per stage
    mlp1.init(name + ".mlp1", a.modality_dim, hidden, rng);
    mlp2.init(name + ".mlp2", hidden, hidden, rng);
    mlp3.init(name + ".mlp3", hidden, n_affine, rng);
    res.resize(size_t(a.n_residual));
    for (int i = 0; i < a.n_residual; ++i)
      res[size_t(i)].init(name + ".res" + std::to_string(i), ch, rng);
    up_conv1.init(name + ".up1", ch, ch / 2, 3, 1, rng);
    up_conv2.init(name + ".up2", ch / 2, ch / 4, 3, 1, rng);
    out_conv.init(name + ".out", ch / 4, 1, 3, 1, rng);
  }

  VarPtr<T> operator()(const VarPtr<T>& anatomy, const VarPtr<T>& modality_code) {
    require(anatomy->val.rank() == 4 && anatomy->val.dim(1) == ch, ErrorCode::ShapeMismatch,
            "generator anatomy code " + anatomy->val.shape_str());
    const int64_t B = anatomy->val.dim(0);
    require(modality_code->val.rank() == 2 && modality_code->val.dim(0) == B &&
                modality_code->val.dim(1) == modality_dim,
            ErrorCode::ShapeMismatch, "generator modality code " + modality_code->val.shape_str());

    auto style = mlp3(relu(mlp2(relu(mlp1(modality_code)))));
    auto h = anatomy;
    int64_t off = 0;
    auto next_affine = [&]() {
      auto gamma = add_const(slice_cols(style, off, off + ch), T(1));
      auto beta = slice_cols(style, off + ch, off + 2 * ch);
      off += 2 * ch;
      return std::pair{gamma, beta};
    };
    for (auto& r : res) {
      auto [g1, b1] = next_affine();
      auto [g2, b2] = next_affine();
      h = r(h, g1, b1, g2, b2, adain_eps);
    }
    h = relu(up_conv1(upsample_nearest2x(h)));
    h = relu(up_conv2(upsample_nearest2x(h)));
    return sigmoid(out_conv(h));
  }

  VarPtr<T> operator()(const VarPtr<T>& anatomy, Agnostic) {
    const int64_t B = anatomy->val.dim(0);
    return (*this)(anatomy, constant(Tensor<T>::zeros({B, modality_dim})));
  }

  void collect(std::vector<Param<T>*>& out) {
    mlp1.collect(out);
    mlp2.collect(out);
    mlp3.collect(out);
    for (auto& r : res) r.collect(out);
    up_conv1.collect(out);
    up_conv2.collect(out);
    out_conv.collect(out);
  }
};

// --- discriminators ---------------------------------------------------------

// Four stride-2 convolutions doubling from base_channels, GAP, linear head,
// sigmoid probability-of-real.
template <typename T>
struct Discriminator {
  Conv2dLayer<T> c1, c2, c3, c4;
  LinearLayer<T> head;

  void init(const std::string& name, int64_t in_ch, const ArchConfig& a, Rng& rng) {
    const int64_t b = a.base_channels;
    c1.init(name + ".c1", in_ch, b, 3, 2, rng);
    c2.init(name + ".c2", b, 2 * b, 3, 2, rng);
    c3.init(name + ".c3", 2 * b, 4 * b, 3, 2, rng);
    c4.init(name + ".c4", 4 * b, 8 * b, 3, 2, rng);
    head.init(name + ".head", 8 * b, 1, rng);
  }

  // [B,in_ch,R,R] -> [B,1] in (0,1)
  VarPtr<T> operator()(const VarPtr<T>& x) {
    auto h = leaky_relu(c1(x), T(0.2));
    h = leaky_relu(c2(h), T(0.2));
    h = leaky_relu(c3(h), T(0.2));
    h = leaky_relu(c4(h), T(0.2));
    return sigmoid(head(global_avg_pool(h)));
  }

  void collect(std::vector<Param<T>*>& out) {
    c1.collect(out);
    c2.collect(out);
    c3.collect(out);
    c4.collect(out);
    head.collect(out);
  }
};

// --- U-Net segmenter ---------------------------------------------------------

template <typename T>
struct UNet {
  Conv2dLayer<T> e1a, e1b, e2a, e2b, e3a, e3b;
  Conv2dLayer<T> d2a, d2b, d1a, d1b, out_conv;

  void init(const std::string& name, const ArchConfig& a, Rng& rng) {
    const int64_t b = a.base_channels;
    e1a.init(name + ".e1a", 1, b, 3, 1, rng);
    e1b.init(name + ".e1b", b, b, 3, 1, rng);
    e2a.init(name + ".e2a", b, 2 * b, 3, 1, rng);
    e2b.init(name + ".e2b", 2 * b, 2 * b, 3, 1, rng);
    e3a.init(name + ".e3a", 2 * b, 4 * b, 3, 1, rng);
    e3b.init(name + ".e3b", 4 * b, 4 * b, 3, 1, rng);
    d2a.init(name + ".d2a", 4 * b + 2 * b, 2 * b, 3, 1, rng);
    d2b.init(name + ".d2b", 2 * b, 2 * b, 3, 1, rng);
    d1a.init(name + ".d1a", 2 * b + b, b, 3, 1, rng);
    d1b.init(name + ".d1b", b, b, 3, 1, rng);
    out_conv.init(name + ".out", b, a.n_classes, 1, 1, rng);
  }

  // [B,1,R,R] -> per-pixel class probabilities [B,n_classes,R,R]
  VarPtr<T> operator()(const VarPtr<T>& x) {
    auto s1 = relu(e1b(relu(e1a(x))));
    auto s2 = relu(e2b(relu(e2a(max_pool2x2(s1)))));
    auto h = relu(e3b(relu(e3a(max_pool2x2(s2)))));
    h = relu(d2b(relu(d2a(concat_channels(upsample_nearest2x(h), s2)))));
    h = relu(d1b(relu(d1a(concat_channels(upsample_nearest2x(h), s1)))));
    return softmax_channels(out_conv(h));
  }

  void collect(std::vector<Param<T>*>& out) {
    for (auto* c : {&e1a, &e1b, &e2a, &e2b, &e3a, &e3b, &d2a, &d2b, &d1a, &d1b, &out_conv})
      c->collect(out);
  }
};

// --- full model state --------------------------------------------------------

template <typename T>
struct ModelState {
  ArchConfig arch;
  std::array<AnatomyEncoder<T>, 2> anatomy_enc;    // [Source, Target]
  std::array<ModalityEncoder<T>, 2> modality_enc;
  std::array<StyleGenerator<T>, 2> gen;
  std::array<Discriminator<T>, 2> dam_disc;
  Discriminator<T> pair_disc;
  UNet<T> seg;

  // Optimizer moments, one Adam per optimization phase.
  Adam<T> opt_gen, opt_dam, opt_seg, opt_pair_d, opt_pair_g;

  int64_t epoch = 0;
  Rng rng{0};

  AnatomyEncoder<T>& ea(Side s) { return anatomy_enc[size_t(s)]; }
  ModalityEncoder<T>& em(Side s) { return modality_enc[size_t(s)]; }
  StyleGenerator<T>& g(Side s) { return gen[size_t(s)]; }
  Discriminator<T>& dam(Side s) { return dam_disc[size_t(s)]; }

  std::vector<Param<T>*> gen_group() {
    std::vector<Param<T>*> ps;
    for (auto s : {Side::Source, Side::Target}) {
      ea(s).collect(ps);
      em(s).collect(ps);
      g(s).collect(ps);
    }
    return ps;
  }
  std::vector<Param<T>*> dam_group() {
    std::vector<Param<T>*> ps;
    dam(Side::Source).collect(ps);
    dam(Side::Target).collect(ps);
    return ps;
  }
  std::vector<Param<T>*> seg_group() {
    std::vector<Param<T>*> ps;
    seg.collect(ps);
    return ps;
  }
  std::vector<Param<T>*> pair_d_group() {
    std::vector<Param<T>*> ps;
    pair_disc.collect(ps);
    return ps;
  }
  // Pair-adversarial generator updates reach the target-side anatomy
  // encoder and generator only.
  std::vector<Param<T>*> pair_g_group() {
    std::vector<Param<T>*> ps;
    ea(Side::Target).collect(ps);
    g(Side::Target).collect(ps);
    return ps;
  }

  std::vector<Param<T>*> all_params() {
    std::vector<Param<T>*> ps = gen_group();
    dam(Side::Source).collect(ps);
    dam(Side::Target).collect(ps);
    pair_disc.collect(ps);
    seg.collect(ps);
    return ps;
  }

  // Named normalization buffers (running statistics), checkpointed next to
  // the parameters.
  std::vector<std::pair<std::string, Tensor<T>*>> norm_buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto s : {Side::Source, Side::Target}) {
      auto& enc = ea(s);
      for (size_t i = 0; i < enc.res.size(); ++i) {
        const std::string base =
            std::string("ea_") + side_name(s) + ".res" + std::to_string(i);
        out.push_back({base + ".norm1.running_mean", &enc.res[i].bn1.running_mean});
        out.push_back({base + ".norm1.running_var", &enc.res[i].bn1.running_var});
        out.push_back({base + ".norm2.running_mean", &enc.res[i].bn2.running_mean});
        out.push_back({base + ".norm2.running_var", &enc.res[i].bn2.running_var});
      }
    }
    return out;
  }

  bool params_finite() {
    for (auto* p : all_params())
      if (!p->value.all_finite()) return false;
    return true;
  }
};

template <typename T>
ModelState<T> init_model(const ArchConfig& arch, uint64_t seed) {
  arch.validate();
  ModelState<T> m;
  m.arch = arch;
  Rng rng(hash_mix(seed, 0x4d4f44454cull));
  m.ea(Side::Source).init("ea_src", arch, rng);
  m.ea(Side::Target).init("ea_tgt", arch, rng);
  m.em(Side::Source).init("em_src", arch, rng);
  m.em(Side::Target).init("em_tgt", arch, rng);
  m.g(Side::Source).init("gen_src", arch, rng);
  m.g(Side::Target).init("gen_tgt", arch, rng);
  m.dam(Side::Source).init("dam_src", 1, arch, rng);
  m.dam(Side::Target).init("dam_tgt", 1, arch, rng);
  m.pair_disc.init("pair_d", 1 + arch.n_classes, arch, rng);
  m.seg.init("seg", arch, rng);

  m.opt_gen.attach(m.gen_group(), T(1e-3));
  m.opt_dam.attach(m.dam_group(), T(1e-3));
  m.opt_seg.attach(m.seg_group(), T(1e-3));
  m.opt_pair_d.attach(m.pair_d_group(), T(1e-4));
  m.opt_pair_g.attach(m.pair_g_group(), T(1e-4));

  m.rng = Rng(hash_mix(seed, 0x545241494eull));
  return m;
}

// --- spec-level forward operations ------------------------------------------

template <typename T>
VarPtr<T> anatomy_encode(ModelState<T>& m, Side side, const VarPtr<T>& image, bool training) {
  return m.ea(side)(image, training);
}

template <typename T>
VarPtr<T> modality_encode(ModelState<T>& m, Side side, const VarPtr<T>& image) {
  return m.em(side)(image);
}

template <typename T>
VarPtr<T> generate(ModelState<T>& m, Side side, const VarPtr<T>& anatomy,
                   const VarPtr<T>& modality_code) {
  return m.g(side)(anatomy, modality_code);
}

template <typename T>
VarPtr<T> generate_agnostic(ModelState<T>& m, Side side, const VarPtr<T>& anatomy) {
  return m.g(side)(anatomy, Agnostic{});
}

template <typename T>
VarPtr<T> discriminate_domain(ModelState<T>& m, Side side, const VarPtr<T>& image) {
  return m.dam(side)(image);
}

template <typename T>
VarPtr<T> segment(ModelState<T>& m, const VarPtr<T>& image) {
  return m.seg(image);
}

// Pair input is the channel concatenation (image first, then mask
// probabilities); the order is part of the interface.
template <typename T>
VarPtr<T> discriminate_pair(ModelState<T>& m, const VarPtr<T>& image, const VarPtr<T>& mask_probs) {
  require(image->val.rank() == 4 && mask_probs->val.rank() == 4 &&
              image->val.dim(0) == mask_probs->val.dim(0) &&
              image->val.dim(2) == mask_probs->val.dim(2) &&
              image->val.dim(3) == mask_probs->val.dim(3),
          ErrorCode::ShapeMismatch, "pair discriminator alignment");
  return m.pair_disc(concat_channels(image, mask_probs));
}

// --- checkpoint IO (float stack) ---------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(ModelState<float>& state, const std::string& path);
ModelState<float> load_checkpoint(const std::string& path);
// Throws VERSION_MISMATCH when the stored architecture differs.
ModelState<float> load_checkpoint(const std::string& path, const ArchConfig& expected);

}  // namespace dalace::nets
