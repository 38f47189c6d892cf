#include "dalace/networks.hpp"

#include <map>

#include <json.hpp>

#include "dalace/serialize.hpp"

namespace dalace::nets {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'C', 'K'};

nlohmann::ordered_json arch_json(const ArchConfig& a) {
  return {{"input_resolution", a.input_resolution},
          {"base_channels", a.base_channels},
          {"anatomy_channels", a.anatomy_channels},
          {"modality_dim", a.modality_dim},
          {"n_residual", a.n_residual},
          {"n_classes", a.n_classes},
          {"anatomy_instance_norm", a.anatomy_instance_norm}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.input_resolution = j.at("input_resolution").get<int>();
  a.base_channels = j.at("base_channels").get<int>();
  a.anatomy_channels = j.at("anatomy_channels").get<int>();
  a.modality_dim = j.at("modality_dim").get<int>();
  a.n_residual = j.at("n_residual").get<int>();
  a.n_classes = j.at("n_classes").get<int>();
  a.anatomy_instance_norm = j.at("anatomy_instance_norm").get<bool>();
  return a;
}

struct NamedTensor {
  std::string name;
  Tensor<float>* tensor;
};

// Fixed, documented tensor name set: parameters, normalization buffers,
// then Adam moments per phase optimizer.
std::vector<NamedTensor> checkpoint_tensors(ModelState<float>& m) {
  std::vector<NamedTensor> out;
  for (Param<float>* p : m.all_params()) out.push_back({p->name, &p->value});
  for (auto& [name, t] : m.norm_buffers()) out.push_back({name, t});
  const std::pair<const char*, Adam<float>*> opts[] = {{"gen", &m.opt_gen},
                                                       {"dam", &m.opt_dam},
                                                       {"seg", &m.opt_seg},
                                                       {"pair_d", &m.opt_pair_d},
                                                       {"pair_g", &m.opt_pair_g}};
  for (auto& [oname, opt] : opts) {
    for (size_t i = 0; i < opt->params.size(); ++i) {
      const std::string base = std::string("adam.") + oname + "." + opt->params[i]->name;
      out.push_back({base + ".m", &opt->m[i]});
      out.push_back({base + ".v", &opt->v[i]});
    }
  }
  return out;
}

}  // namespace

void save_checkpoint(ModelState<float>& state, const std::string& path) {
  nlohmann::ordered_json header;
  header["arch"] = arch_json(state.arch);
  header["epoch"] = state.epoch;
  header["rng"] = state.rng.state();
  header["adam_steps"] = {{"gen", state.opt_gen.t},
                          {"dam", state.opt_dam.t},
                          {"seg", state.opt_seg.t},
                          {"pair_d", state.opt_pair_d.t},
                          {"pair_g", state.opt_pair_g.t}};

  BinWriter w(path);
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(header.dump());
  auto tensors = checkpoint_tensors(state);
  w.u32(uint32_t(tensors.size()));
  for (auto& [name, t] : tensors) {
    w.str(name);
    w.u32(uint32_t(t->rank()));
    for (int d = 0; d < t->rank(); ++d) w.i64(t->dim(d));
    w.f32s(t->data(), size_t(t->numel()));
  }
  require(w.out.good(), ErrorCode::IoError, "checkpoint write failed: " + path);
}

ModelState<float> load_checkpoint(const std::string& path) {
  BinReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  require(std::memcmp(magic, kMagic, 4) == 0, ErrorCode::IoError,
          "not a checkpoint file: " + path);
  const uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorCode::VersionMismatch,
          "checkpoint version " + std::to_string(version));
  const nlohmann::json header = nlohmann::json::parse(r.str());

  ModelState<float> m = init_model<float>(arch_from_json(header.at("arch")), 0);
  m.epoch = header.at("epoch").get<int64_t>();
  std::array<uint64_t, 4> rs{};
  const auto& jr = header.at("rng");
  for (int i = 0; i < 4; ++i) rs[size_t(i)] = jr[size_t(i)].get<uint64_t>();
  m.rng.set_state(rs);
  m.opt_gen.t = header.at("adam_steps").at("gen").get<int64_t>();
  m.opt_dam.t = header.at("adam_steps").at("dam").get<int64_t>();
  m.opt_seg.t = header.at("adam_steps").at("seg").get<int64_t>();
  m.opt_pair_d.t = header.at("adam_steps").at("pair_d").get<int64_t>();
  m.opt_pair_g.t = header.at("adam_steps").at("pair_g").get<int64_t>();

  auto tensors = checkpoint_tensors(m);
  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [name, t] : tensors) by_name[name] = t;

  const uint32_t n = r.u32();
  require(n == tensors.size(), ErrorCode::VersionMismatch,
          "checkpoint tensor count " + std::to_string(n) + ", expected " +
              std::to_string(tensors.size()));
  for (uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    auto it = by_name.find(name);
    require(it != by_name.end(), ErrorCode::VersionMismatch, "unknown tensor: " + name);
    const uint32_t rank = r.u32();
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = r.i64();
    require(dims == it->second->shape(), ErrorCode::VersionMismatch,
            "tensor shape mismatch for " + name);
    r.f32s(it->second->data(), size_t(it->second->numel()));
  }
  return m;
}

ModelState<float> load_checkpoint(const std::string& path, const ArchConfig& expected) {
  ModelState<float> m = load_checkpoint(path);
  const bool same = m.arch.input_resolution == expected.input_resolution &&
                    m.arch.base_channels == expected.base_channels &&
                    m.arch.anatomy_channels == expected.anatomy_channels &&
                    m.arch.modality_dim == expected.modality_dim &&
                    m.arch.n_residual == expected.n_residual &&
                    m.arch.n_classes == expected.n_classes &&
                    m.arch.anatomy_instance_norm == expected.anatomy_instance_norm;
  require(same, ErrorCode::VersionMismatch, "checkpoint architecture differs from expected");
  return m;
}

}  // namespace dalace::nets
