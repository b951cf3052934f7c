// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/quantized_model.hpp"

#include <memory>

#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"

namespace mixcomp {
namespace {

std::string role_name(TensorRole r) {
  switch (r) {
    case TensorRole::embedding: return "embedding";
    case TensorRole::norm: return "norm";
    case TensorRole::attention: return "attention";
    case TensorRole::gating: return "gating";
    case TensorRole::expert: return "expert";
    case TensorRole::head: return "head";
  }
  return "expert";
}

TensorRole parse_role(const std::string& s) {
  for (TensorRole r : {TensorRole::embedding, TensorRole::norm, TensorRole::attention, TensorRole::gating,
                       TensorRole::expert, TensorRole::head}) {
    if (role_name(r) == s) return r;
  }
  throw FormatError("unknown tensor role '" + s + "'");
}

// Input Gram matrices keyed by the tensor they feed.
class HessianObserver : public ForwardObserver {
 public:
  explicit HessianObserver(const ModelConfig& cfg) {
    const std::size_t H = cfg.hidden;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      attn_in.emplace_back(H);
      context.emplace_back(H);
      moe_in.emplace_back(H);
      expert_in.emplace_back();
      expert_act.emplace_back();
      for (std::size_t e = 0; e < cfg.n_experts; ++e) {
        expert_in.back().emplace_back(H);
        expert_act.back().emplace_back(cfg.intermediate);
      }
    }
    head_in = HessianAccumulator(H);
  }

  void on_attention_input(std::size_t l, const Matrix& x) override { attn_in[l].add_rows(x); }
  void on_attention_context(std::size_t l, const Matrix& x) override { context[l].add_rows(x); }
  void on_moe_input(std::size_t l, const Matrix& x) override { moe_in[l].add_rows(x); }
  void on_expert_io(std::size_t l, std::size_t e, const Matrix& in, const Matrix& act) override {
    expert_in[l][e].add_rows(in);
    expert_act[l][e].add_rows(act);
  }
  void on_head_input(const Matrix& x) override { head_in.add_rows(x); }

  std::vector<HessianAccumulator> attn_in, context, moe_in;
  std::vector<std::vector<HessianAccumulator>> expert_in, expert_act;
  HessianAccumulator head_in;
};

const HessianAccumulator* hessian_for(const HessianObserver& obs, const ConstTensorRef& t) {
  const std::string leaf = t.name.substr(t.name.rfind('.') + 1);
  switch (t.role) {
    case TensorRole::attention: return leaf == "wo" ? &obs.context[t.layer] : &obs.attn_in[t.layer];
    case TensorRole::gating: return &obs.moe_in[t.layer];
    case TensorRole::expert:
      return leaf == "w_down" ? &obs.expert_act[t.layer][t.expert] : &obs.expert_in[t.layer][t.expert];
    case TensorRole::head: return &obs.head_in;
    default: return nullptr;
  }
}

}  // namespace

QuantizedModel quantize_model(const MoEModel& model, const BitAllocation& alloc, const Corpus& calib,
                              const QuantizeOptions& opts) {
  const ModelConfig& cfg = model.config;
  opts.spec.validate();
  for (int b : {opts.non_expert_bits, opts.embedding_bits}) {
    require(b == 2 || b == 3 || b == 4 || b == 16, "non-expert bit-widths must be 2, 3, 4 or 16");
  }
  require(alloc.bits.size() == cfg.n_layers, "allocation has " + std::to_string(alloc.bits.size()) +
                                                 " layers, model has " + std::to_string(cfg.n_layers));
  for (const auto& row : alloc.bits) {
    require(row.size() == cfg.n_experts, "allocation expert count does not match the model");
    for (int b : row) require((b >= 1 && b <= 4) || b == 16, "allocation bit-widths must be 1..4 or 16");
  }

  const bool gptq = opts.spec.mode == QuantMode::gptq;
  std::unique_ptr<HessianObserver> obs;
  if (gptq) {
    if (calib.empty()) throw ArgumentError("GPTQ quantization needs a non-empty calibration set");
    obs = std::make_unique<HessianObserver>(cfg);
    ForwardOptions fo;
    fo.observer = obs.get();
    fo.compute_logits = false;
    for (const auto& seq : calib) forward(model, seq, fo);
  }

  QuantizedModel qm;
  qm.config = cfg;
  qm.config_digest = model.digest;
  qm.strategy = alloc.strategy;
  const auto refs = model_tensors(model);
  qm.tensors.resize(refs.size());

  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& t = refs[i];
    if (gptq && t.role == TensorRole::expert && t.name.ends_with("w_gate") &&
        obs->expert_in[t.layer][t.expert].samples() == 0) {
      qm.warnings.push_back("expert " + std::to_string(t.layer) + "." + std::to_string(t.expert) +
                            " received no calibration tokens; quantized without Hessian information");
    }
  }

  parallel_for(refs.size(), opts.threads, [&](std::size_t i) {
    const auto& t = refs[i];
    QuantizedEntry& out = qm.tensors[i];
    out.name = t.name;
    out.role = t.role;
    out.layer = t.layer;
    out.expert = t.expert;
    QuantSpec spec = opts.spec;
    switch (t.role) {
      case TensorRole::norm: spec.bits = 16; break;
      case TensorRole::expert: spec.bits = alloc.bits[t.layer][t.expert]; break;
      case TensorRole::embedding: spec.bits = opts.embedding_bits; break;
      default: spec.bits = opts.non_expert_bits; break;
    }
    if (spec.bits == 16) {
      out.tensor = passthrough(*t.matrix);
      return;
    }
    // Embedding rows are already output channels (one per token id).
    out.transposed = t.role != TensorRole::embedding;
    const Matrix w = out.transposed ? t.matrix->transposed() : *t.matrix;
    std::vector<double> h;
    if (gptq) {
      if (const HessianAccumulator* acc = hessian_for(*obs, t)) h = acc->hessian();
    }
    out.tensor = quantize(w, spec, h.empty() ? nullptr : &h, t.name);
  });
  return qm;
}

QuantizedModel passthrough_model(const MoEModel& model) {
  QuantizedModel qm;
  qm.config = model.config;
  qm.config_digest = model.digest;
  qm.strategy = "passthrough";
  for (const auto& t : model_tensors(model)) {
    qm.tensors.push_back({t.name, t.role, t.layer, t.expert, false, passthrough(*t.matrix)});
  }
  return qm;
}

MoEModel to_model(const QuantizedModel& qm) {
  MoEModel m = zero_model(qm.config);
  auto refs = model_tensors(m);
  if (refs.size() != qm.tensors.size()) throw FormatError("quantized model: tensor count mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const QuantizedEntry& e = qm.tensors[i];
    if (e.name != refs[i].name) throw FormatError("quantized model: unexpected tensor " + e.name);
    Matrix w = dequantize(e.tensor);
    if (e.transposed) w = w.transposed();
    if (w.rows() != refs[i].matrix->rows() || w.cols() != refs[i].matrix->cols()) {
      throw FormatError("quantized model: tensor " + e.name + " has the wrong shape");
    }
    *refs[i].matrix = std::move(w);
  }
  m.digest = qm.config_digest;
  return m;
}

std::vector<std::vector<int>> expert_bits(const QuantizedModel& qm) {
  std::vector<std::vector<int>> bits(qm.config.n_layers, std::vector<int>(qm.config.n_experts, 0));
  for (const auto& e : qm.tensors) {
    if (e.role == TensorRole::expert && e.name.ends_with("w_gate")) bits[e.layer][e.expert] = e.tensor.bits;
  }
  return bits;
}

void save_quantized(const std::string& path, const QuantizedModel& qm) {
  Container c;
  c.magic = "MCQZ";
  c.version = 1;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : qm.tensors) {
    const QuantizedTensor& q = e.tensor;
    nlohmann::json j = {{"name", e.name},
                        {"role", role_name(e.role)},
                        {"layer", e.layer},
                        {"expert", e.expert},
                        {"transposed", e.transposed},
                        {"bits", q.bits},
                        {"rows", q.rows},
                        {"cols", q.cols},
                        {"group_size", q.group_size},
                        {"binary_scale", static_cast<double>(q.binary_scale)}};
    j["packed"] = {{"offset", append_bytes(c.payload, q.packed)}, {"nbytes", q.packed.size()}};
    j["scales"] = {{"offset", append_floats(c.payload, q.scales)}, {"count", q.scales.size()}};
    j["zeros"] = {{"offset", append_floats(c.payload, q.zeros)}, {"count", q.zeros.size()}};
    tensors.push_back(std::move(j));
  }
  c.directory = {{"config", config_to_json(qm.config)},
                 {"config_digest", qm.config_digest},
                 {"strategy", qm.strategy},
                 {"warnings", qm.warnings},
                 {"tensors", tensors}};
  write_container(path, c);
}

QuantizedModel load_quantized(const std::string& path) {
  const Container c = read_container(path, "MCQZ");
  if (c.version != 1) throw FormatError(path + ": unsupported MCQZ version " + std::to_string(c.version));
  QuantizedModel qm;
  try {
    qm.config = config_from_json(c.directory.at("config"));
    qm.config_digest = c.directory.at("config_digest").get<std::string>();
    qm.strategy = c.directory.value("strategy", std::string());
    qm.warnings = c.directory.value("warnings", std::vector<std::string>{});
    for (const auto& j : c.directory.at("tensors")) {
      QuantizedEntry e;
      e.name = j.at("name").get<std::string>();
      e.role = parse_role(j.at("role").get<std::string>());
      e.layer = j.at("layer").get<std::size_t>();
      e.expert = j.at("expert").get<std::size_t>();
      e.transposed = j.at("transposed").get<bool>();
      QuantizedTensor& q = e.tensor;
      q.bits = j.at("bits").get<int>();
      q.rows = j.at("rows").get<std::size_t>();
      q.cols = j.at("cols").get<std::size_t>();
      q.group_size = j.at("group_size").get<std::size_t>();
      q.binary_scale = static_cast<float>(j.at("binary_scale").get<double>());
      const auto off = j.at("packed").at("offset").get<std::uint64_t>();
      const auto nbytes = j.at("packed").at("nbytes").get<std::size_t>();
      if (off + nbytes > c.payload.size()) throw FormatError(path + ": tensor " + e.name + " runs past payload end");
      q.packed.assign(c.payload.begin() + static_cast<std::ptrdiff_t>(off),
                      c.payload.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
      q.scales = read_floats(c.payload, j.at("scales").at("offset").get<std::uint64_t>(),
                             j.at("scales").at("count").get<std::size_t>());
      q.zeros = read_floats(c.payload, j.at("zeros").at("offset").get<std::uint64_t>(),
                            j.at("zeros").at("count").get<std::size_t>());
      q.validate();
      qm.tensors.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(path + ": " + e.what());
  }
  return qm;
}

}  // namespace mixcomp
