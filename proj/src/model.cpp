// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"

namespace mixcomp {

void ModelConfig::validate() const {
  require(n_layers >= 1 && hidden >= 1 && n_heads >= 1 && head_dim >= 1 && intermediate >= 1 &&
              n_experts >= 1 && top_k >= 1 && vocab >= 1,
          "model config: all counts must be >= 1");
  require(n_heads * head_dim == hidden, "model config: n_heads * head_dim must equal hidden");
  require(top_k <= n_experts, "model config: top_k must not exceed n_experts");
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"hidden", c.hidden},         {"n_heads", c.n_heads},
          {"head_dim", c.head_dim}, {"intermediate", c.intermediate}, {"n_experts", c.n_experts},
          {"top_k", c.top_k},       {"vocab", c.vocab}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.intermediate = j.at("intermediate").get<std::size_t>();
    c.n_experts = j.at("n_experts").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

template <typename Model, typename Ref>
std::vector<Ref> collect_tensors(Model& m) {
  std::vector<Ref> out;
  out.push_back({"embeddings", TensorRole::embedding, 0, 0, &m.embeddings});
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& L = m.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", TensorRole::norm, l, 0, &L.attn_norm});
    out.push_back({p + "wq", TensorRole::attention, l, 0, &L.wq});
    out.push_back({p + "wk", TensorRole::attention, l, 0, &L.wk});
    out.push_back({p + "wv", TensorRole::attention, l, 0, &L.wv});
    out.push_back({p + "wo", TensorRole::attention, l, 0, &L.wo});
    out.push_back({p + "ffn_norm", TensorRole::norm, l, 0, &L.ffn_norm});
    out.push_back({p + "gate", TensorRole::gating, l, 0, &L.gate});
    for (std::size_t e = 0; e < L.experts.size(); ++e) {
      const std::string q = p + "experts." + std::to_string(e) + ".";
      out.push_back({q + "w_gate", TensorRole::expert, l, e, &L.experts[e].w_gate});
      out.push_back({q + "w_up", TensorRole::expert, l, e, &L.experts[e].w_up});
      out.push_back({q + "w_down", TensorRole::expert, l, e, &L.experts[e].w_down});
    }
  }
  out.push_back({"final_norm", TensorRole::norm, 0, 0, &m.final_norm});
  out.push_back({"head", TensorRole::head, 0, 0, &m.head});
  return out;
}

Matrix gaussian(std::size_t rows, std::size_t cols, SeededRng& rng) {
  Matrix m(rows, cols);
  const double sd = 1.0 / std::sqrt(static_cast<double>(rows));
  for (float& v : m.data()) v = static_cast<float>(rng.normal(0.0, sd));
  return m;
}

}  // namespace

std::vector<TensorRef> model_tensors(MoEModel& model) {
  return collect_tensors<MoEModel, TensorRef>(model);
}

std::vector<ConstTensorRef> model_tensors(const MoEModel& model) {
  return collect_tensors<const MoEModel, ConstTensorRef>(model);
}

std::string compute_digest(const MoEModel& model) {
  const std::string cfg = config_to_json(model.config).dump();
  std::uint64_t h = fnv1a({reinterpret_cast<const std::uint8_t*>(cfg.data()), cfg.size()});
  for (const auto& t : model_tensors(model)) {
    auto d = t.matrix->data();
    h = fnv1a({reinterpret_cast<const std::uint8_t*>(d.data()), d.size() * sizeof(float)}, h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

MoEModel zero_model(const ModelConfig& config) {
  config.validate();
  const std::size_t H = config.hidden;
  MoEModel m;
  m.config = config;
  m.embeddings = Matrix(config.vocab, H);
  m.layers.resize(config.n_layers);
  for (auto& L : m.layers) {
    L.attn_norm = Matrix(1, H, 1.0f);
    L.wq = L.wk = L.wv = L.wo = Matrix(H, H);
    L.ffn_norm = Matrix(1, H, 1.0f);
    L.gate = Matrix(H, config.n_experts);
    L.experts.assign(config.n_experts, {Matrix(H, config.intermediate), Matrix(H, config.intermediate),
                                        Matrix(config.intermediate, H)});
  }
  m.final_norm = Matrix(1, H, 1.0f);
  m.head = Matrix(H, config.vocab);
  return m;
}

MoEModel gen_synthetic(const ModelConfig& config, SeededRng& rng) {
  config.validate();
  const std::size_t H = config.hidden;
  MoEModel m;
  m.config = config;
  m.embeddings = gaussian(config.vocab, H, rng);
  m.layers.resize(config.n_layers);
  for (auto& L : m.layers) {
    L.attn_norm = Matrix(1, H, 1.0f);
    L.wq = gaussian(H, H, rng);
    L.wk = gaussian(H, H, rng);
    L.wv = gaussian(H, H, rng);
    L.wo = gaussian(H, H, rng);
    L.ffn_norm = Matrix(1, H, 1.0f);
    L.gate = gaussian(H, config.n_experts, rng);
    L.experts.resize(config.n_experts);
    for (auto& e : L.experts) {
      e.w_gate = gaussian(H, config.intermediate, rng);
      e.w_up = gaussian(H, config.intermediate, rng);
      e.w_down = gaussian(config.intermediate, H, rng);
    }
  }
  m.final_norm = Matrix(1, H, 1.0f);
  m.head = gaussian(H, config.vocab, rng);
  m.digest = compute_digest(m);
  return m;
}

Routing route(std::span<const float> gate_logits, std::size_t top_k) {
  Routing r;
  r.experts = topk_indices(gate_logits, top_k);
  std::vector<float> selected(top_k);
  for (std::size_t s = 0; s < top_k; ++s) selected[s] = gate_logits[r.experts[s]];
  r.weights = softmax(selected);
  r.ratio = top_k >= 2 ? r.weights[1] / r.weights[0] : 0.0f;
  return r;
}

Matrix expert_forward_rows(const ExpertWeights& e, const Matrix& x, Matrix* activations) {
  Matrix g = matmul(x, e.w_gate);
  const Matrix u = matmul(x, e.w_up);
  auto gd = g.data();
  auto ud = u.data();
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = silu(gd[i]) * ud[i];
  Matrix out = matmul(g, e.w_down);
  if (activations) *activations = std::move(g);
  return out;
}

std::vector<float> expert_forward(const ExpertWeights& e, std::span<const float> x) {
  Matrix row(1, x.size(), std::vector<float>(x.begin(), x.end()));
  const Matrix out = expert_forward_rows(e, row);
  return {out.data().begin(), out.data().end()};
}

namespace {

struct AttentionResult {
  Matrix output;  // L × H, before the residual add
  Matrix map;     // L × L
};

AttentionResult attention_block(const LayerWeights& L, const ModelConfig& cfg, const Matrix& normed,
                                int head_select, std::size_t layer, ForwardObserver* obs) {
  const std::size_t T = normed.rows();
  const std::size_t d = cfg.head_dim;
  const Matrix q = matmul(normed, L.wq);
  const Matrix k = matmul(normed, L.wk);
  const Matrix v = matmul(normed, L.wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Matrix context(T, cfg.hidden);
  std::vector<double> map_sum(T * T, 0.0);
  Matrix selected_map;
  std::vector<float> scores;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * d;
    Matrix probs(T, T);
    for (std::size_t i = 0; i < T; ++i) {
      scores.assign(i + 1, 0.0f);
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(q(i, off + c)) * k(j, off + c);
        scores[j] = static_cast<float>(s * scale);
      }
      const auto p = softmax(scores);
      for (std::size_t j = 0; j <= i; ++j) probs(i, j) = p[j];
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += static_cast<double>(p[j]) * v(j, off + c);
        context(i, off + c) = static_cast<float>(acc);
      }
    }
    auto pd = probs.data();
    for (std::size_t i = 0; i < pd.size(); ++i) map_sum[i] += pd[i];
    if (static_cast<int>(h) == head_select) selected_map = std::move(probs);
  }
  if (obs) obs->on_attention_context(layer, context);

  AttentionResult r;
  r.output = matmul(context, L.wo);
  if (head_select >= 0) {
    r.map = std::move(selected_map);
  } else {
    r.map = Matrix(T, T);
    auto md = r.map.data();
    for (std::size_t i = 0; i < md.size(); ++i) md[i] = static_cast<float>(map_sum[i] / static_cast<double>(cfg.n_heads));
  }
  return r;
}

bool pruning_active(const ForwardOptions& opts) {
  return opts.policy != nullptr && opts.policy->mode != PruneMode::off;
}

/// One transformer block; updates `x` in place and fills `lt` / `prune` when given.
void run_block(const MoEModel& model, std::size_t layer, Matrix& x, const ForwardOptions& opts, LayerTrace* lt,
               LayerPruneTrace* prune_slice, std::vector<std::size_t>* counts,
               std::vector<std::size_t>* once_protected, std::size_t* invocations) {
  const ModelConfig& cfg = model.config;
  const LayerWeights& L = model.layers[layer];
  const std::size_t T = x.rows();

  const Matrix h_attn = rms_norm(x, L.attn_norm.data());
  if (opts.observer) opts.observer->on_attention_input(layer, h_attn);
  AttentionResult att = attention_block(L, cfg, h_attn, opts.attention_head, layer, opts.observer);
  {
    auto xd = x.data();
    auto ad = att.output.data();
    for (std::size_t i = 0; i < xd.size(); ++i) xd[i] += ad[i];
  }

  const Matrix hn = rms_norm(x, L.ffn_norm.data());
  if (opts.observer) opts.observer->on_moe_input(layer, hn);
  const Matrix logits = matmul(hn, L.gate);
  std::vector<Routing> routing(T);
  for (std::size_t t = 0; t < T; ++t) routing[t] = route(logits.row(t), cfg.top_k);

  std::vector<TokenAction> actions(T, TokenAction::keep_all);
  if (pruning_active(opts)) {
    const bool reuse = opts.policy->scope == ProtectScope::once && once_protected && layer > 0;
    LayerPruneResult pr = apply_layer(*opts.policy, layer, x, att.map, routing, reuse ? once_protected : nullptr);
    if (opts.policy->scope == ProtectScope::once && once_protected && layer == 0) {
      *once_protected = pr.trace.protected_tokens;
    }
    actions = std::move(pr.actions);
    if (prune_slice) *prune_slice = std::move(pr.trace);
  }

  // Group tokens per expert, keeping token order within each group.
  const std::size_t E = cfg.n_experts;
  std::vector<std::vector<std::size_t>> members(E);
  std::vector<std::vector<std::size_t>> slot_of(T);  // slot -> row inside the expert batch
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t active = actions[t] == TokenAction::drop_all      ? 0
                               : actions[t] == TokenAction::drop_second ? 1
                                                                        : cfg.top_k;
    slot_of[t].assign(active, 0);
    for (std::size_t s = 0; s < active; ++s) {
      const std::size_t e = routing[t].experts[s];
      slot_of[t][s] = members[e].size();
      members[e].push_back(t);
    }
  }

  std::vector<Matrix> outputs(E);
  for (std::size_t e = 0; e < E; ++e) {
    if (counts) (*counts)[e] = members[e].size();
    if (invocations) *invocations += members[e].size();
    if (members[e].empty()) continue;
    Matrix xin(members[e].size(), cfg.hidden);
    for (std::size_t r = 0; r < members[e].size(); ++r) {
      auto src = hn.row(members[e][r]);
      std::copy(src.begin(), src.end(), xin.row(r).begin());
    }
    const ExpertWeights* w = &L.experts[e];
    if (opts.expert_override && opts.expert_override->layer == layer && opts.expert_override->expert == e) {
      w = opts.expert_override->weights;
    }
    Matrix act;
    outputs[e] = expert_forward_rows(*w, xin, opts.observer ? &act : nullptr);
    if (opts.observer) opts.observer->on_expert_io(layer, e, xin, act);
  }

  std::vector<float> y(cfg.hidden);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t active = slot_of[t].size();
    if (active == 0) continue;  // residual passes through
    std::fill(y.begin(), y.end(), 0.0f);
    for (std::size_t s = 0; s < active; ++s) {
      const std::size_t e = routing[t].experts[s];
      const float w = active == cfg.top_k ? routing[t].weights[s] : 1.0f;
      auto out = outputs[e].row(slot_of[t][s]);
      for (std::size_t c = 0; c < cfg.hidden; ++c) y[c] += w * out[c];
    }
    auto xr = x.row(t);
    for (std::size_t c = 0; c < cfg.hidden; ++c) xr[c] += y[c];
  }

  if (lt) {
    lt->routing = std::move(routing);
    lt->attention = std::move(att.map);
  }
}

void check_options(const MoEModel& model, const ForwardOptions& opts) {
  if (opts.attention_head >= static_cast<int>(model.config.n_heads)) {
    throw ArgumentError("attention_head out of range");
  }
  if (pruning_active(opts)) {
    opts.policy->validate(model.config.n_layers);
    if (model.config.top_k != 2) throw ArgumentError("expert pruning requires top_k = 2");
  }
  if (opts.expert_override) {
    const auto& ov = *opts.expert_override;
    if (ov.layer >= model.config.n_layers || ov.expert >= model.config.n_experts || ov.weights == nullptr) {
      throw ArgumentError("invalid expert override");
    }
  }
}

}  // namespace

ForwardTrace forward(const MoEModel& model, std::span<const TokenId> tokens, const ForwardOptions& options) {
  const ModelConfig& cfg = model.config;
  if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
  for (TokenId t : tokens) {
    if (t >= cfg.vocab) {
      throw ArgumentError("forward: token id " + std::to_string(t) + " >= vocab " + std::to_string(cfg.vocab));
    }
  }
  check_options(model, options);

  const std::size_t T = tokens.size();
  Matrix x(T, cfg.hidden);
  for (std::size_t t = 0; t < T; ++t) {
    auto src = model.embeddings.row(tokens[t]);
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }

  ForwardTrace trace;
  trace.model_digest = model.digest;
  trace.layers.resize(cfg.n_layers);
  trace.activation_counts.assign(cfg.n_layers, std::vector<std::size_t>(cfg.n_experts, 0));
  const bool pruning = pruning_active(options);
  trace.prune.model_digest = model.digest;
  trace.prune.seq_len = T;
  trace.prune.invocations_dense = cfg.top_k * T * cfg.n_layers;
  if (pruning) trace.prune.layers.resize(cfg.n_layers);

  std::vector<std::size_t> once_protected;
  std::size_t invocations = 0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (options.capture_layer_inputs) trace.layer_inputs.push_back(x);
    run_block(model, l, x, options, &trace.layers[l], pruning ? &trace.prune.layers[l] : nullptr,
              &trace.activation_counts[l], &once_protected, &invocations);
  }
  trace.prune.invocations_actual = invocations;

  if (options.compute_logits || options.observer) {
    const Matrix fin = rms_norm(x, model.final_norm.data());
    if (options.observer) options.observer->on_head_input(fin);
    if (options.compute_logits) trace.logits = matmul(fin, model.head);
  }
  trace.final_hidden = std::move(x);
  return trace;
}

Matrix forward_layers(const MoEModel& model, Matrix residual, std::size_t first, std::size_t last,
                      const ForwardOptions& options) {
  if (first > last || last > model.config.n_layers) throw ArgumentError("forward_layers: bad layer range");
  if (residual.cols() != model.config.hidden) throw ShapeError("forward_layers: residual width mismatch");
  check_options(model, options);
  std::vector<std::size_t> once_protected;
  for (std::size_t l = first; l < last; ++l) {
    run_block(model, l, residual, options, nullptr, nullptr, nullptr, &once_protected, nullptr);
  }
  return residual;
}

void save_checkpoint(const std::string& path, const MoEModel& model) {
  Container c;
  c.magic = "MCKP";
  c.version = 1;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : model_tensors(model)) {
    const std::uint64_t off = append_floats(c.payload, t.matrix->data());
    tensors.push_back({{"name", t.name},
                       {"shape", {t.matrix->rows(), t.matrix->cols()}},
                       {"offset", off},
                       {"nbytes", t.matrix->size() * sizeof(float)}});
  }
  c.directory = {{"config", config_to_json(model.config)}, {"digest", model.digest}, {"tensors", tensors}};
  write_container(path, c);
}

MoEModel load_checkpoint(const std::string& path) {
  const Container c = read_container(path, "MCKP");
  if (c.version != 1) throw FormatError(path + ": unsupported MCKP version " + std::to_string(c.version));
  ModelConfig cfg;
  std::string digest;
  try {
    cfg = config_from_json(c.directory.at("config"));
    digest = c.directory.at("digest").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(path + ": " + e.what());
  }
  MoEModel m = zero_model(cfg);
  m.digest = digest;

  try {
    const auto& dir = c.directory.at("tensors");
    auto refs = model_tensors(m);
    if (dir.size() != refs.size()) throw FormatError(path + ": tensor count mismatch");
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto& entry = dir[i];
      if (entry.at("name").get<std::string>() != refs[i].name) {
        throw FormatError(path + ": unexpected tensor " + entry.at("name").get<std::string>());
      }
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2 || shape[0] != refs[i].matrix->rows() || shape[1] != refs[i].matrix->cols()) {
        throw FormatError(path + ": tensor " + refs[i].name + " has the wrong shape for the config");
      }
      auto data = read_floats(c.payload, entry.at("offset").get<std::uint64_t>(), shape[0] * shape[1]);
      *refs[i].matrix = Matrix(shape[0], shape[1], std::move(data));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (compute_digest(m) != m.digest) throw FormatError(path + ": digest mismatch (corrupt checkpoint)");
  return m;
}

}  // namespace mixcomp
