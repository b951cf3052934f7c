// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/profiler.hpp"

#include <algorithm>
#include <memory>

#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"
#include "mixcomp/quantizer.hpp"

namespace mixcomp {
namespace {

// Per-expert sums of squared inputs (gate/up) and activations (down).
class SquareSumObserver : public ForwardObserver {
 public:
  SquareSumObserver(std::size_t layers, std::size_t experts, std::size_t hidden, std::size_t inter)
      : in_sq(layers, std::vector<std::vector<double>>(experts, std::vector<double>(hidden, 0.0))),
        act_sq(layers, std::vector<std::vector<double>>(experts, std::vector<double>(inter, 0.0))) {}

  void on_expert_io(std::size_t layer, std::size_t expert, const Matrix& inputs, const Matrix& activations) override {
    accumulate(in_sq[layer][expert], inputs);
    accumulate(act_sq[layer][expert], activations);
  }

  std::vector<std::vector<std::vector<double>>> in_sq;
  std::vector<std::vector<std::vector<double>>> act_sq;

 private:
  static void accumulate(std::vector<double>& acc, const Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      auto row = m.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) acc[c] += static_cast<double>(row[c]) * row[c];
    }
  }
};

struct SequencePass {
  std::vector<std::vector<double>> counts;   // [layer][expert]
  std::vector<std::vector<double>> weights;  // [layer][expert]
  std::vector<std::vector<float>> ratios;    // [layer][token]
  std::vector<Matrix> layer_inputs;
  Matrix final_hidden;
  std::vector<std::vector<std::vector<double>>> in_sq;
  std::vector<std::vector<std::vector<double>>> act_sq;
};

void check_calibration(const MoEModel& model, const Corpus& calib) {
  if (calib.empty()) throw ArgumentError("calibration set is empty");
  for (const auto& s : calib) {
    if (s.empty()) throw ArgumentError("calibration set contains an empty sequence");
  }
  model.config.validate();
}

std::vector<SequencePass> dense_passes(const MoEModel& model, const Corpus& calib, const ProfileOptions& opts,
                                       bool capture, bool squares) {
  const ModelConfig& cfg = model.config;
  std::vector<SequencePass> out(calib.size());
  parallel_for(calib.size(), opts.threads, [&](std::size_t s) {
    std::unique_ptr<SquareSumObserver> obs;
    if (squares) obs = std::make_unique<SquareSumObserver>(cfg.n_layers, cfg.n_experts, cfg.hidden, cfg.intermediate);
    ForwardOptions fo;
    fo.compute_logits = false;
    fo.capture_layer_inputs = capture;
    fo.observer = obs.get();
    ForwardTrace tr = forward(model, calib[s], fo);
    SequencePass& p = out[s];
    p.counts.assign(cfg.n_layers, std::vector<double>(cfg.n_experts, 0.0));
    p.weights.assign(cfg.n_layers, std::vector<double>(cfg.n_experts, 0.0));
    p.ratios.assign(cfg.n_layers, {});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (const Routing& r : tr.layers[l].routing) {
        for (std::size_t k = 0; k < r.experts.size(); ++k) {
          p.counts[l][r.experts[k]] += 1.0;
          p.weights[l][r.experts[k]] += r.weights[k];
        }
        if (r.experts.size() >= 2) p.ratios[l].push_back(r.ratio);
      }
    }
    if (capture) {
      p.layer_inputs = std::move(tr.layer_inputs);
      p.final_hidden = std::move(tr.final_hidden);
    }
    if (obs) {
      p.in_sq = std::move(obs->in_sq);
      p.act_sq = std::move(obs->act_sq);
    }
  });
  return out;
}

ExpertStats merge_routing(const MoEModel& model, const Corpus& calib, const std::vector<SequencePass>& passes,
                          const ProfileOptions& opts) {
  const ModelConfig& cfg = model.config;
  ExpertStats st;
  st.config_digest = model.digest;
  st.top_k = cfg.top_k;
  for (const auto& s : calib) st.n_tokens += s.size();
  std::vector<std::vector<double>> counts(cfg.n_layers, std::vector<double>(cfg.n_experts, 0.0));
  std::vector<std::vector<double>> weights = counts;
  st.ratio_samples.assign(cfg.n_layers, {});
  for (const auto& p : passes) {
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t e = 0; e < cfg.n_experts; ++e) {
        counts[l][e] += p.counts[l][e];
        weights[l][e] += p.weights[l][e];
      }
      st.ratio_samples[l].insert(st.ratio_samples[l].end(), p.ratios[l].begin(), p.ratios[l].end());
    }
  }
  const double N = static_cast<double>(st.n_tokens);
  st.phi.assign(cfg.n_layers, std::vector<float>(cfg.n_experts));
  st.w.assign(cfg.n_layers, std::vector<float>(cfg.n_experts));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t e = 0; e < cfg.n_experts; ++e) {
      st.phi[l][e] = static_cast<float>(counts[l][e] / N);
      st.w[l][e] = static_cast<float>(weights[l][e] / N);
    }
    st.ratio_median.push_back(st.ratio_samples[l].empty()
                                  ? 0.0f
                                  : static_cast<float>(median(std::span<const float>(st.ratio_samples[l]))));
  }
  if (!opts.keep_ratio_samples) st.ratio_samples.clear();
  return st;
}

Matrix quantized_image(const Matrix& w, int bits, std::size_t group_size) {
  if (bits == 16) return w;
  QuantSpec spec;
  spec.bits = bits;
  spec.group_size = group_size;
  spec.mode = QuantMode::rtn;
  return dequantize(quantize(w.transposed(), spec)).transposed();
}

double eps_from_cache(const MoEModel& model, const std::vector<SequencePass>& passes, std::size_t layer,
                      const ExpertWeights& perturbed, std::size_t expert, const ProfileOptions& opts) {
  const std::size_t B = model.config.n_layers;
  const std::size_t last = opts.target == EpsTarget::final_hidden ? B : layer + 1;
  ForwardOptions fo;
  fo.expert_override = ExpertOverride{layer, expert, &perturbed};
  std::vector<double> dist(passes.size(), 0.0);
  parallel_for(passes.size(), opts.threads, [&](std::size_t s) {
    const SequencePass& p = passes[s];
    const Matrix& ref = last == B ? p.final_hidden : p.layer_inputs[last];
    const Matrix out = forward_layers(model, p.layer_inputs[layer], layer, last, fo);
    dist[s] = frobenius_distance(out, ref);
  });
  double sum = 0.0;
  for (double d : dist) sum += d;
  return sum / static_cast<double>(passes.size());
}

double weighted_delta(const Matrix& w, const Matrix& wq, const std::vector<double>& diag) {
  // w is stored (in × out); diag indexes the input dimension.
  double acc = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const double d = static_cast<double>(w(r, c)) - wq(r, c);
      acc += diag[r] * d * d;
    }
  }
  return acc;
}

void check_expert_index(const MoEModel& model, std::size_t layer, std::size_t expert) {
  if (layer >= model.config.n_layers) throw ArgumentError("layer index " + std::to_string(layer) + " out of range");
  if (expert >= model.config.n_experts) throw ArgumentError("expert index " + std::to_string(expert) + " out of range");
}

}  // namespace

ExpertWeights fake_quantize_expert(const ExpertWeights& e, int bits, std::size_t group_size) {
  return {quantized_image(e.w_gate, bits, group_size), quantized_image(e.w_up, bits, group_size),
          quantized_image(e.w_down, bits, group_size)};
}

ExpertStats collect_routing_stats(const MoEModel& model, const Corpus& calib, const ProfileOptions& opts) {
  check_calibration(model, calib);
  return merge_routing(model, calib, dense_passes(model, calib, opts, false, false), opts);
}

double quantization_error_eps(const MoEModel& model, const Corpus& calib, std::size_t layer, std::size_t expert,
                              int bits, const ProfileOptions& opts) {
  check_expert_index(model, layer, expert);
  if (bits != 1 && bits != 2 && bits != 3 && bits != 4 && bits != 16) {
    throw ArgumentError("quantization_error_eps: unsupported bit-width " + std::to_string(bits));
  }
  check_calibration(model, calib);
  const auto passes = dense_passes(model, calib, opts, true, false);
  const ExpertWeights q = fake_quantize_expert(model.layers[layer].experts[expert], bits, opts.group_size);
  return eps_from_cache(model, passes, layer, q, expert, opts);
}

ExpertStats collect_all(const MoEModel& model, const Corpus& calib, const ProfileOptions& opts) {
  check_calibration(model, calib);
  const ModelConfig& cfg = model.config;
  const auto passes = dense_passes(model, calib, opts, true, opts.hessian_proxy);
  ExpertStats st = merge_routing(model, calib, passes, opts);
  st.eps.assign(cfg.n_layers, std::vector<std::array<float, 3>>(cfg.n_experts, {0.0f, 0.0f, 0.0f}));
  st.hessian_proxy = st.eps;
  const double f = 2.0 / static_cast<double>(st.n_tokens);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t e = 0; e < cfg.n_experts; ++e) {
      const ExpertWeights& orig = model.layers[l].experts[e];
      std::vector<double> in_diag(cfg.hidden, 0.0);
      std::vector<double> act_diag(cfg.intermediate, 0.0);
      if (opts.hessian_proxy) {
        for (const auto& p : passes) {
          for (std::size_t c = 0; c < cfg.hidden; ++c) in_diag[c] += p.in_sq[l][e][c];
          for (std::size_t c = 0; c < cfg.intermediate; ++c) act_diag[c] += p.act_sq[l][e][c];
        }
        for (double& v : in_diag) v *= f;
        for (double& v : act_diag) v *= f;
      }
      for (int b = 1; b <= 3; ++b) {
        const ExpertWeights q = fake_quantize_expert(orig, b, opts.group_size);
        st.eps[l][e][b - 1] = static_cast<float>(eps_from_cache(model, passes, l, q, e, opts));
        if (opts.hessian_proxy) {
          st.hessian_proxy[l][e][b - 1] =
              static_cast<float>(weighted_delta(orig.w_gate, q.w_gate, in_diag) +
                                 weighted_delta(orig.w_up, q.w_up, in_diag) +
                                 weighted_delta(orig.w_down, q.w_down, act_diag));
        }
      }
    }
  }
  if (!opts.hessian_proxy) st.hessian_proxy.clear();
  return st;
}

namespace {

nlohmann::json float_grid(const std::vector<std::vector<float>>& g) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& row : g) {
    nlohmann::json r = nlohmann::json::array();
    for (float v : row) r.push_back(round9(v));
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json bit_grid(const std::vector<std::vector<std::array<float, 3>>>& g) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& layer : g) {
    nlohmann::json l = nlohmann::json::array();
    for (const auto& e : layer) l.push_back({round9(e[0]), round9(e[1]), round9(e[2])});
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace

nlohmann::json stats_to_json(const ExpertStats& s) {
  nlohmann::json med = nlohmann::json::array();
  for (float m : s.ratio_median) med.push_back(round9(m));
  nlohmann::json j = {{"config_digest", s.config_digest},
                      {"n_tokens", s.n_tokens},
                      {"top_k", s.top_k},
                      {"phi", float_grid(s.phi)},
                      {"w", float_grid(s.w)},
                      {"eps", bit_grid(s.eps)},
                      {"ratio_median", med}};
  if (!s.hessian_proxy.empty()) j["hessian_proxy"] = bit_grid(s.hessian_proxy);
  if (!s.ratio_samples.empty()) j["ratio_samples"] = float_grid(s.ratio_samples);
  return j;
}

ExpertStats stats_from_json(const nlohmann::json& j) {
  ExpertStats s;
  try {
    s.config_digest = j.value("config_digest", std::string());
    s.n_tokens = j.at("n_tokens").get<std::size_t>();
    s.top_k = j.value("top_k", std::size_t{0});
    s.phi = j.at("phi").get<std::vector<std::vector<float>>>();
    s.w = j.at("w").get<std::vector<std::vector<float>>>();
    s.eps = j.at("eps").get<std::vector<std::vector<std::array<float, 3>>>>();
    if (j.contains("hessian_proxy")) {
      s.hessian_proxy = j.at("hessian_proxy").get<std::vector<std::vector<std::array<float, 3>>>>();
    }
    s.ratio_median = j.value("ratio_median", std::vector<float>{});
    if (j.contains("ratio_samples")) s.ratio_samples = j.at("ratio_samples").get<std::vector<std::vector<float>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("stats file: ") + e.what());
  }
  const std::size_t L = s.phi.size();
  auto shaped = [&](const auto& grid) {
    if (grid.size() != L) return false;
    for (const auto& row : grid)
      if (row.size() != s.n_experts()) return false;
    return true;
  };
  if (L == 0 || !shaped(s.w) || !shaped(s.eps) || (!s.hessian_proxy.empty() && !shaped(s.hessian_proxy)) ||
      (!s.ratio_median.empty() && s.ratio_median.size() != L)) {
    throw FormatError("stats file: inconsistent layer/expert shapes");
  }
  return s;
}

void save_stats(const std::string& path, const ExpertStats& s) { write_text_file(path, stats_to_json(s).dump() + "\n"); }

ExpertStats load_stats(const std::string& path) {
  try {
    return stats_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace mixcomp
