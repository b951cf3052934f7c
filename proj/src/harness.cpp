// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>

#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"

namespace mixcomp {

Corpus parse_corpus_text(const std::string& text) {
  Corpus corpus;
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    std::istringstream ids(line);
    Sequence seq;
    std::string tok;
    while (ids >> tok) {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(tok.c_str(), &end, 10);
      if (*end != '\0' || tok[0] == '-' || v > 0xffffffffULL) {
        throw FormatError("corpus line " + std::to_string(lineno) + ": bad token id '" + tok + "'");
      }
      seq.push_back(static_cast<TokenId>(v));
    }
    if (!seq.empty()) corpus.push_back(std::move(seq));
  }
  return corpus;
}

std::string format_corpus_text(const Corpus& corpus) {
  std::string out;
  for (const auto& seq : corpus) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(seq[i]);
    }
    out += '\n';
  }
  return out;
}

std::vector<std::uint8_t> encode_corpus_binary(const Corpus& corpus) {
  std::vector<std::uint8_t> out;
  auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  for (const auto& seq : corpus) {
    put(static_cast<std::uint32_t>(seq.size()));
    for (TokenId t : seq) put(t);
  }
  return out;
}

Corpus decode_corpus_binary(const std::vector<std::uint8_t>& bytes) {
  auto get = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
    return v;
  };
  Corpus corpus;
  std::size_t at = 0;
  while (at < bytes.size()) {
    if (at + 4 > bytes.size()) throw FormatError("binary corpus: truncated length prefix");
    const std::size_t n = get(at);
    at += 4;
    if (at + 4 * n > bytes.size()) throw FormatError("binary corpus: sequence runs past end of file");
    Sequence seq(n);
    for (std::size_t i = 0; i < n; ++i, at += 4) seq[i] = get(at);
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

Corpus read_corpus(const std::string& path) {
  const std::string data = read_text_file(path);
  if (std::filesystem::path(path).extension() == ".bin") {
    return decode_corpus_binary(std::vector<std::uint8_t>(data.begin(), data.end()));
  }
  return parse_corpus_text(data);
}

void write_corpus(const std::string& path, const Corpus& corpus) {
  if (std::filesystem::path(path).extension() == ".bin") {
    const auto bytes = encode_corpus_binary(corpus);
    write_text_file(path, std::string(bytes.begin(), bytes.end()));
  } else {
    write_text_file(path, format_corpus_text(corpus));
  }
}

Corpus random_corpus(std::size_t n_seqs, std::size_t seq_len, std::size_t vocab, SeededRng& rng) {
  require(vocab >= 1 && seq_len >= 1, "random_corpus: vocab and seq_len must be >= 1");
  Corpus c(n_seqs, Sequence(seq_len));
  for (auto& s : c)
    for (auto& t : s) t = static_cast<TokenId>(rng.uniform_index(vocab));
  return c;
}

Corpus sample_corpus(const MoEModel& model, std::size_t n_seqs, std::size_t seq_len, SeededRng& rng,
                     double temperature) {
  require(seq_len >= 1, "sample_corpus: seq_len must be >= 1");
  require(temperature > 0.0, "sample_corpus: temperature must be positive");
  const std::size_t V = model.config.vocab;
  Corpus corpus;
  std::vector<double> probs(V);
  for (std::size_t s = 0; s < n_seqs; ++s) {
    Sequence seq{static_cast<TokenId>(rng.uniform_index(V))};
    while (seq.size() < seq_len) {
      const ForwardTrace tr = forward(model, seq);
      auto last = tr.logits.row(tr.logits.rows() - 1);
      double top = -INFINITY;
      for (float v : last) top = std::max(top, static_cast<double>(v) / temperature);
      for (std::size_t v = 0; v < V; ++v) probs[v] = std::exp(static_cast<double>(last[v]) / temperature - top);
      std::discrete_distribution<std::size_t> pick(probs.begin(), probs.end());
      seq.push_back(static_cast<TokenId>(pick(rng.engine())));
    }
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

double LayerPruneStats::pruned_fraction_unprotected() const {
  const std::size_t eligible = tokens - protected_tokens - dropped;
  return eligible == 0 ? 0.0 : static_cast<double>(pruned) / static_cast<double>(eligible);
}

EvalResult evaluate(const MoEModel& model, const Corpus& corpus, const PruningPolicy* policy, std::size_t threads) {
  if (corpus.empty()) throw ArgumentError("evaluation corpus is empty");
  const ModelConfig& cfg = model.config;
  struct Partial {
    double nll = 0.0;
    std::size_t positions = 0;
    ForwardTrace trace;
  };
  std::vector<Partial> parts(corpus.size());
  parallel_for(corpus.size(), threads, [&](std::size_t s) {
    const Sequence& seq = corpus[s];
    ForwardOptions fo;
    fo.policy = policy;
    fo.compute_logits = seq.size() > 1;
    Partial& p = parts[s];
    p.trace = forward(model, seq, fo);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      auto row = p.trace.logits.row(t);
      double top = -INFINITY;
      for (float v : row) top = std::max(top, static_cast<double>(v));
      double z = 0.0;
      for (float v : row) z += std::exp(static_cast<double>(v) - top);
      p.nll += top + std::log(z) - static_cast<double>(row[seq[t + 1]]);
      ++p.positions;
    }
    p.trace.logits = Matrix();
    p.trace.layers.clear();
  });

  EvalResult r;
  RunActivity& a = r.activity;
  a.model_digest = model.digest;
  a.counts.assign(cfg.n_layers, std::vector<std::size_t>(cfg.n_experts, 0));
  a.layers.assign(cfg.n_layers, {});
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const Partial& p = parts[s];
    r.nll_sum += p.nll;
    r.positions += p.positions;
    a.tokens += corpus[s].size();
    a.invocations_dense += p.trace.prune.invocations_dense;
    a.invocations_actual += p.trace.prune.invocations_actual;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      for (std::size_t e = 0; e < cfg.n_experts; ++e) a.counts[l][e] += p.trace.activation_counts[l][e];
      LayerPruneStats& ls = a.layers[l];
      ls.tokens += corpus[s].size();
      if (l < p.trace.prune.layers.size()) {
        const auto& pl = p.trace.prune.layers[l];
        ls.pruned += pl.pruned.size();
        ls.protected_tokens += pl.protected_tokens.size();
        ls.dropped += pl.dropped.size();
      }
    }
  }
  if (r.positions == 0) throw ArgumentError("evaluation corpus has no next-token positions");
  r.perplexity = std::exp(r.nll_sum / static_cast<double>(r.positions));
  return r;
}

double perplexity(const MoEModel& model, const Corpus& corpus, const PruningPolicy* policy, std::size_t threads) {
  return evaluate(model, corpus, policy, threads).perplexity;
}

double perplexity(const QuantizedModel& qm, const Corpus& corpus, const PruningPolicy* policy, std::size_t threads) {
  return perplexity(to_model(qm), corpus, policy, threads);
}

double SizeAccounting::avg_bits_overall() const {
  return element_count == 0 ? 0.0 : static_cast<double>(total_bits) / static_cast<double>(element_count);
}

double SizeAccounting::avg_payload_bits_experts() const {
  return expert_elements == 0 ? 0.0 : static_cast<double>(expert_payload_bits) / static_cast<double>(expert_elements);
}

double SizeAccounting::avg_bits_experts() const {
  return expert_elements == 0 ? 0.0 : static_cast<double>(expert_bits) / static_cast<double>(expert_elements);
}

namespace {

std::uint64_t stored_bits(const QuantizedTensor& q) {
  if (q.bits == 16) return 16ULL * q.element_count();
  std::uint64_t bits = 8ULL * q.packed.size();
  if (q.bits == 1) return bits + 16;
  return bits + 16ULL * (q.scales.size() + q.zeros.size());
}

std::uint64_t shaped_bits(std::uint64_t out_rows, std::uint64_t in_cols, int bits, std::size_t group) {
  const std::uint64_t n = out_rows * in_cols;
  if (bits == 16) return 16 * n;
  std::uint64_t total = n * static_cast<std::uint64_t>(bits);
  if (group == 0) return total;
  if (bits == 1) return total + 16;
  return total + 32 * out_rows * ((in_cols + group - 1) / group);
}

}  // namespace

SizeAccounting size_accounting(const QuantizedModel& qm) {
  SizeAccounting acc;
  for (const auto& e : qm.tensors) {
    const std::uint64_t bits = stored_bits(e.tensor);
    acc.total_bits += bits;
    acc.element_count += e.tensor.element_count();
    if (e.role == TensorRole::expert) {
      acc.expert_bits += bits;
      acc.expert_elements += e.tensor.element_count();
      acc.expert_payload_bits += e.tensor.bits == 16 ? 16ULL * e.tensor.element_count() : 8ULL * e.tensor.packed.size();
    }
  }
  return acc;
}

SizeAccounting size_accounting(const ModelConfig& c, const ShapeBitMap& m) {
  c.validate();
  if (!m.expert_bits.empty()) {
    require(m.expert_bits.size() == c.n_layers, "size_accounting: expert bit map has the wrong layer count");
    for (const auto& row : m.expert_bits) {
      require(row.size() == c.n_experts, "size_accounting: expert bit map has the wrong expert count");
    }
  }
  SizeAccounting acc;
  auto add = [&](std::uint64_t out, std::uint64_t in, int bits, bool expert) {
    const std::uint64_t b = shaped_bits(out, in, bits, m.group_size);
    acc.total_bits += b;
    acc.element_count += out * in;
    if (expert) {
      acc.expert_bits += b;
      acc.expert_elements += out * in;
      acc.expert_payload_bits += out * in * static_cast<std::uint64_t>(bits);
    }
  };
  const std::uint64_t H = c.hidden;
  add(c.vocab, H, m.embedding_bits, false);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    add(1, H, m.norm_bits, false);
    for (int i = 0; i < 4; ++i) add(H, H, m.attention_bits, false);
    add(1, H, m.norm_bits, false);
    add(c.n_experts, H, m.gating_bits, false);
    for (std::size_t e = 0; e < c.n_experts; ++e) {
      const int b = m.expert_bits.empty() ? m.default_expert_bits : m.expert_bits[l][e];
      add(c.intermediate, H, b, true);
      add(c.intermediate, H, b, true);
      add(H, c.intermediate, b, true);
    }
  }
  add(1, H, m.norm_bits, false);
  add(c.vocab, H, m.head_bits, false);
  return acc;
}

ActivationAccounting activation_accounting(const RunActivity& run, const QuantizedModel& qm) {
  if (run.model_digest != qm.config_digest) {
    throw ArgumentError("activation_accounting: run digest " + run.model_digest + " does not match container " +
                        qm.config_digest);
  }
  const ModelConfig& cfg = qm.config;
  if (run.counts.size() != cfg.n_layers) throw ArgumentError("activation_accounting: layer count mismatch");
  for (const auto& row : run.counts) {
    if (row.size() != cfg.n_experts) throw ArgumentError("activation_accounting: expert count mismatch");
  }
  std::vector<std::vector<double>> expert_bytes(cfg.n_layers, std::vector<double>(cfg.n_experts, 0.0));
  double always = 0.0;
  for (const auto& e : qm.tensors) {
    const double bytes = static_cast<double>(stored_bits(e.tensor)) / 8.0;
    if (e.role == TensorRole::expert) {
      expert_bytes[e.layer][e.expert] += bytes;
    } else if (e.role == TensorRole::embedding) {
      always += bytes / static_cast<double>(cfg.vocab);
    } else {
      always += bytes;
    }
  }
  ActivationAccounting out;
  if (run.tokens > 0) {
    double invoked = 0.0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      for (std::size_t e = 0; e < cfg.n_experts; ++e)
        invoked += static_cast<double>(run.counts[l][e]) * expert_bytes[l][e];
    out.mean_activated_bytes_per_token = always + invoked / static_cast<double>(run.tokens);
  }
  if (run.invocations_dense > 0) {
    out.invocation_reduction =
        1.0 - static_cast<double>(run.invocations_actual) / static_cast<double>(run.invocations_dense);
  }
  return out;
}

FlopsEstimate flops_estimate(std::size_t hidden, std::size_t intermediate, std::size_t L, double pruned_fraction) {
  const double n = static_cast<double>(L);
  const double m = static_cast<double>(hidden);
  const double m1 = static_cast<double>(intermediate);
  FlopsEstimate f;
  f.importance_flops = n * n + n + m * n + (L > 0 ? n * std::log2(n) : 0.0);
  f.expert_flops_saved = pruned_fraction * n * (2.0 * m * m1 + 2.0 * m1 * m1 + 2.0 * m1 * m);
  return f;
}

FlopsEstimate flops_estimate(const ModelConfig& config, std::size_t L, double pruned_fraction) {
  return flops_estimate(config.hidden, config.intermediate, L, pruned_fraction);
}

nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"tokens", l.tokens},
                      {"pruned", l.pruned},
                      {"protected", l.protected_tokens},
                      {"dropped", l.dropped}});
  }
  return {{"config_digest", r.config_digest},
          {"strategy", r.strategy},
          {"policy_mode", r.policy_mode},
          {"avg_bits_experts", r.avg_bits_experts},
          {"avg_bits_overall", r.avg_bits_overall},
          {"total_bytes", r.total_bytes},
          {"mean_activated_bytes_per_token", r.mean_activated_bytes_per_token},
          {"invocation_reduction", r.invocation_reduction},
          {"perplexity", r.perplexity},
          {"layers", layers},
          {"wall_clock_s", r.wall_clock_s},
          {"notes", r.notes}};
}

RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  try {
    r.config_digest = j.at("config_digest").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.policy_mode = j.at("policy_mode").get<std::string>();
    r.avg_bits_experts = j.at("avg_bits_experts").get<double>();
    r.avg_bits_overall = j.at("avg_bits_overall").get<double>();
    r.total_bytes = j.at("total_bytes").get<double>();
    r.mean_activated_bytes_per_token = j.at("mean_activated_bytes_per_token").get<double>();
    r.invocation_reduction = j.at("invocation_reduction").get<double>();
    r.perplexity = j.at("perplexity").get<double>();
    for (const auto& l : j.at("layers")) {
      r.layers.push_back({l.at("layer").get<std::size_t>(), l.at("tokens").get<std::size_t>(),
                          l.at("pruned").get<std::size_t>(), l.at("protected").get<std::size_t>(),
                          l.at("dropped").get<std::size_t>()});
    }
    r.wall_clock_s = j.value("wall_clock_s", 0.0);
    r.notes = j.value("notes", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

RunReport load_report(const std::string& path) {
  try {
    return report_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void emit_report(const std::string& dir, const RunReport& report, const std::vector<BitsRow>& bits_rows,
                 const std::vector<ProtectionRow>& protection_rows) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  const std::filesystem::path base(dir);
  write_text_file((base / "report.json").string(), report_to_json(report).dump(2) + "\n");
  char buf[160];
  if (!bits_rows.empty()) {
    std::string csv = "strategy,k,avg_bits_experts,perplexity\n";
    for (const auto& r : bits_rows) {
      std::snprintf(buf, sizeof(buf), ",%.6g,%.9g,%.9g\n", r.k, r.avg_bits_experts, r.perplexity);
      csv += r.strategy + buf;
    }
    write_text_file((base / "ppl_vs_bits.csv").string(), csv);
  }
  if (!protection_rows.empty()) {
    std::string csv = "p,invocation_reduction,perplexity\n";
    for (const auto& r : protection_rows) {
      std::snprintf(buf, sizeof(buf), "%.6g,%.9g,%.9g\n", r.p, r.invocation_reduction, r.perplexity);
      csv += buf;
    }
    write_text_file((base / "reduction_vs_protection.csv").string(), csv);
  }
}

std::vector<ProtectionRow> protection_sweep(const MoEModel& model, const Corpus& corpus, PruningPolicy policy,
                                            const std::vector<double>& ratios, std::size_t threads) {
  std::vector<ProtectionRow> rows;
  for (double p : ratios) {
    policy.protect_ratio = p;
    const EvalResult r = evaluate(model, corpus, &policy, threads);
    const double dense = static_cast<double>(r.activity.invocations_dense);
    rows.push_back({p, dense > 0 ? 1.0 - static_cast<double>(r.activity.invocations_actual) / dense : 0.0,
                    r.perplexity});
  }
  return rows;
}

RunReport build_report(const QuantizedModel& qm, const EvalResult& eval, const PruningPolicy& policy) {
  const SizeAccounting size = size_accounting(qm);
  const ActivationAccounting act = activation_accounting(eval.activity, qm);
  RunReport r;
  r.config_digest = qm.config_digest;
  r.strategy = qm.strategy;
  r.policy_mode = to_string(policy.mode);
  r.avg_bits_experts = size.avg_bits_experts();
  r.avg_bits_overall = size.avg_bits_overall();
  r.total_bytes = size.total_bytes();
  r.mean_activated_bytes_per_token = act.mean_activated_bytes_per_token;
  r.invocation_reduction = act.invocation_reduction;
  r.perplexity = eval.perplexity;
  for (std::size_t l = 0; l < eval.activity.layers.size(); ++l) {
    const auto& s = eval.activity.layers[l];
    r.layers.push_back({l, s.tokens, s.pruned, s.protected_tokens, s.dropped});
  }
  r.notes = qm.warnings;
  return r;
}

}  // namespace mixcomp
