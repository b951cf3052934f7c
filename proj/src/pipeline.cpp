// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <type_traits>

#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"
#include "mixcomp/harness.hpp"
#include "mixcomp/profiler.hpp"
#include "mixcomp/quantized_model.hpp"

namespace mixcomp {
namespace fs = std::filesystem;

namespace {

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::string or_default(const std::string& v, const std::string& dir, const std::string& name) {
  return v.empty() ? in_dir(dir, name) : v;
}

}  // namespace

std::string PipelineConfig::model_path() const { return or_default(model, out_dir, "model.mckp"); }
std::string PipelineConfig::calib_path() const { return or_default(calib, out_dir, "calib.txt"); }
std::string PipelineConfig::eval_path() const { return or_default(eval_corpus, out_dir, "eval.txt"); }
std::string PipelineConfig::stats_path() const { return in_dir(out_dir, "stats.json"); }
std::string PipelineConfig::allocation_path() const { return in_dir(out_dir, "allocation.json"); }
std::string PipelineConfig::quantized_path() const { return in_dir(out_dir, "model.mcqz"); }
std::string PipelineConfig::policy_path() const { return in_dir(report_dir.empty() ? out_dir : report_dir, "policy.json"); }
std::string PipelineConfig::report_path() const { return in_dir(report_dir.empty() ? out_dir : report_dir, "report.json"); }

const std::vector<std::string>& pipeline_keys() {
  static const std::vector<std::string> keys = {
      "out_dir",      "model",         "calib",         "eval_corpus",     "report_dir",   "seed",
      "n_layers",     "hidden",        "n_heads",       "head_dim",        "intermediate", "n_experts",
      "top_k",        "vocab",         "calib_seqs",    "calib_len",       "eval_seqs",    "eval_len",
      "corpus_source", "k",            "alpha",         "beta",            "gamma",        "strategy",
      "floors",       "group_size",    "quant_mode",    "damp",            "block_size",   "non_expert_bits", "embedding_bits",
      "eps_target",   "policy",        "p",             "full_drop_ratio", "protect_scope",
      "protection_sweep", "threads",   "force"};
  return keys;
}

namespace {

template <typename T>
T as(const std::string& key, const nlohmann::json& v) {
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ArgumentError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ArgumentError("");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ArgumentError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ArgumentError("");
    } else {
      if (!v.is_number()) throw ArgumentError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ArgumentError("config key '" + key + "': unexpected value " + v.dump());
  }
}

}  // namespace

void set_key(PipelineConfig& c, const std::string& key, const nlohmann::json& v) {
  using sz = std::size_t;
  if (key == "out_dir") c.out_dir = as<std::string>(key, v);
  else if (key == "model") c.model = as<std::string>(key, v);
  else if (key == "calib") c.calib = as<std::string>(key, v);
  else if (key == "eval_corpus") c.eval_corpus = as<std::string>(key, v);
  else if (key == "report_dir") c.report_dir = as<std::string>(key, v);
  else if (key == "seed") c.seed = as<std::uint64_t>(key, v);
  else if (key == "n_layers") c.synthetic.n_layers = as<sz>(key, v);
  else if (key == "hidden") c.synthetic.hidden = as<sz>(key, v);
  else if (key == "n_heads") c.synthetic.n_heads = as<sz>(key, v);
  else if (key == "head_dim") c.synthetic.head_dim = as<sz>(key, v);
  else if (key == "intermediate") c.synthetic.intermediate = as<sz>(key, v);
  else if (key == "n_experts") c.synthetic.n_experts = as<sz>(key, v);
  else if (key == "top_k") c.synthetic.top_k = as<sz>(key, v);
  else if (key == "vocab") c.synthetic.vocab = as<sz>(key, v);
  else if (key == "calib_seqs") c.calib_seqs = as<sz>(key, v);
  else if (key == "calib_len") c.calib_len = as<sz>(key, v);
  else if (key == "eval_seqs") c.eval_seqs = as<sz>(key, v);
  else if (key == "eval_len") c.eval_len = as<sz>(key, v);
  else if (key == "corpus_source") {
    c.corpus_source = as<std::string>(key, v);
    require(c.corpus_source == "sampled" || c.corpus_source == "uniform",
            "config key 'corpus_source' must be sampled or uniform");
  } else if (key == "k") c.k = as<double>(key, v);
  else if (key == "alpha") c.alpha = as<double>(key, v);
  else if (key == "beta") c.beta = as<double>(key, v);
  else if (key == "gamma") c.gamma = as<double>(key, v);
  else if (key == "strategy") c.strategy = parse_strategy(as<std::string>(key, v));
  else if (key == "floors") c.floors = as<bool>(key, v);
  else if (key == "group_size") c.quant.group_size = as<sz>(key, v);
  else if (key == "quant_mode") c.quant.mode = parse_quant_mode(as<std::string>(key, v));
  else if (key == "damp") c.quant.damp = as<double>(key, v);
  else if (key == "block_size") c.quant.block_size = as<sz>(key, v);
  else if (key == "non_expert_bits") c.non_expert_bits = as<int>(key, v);
  else if (key == "embedding_bits") c.embedding_bits = as<int>(key, v);
  else if (key == "eps_target") {
    c.eps_target = as<std::string>(key, v);
    require(c.eps_target == "final_hidden" || c.eps_target == "layer_output",
            "config key 'eps_target' must be final_hidden or layer_output");
  } else if (key == "policy") c.policy_mode = parse_prune_mode(as<std::string>(key, v));
  else if (key == "p") c.protect_ratio = as<double>(key, v);
  else if (key == "full_drop_ratio") c.full_drop_ratio = as<double>(key, v);
  else if (key == "protect_scope") {
    const auto s = as<std::string>(key, v);
    require(s == "per_layer" || s == "once", "config key 'protect_scope' must be per_layer or once");
    c.protect_scope = s == "once" ? ProtectScope::once : ProtectScope::per_layer;
  } else if (key == "protection_sweep") c.protection_sweep = as<bool>(key, v);
  else if (key == "threads") c.threads = as<sz>(key, v);
  else if (key == "force") c.force = as<bool>(key, v);
  else throw ArgumentError("unknown config key '" + key + "'");
}

void set_key_text(PipelineConfig& cfg, const std::string& key, const std::string& text) {
  nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
  if (v.is_discarded() || v.is_object() || v.is_array()) v = text;
  // Strategy names and paths stay strings even if they parse as numbers.
  static const std::vector<std::string> string_keys = {"out_dir", "model", "calib", "eval_corpus", "report_dir"};
  if (std::find(string_keys.begin(), string_keys.end(), key) != string_keys.end()) v = text;
  set_key(cfg, key, v);
}

void apply_json(PipelineConfig& cfg, const nlohmann::json& flat) {
  if (!flat.is_object()) throw ArgumentError("config file must hold a JSON object of flat keys");
  for (const auto& [key, value] : flat.items()) set_key(cfg, key, value);
}

nlohmann::json config_to_flat_json(const PipelineConfig& c) {
  return {{"out_dir", c.out_dir},
          {"model", c.model},
          {"calib", c.calib},
          {"eval_corpus", c.eval_corpus},
          {"report_dir", c.report_dir},
          {"seed", c.seed},
          {"n_layers", c.synthetic.n_layers},
          {"hidden", c.synthetic.hidden},
          {"n_heads", c.synthetic.n_heads},
          {"head_dim", c.synthetic.head_dim},
          {"intermediate", c.synthetic.intermediate},
          {"n_experts", c.synthetic.n_experts},
          {"top_k", c.synthetic.top_k},
          {"vocab", c.synthetic.vocab},
          {"calib_seqs", c.calib_seqs},
          {"calib_len", c.calib_len},
          {"eval_seqs", c.eval_seqs},
          {"eval_len", c.eval_len},
          {"corpus_source", c.corpus_source},
          {"k", c.k},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"gamma", c.gamma},
          {"strategy", to_string(c.strategy)},
          {"floors", c.floors},
          {"group_size", c.quant.group_size},
          {"quant_mode", to_string(c.quant.mode)},
          {"damp", c.quant.damp},
          {"block_size", c.quant.block_size},
          {"non_expert_bits", c.non_expert_bits},
          {"embedding_bits", c.embedding_bits},
          {"eps_target", c.eps_target},
          {"policy", to_string(c.policy_mode)},
          {"p", c.protect_ratio},
          {"full_drop_ratio", c.full_drop_ratio},
          {"protect_scope", c.protect_scope == ProtectScope::once ? "once" : "per_layer"},
          {"protection_sweep", c.protection_sweep},
          {"threads", c.threads},
          {"force", c.force}};
}

namespace {

void need(const std::string& path, const std::string& what, const std::string& producer) {
  if (!fs::exists(path)) {
    throw IoError("missing input: " + what + " '" + path + "' (produced by `" + producer + "`)");
  }
}

void check_digest(const PipelineConfig& c, const std::string& artifact, const std::string& found,
                  const std::string& expected, std::ostream& log) {
  if (found == expected) return;
  const std::string msg = artifact + " was produced for model " + (found.empty() ? "<none>" : found) +
                          " but the current model is " + expected;
  if (!c.force) throw ArgumentError(msg + " (pass --force to override)");
  log << "warning: " << msg << " (forced)\n";
}

void ensure_out_dir(const PipelineConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + c.out_dir + ": " + ec.message());
}

Corpus load_nonempty_corpus(const std::string& path, const std::string& what, std::size_t vocab) {
  Corpus c = read_corpus(path);
  if (c.empty()) throw ArgumentError(what + " '" + path + "' holds no sequences");
  for (const auto& s : c)
    for (TokenId t : s)
      if (t >= vocab) throw ArgumentError(what + " '" + path + "' has token id " + std::to_string(t) + " >= vocab");
  return c;
}

void gen_model(const PipelineConfig& c, std::ostream& log) {
  ensure_out_dir(c);
  SeededRng rng(c.seed);
  const MoEModel m = gen_synthetic(c.synthetic, rng);
  save_checkpoint(c.model_path(), m);
  SeededRng crng(c.seed + 1);
  const bool sampled = c.corpus_source == "sampled";
  const Corpus calib = sampled ? sample_corpus(m, c.calib_seqs, c.calib_len, crng)
                               : random_corpus(c.calib_seqs, c.calib_len, m.config.vocab, crng);
  const Corpus eval = sampled ? sample_corpus(m, c.eval_seqs, c.eval_len, crng)
                              : random_corpus(c.eval_seqs, c.eval_len, m.config.vocab, crng);
  write_corpus(c.calib_path(), calib);
  write_corpus(c.eval_path(), eval);
  log << "model " << m.digest << " -> " << c.model_path() << "\n";
  log << "calibration " << calib.size() << " x " << c.calib_len << " -> " << c.calib_path() << "\n";
  log << "evaluation " << eval.size() << " x " << c.eval_len << " -> " << c.eval_path() << "\n";
}

MoEModel load_model(const PipelineConfig& c) {
  need(c.model_path(), "model checkpoint", "gen-model");
  return load_checkpoint(c.model_path());
}

void profile(const PipelineConfig& c, std::ostream& log) {
  const MoEModel m = load_model(c);
  need(c.calib_path(), "calibration corpus", "gen-model");
  const Corpus calib = load_nonempty_corpus(c.calib_path(), "calibration corpus", m.config.vocab);
  ensure_out_dir(c);
  ProfileOptions po;
  po.threads = c.threads;
  po.group_size = c.quant.group_size;
  po.target = c.eps_target == "layer_output" ? EpsTarget::layer_output : EpsTarget::final_hidden;
  const ExpertStats st = collect_all(m, calib, po);
  save_stats(c.stats_path(), st);
  log << "stats over " << st.n_tokens << " tokens -> " << c.stats_path() << "\n";
}

void allocate(const PipelineConfig& c, std::ostream& log) {
  const MoEModel m = load_model(c);
  need(c.stats_path(), "stats file", "profile");
  const ExpertStats st = load_stats(c.stats_path());
  check_digest(c, "stats file", st.config_digest, m.digest, log);
  AllocatorOptions ao;
  ao.k = c.k;
  ao.alpha = c.alpha;
  ao.beta = c.beta;
  ao.gamma = c.gamma;
  ao.strategy = c.strategy;
  ao.floors = c.floors;
  ao.seed = c.seed;
  BitAllocation a = allocate_model(st, ao);
  a.config_digest = m.digest;
  save_allocation(c.allocation_path(), a);
  log << "allocation (" << a.strategy << ", k=" << a.k << ") -> " << c.allocation_path() << "\n";
}

void quantize_stage(const PipelineConfig& c, std::ostream& log) {
  const MoEModel m = load_model(c);
  need(c.allocation_path(), "allocation file", "allocate");
  const BitAllocation a = load_allocation(c.allocation_path());
  check_digest(c, "allocation file", a.config_digest, m.digest, log);
  Corpus calib;
  if (c.quant.mode == QuantMode::gptq) {
    need(c.calib_path(), "calibration corpus", "gen-model");
    calib = load_nonempty_corpus(c.calib_path(), "calibration corpus", m.config.vocab);
  }
  QuantizeOptions qo;
  qo.spec = c.quant;
  qo.non_expert_bits = c.non_expert_bits;
  qo.embedding_bits = c.embedding_bits;
  qo.threads = c.threads;
  const QuantizedModel qm = quantize_model(m, a, calib, qo);
  save_quantized(c.quantized_path(), qm);
  const SizeAccounting acc = size_accounting(qm);
  for (const auto& w : qm.warnings) log << "warning: " << w << "\n";
  log << "quantized -> " << c.quantized_path() << ": " << acc.total_bytes() << " bytes, "
      << acc.avg_bits_experts() << " bits/expert weight (" << acc.avg_payload_bits_experts()
      << " without scales and zeros), " << acc.avg_bits_overall() << " bits overall\n";
}

void eval_stage(const PipelineConfig& c, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  need(c.quantized_path(), "quantized model", "quantize");
  const QuantizedModel qm = load_quantized(c.quantized_path());
  need(c.eval_path(), "evaluation corpus", "gen-model");
  const Corpus eval = load_nonempty_corpus(c.eval_path(), "evaluation corpus", qm.config.vocab);

  PruningPolicy policy;
  policy.mode = c.policy_mode;
  policy.protect_ratio = c.protect_ratio;
  policy.full_drop_ratio = c.full_drop_ratio;
  policy.scope = c.protect_scope;
  if (policy.mode != PruneMode::off) {
    need(c.stats_path(), "stats file", "profile");
    const ExpertStats st = load_stats(c.stats_path());
    check_digest(c, "stats file", st.config_digest, qm.config_digest, log);
    policy.mu = calibrate_mu(st);
  }
  policy.validate(qm.config.n_layers);
  std::error_code ec;
  fs::create_directories(fs::path(c.report_path()).parent_path(), ec);
  save_policy(c.policy_path(), policy, qm.config_digest);

  const MoEModel m = to_model(qm);
  const EvalResult r = evaluate(m, eval, &policy, c.threads);
  RunReport report = build_report(qm, r, policy);

  std::vector<ProtectionRow> sweep;
  if (c.protection_sweep && policy.mode != PruneMode::off && policy.mode != PruneMode::weight_only) {
    sweep = protection_sweep(m, eval, policy, {0.0, 0.02, 0.05, 0.1}, c.threads);
  }
  std::vector<BitsRow> bits_rows{{qm.strategy, c.k, report.avg_bits_experts, r.perplexity}};
  report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  emit_report(fs::path(c.report_path()).parent_path().string(), report, bits_rows, sweep);
  log << "perplexity " << report.perplexity << ", invocation reduction " << report.invocation_reduction << " -> "
      << c.report_path() << "\n";
}

}  // namespace

void run_command(const std::string& command, const PipelineConfig& c, std::ostream& log) {
  if (command == "gen-model") gen_model(c, log);
  else if (command == "profile") profile(c, log);
  else if (command == "allocate") allocate(c, log);
  else if (command == "quantize") quantize_stage(c, log);
  else if (command == "eval") eval_stage(c, log);
  else if (command == "pipeline") {
    if (c.model.empty()) gen_model(c, log);
    profile(c, log);
    allocate(c, log);
    quantize_stage(c, log);
    eval_stage(c, log);
  } else {
    throw ArgumentError("unknown command '" + command + "'");
  }
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InfeasibleError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 5;
  return 2;
}

}  // namespace mixcomp
