// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <exception>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixcomp/allocator.hpp"
#include "mixcomp/model.hpp"
#include "mixcomp/pruner.hpp"
#include "mixcomp/quantizer.hpp"

namespace mixcomp {

/// Every setting of a pipeline run. Keys are flat; see `pipeline_keys()`.
struct PipelineConfig {
  std::string out_dir = ".";
  std::string model;         // MCKP path; empty = <out_dir>/model.mckp
  std::string calib;         // empty = <out_dir>/calib.txt
  std::string eval_corpus;   // empty = <out_dir>/eval.txt
  std::string report_dir;    // empty = out_dir
  std::uint64_t seed = 0;
  ModelConfig synthetic{4, 64, 4, 16, 128, 8, 2, 256};
  std::size_t calib_seqs = 32;
  std::size_t calib_len = 128;
  std::size_t eval_seqs = 16;
  std::size_t eval_len = 128;
  std::string corpus_source = "sampled";  // sampled | uniform
  double k = 2.5;
  double alpha = 1.0;
  double beta = 2.0;
  double gamma = 2.0;
  Strategy strategy = Strategy::pmq;
  bool floors = true;
  QuantSpec quant;
  int non_expert_bits = 4;
  int embedding_bits = 16;
  std::string eps_target = "final_hidden";  // final_hidden | layer_output
  PruneMode policy_mode = PruneMode::protected_tokens;
  double protect_ratio = 0.02;
  double full_drop_ratio = 0.02;
  ProtectScope protect_scope = ProtectScope::per_layer;
  bool protection_sweep = true;
  std::size_t threads = 1;
  bool force = false;

  std::string model_path() const;
  std::string calib_path() const;
  std::string eval_path() const;
  std::string stats_path() const;
  std::string allocation_path() const;
  std::string quantized_path() const;
  std::string policy_path() const;
  std::string report_path() const;
};

const std::vector<std::string>& pipeline_keys();

/// Applies one flat key; throws ArgumentError on unknown keys or bad values.
void set_key(PipelineConfig& cfg, const std::string& key, const nlohmann::json& value);
/// Same, parsing `text` as JSON when possible and as a string otherwise.
void set_key_text(PipelineConfig& cfg, const std::string& key, const std::string& text);
void apply_json(PipelineConfig& cfg, const nlohmann::json& flat);
nlohmann::json config_to_flat_json(const PipelineConfig& cfg);

/// Runs gen-model | profile | allocate | quantize | eval | pipeline.
void run_command(const std::string& command, const PipelineConfig& cfg, std::ostream& log);

/// 0 ok, 2 usage/config, 3 infeasible, 4 numerical, 5 I/O or format.
int exit_code_for(const std::exception& e);

}  // namespace mixcomp
