#pragma once

#include "headlab/heads.hpp"
#include "headlab/metrics.hpp"
#include "headlab/proposals.hpp"
#include "headlab/scenes.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace headlab {

struct OptimizerConfig {
  double learning_rate = 2e-3;
  double momentum = 0.9;
  int epochs = 13;
};

struct ProposalConfig {
  JitterParams jitter;
  int minibatch_size = 64;
  int bg_fg_ratio = 3;
  double match_threshold = 0.5;
};

// The full inference protocol applied before metrics.
struct EvalProtocol {
  double score_threshold = 0.01;
  double nms_iou = 0.5;
  double ap_iou = 0.5;
  int max_detections = 100;
  bool clip_boxes = true;
  ApInterpolation interpolation = ApInterpolation::kAllPoints;
  std::uint64_t proposal_seed = 1000003;  // test-time proposal stream
};

// Each role is either an on-the-fly generator config or a dataset file.
struct DataRole {
  std::optional<SynthConfig> synth;
  std::optional<std::string> path;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  HeadConfig head;  // num_classes is taken from the dataset at run time
  OptimizerConfig optimizer;
  ProposalConfig proposal;
  EvalProtocol eval;
  DataRole train_data;
  DataRole test_data;
  bool augment_flip = true;
};

// Canonical benchmark split: 200 training and 50 test scenes from one seed.
ExperimentConfig default_experiment_config();

// Strict JSON codec: unknown keys are errors, every field has the default
// above. The echo is canonical (fixed key order) and drives the checksums.
ExperimentConfig parse_experiment_config(const std::string& json_text);
std::string experiment_config_to_json(const ExperimentConfig& config);
std::string config_checksum(const ExperimentConfig& config);

Dataset load_data(const DataRole& role);

struct EpochLoss {
  double total = 0, cls = 0, off = 0, sca = 0;
};

struct RunRecord {
  std::string config_json;
  std::string config_checksum;
  std::string code_version;
  std::vector<EpochLoss> loss_curve;
  std::optional<EvalReport> eval;
  double wall_seconds = 0.0;
  std::string checkpoint_checksum;
  bool diverged = false;
  std::vector<std::string> diagnostics;
};

struct TrainedModel {
  std::unique_ptr<HeadModel> model;
  RunRecord record;
};

// End-to-end training: per scene, jittered proposals are assigned and
// sampled at the configured ratio, the head loss is backpropagated and a
// momentum step applied. On divergence the model is rolled back to the last
// epoch boundary and the record is flagged.
TrainedModel train(const ExperimentConfig& config, const Dataset& train_data,
                   const Dataset* test_data);

// Full inference pipeline: simulator proposals, head forward, score filter,
// per-class suppression, per-image cap, then AP evaluation.
EvalReport evaluate_model(const HeadModel& model, const Dataset& data,
                          const ProposalConfig& proposals,
                          const EvalProtocol& protocol);

// Offset-residual statistics over foreground test proposals, before and
// after the first sequential step. Rejects non-sequential models.
DeltaDistribution delta_statistics(const HeadModel& model, const Dataset& data,
                                   const ProposalConfig& proposals,
                                   const EvalProtocol& protocol,
                                   double bin_width = 0.5);

// ---- ablation suites ----

struct AblationRow {
  std::string name;
  Architecture architecture;
  std::optional<BranchSpec> branch;  // overrides the base branch when set
};

// Row grids of the four studies: model-design, branch, decouple, sequence.
std::vector<AblationRow> ablation_suite(const std::string& suite);

struct AblationCell {
  std::string row;
  Architecture architecture;
  std::vector<double> ap_per_seed;
  double ap_mean = 0, ap_std = 0;
  double ap_small_mean = 0, ap_medium_mean = 0, ap_large_mean = 0;
  int buckets_present[3] = {0, 0, 0};  // seeds where the bucket was defined
};

struct AblationReport {
  std::string suite;
  int num_seeds = 0;
  std::vector<AblationCell> cells;
};

AblationReport run_ablation(const std::string& suite,
                            const ExperimentConfig& base, int num_seeds,
                            const Dataset& train_data, const Dataset& test_data,
                            const std::string& archive_dir);

// ---- file-level commands (the CLI surface) ----

void command_synth(const std::string& config_path, const std::string& out_path);
void command_train(const std::string& config_path, const std::string& out_dir);
void command_eval(const std::string& checkpoint_path,
                  const std::string& data_path, const std::string& report_csv);
void command_ablate(const std::string& suite, const std::string& out_dir,
                    const std::optional<std::string>& config_path,
                    int num_seeds);
void command_stats(const std::string& checkpoint_path,
                   const std::string& data_path, const std::string& out_csv);

// report writers (documented column sets; see README)
std::string eval_report_csv(const EvalReport& report);
std::string loss_curve_csv(const std::vector<EpochLoss>& curve);
std::string delta_stats_csv(const DeltaDistribution& dist);
std::string ablation_csv(const AblationReport& report);
std::string run_record_json(const RunRecord& record);

}  // namespace headlab
