#pragma once

#include "dcss/backbone_fusion.hpp"
#include "dcss/cas.hpp"
#include "dcss/lora.hpp"
#include "dcss/spg.hpp"
#include "dcss/synth_data.hpp"
#include "dcss/text_bank.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dcss::harness {

/// Experiment configuration. Parsed from a JSON document with a closed key
/// set; every violated key is listed in the thrown ValidationError.
struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path frozen_path;
  std::filesystem::path cas_path;
  std::filesystem::path out_dir;
  std::string schedule;  // "B-S" incremental pattern
  model::ModelConfig dims;
  double tau = 0.2;
  int M = 6;
  int rank = 4;
  double scaling = 1.0;
  int Q_m = 256;
  int m = 6;
  int d_p = 32;
  int h = 128;
  double lr = 1e-4;
  double wd = 0.05;
  int epochs = 5;
  int batch = 8;
  std::uint64_t seed = 3;
  std::uint64_t text_seed = text::StubEncoder::kDefaultSeed;
  bool background_in_miou = true;
  bool parallel_infer = false;
};

RunConfig parse_config(const std::filesystem::path& path);
RunConfig parse_config_text(const std::string& json_text);

/// Everything the continual learner owns. Backbone, fusion, and the mask
/// decoder are frozen for the whole run; adapters and pGens grow task by
/// task and are the only trainable parameters.
struct ModelState {
  model::ModelConfig config;
  model::BackboneParams backbone;
  model::FusionParams fusion;
  cas::SegmenterParams segmenter;
  lora::AdapterRegistry adapters;
  std::map<int, spg::PGenParams> pgens;            // class id -> generator
  std::map<int, text::PhraseEmbeddingBank> banks;  // class id -> bank
  std::vector<synth::TaskSpec> learned;            // in training order
  std::uint64_t frozen_expected = 0;  // checksum the frozen parts must keep
};

ModelState init_state(model::BackboneParams backbone,
                      model::FusionParams fusion,
                      cas::SegmenterParams segmenter);

/// Combined checksum over backbone, fusion, and decoder parameters.
std::uint64_t frozen_state_checksum(const ModelState& state);

struct TrainTaskConfig {
  int rank = 4;
  double scaling = 1.0;
  int M = 6;
  int Q_m = 256;
  int h = 128;
  int m = 6;
  int d_p = 32;
  double tau = 0.2;
  double lr = 1e-4;
  double wd = 0.05;
  int epochs = 5;
  int batch = 8;
  double asl_weight = 1.0;
  std::uint64_t seed = 3;
  std::uint64_t text_seed = text::StubEncoder::kDefaultSeed;
};

TrainTaskConfig train_config(const RunConfig& config);

struct TrainTaskResult {
  std::vector<double> step_losses;  // batch-mean loss per optimizer step
  int samples_used = 0;
};

/// Trains fresh adapters for the task and fresh pGens for its classes on the
/// samples that contain the task's classes (relabeled to the task's label
/// space). Everything previously learned is asserted bitwise unchanged.
TrainTaskResult train_task(ModelState& state, const synth::TaskSpec& task,
                           const std::vector<synth::SegSample>& data,
                           const synth::DatasetSpec& data_spec,
                           const TrainTaskConfig& config);

/// One learned task's detections on one image: (class id, mask prediction)
/// for every class the task's detector fires on.
std::vector<std::pair<int, cas::MaskPrediction>> infer_task(
    const ModelState& state, int task_index, const std::vector<Mat>& image,
    double tau);

/// Task-ID-free inference: every learned task runs (sequentially or in
/// parallel), predictions fold in class-id order, pixels resolve by
/// confidence.
LabelMap infer(const ModelState& state, const std::vector<Mat>& image,
               double tau, bool parallel = false);

struct Metrics {
  std::map<int, double> per_class_iou;  // only classes that were evaluable
  std::optional<double> miou_old;       // empty before any old classes exist
  std::optional<double> miou_new;
  double miou_all = 0.0;
  std::map<int, double> forgetting;  // best-so-far IoU minus current IoU

  bool operator==(const Metrics&) const = default;
};

struct EvalOptions {
  double tau = 0.2;
  bool background_in_miou = true;
  bool parallel = false;
};

/// Dataset-level IoU per class (TP/(TP+FP+FN) accumulated over all samples)
/// against ground truth restricted to the classes of tasks 1..up_to_task.
/// Classes never present and never predicted are excluded from every mean.
/// forgetting is left empty; the experiment loop fills it from history.
Metrics evaluate(const ModelState& state,
                 const std::vector<synth::SegSample>& samples,
                 const synth::TaskSchedule& schedule, int up_to_task,
                 const EvalOptions& options);

// -- persistence --

void save_state(const std::filesystem::path& dir, const ModelState& state);
ModelState load_state(const std::filesystem::path& dir);

// -- experiment orchestration --

struct ExperimentResult {
  std::vector<Metrics> per_task;
  std::vector<double> final_losses;  // last optimizer-step loss per task
  std::filesystem::path metrics_path;
  std::filesystem::path report_path;
};

ExperimentResult run_experiment(const RunConfig& config);
ExperimentResult run_experiment(const std::filesystem::path& config_path);

}  // namespace dcss::harness
