#pragma once

#include "dcss/common.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dcss::synth {

enum class ShapeKind { disk, square, triangle, ring, cross, bar };

std::string shape_name(ShapeKind kind);
ShapeKind shape_from_name(const std::string& name);

/// Default class id -> shape assignment (cycles through the six kinds).
ShapeKind shape_for_class(int class_id);

struct SegSample {
  std::vector<Mat> image;  // C planes of H x W, values in [0, 1]
  LabelMap label;          // H x W, 0 = background
  std::string sample_id;
};

struct DatasetSpec {
  int num_classes = 6;
  int H = 32;
  int W = 32;
  int C = 3;
  int samples_per_class = 20;
  std::map<int, ShapeKind> shapes;  // class id -> kind, must cover 1..num_classes
  std::uint64_t seed = 0;
};

struct TaskSpec {
  int task_index = 1;
  std::vector<int> class_ids;
};

struct TaskSchedule {
  std::vector<TaskSpec> tasks;
};

/// Fills spec.shapes with the default assignment when empty.
void fill_default_shapes(DatasetSpec& spec);

/// Throws ValidationError naming the violated field.
void validate(const DatasetSpec& spec);

/// Distinct, human-readable class name (shape kind, suffixed when kinds repeat).
std::string class_name(const DatasetSpec& spec, int class_id);

/// Deterministic: num_classes * samples_per_class samples, each with 1-3
/// shapes; sample i always contains class (i mod num_classes) + 1.
std::vector<SegSample> generate_dataset(const DatasetSpec& spec);

/// "B-S" incremental pattern; task 1 gets ids 1..B, then steps of S.
TaskSchedule build_schedule(int num_classes, const std::string& pattern);

/// Classes outside the task keep the image but are relabeled to background.
SegSample relabel_overlapped(const SegSample& sample, const TaskSpec& task);

// -- dataset directory IO --

struct LoadedDataset {
  DatasetSpec spec;
  std::vector<SegSample> samples;
  std::optional<TaskSchedule> schedule;
};

void write_sample(const std::filesystem::path& path, const SegSample& sample);
SegSample read_sample(const std::filesystem::path& path,
                      const std::string& sample_id);

void save_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                  const std::vector<SegSample>& samples,
                  const std::optional<TaskSchedule>& schedule);
LoadedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace dcss::synth
