#pragma once

#include "dcss/common.hpp"

#include <compare>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

namespace dcss::lora {

// Adapter sites. Self-attention layers carry Q and V adapters; the fusion
// layer carries K and V on both attention directions.
enum Layer : int { kSelfAttn1 = 1, kSelfAttn2 = 2, kFusion = 3 };
enum Projection : int {
  kQ = 0,
  kK = 1,
  kV = 2,
  kTextToImageK = 3,
  kTextToImageV = 4,
  kImageToTextK = 5,
  kImageToTextV = 6,
};

/// Every (layer, projection) pair that carries an adapter.
std::vector<std::pair<int, int>> adapter_sites();

struct AdapterParams {
  Mat A;  // r x d_in, Gaussian init
  Mat B;  // d_out x r, zero init so the initial delta vanishes
  int rank = 0;
  double scaling = 0.0;
};

/// A Gaussian (std 0.02), B zero; the adapted map starts exactly at the base.
AdapterParams init_adapter(int d_in, int d_out, int r, double scaling,
                           std::uint64_t seed);

/// (W + scaling * B * A) x + bias; plain Wx + bias when adapter is null.
Vec adapted_linear(const Mat& W, const Vec& bias,
                   const AdapterParams* adapter, const Vec& x);

struct SiteKey {
  int task = 0;
  int layer = 0;
  int projection = 0;
  auto operator<=>(const SiteKey&) const = default;
};

class AdapterRegistry;

/// Read-only adapter lookup bound to one task (or none). Cheap to copy;
/// lets concurrent forward passes use different tasks.
struct AdapterView {
  const AdapterRegistry* registry = nullptr;
  std::optional<int> task;

  const AdapterParams* find(int layer, int projection) const;
};

class AdapterRegistry {
 public:
  void add(const SiteKey& key, AdapterParams params);

  bool has_task(int task) const;
  std::vector<int> tasks() const;
  std::vector<SiteKey> keys_for_task(int task) const;

  void attach(int task);  // LookupError when the task has no adapters
  void detach() { active_task_.reset(); }
  std::optional<int> active_task() const { return active_task_; }

  /// View of the currently attached task (empty view when detached).
  AdapterView view() const { return AdapterView{this, active_task_}; }
  AdapterView view_of(int task) const;

  const AdapterParams* find(int task, int layer, int projection) const;
  /// Mutable access, restricted to the attached task.
  AdapterParams& find_mut(int layer, int projection);

  /// FNV-1a over the task's adapters in key order.
  std::uint64_t task_checksum(int task) const;

  void save_task(const std::filesystem::path& path, int task) const;
  /// Loads a task checkpoint under `task`; the task must not exist yet.
  void load_task(const std::filesystem::path& path, int task);

 private:
  std::map<SiteKey, AdapterParams> adapters_;
  std::optional<int> active_task_;
};

}  // namespace dcss::lora
