#include "dcss/lora.hpp"

#include "dcss/binio.hpp"

namespace dcss::lora {

std::vector<std::pair<int, int>> adapter_sites() {
  return {{kSelfAttn1, kQ},          {kSelfAttn1, kV},
          {kSelfAttn2, kQ},          {kSelfAttn2, kV},
          {kFusion, kTextToImageK},  {kFusion, kTextToImageV},
          {kFusion, kImageToTextK},  {kFusion, kImageToTextV}};
}

AdapterParams init_adapter(int d_in, int d_out, int r, double scaling,
                           std::uint64_t seed) {
  if (d_in < 1 || d_out < 1) throw ValidationError("adapter dims must be >= 1");
  if (r < 1) throw ValidationError("adapter rank must be >= 1");
  if (r > std::min(d_in, d_out))
    throw ValidationError("adapter rank " + std::to_string(r) +
                          " exceeds min(d_in, d_out) = " +
                          std::to_string(std::min(d_in, d_out)));
  AdapterParams p;
  Rng rng(seed);
  p.A = gaussian_matrix(r, d_in, 0.02, rng);
  p.B = Mat::Zero(d_out, r);
  p.rank = r;
  p.scaling = f32(scaling);
  return p;
}

Vec adapted_linear(const Mat& W, const Vec& bias,
                   const AdapterParams* adapter, const Vec& x) {
  if (W.cols() != x.size() || W.rows() != bias.size())
    throw ValidationError("adapted_linear base shape mismatch");
  Vec y = W * x + bias;
  if (adapter) {
    if (adapter->A.cols() != x.size() || adapter->B.rows() != W.rows() ||
        adapter->A.rows() != adapter->B.cols())
      throw ValidationError("adapted_linear adapter shape mismatch");
    y += adapter->scaling * (adapter->B * (adapter->A * x));
  }
  return y;
}

const AdapterParams* AdapterView::find(int layer, int projection) const {
  if (!registry || !task) return nullptr;
  return registry->find(*task, layer, projection);
}

void AdapterRegistry::add(const SiteKey& key, AdapterParams params) {
  if (adapters_.count(key))
    throw StateError("adapter already present for task " +
                     std::to_string(key.task) + " layer " +
                     std::to_string(key.layer) + " projection " +
                     std::to_string(key.projection));
  adapters_.emplace(key, std::move(params));
}

bool AdapterRegistry::has_task(int task) const {
  for (const auto& [key, _] : adapters_)
    if (key.task == task) return true;
  return false;
}

std::vector<int> AdapterRegistry::tasks() const {
  std::vector<int> out;
  for (const auto& [key, _] : adapters_)
    if (out.empty() || out.back() != key.task) out.push_back(key.task);
  return out;
}

std::vector<SiteKey> AdapterRegistry::keys_for_task(int task) const {
  std::vector<SiteKey> out;
  for (const auto& [key, _] : adapters_)
    if (key.task == task) out.push_back(key);
  return out;
}

void AdapterRegistry::attach(int task) {
  if (!has_task(task))
    throw LookupError("no adapters for task " + std::to_string(task));
  active_task_ = task;
}

AdapterView AdapterRegistry::view_of(int task) const {
  if (!has_task(task))
    throw LookupError("no adapters for task " + std::to_string(task));
  return AdapterView{this, task};
}

const AdapterParams* AdapterRegistry::find(int task, int layer,
                                           int projection) const {
  const auto it = adapters_.find(SiteKey{task, layer, projection});
  return it == adapters_.end() ? nullptr : &it->second;
}

AdapterParams& AdapterRegistry::find_mut(int layer, int projection) {
  if (!active_task_) throw StateError("no task attached");
  const auto it = adapters_.find(SiteKey{*active_task_, layer, projection});
  if (it == adapters_.end())
    throw LookupError("attached task has no adapter at layer " +
                      std::to_string(layer) + " projection " +
                      std::to_string(projection));
  return it->second;
}

std::uint64_t AdapterRegistry::task_checksum(int task) const {
  ChecksumAccum accum;
  for (const auto& [key, p] : adapters_) {
    if (key.task != task) continue;
    accum.add_scalar(static_cast<double>(key.layer));
    accum.add_scalar(static_cast<double>(key.projection));
    accum.add_scalar(static_cast<double>(p.rank));
    accum.add_scalar(p.scaling);
    accum.add(p.A);
    accum.add(p.B);
  }
  return accum.value();
}

void AdapterRegistry::save_task(const std::filesystem::path& path,
                                int task) const {
  const auto keys = keys_for_task(task);
  if (keys.empty())
    throw LookupError("no adapters for task " + std::to_string(task));
  io::Writer w(path);
  w.magic("LORA");
  w.u32(static_cast<std::uint32_t>(keys.size()));
  for (const SiteKey& key : keys) {
    const AdapterParams& p = adapters_.at(key);
    w.u32(static_cast<std::uint32_t>(key.layer));
    w.u32(static_cast<std::uint32_t>(key.projection));
    w.u32(static_cast<std::uint32_t>(p.rank));
    w.f32(static_cast<float>(p.scaling));
    w.mat_f32(p.A);
    w.mat_f32(p.B);
  }
}

void AdapterRegistry::load_task(const std::filesystem::path& path, int task) {
  if (has_task(task))
    throw StateError("task " + std::to_string(task) + " already loaded");
  io::Reader r(path);
  r.expect_magic("LORA");
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    SiteKey key;
    key.task = task;
    key.layer = static_cast<int>(r.u32());
    key.projection = static_cast<int>(r.u32());
    AdapterParams p;
    p.rank = static_cast<int>(r.u32());
    p.scaling = static_cast<double>(r.f32());
    p.A = r.mat_f32();
    p.B = r.mat_f32();
    if (p.A.rows() != p.rank || p.B.cols() != p.rank)
      throw ValidationError("adapter record rank does not match matrices");
    add(key, std::move(p));
  }
}

}  // namespace dcss::lora
