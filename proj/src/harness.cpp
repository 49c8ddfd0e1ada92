#include "dcss/harness.hpp"

#include "dcss/autodiff.hpp"
#include "dcss/binio.hpp"
#include "dcss/detect.hpp"
#include "dcss/losses.hpp"
#include "dcss/optim.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <thread>

namespace dcss::harness {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// -- config parsing ----------------------------------------------------------

struct KeyErrors {
  std::vector<std::string> bad;

  void add(const std::string& key, const std::string& why) {
    bad.push_back(key + " (" + why + ")");
  }
  void raise_if_any() const {
    if (bad.empty()) return;
    std::string msg = "config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ValidationError(msg);
  }
};

bool get_int(const json& j, const char* key, int& out, KeyErrors& errs) {
  if (!j.contains(key)) return false;
  const auto& v = j.at(key);
  if (!v.is_number_integer()) {
    errs.add(key, "must be an integer");
    return false;
  }
  out = v.get<int>();
  return true;
}

bool get_u64(const json& j, const char* key, std::uint64_t& out,
             KeyErrors& errs) {
  if (!j.contains(key)) return false;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    errs.add(key, "must be a non-negative integer");
    return false;
  }
  out = v.get<std::uint64_t>();
  return true;
}

bool get_real(const json& j, const char* key, double& out, KeyErrors& errs) {
  if (!j.contains(key)) return false;
  const auto& v = j.at(key);
  if (!v.is_number()) {
    errs.add(key, "must be a number");
    return false;
  }
  out = v.get<double>();
  return true;
}

bool get_bool(const json& j, const char* key, bool& out, KeyErrors& errs) {
  if (!j.contains(key)) return false;
  const auto& v = j.at(key);
  if (!v.is_boolean()) {
    errs.add(key, "must be a boolean");
    return false;
  }
  out = v.get<bool>();
  return true;
}

bool get_string(const json& j, const char* key, std::string& out,
                KeyErrors& errs, bool required) {
  if (!j.contains(key)) {
    if (required) errs.add(key, "required");
    return false;
  }
  const auto& v = j.at(key);
  if (!v.is_string() || v.get<std::string>().empty()) {
    errs.add(key, "must be a non-empty string");
    return false;
  }
  out = v.get<std::string>();
  return true;
}

RunConfig config_from_json(const json& j) {
  KeyErrors errs;
  if (!j.is_object()) {
    errs.add("<document>", "must be a JSON object");
    errs.raise_if_any();
  }
  static const std::set<std::string> known = {
      "data_dir", "frozen_path", "cas_path",  "out_dir",
      "schedule", "dims",        "tau",       "M",
      "rank",     "scaling",     "Q_m",       "m",
      "d_p",      "h",           "lr",        "wd",
      "epochs",   "batch",       "seed",      "text_seed",
      "background_in_miou",      "parallel_infer"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) errs.add(key, "unknown key");

  RunConfig c;
  std::string s;
  if (get_string(j, "data_dir", s, errs, true)) c.data_dir = s;
  if (get_string(j, "frozen_path", s, errs, true)) c.frozen_path = s;
  if (get_string(j, "cas_path", s, errs, true)) c.cas_path = s;
  if (get_string(j, "out_dir", s, errs, true)) c.out_dir = s;
  if (get_string(j, "schedule", s, errs, true)) c.schedule = s;

  if (j.contains("dims")) {
    const auto& d = j.at("dims");
    if (!d.is_object()) {
      errs.add("dims", "must be an object");
    } else {
      static const std::set<std::string> dim_keys = {"H", "W", "C",
                                                     "patch", "d", "heads"};
      for (const auto& [key, value] : d.items())
        if (!dim_keys.count(key)) errs.add("dims." + key, "unknown key");
      get_int(d, "H", c.dims.H, errs);
      get_int(d, "W", c.dims.W, errs);
      get_int(d, "C", c.dims.C, errs);
      get_int(d, "patch", c.dims.patch, errs);
      get_int(d, "d", c.dims.d, errs);
      get_int(d, "heads", c.dims.heads, errs);
    }
  }

  get_real(j, "tau", c.tau, errs);
  get_int(j, "M", c.M, errs);
  get_int(j, "rank", c.rank, errs);
  get_real(j, "scaling", c.scaling, errs);
  get_int(j, "Q_m", c.Q_m, errs);
  get_int(j, "m", c.m, errs);
  get_int(j, "d_p", c.d_p, errs);
  get_int(j, "h", c.h, errs);
  get_real(j, "lr", c.lr, errs);
  get_real(j, "wd", c.wd, errs);
  get_int(j, "epochs", c.epochs, errs);
  get_int(j, "batch", c.batch, errs);
  get_u64(j, "seed", c.seed, errs);
  get_u64(j, "text_seed", c.text_seed, errs);
  get_bool(j, "background_in_miou", c.background_in_miou, errs);
  get_bool(j, "parallel_infer", c.parallel_infer, errs);

  if (!(c.tau > 0.0 && c.tau < 1.0)) errs.add("tau", "must lie in (0, 1)");
  if (c.M < 1) errs.add("M", "must be >= 1");
  if (c.rank < 1) errs.add("rank", "must be >= 1");
  if (!(c.scaling > 0.0)) errs.add("scaling", "must be > 0");
  if (c.Q_m < 1) errs.add("Q_m", "must be >= 1");
  if (c.m < 1) errs.add("m", "must be >= 1");
  if (c.d_p < 1) errs.add("d_p", "must be >= 1");
  if (c.h < 1) errs.add("h", "must be >= 1");
  if (!(c.lr > 0.0)) errs.add("lr", "must be > 0");
  if (c.wd < 0.0) errs.add("wd", "must be >= 0");
  if (c.epochs < 1) errs.add("epochs", "must be >= 1");
  if (c.batch < 1) errs.add("batch", "must be >= 1");

  errs.raise_if_any();
  return c;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

// -- training-sample cache ---------------------------------------------------

struct TrainItem {
  Mat patches;            // patchified image
  Mat base_tokens;        // frozen no-adapter tokens, decoder input
  std::vector<int> presence;  // aligned with the task's class list
  std::map<int, Mat> masks;   // class id -> binary target mask
};

Mat mask_of_class(const LabelMap& label, int cls) {
  Mat m(label.rows(), label.cols());
  for (Eigen::Index y = 0; y < label.rows(); ++y)
    for (Eigen::Index x = 0; x < label.cols(); ++x)
      m(y, x) = label(y, x) == cls ? 1.0 : 0.0;
  return m;
}

// -- per-task inference internals ---------------------------------------------

std::vector<std::pair<int, cas::MaskPrediction>> run_one_task(
    const ModelState& state, const synth::TaskSpec& task,
    const std::vector<Mat>& image, double tau) {
  const auto view = state.adapters.view_of(task.task_index);
  const auto tok = model::encode_image(state.backbone, image, view);

  const int c_t = static_cast<int>(task.class_ids.size());
  Mat embeds(c_t, state.config.d);
  for (int j = 0; j < c_t; ++j) {
    const auto& bank = state.banks.at(task.class_ids[static_cast<std::size_t>(j)]);
    embeds.row(j) = text::aggregate(bank, tok.cls).aggregated.transpose();
  }
  const auto [vis, cls_embeds] =
      model::cross_attend(state.config, state.fusion, tok, embeds, view);

  const Mat aff = detect::affinity(vis, cls_embeds);
  const auto sel = detect::select_tokens(detect::sparsify(aff, tau), vis);
  const auto sets = spg::channel_select(sel, c_t);

  const auto base =
      model::encode_image(state.backbone, image, lora::AdapterView{});

  std::vector<std::pair<int, cas::MaskPrediction>> preds;
  for (int j = 0; j < c_t; ++j) {
    if (sets[static_cast<std::size_t>(j)].token_indices.empty()) continue;
    const int cls = task.class_ids[static_cast<std::size_t>(j)];
    const auto& pgen = state.pgens.at(cls);
    const Vec z =
        spg::pgen_input(sets[static_cast<std::size_t>(j)].tokens, pgen.embed);
    const Mat prompt = spg::pgen_forward(z, pgen);
    preds.emplace_back(cls,
                       cas::segment(state.segmenter, base.tokens, prompt));
  }
  return preds;
}

}  // namespace

// -- config ------------------------------------------------------------------

RunConfig parse_config_text(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

TrainTaskConfig train_config(const RunConfig& config) {
  TrainTaskConfig t;
  t.rank = config.rank;
  t.scaling = config.scaling;
  t.M = config.M;
  t.Q_m = config.Q_m;
  t.h = config.h;
  t.m = config.m;
  t.d_p = config.d_p;
  t.tau = config.tau;
  t.lr = config.lr;
  t.wd = config.wd;
  t.epochs = config.epochs;
  t.batch = config.batch;
  t.seed = config.seed;
  t.text_seed = config.text_seed;
  return t;
}

// -- state -------------------------------------------------------------------

ModelState init_state(model::BackboneParams backbone,
                      model::FusionParams fusion,
                      cas::SegmenterParams segmenter) {
  ModelState state;
  state.config = backbone.config;
  state.backbone = std::move(backbone);
  state.fusion = std::move(fusion);
  state.segmenter = std::move(segmenter);
  state.frozen_expected = frozen_state_checksum(state);
  return state;
}

std::uint64_t frozen_state_checksum(const ModelState& state) {
  const std::uint64_t parts[2] = {
      model::frozen_checksum(state.backbone, state.fusion),
      cas::seg_checksum(state.segmenter)};
  return fnv1a(parts, sizeof parts);
}

// -- training ----------------------------------------------------------------

TrainTaskResult train_task(ModelState& state, const synth::TaskSpec& task,
                           const std::vector<synth::SegSample>& data,
                           const synth::DatasetSpec& data_spec,
                           const TrainTaskConfig& config) {
  if (!state.segmenter.frozen) {
    throw StateError(
        "train_task: mask decoder fixture is missing or not frozen; run the "
        "decoder pretraining first");
  }
  if (frozen_state_checksum(state) != state.frozen_expected) {
    throw StateError(
        "train_task: a frozen parameter was modified since the state was "
        "created");
  }
  if (state.segmenter.prompt_count != config.m ||
      state.segmenter.prompt_dim != config.d_p) {
    throw ValidationError(
        "train_task: m/d_p disagree with the decoder fixture");
  }
  if (task.class_ids.empty()) {
    throw ValidationError("train_task: task has no classes");
  }
  std::set<int> distinct(task.class_ids.begin(), task.class_ids.end());
  if (distinct.size() != task.class_ids.size() || *distinct.begin() < 1) {
    throw ValidationError(
        "train_task: class ids must be distinct and positive");
  }
  for (const auto& learned : state.learned) {
    if (learned.task_index == task.task_index) {
      throw StateError("train_task: task " + std::to_string(task.task_index) +
                       " is already learned");
    }
  }
  const int expected = static_cast<int>(state.learned.size()) + 1;
  if (task.task_index != expected) {
    throw StateError("train_task: tasks must be learned in order; expected "
                     "task " +
                     std::to_string(expected));
  }
  for (const int cls : task.class_ids) {
    if (state.pgens.count(cls)) {
      throw StateError("train_task: class " + std::to_string(cls) +
                       " already belongs to an earlier task");
    }
  }

  const std::uint64_t frozen_before = frozen_state_checksum(state);
  std::map<int, std::uint64_t> adapter_before;
  for (const int t : state.adapters.tasks())
    adapter_before[t] = state.adapters.task_checksum(t);
  std::map<int, std::uint64_t> pgen_before;
  for (const auto& [cls, pgen] : state.pgens)
    pgen_before[cls] = spg::pgen_checksum(pgen);

  // Phrase banks for the new classes.
  synth::DatasetSpec named = data_spec;
  synth::fill_default_shapes(named);
  const text::StubEncoder encoder(state.config.d, config.text_seed);
  for (const int cls : task.class_ids) {
    state.banks[cls] = text::build_bank(synth::class_name(named, cls), cls,
                                        config.M, encoder);
  }

  // Overlapped protocol: keep samples containing the task's classes, with
  // everything else relabeled to background.
  const int c_t = static_cast<int>(task.class_ids.size());
  std::vector<TrainItem> items;
  for (const auto& sample : data) {
    const synth::SegSample relabeled = synth::relabel_overlapped(sample, task);
    TrainItem item;
    item.presence.assign(static_cast<std::size_t>(c_t), 0);
    bool any = false;
    for (int j = 0; j < c_t; ++j) {
      const int cls = task.class_ids[static_cast<std::size_t>(j)];
      Mat mask = mask_of_class(relabeled.label, cls);
      if (mask.sum() > 0.0) {
        item.presence[static_cast<std::size_t>(j)] = 1;
        item.masks[cls] = std::move(mask);
        any = true;
      }
    }
    if (!any) continue;
    item.patches = model::patchify(state.config, sample.image);
    item.base_tokens =
        model::encode_image(state.backbone, sample.image, lora::AdapterView{})
            .tokens;
    items.push_back(std::move(item));
  }
  if (items.empty()) {
    throw ValidationError("train_task: no samples contain the task's classes");
  }

  // Fresh trainable parameters for this task only.
  const int d = state.config.d;
  for (const auto& [layer, proj] : lora::adapter_sites()) {
    const std::uint64_t salt =
        0xada0000ULL + static_cast<std::uint64_t>(task.task_index) * 1024 +
        static_cast<std::uint64_t>(layer) * 16 +
        static_cast<std::uint64_t>(proj);
    state.adapters.add({task.task_index, layer, proj},
                       lora::init_adapter(d, d, config.rank, config.scaling,
                                          mix_seed(config.seed, salt)));
  }
  for (const int cls : task.class_ids) {
    state.pgens.emplace(cls, spg::init_pgen(cls, config.Q_m, config.h,
                                            config.m, config.d_p,
                                            config.seed));
  }

  state.adapters.attach(task.task_index);
  std::vector<Mat*> bound;
  for (const auto& [layer, proj] : lora::adapter_sites()) {
    auto& adapter = state.adapters.find_mut(layer, proj);
    bound.push_back(&adapter.A);
    bound.push_back(&adapter.B);
  }
  for (const int cls : task.class_ids)
    for (Mat* tensor : spg::pgen_tensors(state.pgens.at(cls)))
      bound.push_back(tensor);

  opt::AdamW optimizer(config.wd);
  const int n = static_cast<int>(items.size());
  const int batches_per_epoch = (n + config.batch - 1) / config.batch;
  const int total_steps = config.epochs * batches_per_epoch;

  TrainTaskResult result;
  result.samples_used = n;
  std::vector<int> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(config.seed, 0x5e00 + static_cast<std::uint64_t>(
                                              epoch)));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);

    for (int b = 0; b < batches_per_epoch; ++b) {
      const int lo = b * config.batch;
      const int hi = std::min(lo + config.batch, n);
      std::vector<Mat> grads;
      double batch_loss = 0.0;
      for (int s = lo; s < hi; ++s) {
        const TrainItem& item = items[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
        ad::Tape t;
        const auto bvars = model::make_backbone_vars(t, state.backbone, false);
        const auto fvars = model::make_fusion_vars(t, state.fusion, false);

        model::SiteVars sites;
        std::vector<ad::Var> grad_vars;
        for (const auto& [layer, proj] : lora::adapter_sites()) {
          const auto* adapter =
              state.adapters.find(task.task_index, layer, proj);
          model::AdapterVars av{t.leaf(adapter->A), t.leaf(adapter->B),
                                adapter->scaling};
          sites.sites[{layer, proj}] = av;
          grad_vars.push_back(av.A);
          grad_vars.push_back(av.B);
        }
        std::map<int, spg::PGenVars> pgen_vars;
        for (const int cls : task.class_ids) {
          pgen_vars[cls] = spg::make_pgen_vars(t, state.pgens.at(cls), true);
          for (const ad::Var v : spg::var_list(pgen_vars[cls]))
            grad_vars.push_back(v);
        }

        const auto tok =
            model::encode_image_t(t, state.config, bvars, item.patches, sites);

        // Image-conditioned text aggregation for each task class.
        std::vector<ad::Var> embed_rows;
        for (const int cls : task.class_ids) {
          const ad::Var bank =
              ad::constant(t, state.banks.at(cls).embeddings);
          const ad::Var scores = ad::matmul(ad::normalize_rows(tok.cls),
                                            ad::transpose(bank));
          embed_rows.push_back(ad::matmul(ad::softmax_rows(scores), bank));
        }
        const ad::Var embeds = ad::vcat(embed_rows);

        const auto fused = model::cross_attend_t(t, fvars, tok.tokens, embeds,
                                                 sites, state.config.heads);
        const ad::Var aff = detect::affinity_t(t, fused.v, fused.e);
        const ad::Var scores = detect::class_scores_t(t, aff, config.tau);
        const ad::Var asl = loss::asymmetric_loss_t(t, scores, item.presence,
                                                    loss::ASLConfig{});

        // Discrete token selection comes from the current affinities; the
        // kept rows keep their gradient through rows_gather.
        const Mat sparse = detect::sparsify(t.value(aff), config.tau);
        const auto sel = detect::select_tokens(sparse, t.value(fused.v));
        const auto sets = spg::channel_select(sel, c_t);

        const auto segv = cas::make_seg_vars(t, state.segmenter, false);
        const ad::Var decoder_tokens = ad::constant(t, item.base_tokens);
        std::optional<ad::Var> seg_sum;
        int seg_terms = 0;
        for (int j = 0; j < c_t; ++j) {
          if (!item.presence[static_cast<std::size_t>(j)]) continue;
          const int cls = task.class_ids[static_cast<std::size_t>(j)];
          std::optional<ad::Var> selected;
          if (!sets[static_cast<std::size_t>(j)].token_indices.empty()) {
            selected = ad::rows_gather(
                fused.v, sets[static_cast<std::size_t>(j)].token_indices);
          }
          const ad::Var z = spg::pgen_input_t(t, selected,
                                              pgen_vars.at(cls).embed,
                                              config.Q_m);
          const ad::Var prompts = spg::pgen_forward_t(t, z, pgen_vars.at(cls),
                                                      config.m, config.d_p);
          const auto out =
              cas::segment_t(t, state.segmenter, segv, decoder_tokens, prompts);
          const ad::Var term =
              loss::seg_loss_t(t, out.mask, item.masks.at(cls));
          seg_sum = seg_sum ? ad::add(*seg_sum, term) : term;
          ++seg_terms;
        }

        ad::Var total = ad::scale(asl, config.asl_weight);
        if (seg_sum) {
          total = ad::add(
              ad::scale(*seg_sum, 1.0 / static_cast<double>(seg_terms)),
              total);
        }
        batch_loss += t.value(total)(0, 0);
        t.backward(total);

        const double w = 1.0 / static_cast<double>(hi - lo);
        if (grads.empty()) grads.assign(grad_vars.size(), Mat());
        for (std::size_t k = 0; k < grad_vars.size(); ++k) {
          const Mat g = t.grad(grad_vars[k]) * w;
          grads[k] = grads[k].size() == 0 ? g : Mat(grads[k] + g);
        }
      }
      const double lr =
          opt::poly_lr(config.lr, optimizer.steps_taken(), total_steps);
      optimizer.step(bound, grads, lr);
      result.step_losses.push_back(batch_loss /
                                   static_cast<double>(hi - lo));
    }
  }
  state.adapters.detach();
  state.learned.push_back(task);

  // Isolation is asserted, not assumed.
  if (frozen_state_checksum(state) != frozen_before) {
    throw StateError("train_task: frozen parameters drifted during training");
  }
  for (const auto& [t, sum] : adapter_before) {
    if (state.adapters.task_checksum(t) != sum) {
      throw StateError("train_task: adapters of task " + std::to_string(t) +
                       " drifted during training");
    }
  }
  for (const auto& [cls, sum] : pgen_before) {
    if (spg::pgen_checksum(state.pgens.at(cls)) != sum) {
      throw StateError("train_task: pGen of class " + std::to_string(cls) +
                       " drifted during training");
    }
  }
  return result;
}

// -- inference ---------------------------------------------------------------

std::vector<std::pair<int, cas::MaskPrediction>> infer_task(
    const ModelState& state, int task_index, const std::vector<Mat>& image,
    double tau) {
  const synth::TaskSpec* task = nullptr;
  for (const auto& learned : state.learned)
    if (learned.task_index == task_index) task = &learned;
  if (task == nullptr) {
    throw LookupError("infer_task: task " + std::to_string(task_index) +
                      " has not been learned");
  }
  return run_one_task(state, *task, image, tau);
}

LabelMap infer(const ModelState& state, const std::vector<Mat>& image,
               double tau, bool parallel) {
  if (state.learned.empty()) {
    throw StateError("infer: no learned tasks; train at least one task first");
  }
  std::vector<std::vector<std::pair<int, cas::MaskPrediction>>> per_task(
      state.learned.size());
  if (parallel) {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(state.learned.size());
    for (std::size_t i = 0; i < state.learned.size(); ++i) {
      workers.emplace_back([&, i] {
        try {
          per_task[i] = run_one_task(state, state.learned[i], image, tau);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& w : workers) w.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < state.learned.size(); ++i)
      per_task[i] = run_one_task(state, state.learned[i], image, tau);
  }

  // Deterministic fold: predictions sorted by class id before aggregation.
  std::vector<std::pair<int, cas::MaskPrediction>> all;
  for (const auto& preds : per_task)
    all.insert(all.end(), preds.begin(), preds.end());
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  return cas::aggregate_masks(all, 0.5, state.config.H, state.config.W);
}

// -- evaluation --------------------------------------------------------------

Metrics evaluate(const ModelState& state,
                 const std::vector<synth::SegSample>& samples,
                 const synth::TaskSchedule& schedule, int up_to_task,
                 const EvalOptions& options) {
  if (up_to_task < 1 ||
      up_to_task > static_cast<int>(schedule.tasks.size())) {
    throw ValidationError("evaluate: up_to_task outside the schedule");
  }
  if (static_cast<int>(state.learned.size()) != up_to_task) {
    throw StateError(
        "evaluate: state has a different number of learned tasks than "
        "up_to_task");
  }

  std::vector<int> old_classes, new_classes;
  for (int k = 0; k < up_to_task; ++k) {
    const auto& ids = schedule.tasks[static_cast<std::size_t>(k)].class_ids;
    auto& dst = k + 1 == up_to_task ? new_classes : old_classes;
    dst.insert(dst.end(), ids.begin(), ids.end());
  }
  synth::TaskSpec seen;
  seen.class_ids = old_classes;
  seen.class_ids.insert(seen.class_ids.end(), new_classes.begin(),
                        new_classes.end());

  std::map<int, double> tp, fp, fn;
  for (const auto& sample : samples) {
    const LabelMap pred =
        infer(state, sample.image, options.tau, options.parallel);
    // Classes from later tasks are unseen at this point of the run and are
    // scored as background, matching incremental evaluation practice.
    const synth::SegSample restricted =
        synth::relabel_overlapped(sample, seen);
    for (Eigen::Index y = 0; y < pred.rows(); ++y)
      for (Eigen::Index x = 0; x < pred.cols(); ++x) {
        const int p = pred(y, x);
        const int g = restricted.label(y, x);
        if (p == g) {
          tp[p] += 1;
        } else {
          fp[p] += 1;
          fn[g] += 1;
        }
      }
  }

  const auto iou_of = [&](int cls) -> std::optional<double> {
    const double denom = tp[cls] + fp[cls] + fn[cls];
    if (denom == 0.0) return std::nullopt;  // never present, never predicted
    return tp[cls] / denom;
  };
  const auto mean_over = [&](const std::vector<int>& classes,
                             Metrics& metrics) -> std::optional<double> {
    double sum = 0.0;
    int count = 0;
    for (const int cls : classes) {
      const auto iou = iou_of(cls);
      if (!iou) continue;
      metrics.per_class_iou[cls] = *iou;
      sum += *iou;
      ++count;
    }
    if (count == 0) return std::nullopt;
    return sum / count;
  };

  Metrics metrics;
  metrics.miou_old = mean_over(old_classes, metrics);
  metrics.miou_new = mean_over(new_classes, metrics);

  double all_sum = 0.0;
  int all_count = 0;
  for (const auto& [cls, iou] : metrics.per_class_iou) {
    all_sum += iou;
    ++all_count;
  }
  if (options.background_in_miou) {
    if (const auto iou = iou_of(0)) {
      metrics.per_class_iou[0] = *iou;
      all_sum += *iou;
      ++all_count;
    }
  }
  metrics.miou_all = all_count == 0 ? 0.0 : all_sum / all_count;
  return metrics;
}

// -- persistence --------------------------------------------------------------

void save_state(const std::filesystem::path& dir, const ModelState& state) {
  std::filesystem::create_directories(dir);
  model::save_frozen(dir / "frozen.bin", state.backbone, state.fusion);
  cas::save_segmenter(dir / "cas.bin", state.segmenter);
  for (const int task : state.adapters.tasks()) {
    state.adapters.save_task(
        dir / ("adapters_" + std::to_string(task) + ".bin"), task);
  }
  std::vector<spg::PGenParams> pgens;
  for (const auto& [cls, pgen] : state.pgens) pgens.push_back(pgen);
  spg::save_pgens(dir / "pgens.bin", pgens);
  for (const auto& [cls, bank] : state.banks)
    text::save_bank(dir / ("bank_" + std::to_string(cls)), bank);

  ordered_json meta;
  meta["tasks"] = ordered_json::array();
  for (const auto& task : state.learned) {
    ordered_json entry;
    entry["index"] = task.task_index;
    entry["classes"] = task.class_ids;
    meta["tasks"].push_back(entry);
  }
  std::ofstream out(dir / "state.json");
  if (!out) {
    throw StateError("save_state: cannot write " +
                     (dir / "state.json").string());
  }
  out << meta.dump(2) << '\n';
}

ModelState load_state(const std::filesystem::path& dir) {
  std::ifstream in(dir / "state.json");
  if (!in) {
    throw StateError("load_state: missing " + (dir / "state.json").string());
  }
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("load_state: state.json: ") + e.what());
  }

  model::BackboneParams backbone;
  model::FusionParams fusion;
  model::load_frozen(dir / "frozen.bin", backbone, fusion);
  ModelState state = init_state(std::move(backbone), std::move(fusion),
                                cas::load_segmenter(dir / "cas.bin"));

  for (const auto& entry : meta.at("tasks")) {
    synth::TaskSpec task;
    task.task_index = entry.at("index").get<int>();
    task.class_ids = entry.at("classes").get<std::vector<int>>();
    state.adapters.load_task(
        dir / ("adapters_" + std::to_string(task.task_index) + ".bin"),
        task.task_index);
    for (const int cls : task.class_ids)
      state.banks[cls] = text::load_bank(dir / ("bank_" + std::to_string(cls)));
    state.learned.push_back(std::move(task));
  }
  for (auto& pgen : spg::load_pgens(dir / "pgens.bin")) {
    const int cls = pgen.class_id;
    state.pgens.emplace(cls, std::move(pgen));
  }
  return state;
}

// -- experiment orchestration --------------------------------------------------

ExperimentResult run_experiment(const RunConfig& config) {
  if (!std::filesystem::exists(config.data_dir)) {
    throw ValidationError("config: data_dir does not exist: " +
                          config.data_dir.string());
  }
  const auto dataset = synth::load_dataset(config.data_dir);
  {
    KeyErrors errs;
    if (dataset.spec.H != config.dims.H) errs.add("dims.H", "dataset disagrees");
    if (dataset.spec.W != config.dims.W) errs.add("dims.W", "dataset disagrees");
    if (dataset.spec.C != config.dims.C) errs.add("dims.C", "dataset disagrees");
    errs.raise_if_any();
  }
  const auto schedule =
      synth::build_schedule(dataset.spec.num_classes, config.schedule);

  if (!std::filesystem::exists(config.frozen_path)) {
    throw StateError("run_experiment: missing frozen fixture " +
                     config.frozen_path.string());
  }
  if (!std::filesystem::exists(config.cas_path)) {
    throw StateError("run_experiment: missing mask decoder fixture " +
                     config.cas_path.string());
  }
  model::BackboneParams backbone;
  model::FusionParams fusion;
  model::load_frozen(config.frozen_path, backbone, fusion);
  cas::SegmenterParams segmenter = cas::load_segmenter(config.cas_path);
  if (!segmenter.frozen) {
    throw StateError("run_experiment: decoder fixture is not frozen");
  }
  {
    KeyErrors errs;
    const auto& sc = segmenter.config;
    if (sc.H != config.dims.H || sc.W != config.dims.W ||
        sc.C != config.dims.C || sc.patch != config.dims.patch ||
        sc.d != config.dims.d || sc.heads != config.dims.heads)
      errs.add("dims", "decoder fixture disagrees");
    if (segmenter.prompt_count != config.m)
      errs.add("m", "decoder fixture disagrees");
    if (segmenter.prompt_dim != config.d_p)
      errs.add("d_p", "decoder fixture disagrees");
    if (backbone.config.d != config.dims.d ||
        backbone.config.patch != config.dims.patch ||
        backbone.config.heads != config.dims.heads)
      errs.add("dims", "frozen fixture disagrees");
    errs.raise_if_any();
  }

  std::filesystem::create_directories(config.out_dir);
  ModelState state =
      init_state(std::move(backbone), std::move(fusion), std::move(segmenter));
  const std::uint64_t frozen_expected = frozen_state_checksum(state);

  // Echo the configuration (paths included) next to the outputs. The
  // metrics document stays path-free so reruns compare bitwise.
  {
    ordered_json echo;
    echo["data_dir"] = config.data_dir.string();
    echo["frozen_path"] = config.frozen_path.string();
    echo["cas_path"] = config.cas_path.string();
    echo["out_dir"] = config.out_dir.string();
    echo["schedule"] = config.schedule;
    echo["dims"] = {{"H", config.dims.H},     {"W", config.dims.W},
                    {"C", config.dims.C},     {"patch", config.dims.patch},
                    {"d", config.dims.d},     {"heads", config.dims.heads}};
    echo["tau"] = config.tau;
    echo["M"] = config.M;
    echo["rank"] = config.rank;
    echo["scaling"] = config.scaling;
    echo["Q_m"] = config.Q_m;
    echo["m"] = config.m;
    echo["d_p"] = config.d_p;
    echo["h"] = config.h;
    echo["lr"] = config.lr;
    echo["wd"] = config.wd;
    echo["epochs"] = config.epochs;
    echo["batch"] = config.batch;
    echo["seed"] = config.seed;
    echo["text_seed"] = config.text_seed;
    echo["background_in_miou"] = config.background_in_miou;
    echo["parallel_infer"] = config.parallel_infer;
    std::ofstream out(config.out_dir / "config.json");
    if (!out) {
      throw StateError("run_experiment: cannot write " +
                       (config.out_dir / "config.json").string());
    }
    out << echo.dump(2) << '\n';
  }

  ExperimentResult result;
  ordered_json metrics_doc;
  metrics_doc["schedule"] = config.schedule;
  metrics_doc["seed"] = config.seed;
  metrics_doc["tau"] = config.tau;
  {
    std::ostringstream hex;
    hex << std::hex << frozen_expected;
    metrics_doc["frozen_checksum"] = hex.str();
  }
  metrics_doc["tasks"] = ordered_json::array();

  std::ostringstream report;
  report << "task,classes,miou_old,miou_new,miou_all,mean_forgetting\n";

  std::map<int, double> best_iou;
  const EvalOptions eval_options{config.tau, config.background_in_miou,
                                 config.parallel_infer};
  for (std::size_t k = 0; k < schedule.tasks.size(); ++k) {
    const auto& task = schedule.tasks[k];
    const auto trained = train_task(state, task, dataset.samples, dataset.spec,
                                    train_config(config));
    if (frozen_state_checksum(state) != frozen_expected) {
      throw StateError("run_experiment: frozen checksum drifted after task " +
                       std::to_string(task.task_index));
    }

    Metrics metrics = evaluate(state, dataset.samples, schedule,
                               task.task_index, eval_options);
    for (const auto& [cls, iou] : metrics.per_class_iou) {
      const auto it = best_iou.find(cls);
      const double best =
          it == best_iou.end() ? iou : std::max(it->second, iou);
      metrics.forgetting[cls] = best - iou;
      best_iou[cls] = best;
    }

    save_state(config.out_dir / ("task_" + std::to_string(task.task_index)),
               state);

    ordered_json row;
    row["task"] = task.task_index;
    row["classes"] = task.class_ids;
    ordered_json per_class = ordered_json::object();
    for (const auto& [cls, iou] : metrics.per_class_iou)
      per_class[std::to_string(cls)] = iou;
    row["per_class_iou"] = per_class;
    row["miou_old"] =
        metrics.miou_old ? ordered_json(*metrics.miou_old) : ordered_json();
    row["miou_new"] =
        metrics.miou_new ? ordered_json(*metrics.miou_new) : ordered_json();
    row["miou_all"] = metrics.miou_all;
    ordered_json forgetting = ordered_json::object();
    double forget_sum = 0.0;
    for (const auto& [cls, value] : metrics.forgetting) {
      forgetting[std::to_string(cls)] = value;
      forget_sum += value;
    }
    row["forgetting"] = forgetting;
    row["final_train_loss"] = trained.step_losses.back();
    metrics_doc["tasks"].push_back(row);

    std::string class_list;
    for (const int cls : task.class_ids) {
      if (!class_list.empty()) class_list += '|';
      class_list += std::to_string(cls);
    }
    const double mean_forgetting =
        metrics.forgetting.empty()
            ? 0.0
            : forget_sum / static_cast<double>(metrics.forgetting.size());
    report << task.task_index << ',' << class_list << ','
           << (metrics.miou_old ? fmt(*metrics.miou_old) : "") << ','
           << (metrics.miou_new ? fmt(*metrics.miou_new) : "") << ','
           << fmt(metrics.miou_all) << ',' << fmt(mean_forgetting) << '\n';

    result.per_task.push_back(std::move(metrics));
    result.final_losses.push_back(trained.step_losses.back());
  }

  result.metrics_path = config.out_dir / "metrics.json";
  result.report_path = config.out_dir / "report.csv";
  {
    std::ofstream out(result.metrics_path);
    if (!out) {
      throw StateError("run_experiment: cannot write " +
                       result.metrics_path.string());
    }
    out << metrics_doc.dump(2) << '\n';
  }
  {
    std::ofstream out(result.report_path);
    if (!out) {
      throw StateError("run_experiment: cannot write " +
                       result.report_path.string());
    }
    out << report.str();
  }
  return result;
}

ExperimentResult run_experiment(const std::filesystem::path& config_path) {
  return run_experiment(parse_config(config_path));
}

}  // namespace dcss::harness
