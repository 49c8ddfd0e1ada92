#include "dcss/harness.hpp"

#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace dcss;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Small but real: 16x16 images, four classes, an untrained frozen stack.
// Wiring tests need isolation and determinism, not segmentation quality.
struct Fixture {
  synth::DatasetSpec spec;
  std::vector<synth::SegSample> samples;
  synth::TaskSchedule schedule;
  model::ModelConfig mc;
  model::BackboneParams backbone;
  model::FusionParams fusion;
  cas::SegmenterParams segmenter;
  harness::TrainTaskConfig tcfg;

  Fixture() {
    spec.num_classes = 4;
    spec.H = 16;
    spec.W = 16;
    spec.samples_per_class = 5;
    spec.seed = 21;
    synth::fill_default_shapes(spec);
    samples = synth::generate_dataset(spec);
    schedule = synth::build_schedule(spec.num_classes, "2-2");

    mc.H = 16;
    mc.W = 16;
    mc.patch = 4;
    mc.d = 16;
    mc.heads = 2;
    backbone = model::init_backbone(mc, 7);
    fusion = model::init_fusion(mc, 9);
    segmenter = cas::init_segmenter(mc, 4, 16, 13);
    segmenter.frozen = true;

    tcfg.rank = 2;
    tcfg.M = 3;
    tcfg.Q_m = 64;
    tcfg.h = 32;
    tcfg.m = 4;
    tcfg.d_p = 16;
    tcfg.lr = 1e-3;
    tcfg.epochs = 2;
    tcfg.batch = 4;
    tcfg.seed = 3;
  }

  harness::ModelState state() const {
    return harness::init_state(backbone, fusion, segmenter);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("parse_config accepts a full document and fills defaults") {
  const auto cfg = harness::parse_config_text(R"({
    "data_dir": "/tmp/d", "frozen_path": "/tmp/f.bin",
    "cas_path": "/tmp/c.bin", "out_dir": "/tmp/o",
    "schedule": "2-2",
    "dims": {"H": 16, "W": 16, "d": 16, "heads": 2},
    "tau": 0.3, "rank": 2, "epochs": 1, "seed": 9
  })");
  CHECK(cfg.schedule == "2-2");
  CHECK(cfg.dims.H == 16);
  CHECK(cfg.dims.patch == 4);  // untouched default
  CHECK(cfg.tau == doctest::Approx(0.3));
  CHECK(cfg.rank == 2);
  CHECK(cfg.epochs == 1);
  CHECK(cfg.seed == 9);
  CHECK(cfg.M == 6);
  CHECK(cfg.lr == doctest::Approx(1e-4));
  CHECK(cfg.background_in_miou);
  CHECK_FALSE(cfg.parallel_infer);
}

TEST_CASE("parse_config lists every violated key in one error") {
  const std::string bad = R"({
    "data_dir": "/tmp/d", "frozen_path": "/tmp/f.bin",
    "cas_path": "/tmp/c.bin", "out_dir": "/tmp/o",
    "schedule": "2-2",
    "tau": 1.5, "rank": 0, "lr": -1.0, "bogus": 1,
    "dims": {"H": 16, "mystery": 2}
  })";
  try {
    harness::parse_config_text(bad);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("tau") != std::string::npos);
    CHECK(msg.find("rank") != std::string::npos);
    CHECK(msg.find("lr") != std::string::npos);
    CHECK(msg.find("bogus") != std::string::npos);
    CHECK(msg.find("dims.mystery") != std::string::npos);
  }
}

TEST_CASE("parse_config rejects missing required keys and bad JSON") {
  CHECK_THROWS_AS(harness::parse_config_text("{}"), ValidationError);
  CHECK_THROWS_AS(harness::parse_config_text("not json"), ValidationError);
  CHECK_THROWS_AS(harness::parse_config_text("[1,2]"), ValidationError);
  try {
    harness::parse_config_text(R"({"schedule": "2-2"})");
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("data_dir") != std::string::npos);
    CHECK(msg.find("frozen_path") != std::string::npos);
    CHECK(msg.find("cas_path") != std::string::npos);
    CHECK(msg.find("out_dir") != std::string::npos);
  }
}

TEST_CASE("train_task guards state transitions") {
  const auto& f = fixture();

  SUBCASE("unfrozen decoder is a state error") {
    auto seg = f.segmenter;
    seg.frozen = false;
    auto state = harness::init_state(f.backbone, f.fusion, seg);
    CHECK_THROWS_AS(harness::train_task(state, f.schedule.tasks[0], f.samples,
                                        f.spec, f.tcfg),
                    StateError);
  }
  SUBCASE("m mismatch with the decoder fixture is a validation error") {
    auto state = f.state();
    auto cfg = f.tcfg;
    cfg.m = 6;
    CHECK_THROWS_AS(harness::train_task(state, f.schedule.tasks[0], f.samples,
                                        f.spec, cfg),
                    ValidationError);
  }
  SUBCASE("tasks must arrive in order") {
    auto state = f.state();
    CHECK_THROWS_AS(harness::train_task(state, f.schedule.tasks[1], f.samples,
                                        f.spec, f.tcfg),
                    StateError);
  }
  SUBCASE("empty and duplicate class lists are validation errors") {
    auto state = f.state();
    synth::TaskSpec empty{1, {}};
    CHECK_THROWS_AS(
        harness::train_task(state, empty, f.samples, f.spec, f.tcfg),
        ValidationError);
    synth::TaskSpec dup{1, {1, 1}};
    CHECK_THROWS_AS(harness::train_task(state, dup, f.samples, f.spec, f.tcfg),
                    ValidationError);
  }
  SUBCASE("a perturbed frozen tensor aborts the next task") {
    auto state = f.state();
    harness::train_task(state, f.schedule.tasks[0], f.samples, f.spec, f.tcfg);
    state.segmenter.logit_w(0, 0) += 1.0;
    CHECK_THROWS_AS(harness::train_task(state, f.schedule.tasks[1], f.samples,
                                        f.spec, f.tcfg),
                    StateError);
  }
}

TEST_CASE("train_task learns a task and re-training it is refused") {
  const auto& f = fixture();
  auto state = f.state();
  const auto result = harness::train_task(state, f.schedule.tasks[0],
                                          f.samples, f.spec, f.tcfg);
  CHECK(result.samples_used > 0);
  CHECK(result.step_losses.size() ==
        static_cast<std::size_t>(f.tcfg.epochs *
                                 ((result.samples_used + f.tcfg.batch - 1) /
                                  f.tcfg.batch)));
  for (const double loss : result.step_losses) CHECK(std::isfinite(loss));
  CHECK(state.learned.size() == 1);
  CHECK(state.adapters.has_task(1));
  CHECK(state.pgens.count(1) == 1);
  CHECK(state.pgens.count(2) == 1);
  CHECK(state.banks.count(1) == 1);

  CHECK_THROWS_AS(harness::train_task(state, f.schedule.tasks[0], f.samples,
                                      f.spec, f.tcfg),
                  StateError);

  // The same classes may not reappear under a new task index.
  synth::TaskSpec clash{2, {2, 3}};
  CHECK_THROWS_AS(
      harness::train_task(state, clash, f.samples, f.spec, f.tcfg),
      StateError);
}

TEST_CASE("training is deterministic and isolates earlier tasks") {
  const auto& f = fixture();
  auto a = f.state();
  auto b = f.state();
  const auto ra =
      harness::train_task(a, f.schedule.tasks[0], f.samples, f.spec, f.tcfg);
  const auto rb =
      harness::train_task(b, f.schedule.tasks[0], f.samples, f.spec, f.tcfg);
  REQUIRE(ra.step_losses.size() == rb.step_losses.size());
  for (std::size_t i = 0; i < ra.step_losses.size(); ++i)
    CHECK(ra.step_losses[i] == rb.step_losses[i]);
  CHECK(a.adapters.task_checksum(1) == b.adapters.task_checksum(1));
  CHECK(spg::pgen_checksum(a.pgens.at(1)) == spg::pgen_checksum(b.pgens.at(1)));

  const auto task1_adapters = a.adapters.task_checksum(1);
  const auto task1_pgen1 = spg::pgen_checksum(a.pgens.at(1));
  const auto task1_pgen2 = spg::pgen_checksum(a.pgens.at(2));
  const auto frozen = harness::frozen_state_checksum(a);
  harness::train_task(a, f.schedule.tasks[1], f.samples, f.spec, f.tcfg);
  CHECK(a.adapters.task_checksum(1) == task1_adapters);
  CHECK(spg::pgen_checksum(a.pgens.at(1)) == task1_pgen1);
  CHECK(spg::pgen_checksum(a.pgens.at(2)) == task1_pgen2);
  CHECK(harness::frozen_state_checksum(a) == frozen);
  CHECK(a.learned.size() == 2);
}

TEST_CASE("infer needs a learned task and folds tasks deterministically") {
  const auto& f = fixture();
  auto state = f.state();
  CHECK_THROWS_AS(harness::infer(state, f.samples[0].image, 0.2, false),
                  StateError);
  CHECK_THROWS_AS(harness::infer_task(state, 1, f.samples[0].image, 0.2),
                  LookupError);

  harness::train_task(state, f.schedule.tasks[0], f.samples, f.spec, f.tcfg);
  harness::train_task(state, f.schedule.tasks[1], f.samples, f.spec, f.tcfg);
  CHECK_THROWS_AS(harness::infer_task(state, 3, f.samples[0].image, 0.2),
                  LookupError);

  for (int i = 0; i < 3; ++i) {
    const LabelMap seq = harness::infer(state, f.samples[i].image, 0.2, false);
    const LabelMap par = harness::infer(state, f.samples[i].image, 0.2, true);
    CHECK(seq == par);
    for (Eigen::Index y = 0; y < seq.rows(); ++y)
      for (Eigen::Index x = 0; x < seq.cols(); ++x) {
        CHECK(seq(y, x) >= 0);
        CHECK(seq(y, x) <= 4);
      }
  }
}

TEST_CASE("evaluate matches a pixel-counting oracle") {
  const auto& f = fixture();
  auto state = f.state();
  harness::train_task(state, f.schedule.tasks[0], f.samples, f.spec, f.tcfg);

  harness::EvalOptions options;
  options.background_in_miou = true;
  const auto metrics =
      harness::evaluate(state, f.samples, f.schedule, 1, options);

  // Oracle: accumulate confusion counts over the set by hand, against the
  // ground truth restricted to the classes seen so far.
  synth::TaskSpec seen{0, {1, 2}};
  std::map<int, long> tp, fp, fn;
  for (const auto& sample : f.samples) {
    const LabelMap pred = harness::infer(state, sample.image, options.tau,
                                         false);
    const auto restricted = synth::relabel_overlapped(sample, seen);
    for (Eigen::Index y = 0; y < pred.rows(); ++y)
      for (Eigen::Index x = 0; x < pred.cols(); ++x) {
        const int p = pred(y, x);
        const int g = restricted.label(y, x);
        if (p == g) {
          ++tp[p];
        } else {
          ++fp[p];
          ++fn[g];
        }
      }
  }
  double sum = 0.0;
  int count = 0;
  for (const int cls : {0, 1, 2}) {
    const double denom = static_cast<double>(tp[cls] + fp[cls] + fn[cls]);
    if (denom == 0.0) {
      CHECK(metrics.per_class_iou.count(cls) == 0);
      continue;
    }
    const double iou = static_cast<double>(tp[cls]) / denom;
    REQUIRE(metrics.per_class_iou.count(cls) == 1);
    CHECK(metrics.per_class_iou.at(cls) == doctest::Approx(iou).epsilon(1e-12));
    sum += iou;
    ++count;
  }
  REQUIRE(count > 0);
  CHECK(metrics.miou_all == doctest::Approx(sum / count).epsilon(1e-12));
  CHECK_FALSE(metrics.miou_old.has_value());  // first task has no old classes
  CHECK(metrics.miou_new.has_value());

  // Without background the mean covers foreground only.
  harness::EvalOptions fg = options;
  fg.background_in_miou = false;
  const auto fg_metrics = harness::evaluate(state, f.samples, f.schedule, 1, fg);
  CHECK(fg_metrics.per_class_iou.count(0) == 0);

  CHECK_THROWS_AS(harness::evaluate(state, f.samples, f.schedule, 2, options),
                  StateError);
  CHECK_THROWS_AS(harness::evaluate(state, f.samples, f.schedule, 0, options),
                  ValidationError);
}

TEST_CASE("model state round-trips through a checkpoint directory") {
  const auto& f = fixture();
  auto state = f.state();
  harness::train_task(state, f.schedule.tasks[0], f.samples, f.spec, f.tcfg);
  harness::train_task(state, f.schedule.tasks[1], f.samples, f.spec, f.tcfg);

  const auto dir = fresh_dir("dcss_harness_ckpt");
  harness::save_state(dir, state);
  const auto loaded = harness::load_state(dir);

  CHECK(harness::frozen_state_checksum(loaded) ==
        harness::frozen_state_checksum(state));
  REQUIRE(loaded.learned.size() == 2);
  CHECK(loaded.learned[0].class_ids == state.learned[0].class_ids);
  CHECK(loaded.learned[1].class_ids == state.learned[1].class_ids);
  for (const int task : {1, 2})
    CHECK(loaded.adapters.task_checksum(task) ==
          state.adapters.task_checksum(task));
  for (const auto& [cls, pgen] : state.pgens)
    CHECK(spg::pgen_checksum(loaded.pgens.at(cls)) ==
          spg::pgen_checksum(pgen));
  for (const auto& [cls, bank] : state.banks)
    CHECK(loaded.banks.at(cls).embeddings == bank.embeddings);

  const LabelMap before = harness::infer(state, f.samples[0].image, 0.2, false);
  const LabelMap after = harness::infer(loaded, f.samples[0].image, 0.2, false);
  CHECK(before == after);
  std::filesystem::remove_all(dir);
}

TEST_CASE("run_experiment writes fixed outputs and reruns bit-identically") {
  const auto& f = fixture();
  const auto root = fresh_dir("dcss_harness_run");
  const auto data_dir = root / "data";
  synth::save_dataset(data_dir, f.spec, f.samples, f.schedule);
  model::save_frozen(root / "frozen.bin", f.backbone, f.fusion);
  cas::save_segmenter(root / "cas.bin", f.segmenter);

  harness::RunConfig cfg;
  cfg.data_dir = data_dir;
  cfg.frozen_path = root / "frozen.bin";
  cfg.cas_path = root / "cas.bin";
  cfg.out_dir = root / "run_a";
  cfg.schedule = "2-2";
  cfg.dims = f.mc;
  cfg.rank = 2;
  cfg.M = 3;
  cfg.Q_m = 64;
  cfg.h = 32;
  cfg.m = 4;
  cfg.d_p = 16;
  cfg.lr = 1e-3;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.seed = 3;

  const auto result = harness::run_experiment(cfg);
  REQUIRE(result.per_task.size() == 2);
  CHECK(std::filesystem::exists(result.metrics_path));
  CHECK(std::filesystem::exists(result.report_path));
  CHECK(std::filesystem::exists(cfg.out_dir / "config.json"));
  CHECK(std::filesystem::exists(cfg.out_dir / "task_1" / "state.json"));
  CHECK(std::filesystem::exists(cfg.out_dir / "task_2" / "state.json"));

  // Forgetting is measured against the best value seen so far, so the
  // recorded numbers are never negative.
  for (const auto& metrics : result.per_task)
    for (const auto& [cls, value] : metrics.forgetting) CHECK(value >= 0.0);

  const std::string report = slurp(result.report_path);
  CHECK(report.rfind("task,classes,miou_old,miou_new,miou_all,"
                     "mean_forgetting\n", 0) == 0);
  CHECK(std::count(report.begin(), report.end(), '\n') == 3);

  auto cfg_b = cfg;
  cfg_b.out_dir = root / "run_b";
  const auto rerun = harness::run_experiment(cfg_b);
  CHECK(slurp(result.metrics_path) == slurp(rerun.metrics_path));
  CHECK(slurp(result.report_path) == slurp(rerun.report_path));
  for (std::size_t k = 0; k < result.per_task.size(); ++k)
    CHECK(result.per_task[k] == rerun.per_task[k]);

  // A checkpoint restores the exact metrics of its task.
  const auto restored = harness::load_state(cfg.out_dir / "task_2");
  harness::EvalOptions options;
  options.tau = cfg.tau;
  const auto again =
      harness::evaluate(restored, f.samples, f.schedule, 2, options);
  auto expected = result.per_task[1];
  expected.forgetting.clear();  // evaluate leaves history to the caller
  CHECK(again == expected);

  std::filesystem::remove_all(root);
}

TEST_CASE("run_experiment rejects missing fixtures and config mismatches") {
  const auto& f = fixture();
  const auto root = fresh_dir("dcss_harness_reject");
  const auto data_dir = root / "data";
  synth::save_dataset(data_dir, f.spec, f.samples, f.schedule);

  harness::RunConfig cfg;
  cfg.data_dir = data_dir;
  cfg.frozen_path = root / "frozen.bin";
  cfg.cas_path = root / "cas.bin";
  cfg.out_dir = root / "run";
  cfg.schedule = "2-2";
  cfg.dims = f.mc;
  cfg.m = 4;
  cfg.d_p = 16;

  // Fixtures absent: a state error, not a validation error.
  CHECK_THROWS_AS(harness::run_experiment(cfg), StateError);

  model::save_frozen(root / "frozen.bin", f.backbone, f.fusion);
  CHECK_THROWS_AS(harness::run_experiment(cfg), StateError);
  cas::save_segmenter(root / "cas.bin", f.segmenter);

  auto bad_dims = cfg;
  bad_dims.dims.H = 32;
  try {
    harness::run_experiment(bad_dims);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("dims.H") != std::string::npos);
  }

  auto bad_m = cfg;
  bad_m.m = 6;
  try {
    harness::run_experiment(bad_m);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("m") != std::string::npos);
  }

  auto bad_schedule = cfg;
  bad_schedule.schedule = "9-1";
  CHECK_THROWS_AS(harness::run_experiment(bad_schedule), ScheduleError);

  std::filesystem::remove_all(root);
}
