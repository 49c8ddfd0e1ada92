#include "dcss/harness.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace dcss;

json read_json(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ValidationError(std::string(what) + ": cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string(what) + ": not valid JSON: " + e.what());
  }
}

synth::DatasetSpec dataset_spec_from_json(const json& j,
                                          std::string* schedule_pattern) {
  if (!j.is_object()) throw ValidationError("spec: must be a JSON object");
  synth::DatasetSpec spec;
  std::vector<std::string> bad;
  for (const auto& [key, value] : j.items()) {
    if (key == "num_classes" || key == "H" || key == "W" || key == "C" ||
        key == "samples_per_class") {
      if (!value.is_number_integer() || value.get<int>() < 1) {
        bad.push_back(key + " (must be a positive integer)");
        continue;
      }
      const int v = value.get<int>();
      if (key == "num_classes") spec.num_classes = v;
      if (key == "H") spec.H = v;
      if (key == "W") spec.W = v;
      if (key == "C") spec.C = v;
      if (key == "samples_per_class") spec.samples_per_class = v;
    } else if (key == "seed") {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        bad.push_back("seed (must be a non-negative integer)");
        continue;
      }
      spec.seed = value.get<std::uint64_t>();
    } else if (key == "schedule") {
      if (!value.is_string()) {
        bad.push_back("schedule (must be a string)");
        continue;
      }
      *schedule_pattern = value.get<std::string>();
    } else {
      bad.push_back(key + " (unknown key)");
    }
  }
  if (!bad.empty()) {
    std::string msg = "spec:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ValidationError(msg);
  }
  synth::fill_default_shapes(spec);
  return spec;
}

int cmd_gen_data(const fs::path& spec_path, const fs::path& out_dir) {
  std::string pattern;
  const auto spec = dataset_spec_from_json(read_json(spec_path, "spec"),
                                           &pattern);
  const auto samples = synth::generate_dataset(spec);
  std::optional<synth::TaskSchedule> schedule;
  if (!pattern.empty())
    schedule = synth::build_schedule(spec.num_classes, pattern);
  synth::save_dataset(out_dir, spec, samples, schedule);
  std::cout << "wrote " << samples.size() << " samples ("
            << spec.num_classes << " classes, " << spec.H << "x" << spec.W
            << ") to " << out_dir.string() << "\n";
  return 0;
}

int cmd_pretrain_cas(const fs::path& data_dir, const fs::path& cas_out,
                     fs::path frozen_out, int d, int heads, int patch, int m,
                     int d_p, int pair_cap, std::uint64_t seed) {
  const auto dataset = synth::load_dataset(data_dir);
  if (frozen_out.empty())
    frozen_out = cas_out.parent_path() / "frozen.bin";

  model::ModelConfig config;
  config.H = dataset.spec.H;
  config.W = dataset.spec.W;
  config.C = dataset.spec.C;
  config.patch = patch;
  config.d = d;
  config.heads = heads;

  auto backbone = model::init_backbone(config, seed);
  model::PretrainConfig bcfg;
  bcfg.seed = mix_seed(seed, 0xbb);
  const double backbone_loss =
      model::pretrain_backbone(backbone, dataset.samples, bcfg);
  const auto fusion = model::init_fusion(config, mix_seed(seed, 0xfe));
  model::save_frozen(frozen_out, backbone, fusion);

  std::vector<cas::SegTrainPair> pairs;
  for (const auto& sample : dataset.samples) {
    const auto tokens =
        model::encode_image(backbone, sample.image, lora::AdapterView{});
    for (int cls = 1; cls <= dataset.spec.num_classes; ++cls) {
      Mat mask(sample.label.rows(), sample.label.cols());
      for (Eigen::Index y = 0; y < mask.rows(); ++y)
        for (Eigen::Index x = 0; x < mask.cols(); ++x)
          mask(y, x) = sample.label(y, x) == cls ? 1.0 : 0.0;
      if (mask.sum() == 0.0) continue;
      pairs.push_back({tokens.tokens, cas::centroid_prompt(mask, m, d_p),
                       std::move(mask)});
    }
    if (pair_cap > 0 && pairs.size() >= static_cast<std::size_t>(pair_cap))
      break;
  }

  const auto init = cas::init_segmenter(config, m, d_p, mix_seed(seed, 0xca));
  const auto trained =
      cas::pretrain_segmenter(init, pairs, cas::SegPretrainConfig{});
  cas::save_segmenter(cas_out, trained.params);

  std::cout << "backbone pretext loss " << backbone_loss << "\n"
            << "decoder pairs " << pairs.size() << ", final loss "
            << trained.final_loss << ", holdout IoU " << trained.holdout_iou
            << "\n"
            << "wrote " << cas_out.string() << " and " << frozen_out.string()
            << "\n";
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& out_override) {
  auto config = harness::parse_config(config_path);
  if (!out_override.empty()) config.out_dir = out_override;
  const auto result = harness::run_experiment(config);
  for (std::size_t k = 0; k < result.per_task.size(); ++k) {
    const auto& metrics = result.per_task[k];
    std::cout << "task " << k + 1 << ": miou_all " << metrics.miou_all;
    if (metrics.miou_old) std::cout << ", miou_old " << *metrics.miou_old;
    if (metrics.miou_new) std::cout << ", miou_new " << *metrics.miou_new;
    std::cout << ", final loss " << result.final_losses[k] << "\n";
  }
  std::cout << "metrics: " << result.metrics_path.string() << "\n"
            << "report:  " << result.report_path.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& run_dir, int task) {
  const auto config = harness::parse_config(run_dir / "config.json");
  const auto checkpoint = run_dir / ("task_" + std::to_string(task));
  if (!fs::exists(checkpoint / "state.json")) {
    throw StateError("eval: no checkpoint for task " + std::to_string(task) +
                     " under " + run_dir.string());
  }
  const auto state = harness::load_state(checkpoint);
  const auto dataset = synth::load_dataset(config.data_dir);
  const auto schedule =
      synth::build_schedule(dataset.spec.num_classes, config.schedule);
  harness::EvalOptions options;
  options.tau = config.tau;
  options.background_in_miou = config.background_in_miou;
  options.parallel = config.parallel_infer;
  const auto metrics =
      harness::evaluate(state, dataset.samples, schedule, task, options);

  ordered_json out;
  out["task"] = task;
  ordered_json per_class = ordered_json::object();
  for (const auto& [cls, iou] : metrics.per_class_iou)
    per_class[std::to_string(cls)] = iou;
  out["per_class_iou"] = per_class;
  out["miou_old"] =
      metrics.miou_old ? ordered_json(*metrics.miou_old) : ordered_json();
  out["miou_new"] =
      metrics.miou_new ? ordered_json(*metrics.miou_new) : ordered_json();
  out["miou_all"] = metrics.miou_all;
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_report(const fs::path& run_dir, const std::string& format) {
  const fs::path path =
      run_dir / (format == "json" ? "metrics.json" : "report.csv");
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw StateError("report: missing " + path.string() +
                     "; run `dcss train` first");
  }
  std::cout << in.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage continual segmentation workbench"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  fs::path gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "dataset spec JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* pre = app.add_subcommand(
      "pretrain-cas", "pretrain the frozen backbone and mask decoder");
  fs::path pre_data, pre_out, pre_frozen;
  int pre_d = 32, pre_heads = 2, pre_patch = 4, pre_m = 6, pre_dp = 32;
  int pre_pairs = 520;
  std::uint64_t pre_seed = 5;
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "decoder checkpoint path")->required();
  pre->add_option("--frozen", pre_frozen,
                  "backbone checkpoint path (default: frozen.bin next to "
                  "--out)");
  pre->add_option("--d", pre_d, "token width");
  pre->add_option("--heads", pre_heads, "attention heads");
  pre->add_option("--patch", pre_patch, "patch side");
  pre->add_option("--m", pre_m, "prompts per mask");
  pre->add_option("--d-p", pre_dp, "prompt width");
  pre->add_option("--pairs", pre_pairs, "training pair cap, 0 = all");
  pre->add_option("--seed", pre_seed, "initialization seed");

  auto* train = app.add_subcommand("train", "run a continual experiment");
  fs::path train_config, train_out;
  train->add_option("--config", train_config, "run config JSON")->required();
  train->add_option("--out", train_out, "override the config's out_dir");

  auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
  fs::path eval_run;
  int eval_task = 1;
  eval->add_option("--run", eval_run, "run directory")->required();
  eval->add_option("--task", eval_task, "task index")->required();

  auto* report = app.add_subcommand("report", "print a run's metrics");
  fs::path report_run;
  std::string report_format = "csv";
  report->add_option("--run", report_run, "run directory")->required();
  report->add_option("--format", report_format, "csv or json")
      ->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(gen_spec, gen_out);
    if (pre->parsed())
      return cmd_pretrain_cas(pre_data, pre_out, pre_frozen, pre_d, pre_heads,
                              pre_patch, pre_m, pre_dp, pre_pairs, pre_seed);
    if (train->parsed()) return cmd_train(train_config, train_out);
    if (eval->parsed()) return cmd_eval(eval_run, eval_task);
    if (report->parsed()) return cmd_report(report_run, report_format);
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DegenerateInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const StateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
