#include "dcss/synth_data.hpp"

#include "dcss/binio.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace dcss::synth {

using nlohmann::json;

namespace {

constexpr ShapeKind kKinds[] = {ShapeKind::disk,   ShapeKind::square,
                                ShapeKind::triangle, ShapeKind::ring,
                                ShapeKind::cross,  ShapeKind::bar};
constexpr int kNumKinds = 6;

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - f * s);
  const double t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

/// Class colors spaced by the golden angle so neighbors stay distinct.
Rgb class_color(int class_id) {
  const double hue = std::fmod(0.08 + (class_id - 1) * 0.61803398875, 1.0);
  return hsv_to_rgb(hue, 0.8, 0.9);
}

bool inside_shape(ShapeKind kind, double dx, double dy, double r) {
  const double d2 = dx * dx + dy * dy;
  switch (kind) {
    case ShapeKind::disk:
      return d2 <= r * r;
    case ShapeKind::square:
      return std::abs(dx) <= r * 0.82 && std::abs(dy) <= r * 0.82;
    case ShapeKind::triangle: {
      // upward isoceles: width grows linearly from apex to base
      const double yy = dy + r;  // 0 at apex, 2r at base
      if (yy < 0.0 || yy > 2.0 * r) return false;
      return std::abs(dx) <= (yy / (2.0 * r)) * r;
    }
    case ShapeKind::ring:
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    case ShapeKind::cross: {
      const double w = std::max(1.2, r * 0.34);
      if (std::abs(dx) > r || std::abs(dy) > r) return false;
      return std::abs(dx) <= w || std::abs(dy) <= w;
    }
    case ShapeKind::bar:
      return std::abs(dx) <= r && std::abs(dy) <= std::max(1.2, r * 0.3);
  }
  return false;
}

struct ShapePlan {
  int class_id;
  ShapeKind kind;
  double cx, cy, r;
};

// Paints shapes into a scratch label/ownership grid. Returns false when any
// shape's surviving region is below 1% of the pixels.
bool paint(const DatasetSpec& spec, const std::vector<ShapePlan>& plan,
           LabelMap& label, LabelMap& owner) {
  label.setZero();
  owner.setConstant(-1);
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const ShapePlan& sp = plan[s];
    for (int y = 0; y < spec.H; ++y)
      for (int x = 0; x < spec.W; ++x)
        if (inside_shape(sp.kind, x - sp.cx, y - sp.cy, sp.r)) {
          label(y, x) = sp.class_id;
          owner(y, x) = static_cast<int>(s);
        }
  }
  const int min_pixels =
      std::max(1, static_cast<int>(std::ceil(0.01 * spec.H * spec.W)));
  std::vector<int> counts(plan.size(), 0);
  for (int y = 0; y < spec.H; ++y)
    for (int x = 0; x < spec.W; ++x)
      if (owner(y, x) >= 0) counts[static_cast<std::size_t>(owner(y, x))]++;
  return std::all_of(counts.begin(), counts.end(),
                     [&](int c) { return c >= min_pixels; });
}

SegSample make_sample(const DatasetSpec& spec, int index) {
  const int primary = index % spec.num_classes + 1;
  const std::uint64_t base = mix_seed(spec.seed, static_cast<std::uint64_t>(index));

  SegSample sample;
  sample.label.resize(spec.H, spec.W);
  LabelMap owner(spec.H, spec.W);

  char id[16];
  std::snprintf(id, sizeof(id), "s%05d", index);
  sample.sample_id = id;

  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(mix_seed(base, attempt));
    const int extra = rng.uniform_int(0, 2);
    std::vector<ShapePlan> plan;
    for (int s = 0; s < 1 + extra; ++s) {
      ShapePlan sp;
      sp.class_id = (s == 0) ? primary : rng.uniform_int(1, spec.num_classes);
      sp.kind = spec.shapes.at(sp.class_id);
      sp.r = rng.uniform(4.0, std::min(spec.H, spec.W) / 4.0);
      sp.cx = rng.uniform(sp.r + 1.0, spec.W - sp.r - 2.0);
      sp.cy = rng.uniform(sp.r + 1.0, spec.H - sp.r - 2.0);
      plan.push_back(sp);
    }
    if (!paint(spec, plan, sample.label, owner)) continue;

    sample.image.assign(static_cast<std::size_t>(spec.C),
                        Mat(spec.H, spec.W));
    for (int y = 0; y < spec.H; ++y)
      for (int x = 0; x < spec.W; ++x) {
        const int k = sample.label(y, x);
        double ch[3];
        if (k == 0) {
          for (int c = 0; c < 3; ++c) ch[c] = rng.uniform(0.0, 0.12);
        } else {
          const Rgb col = class_color(k);
          ch[0] = col.r;
          ch[1] = col.g;
          ch[2] = col.b;
          for (int c = 0; c < 3; ++c)
            ch[c] = std::clamp(ch[c] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
        }
        for (int c = 0; c < spec.C; ++c)
          sample.image[static_cast<std::size_t>(c)](y, x) =
              f32(ch[std::min(c, 2)]);
      }
    return sample;
  }
}

}  // namespace

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::ring: return "ring";
    case ShapeKind::cross: return "cross";
    case ShapeKind::bar: return "bar";
  }
  throw ValidationError("unknown shape kind");
}

ShapeKind shape_from_name(const std::string& name) {
  for (ShapeKind k : kKinds)
    if (shape_name(k) == name) return k;
  throw ValidationError("unknown shape name: " + name);
}

ShapeKind shape_for_class(int class_id) {
  if (class_id < 1) throw ValidationError("class id must be >= 1");
  return kKinds[(class_id - 1) % kNumKinds];
}

void fill_default_shapes(DatasetSpec& spec) {
  if (!spec.shapes.empty()) return;
  for (int k = 1; k <= spec.num_classes; ++k)
    spec.shapes[k] = shape_for_class(k);
}

void validate(const DatasetSpec& spec) {
  if (spec.num_classes < 2)
    throw ValidationError("num_classes must be >= 2");
  if (spec.H < 16) throw ValidationError("H must be >= 16");
  if (spec.W < 16) throw ValidationError("W must be >= 16");
  if (spec.C < 1) throw ValidationError("C must be >= 1");
  if (spec.samples_per_class < 1)
    throw ValidationError("samples_per_class must be >= 1");
  for (int k = 1; k <= spec.num_classes; ++k)
    if (!spec.shapes.count(k))
      throw ValidationError("shapes missing an entry for class " +
                            std::to_string(k));
}

std::string class_name(const DatasetSpec& spec, int class_id) {
  if (!spec.shapes.count(class_id))
    throw ValidationError("shapes missing an entry for class " +
                          std::to_string(class_id));
  std::string base = shape_name(spec.shapes.at(class_id));
  int repeat = 0;
  for (int k = 1; k < class_id; ++k)
    if (spec.shapes.at(k) == spec.shapes.at(class_id)) ++repeat;
  if (repeat == 0) return base;
  return base + "-" + std::to_string(repeat + 1);
}

std::vector<SegSample> generate_dataset(const DatasetSpec& spec) {
  validate(spec);
  const int total = spec.num_classes * spec.samples_per_class;
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) out.push_back(make_sample(spec, i));
  return out;
}

TaskSchedule build_schedule(int num_classes, const std::string& pattern) {
  const auto dash = pattern.find('-');
  if (dash == std::string::npos || dash == 0 || dash + 1 >= pattern.size())
    throw ScheduleError("pattern must have the form B-S: " + pattern);
  int base = 0, step = 0;
  try {
    std::size_t used = 0;
    base = std::stoi(pattern.substr(0, dash), &used);
    if (used != dash) throw std::invalid_argument("");
    const std::string rest = pattern.substr(dash + 1);
    step = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw ScheduleError("pattern must have the form B-S: " + pattern);
  }
  if (base < 1 || step < 1)
    throw ScheduleError("pattern parts must be positive: " + pattern);
  const int rest = num_classes - base;
  if (rest < step || rest % step != 0)
    throw ScheduleError("cannot split " + std::to_string(num_classes) +
                        " classes as " + pattern);

  TaskSchedule sched;
  TaskSpec first;
  first.task_index = 1;
  for (int k = 1; k <= base; ++k) first.class_ids.push_back(k);
  sched.tasks.push_back(first);
  int next = base + 1;
  while (next <= num_classes) {
    TaskSpec t;
    t.task_index = static_cast<int>(sched.tasks.size()) + 1;
    for (int s = 0; s < step; ++s) t.class_ids.push_back(next++);
    sched.tasks.push_back(t);
  }
  return sched;
}

SegSample relabel_overlapped(const SegSample& sample, const TaskSpec& task) {
  SegSample out = sample;
  const std::set<int> keep(task.class_ids.begin(), task.class_ids.end());
  for (Eigen::Index y = 0; y < out.label.rows(); ++y)
    for (Eigen::Index x = 0; x < out.label.cols(); ++x)
      if (out.label(y, x) != 0 && !keep.count(out.label(y, x)))
        out.label(y, x) = 0;
  return out;
}

void write_sample(const std::filesystem::path& path, const SegSample& sample) {
  io::Writer w(path);
  w.magic("DCSS");
  const auto H = static_cast<std::uint32_t>(sample.label.rows());
  const auto W = static_cast<std::uint32_t>(sample.label.cols());
  const auto C = static_cast<std::uint32_t>(sample.image.size());
  w.u32(H);
  w.u32(W);
  w.u32(C);
  for (std::uint32_t y = 0; y < H; ++y)
    for (std::uint32_t x = 0; x < W; ++x)
      for (std::uint32_t c = 0; c < C; ++c)
        w.f32(static_cast<float>(sample.image[c](y, x)));
  for (std::uint32_t y = 0; y < H; ++y)
    for (std::uint32_t x = 0; x < W; ++x)
      w.u16(static_cast<std::uint16_t>(sample.label(y, x)));
}

SegSample read_sample(const std::filesystem::path& path,
                      const std::string& sample_id) {
  io::Reader r(path);
  r.expect_magic("DCSS");
  const std::uint32_t H = r.u32();
  const std::uint32_t W = r.u32();
  const std::uint32_t C = r.u32();
  SegSample s;
  s.sample_id = sample_id;
  s.image.assign(C, Mat(H, W));
  for (std::uint32_t y = 0; y < H; ++y)
    for (std::uint32_t x = 0; x < W; ++x)
      for (std::uint32_t c = 0; c < C; ++c)
        s.image[c](y, x) = static_cast<double>(r.f32());
  s.label.resize(H, W);
  for (std::uint32_t y = 0; y < H; ++y)
    for (std::uint32_t x = 0; x < W; ++x)
      s.label(y, x) = static_cast<int>(r.u16());
  return s;
}

void save_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                  const std::vector<SegSample>& samples,
                  const std::optional<TaskSchedule>& schedule) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["num_classes"] = spec.num_classes;
  manifest["height"] = spec.H;
  manifest["width"] = spec.W;
  manifest["channels"] = spec.C;
  manifest["samples_per_class"] = spec.samples_per_class;
  manifest["seed"] = spec.seed;
  json shapes = json::object();
  for (const auto& [k, kind] : spec.shapes)
    shapes[std::to_string(k)] = shape_name(kind);
  manifest["shapes"] = shapes;
  json sample_list = json::array();
  for (const SegSample& s : samples) {
    write_sample(dir / (s.sample_id + ".bin"), s);
    sample_list.push_back(s.sample_id);
  }
  manifest["samples"] = sample_list;
  if (schedule) {
    json tasks = json::array();
    for (const TaskSpec& t : schedule->tasks)
      tasks.push_back({{"task", t.task_index}, {"classes", t.class_ids}});
    manifest["schedule"] = tasks;
  }
  std::ofstream out(dir / "manifest.json");
  if (!out)
    throw StateError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw StateError("missing manifest.json in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest.json: " + std::string(e.what()));
  }

  LoadedDataset ds;
  try {
    ds.spec.num_classes = manifest.at("num_classes").get<int>();
    ds.spec.H = manifest.at("height").get<int>();
    ds.spec.W = manifest.at("width").get<int>();
    ds.spec.C = manifest.at("channels").get<int>();
    ds.spec.samples_per_class = manifest.at("samples_per_class").get<int>();
    ds.spec.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& [key, val] : manifest.at("shapes").items())
      ds.spec.shapes[std::stoi(key)] = shape_from_name(val.get<std::string>());
    for (const auto& id : manifest.at("samples")) {
      const std::string sid = id.get<std::string>();
      ds.samples.push_back(read_sample(dir / (sid + ".bin"), sid));
    }
    if (manifest.contains("schedule")) {
      TaskSchedule sched;
      for (const auto& t : manifest.at("schedule")) {
        TaskSpec ts;
        ts.task_index = t.at("task").get<int>();
        ts.class_ids = t.at("classes").get<std::vector<int>>();
        sched.tasks.push_back(ts);
      }
      ds.schedule = sched;
    }
  } catch (const json::exception& e) {
    throw ValidationError("manifest.json missing keys: " +
                          std::string(e.what()));
  }
  validate(ds.spec);
  return ds;
}

}  // namespace dcss::synth
