#include "gaitstr/archive.hpp"
#include "gaitstr/errors.hpp"
#include "gaitstr/evaluation.hpp"
#include "gaitstr/training.hpp"
#include "plot.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#ifndef GAITSTR_VERSION
#define GAITSTR_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace gaitstr;
using nlohmann::json;

namespace {

// Options shared by the artifact-producing commands.
struct Common {
  std::string config;
  std::vector<std::string> sets;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// `key = value` lines with line-numbered errors; `#` starts a comment.
template <class Setter>
void apply_text(const std::string& text, const std::string& source, Setter&& set) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    line = line.substr(first, line.find_last_not_of(" \t\r") - first + 1);
    const std::string where = source + ":" + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

template <class Setter>
void apply_overrides(const std::vector<std::string>& sets, Setter&& set) {
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].find('=') == std::string::npos) throw ConfigError("--set expects key=value, got '" + sets[i] + "'");
    apply_text(sets[i], "--set #" + std::to_string(i + 1), set);
  }
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

class Manifest {
 public:
  Manifest(std::string command, fs::path dir) : command_(std::move(command)), dir_(std::move(dir)) {}
  json config = json::object();
  json inputs = json::object();
  json outputs = json::array();
  std::uint64_t seed = 0;

  void output(const fs::path& p) { outputs.push_back(p.lexically_relative(dir_).generic_string()); }

  fs::path write() const {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j{{"command", command_},
           {"config", config},
           {"seed", seed},
           {"inputs", inputs},
           {"outputs", outputs},
           {"tool_version", GAITSTR_VERSION},
           {"started_at", started_},
           {"wall_clock_seconds", seconds}};
    const fs::path p = dir_ / "run_manifest.json";
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + p.string() + "'");
    out << j.dump(2) << '\n';
    return p;
  }

 private:
  std::string command_;
  fs::path dir_;
  std::string started_ = utc_now();
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

std::string abs_string(const fs::path& p) { return fs::absolute(p).lexically_normal().generic_string(); }

// --- generate -------------------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a) {
  DatasetSpec spec;
  auto set = [&](const std::string& k, const std::string& v) { spec.set(k, v); };
  if (!a.common.config.empty()) apply_text(read_file(a.common.config), a.common.config, set);
  apply_overrides(a.common.sets, set);
  if (a.seed) spec.seed = *a.seed;
  try {
    spec.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  const fs::path dir = a.out;
  make_dir(dir);
  Manifest m("generate", dir);
  m.config = spec.to_json();
  m.seed = spec.seed;
  if (!a.common.config.empty()) m.inputs["config"] = abs_string(a.common.config);
  build_dataset(spec, dir);
  m.output(dir / "dataset.json");
  m.output(dir / "manifest.jsonl");
  std::cout << m.write().string() << '\n';
  return 0;
}

// --- train ------------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data, out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig config;
  auto set = [&](const std::string& k, const std::string& v) { config.set(k, v); };
  if (!a.common.config.empty()) apply_text(read_file(a.common.config), a.common.config, set);
  apply_overrides(a.common.sets, set);
  if (a.seed) config.seed = *a.seed;
  if (a.iterations) config.iterations = *a.iterations;
  config.validate();

  const Dataset dataset = load_dataset(a.data);
  const fs::path dir = a.out;
  make_dir(dir);
  Manifest m("train", dir);
  Trainer trainer(config, dataset);
  if (!a.resume.empty()) {
    trainer.load_checkpoint(a.resume);
    m.inputs["resume"] = abs_string(a.resume);
  }
  m.config = trainer.config().to_json();
  m.seed = trainer.config().seed;
  m.inputs["data"] = abs_string(a.data);
  if (!a.common.config.empty()) m.inputs["config"] = abs_string(a.common.config);
  {
    std::ofstream out(dir / "config.json", std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / "config.json").string() + "'");
    out << trainer.config().to_json().dump(2) << '\n';
  }
  trainer.run(dir, [&](const MetricsRow& row) {
    if (a.quiet) return;
    std::printf("iter %6d  L_triplet %.5f  L_cls %.5f  L %.5f  train_rank1 %.3f\n", row.iteration, row.triplet,
                row.classification, row.total, row.train_rank1);
    std::fflush(stdout);
  });
  m.output(dir / "config.json");
  m.output(dir / "metrics.csv");
  m.output(dir / "final.ckpt");
  if (config.checkpoint_interval > 0)
    for (int it = config.checkpoint_interval; it <= config.iterations; it += config.checkpoint_interval)
      if (fs::exists(dir / ("iter_" + std::to_string(it) + ".ckpt"))) m.output(dir / ("iter_" + std::to_string(it) + ".ckpt"));
  std::cout << m.write().string() << '\n';
  return 0;
}

// --- eval --------------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, out, protocol = "simple", selection = "center";
  int frames = 30;
  double jitter_rate = 0.0, jitter_magnitude = 0.1;
  std::uint64_t jitter_seed = 0;
};

EvalOptions eval_options(const EvalArgs& a) {
  EvalOptions o;
  o.frames = a.frames;
  o.selection = parse_frame_selection(a.selection);
  o.jitter_rate = a.jitter_rate;
  o.jitter_magnitude = a.jitter_magnitude;
  o.jitter_seed = a.jitter_seed;
  if (o.frames < 1) throw ConfigError("--frames must be >= 1");
  if (!(o.jitter_rate >= 0.0 && o.jitter_rate <= 1.0)) throw ConfigError("--jitter-rate must lie in [0, 1]");
  if (!(o.jitter_magnitude >= 0.0)) throw ConfigError("--jitter-magnitude must be >= 0");
  return o;
}

json options_json(const EvalArgs& a) {
  return {{"frames", a.frames},
          {"frame_selection", a.selection},
          {"jitter_rate", a.jitter_rate},
          {"jitter_magnitude", a.jitter_magnitude},
          {"jitter_seed", a.jitter_seed}};
}

int cmd_eval(const EvalArgs& a) {
  Protocol protocol;
  try {
    protocol = parse_protocol(a.protocol);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const EvalOptions options = eval_options(a);
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const auto model = load_model(ck);
  const Dataset dataset = load_dataset(a.data);
  const fs::path dir = a.out;
  make_dir(dir);
  Manifest m("eval", dir);
  m.config = options_json(a);
  m.config["protocol"] = a.protocol;
  m.config["checkpoint_config"] = ck.config.to_json();
  m.seed = a.jitter_seed;
  m.inputs = {{"checkpoint", abs_string(a.checkpoint)}, {"data", abs_string(a.data)}};

  const RetrievalReport report = evaluate_protocol(*model, dataset, protocol, options);
  write_report_csv(dir / "metrics.csv", report);
  m.output(dir / "metrics.csv");
  if (report.view_matrix) {
    write_view_matrix_csv(dir / "view_matrix.csv", *report.view_matrix);
    m.output(dir / "view_matrix.csv");
  }
  std::printf("rank1 %.4f  rank5 %.4f  mAP %.4f  mINP %.4f  (%d probes, %d gallery)\n", report.rank.at(1),
              report.rank.at(5), report.map.map, report.map.minp, report.probes, report.gallery);
  std::cout << m.write().string() << '\n';
  return 0;
}

// --- refine ------------------------------------------------------------------------------

struct RefineArgs {
  EvalArgs eval;  // dataset mode reuses the evaluation options
  std::string joints, silhouettes, reference;
};

int cmd_refine(const RefineArgs& a) {
  const bool dataset_mode = !a.eval.data.empty();
  if (dataset_mode == !a.joints.empty())
    throw ConfigError("refine needs either --data or --joints with --silhouettes");
  if (!dataset_mode && a.silhouettes.empty()) throw ConfigError("--joints requires --silhouettes");
  const EvalOptions options = eval_options(a.eval);
  const Checkpoint ck = read_checkpoint(a.eval.checkpoint);
  const auto model = load_model(ck);
  if (model->config().variant != ModelVariant::gaitstr)
    throw InvalidInput("checkpoint variant '" + std::string(variant_name(model->config().variant)) +
                       "' has no refinement branch");
  const fs::path dir = a.eval.out;
  make_dir(dir);
  Manifest m("refine", dir);
  m.config["checkpoint_config"] = ck.config.to_json();
  m.inputs["checkpoint"] = abs_string(a.eval.checkpoint);

  if (dataset_mode) {
    m.config.update(options_json(a.eval));
    m.seed = a.eval.jitter_seed;
    m.inputs["data"] = abs_string(a.eval.data);
    const Dataset dataset = load_dataset(a.eval.data);
    const RefinementTable t = refinement_table(*model, dataset.test_samples(), options);
    write_refinement_csv(dir / "mpjpe.csv", t);
    m.output(dir / "mpjpe.csv");
    std::printf("mpjpe raw %.5f  average %.5f  gaussian %.5f  refined %.5f  (%d sequences)\n", t.raw, t.average,
                t.gaussian, t.refined, t.sequences);
  } else {
    m.inputs["joints"] = abs_string(a.joints);
    m.inputs["silhouettes"] = abs_string(a.silhouettes);
    const SkeletonArchive arch = read_skeleton_archive(a.joints);
    if (arch.kind != PointKind::joints) throw InvalidInput("'" + a.joints + "' holds bones, expected joints");
    const JointSequence joints = arch.joints();
    const SilhouetteSequence sil = read_silhouette_archive(a.silhouettes);
    if (sil.frames() != joints.frames()) throw InvalidInput("skeleton and silhouette frame counts differ");
    ad::NoGradGuard guard;
    const RefinedStreams r = model->refine(make_input(sil, joints));
    const JointSequence refined = JointSequence::from_tensor(joints.topology(), r.joints->value);
    const BoneSequence refined_bones = BoneSequence::from_tensor(joints.topology(), r.bones->value);
    write_skeleton_archive(dir / "refined_joints.gska", refined);
    write_skeleton_archive(dir / "refined_bones.gska", refined_bones);
    m.output(dir / "refined_joints.gska");
    m.output(dir / "refined_bones.gska");
    if (!a.reference.empty()) {
      m.inputs["reference"] = abs_string(a.reference);
      const JointSequence clean = read_skeleton_archive(a.reference).joints();
      RefinementTable t;
      t.raw = mpjpe(joints, clean);
      t.average = mpjpe(smooth_average(joints, 3), clean);
      t.gaussian = mpjpe(smooth_gaussian(joints, 3, 1.0), clean);
      t.refined = mpjpe(refined, clean);
      t.sequences = 1;
      write_refinement_csv(dir / "mpjpe.csv", t);
      m.output(dir / "mpjpe.csv");
    }
  }
  std::cout << m.write().string() << '\n';
  return 0;
}

// --- plot ----------------------------------------------------------------------------------

struct PlotArgs {
  std::string joints, refined, silhouettes, out;
  std::vector<int> frames;
  int neighbors = 1, scale = 4;
};

int cmd_plot(const PlotArgs& a) {
  const JointSequence original = read_skeleton_archive(a.joints).joints();
  std::optional<JointSequence> refined;
  std::optional<SilhouetteSequence> sil;
  if (!a.refined.empty()) refined = read_skeleton_archive(a.refined).joints();
  if (!a.silhouettes.empty()) sil = read_silhouette_archive(a.silhouettes);
  const plot::OverlayInputs in{&original, refined ? &*refined : nullptr, sil ? &*sil : nullptr};
  // Validate every frame before writing anything.
  for (int f : a.frames)
    if (f < 0 || f >= original.frames())
      throw InvalidInput("frame " + std::to_string(f) + " is out of range [0, " + std::to_string(original.frames()) + ")");
  const fs::path dir = a.out;
  make_dir(dir);
  Manifest m("plot", dir);
  m.config = {{"frames", a.frames}, {"neighbors", a.neighbors}, {"scale", a.scale}};
  m.inputs["joints"] = abs_string(a.joints);
  if (refined) m.inputs["refined"] = abs_string(a.refined);
  if (sil) m.inputs["silhouettes"] = abs_string(a.silhouettes);
  for (int f : a.frames) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.ppm", f);
    plot::render_overlay(in, f, a.neighbors, a.scale).write_ppm(dir / name);
    m.output(dir / name);
  }
  std::cout << m.write().string() << '\n';
  return 0;
}

void add_common(CLI::App* cmd, Common& c, const std::string& what) {
  cmd->add_option("-c,--config", c.config, "Config file of `key = value` lines (" + what + " keys)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override one config key, e.g. --set lambda1=0.5 (repeatable)");
}

void add_eval_options(CLI::App* cmd, EvalArgs& e) {
  cmd->add_option("--frames", e.frames, "Frames per sequence at inference (n)")->capture_default_str();
  cmd->add_option("--selection", e.selection, "Frame selection: center | repeat")->capture_default_str();
  cmd->add_option("--jitter-rate", e.jitter_rate, "Fraction of frames to corrupt before inference")
      ->capture_default_str();
  cmd->add_option("--jitter-magnitude", e.jitter_magnitude, "Jitter offset bound")->capture_default_str();
  cmd->add_option("--jitter-seed", e.jitter_seed, "Seed for the jitter corruption")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Silhouette and skeleton gait recognition with skeleton refinement"};
  app.set_version_flag("--version", GAITSTR_VERSION);
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic gait dataset");
  add_common(g, gen.common, "dataset");
  g->add_option("-o,--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Dataset seed (overrides the config)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on a dataset directory");
  add_common(t, tr.common, "training");
  t->add_option("-d,--data", tr.data, "Dataset directory written by `generate`")->required();
  t->add_option("-o,--out", tr.out, "Run directory for metrics and checkpoints")->required();
  t->add_option("--resume", tr.resume, "Continue from a checkpoint written with the same config")
      ->check(CLI::ExistingFile);
  t->add_option("--seed", tr.seed, "Training seed (overrides the config)");
  t->add_option("--iterations", tr.iterations, "Iteration budget (overrides the config)");
  t->add_flag("-q,--quiet", tr.quiet, "Do not print log lines");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Retrieval evaluation of a checkpoint");
  e->add_option("-k,--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("-d,--data", ev.data, "Dataset directory")->required();
  e->add_option("-o,--out", ev.out, "Output directory")->required();
  e->add_option("-p,--protocol", ev.protocol, "simple | view_matrix")->capture_default_str();
  add_eval_options(e, ev);

  RefineArgs rf;
  auto* r = app.add_subcommand("refine", "Refine skeletons with a trained model");
  r->add_option("-k,--checkpoint", rf.eval.checkpoint, "Checkpoint file")->required();
  r->add_option("-o,--out", rf.eval.out, "Output directory")->required();
  r->add_option("--joints", rf.joints, "Joint archive (.gska) to refine");
  r->add_option("--silhouettes", rf.silhouettes, "Paired silhouette archive (.gsia)");
  r->add_option("--reference", rf.reference, "Clean joint archive for the MPJPE table");
  r->add_option("-d,--data", rf.eval.data, "Dataset directory: tabulate MPJPE over the test sequences");
  add_eval_options(r, rf.eval);

  PlotArgs pl;
  auto* p = app.add_subcommand("plot", "Render skeleton overlays to PPM images");
  p->add_option("--joints", pl.joints, "Original joint archive (.gska)")->required();
  p->add_option("--refined", pl.refined, "Refined joint archive (.gska)");
  p->add_option("--silhouettes", pl.silhouettes, "Silhouette archive (.gsia)");
  p->add_option("-f,--frames", pl.frames, "Frame indices, one image each")->required()->delimiter(',');
  p->add_option("--neighbors", pl.neighbors, "Neighbouring frames shown on each side")->capture_default_str();
  p->add_option("--scale", pl.scale, "Pixels per silhouette pixel")->capture_default_str();
  p->add_option("-o,--out", pl.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 1;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*r) return cmd_refine(rf);
    if (*p) return cmd_plot(pl);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 1;
}
