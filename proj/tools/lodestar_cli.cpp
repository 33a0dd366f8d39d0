#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "lodestar/lodestar.hpp"

namespace fs = std::filesystem;
using namespace lodestar;
using bench::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw Error("config " + path + ": " + e.what());
  }
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

// --------------------------------------------------------------------------

struct SimulateArgs {
  std::string kind, config, out;
};

int run_simulate(const SimulateArgs& a) {
  const auto set = bench::simulate_set(a.kind, read_json(a.config));
  io::save_frames(set.frames, a.out);
  report::write_text(fs::path(a.out) / "ground_truth.csv", io::truth_csv(set.truth));
  std::cout << "wrote " << set.frames.size() << " frames to " << a.out << '\n';
  return 0;
}

// --------------------------------------------------------------------------

struct TrainArgs {
  std::string crop, config, out, channels, loss;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  const json cfg_json = a.config.empty() ? json::object() : read_json(a.config);
  bench::ConfigReader r(cfg_json, "config");
  auto cfg = bench::parse_train_config(r.child("train"));
  std::optional<synth::OpticsConfig> optics;
  if (r.has("optics")) optics = bench::parse_optics(r.child("optics"));
  r.finish();
  if (!a.channels.empty()) cfg.channels = nn::ChannelSet::parse(a.channels);

  const auto frames = io::load_frames(a.crop);
  if (frames.size() != 1) throw Error("train: --crop must hold exactly one image");
  const Image& crop = frames.front();
  if (crop.channels() == 2 && !optics) optics = synth::OpticsConfig{};

  int count = 0;
  double acc = 0.0;
  auto progress = [&](const distill::LossRecord& rec) {
    acc += rec.disagreement;
    if (++count == 500) {
      if (!a.quiet) log_line("step " + std::to_string(rec.step + 1) + " mean disagreement " +
                             report::format_number(acc / count));
      acc = 0.0;
      count = 0;
    }
  };
  const auto res = distill::train(crop, cfg, optics, progress, a.out + ".failed");
  nn::save_checkpoint(res.params, a.out);
  std::string loss = a.loss;
  if (loss.empty()) loss = fs::path(a.out).replace_extension(".loss.csv").string();
  report::write_text(loss, io::loss_csv(res.curve));
  std::cout << "wrote " << a.out << " and " << loss << '\n';
  return 0;
}

// --------------------------------------------------------------------------

struct DetectArgs {
  double alpha = 0.1;
  double quantile = 0.99;
  std::optional<double> threshold;
  double min_dist = 5.0;
  double refine_radius = 3.0;

  void add(CLI::App* app) {
    app->add_option("--alpha", alpha, "Weight of the prediction weight in the detection score")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--quantile", quantile, "Per-frame score quantile used as threshold")->check(CLI::Range(0.0, 1.0));
    app->add_option("--threshold", threshold, "Absolute score threshold (overrides --quantile)");
    app->add_option("--min-dist", min_dist, "Minimum distance between detections (px)")->check(CLI::PositiveNumber);
    app->add_option("--refine-radius", refine_radius, "Refinement radius in output-map pixels")
        ->check(CLI::NonNegativeNumber);
  }

  track::DetectConfig config() const {
    track::DetectConfig c;
    c.alpha = alpha;
    c.quantile = quantile;
    c.threshold = threshold;
    c.min_distance = min_dist;
    c.refine_radius = refine_radius;
    return c;
  }
};

struct TrackArgs {
  std::string ckpt, frames, out;
  DetectArgs detect;
  double max_link_dist = 5.0;
  std::size_t min_track_length = 1;
  bool correct_axial = false;
  double n_oil = synth::OpticsConfig{}.n_oil;
  double n_medium = synth::OpticsConfig{}.n_medium;
  std::optional<double> sigma_ref;
  double ref_radius = 0.228;
  double ref_n_particle = 1.58;
};

int run_track(const TrackArgs& a) {
  const auto params = nn::load_checkpoint(a.ckpt);
  const auto frames = io::load_frames(a.frames);
  const auto cfg = a.detect.config();
  synth::OpticsConfig optics;
  optics.n_oil = a.n_oil;
  optics.n_medium = a.n_medium;
  track::PolarizabilityReference ref;
  ref.radius = a.ref_radius;
  ref.n_particle = a.ref_n_particle;
  ref.n_medium = a.n_medium;
  if (a.sigma_ref) ref.sigma_ref = *a.sigma_ref;

  std::vector<std::vector<track::Detection>> per_frame;
  std::vector<track::Detection> all;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    auto dets = track::detect_particles(params, frames[f], cfg, static_cast<int>(f));
    for (auto& d : dets) {
      if (d.z && a.correct_axial) d.z = track::correct_axial(*d.z, optics);
      if (d.log_scale && a.sigma_ref) d.polarizability = track::calibrate_polarizability(*d.log_scale, ref);
      all.push_back(d);
    }
    per_frame.push_back(std::move(dets));
  }
  const auto tracks = track::filter_tracks(track::link_tracks(per_frame, a.max_link_dist), a.min_track_length);
  fs::create_directories(a.out);
  report::write_text(fs::path(a.out) / "detections.csv", io::detections_csv(all));
  report::write_text(fs::path(a.out) / "tracks.csv", io::tracks_csv(tracks));
  std::cout << all.size() << " detections, " << tracks.size() << " tracks in " << frames.size() << " frames\n";
  return 0;
}

// --------------------------------------------------------------------------

struct BaselineArgs {
  std::string method, frames, out;
};

int run_baseline(const BaselineArgs& a) {
  const auto frames = io::load_frames(a.frames);
  std::ostringstream os;
  os << "frame,x_px,y_px\n";
  int failed = 0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto win = baseline::full_window(frames[f]);
    try {
      const auto p =
          a.method == "centroid" ? baseline::centroid_localize(win) : baseline::radial_center_localize(win);
      os << f << ',' << report::format_number(p.x) << ',' << report::format_number(p.y) << '\n';
    } catch (const Error&) {
      os << f << ",,\n";
      ++failed;
    }
  }
  report::write_text(a.out, os.str());
  std::cout << "localized " << frames.size() - failed << " of " << frames.size() << " frames\n";
  return 0;
}

// --------------------------------------------------------------------------

struct BenchmarkArgs {
  std::string name, config, out;
};

int run_benchmark(const BenchmarkArgs& a) {
  auto res = bench::run_experiment(a.name, read_json(a.config), log_line);
  report::emit_report(res.report, a.out);
  for (const auto& c : res.checks) std::cout << bench::describe(c) << '\n';
  for (const auto& [phase, seconds] : res.timings) {
    log_line("time " + phase + " " + report::format_number(seconds) + " s");
  }
  std::cout << (res.passed() ? "PASSED" : "FAILED") << ' ' << a.name << '\n';
  return res.passed() ? 0 : 1;
}

// --------------------------------------------------------------------------

struct ImportArgs {
  std::string frames, truth, ckpt, out;
  DetectArgs detect;
  double match_radius = 3.0;
};

int run_import(const ImportArgs& a) {
  const auto params = nn::load_checkpoint(a.ckpt);
  const auto frames = io::load_frames(a.frames);
  const auto truth = io::read_truth_csv(a.truth);
  auto res = bench::evaluate_import(frames, truth, params, a.detect.config(), a.match_radius);
  if (!a.out.empty()) report::emit_report(res.report, a.out);
  const auto& t = res.report.tables.front();
  for (const auto* m : {"tpr", "fdr", "matched_xy_rmse_px", "matched_z_rmse_um"}) {
    for (const auto& row : t.rows())
      if (row.condition == "all" && row.metric == m) std::cout << m << ' ' << report::format_number(row.value) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LodeSTAR: self-supervised particle localization"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Simulate a dataset with ground truth");
  s->add_option("kind", sim.kind, "shapes, holo or brownian")
      ->required()
      ->check(CLI::IsMember({"shapes", "holo", "brownian"}));
  s->add_option("--config", sim.config, "JSON configuration")->required()->check(CLI::ExistingFile);
  s->add_option("--out", sim.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on a single crop");
  t->add_option("--crop", tr.crop, "LTSR crop")->required()->check(CLI::ExistingPath);
  t->add_option("--config", tr.config, "JSON with 'train' and optional 'optics' objects")->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--channels", tr.channels, "Predicted quantities")
      ->check(CLI::IsMember({"xy", "xyz", "xys", "xyzs"}));
  t->add_option("--loss", tr.loss, "Loss curve CSV (default: <out>.loss.csv)");
  t->add_flag("--quiet", tr.quiet, "No progress output");

  TrackArgs tk;
  auto* k = app.add_subcommand("track", "Detect and link particles");
  k->add_option("--ckpt", tk.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  k->add_option("--frames", tk.frames, "Frame directory or LTSR stack")->required()->check(CLI::ExistingPath);
  tk.detect.add(k);
  k->add_option("--max-link-dist", tk.max_link_dist, "Linking distance (px)")->check(CLI::PositiveNumber);
  k->add_option("--min-track-length", tk.min_track_length, "Drop shorter tracks");
  k->add_flag("--correct-axial", tk.correct_axial, "Scale z by n_oil / n_medium");
  k->add_option("--n-oil", tk.n_oil, "Immersion oil refractive index");
  k->add_option("--n-medium", tk.n_medium, "Medium refractive index");
  k->add_option("--sigma-ref", tk.sigma_ref, "Log-scale of the reference particle; enables polarizability");
  k->add_option("--ref-radius", tk.ref_radius, "Reference particle radius (um)");
  k->add_option("--ref-n-particle", tk.ref_n_particle, "Reference particle refractive index");
  k->add_option("--out", tk.out, "Output directory for detections.csv and tracks.csv")->required();

  BaselineArgs bl;
  auto* b = app.add_subcommand("baseline", "Classical single-particle localization");
  b->add_option("--method", bl.method, "centroid or radial")
      ->required()
      ->check(CLI::IsMember({"centroid", "radial"}));
  b->add_option("--frames", bl.frames, "Frame directory or LTSR stack")->required()->check(CLI::ExistingPath);
  b->add_option("--out", bl.out, "Output CSV")->required();

  BenchmarkArgs bm;
  auto* m = app.add_subcommand("benchmark", "Run a benchmark experiment");
  m->add_option("experiment", bm.name, "rmse, discriminate, detect, axial or polarizability")
      ->required()
      ->check(CLI::IsMember(bench::experiment_names()));
  m->add_option("--config", bm.config, "JSON configuration")->required()->check(CLI::ExistingFile);
  m->add_option("--out", bm.out, "Report directory")->required();

  ImportArgs im;
  auto* i = app.add_subcommand("import", "Score a checkpoint on external frames with ground truth");
  i->add_option("--frames", im.frames, "Frame directory or LTSR stack")->required()->check(CLI::ExistingPath);
  i->add_option("--truth", im.truth, "Ground-truth CSV")->required()->check(CLI::ExistingFile);
  i->add_option("--ckpt", im.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  im.detect.add(i);
  i->add_option("--match-radius", im.match_radius, "Matching radius (px)")->check(CLI::PositiveNumber);
  i->add_option("--out", im.out, "Report directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*s) return run_simulate(sim);
    if (*t) return run_train(tr);
    if (*k) return run_track(tk);
    if (*b) return run_baseline(bl);
    if (*m) return run_benchmark(bm);
    if (*i) return run_import(im);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
