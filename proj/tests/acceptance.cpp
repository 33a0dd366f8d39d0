// Acceptance run: one PASS/FAIL line per criterion with its runtime.
//
//   lodestar_acceptance --workdir DIR [--only 1,2,...]
//
// Criteria 1, 2 and 8 run the corresponding unit suites; 3 to 7 run the CLI
// benchmarks on the configs in configs/; 9 re-runs every CLI command and
// compares the outputs byte for byte. Trained models are cached under
// DIR/models.

#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

// Runtime limits.
constexpr double kEquivarianceSeconds = 10.0;
constexpr double kGradientSeconds = 30.0;
constexpr double kShapeCpuSeconds = 600.0;
const std::vector<std::string> kShapes{"point", "sphere", "ellipse", "annulus", "crescent"};

const std::string kCli = LODESTAR_CLI_PATH;
const std::string kTests = LODESTAR_TESTS_PATH;
const fs::path kConfigs = LODESTAR_CONFIG_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double children_cpu_seconds() {
  rusage u{};
  getrusage(RUSAGE_CHILDREN, &u);
  return u.ru_utime.tv_sec + u.ru_stime.tv_sec + 1e-6 * (u.ru_utime.tv_usec + u.ru_stime.tv_usec);
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string config(const std::string& name) { return quote((kConfigs / name).string()); }

/// Runs a filtered subset of the unit tests.
Outcome unit_suite(const std::string& filter, const std::string& log) {
  const int code = shell(quote(kTests) + " --gtest_brief=1 --gtest_filter=" + quote(filter) + " > " + log + " 2>&1");
  std::smatch m;
  const std::string text = slurp(log);
  const int ran = std::regex_search(text, m, std::regex(R"(\[==========\] (\d+) tests? from)")) ? std::stoi(m[1]) : 0;
  if (ran == 0) return {false, "no tests matched " + filter};
  return {code == 0, std::to_string(ran) + (code == 0 ? " tests passed" : " tests run, failures in " + log)};
}

/// Runs `lodestar benchmark name`; the check lines go to logs/name.out and
/// progress with timings to logs/name.err.
int benchmark(const std::string& name, const std::string& out_dir) {
  return shell(quote(kCli) + " benchmark " + name + " --config " + config(name + ".json") + " --out " + out_dir +
               " > logs/" + name + ".out 2> logs/" + name + ".err");
}

std::map<std::string, double> timings(const fs::path& err_log) {
  std::map<std::string, double> t;
  std::ifstream is(err_log);
  std::string line;
  const std::regex re(R"(^time (\S+) (\S+) s$)");
  std::smatch m;
  while (std::getline(is, line))
    if (std::regex_match(line, m, re)) t[m[1]] = std::stod(m[2]);
  return t;
}

std::string failed_checks(const fs::path& out_log) {
  std::ifstream is(out_log);
  std::string line, out;
  int n = 0;
  while (std::getline(is, line))
    if (line.rfind("FAIL ", 0) == 0) {
      if (n++ < 3) out += (out.empty() ? "" : "; ") + line.substr(5);
    }
  if (n > 3) out += "; +" + std::to_string(n - 3) + " more";
  return out;
}

Outcome benchmark_criterion(const std::string& name) {
  const int code = benchmark(name, "reports/" + name);
  if (code == 0) return {true, "all checks passed"};
  if (code == 1) return {false, failed_checks("logs/" + name + ".out")};
  return {false, "benchmark exited with " + std::to_string(code) + ", see logs/" + name + ".err"};
}

Outcome shape_rmse() {
  auto o = benchmark_criterion("rmse");
  const auto t = timings("logs/rmse.err");
  std::string worst;
  double worst_s = 0.0;
  for (const auto& s : kShapes) {
    const auto it = t.find(s + "/all_attempts");
    if (it == t.end()) {
      o.pass = false;
      o.detail += "; no timing for " + s;
      continue;
    }
    if (it->second > worst_s) worst_s = it->second, worst = s;
    if (it->second > kShapeCpuSeconds) {
      o.pass = false;
      o.detail += "; " + s + " took " + std::to_string(it->second) + " CPU s";
    }
  }
  if (!worst.empty()) o.detail += "; slowest shape " + worst + " " + std::to_string(static_cast<int>(worst_s)) + " CPU s";
  return o;
}

/// Lists regular files under dir relative to it, sorted.
std::vector<std::string> files_under(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir).string());
  std::sort(out.begin(), out.end());
  return out;
}

/// Empty when both trees hold the same files with the same bytes.
std::string compare_trees(const fs::path& a, const fs::path& b) {
  const auto fa = files_under(a), fb = files_under(b);
  if (fa.empty()) return a.string() + " is empty";
  if (fa != fb) return "file lists differ between " + a.string() + " and " + b.string();
  for (const auto& f : fa)
    if (slurp(a / f) != slurp(b / f)) return (a / f).string() + " differs";
  return {};
}

Outcome determinism(const std::set<int>& ran) {
  fs::remove_all("rerun");
  fs::create_directories("rerun");
  std::vector<std::string> problems;
  auto run_twice = [&](const std::string& tag, const std::string& args) {
    for (const char* k : {"a", "b"}) {
      const std::string out = "rerun/" + tag + "_" + k;
      const int code = shell(quote(kCli) + " " + args + " --out " + out + " > rerun/" + tag + "_" + k + ".log 2>&1");
      if (code != 0) problems.push_back(tag + " exited with " + std::to_string(code));
    }
  };
  auto compare = [&](const std::string& a, const std::string& b) {
    const auto d = fs::is_directory(a) ? compare_trees(a, b) : (slurp(a) == slurp(b) ? "" : a + " differs");
    if (!d.empty()) problems.push_back(d);
  };

  for (const char* kind : {"shapes", "holo", "brownian"}) {
    run_twice(std::string("simulate_") + kind,
              std::string("simulate ") + kind + " --config " + config(std::string("simulate_") + kind + ".json"));
    compare(std::string("rerun/simulate_") + kind + "_a", std::string("rerun/simulate_") + kind + "_b");
  }
  const std::string crop = "rerun/simulate_shapes_a/frame_00000.ltsr";
  for (const char* k : {"a", "b"}) {
    const std::string out = std::string("rerun/train_") + k + ".ckpt";
    if (shell(quote(kCli) + " train --quiet --crop " + crop + " --config " + config("train_sphere.json") + " --out " +
              out + " > /dev/null 2>&1") != 0) {
      problems.push_back("train failed");
    }
  }
  compare("rerun/train_a.ckpt", "rerun/train_b.ckpt");
  compare("rerun/train_a.loss.csv", "rerun/train_b.loss.csv");
  run_twice("track", "track --ckpt rerun/train_a.ckpt --frames rerun/simulate_shapes_a");
  compare("rerun/track_a", "rerun/track_b");
  for (const char* m : {"centroid", "radial"}) {
    for (const char* k : {"a", "b"}) {
      if (shell(quote(kCli) + " baseline --method " + m + " --frames rerun/simulate_shapes_a --out rerun/baseline_" + m +
                "_" + k + ".csv > /dev/null 2>&1") != 0) {
        problems.push_back(std::string("baseline ") + m + " failed");
      }
    }
    compare(std::string("rerun/baseline_") + m + "_a.csv", std::string("rerun/baseline_") + m + "_b.csv");
  }
  run_twice("import", "import --frames rerun/simulate_shapes_a --truth rerun/simulate_shapes_a/ground_truth.csv "
                      "--ckpt rerun/train_a.ckpt");
  compare("rerun/import_a", "rerun/import_b");

  // Benchmarks: a second run with the same config against the first run's
  // report (models come from the cache, so this re-checks the evaluation).
  const std::map<int, std::string> bench{{3, "rmse"}, {4, "discriminate"}, {5, "detect"}, {6, "axial"}, {7, "polarizability"}};
  int benches = 0;
  for (const auto& [criterion, name] : bench) {
    if (!ran.count(criterion)) continue;
    ++benches;
    const int code = benchmark(name, "rerun/" + name);
    if (code != 0 && code != 1) problems.push_back(name + " rerun exited with " + std::to_string(code));
    compare("reports/" + name, "rerun/" + name);
  }

  Outcome o;
  o.pass = problems.empty();
  o.detail = o.pass ? "simulate, train, track, baseline, import and " + std::to_string(benches) +
                          " benchmark outputs identical"
                    : problems.front() + (problems.size() > 1 ? " (+" + std::to_string(problems.size() - 1) + " more)" : "");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path workdir = fs::current_path() / "acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: lodestar_acceptance [--workdir DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(workdir);
  fs::current_path(workdir);
  fs::create_directories("logs");

  struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> run;
    double limit_seconds = 0.0;  // 0: no runtime limit
  };
  std::set<int> ran;
  const std::vector<Criterion> criteria{
      {1, "equivariance suite",
       [] {
         return unit_suite("Forward.StrideTwoTranslationEquivariance:Transform.*:Invert.*:Propagation.*:Weights.*",
                           "logs/equivariance.txt");
       },
       kEquivarianceSeconds},
      {2, "gradient suite",
       [] { return unit_suite("Backward.*:Head.GradientMatchesFiniteDifferences", "logs/gradient.txt"); },
       kGradientSeconds},
      {3, "shape RMSE", shape_rmse},
      {4, "self-consistency discrimination", [] { return benchmark_criterion("discriminate"); }},
      {5, "multi-particle detection", [] { return benchmark_criterion("detect"); }},
      {6, "axial localization and diffusion", [] { return benchmark_criterion("axial"); }},
      {7, "polarizability", [] { return benchmark_criterion("polarizability"); }},
      {8, "baselines", [] { return unit_suite("Centroid.*:Radial.*:Covariance.*", "logs/baselines.txt"); }},
      {9, "byte-identical re-runs", [&ran] { return determinism(ran); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const double cpu0 = children_cpu_seconds();
    const auto t0 = std::chrono::steady_clock::now();
    auto o = c.run();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double cpu = children_cpu_seconds() - cpu0;
    if (c.limit_seconds > 0.0 && cpu >= c.limit_seconds) {
      o.pass = false;
      o.detail += "; runtime " + std::to_string(cpu) + " s exceeds " + std::to_string(c.limit_seconds) + " s";
    }
    ran.insert(c.id);
    if (!o.pass) ++failures;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s criterion %d (%s) wall %.1f s cpu %.1f s: ", o.pass ? "PASS" : "FAIL", c.id,
                  c.name.c_str(), wall, cpu);
    std::cout << buf << o.detail << std::endl;
  }
  std::cout << (failures ? "FAILED " : "PASSED ") << failures << " failing criteria" << std::endl;
  return failures ? 1 : 0;
}
