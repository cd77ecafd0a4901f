#include "dsamp/dsamp.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <malloc.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#ifndef DSAMP_VERSION
#define DSAMP_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace dsamp;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;

std::string utc_stamp(const char* fmt) {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, fmt);
  return os.str();
}

std::string iso_now() { return utc_stamp("%Y-%m-%dT%H:%M:%SZ"); }

fs::path run_root() {
  const char* e = std::getenv("DSAMP_RUN_ROOT");
  return e && *e ? fs::path(e) : fs::path("runs");
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    f << s;
    if (!f) throw std::runtime_error("cannot write " + p.string());
  }
  fs::rename(tmp, p);
}

void write_csv(const fs::path& p, const Matrix& x) {
  std::ostringstream os;
  os.precision(10);
  for (Index j = 0; j < x.cols(); ++j) os << (j ? "," : "") << 'x' << j;
  os << '\n';
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) os << (j ? "," : "") << x(i, j);
    os << '\n';
  }
  write_text(p, os.str());
}

/// Everything needed to build one training configuration.
struct JobSpec {
  std::string config_path;
  std::string energy;
  int steps = 0;
  std::string method;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::string schedule;
  std::vector<std::string> overrides;
  std::string tag;

  /// Arguments that make a child `train` process rebuild the same config.
  std::vector<std::string> argv() const {
    std::vector<std::string> a;
    if (!config_path.empty()) a.insert(a.end(), {"--config", config_path});
    if (!energy.empty()) a.insert(a.end(), {"--preset", energy});
    if (steps) a.insert(a.end(), {"--T", std::to_string(steps)});
    if (!method.empty()) a.insert(a.end(), {"--method", method});
    if (seed) a.insert(a.end(), {"--seed", std::to_string(*seed)});
    if (iterations) a.insert(a.end(), {"--iterations", std::to_string(*iterations)});
    if (!schedule.empty()) a.insert(a.end(), {"--schedule", schedule});
    if (!tag.empty()) a.insert(a.end(), {"--tag", tag});
    for (const auto& o : overrides) a.insert(a.end(), {"--set", o});
    return a;
  }
};

TrainConfig build_config(const JobSpec& j) {
  std::string text;
  if (!j.config_path.empty()) text = read_text(j.config_path) + "\n";
  if (!j.energy.empty()) text += "energy = " + j.energy + "\n";
  if (j.steps) text += "T = " + std::to_string(j.steps) + "\n";
  if (!j.method.empty()) text += "method = " + j.method + "\n";
  if (j.seed) text += "seed = " + std::to_string(*j.seed) + "\n";
  if (j.iterations) text += "iterations = " + std::to_string(*j.iterations) + "\n";
  if (!j.schedule.empty()) text += "schedule = " + j.schedule + "\n";
  for (const auto& o : j.overrides) {
    if (o.find('=') == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    text += o + "\n";
  }
  TrainConfig c = parse_config(text);
  c.validate();
  return c;
}

fs::path fresh_run_dir(const TrainConfig& c, const std::string& tag) {
  const std::string base = c.energy + "_" + run_label(c.method, tag) + "_T" + std::to_string(c.steps) + "_s" +
                           std::to_string(c.seed) + "_" + utc_stamp("%Y%m%dT%H%M%S");
  fs::path p = run_root() / base;
  for (int k = 1; fs::exists(p); ++k) p = run_root() / (base + "-" + std::to_string(k));
  return p;
}

void add_job_options(CLI::App& app, JobSpec& j) {
  app.add_option("--config", j.config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--preset,--energy", j.energy, "energy preset (gmm25, gmm40, funnel-hard, manywell, ...)");
  app.add_option("--T", j.steps, "number of generation steps")->check(CLI::PositiveNumber);
  app.add_option("--method", j.method,
                 "tb-fixed, tb-learnedvar, tb-tlm, tb-both, pis-fixed, pis-learnedvar, pis-tlm, pis-vargrad");
  app.add_option("--seed", j.seed, "training seed");
  app.add_option("--iterations", j.iterations, "override the iteration count");
  app.add_option("--schedule", j.schedule, "uniform or harmonic");
  app.add_option("--set", j.overrides, "config override key=value (repeatable)");
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const JobSpec& spec, const std::string& run_dir_opt, int n_dump) {
  const TrainConfig c = build_config(spec);
  const fs::path dir = run_dir_opt.empty() ? fresh_run_dir(c, spec.tag) : fs::path(run_dir_opt);
  fs::create_directories(dir);

  json manifest{{"version", DSAMP_VERSION}, {"config", to_json(c)}, {"seed", c.seed},
                {"tag", spec.tag},         {"run_dir", dir.string()}, {"start", iso_now()},
                {"status", "running"}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream metrics(dir / "metrics.jsonl");
  const auto t0 = std::chrono::steady_clock::now();
  RunState s = init_run(c);
  TrainHooks hooks;
  hooks.on_metrics = [&](const json& j) {
    metrics << j.dump() << '\n';
    metrics.flush();
    auto num = [&](const char* k) {
      std::ostringstream os;
      os << std::setprecision(4);
      if (j[k].is_number()) os << j[k].get<double>();
      else os << '-';
      return os.str();
    };
    std::cerr << "iter " << j["iter"] << "  elbo " << num("elbo") << "  eubo " << num("eubo") << "  logZ "
              << num("logz_hat") << "  w2 " << num("w2") << "  " << num("wall_ms") << " ms\n";
  };
  const TrainResult r = train(s, hooks);
  metrics.close();

  const std::string status(status_name(r.status));
  grad::write_checkpoint((dir / "checkpoint.bin").string(), make_checkpoint(s, {{"status", status}}));
  manifest["status"] = status;
  manifest["reason"] = r.reason;
  manifest["end"] = iso_now();
  manifest["wall_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest["iterations_done"] = r.iterations_done;
  manifest["final"] = r.status == RunStatus::diverged ? json() : to_json(r.final_metrics);
  manifest["counters"] = {{"on_policy", r.counters.on_policy_updates},
                          {"per", r.counters.per_updates},
                          {"backward", r.counters.backward_updates},
                          {"refreshes", r.counters.refreshes}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  if (n_dump > 0) {
    const TrajectoryBatch b =
        sample_forward(s.model, s.model.params, s.energy, s.process, n_dump, stream_id(0xd0, c.seed));
    std::ofstream f(dir / "trajectories.jsonl");
    dump_trajectories(f, b);
  }
  std::cerr << "status " << status << (r.reason.empty() ? "" : " (" + r.reason + ")") << '\n';
  std::cout << dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::string energy;
  int n = 2048;
  std::uint64_t seed = 0;
  std::string dump_samples;
  std::string dump_trajectories;
  bool no_w2 = false;
  bool no_eubo = false;
};

struct EvalOutput {
  json report;
  Matrix samples;
};

EvalOutput run_eval(const EvalArgs& a) {
  const grad::Checkpoint ck = grad::read_checkpoint(a.checkpoint);
  const LoadedModel lm = load_model(ck);
  const std::string ename = a.energy.empty() ? lm.cfg.energy : a.energy;
  const EnergySpec e = build_energy(ename, lm.cfg.construction_seed);
  if (e.dim != lm.model.cfg.dim)
    throw ConfigError("checkpoint has dimension " + std::to_string(lm.model.cfg.dim) + " but energy '" + ename +
                      "' has dimension " + std::to_string(e.dim));
  const Process p = make_process(lm.cfg);
  EvalOutput out;
  EvalOptions eo;
  eo.n = a.n;
  eo.seed = a.seed;
  eo.with_w2 = !a.no_w2;
  eo.with_eubo = !a.no_eubo;
  eo.samples_out = &out.samples;
  const MetricsReport r = evaluate(lm.model, e, p, eo);
  out.report = to_json(r);
  out.report["energy"] = ename;
  out.report["method"] = lm.cfg.method;
  out.report["T"] = lm.cfg.steps;
  if (!a.dump_samples.empty()) write_csv(a.dump_samples, out.samples);
  if (!a.dump_trajectories.empty()) {
    std::ofstream f(a.dump_trajectories);
    dump_trajectories(f, sample_forward(lm.model, lm.model.params, e, p, a.n, a.seed));
  }
  return out;
}

// ---------------------------------------------------------------------------
// sweep: independent child processes, at most `jobs` at a time.

struct SweepOptions {
  int jobs = 1;
  bool reuse = true;
  fs::path log_dir;
};

/// Finished runs under the run root keyed by config and tag.
std::map<std::string, json> finished_runs() {
  std::map<std::string, json> out;
  if (!fs::exists(run_root())) return out;
  for (const auto& entry : fs::directory_iterator(run_root())) {
    const fs::path m = entry.path() / "manifest.json";
    if (!fs::exists(m) || !fs::exists(entry.path() / "checkpoint.bin")) continue;
    try {
      json j = json::parse(read_text(m));
      const std::string st = j.value("status", "");
      if (st != "ok" && st != "diverged" && st != "collapsed") continue;
      std::string key = j["config"].dump() + "|" + j.value("tag", "");
      out[std::move(key)] = std::move(j);
    } catch (const std::exception&) {
    }
  }
  return out;
}

RunSummary failed_summary(const TrainConfig& c, const std::string& tag, const fs::path& dir) {
  RunSummary s;
  s.energy = c.energy;
  s.label = run_label(c.method, tag);
  s.steps = c.steps;
  s.seed = c.seed;
  s.iterations = c.iterations;
  s.batch = c.batch;
  s.status = "failed";
  s.dir = dir.string();
  return s;
}

/// Runs every spec that has no finished run yet. With a `trainable` mask,
/// specs outside it are reported only if a finished run already exists.
std::vector<RunSummary> run_jobs(const std::vector<JobSpec>& specs, const SweepOptions& opt,
                                 const std::vector<bool>& trainable = {}) {
  std::vector<TrainConfig> cfgs;
  for (const auto& s : specs) cfgs.push_back(build_config(s));  // fail fast on bad configs
  std::vector<RunSummary> results(specs.size());
  std::vector<bool> present(specs.size(), false);
  std::vector<fs::path> dirs(specs.size());
  std::vector<std::size_t> todo;
  const auto done = opt.reuse ? finished_runs() : std::map<std::string, json>{};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto it = done.find(to_json(cfgs[i]).dump() + "|" + specs[i].tag);
    if (it != done.end()) {
      results[i] = summary_from_manifest(it->second);
      present[i] = true;
      std::cerr << "reusing " << results[i].dir << '\n';
    } else if (trainable.empty() || trainable[i]) {
      todo.push_back(i);
    }
  }
  fs::create_directories(run_root());
  fs::create_directories(opt.log_dir);
  const std::string self = fs::read_symlink("/proc/self/exe").string();
  std::map<pid_t, std::size_t> running;
  std::size_t next = 0, finished = 0;

  auto reap = [&] {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid < 0) throw std::runtime_error("waitpid failed");
    const std::size_t i = running.at(pid);
    running.erase(pid);
    ++finished;
    present[i] = true;
    const fs::path m = dirs[i] / "manifest.json";
    bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0 && fs::exists(m);
    if (ok) {
      try {
        results[i] = summary_from_manifest(json::parse(read_text(m)));
        ok = results[i].status != "running";
      } catch (const std::exception&) {
        ok = false;
      }
    }
    if (!ok) {
      results[i] = failed_summary(cfgs[i], specs[i].tag, dirs[i]);
      std::cerr << "child failed: " << dirs[i].filename().string()
                << (WIFSIGNALED(status) ? " (signal " + std::to_string(WTERMSIG(status)) + ")"
                                        : " (exit " + std::to_string(WEXITSTATUS(status)) + ")")
                << '\n';
    }
    std::cerr << "[" << finished << "/" << todo.size() << "] " << dirs[i].filename().string() << ": "
              << results[i].status << "  elbo " << results[i].elbo << '\n';
  };

  while (next < todo.size() || !running.empty()) {
    if (next < todo.size() && static_cast<int>(running.size()) < opt.jobs) {
      const std::size_t i = todo[next++];
      dirs[i] = fresh_run_dir(cfgs[i], specs[i].tag);
      fs::create_directories(dirs[i]);
      std::vector<std::string> args{self, "train", "--run-dir", dirs[i].string()};
      for (auto& a : specs[i].argv()) args.push_back(std::move(a));
      const std::string log = (opt.log_dir / (dirs[i].filename().string() + ".log")).string();
      const pid_t pid = ::fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        const int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd >= 0) {
          ::dup2(fd, 1);
          ::dup2(fd, 2);
        }
        std::vector<char*> cargs;
        for (auto& a : args) cargs.push_back(a.data());
        cargs.push_back(nullptr);
        ::execv(self.c_str(), cargs.data());
        ::_exit(127);
      }
      running[pid] = i;
      continue;
    }
    reap();
  }
  std::vector<RunSummary> out;
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (present[i]) out.push_back(std::move(results[i]));
  return out;
}

void write_report(const fs::path& csv_path, const std::vector<RunSummary>& runs, json extra = json::object()) {
  const auto rows = aggregate(runs);
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  write_text(csv_path, to_csv(rows));
  extra["rows"] = json::array();
  for (const auto& r : rows) extra["rows"].push_back(to_json(r));
  extra["runs"] = json::array();
  for (const auto& r : runs) extra["runs"].push_back(to_json(r));
  fs::path jp = csv_path;
  jp.replace_extension(".json");
  write_text(jp, extra.dump(2) + "\n");
  std::cout << to_csv(rows);
}

// ---------------------------------------------------------------------------
// reproduce

struct ReproduceArgs {
  std::string name;
  std::vector<std::uint64_t> seeds;  // empty: all of 0, 1, 2
  std::vector<int> steps;
  std::optional<int> iterations;
  std::vector<std::string> methods;
  std::vector<std::string> overrides;
  std::string results = "results";
};

struct Variant {
  std::string method;
  std::string tag;
  std::vector<std::string> overrides;
};

/// The full run grid of a named reproduction. `trainable` marks the runs
/// selected by --Ts/--methods/--seeds; the report covers every finished run.
std::vector<JobSpec> plan(const ReproduceArgs& a, std::string& energy, std::vector<bool>& trainable) {
  std::vector<int> steps;
  std::vector<Variant> variants;
  if (a.name == "table-25gmm") {
    energy = "gmm25";
    steps = {5, 10, 20};
    variants = {{"tb-fixed", "", {}}, {"tb-learnedvar", "", {}}, {"tb-tlm", "", {}}, {"tb-both", "", {}}};
  } else if (a.name == "fig-funnel") {
    energy = "funnel-hard";
    steps = {5};
    variants = {{"tb-fixed", "", {}}, {"tb-both", "", {}}};
  } else if (a.name == "ablation-40gmm") {
    energy = "gmm40";
    steps = {10};
    variants = {{"tb-both", "", {}},
                {"tb-both", "single-opt", {"separate_optimizers=false"}},
                {"tb-both", "split-backbone", {"shared_backbone=false"}}};
  } else {
    throw ConfigError("unknown reproduction '" + a.name + "' (table-25gmm, fig-funnel, ablation-40gmm)");
  }
  for (int T : a.steps)
    if (std::find(steps.begin(), steps.end(), T) == steps.end()) steps.push_back(T);
  std::vector<std::uint64_t> seeds{0, 1, 2};
  for (auto s : a.seeds)
    if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
  auto selected = [](const auto& filter, const auto& v) {
    return filter.empty() || std::find(filter.begin(), filter.end(), v) != filter.end();
  };
  std::vector<JobSpec> jobs;
  trainable.clear();
  for (const auto& v : variants)
    for (int T : steps)
      for (auto seed : seeds) {
        JobSpec j;
        j.energy = energy;
        j.steps = T;
        j.method = v.method;
        j.tag = v.tag;
        j.seed = seed;
        j.iterations = a.iterations;
        j.overrides = v.overrides;
        j.overrides.insert(j.overrides.end(), a.overrides.begin(), a.overrides.end());
        jobs.push_back(std::move(j));
        trainable.push_back(selected(a.methods, run_label(v.method, v.tag)) && selected(a.steps, T) &&
                            selected(a.seeds, seed));
      }
  return jobs;
}

/// Fraction of rows whose first coordinate lies below `cut`.
double tail_mass(const Matrix& x, double cut) {
  if (x.rows() == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>((x.col(0).array() < cut).count()) / static_cast<double>(x.rows());
}

int cmd_reproduce(const ReproduceArgs& a, const SweepOptions& so) {
  std::string energy;
  std::vector<bool> trainable;
  const auto jobs = plan(a, energy, trainable);
  SweepOptions opt = so;
  const fs::path out_dir(a.results);
  opt.log_dir = out_dir / "logs" / a.name;
  const auto runs = run_jobs(jobs, opt, trainable);
  json extra{{"preset", a.name}, {"version", DSAMP_VERSION}, {"written", iso_now()}};

  if (a.name == "fig-funnel") {
    // Sample dumps for scatter plots and the tail-mass statistic.
    const fs::path dump_dir = out_dir / "fig-funnel";
    fs::create_directories(dump_dir);
    const EnergySpec e = build_energy(energy);
    const Matrix gt = sample_ground_truth(e, 2048, 0);
    write_csv(dump_dir / "ground_truth.csv", gt);
    extra["tail"] = {{"cut", -2.0}, {"ground_truth", tail_mass(gt, -2.0)}, {"runs", json::array()}};
    for (const auto& r : runs) {
      if (r.status == "failed" || r.status == "diverged") continue;
      EvalArgs ea;
      ea.checkpoint = (fs::path(r.dir) / "checkpoint.bin").string();
      ea.no_w2 = true;
      ea.no_eubo = true;
      ea.dump_samples = (dump_dir / (r.label + "_T" + std::to_string(r.steps) + "_s" + std::to_string(r.seed) + ".csv")).string();
      const EvalOutput eo = run_eval(ea);
      extra["tail"]["runs"].push_back(
          {{"method", r.label}, {"T", r.steps}, {"seed", r.seed}, {"tail", tail_mass(eo.samples, -2.0)}});
    }
  }
  write_report(out_dir / (a.name + ".csv"), runs, extra);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees many large temporaries per step.
  ::mallopt(M_MMAP_THRESHOLD, 1 << 30);
  ::mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Diffusion samplers with learnable forward and backward kernels"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DSAMP_VERSION);

  JobSpec train_spec;
  std::string run_dir;
  int dump_traj = 0;
  auto* train_cmd = app.add_subcommand("train", "train one sampler and write a run directory");
  add_job_options(*train_cmd, train_spec);
  train_cmd->add_option("--tag", train_spec.tag, "variant label appended to the method name");
  train_cmd->add_option("--run-dir", run_dir, "explicit run directory (default: under $DSAMP_RUN_ROOT)");
  train_cmd->add_option("--dump-trajectories", dump_traj, "write N final-model trajectories as JSON lines");
  train_cmd->add_option("overrides", train_spec.overrides, "key=value config overrides");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("checkpoint", eval_args.checkpoint, "checkpoint.bin")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--energy", eval_args.energy, "energy (default: the training energy)");
  eval_cmd->add_option("--n", eval_args.n, "number of samples")->check(CLI::Range(2, 1 << 24));
  eval_cmd->add_option("--seed", eval_args.seed, "evaluation seed");
  eval_cmd->add_option("--dump-samples", eval_args.dump_samples, "CSV of terminal samples");
  eval_cmd->add_option("--dump-trajectories", eval_args.dump_trajectories, "JSON lines of full trajectories");
  eval_cmd->add_flag("--no-w2", eval_args.no_w2, "skip the Wasserstein distance");
  eval_cmd->add_flag("--no-eubo", eval_args.no_eubo, "skip the upper bound");

  JobSpec sweep_base;
  std::vector<int> sweep_steps;
  std::vector<std::string> sweep_methods;
  std::vector<std::uint64_t> sweep_seeds{0};
  std::string sweep_out;
  SweepOptions sweep_opt;
  bool no_reuse = false;
  auto* sweep_cmd = app.add_subcommand("sweep", "train a grid of runs and aggregate them");
  add_job_options(*sweep_cmd, sweep_base);
  sweep_cmd->add_option("--Ts", sweep_steps, "list of T values")->delimiter(',');
  sweep_cmd->add_option("--methods", sweep_methods, "list of methods")->delimiter(',')->required();
  sweep_cmd->add_option("--seeds", sweep_seeds, "list of seeds")->delimiter(',');
  sweep_cmd->add_option("--jobs", sweep_opt.jobs, "parallel runs")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--out", sweep_out, "aggregated CSV path (a .json twin is written next to it)");
  sweep_cmd->add_flag("--no-reuse", no_reuse, "retrain even if a finished run with the same config exists");

  ReproduceArgs rep;
  auto* rep_cmd = app.add_subcommand("reproduce", "run a named experiment set");
  rep_cmd->add_option("name", rep.name, "table-25gmm, fig-funnel or ablation-40gmm")->required();
  rep_cmd->add_option("--seeds", rep.seeds, "train only these seeds (default 0,1,2)")->delimiter(',');
  rep_cmd->add_option("--Ts", rep.steps, "train only these T values")->delimiter(',');
  rep_cmd->add_option("--methods", rep.methods, "train only these methods (labels as in the report)")->delimiter(',');
  rep_cmd->add_option("--iterations", rep.iterations, "override the iteration count");
  rep_cmd->add_option("--set", rep.overrides, "config override key=value (repeatable)");
  rep_cmd->add_option("--jobs", sweep_opt.jobs, "parallel runs")->check(CLI::PositiveNumber);
  rep_cmd->add_option("--results", rep.results, "output directory");
  rep_cmd->add_flag("--no-reuse", no_reuse, "retrain even if a finished run with the same config exists");

  CLI11_PARSE(app, argc, argv);
  sweep_opt.reuse = !no_reuse;

  try {
    if (*train_cmd) return cmd_train(train_spec, run_dir, dump_traj);
    if (*eval_cmd) {
      std::cout << run_eval(eval_args).report.dump(2) << '\n';
      return 0;
    }
    if (*sweep_cmd) {
      if (sweep_steps.empty()) sweep_steps.push_back(sweep_base.steps ? sweep_base.steps : 5);
      std::vector<JobSpec> jobs;
      for (const auto& m : sweep_methods)
        for (int T : sweep_steps)
          for (auto seed : sweep_seeds) {
            JobSpec j = sweep_base;
            j.method = m;
            j.steps = T;
            j.seed = seed;
            jobs.push_back(std::move(j));
          }
      const fs::path out = sweep_out.empty() ? run_root() / ("sweep_" + utc_stamp("%Y%m%dT%H%M%S") + ".csv")
                                             : fs::path(sweep_out);
      sweep_opt.log_dir = out.parent_path().empty() ? fs::path("logs") : out.parent_path() / "logs";
      write_report(out, run_jobs(jobs, sweep_opt));
      return 0;
    }
    if (*rep_cmd) return cmd_reproduce(rep, sweep_opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
