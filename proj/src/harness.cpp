#include "curvlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "curvlab/errors.hpp"
#include "curvlab/seeding.hpp"

namespace curvlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& item : j.items()) {
    if (allowed.count(item.key()) == 0) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& into) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

Coefficient coefficient_from(const json& v) {
  if (v.is_string()) return parse_coefficient(v.get<std::string>());
  if (v.is_number()) return parse_coefficient(num(v.get<double>()));
  throw ConfigError("coefficient must be a number or \"inf\"");
}

json coefficient_json(const Coefficient& c) {
  if (c.is_infinite()) return "inf";
  return c.value();
}

OptimizerConfig optimizer_from(const json& j, OptimizerConfig c) {
  check_keys(j,
             {"mode", "eta", "alpha_dom", "beta_bulk", "k", "refresh_period", "holdout_size",
              "divergence_factor", "lanczos_max_iters", "lanczos_tol"},
             "optimizer");
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  read(j, "eta", c.eta);
  if (j.contains("alpha_dom")) c.alpha_dom = coefficient_from(j.at("alpha_dom"));
  if (j.contains("beta_bulk")) c.beta_bulk = coefficient_from(j.at("beta_bulk"));
  read(j, "k", c.k);
  read(j, "refresh_period", c.refresh_period);
  read(j, "holdout_size", c.holdout_size);
  read(j, "divergence_factor", c.divergence_factor);
  read(j, "lanczos_max_iters", c.lanczos_max_iters);
  read(j, "lanczos_tol", c.lanczos_tol);
  return c;
}

json optimizer_json(const OptimizerConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"eta", c.eta},
          {"alpha_dom", coefficient_json(c.alpha_dom)},
          {"beta_bulk", coefficient_json(c.beta_bulk)},
          {"k", c.k},
          {"refresh_period", c.refresh_period},
          {"holdout_size", c.holdout_size},
          {"divergence_factor", c.divergence_factor},
          {"lanczos_max_iters", c.lanczos_max_iters},
          {"lanczos_tol", c.lanczos_tol},
          {"seed", c.seed}};
}

json model_json(const ModelSpec& m) {
  return {{"architecture", to_string(m.architecture)},
          {"activation", to_string(m.activation)},
          {"loss", to_string(m.loss)},
          {"hidden", m.hidden},
          {"channels", m.channels},
          {"num_classes", m.num_classes}};
}

std::string combo_name(const LossActivation& c) {
  return to_string(c.loss) + "_" + to_string(c.activation);
}

// Shared state for running cells and writing their directories.
class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const Dataset& ds, const RunnerOptions& opts)
      : cfg_(cfg), ds_(ds), opts_(opts) {
    spec_ = cfg.model;
    spec_.input_shape = ds.shape;
    spec_.validate();
    steps_ = cfg.resolved_steps(ds.train.size());
    fs::create_directories(opts.out);
  }

  [[nodiscard]] const ModelSpec& spec() const { return spec_; }
  [[nodiscard]] long steps() const { return steps_; }

  [[nodiscard]] TrainOptions train_options() const {
    TrainOptions o;
    o.total_steps = steps_;
    o.batch_size = cfg_.batch_size;
    o.eval_every = cfg_.eval_every;
    o.energy_every = cfg_.track_subspace ? cfg_.energy_every : 0;
    o.energy_probes = cfg_.energy_probes;
    o.track_subspace = cfg_.track_subspace;
    o.seed = cfg_.seed;
    return o;
  }

  // Cell optimizer config with the solver seed tied to the run id.
  [[nodiscard]] OptimizerConfig cell_optimizer(OptimizerConfig c, const std::string& run_id) const {
    c.seed = derive_seed({cfg_.seed, fnv1a(run_id)});
    return c;
  }

  void log(const std::string& msg) const {
    if (!opts_.log) return;
    const std::lock_guard<std::mutex> lock(log_mutex_);
    opts_.log(msg);
  }

  // Trains one cell and writes its run directory. Never throws.
  CellResult run(const std::string& run_id,
                 std::vector<std::pair<std::string, std::string>> coords,
                 const OptimizerConfig& opt, const TrainOptions& topts,
                 const ModelSpec* spec_override = nullptr, TrainResult* keep = nullptr) const {
    CellResult cell;
    cell.run_id = run_id;
    cell.coords = std::move(coords);
    const ModelSpec& spec = spec_override ? *spec_override : spec_;
    try {
      log("start " + run_id);
      TrainResult r = train(spec, ds_, opt, topts);
      json echo = run_echo(run_id, cell.coords, spec, opt, topts);
      echo["run"]["holdout_id"] = r.holdout_id;
      echo["run"]["halted"] = r.halted;
      cell.summary = write_records(r.records, echo, opts_.out / run_id);
      log("done  " + run_id + (cell.summary->diverged ? " (diverged)" : ""));
      if (keep) *keep = std::move(r);
    } catch (const std::exception& e) {
      cell.error = e.what();
      log("fail  " + run_id + ": " + cell.error);
    }
    return cell;
  }

  [[nodiscard]] json run_echo(const std::string& run_id,
                              const std::vector<std::pair<std::string, std::string>>& coords,
                              const ModelSpec& spec, const OptimizerConfig& opt,
                              const TrainOptions& topts) const {
    json c = json::object();
    for (const auto& [k, v] : coords) c[k] = v;
    json run = {{"run_id", run_id},
                {"coordinates", c},
                {"model", model_json(spec)},
                {"optimizer", optimizer_json(opt)},
                {"total_steps", topts.total_steps},
                {"start_step", topts.start ? topts.start->step : 0},
                {"train_seed", topts.seed},
                {"track_subspace", topts.track_subspace},
                {"energy_every", topts.energy_every},
                {"param_count", spec.param_count()}};
    if (topts.switch_to) {
      run["switch"] = {{"at_step", topts.switch_to->at_step},
                       {"optimizer", optimizer_json(topts.switch_to->cfg)}};
    }
    json data = {{"name", to_string(ds_.name)},
                 {"train_examples", ds_.train.size()},
                 {"test_examples", ds_.test.size()},
                 {"subset", ds_.subset_seed == 0 ? "first-n" : "seeded"},
                 {"subset_seed", ds_.subset_seed},
                 {"normalization_mean", ds_.normalization.mean},
                 {"normalization_std", ds_.normalization.stddev}};
    return {{"experiment", cfg_.to_json()}, {"run", run}, {"dataset", data}};
  }

  [[nodiscard]] const fs::path& out() const { return opts_.out; }
  [[nodiscard]] int workers() const { return opts_.workers; }

 private:
  const ExperimentConfig& cfg_;
  const Dataset& ds_;
  const RunnerOptions& opts_;
  ModelSpec spec_;
  long steps_ = 0;
  mutable std::mutex log_mutex_;
};

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void write_file(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out << text;
}

void write_energy_csv(const std::vector<RunRecord>& records, const fs::path& file) {
  std::string text =
      "step,frob_h,frob_h_se,frob_ho,frob_ho_se,frob_hf,frob_hf_se,sub_h,sub_ho,sub_hf,spectrum,"
      "sub_over_frob_h,sub_over_frob_ho,sub_over_frob_hf,"
      "sub_over_spectrum_h,sub_over_spectrum_ho,sub_over_spectrum_hf\n";
  for (const RunRecord& r : records) {
    if (!r.energy) continue;
    const EnergyColumns& e = *r.energy;
    std::vector<std::optional<double>> cells = {
        e.frob_h,
        e.frob_h_se,
        e.frob_ho,
        e.frob_ho_se,
        e.frob_hf,
        e.frob_hf_se,
        e.sub_h,
        e.sub_ho,
        e.sub_hf,
        e.spectrum,
        EnergyReport::ratio(e.sub_h, e.frob_h),
        EnergyReport::ratio(e.sub_ho, e.frob_ho),
        EnergyReport::ratio(e.sub_hf, e.frob_hf),
        EnergyReport::ratio(e.sub_h, e.spectrum),
        EnergyReport::ratio(e.sub_ho, e.spectrum),
        EnergyReport::ratio(e.sub_hf, e.spectrum)};
    text += std::to_string(r.step);
    for (const auto& c : cells) text += "," + format_cell(c);
    text += '\n';
  }
  write_file(file, text);
}

}  // namespace

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Train: return "train";
    case ExperimentKind::Ablate: return "ablate";
    case ExperimentKind::Switchpoint: return "switchpoint";
    case ExperimentKind::Accelerate: return "accelerate";
    case ExperimentKind::Interpolate: return "interpolate";
    case ExperimentKind::Energy: return "energy";
  }
  return "?";
}

ExperimentKind parse_kind(const std::string& s) {
  for (ExperimentKind k : {ExperimentKind::Train, ExperimentKind::Ablate,
                           ExperimentKind::Switchpoint, ExperimentKind::Accelerate,
                           ExperimentKind::Interpolate, ExperimentKind::Energy}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown experiment kind '" + s + "'");
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j,
             {"kind", "dataset", "train_size", "subset_seed", "model", "optimizer", "epochs",
              "total_steps", "batch_size", "eval_every", "energy_every", "energy_probes",
              "track_subspace", "seed", "ablate", "switchpoint", "accelerate", "interpolate",
              "energy", "smoke"},
             "config");
  ExperimentConfig c;
  if (j.contains("kind")) c.kind = parse_kind(j.at("kind").get<std::string>());
  if (j.contains("dataset")) c.dataset = parse_dataset(j.at("dataset").get<std::string>());
  read(j, "train_size", c.train_size);
  read(j, "subset_seed", c.subset_seed);
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"architecture", "activation", "loss", "hidden", "channels", "num_classes"},
               "model");
    if (m.contains("architecture")) {
      c.model.architecture = parse_architecture(m.at("architecture").get<std::string>());
    }
    if (m.contains("activation")) {
      c.model.activation = parse_activation(m.at("activation").get<std::string>());
    }
    if (m.contains("loss")) c.model.loss = parse_loss(m.at("loss").get<std::string>());
    read(m, "hidden", c.model.hidden);
    read(m, "channels", c.model.channels);
    read(m, "num_classes", c.model.num_classes);
  }
  if (j.contains("optimizer")) c.optimizer = optimizer_from(j.at("optimizer"), c.optimizer);
  read(j, "epochs", c.epochs);
  if (j.contains("total_steps") && !j.at("total_steps").is_null()) {
    c.total_steps = j.at("total_steps").get<long>();
  }
  read(j, "batch_size", c.batch_size);
  read(j, "eval_every", c.eval_every);
  read(j, "energy_every", c.energy_every);
  read(j, "energy_probes", c.energy_probes);
  read(j, "track_subspace", c.track_subspace);
  read(j, "seed", c.seed);
  read(j, "smoke", c.smoke);
  if (j.contains("ablate")) {
    const json& a = j.at("ablate");
    check_keys(a, {"eta", "k", "holdout_size"}, "ablate");
    read(a, "eta", c.grid_eta);
    read(a, "k", c.grid_k);
    read(a, "holdout_size", c.grid_holdout);
  }
  if (j.contains("switchpoint")) {
    const json& s = j.at("switchpoint");
    check_keys(s, {"steps", "eta"}, "switchpoint");
    read(s, "steps", c.switch_steps);
    if (s.contains("eta") && !s.at("eta").is_null()) c.switch_eta = s.at("eta").get<double>();
  }
  if (j.contains("accelerate")) {
    const json& a = j.at("accelerate");
    check_keys(a, {"warmup_steps", "eta_multiplier", "slope_window"}, "accelerate");
    read(a, "warmup_steps", c.warmup_steps);
    read(a, "eta_multiplier", c.eta_multiplier);
    read(a, "slope_window", c.slope_window);
  }
  if (j.contains("interpolate")) {
    const json& g = j.at("interpolate");
    check_keys(g, {"alpha_dom", "beta_bulk"}, "interpolate");
    if (g.contains("alpha_dom")) {
      c.grid_alpha.clear();
      for (const json& v : g.at("alpha_dom")) c.grid_alpha.push_back(coefficient_from(v));
    }
    if (g.contains("beta_bulk")) {
      c.grid_beta.clear();
      for (const json& v : g.at("beta_bulk")) c.grid_beta.push_back(coefficient_from(v));
    }
  }
  if (j.contains("energy")) {
    const json& e = j.at("energy");
    check_keys(e, {"combinations"}, "energy");
    if (e.contains("combinations")) {
      c.combinations.clear();
      for (const json& v : e.at("combinations")) {
        check_keys(v, {"loss", "activation"}, "energy combination");
        c.combinations.push_back({parse_loss(v.at("loss").get<std::string>()),
                                  parse_activation(v.at("activation").get<std::string>())});
      }
    }
  }
  if (c.smoke) c.apply_smoke();
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  json alpha = json::array();
  for (const auto& a : grid_alpha) alpha.push_back(coefficient_json(a));
  json beta = json::array();
  for (const auto& b : grid_beta) beta.push_back(coefficient_json(b));
  json combos = json::array();
  for (const auto& c : combinations) {
    combos.push_back({{"loss", to_string(c.loss)}, {"activation", to_string(c.activation)}});
  }
  json opt = optimizer_json(optimizer);
  opt.erase("seed");
  return {{"kind", to_string(kind)},
          {"dataset", to_string(dataset)},
          {"train_size", train_size},
          {"subset_seed", subset_seed},
          {"model", model_json(model)},
          {"optimizer", opt},
          {"epochs", epochs},
          {"total_steps", total_steps ? json(*total_steps) : json(nullptr)},
          {"batch_size", batch_size},
          {"eval_every", eval_every},
          {"energy_every", energy_every},
          {"energy_probes", energy_probes},
          {"track_subspace", track_subspace},
          {"seed", seed},
          {"ablate", {{"eta", grid_eta}, {"k", grid_k}, {"holdout_size", grid_holdout}}},
          {"switchpoint",
           {{"steps", switch_steps}, {"eta", switch_eta ? json(*switch_eta) : json(nullptr)}}},
          {"accelerate",
           {{"warmup_steps", warmup_steps},
            {"eta_multiplier", eta_multiplier},
            {"slope_window", slope_window}}},
          {"interpolate", {{"alpha_dom", alpha}, {"beta_bulk", beta}}},
          {"energy", {{"combinations", combos}}},
          {"smoke", smoke}};
}

long ExperimentConfig::resolved_steps(int train_examples) const {
  if (total_steps) return *total_steps;
  const long per_epoch = (train_examples + batch_size - 1) / batch_size;
  return epochs * per_epoch;
}

void ExperimentConfig::apply_smoke() {
  const long full = resolved_steps(train_size);
  epochs = 20;
  total_steps.reset();
  const long scaled = resolved_steps(train_size);
  if (full > 0) warmup_steps = warmup_steps * scaled / full;
  optimizer.holdout_size = std::min(optimizer.holdout_size, 200);
  grid_holdout = {std::min(200, train_size)};
  smoke = true;
}

void ExperimentConfig::validate() const {
  optimizer.validate();
  if (train_size < 1) throw ConfigError("train_size must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0 || (total_steps && *total_steps < 0)) throw ConfigError("negative run length");
  if (eval_every < 0 || energy_every < 0) throw ConfigError("negative cadence");
  if (energy_probes < 1) throw ConfigError("energy_probes must be >= 1");
  switch (kind) {
    case ExperimentKind::Ablate:
      if (grid_eta.empty() || grid_k.empty() || grid_holdout.empty()) {
        throw ConfigError("ablate grid axes must be non-empty");
      }
      for (double e : grid_eta) {
        if (!(e > 0.0)) throw ConfigError("grid eta must be positive");
      }
      for (int k : grid_k) {
        if (k < 1) throw ConfigError("grid k must be >= 1");
      }
      for (int l : grid_holdout) {
        if (l < 1) throw ConfigError("grid holdout_size must be >= 1");
      }
      break;
    case ExperimentKind::Switchpoint:
      if (switch_steps.empty()) throw ConfigError("switchpoint needs at least one step");
      for (long s : switch_steps) {
        if (s < 0) throw ConfigError("switch steps must be >= 0");
      }
      if (switch_eta && !(*switch_eta > 0.0)) throw ConfigError("switch eta must be positive");
      break;
    case ExperimentKind::Accelerate:
      if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
      if (!(eta_multiplier > 0.0)) throw ConfigError("eta_multiplier must be positive");
      if (slope_window < 2) throw ConfigError("slope_window must be >= 2");
      break;
    case ExperimentKind::Interpolate:
      if (grid_alpha.empty() || grid_beta.empty()) {
        throw ConfigError("interpolate grid axes must be non-empty");
      }
      break;
    case ExperimentKind::Energy:
      if (combinations.empty()) throw ConfigError("energy needs at least one combination");
      break;
    case ExperimentKind::Train: break;
  }
}

ExperimentConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

Dataset load_dataset(const ExperimentConfig& cfg, const fs::path& data_dir) {
  return make_subset(load_raw(cfg.dataset, data_dir), cfg.dataset, cfg.train_size,
                     cfg.subset_seed);
}

ExperimentResult run_train(const ExperimentConfig& cfg, const Dataset& ds,
                           const RunnerOptions& opts) {
  const Runner runner(cfg, ds, opts);
  const std::string id = "train";
  ExperimentResult res;
  res.cells.push_back(runner.run(id, {{"mode", to_string(cfg.optimizer.mode)}},
                                 runner.cell_optimizer(cfg.optimizer, id),
                                 runner.train_options()));
  return res;
}

ExperimentResult run_ablation(const ExperimentConfig& cfg, const Dataset& ds,
                              const RunnerOptions& opts) {
  const Runner runner(cfg, ds, opts);
  struct Job {
    std::string id;
    std::vector<std::pair<std::string, std::string>> coords;
    OptimizerConfig opt;
  };
  std::vector<Job> jobs;
  for (double eta : cfg.grid_eta) {
    OptimizerConfig base = cfg.optimizer;
    base.eta = eta;
    base.mode = UpdateMode::SGD;
    const std::string bid = "sgd_eta=" + num(eta);
    jobs.push_back({bid, {{"mode", "sgd"}, {"eta", num(eta)}, {"l", ""}, {"k", ""}},
                    runner.cell_optimizer(base, bid)});
    for (int l : cfg.grid_holdout) {
      for (int k : cfg.grid_k) {
        OptimizerConfig c = base;
        c.mode = UpdateMode::Bulk;
        c.holdout_size = l;
        c.k = k;
        const std::string id =
            "bulk_eta=" + num(eta) + "_l=" + std::to_string(l) + "_k=" + std::to_string(k);
        jobs.push_back({id,
                        {{"mode", "bulk"}, {"eta", num(eta)}, {"l", std::to_string(l)},
                         {"k", std::to_string(k)}},
                        runner.cell_optimizer(c, id)});
      }
    }
  }
  ExperimentResult res;
  res.cells.resize(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), runner.workers(), [&](int i) {
    res.cells[i] = runner.run(jobs[i].id, jobs[i].coords, jobs[i].opt, runner.train_options());
  });
  write_grid(res, runner.out() / "grid.csv");
  return res;
}

ExperimentResult run_switchpoint(const ExperimentConfig& cfg, const Dataset& ds,
                                 const RunnerOptions& opts) {
  const Runner runner(cfg, ds, opts);
  std::vector<long> steps;
  for (long s : cfg.switch_steps) {
    if (s <= runner.steps()) steps.push_back(s);
  }
  OptimizerConfig base = cfg.optimizer;
  base.mode = UpdateMode::SGD;
  TrainOptions bopts = runner.train_options();
  bopts.checkpoint_steps = steps;
  TrainResult baseline;
  ExperimentResult res;
  res.cells.push_back(runner.run("sgd", {{"mode", "sgd"}, {"switch_step", ""}},
                                 runner.cell_optimizer(base, "sgd"), bopts, nullptr, &baseline));
  if (!res.cells.front().error.empty()) {
    write_grid(res, runner.out() / "grid.csv");
    return res;
  }

  struct Job {
    std::string id;
    long at = 0;
    UpdateMode mode = UpdateMode::Dom;
  };
  std::vector<Job> jobs;
  for (long s : steps) {
    for (UpdateMode m : {UpdateMode::Dom, UpdateMode::Bulk}) {
      jobs.push_back({to_string(m) + "_switch=" + std::to_string(s), s, m});
    }
  }
  std::vector<CellResult> cells(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), runner.workers(), [&](int i) {
    const Job& job = jobs[i];
    OptimizerConfig c = base;
    c.mode = job.mode;
    if (cfg.switch_eta) c.eta = *cfg.switch_eta;
    TrainOptions o = runner.train_options();
    const auto it = baseline.checkpoints.find(job.at);
    if (it == baseline.checkpoints.end()) {
      cells[i].run_id = job.id;
      cells[i].coords = {{"mode", to_string(job.mode)}, {"switch_step", std::to_string(job.at)}};
      cells[i].error = "baseline ended before the switch step";
      return;
    }
    o.start = it->second;
    cells[i] = runner.run(job.id,
                          {{"mode", to_string(job.mode)}, {"switch_step", std::to_string(job.at)}},
                          runner.cell_optimizer(c, job.id), o);
  });
  res.cells.insert(res.cells.end(), cells.begin(), cells.end());
  write_grid(res, runner.out() / "grid.csv");
  return res;
}

std::optional<double> loss_slope(const std::vector<RunRecord>& records, long from, long window) {
  double sx = 0;
  double sy = 0;
  double sxx = 0;
  double sxy = 0;
  int n = 0;
  for (const RunRecord& r : records) {
    if (r.step < from || r.step >= from + window || !r.train_loss) continue;
    const double x = static_cast<double>(r.step - from);
    const double y = *r.train_loss;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  if (n < 2) return std::nullopt;
  const double den = n * sxx - sx * sx;
  if (den == 0.0) return std::nullopt;
  return (n * sxy - sx * sy) / den;
}

ExperimentResult run_accelerate(const ExperimentConfig& cfg, const Dataset& ds,
                                const RunnerOptions& opts) {
  const Runner runner(cfg, ds, opts);
  const long warmup = std::min(cfg.warmup_steps, runner.steps());
  OptimizerConfig base = cfg.optimizer;
  base.mode = UpdateMode::SGD;
  TrainOptions bopts = runner.train_options();
  bopts.checkpoint_steps = {warmup};
  TrainResult baseline;
  ExperimentResult res;
  res.cells.push_back(runner.run("sgd", {{"mode", "sgd"}, {"eta", num(base.eta)}},
                                 runner.cell_optimizer(base, "sgd"), bopts, nullptr, &baseline));
  auto add_slope = [&](CellResult& cell, const std::vector<RunRecord>& records) {
    const auto s = loss_slope(records, warmup, cfg.slope_window);
    cell.extra.emplace_back("post_switch_slope", format_cell(s));
  };
  if (!res.cells.front().error.empty()) {
    write_grid(res, runner.out() / "grid.csv");
    return res;
  }
  add_slope(res.cells.front(), baseline.records);

  const std::vector<std::pair<std::string, double>> legs = {
      {"bulk_same_eta", base.eta}, {"bulk_eta_x" + num(cfg.eta_multiplier), base.eta * cfg.eta_multiplier}};
  std::vector<CellResult> cells(legs.size());
  std::vector<TrainResult> results(legs.size());
  parallel_for(static_cast<int>(legs.size()), runner.workers(), [&](int i) {
    OptimizerConfig c = base;
    c.mode = UpdateMode::Bulk;
    c.eta = legs[i].second;
    TrainOptions o = runner.train_options();
    o.start = baseline.checkpoints.at(warmup);
    cells[i] = runner.run(legs[i].first, {{"mode", "bulk"}, {"eta", num(c.eta)}},
                          runner.cell_optimizer(c, legs[i].first), o, nullptr, &results[i]);
  });
  for (std::size_t i = 0; i < legs.size(); ++i) {
    if (cells[i].error.empty()) add_slope(cells[i], results[i].records);
    res.cells.push_back(cells[i]);
  }
  write_grid(res, runner.out() / "grid.csv");
  return res;
}

ExperimentResult run_interpolate(const ExperimentConfig& cfg, const Dataset& ds,
                                 const RunnerOptions& opts) {
  const Runner runner(cfg, ds, opts);
  struct Job {
    std::string id;
    std::size_t row = 0;
    std::size_t col = 0;
  };
  std::vector<Job> jobs;
  for (std::size_t a = 0; a < cfg.grid_alpha.size(); ++a) {
    for (std::size_t b = 0; b < cfg.grid_beta.size(); ++b) {
      jobs.push_back({"alpha=" + to_string(cfg.grid_alpha[a]) + "_beta=" +
                          to_string(cfg.grid_beta[b]),
                      a, b});
    }
  }
  ExperimentResult res;
  res.cells.resize(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), runner.workers(), [&](int i) {
    OptimizerConfig c = cfg.optimizer;
    c.mode = UpdateMode::Interpolated;
    c.alpha_dom = cfg.grid_alpha[jobs[i].row];
    c.beta_bulk = cfg.grid_beta[jobs[i].col];
    res.cells[i] = runner.run(jobs[i].id,
                              {{"alpha_dom", to_string(c.alpha_dom)},
                               {"beta_bulk", to_string(c.beta_bulk)}},
                              runner.cell_optimizer(c, jobs[i].id), runner.train_options());
  });
  write_grid(res, runner.out() / "grid.csv");

  auto heatmap = [&](const std::string& name, auto value) {
    std::string text = "alpha_dom\\beta_bulk";
    for (const auto& b : cfg.grid_beta) text += "," + to_string(b);
    text += '\n';
    for (std::size_t a = 0; a < cfg.grid_alpha.size(); ++a) {
      text += to_string(cfg.grid_alpha[a]);
      for (std::size_t b = 0; b < cfg.grid_beta.size(); ++b) {
        text += "," + value(res.cells[a * cfg.grid_beta.size() + b]);
      }
      text += '\n';
    }
    write_file(runner.out() / name, text);
  };
  heatmap("heatmap_train_loss.csv", [](const CellResult& c) {
    return c.summary ? format_cell(c.summary->final_train_loss) : std::string();
  });
  heatmap("heatmap_test_accuracy.csv", [](const CellResult& c) {
    return c.summary ? format_cell(c.summary->final_test_accuracy) : std::string();
  });
  heatmap("heatmap_diverged.csv", [](const CellResult& c) {
    return std::string(!c.summary || c.summary->diverged ? "1" : "0");
  });
  return res;
}

ExperimentResult run_energy(const ExperimentConfig& cfg, const Dataset& ds,
                            const RunnerOptions& opts) {
  ExperimentConfig tracked = cfg;
  tracked.track_subspace = true;
  const Runner runner(tracked, ds, opts);
  ExperimentResult res;
  res.cells.resize(cfg.combinations.size());
  parallel_for(static_cast<int>(cfg.combinations.size()), runner.workers(), [&](int i) {
    const LossActivation& combo = cfg.combinations[i];
    ModelSpec spec = runner.spec();
    spec.loss = combo.loss;
    spec.activation = combo.activation;
    OptimizerConfig c = cfg.optimizer;
    c.mode = UpdateMode::SGD;
    const std::string id = "energy_" + combo_name(combo);
    TrainResult r;
    res.cells[i] = runner.run(id,
                              {{"loss", to_string(combo.loss)},
                               {"activation", to_string(combo.activation)}},
                              runner.cell_optimizer(c, id), runner.train_options(), &spec, &r);
    if (res.cells[i].error.empty()) {
      try {
        write_energy_csv(r.records, runner.out() / id / "energy.csv");
      } catch (const std::exception& e) {
        res.cells[i].error = e.what();
      }
    }
  });
  write_grid(res, runner.out() / "grid.csv");
  return res;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Dataset& ds,
                                const RunnerOptions& opts) {
  switch (cfg.kind) {
    case ExperimentKind::Train: return run_train(cfg, ds, opts);
    case ExperimentKind::Ablate: return run_ablation(cfg, ds, opts);
    case ExperimentKind::Switchpoint: return run_switchpoint(cfg, ds, opts);
    case ExperimentKind::Accelerate: return run_accelerate(cfg, ds, opts);
    case ExperimentKind::Interpolate: return run_interpolate(cfg, ds, opts);
    case ExperimentKind::Energy: return run_energy(cfg, ds, opts);
  }
  throw ConfigError("unhandled experiment kind");
}

void write_grid(const ExperimentResult& result, const fs::path& file) {
  std::vector<std::string> coord_keys;
  std::vector<std::string> extra_keys;
  auto add_key = [](std::vector<std::string>& keys, const std::string& k) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  };
  for (const CellResult& c : result.cells) {
    for (const auto& kv : c.coords) add_key(coord_keys, kv.first);
    for (const auto& kv : c.extra) add_key(extra_keys, kv.first);
  }
  auto lookup = [](const std::vector<std::pair<std::string, std::string>>& kvs,
                   const std::string& k) {
    for (const auto& kv : kvs) {
      if (kv.first == k) return kv.second;
    }
    return std::string();
  };

  std::string text = "run_id";
  for (const auto& k : coord_keys) text += "," + k;
  for (const auto& k : extra_keys) text += "," + k;
  text +=
      ",final_train_loss,best_train_loss,final_test_loss,final_test_accuracy,"
      "best_test_accuracy,diverged,error\n";
  for (const CellResult& c : result.cells) {
    text += c.run_id;
    for (const auto& k : coord_keys) text += "," + lookup(c.coords, k);
    for (const auto& k : extra_keys) text += "," + lookup(c.extra, k);
    if (c.summary) {
      const RunSummary& s = *c.summary;
      text += "," + format_cell(s.final_train_loss) + "," + format_cell(s.best_train_loss) + "," +
              format_cell(s.final_test_loss) + "," + format_cell(s.final_test_accuracy) + "," +
              format_cell(s.best_test_accuracy) + "," + (s.diverged ? "1" : "0");
    } else {
      text += ",,,,,,1";
    }
    text += "," + csv_safe(c.error) + "\n";
  }
  fs::create_directories(file.parent_path());
  write_file(file, text);
}

}  // namespace curvlab
