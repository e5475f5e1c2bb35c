#include "curvlab/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "curvlab/errors.hpp"

namespace curvlab {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kLeadColumns = {
    "step",      "train_loss", "full_train_loss",   "test_loss",         "test_accuracy",
    "grad_norm", "chi_k",      "ritz_residual_max", "lanczos_converged", "diverged"};

const std::vector<std::string> kEnergyColumns = {
    "frob_h", "frob_h_se", "frob_ho", "frob_ho_se", "frob_hf",
    "frob_hf_se", "sub_h", "sub_ho", "sub_hf", "spectrum"};

std::optional<double> min_of(std::optional<double> a, std::optional<double> b) {
  if (!a) return b;
  if (!b) return a;
  return std::min(*a, *b);
}

std::optional<double> max_of(std::optional<double> a, std::optional<double> b) {
  if (!a) return b;
  if (!b) return a;
  return std::max(*a, *b);
}

nlohmann::json opt_json(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::optional<double> parse_cell(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out << text;
  if (!out) throw Error("write failed for " + file.string());
}

}  // namespace

EnergyColumns EnergyColumns::from(const EnergyReport& r) {
  return {r.frob_h.value,  r.frob_h.std_error, r.frob_ho.value, r.frob_ho.std_error,
          r.frob_hf.value, r.frob_hf.std_error, r.sub_h,         r.sub_ho,
          r.sub_hf,        r.spectrum};
}

Evaluation evaluate(const ModelSpec& spec, const ParamVector& params, const Batch& split) {
  if (split.size() == 0) throw InvalidSize("evaluate on an empty split");
  if (!params.allFinite()) throw DivergedError("evaluate with non-finite parameters");
  const Eigen::MatrixXd out = forward(spec, params, split.inputs);
  int correct = 0;
  for (int j = 0; j < split.size(); ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < out.rows(); ++c) {
      if (out(c, j) > out(best, j)) best = c;
    }
    if (best == split.labels[j]) ++correct;
  }
  Evaluation e;
  e.loss = loss(spec, params, split);
  e.accuracy = 100.0 * correct / split.size();
  return e;
}

std::vector<double> sharpness_snapshot(const DominantSubspace& pairs) {
  return {pairs.eigenvalues.data(), pairs.eigenvalues.data() + pairs.eigenvalues.size()};
}

std::vector<std::string> csv_header(int lambda_count) {
  std::vector<std::string> h = kLeadColumns;
  for (int i = 1; i <= lambda_count; ++i) h.push_back("lambda_" + std::to_string(i));
  h.insert(h.end(), kEnergyColumns.begin(), kEnergyColumns.end());
  return h;
}

std::string format_cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

nlohmann::json RunSummary::to_json() const {
  nlohmann::json j;
  j["final_train_loss"] = opt_json(final_train_loss);
  j["best_train_loss"] = opt_json(best_train_loss);
  j["final_test_loss"] = opt_json(final_test_loss);
  j["final_test_accuracy"] = opt_json(final_test_accuracy);
  j["best_test_accuracy"] = opt_json(best_test_accuracy);
  j["diverged"] = diverged;
  j["steps"] = steps;
  return j;
}

RunSummary summarize(const std::vector<RunRecord>& records) {
  RunSummary s;
  for (const RunRecord& r : records) {
    if (r.full_train_loss) s.final_train_loss = r.full_train_loss;
    if (r.test_accuracy) s.final_test_accuracy = r.test_accuracy;
    if (r.test_loss) s.final_test_loss = r.test_loss;
    s.best_train_loss = min_of(s.best_train_loss, r.full_train_loss);
    s.best_test_accuracy = max_of(s.best_test_accuracy, r.test_accuracy);
    s.diverged = s.diverged || r.diverged;
    s.steps = r.step;
  }
  return s;
}

RunSummary write_records(const std::vector<RunRecord>& records, const nlohmann::json& config,
                         const fs::path& run_dir) {
  fs::create_directories(run_dir);
  std::size_t lambda_count = 0;
  for (const RunRecord& r : records) lambda_count = std::max(lambda_count, r.lambdas.size());

  std::string csv;
  const auto header = csv_header(static_cast<int>(lambda_count));
  for (std::size_t i = 0; i < header.size(); ++i) csv += (i ? "," : "") + header[i];
  csv += '\n';
  for (const RunRecord& r : records) {
    std::vector<std::string> row = {
        std::to_string(r.step),
        format_cell(r.train_loss),
        format_cell(r.full_train_loss),
        format_cell(r.test_loss),
        format_cell(r.test_accuracy),
        format_cell(r.grad_norm),
        format_cell(r.chi_k),
        format_cell(r.ritz_residual_max),
        r.lanczos_converged ? (*r.lanczos_converged ? "1" : "0") : "",
        r.diverged ? "1" : "0"};
    for (std::size_t i = 0; i < lambda_count; ++i) {
      row.push_back(i < r.lambdas.size() ? format_cell(r.lambdas[i]) : "");
    }
    if (r.energy) {
      const EnergyColumns& e = *r.energy;
      for (double v : {e.frob_h, e.frob_h_se, e.frob_ho, e.frob_ho_se, e.frob_hf, e.frob_hf_se,
                       e.sub_h, e.sub_ho, e.sub_hf, e.spectrum}) {
        row.push_back(format_cell(v));
      }
    } else {
      row.insert(row.end(), kEnergyColumns.size(), "");
    }
    for (std::size_t i = 0; i < row.size(); ++i) csv += (i ? "," : "") + row[i];
    csv += '\n';
  }
  write_text(run_dir / "metrics.csv", csv);
  write_text(run_dir / "config.json", config.dump(2) + "\n");
  const RunSummary summary = summarize(records);
  write_text(run_dir / "summary.json", summary.to_json().dump(2) + "\n");
  return summary;
}

std::vector<RunRecord> read_records(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw Error("cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(csv.string() + ": empty file");
  const std::vector<std::string> header = split_csv(line);
  int lambda_count = 0;
  for (const auto& h : header) lambda_count += h.rfind("lambda_", 0) == 0 ? 1 : 0;
  if (header != csv_header(lambda_count)) throw Error(csv.string() + ": unexpected header");

  std::vector<RunRecord> out;
  while (std::getline(in, line)) {
    const auto c = split_csv(line);
    if (c.size() != header.size()) throw Error(csv.string() + ": ragged row");
    RunRecord r;
    r.step = std::stol(c[0]);
    r.train_loss = parse_cell(c[1]);
    r.full_train_loss = parse_cell(c[2]);
    r.test_loss = parse_cell(c[3]);
    r.test_accuracy = parse_cell(c[4]);
    r.grad_norm = parse_cell(c[5]);
    r.chi_k = parse_cell(c[6]);
    r.ritz_residual_max = parse_cell(c[7]);
    if (!c[8].empty()) r.lanczos_converged = c[8] == "1";
    r.diverged = c[9] == "1";
    std::size_t col = kLeadColumns.size();
    for (int i = 0; i < lambda_count; ++i, ++col) {
      if (!c[col].empty()) r.lambdas.push_back(std::stod(c[col]));
    }
    if (!c[col].empty()) {
      EnergyColumns e;
      double* fields[] = {&e.frob_h, &e.frob_h_se, &e.frob_ho, &e.frob_ho_se, &e.frob_hf,
                          &e.frob_hf_se, &e.sub_h, &e.sub_ho, &e.sub_hf, &e.spectrum};
      for (double* f : fields) *f = std::stod(c[col++]);
      r.energy = e;
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace curvlab
