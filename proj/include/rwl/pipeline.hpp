#pragma once

// End-to-end experiment over one output directory:
//
//   config.ini                     canonical config the directory belongs to
//   corpus/                        manifest + raw samples
//   checkpoints/<encoder>.rwl      baseline, twin, neutral, mixed
//   logs/<stage>.jsonl             per-step training losses
//   probes/<encoder>/<task>_<fraction>/record.json
//   probes/<encoder>/qbe/record.json
//   diagnostics/<encoder>.json     geometry of dev-set embeddings
//   report/                        summary.csv, isotropy.csv, projection SVGs
//
// Every artifact is written to a temporary name and renamed into place, so an
// existing artifact is complete. Without `resume`, a stage whose artifact
// already exists fails instead of overwriting it; with `resume` it is skipped.
// The report is derived data and is rebuilt on every run.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rwl/corpus.hpp"
#include "rwl/encoder.hpp"
#include "rwl/experiment.hpp"
#include "rwl/probes.hpp"
#include "rwl/rewire.hpp"

namespace rwl::pipeline {

// "baseline", "twin", "neutral", "mixed".
const std::vector<std::string>& encoder_names();

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct Options {
  std::filesystem::path out;
  bool resume = false;
  std::ostream* progress = nullptr;  // human-readable stage log, if set
};

struct ProbeRecord {
  std::string encoder;
  std::string task;
  std::string fraction;  // fraction_label, or "zero_shot" for QbE
  std::string metric;
  double test_metric = 0.0;
  std::optional<double> best_dev;
  std::optional<std::size_t> steps_to_best;
  std::optional<std::size_t> budget;
  std::vector<std::pair<std::size_t, double>> curve;
};

struct SummaryRow {
  std::string task, fraction, strategy, metric;
  std::optional<ProbeRecord> record;  // unset rows are reported as absent
};

// Header: task,fraction,strategy,metric,value,best_dev,steps_to_best,status.
// Values use 4 significant digits; steps_to_best is printed exactly.
std::string summary_csv(const std::vector<SummaryRow>& rows);

struct Diagnostics {
  std::string encoder;
  std::size_t level = 0;
  double log_isotropy = 0.0;
  double silhouette = 0.0;
  double mean_cosine = 0.0;
  double twin_cosine = 0.0;
  double neutral_cosine = 0.0;
  // Fraction label -> probe training subset; empty below two rows.
  std::vector<std::pair<std::string, std::optional<double>>> train_log_isotropy;
  std::vector<double> spectrum;
  Tensor projection;                                 // [n x 2]
  std::vector<std::pair<std::string, std::vector<int>>> labels;  // task -> per-row labels
};

// Header: strategy,log_isotropy,silhouette,mean_cosine,twin_cosine,neutral_cosine.
std::string isotropy_csv(const std::vector<Diagnostics>& rows);
// Header: strategy,set,log_isotropy. One dev row, then one row per probe training fraction.
std::string isotropy_by_set_csv(const std::vector<Diagnostics>& rows);

ProbeRecord read_probe_record(const std::filesystem::path& path);
Diagnostics read_diagnostics(const std::filesystem::path& path);

class Pipeline {
 public:
  // Binds the directory to the config: writes config.ini, or fails if the
  // directory already holds a different one.
  Pipeline(experiment::ExperimentConfig config, Options options);

  const experiment::ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return options_.out; }

  void generate();
  void pretrain();
  void rewire(rewire::PairStrategy strategy);
  // One (task, fraction) cell for the given encoders (all when empty). QbE
  // ignores the fraction.
  void probe(probes::TaskKind task, double fraction, const std::vector<std::string>& encoders = {});
  void probe_all();
  void diagnose();
  void report();
  void run_all();

  std::filesystem::path checkpoint_path(std::string_view encoder) const;
  std::filesystem::path probe_path(std::string_view encoder, probes::TaskKind task, double fraction) const;
  std::filesystem::path diagnostics_path(std::string_view encoder) const;
  std::filesystem::path report_dir() const { return options_.out / "report"; }

  const corpus::LabeledCorpus& corpus();
  encoder::EncoderState load_encoder(std::string_view encoder) const;

 private:
  // True when the stage should produce `artifact`.
  bool needs(std::string_view stage, const std::filesystem::path& artifact) const;
  void require(std::string_view stage, const std::filesystem::path& artifact, std::string_view producer) const;
  void note(std::string_view stage, const std::string& message) const;
  void run_probe_jobs(std::string_view encoder, const std::vector<std::pair<probes::TaskKind, double>>& jobs);

  experiment::ExperimentConfig config_;
  Options options_;
  std::optional<corpus::LabeledCorpus> corpus_;
};

}  // namespace rwl::pipeline
