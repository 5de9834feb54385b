#include "rwl/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "rwl/checkpoint.hpp"
#include "rwl/geometry.hpp"

namespace rwl::pipeline {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using probes::TaskKind;
using rewire::PairStrategy;

constexpr std::string_view kBaseline = "baseline";
constexpr std::string_view kZeroShot = "zero_shot";
constexpr TaskKind kProjectionTasks[] = {TaskKind::kContentCls, TaskKind::kIntentCls, TaskKind::kSpeakerCls};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string sig4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string metric_name(probes::Metric m, std::size_t k) {
  switch (m) {
    case probes::Metric::kAccuracy: return "accuracy";
    case probes::Metric::kFrameF1: return "frame_f1";
    case probes::Metric::kPrecisionAtK: return "precision_at_" + std::to_string(k);
  }
  return "";
}

std::string task_name(TaskKind t) { return std::string(probes::to_string(t)); }

std::vector<int> utterance_labels(const corpus::LabeledCorpus& c, std::span<const std::size_t> idx, TaskKind t) {
  std::vector<int> out;
  for (std::size_t i : idx) {
    const corpus::UtteranceSpec& s = c.utterances[i].spec;
    switch (t) {
      case TaskKind::kContentCls: out.push_back(corpus::content_class(s)); break;
      case TaskKind::kIntentCls: out.push_back(corpus::intent_label(s, c.config.intent_classes)); break;
      case TaskKind::kSpeakerCls: out.push_back(corpus::speaker_label(s)); break;
      default: throw std::invalid_argument("utterance_labels: not an utterance-level task");
    }
  }
  return out;
}

json record_json(const ProbeRecord& r) {
  json j{{"encoder", r.encoder}, {"task", r.task},          {"fraction", r.fraction},
         {"metric", r.metric},   {"test_metric", r.test_metric}};
  if (r.best_dev) j["best_dev"] = *r.best_dev;
  if (r.steps_to_best) j["steps_to_best"] = *r.steps_to_best;
  if (r.budget) j["budget"] = *r.budget;
  json curve = json::array();
  for (const auto& [step, v] : r.curve) curve.push_back(json::array({step, v}));
  j["curve"] = curve;
  return j;
}

// Runs a stage body, tagging every failure with the stage name.
template <class F>
void run_stage(const std::string& stage, F&& body) {
  try {
    body();
  } catch (const StageError& e) {
    if (e.stage() == stage) throw;
    throw StageError(stage, e.what());
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace

const std::vector<std::string>& encoder_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n{std::string(kBaseline)};
    for (PairStrategy s : rewire::kAllStrategies) n.emplace_back(rewire::to_string(s));
    return n;
  }();
  return names;
}

StageError::StageError(std::string stage, const std::string& message)
    : std::runtime_error(stage + ": " + message), stage_(std::move(stage)) {}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "task,fraction,strategy,metric,value,best_dev,steps_to_best,status\n";
  for (const SummaryRow& row : rows) {
    out += row.task + "," + row.fraction + "," + row.strategy + "," + row.metric + ",";
    if (!row.record) {
      out += ",,,absent\n";
      continue;
    }
    const ProbeRecord& r = *row.record;
    out += sig4(r.test_metric) + ",";
    out += (r.best_dev ? sig4(*r.best_dev) : "") + ",";
    out += (r.steps_to_best ? std::to_string(*r.steps_to_best) : "") + ",ok\n";
  }
  return out;
}

std::string isotropy_csv(const std::vector<Diagnostics>& rows) {
  std::string out = "strategy,log_isotropy,silhouette,mean_cosine,twin_cosine,neutral_cosine\n";
  for (const Diagnostics& d : rows)
    out += d.encoder + "," + sig4(d.log_isotropy) + "," + sig4(d.silhouette) + "," + sig4(d.mean_cosine) + "," +
           sig4(d.twin_cosine) + "," + sig4(d.neutral_cosine) + "\n";
  return out;
}

std::string isotropy_by_set_csv(const std::vector<Diagnostics>& rows) {
  std::string out = "strategy,set,log_isotropy\n";
  for (const Diagnostics& d : rows) {
    out += d.encoder + ",dev," + sig4(d.log_isotropy) + "\n";
    for (const auto& [label, value] : d.train_log_isotropy) 
      out += d.encoder + ",train_" + label + "," + (value ? sig4(*value) : "") + "\n";
  }
  return out;
}

ProbeRecord read_probe_record(const fs::path& path) {
  const json j = json::parse(read_file(path));
  ProbeRecord r;
  r.encoder = j.at("encoder").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.fraction = j.at("fraction").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.test_metric = j.at("test_metric").get<double>();
  if (j.contains("best_dev")) r.best_dev = j["best_dev"].get<double>();
  if (j.contains("steps_to_best")) r.steps_to_best = j["steps_to_best"].get<std::size_t>();
  if (j.contains("budget")) r.budget = j["budget"].get<std::size_t>();
  for (const json& p : j.at("curve")) r.curve.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<double>());
  return r;
}

Diagnostics read_diagnostics(const fs::path& path) {
  const json j = json::parse(read_file(path));
  Diagnostics d;
  d.encoder = j.at("encoder").get<std::string>();
  d.level = j.at("level").get<std::size_t>();
  d.log_isotropy = j.at("log_isotropy").get<double>();
  d.silhouette = j.at("silhouette").get<double>();
  d.mean_cosine = j.at("mean_cosine").get<double>();
  d.twin_cosine = j.at("twin_cosine").get<double>();
  d.neutral_cosine = j.at("neutral_cosine").get<double>();
  for (const json& p : j.at("train_log_isotropy"))
    d.train_log_isotropy.emplace_back(p.at(0).get<std::string>(),
                                      p.at(1).is_null() ? std::nullopt : std::optional(p.at(1).get<double>()));
  d.spectrum = j.at("spectrum").get<std::vector<double>>();
  const auto xy = j.at("projection").get<std::vector<double>>();
  d.projection = Tensor(Shape{xy.size() / 2, 2}, xy);
  for (const auto& [task, labels] : j.at("labels").items()) d.labels.emplace_back(task, labels.get<std::vector<int>>());
  return d;
}

Pipeline::Pipeline(experiment::ExperimentConfig config, Options options)
    : config_(std::move(config)), options_(std::move(options)) {
  try {
    config_.validate();
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
  const fs::path bound = options_.out / "config.ini";
  const std::string text = experiment::to_ini(config_);
  if (fs::exists(bound)) {
    if (read_file(bound) != text)
      throw StageError("config", "output directory " + options_.out.string() + " holds a different config.ini");
  } else {
    write_file(bound, text);
  }
}

fs::path Pipeline::checkpoint_path(std::string_view encoder) const {
  return options_.out / "checkpoints" / (std::string(encoder) + ".rwl");
}

fs::path Pipeline::probe_path(std::string_view encoder, TaskKind task, double fraction) const {
  const std::string cell =
      task == TaskKind::kQbe ? task_name(task) : task_name(task) + "_" + experiment::fraction_label(fraction);
  return options_.out / "probes" / std::string(encoder) / cell / "record.json";
}

fs::path Pipeline::diagnostics_path(std::string_view encoder) const {
  return options_.out / "diagnostics" / (std::string(encoder) + ".json");
}

bool Pipeline::needs(std::string_view stage, const fs::path& artifact) const {
  if (!fs::exists(artifact)) return true;
  if (options_.resume) {
    note(stage, "exists, skipping " + artifact.string());
    return false;
  }
  throw StageError(std::string(stage), "artifact " + artifact.string() + " already exists (pass --resume to reuse it)");
}

void Pipeline::require(std::string_view stage, const fs::path& artifact, std::string_view producer) const {
  if (!fs::exists(artifact))
    throw StageError(std::string(stage), "missing " + artifact.string() + "; run '" + std::string(producer) + "' first");
}

void Pipeline::note(std::string_view stage, const std::string& message) const {
  if (options_.progress) *options_.progress << "[" << stage << "] " << message << std::endl;
}

const corpus::LabeledCorpus& Pipeline::corpus() {
  if (!corpus_) {
    require("corpus", options_.out / "corpus", "generate");
    corpus_ = corpus::load_corpus(options_.out / "corpus");
  }
  return *corpus_;
}

encoder::EncoderState Pipeline::load_encoder(std::string_view encoder) const {
  const fs::path path = checkpoint_path(encoder);
  require("load", path, encoder == kBaseline ? "pretrain" : "rewire --strategy " + std::string(encoder));
  checkpoint::Checkpoint ck = checkpoint::load_checkpoint(path);
  if (ck.source_hash != experiment::config_hash(config_))
    throw StageError("load", path.string() + " was produced under a different config");
  return std::move(ck.state);
}

void Pipeline::generate() {
  const fs::path dir = options_.out / "corpus";
  if (!needs("generate", dir)) return;
  run_stage(std::string("generate"), [&] {
    corpus::LabeledCorpus c = corpus::sample_corpus(config_.utterances, config_.corpus, config_.corpus_seed());
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    corpus::save_corpus(c, tmp);
    fs::rename(tmp, dir);
    note("generate", std::to_string(c.utterances.size()) + " utterances");
    corpus_ = std::move(c);
  });
}

void Pipeline::pretrain() {
  const fs::path ck = checkpoint_path(kBaseline);
  if (!needs("pretrain", ck)) return;
  run_stage(std::string("pretrain"), [&] {
    const encoder::EncoderState init = encoder::initialize(config_.encoder, config_.init_seed());
    encoder::PretrainResult r = encoder::pretrain_base(init, corpus(), config_.pretrain_config());
    std::string log;
    for (std::size_t i = 0; i < r.losses.size(); ++i)
      log += json{{"step", i + 1}, {"loss", r.losses[i]}}.dump() + "\n";
    write_file(options_.out / "logs" / "pretrain.jsonl", log);
    checkpoint::save_checkpoint(r.state, ck, experiment::config_hash(config_));
    note("pretrain", "final loss " + sig4(r.losses.empty() ? 0.0 : r.losses.back()));
  });
}

void Pipeline::rewire(PairStrategy strategy) {
  const std::string name(rewire::to_string(strategy));
  const std::string stage = "rewire " + name;
  const fs::path ck = checkpoint_path(name);
  if (!needs(stage, ck)) return;
  run_stage(stage, [&] {
    const encoder::EncoderState base = load_encoder(kBaseline);
    const rewire::RewireConfig rc = config_.rewire_config(strategy);
    std::size_t seen = 0;
    rewire::RewireResult r = rewire::rewire(base, corpus(), strategy, rc, [&](const rewire::LogEntry& e) {
      if (++seen % 100 == 0) note(stage, "step " + std::to_string(e.step + 1) + " loss " + sig4(e.loss));
    });
    std::string log;
    for (const rewire::LogEntry& e : r.log) log += json{{"step", e.step + 1}, {"loss", e.loss}}.dump() + "\n";
    write_file(options_.out / "logs" / ("rewire_" + name + ".jsonl"), log);
    checkpoint::save_checkpoint(r.state, ck, experiment::config_hash(config_));
  });
}

void Pipeline::run_probe_jobs(std::string_view encoder, const std::vector<std::pair<TaskKind, double>>& jobs) {
  const std::string stage = "probe " + std::string(encoder);
  std::vector<std::pair<TaskKind, double>> todo;
  for (const auto& job : jobs)
    if (needs(stage, probe_path(encoder, job.first, job.second))) todo.push_back(job);
  if (todo.empty()) return;
  run_stage(stage, [&] {
    const corpus::LabeledCorpus& c = corpus();
    const encoder::EncoderState state = load_encoder(encoder);
    std::vector<std::size_t> all(c.utterances.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const probes::ActivationCache cache = probes::encode_corpus(state, c, all);
    for (const auto& [task, fraction] : todo) {
      const probes::TaskSpec spec = probes::TaskSpec::make(task, c.config);
      ProbeRecord rec;
      rec.encoder = std::string(encoder);
      rec.task = task_name(task);
      rec.metric = metric_name(spec.metric, config_.qbe_k);
      if (task == TaskKind::kQbe) {
        rec.fraction = std::string(kZeroShot);
        rec.test_metric = probes::qbe_precision(cache, c, config_.qbe_k);
      } else {
        rec.fraction = experiment::fraction_label(fraction);
        const corpus::LabeledCorpus sub = corpus::subsample_training(c, fraction, config_.subsample_seed());
        const probes::ProbeConfig pc = config_.probe_config(task, fraction);
        const probes::ProbeResult r = probes::fit_probe(probes::extract_features(cache, state.config, sub, sub.train, spec),
                                                        probes::extract_features(cache, state.config, sub, sub.dev, spec),
                                                        probes::extract_features(cache, state.config, sub, sub.test, spec), pc);
        rec.test_metric = r.record.test_at_best;
        rec.best_dev = r.record.best_dev;
        rec.steps_to_best = r.record.steps_to_best;
        rec.budget = pc.budget;
        rec.curve = r.record.curve;
      }
      write_file(probe_path(encoder, task, fraction), record_json(rec).dump(1) + "\n");
      note(stage, rec.task + " " + rec.fraction + " " + rec.metric + " " + sig4(rec.test_metric) +
                      (rec.steps_to_best ? " steps_to_best " + std::to_string(*rec.steps_to_best) : ""));
    }
  });
}

void Pipeline::probe(TaskKind task, double fraction, const std::vector<std::string>& encoders) {
  const std::vector<std::string>& names = encoders.empty() ? encoder_names() : encoders;
  for (const std::string& e : names) run_probe_jobs(e, {{task, fraction}});
}

void Pipeline::probe_all() {
  std::vector<std::pair<TaskKind, double>> jobs;
  for (TaskKind t : probes::kTrainableTasks)
    for (double f : experiment::kFractions) jobs.emplace_back(t, f);
  jobs.emplace_back(TaskKind::kQbe, 1.0);
  for (const std::string& e : encoder_names()) run_probe_jobs(e, jobs);
}

void Pipeline::diagnose() {
  // Probe training subsets, drawn exactly as the probe stage draws them.
  std::optional<std::vector<std::pair<std::string, std::vector<std::size_t>>>> subsets;
  for (const std::string& name : encoder_names()) {
    const std::string stage = "diagnose " + name;
    const fs::path path = diagnostics_path(name);
    if (!needs(stage, path)) continue;
    run_stage(stage, [&] {
      const corpus::LabeledCorpus& c = corpus();
      const encoder::EncoderState state = load_encoder(name);
      const std::size_t level = config_.diagnostic_level();
      const std::size_t d = state.config.feature_dim;
      const auto embed = [&](const std::vector<std::size_t>& indices) {
        Tensor v(Shape{indices.size(), d});
        for (std::size_t r = 0; r < indices.size(); ++r) {
          const Tensor e =
              encoder::utterance_embedding(encoder::encode_eval(state, c.utterances[indices[r]].wave.samples), level);
          std::copy(e.data().begin(), e.data().end(), v.ptr() + r * d);
        }
        return v;
      };
      const Tensor v = embed(c.dev);

      if (!subsets) {
        subsets.emplace();
        for (double f : experiment::kFractions)
          subsets->emplace_back(experiment::fraction_label(f),
                                corpus::subsample_training(c, f, config_.subsample_seed()).train);
      }
      const Tensor train = embed(c.train);
      std::map<std::size_t, std::size_t> train_row;
      for (std::size_t r = 0; r < c.train.size(); ++r) train_row[c.train[r]] = r;
      json train_iso = json::array();
      for (const auto& [label, indices] : *subsets) {
        if (indices.size() < 2) {
          train_iso.push_back({label, nullptr});
          continue;
        }
        Tensor rows(Shape{indices.size(), d});
        for (std::size_t r = 0; r < indices.size(); ++r)
          std::copy_n(train.ptr() + train_row.at(indices[r]) * d, d, rows.ptr() + r * d);
        train_iso.push_back({label, geometry::log_isotropy(rows).log_is});
      }
      const std::vector<int> content = utterance_labels(c, c.dev, TaskKind::kContentCls);

      // Silhouette is undefined for singleton classes; those rows are left out.
      std::map<int, std::size_t> counts;
      for (int l : content) ++counts[l];
      std::vector<double> kept;
      std::vector<int> kept_labels;
      for (std::size_t r = 0; r < content.size(); ++r) {
        if (counts[content[r]] < 2) continue;
        kept.insert(kept.end(), v.ptr() + r * d, v.ptr() + (r + 1) * d);
        kept_labels.push_back(content[r]);
      }

      const geometry::IsotropyReport iso = geometry::log_isotropy(v);
      rewire::RewireConfig pair_config = config_.rewire_config(PairStrategy::kTwin);
      pair_config.pooling_level = level;
      const geometry::Projection proj = geometry::project2d(v);
      json labels = json::object();
      for (TaskKind t : kProjectionTasks) labels[task_name(t)] = utterance_labels(c, c.dev, t);
      const json j{
          {"encoder", name},
          {"level", level},
          {"log_isotropy", iso.log_is},
          {"train_log_isotropy", train_iso},
          {"silhouette", geometry::cluster_separation(Tensor(Shape{kept_labels.size(), d}, kept), kept_labels)},
          {"mean_cosine", geometry::cosine_stats(v).mean},
          {"twin_cosine", rewire::mean_pair_cosine(state, c, c.dev, rewire::PositiveKind::kTwin, pair_config,
                                                   config_.diagnostic_seed())},
          {"neutral_cosine", rewire::mean_pair_cosine(state, c, c.dev, rewire::PositiveKind::kNeutral, pair_config,
                                                      config_.diagnostic_seed())},
          {"spectrum", iso.eigen_spectrum},
          {"variance_share", proj.variance_share},
          {"projection", std::vector<double>(proj.coords.data().begin(), proj.coords.data().end())},
          {"labels", labels}};
      write_file(path, j.dump(1) + "\n");
      note(stage, "log_isotropy " + sig4(iso.log_is));
    });
  }
}

void Pipeline::report() {
  run_stage(std::string("report"), [&] {
    std::vector<SummaryRow> rows;
    for (TaskKind t : probes::kTrainableTasks) {
      const std::string metric = metric_name(probes::TaskSpec::make(t, config_.corpus).metric, config_.qbe_k);
      for (double f : experiment::kFractions)
        for (const std::string& e : encoder_names()) {
          SummaryRow row{task_name(t), experiment::fraction_label(f), e, metric, std::nullopt};
          if (const fs::path p = probe_path(e, t, f); fs::exists(p)) row.record = read_probe_record(p);
          rows.push_back(std::move(row));
        }
    }
    for (const std::string& e : encoder_names()) {
      SummaryRow row{task_name(TaskKind::kQbe), std::string(kZeroShot), e,
                     metric_name(probes::Metric::kPrecisionAtK, config_.qbe_k), std::nullopt};
      if (const fs::path p = probe_path(e, TaskKind::kQbe, 1.0); fs::exists(p)) row.record = read_probe_record(p);
      rows.push_back(std::move(row));
    }

    const fs::path dir = report_dir();
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    write_file(tmp / "summary.csv", summary_csv(rows));

    std::vector<Diagnostics> diags;
    for (const std::string& e : encoder_names())
      if (const fs::path p = diagnostics_path(e); fs::exists(p)) diags.push_back(read_diagnostics(p));
    write_file(tmp / "isotropy.csv", isotropy_csv(diags));
    write_file(tmp / "isotropy_by_set.csv", isotropy_by_set_csv(diags));
    for (const Diagnostics& d : diags)
      for (const auto& [task, labels] : d.labels)
        geometry::write_projection_svg(tmp / ("projection_" + d.encoder + "_" + task + ".svg"), d.projection, labels,
                                       d.encoder + " / " + task);
    fs::remove_all(dir);
    fs::rename(tmp, dir);
    note("report", "wrote " + dir.string());
  });
}

void Pipeline::run_all() {
  generate();
  pretrain();
  for (PairStrategy s : rewire::kAllStrategies) rewire(s);
  probe_all();
  diagnose();
  report();
}

}  // namespace rwl::pipeline
