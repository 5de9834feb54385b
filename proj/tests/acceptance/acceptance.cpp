// Acceptance run: one PASS/FAIL line per criterion. Criteria 4-8 share one
// desk-scale pipeline run kept in the work directory and resumed on rerun.
//
//   acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dtw_oracle.hpp"
#include "gradcheck.hpp"
#include "isotropy_oracle.hpp"
#include "primitive_cases.hpp"
#include "rwl/checkpoint.hpp"
#include "rwl/geometry.hpp"
#include "rwl/pipeline.hpp"
#include "tiny_experiment.hpp"

using namespace rwl;
using rewire::PairStrategy;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kGradTol = 1e-3;
constexpr std::size_t kGradCases = 100;
constexpr double kZeroGradTol = 1e-9;
constexpr double kLnKTol = 1e-9;
constexpr double kHandSetTol = 1e-10;
constexpr double kRescaleTol = 1e-9;
constexpr double kIsotropyTol = 1e-8;
constexpr std::size_t kIsotropyCases = 200;
const double kIsotropyGain = std::log(10.0);
constexpr std::size_t kSpeedupSeeds = 3;
constexpr std::size_t kDtwCases = 500;

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  std::printf("CRITERION %2d %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Tensor unit2(double theta) { return Tensor::vector({std::cos(theta), std::sin(theta)}); }

encoder::EncoderConfig tiny_encoder() {
  encoder::EncoderConfig c;
  c.n_layers = 1;
  c.feature_dim = 8;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.conv_channels = {4, 4};
  return c;
}

void gradient_correctness() {
  double worst = 0.0;
  std::size_t cases = 0;
  for (const auto& pc : testing::primitive_cases()) {
    std::mt19937_64 rng(std::hash<std::string>{}(pc.name) ^ 0xACCE);
    for (std::size_t done = 0; done < kGradCases;) {
      std::vector<Tensor> inputs;
      for (const auto& s : pc.shapes) inputs.push_back(testing::random_tensor(s, rng));
      if (std::string(pc.name) == "gelu" && testing::near_gelu_kink(inputs[0])) continue;
      worst = std::max(worst, testing::gradient_check(pc.build, inputs, rng()));
      ++done;
      ++cases;
    }
  }

  // InfoNCE of a Mixed batch through a train-mode encoder, with dropout masks
  // fixed by reseeding, against each parameter tensor in turn.
  corpus::GeneratorConfig g;
  g.max_tokens = 3;
  // The reconstruction head is not on the encode path. Key biases shift every
  // attention logit of a query equally, so their gradient is exactly zero and
  // a relative error is meaningless; they are checked for zero instead.
  std::vector<std::string> names, key_biases;
  for (const auto& [name, shape] : encoder::parameter_shapes(tiny_encoder())) {
    if (name.starts_with("recon.")) continue;
    (name.ends_with(".attn.bk") ? key_biases : names).push_back(name);
  }
  double worst_pipeline = 0.0, worst_key_bias = 0.0;
  for (std::size_t k = 0; k < kGradCases; ++k) {
    const encoder::EncoderState state = encoder::initialize(tiny_encoder(), 100 + k);
    const corpus::LabeledCorpus c = corpus::sample_corpus(6, g, 200 + k);
    rewire::RewireConfig cfg;
    Rng brng = make_rng(300 + k);
    const std::vector<std::size_t> ids{0, 1, 2};
    const rewire::ContrastiveBatch batch = rewire::build_batch(c, ids, rewire::PairStrategy::kMixed, cfg, brng);
    const auto loss_wrt = [&](const std::string& name) {
      return [&, name](Tape& t, std::span<const Var> in) {
        encoder::EncoderBinding enc(state, t, false);
        enc.set_param(name, in[0]);
        Rng drop = make_rng(400 + k);
        auto embed = [&](const rewire::Member& m) {
          return encoder::utterance_embedding(encoder::encode(enc, m.samples, encoder::Mode::kTrain, &drop, m.mask), 1);
        };
        std::vector<Var> anchors, positives;
        std::vector<std::vector<Var>> negs;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          anchors.push_back(embed(batch.anchors[i]));
          positives.push_back(embed(batch.member(batch.positives[i])));
          std::vector<Var> n;
          for (auto r : rewire::build_negatives(batch, i)) n.push_back(embed(batch.member(r)));
          negs.push_back(std::move(n));
        }
        return rewire::infonce_loss(anchors, positives, negs, cfg.temperature);
      };
    };
    const std::string& name = names[k % names.size()];
    worst_pipeline =
        std::max(worst_pipeline, testing::gradient_check(loss_wrt(name), {state.params.at(name)}, 500 + k));
    for (const std::string& kb : key_biases) {
      Tape t;
      const Var b = t.variable(state.params.at(kb));
      const Var loss = loss_wrt(kb)(t, std::span(&b, 1));
      const Gradients grads = t.backward(loss);
      for (double v : grads[b].data()) worst_key_bias = std::max(worst_key_bias, std::abs(v) / (1.0 + std::abs(loss.value().item())));
    }
  }
  verdict(1, worst <= kGradTol && worst_pipeline <= kGradTol && worst_key_bias <= kZeroGradTol,
          "gradients vs central differences: worst primitive rel err " + fmt("%.2e", worst) + " over " +
              std::to_string(cases) + " cases, InfoNCE-through-encoder " + fmt("%.2e", worst_pipeline) + " over " +
              std::to_string(kGradCases) + " cases (tol 1e-3), key-bias gradient " + fmt("%.1e", worst_key_bias) +
              " (zero within 1e-9)");
}

void infonce_exactness() {
  Tape tape;
  double uniform_err = 0.0;
  for (std::size_t k = 2; k <= 9; ++k) {
    // All candidates at the same angle from the anchor.
    std::vector<std::vector<Var>> negs(1);
    for (std::size_t j = 0; j + 1 < k; ++j) negs[0].push_back(tape.constant(unit2(j % 2 ? 0.4 : -0.4)));
    Var loss = rewire::infonce_loss(std::vector<Var>{tape.constant(unit2(0.0))},
                                    std::vector<Var>{tape.constant(unit2(0.4))}, negs, 0.04);
    uniform_err = std::max(uniform_err, std::abs(loss.value().item() - std::log(static_cast<double>(k))));
  }

  double hand_err = 0.0;
  for (double tau : {0.04, 0.1, 1.0})
    for (double cp : {0.9, 0.3, -0.2}) {
      const double cn[] = {0.1, -0.6, 0.75};
      std::vector<Var> anchors{tape.constant(unit2(0.3))}, positives{tape.constant(unit2(0.3 + std::acos(cp)))};
      std::vector<std::vector<Var>> negs(1);
      double denom = std::exp(cp / tau);
      for (double c : cn) {
        negs[0].push_back(tape.constant(unit2(0.3 - std::acos(c))));
        denom += std::exp(c / tau);
      }
      const double direct = -std::log(std::exp(cp / tau) / denom);
      hand_err = std::max(hand_err, std::abs(rewire::infonce_loss(anchors, positives, negs, tau).value().item() - direct));
    }

  Rng rng = make_rng(77);
  std::vector<Tensor> raw;
  for (int k = 0; k < 8; ++k) raw.push_back(testing::random_tensor({6}, rng));
  auto eval = [&](double s) {
    Tape t;
    std::vector<Var> v;
    for (auto& r : raw) v.push_back(scale(t.constant(r), s));
    std::vector<Var> anchors{v[0], v[1]}, positives{v[2], v[3]};
    std::vector<std::vector<Var>> negs{{v[4], v[5], v[1]}, {v[6], v[7], v[0]}};
    return rewire::infonce_loss(anchors, positives, negs, 0.04).value().item();
  };
  const double base = eval(1.0);
  double rescale_err = 0.0;
  for (double s : {1e-3, 0.5, 7.0, 1e4}) rescale_err = std::max(rescale_err, std::abs(eval(s) - base));

  verdict(2, uniform_err <= kLnKTol && hand_err <= kHandSetTol && rescale_err <= kRescaleTol,
          "uniform case |loss - ln K| " + fmt("%.1e", uniform_err) + " (tol 1e-9), hand-set cosines " +
              fmt("%.1e", hand_err) + " (tol 1e-10), rescaling " + fmt("%.1e", rescale_err) + " (tol 1e-9)");
}

void isotropy_oracle() {
  Rng rng = make_rng(2024);
  double worst = 0.0, worst_rot = 0.0;
  for (std::size_t c = 0; c < kIsotropyCases; ++c) {
    const std::size_t d = 2 + uniform_index(rng, 7);
    const std::size_t n = 2 + uniform_index(rng, 49);
    const Tensor v = testing::random_tensor({n, d}, rng, -2.0, 2.0);
    const double got = geometry::log_isotropy(v).log_is;
    worst = std::max(worst, std::abs(got - testing::oracle_log_isotropy(v)));
    const Tensor rotated = testing::matmul_plain(v, testing::random_orthogonal(d, rng));
    worst_rot = std::max(worst_rot, std::abs(got - geometry::log_isotropy(rotated).log_is));
  }
  const double sym = geometry::log_isotropy(Tensor::matrix(4, 2, {1, 0, -1, 0, 0, 1, 0, -1})).log_is;
  verdict(3, worst <= kIsotropyTol && worst_rot <= kIsotropyTol && sym == 0.0,
          "log_isotropy vs dense oracle worst " + fmt("%.1e", worst) + " over 200 matrices, rotation " +
              fmt("%.1e", worst_rot) + " (tol 1e-8), +-symmetric example " + fmt("%g", sym));
}

void dtw_oracle() {
  Rng rng = make_rng(9);
  std::size_t mismatches = 0;
  for (std::size_t c = 0; c < kDtwCases; ++c) {
    const std::size_t n = 1 + uniform_index(rng, 6), m = 1 + uniform_index(rng, 6), d = 1 + uniform_index(rng, 4);
    const Tensor a = testing::random_tensor({n, d}, rng), b = testing::random_tensor({m, d}, rng);
    Tensor costs(Shape{n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) costs.at(i, j) = probes::cosine_distance(a.row(i), b.row(j));
    if (probes::dtw_distance(a, b) != testing::dtw_brute_force(costs)) ++mismatches;
  }
  verdict(9, mismatches == 0,
          "dtw_distance == exhaustive enumeration on " + std::to_string(kDtwCases) + " cases (lengths <= 6): " +
              std::to_string(mismatches) + " mismatches");
}

struct Desk {
  pipeline::Pipeline* p;
  std::map<std::string, pipeline::Diagnostics> diag;

  pipeline::ProbeRecord record(const std::string& e, probes::TaskKind t, double f) const {
    return pipeline::read_probe_record(p->probe_path(e, t, f));
  }
};

void isotropy_gain(const Desk& d) {
  const double base = d.diag.at("baseline").log_isotropy;
  bool pass = true;
  std::string detail = "dev log_isotropy baseline " + fmt("%.3f", base);
  for (PairStrategy s : rewire::kAllStrategies) {
    const std::string name(rewire::to_string(s));
    const double gain = d.diag.at(name).log_isotropy - base;
    pass = pass && gain >= kIsotropyGain;
    detail += ", " + name + " +" + fmt("%.3f", gain);
  }
  verdict(4, pass, detail + " (need >= ln 10 = 2.303 each)");
}

void invariance(const Desk& d) {
  const auto& b = d.diag.at("baseline");
  const auto& t = d.diag.at("twin");
  const auto& n = d.diag.at("neutral");
  const bool twin_ok = t.twin_cosine > b.twin_cosine;
  const bool neutral_ok = n.neutral_cosine > b.neutral_cosine;
  const bool sil_ok = n.silhouette > b.silhouette;
  verdict(5, twin_ok && neutral_ok && sil_ok,
          "cos(s, masked s) " + fmt("%.6f", b.twin_cosine) + " -> " + fmt("%.6f", t.twin_cosine) +
              (twin_ok ? " up" : " NOT up") + "; cos(s, neutral s) " + fmt("%.6f", b.neutral_cosine) + " -> " +
              fmt("%.6f", n.neutral_cosine) + (neutral_ok ? " up" : " NOT up") + "; content silhouette " +
              fmt("%.4f", b.silhouette) + " -> " + fmt("%.4f", n.silhouette) + (sil_ok ? " up" : " NOT up"));
}

void convergence_speedup(Desk& d) {
  constexpr double kFraction = 0.05;
  const auto task = probes::TaskKind::kContentCls;
  const experiment::ExperimentConfig& cfg = d.p->config();
  const corpus::LabeledCorpus& c = d.p->corpus();
  const corpus::LabeledCorpus sub = corpus::subsample_training(c, kFraction, cfg.subsample_seed());
  const probes::TaskSpec spec = probes::TaskSpec::make(task, c.config);

  struct Sets {
    probes::FeatureSet train, dev, test;
  };
  auto sets = [&](const std::string& name) {
    const encoder::EncoderState s = d.p->load_encoder(name);
    std::vector<std::size_t> used = sub.train;
    used.insert(used.end(), sub.dev.begin(), sub.dev.end());
    used.insert(used.end(), sub.test.begin(), sub.test.end());
    const probes::ActivationCache cache = probes::encode_corpus(s, c, used);
    return Sets{probes::extract_features(cache, s.config, sub, sub.train, spec),
                probes::extract_features(cache, s.config, sub, sub.dev, spec),
                probes::extract_features(cache, s.config, sub, sub.test, spec)};
  };
  const Sets base = sets("baseline"), mixed = sets("mixed");

  std::size_t passed = 0;
  std::string detail;
  for (std::size_t k = 0; k < kSpeedupSeeds; ++k) {
    probes::ProbeConfig pc = cfg.probe_config(task, kFraction);
    if (k > 0) pc.seed = mix_seed(cfg.probe_seed(), k);
    const probes::TrainRecord rb = probes::fit_probe(base.train, base.dev, base.test, pc).record;
    const probes::TrainRecord rm = probes::fit_probe(mixed.train, mixed.dev, mixed.test, pc).record;
    const auto reach = probes::first_step_reaching(rm, rb.best_dev);
    const bool ok = reach && 2 * *reach <= rb.steps_to_best;
    passed += ok;
    detail += (k ? "; " : "") + std::string("seed ") + std::to_string(k + 1) + ": baseline best " +
              fmt("%.3f", rb.best_dev) + " at " + std::to_string(rb.steps_to_best) + ", mixed reaches it at " +
              (reach ? std::to_string(*reach) : std::string("never")) + (ok ? " ok" : " no");
  }
  verdict(6, 2 * passed > kSpeedupSeeds,
          "content_cls 5%: " + detail + " (" + std::to_string(passed) + "/3 seeds, majority needed)");
}

void low_resource(const Desk& d) {
  bool pass = true;
  std::string detail;
  for (probes::TaskKind t : {probes::TaskKind::kContentCls, probes::TaskKind::kIntentCls, probes::TaskKind::kFrameLabeling}) {
    const double base = d.record("baseline", t, 0.01).test_metric;
    double best = -1.0;
    std::string who;
    for (PairStrategy s : rewire::kAllStrategies) {
      const double v = d.record(std::string(rewire::to_string(s)), t, 0.01).test_metric;
      if (v > best) {
        best = v;
        who = std::string(rewire::to_string(s));
      }
    }
    pass = pass && best > base;
    detail += (detail.empty() ? "" : "; ") + std::string(probes::to_string(t)) + " baseline " + fmt("%.4f", base) +
              ", best " + who + " " + fmt("%.4f", best);
  }
  verdict(7, pass, "1% fraction test metric: " + detail);
}

void qbe(const Desk& d) {
  const double base = d.record("baseline", probes::TaskKind::kQbe, 1.0).test_metric;
  const double mixed = d.record("mixed", probes::TaskKind::kQbe, 1.0).test_metric;
  verdict(8, mixed > base, "precision@5 baseline " + fmt("%.4f", base) + ", mixed " + fmt("%.4f", mixed));
}

void determinism_and_persistence(const fs::path& work, const pipeline::Pipeline& desk) {
  const experiment::ExperimentConfig tiny = testing::tiny_experiment();
  std::string csv[2], iso[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path out = work / ("determinism_" + std::to_string(run));
    fs::remove_all(out);
    pipeline::Pipeline(tiny, {out, false, nullptr}).run_all();
    csv[run] = slurp(out / "report" / "summary.csv");
    iso[run] = slurp(out / "report" / "isotropy.csv");
  }
  const bool same = !csv[0].empty() && csv[0] == csv[1] && iso[0] == iso[1];

  const std::string bytes = slurp(desk.checkpoint_path("mixed"));
  const checkpoint::Checkpoint ck = checkpoint::deserialize(bytes);
  const bool round_trip = checkpoint::serialize(ck.state, ck.source_hash) == bytes;

  auto rejected = [](std::string b, std::string_view expected) {
    try {
      checkpoint::deserialize(b);
    } catch (const checkpoint::CheckpointError& e) {
      return std::string(e.what()).starts_with(expected);
    }
    return false;
  };
  std::string bad_magic = bytes, bad_version = bytes;
  bad_magic.replace(0, 4, "XXXX");
  bad_version[4] = 2;
  const bool rejects = rejected(bad_magic, "not a checkpoint") && rejected(bad_version, "unsupported version") &&
                       rejected(bytes.substr(0, bytes.size() / 2), "corrupt checkpoint") &&
                       rejected(bytes.substr(0, bytes.size() - 1), "corrupt checkpoint");
  verdict(10, same && round_trip && rejects,
          std::string("two clean reduced-config runs: summary/isotropy CSVs ") + (same ? "byte-identical" : "DIFFER") +
              "; desk checkpoint round-trip " + (round_trip ? "bit-exact" : "NOT exact") + "; corrupt/version checks " +
              (rejects ? "rejected as specified" : "NOT rejected as specified"));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    gradient_correctness();
    infonce_exactness();
    isotropy_oracle();

    std::printf("desk pipeline in %s\n", (work / "desk").string().c_str());
    std::fflush(stdout);
    pipeline::Pipeline desk(experiment::ExperimentConfig{}, {work / "desk", true, &std::cerr});
    desk.run_all();
    Desk d{&desk, {}};
    for (const std::string& e : pipeline::encoder_names())
      d.diag.emplace(e, pipeline::read_diagnostics(desk.diagnostics_path(e)));

    isotropy_gain(d);
    invariance(d);
    convergence_speedup(d);
    low_resource(d);
    qbe(d);
    dtw_oracle();
    determinism_and_persistence(work, desk);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed, %.0f s\n", failures,
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return failures == 0 ? 0 : 1;
}
