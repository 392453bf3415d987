#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "gradcheck.hpp"
#include "purify/binio.hpp"
#include "purify/error.hpp"
#include "purify/eval.hpp"
#include "purify/tfa.hpp"
#include "test_support.hpp"

using namespace purify;
namespace fs = std::filesystem;

namespace {

TfaConfig small_tfa() {
  TfaConfig t;
  t.n_scales = 32;
  return t;
}

SyntheticConfig small_synth(int per_class, std::uint64_t seed) {
  SyntheticConfig s;
  s.per_class = per_class;
  s.length = 2000;
  s.seed = seed;
  return s;
}

std::vector<LabeledGrid> grids(const std::vector<LabeledWave>& w, const TfaConfig& tfa, Eigen::Index S) {
  std::vector<LabeledGrid> out;
  for (const auto& it : w) out.push_back({analysis_grid(it.wave, tfa, S).values, it.label});
  return out;
}

ProbeConfig small_probe() {
  ProbeConfig p;
  p.resolution = 16;
  p.seed = 3;
  return p;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("purify_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("tokenize") {
  CHECK(tokenize("Hello, World!  foo") == std::vector<std::string>{"hello", "world", "foo"});
  CHECK(tokenize("  -- ... ").empty());
  CHECK(tokenize("don't stop.") == std::vector<std::string>{"don't", "stop"});
  CHECK(tokenize("").empty());
}

TEST_CASE("wer hand values") {
  CHECK(wer(TranscriptPair::from_text("the cat sat", "the cat sat")) == 0.0);
  CHECK(wer(TranscriptPair::from_text("the cat sat", "the cat")) == doctest::Approx(100.0 / 3.0).epsilon(1e-12));
  CHECK(wer(TranscriptPair::from_text("a b", "x y z")) == 150.0);
  const EditCounts e = align_words(tokenize("a b"), tokenize("x y z"));
  CHECK(e.substitutions == 2);
  CHECK(e.insertions == 1);
  CHECK(e.deletions == 0);
  CHECK_THROWS_AS(wer(TranscriptPair::from_text("", "a")), Error);
  CHECK(wer(TranscriptPair::from_text("a", "")) == 100.0);
}

TEST_CASE("wer tie order prefers substitution, then insertion") {
  // "a" -> "b c": one substitution plus one insertion either way round.
  const EditCounts e = align_words({"a"}, {"b", "c"});
  CHECK(e.substitutions == 1);
  CHECK(e.insertions == 1);
  CHECK(e.deletions == 0);
  const EditCounts f = align_words({"a", "b"}, {"c"});
  CHECK(f.substitutions == 1);
  CHECK(f.deletions == 1);
}

TEST_CASE("wer equals the exhaustive alignment oracle on short sequences") {
  const auto seqs = test::all_sequences({"a", "b", "c"}, 4);
  long checked = 0;
  for (const auto& r : seqs) {
    if (r.empty()) continue;
    for (const auto& h : seqs) {
      const int oracle = test::exhaustive_edits(r, h);
      const EditCounts e = align_words(r, h);
      REQUIRE(e.total() == oracle);
      REQUIRE(e.reference_words == static_cast<int>(r.size()));
      REQUIRE(e.substitutions + e.deletions + (static_cast<int>(h.size()) - e.insertions - e.substitutions) ==
              static_cast<int>(r.size()));
      ++checked;
    }
  }
  CHECK(checked == 120 * 121);
}

TEST_CASE("sla") {
  std::vector<TranscriptPair> p{TranscriptPair::from_text("a b", "a b"), TranscriptPair::from_text("c", "c"),
                                TranscriptPair::from_text("d", "e"), TranscriptPair::from_text("f g", "F, g")};
  CHECK(sla(p) == 75.0);
  std::reverse(p.begin(), p.end());
  CHECK(sla(p) == 75.0);
  CHECK(sla({p[0]}) == 100.0);
  CHECK(sla({TranscriptPair::from_text("x", "y")}) == 0.0);
  CHECK_THROWS_AS(sla({}), Error);
}

TEST_CASE("synthetic audio") {
  const SyntheticConfig cfg = small_synth(3, 4);
  const auto a = make_synthetic(cfg);
  const auto b = make_synthetic(cfg);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].label == static_cast<int>(i / 3));
    CHECK(a[i].wave.size() == 2000);
    CHECK(a[i].wave.samples.cwiseAbs().maxCoeff() <= 1.0);
    CHECK(a[i].wave.samples == b[i].wave.samples);
  }
  const auto f0 = synthetic_band_frequencies(cfg, 0);
  const auto f1 = synthetic_band_frequencies(cfg, 1);
  REQUIRE(f0.size() == 3);
  CHECK(f0.front() == doctest::Approx(150.0));
  CHECK(f1.back() == doctest::Approx(6000.0));
  for (double x : f0)
    for (double y : f1) CHECK(std::abs(std::log(x / y)) > 0.3);

  // The strongest periodogram bin of each item lies near one of its class's
  // tones (jitter is +-3%, bins are 31.25 Hz wide).
  for (const auto& it : a) {
    const Eigen::MatrixXd p = psd(it.wave, 512, 256);
    Eigen::Index bin = 0;
    p.colwise().sum().maxCoeff(&bin);
    const double hz = static_cast<double>(bin) * kSampleRate / 512.0;
    double best = 1e9;
    for (double f : synthetic_band_frequencies(cfg, it.label)) best = std::min(best, std::abs(hz - f) / f);
    CHECK(best < 0.1);
  }
  SyntheticConfig bad = cfg;
  bad.freq_hi = 9000.0;
  CHECK_THROWS_AS(make_synthetic(bad), Error);
}

TEST_CASE("probe gradients match finite differences") {
  ProbeClassifier p(small_probe(), 7);
  std::mt19937_64 rng(2);
  const nn::Batch x = test::random_batch(3, 256, rng);
  const std::vector<int> y{0, 1, 1};
  p.params().zero_grad();
  nn::Batch dx;
  p.loss(x, y, true, &dx);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = static_cast<Eigen::Index>(rng() % 3), j = static_cast<Eigen::Index>(rng() % 256);
    nn::Batch a = x, b = x;
    a(n, j) += h;
    b(n, j) -= h;
    const double fd = (p.loss(a, y, false, nullptr) - p.loss(b, y, false, nullptr)) / (2 * h);
    CHECK(std::abs(fd - dx(n, j)) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }
  for (std::size_t k = 0; k < p.params().size(); ++k) {
    auto& prm = p.params()[k];
    const Eigen::Index i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(prm.value.size()));
    const double keep = prm.value.data()[i];
    prm.value.data()[i] = keep + h;
    const double lp = p.loss(x, y, false, nullptr);
    prm.value.data()[i] = keep - h;
    const double lm = p.loss(x, y, false, nullptr);
    prm.value.data()[i] = keep;
    const double fd = (lp - lm) / (2 * h);
    CHECK(std::abs(fd - prm.grad.data()[i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("probe trains on separable synthetic grids") {
  const TfaConfig tfa = small_tfa();
  const auto data = grids(make_synthetic(small_synth(32, 1)), tfa, 16);
  ProbeReport r1, r2;
  const ProbeClassifier a = train_probe(data, small_probe(), &r1);
  const ProbeClassifier b = train_probe(data, small_probe(), &r2);
  MESSAGE("probe train " << r1.train_accuracy << " held-out " << r1.heldout_accuracy);
  CHECK(r1.heldout_accuracy >= 0.95);
  CHECK(a == b);
  CHECK(r1.heldout_accuracy == r2.heldout_accuracy);

  const ProbeClassifier c = decode_probe(encode_probe(a));
  CHECK(c == a);
  std::string bytes = encode_probe(a);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_probe(bytes), Error);
  CHECK_THROWS_AS(decode_probe(encode_probe(a).substr(0, 100)), Error);

  std::vector<LabeledGrid> one;
  for (const auto& d : data)
    if (d.label == 0) one.push_back(d);
  try {
    train_probe(one, small_probe());
    FAIL("expected EmptyClass");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::EmptyClass);
  }
}

TEST_CASE("attack gradient matches a directional finite difference") {
  // The gradient holds the clean grid's min/max normalisation fixed, so the
  // oracle does the same.
  const TfaConfig tfa = small_tfa();
  ProbeClassifier p(small_probe(), 5);
  const auto w = make_synthetic(small_synth(1, 9));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  for (const auto& it : w) {
    const RgbGrid clean = to_rgb(resize_bilinear(cwt_forward(it.wave, tfa).magnitude_db, 16));
    const Eigen::VectorXd g = probe_input_gradient(it.wave, p, 1, tfa);
    Eigen::VectorXd d(it.wave.size());
    for (auto& v : d) v = nd(rng);
    auto loss = [&](double t) {
      Waveform y = it.wave;
      y.samples += t * d;
      const SquareGrid r = resize_bilinear(cwt_forward(y, tfa).magnitude_db, 16);
      const Eigen::MatrixXd v = (2.0 * (r.values.array() - clean.lo) / (clean.hi - clean.lo) - 1.0).matrix();
      return p.loss(grid_batch(v), {1}, false, nullptr);
    };
    const double h = 1e-6;
    const double fd = (loss(h) - loss(-h)) / (2 * h);
    CHECK(g.dot(d) == doctest::Approx(fd).epsilon(1e-5));
  }
  TfaConfig hop2 = tfa;
  hop2.hop = 2;
  try {
    probe_input_gradient(w[0].wave, p, 1, hop2);
    FAIL("expected GradientUnavailable");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::GradientUnavailable);
  }
}

TEST_CASE("craft_perturbation contracts") {
  const TfaConfig tfa = small_tfa();
  const auto w = make_synthetic(small_synth(16, 2));
  ProbeClassifier p = train_probe(grids(w, tfa, 16), small_probe());
  const Waveform& x = w[0].wave;

  const AttackResult zero = craft_perturbation(x, p, 1, 0.0, tfa);
  CHECK(zero.perturbation.delta.cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.adversarial_prediction == zero.clean_prediction);
  CHECK(zero.adversarial.samples == x.samples);

  AttackConfig ac;
  ac.steps = 5;
  for (double bound : {-30.0, -20.0, -15.0}) {
    ac.loudness_bound_db = bound;
    for (std::size_t i : {0u, 20u}) {
      const Waveform& xi = w[i].wave;
      const int target = 1 - p.predict(analysis_grid(xi, tfa, 16).values);
      const AttackResult r = craft_perturbation(xi, p, target, 1.0, tfa, ac);
      REQUIRE(r.perturbation.delta.cwiseAbs().maxCoeff() > 0.0);
      CHECK(r.loudness_db <= bound);
      CHECK(relative_loudness_db(xi, r.perturbation) <= bound);
      CHECK(r.perturbation.delta.size() == xi.size());
      CHECK(r.adversarial.samples.cwiseAbs().maxCoeff() <= 1.0);
      CHECK(std::isfinite(r.psd_distortion_db));
    }
  }
  CHECK_THROWS_AS(craft_perturbation(x, p, 1, -1.0, tfa), Error);
  CHECK_THROWS_AS(craft_perturbation(x, p, 5, 0.1, tfa), Error);
}

TEST_CASE("recognizer bridge") {
  const Waveform w = Waveform::from_samples(Eigen::VectorXd::Constant(160, 0.25));
  CHECK(recognizer_bridge(w, "echo 'Hello, World'") == std::vector<std::string>{"hello", "world"});
  // The command sees the WAV bytes on standard input.
  const auto n = recognizer_bridge(w, "wc -c");
  REQUIRE(n.size() == 1);
  CHECK(n[0] == std::to_string(encode_wav(w).size()));
  try {
    recognizer_bridge(w, "echo broken >&2; exit 3");
    FAIL("expected ProcessFailure");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ProcessFailure);
    CHECK(std::string(e.what()).find("broken") != std::string::npos);
  }
  const auto t0 = std::chrono::steady_clock::now();
  try {
    recognizer_bridge(w, "sleep 5", 0.2);
    FAIL("expected Timeout");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::Timeout);
  }
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 2.0);
}

TEST_CASE("dataset index") {
  TempDir dir("index_test");
  const std::vector<IndexEntry> in{{"a.wav", 0, "zero"}, {"sub/b.wav", 1, ""}};
  write_index(in, dir.path / "items.tsv");
  const auto out = read_index(dir.path / "items.tsv");
  REQUIRE(out.size() == 2);
  CHECK(out[0].path == dir.path / "a.wav");
  CHECK(out[0].transcript == "zero");
  CHECK(out[1].label == 1);
  CHECK(out[1].transcript.empty());
  {
    std::ofstream f(dir.path / "bad.tsv");
    f << "x.wav\tnotanumber\n";
  }
  CHECK_THROWS_AS(read_index(dir.path / "bad.tsv"), Error);
  try {
    read_index(dir.path / "missing.tsv");
    FAIL("expected MissingArtifact");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MissingArtifact);
  }
}

TEST_CASE("experiment config parsing") {
  const std::string text =
      "[data]\nindex = items.tsv\n[models]\ngenerator = /abs/g.ckpt\nprobe = p.bin\n"
      "[attack]\nenabled = false\nloudness_bound_db = -20\n[defense]\nclass_strategy = search-all-classes\n"
      "k_max = 50 ; trailing comment\n[recognizer]\nkind = echo\n[tfa]\nn_scales = 32\n";
  const ExperimentConfig c = parse_experiment_config(text, "/base");
  CHECK(c.dataset == fs::path("/base/items.tsv"));
  CHECK(c.generator == fs::path("/abs/g.ckpt"));
  CHECK(c.probe == fs::path("/base/p.bin"));
  CHECK_FALSE(c.attack);
  CHECK(c.attack_cfg.loudness_bound_db == -20.0);
  CHECK(c.defense_cfg.class_strategy == ClassStrategy::SearchAll);
  CHECK(c.defense_cfg.k_max == 50);
  CHECK(c.recognizer == RecognizerKind::Echo);
  CHECK(c.tfa.n_scales == 32);
  CHECK_THROWS_AS(parse_experiment_config("[data]\nindex = a\nbogus = 1\n"), Error);
  CHECK_THROWS_AS(parse_experiment_config("[defense]\nk_max = x\n[data]\nindex = a\n"), Error);
  CHECK_THROWS_AS(parse_experiment_config("[run]\nseed = 1\n"), Error);
  CHECK(parse_experiment_config("[data]\nindex = a\n[run]\nreport =\n", "/base").report.empty());
}

TEST_CASE("run_experiment") {
  TempDir dir("experiment_test");
  const TfaConfig tfa = small_tfa();
  const auto w = make_synthetic(small_synth(16, 6));
  std::vector<IndexEntry> idx;
  for (std::size_t i = 0; i < w.size(); i += 4) {
    const std::string name = "item" + std::to_string(i) + ".wav";
    save_wav(w[i].wave, dir.path / name);
    idx.push_back({name, w[i].label, ""});
  }
  write_index(idx, dir.path / "items.tsv");
  save_probe(train_probe(grids(w, tfa, 16), small_probe()), dir.path / "probe.bin");
  GeneratorConfig gc;
  gc.resolution = 16;
  Checkpoint ck;
  ck.generator = Generator(gc, 1);
  ck.discriminator = Discriminator(DiscriminatorConfig::matching(gc, 8), 2);
  save_checkpoint(ck, dir.path / "g.ckpt");

  const std::string common =
      "[data]\nindex = items.tsv\n[models]\ngenerator = g.ckpt\nprobe = probe.bin\n[tfa]\nn_scales = 32\n";
  SUBCASE("closed loop with the echo recognizer") {
    const ExperimentConfig c = parse_experiment_config(
        common + "[attack]\nenabled = false\n[defense]\nenabled = false\n[recognizer]\nkind = echo\n", dir.path);
    const EvalReport r = run_experiment(c);
    CHECK(r.undefended.n_total == 8);
    CHECK(r.undefended.wer_percent == 0.0);
    CHECK(r.undefended.sla_percent == 100.0);
    CHECK_FALSE(r.defended.has_value());
  }
  SUBCASE("attack with and without defense") {
    const std::string text = common +
                             "[run]\nsuccessful_attacks_only = false\nreport = report.txt\n"
                             "[attack]\nsteps = 3\n[defense]\nk_max = 10\nrestarts = 1\n";
    const ExperimentConfig c = parse_experiment_config(text, dir.path);
    const EvalReport a = run_experiment(c);
    REQUIRE(a.defended.has_value());
    CHECK(a.undefended.n_total == 8);
    REQUIRE(a.defended->items.size() == a.undefended.items.size());
    double k = 0.0;
    for (std::size_t i = 0; i < a.undefended.items.size(); ++i) {
      CHECK(a.defended->items[i].name == a.undefended.items[i].name);
      CHECK(a.undefended.items[i].k_used == 0);
      k += a.defended->items[i].k_used;
    }
    CHECK(a.defended->mean_k == doctest::Approx(k / 8.0));
    const std::string first = binio::read_file(dir.path / "report.txt");
    const EvalReport b = run_experiment(c);
    CHECK(report_text(a) == report_text(b));
    CHECK(binio::read_file(dir.path / "report.txt") == first);
    CHECK(report_table(a).find("attack+defense") != std::string::npos);
  }
  SUBCASE("missing artifacts") {
    fs::remove(dir.path / "probe.bin");
    const ExperimentConfig c = parse_experiment_config(common, dir.path);
    try {
      run_experiment(c);
      FAIL("expected MissingArtifact");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::MissingArtifact);
    }
  }
}
