// tools/purify_main.cpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Command-line front end. Exit status: 0 success, 1 usage, 2 data error,
// 3 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "purify/binio.hpp"
#include "purify/ccgan.hpp"
#include "purify/defense.hpp"
#include "purify/error.hpp"
#include "purify/eval.hpp"
#include "purify/pencil.hpp"
#include "purify/signal.hpp"
#include "purify/tfa.hpp"

namespace fs = std::filesystem;
using namespace purify;

namespace {

TfaConfig tfa_from(const std::string& path) { return path.empty() ? TfaConfig{} : load_tfa_config(path); }

Eigen::MatrixXd read_matrix(const fs::path& path) {
  std::istringstream in(binio::read_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw Error(Errc::CorruptFile, path.string() + ": not a number: " + tok);
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(Errc::CorruptFile, path.string() + ": empty matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw Error(Errc::CorruptFile, path.string() + ": ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

// Spectrogram directory: <dir>/index.tsv lists file<TAB>class_id.
std::vector<LabeledGrid> load_grids(const fs::path& dir, Eigen::Index S) {
  std::vector<LabeledGrid> out;
  for (const IndexEntry& e : read_index(dir / "index.tsv")) {
    const Spectrogram s = load_spectrogram(e.path);
    out.push_back({to_rgb(resize_bilinear(s.magnitude_db, S)).channels[0], e.label});
  }
  if (out.empty()) throw Error(Errc::EmptyBatch, dir.string() + ": no items");
  return out;
}

int class_count(const std::vector<LabeledGrid>& data) {
  int n = 0;
  for (const auto& d : data) n = std::max(n, d.label + 1);
  return n;
}

void cmd_spec(const std::string& in, const std::string& out, const std::string& index, const std::string& out_dir,
              const std::string& tfa_path) {
  const TfaConfig tfa = tfa_from(tfa_path);
  if (!index.empty()) {
    if (out_dir.empty()) throw Error(Errc::BadConfig, "--index needs --out-dir");
    fs::create_directories(out_dir);
    std::vector<IndexEntry> written;
    for (const IndexEntry& e : read_index(index)) {
      const std::string name = e.path.stem().string() + ".spec";
      save_spectrogram(cwt_forward(load_wav(e.path), tfa), fs::path(out_dir) / name);
      written.push_back({name, e.label, e.transcript});
    }
    write_index(written, fs::path(out_dir) / "index.tsv");
    std::cout << written.size() << " spectrograms written to " << out_dir << "\n";
    return;
  }
  if (in.empty() || out.empty()) throw Error(Errc::BadConfig, "spec needs --in and --out, or --index and --out-dir");
  const Spectrogram s = cwt_forward(load_wav(in), tfa);
  save_spectrogram(s, out);
  std::cout << s.n_scales() << " x " << s.n_frames() << " spectrogram written to " << out << "\n";
}

void cmd_make_synthetic(const std::string& out, SyntheticConfig cfg) {
  fs::create_directories(out);
  std::vector<IndexEntry> idx;
  const auto items = make_synthetic(cfg);
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::ostringstream name;
    name << "c" << items[i].label << "_" << std::setw(4) << std::setfill('0') << i << ".wav";
    save_wav(items[i].wave, fs::path(out) / name.str());
    idx.push_back({name.str(), items[i].label, class_word(items[i].label)});
  }
  write_index(idx, fs::path(out) / "index.tsv");
  std::cout << items.size() << " items written to " << out << "\n";
}

void cmd_train_gan(const std::string& data_dir, const std::string& preset, const std::string& out, std::uint64_t seed,
                   int iters, int resolution, int batch) {
  const bool paper = preset == "paper";
  std::vector<LabeledGrid> data;
  const int S = resolution > 0 ? resolution : (paper ? 128 : 32);
  data = load_grids(data_dir, S);
  const int n = class_count(data);
  GeneratorConfig gc = paper ? GeneratorConfig::paper_preset(n) : GeneratorConfig::desk_preset(n);
  gc.resolution = S;
  TrainingConfig tc = paper ? TrainingConfig{} : TrainingConfig::desk_preset();
  tc.seed = seed;
  if (iters > 0) tc.max_iters = iters;
  if (batch > 0) tc.batch_size = batch;
  const DiscriminatorConfig dc = DiscriminatorConfig::matching(gc, paper ? 16 : 8);
  const TrainResult r = gan_train(data, gc, dc, tc, [](std::int64_t it, const TrainHistory& h) {
    if (it % 100 == 0)
      std::cerr << "iteration " << it << "  d_loss " << h.d_loss.back() << "  d_acc " << h.d_accuracy.back() << "\n";
  });
  save_checkpoint(r.model(), out);
  std::cout << "checkpoint (iteration " << r.model().iteration << ") written to " << out;
  if (r.collapse_start) std::cout << "; collapse detected from iteration " << *r.collapse_start;
  std::cout << "\n";
}

void cmd_train_probe(const std::string& data_dir, const std::string& out, ProbeConfig pc) {
  const std::vector<LabeledGrid> data = load_grids(data_dir, pc.resolution);
  pc.n_classes = class_count(data);
  ProbeReport rep;
  save_probe(train_probe(data, pc, &rep), out);
  std::cout << "train accuracy " << rep.train_accuracy << ", held-out accuracy " << rep.heldout_accuracy << "\n";
}

void cmd_attack(const std::string& in, const std::string& probe_path, int target, const std::string& out,
                double eps, const AttackConfig& ac, const std::string& tfa_path) {
  const Waveform x = load_wav(in);
  ProbeClassifier probe = load_probe(probe_path);
  const double e = eps > 0.0 ? eps : loudness_eps(x, ac.loudness_bound_db);
  const AttackResult r = craft_perturbation(x, probe, target, e, tfa_from(tfa_path), ac);
  save_wav(r.adversarial, out);
  std::cout << "clean prediction " << r.clean_prediction << ", adversarial prediction " << r.adversarial_prediction
            << " (target " << r.target << ", " << (r.success() ? "success" : "failed") << ")\n"
            << "loudness " << r.loudness_db << " dB, PSD distortion " << r.psd_distortion_db << " dB\n";
}

void cmd_defend(const std::string& in, const std::string& ckpt, const std::string& cls, const std::string& out,
                DefenseConfig cfg, const std::string& trace, const std::string& tfa_path) {
  const Generator g = load_generator(ckpt);
  std::optional<int> class_id;
  if (cls == "auto") {
    cfg.class_strategy = ClassStrategy::SearchAll;
  } else {
    try {
      class_id = std::stoi(cls);
    } catch (const std::exception&) {
      throw Error(Errc::BadConfig, "--class must be an integer or 'auto'");
    }
  }
  const DefenseResult r = defend(load_wav(in), &g, class_id, tfa_from(tfa_path), cfg);
  save_wav(r.output, out);
  if (!trace.empty()) binio::write_file(trace, defense_trace_text(r));
  std::cout << "class " << r.class_used << ", k " << r.k_used << ", loss " << r.final_loss << " (xi " << r.xi
            << ", " << (r.converged ? "converged" : "not converged") << ")\n";
}

void cmd_qz(const std::string& a_path, const std::string& b_path) {
  const Eigen::MatrixXd a = read_matrix(a_path), b = read_matrix(b_path);
  const auto g = qz_decompose(a, b);
  const Eigen::VectorXcd ev = g.eigenvalues();
  std::cout << std::setprecision(12);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    std::cout << "alpha " << g.alpha[i] << "  beta " << g.beta[i] << "  lambda " << ev[i] << "\n";
  std::cout << "residual |QtAZ - S| " << (g.q.transpose() * a * g.z - g.s).norm() << "\n"
            << "residual |QtBZ - T| " << (g.q.transpose() * b * g.z - g.t).norm() << "\n";
}

void cmd_eval(const std::string& config, const std::string& report) {
  ExperimentConfig cfg = load_experiment_config(config);
  if (!report.empty()) cfg.report = report;
  std::cout << report_table(run_experiment(cfg));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial purification of speech with a class-conditional GAN"};
  app.require_subcommand(1);
  std::string tfa_path;

  std::string in, out, index, out_dir;
  auto* spec = app.add_subcommand("spec", "Waveform to spectrogram file");
  spec->add_option("--in", in, "Input WAV");
  spec->add_option("--out", out, "Output spectrogram");
  spec->add_option("--index", index, "Dataset index of WAV files to convert");
  spec->add_option("--out-dir", out_dir, "Output directory for --index");
  spec->add_option("--tfa-config", tfa_path, "Analysis settings (JSON)");

  SyntheticConfig sc;
  auto* synth = app.add_subcommand("make-synthetic", "Write the synthetic tone-band dataset");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--classes", sc.n_classes);
  synth->add_option("--per-class", sc.per_class);
  synth->add_option("--length", sc.length, "Samples per item");
  synth->add_option("--seed", sc.seed);

  std::string data, preset = "desk";
  std::uint64_t seed = 0;
  int iters = 0, resolution = 0, batch = 0;
  auto* gan = app.add_subcommand("train-gan", "Train the conditional GAN on a spectrogram directory");
  gan->add_option("--data", data, "Directory of spectrograms with index.tsv")->required();
  gan->add_option("--preset", preset)->check(CLI::IsMember({"paper", "desk"}));
  gan->add_option("--out", out, "Checkpoint path")->required();
  gan->add_option("--seed", seed);
  gan->add_option("--iters", iters, "Override the preset's iteration count");
  gan->add_option("--resolution", resolution, "Override the preset's grid size");
  gan->add_option("--batch", batch, "Override the preset's batch size");

  ProbeConfig pc;
  auto* probe = app.add_subcommand("train-probe", "Train the probe classifier");
  probe->add_option("--data", data, "Directory of spectrograms with index.tsv")->required();
  probe->add_option("--out", out, "Probe path")->required();
  probe->add_option("--resolution", pc.resolution);
  probe->add_option("--epochs", pc.epochs);
  probe->add_option("--seed", pc.seed);

  std::string probe_path;
  int target = 0;
  double eps = 0.0;
  AttackConfig ac;
  auto* attack = app.add_subcommand("attack-sim", "Gradient-sign perturbation against the probe");
  attack->add_option("--in", in)->required();
  attack->add_option("--probe", probe_path)->required();
  attack->add_option("--target", target)->required();
  attack->add_option("--out", out)->required();
  attack->add_option("--eps", eps, "Max-norm budget (default: the loudness bound)");
  attack->add_option("--bound-db", ac.loudness_bound_db);
  attack->add_option("--steps", ac.steps);
  attack->add_option("--tfa-config", tfa_path);

  std::string ckpt, cls = "auto", trace;
  DefenseConfig dc;
  auto* def = app.add_subcommand("defend", "Purify a waveform");
  def->add_option("--in", in)->required();
  def->add_option("--ckpt", ckpt)->required();
  def->add_option("--class", cls, "Class id or 'auto'");
  def->add_option("--out", out)->required();
  def->add_option("--k-max", dc.k_max);
  def->add_option("--restarts", dc.restarts);
  def->add_option("--seed", dc.seed);
  def->add_flag("--refine", dc.use_gradient_refinement, "Gradient refinement after the random search");
  def->add_option("--trace", trace, "Write the search trace here");
  def->add_option("--tfa-config", tfa_path);

  std::string config, report;
  auto* ev = app.add_subcommand("eval", "Run an experiment config");
  ev->add_option("--config", config)->required();
  ev->add_option("--report", report, "Override the report path");

  std::string a_path, b_path;
  auto* qz = app.add_subcommand("qz", "Generalised eigenvalues of a matrix pencil");
  qz->add_option("--a", a_path)->required();
  qz->add_option("--b", b_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*spec) cmd_spec(in, out, index, out_dir, tfa_path);
    else if (*synth) cmd_make_synthetic(out, sc);
    else if (*gan) cmd_train_gan(data, preset, out, seed, iters, resolution, batch);
    else if (*probe) cmd_train_probe(data, out, pc);
    else if (*attack) cmd_attack(in, probe_path, target, out, eps, ac, tfa_path);
    else if (*def) cmd_defend(in, ckpt, cls, out, dc, trace, tfa_path);
    else if (*ev) cmd_eval(config, report);
    else if (*qz) cmd_qz(a_path, b_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Numerical ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
