// src/experiment.cpp
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

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "purify/binio.hpp"
#include "purify/error.hpp"
#include "purify/eval.hpp"

namespace purify {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Recognizer bridge

namespace {

struct Pipe {
  int fd[2] = {-1, -1};
  Pipe() {
    if (::pipe(fd) != 0) throw Error(Errc::ProcessFailure, std::string("pipe: ") + std::strerror(errno));
  }
  ~Pipe() {
    close_end(0);
    close_end(1);
  }
  void close_end(int i) {
    if (fd[i] >= 0) ::close(fd[i]);
    fd[i] = -1;
  }
};

}  // namespace

std::vector<std::string> recognizer_bridge(const Waveform& w, const std::string& command, double timeout_s) {
  if (command.empty()) throw Error(Errc::BadConfig, "recognizer command is empty");
  if (!(timeout_s > 0.0)) throw Error(Errc::BadConfig, "recognizer timeout must be positive");
  const std::string input = encode_wav(w);

  Pipe in, out, err;
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(Errc::ProcessFailure, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    ::dup2(in.fd[0], STDIN_FILENO);
    ::dup2(out.fd[1], STDOUT_FILENO);
    ::dup2(err.fd[1], STDERR_FILENO);
    for (int fd : {in.fd[0], in.fd[1], out.fd[0], out.fd[1], err.fd[0], err.fd[1]}) ::close(fd);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  in.close_end(0);
  out.close_end(1);
  err.close_end(1);
  ::fcntl(in.fd[1], F_SETFL, O_NONBLOCK);

  std::string sout, serr;
  std::size_t written = 0;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  bool timed_out = false;
  while (out.fd[0] >= 0 || err.fd[0] >= 0) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      timed_out = true;
      break;
    }
    pollfd fds[3];
    int n = 0;
    int* owners[3];
    for (int* fd : {&in.fd[1], &out.fd[0], &err.fd[0]}) {
      if (*fd < 0) continue;
      fds[n] = {*fd, static_cast<short>(fd == &in.fd[1] ? POLLOUT : POLLIN), 0};
      owners[n++] = fd;
    }
    const int rc = ::poll(fds, static_cast<nfds_t>(n), static_cast<int>(std::min<long long>(left.count(), 1000)));
    if (rc < 0 && errno != EINTR) break;
    for (int i = 0; i < n && rc > 0; ++i) {
      if (!fds[i].revents) continue;
      if (owners[i] == &in.fd[1]) {
        const ssize_t k = ::write(in.fd[1], input.data() + written, input.size() - written);
        if (k > 0) written += static_cast<std::size_t>(k);
        if (k < 0 && errno != EAGAIN) written = input.size();
        if (written == input.size()) in.close_end(1);
      } else {
        char buf[4096];
        const ssize_t k = ::read(*owners[i], buf, sizeof buf);
        if (k > 0) {
          (owners[i] == &out.fd[0] ? sout : serr).append(buf, static_cast<std::size_t>(k));
        } else if (k == 0 || errno != EAGAIN) {
          ::close(*owners[i]);
          *owners[i] = -1;
        }
      }
    }
  }
  in.close_end(1);

  int status = 0;
  if (timed_out) {
    ::kill(pid, SIGKILL);
    ::waitpid(pid, &status, 0);
    throw Error(Errc::Timeout, "recognizer exceeded " + std::to_string(timeout_s) + " s");
  }
  // Output closed; the process may still be running (it could have closed
  // its descriptors early), so the remaining budget applies to the wait too.
  while (::waitpid(pid, &status, WNOHANG) == 0) {
    if (std::chrono::steady_clock::now() >= deadline) {
      ::kill(pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      throw Error(Errc::Timeout, "recognizer exceeded " + std::to_string(timeout_s) + " s");
    }
    ::usleep(1000);
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    const std::string how = WIFEXITED(status) ? "exit status " + std::to_string(WEXITSTATUS(status))
                                              : "signal " + std::to_string(WTERMSIG(status));
    throw Error(Errc::ProcessFailure, "recognizer failed (" + how + "): " + serr);
  }
  return tokenize(sout);
}

// ---------------------------------------------------------------------------
// Dataset index

std::vector<IndexEntry> read_index(const fs::path& index) {
  std::ifstream in(index);
  if (!in) throw Error(Errc::MissingArtifact, "cannot open index " + index.string());
  const fs::path base = index.parent_path();
  std::vector<IndexEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      cols.push_back(line.substr(start, tab - start));
    cols.push_back(line.substr(start));
    if (cols.size() < 2 || cols.size() > 3)
      throw Error(Errc::CorruptFile, index.string() + ":" + std::to_string(lineno) + ": expected 2 or 3 fields");
    IndexEntry e;
    e.path = fs::path(cols[0]).is_absolute() ? fs::path(cols[0]) : base / cols[0];
    try {
      std::size_t used = 0;
      e.label = std::stoi(cols[1], &used);
      if (used != cols[1].size() || e.label < 0) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw Error(Errc::CorruptFile, index.string() + ":" + std::to_string(lineno) + ": bad class id");
    }
    if (cols.size() == 3) e.transcript = cols[2];
    out.push_back(std::move(e));
  }
  return out;
}

void write_index(const std::vector<IndexEntry>& entries, const fs::path& index) {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << e.path.generic_string() << '\t' << e.label;
    if (!e.transcript.empty()) os << '\t' << e.transcript;
    os << '\n';
  }
  binio::write_file(index, os.str());
}

// ---------------------------------------------------------------------------
// Experiment config

namespace {

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw Error(Errc::BadConfig, key + ": expected a boolean, got '" + v + "'");
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error(Errc::BadConfig, key + ": expected a number, got '" + v + "'");
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long d = std::stoll(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error(Errc::BadConfig, key + ": expected an integer, got '" + v + "'");
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text, const fs::path& base) {
  ExperimentConfig c;
  auto resolve = [&](const std::string& v) {
    if (v.empty()) return fs::path();
    return fs::path(v).is_absolute() ? fs::path(v) : base / v;
  };
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find_first_of("#;")));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error(Errc::BadConfig, "line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(Errc::BadConfig, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = section + "." + trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));

    if (key == "data.index") c.dataset = resolve(v);
    else if (key == "models.generator") c.generator = resolve(v);
    else if (key == "models.probe") c.probe = resolve(v);
    else if (key == "run.seed") c.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "run.successful_attacks_only") c.successful_attacks_only = parse_bool(key, v);
    else if (key == "run.report") c.report = resolve(v);
    else if (key == "attack.enabled") c.attack = parse_bool(key, v);
    else if (key == "attack.loudness_bound_db") c.attack_cfg.loudness_bound_db = parse_real(key, v);
    else if (key == "attack.steps") c.attack_cfg.steps = static_cast<int>(parse_int(key, v));
    else if (key == "attack.clamp") c.attack_cfg.clamp = parse_bool(key, v);
    else if (key == "defense.enabled") c.defense = parse_bool(key, v);
    else if (key == "defense.k_max") c.defense_cfg.k_max = static_cast<int>(parse_int(key, v));
    else if (key == "defense.restarts") c.defense_cfg.restarts = static_cast<int>(parse_int(key, v));
    else if (key == "defense.xi_coeff") c.defense_cfg.xi_coeff = parse_real(key, v);
    else if (key == "defense.perturb_std") c.defense_cfg.perturb_std = parse_real(key, v);
    else if (key == "defense.gradient_refinement") c.defense_cfg.use_gradient_refinement = parse_bool(key, v);
    else if (key == "defense.seed") c.defense_cfg.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "defense.class_strategy") {
      if (v == "known") c.defense_cfg.class_strategy = ClassStrategy::Known;
      else if (v == "search-all-classes" || v == "search-all") c.defense_cfg.class_strategy = ClassStrategy::SearchAll;
      else throw Error(Errc::BadConfig, key + ": expected known or search-all-classes");
    }
    else if (key == "tfa.n_scales") c.tfa.n_scales = static_cast<int>(parse_int(key, v));
    else if (key == "tfa.freq_min") c.tfa.freq_min = parse_real(key, v);
    else if (key == "tfa.freq_max") c.tfa.freq_max = parse_real(key, v);
    else if (key == "tfa.frame_len_ms") c.tfa.frame_len_ms = parse_real(key, v);
    else if (key == "tfa.hop") c.tfa.hop = static_cast<int>(parse_int(key, v));
    else if (key == "tfa.morlet_center") c.tfa.morlet_center = parse_real(key, v);
    else if (key == "tfa.log_floor_eps") c.tfa.log_floor_eps = parse_real(key, v);
    else if (key == "recognizer.kind") {
      if (v == "echo") c.recognizer = RecognizerKind::Echo;
      else if (v == "probe") c.recognizer = RecognizerKind::Probe;
      else if (v == "command") c.recognizer = RecognizerKind::Command;
      else throw Error(Errc::BadConfig, key + ": expected echo, probe or command");
    }
    else if (key == "recognizer.command") c.recognizer_command = v;
    else if (key == "recognizer.timeout_s") c.recognizer_timeout_s = parse_real(key, v);
    else throw Error(Errc::BadConfig, "unknown key " + key);
  }
  if (c.dataset.empty()) throw Error(Errc::BadConfig, "data.index is required");
  c.tfa.validate();
  c.attack_cfg.validate();
  c.defense_cfg.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::MissingArtifact, "no experiment config at " + path.string());
  return parse_experiment_config(binio::read_file(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Experiment loop

namespace {

void require_file(const fs::path& p, const char* what) {
  if (p.empty()) throw Error(Errc::BadConfig, std::string(what) + " path is not set");
  if (!fs::exists(p)) throw Error(Errc::MissingArtifact, std::string(what) + " not found: " + p.string());
}

void finish_arm(ArmReport& arm) {
  arm.n_total = static_cast<int>(arm.items.size());
  if (arm.items.empty()) return;
  std::vector<TranscriptPair> pairs;
  long long edits = 0, words = 0;
  double k_sum = 0.0;
  for (const auto& it : arm.items) {
    pairs.push_back({it.reference, it.hypothesis});
    const EditCounts e = align_words(it.reference, it.hypothesis);
    edits += e.total();
    words += e.reference_words;
    k_sum += it.k_used;
  }
  arm.wer_percent = words > 0 ? 100.0 * static_cast<double>(edits) / static_cast<double>(words) : 0.0;
  arm.sla_percent = sla(pairs);
  arm.mean_k = k_sum / static_cast<double>(arm.items.size());
}

}  // namespace

EvalReport run_experiment(const ExperimentConfig& cfg) {
  cfg.tfa.validate();
  cfg.attack_cfg.validate();
  cfg.defense_cfg.validate();
  const std::vector<IndexEntry> entries = read_index(cfg.dataset);
  if (entries.empty()) throw Error(Errc::EmptyBatch, "dataset index lists no items");

  std::optional<ProbeClassifier> probe;
  if (cfg.attack || cfg.recognizer == RecognizerKind::Probe) {
    require_file(cfg.probe, "probe");
    probe = load_probe(cfg.probe);
  }
  std::optional<Generator> gen;
  if (cfg.defense) {
    require_file(cfg.generator, "generator checkpoint");
    gen = load_generator(cfg.generator);
  }

  auto recognize = [&](const Waveform& w, const std::vector<std::string>& reference) -> std::vector<std::string> {
    switch (cfg.recognizer) {
      case RecognizerKind::Echo:
        return reference;
      case RecognizerKind::Probe:
        return {class_word(probe->predict(analysis_grid(w, cfg.tfa, probe->config().resolution).values))};
      case RecognizerKind::Command:
        try {
          return recognizer_bridge(w, cfg.recognizer_command, cfg.recognizer_timeout_s);
        } catch (const Error& e) {
          if (e.code() == Errc::Timeout) throw;
          throw Error(Errc::RecognizerFailure, e.what());
        }
    }
    return {};
  };

  EvalReport rep;
  rep.undefended.name = cfg.attack ? "attack" : "clean";
  if (cfg.defense) {
    rep.defended.emplace();
    rep.defended->name = cfg.attack ? "attack+defense" : "defense";
  }
  rep.n_items = static_cast<int>(entries.size());

  for (std::size_t i = 0; i < entries.size(); ++i) {
    const IndexEntry& e = entries[i];
    require_file(e.path, "audio item");
    const Waveform clean = load_wav(e.path);
    ItemRecord base;
    base.name = e.path.filename().string();
    base.label = e.label;
    base.reference = e.transcript.empty() ? std::vector<std::string>{class_word(e.label)} : tokenize(e.transcript);
    if (base.reference.empty()) throw Error(Errc::EmptyReference, "item " + base.name + " has an empty transcript");

    Waveform input = clean;
    if (cfg.attack) {
      const int target = (e.label + 1) % probe->config().n_classes;
      const AttackResult a = craft_perturbation(clean, *probe, target,
                                                loudness_eps(clean, cfg.attack_cfg.loudness_bound_db), cfg.tfa,
                                                cfg.attack_cfg);
      base.attacked = true;
      base.attack_success = a.success();
      base.loudness_db = a.loudness_db;
      input = a.adversarial;
      rep.n_attack_success += a.success();
      if (cfg.successful_attacks_only && !a.success()) continue;
    }

    ItemRecord u = base;
    u.hypothesis = recognize(input, u.reference);
    u.wer = wer({u.reference, u.hypothesis});
    rep.undefended.items.push_back(u);

    if (cfg.defense) {
      DefenseConfig dc = cfg.defense_cfg;
      dc.seed = cfg.defense_cfg.seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(i) + 1));
      const std::optional<int> known =
          dc.class_strategy == ClassStrategy::Known ? std::optional<int>(e.label) : std::nullopt;
      const DefenseResult d = defend(input, &*gen, known, cfg.tfa, dc);
      ItemRecord r = base;
      r.k_used = d.k_used;
      r.converged = d.converged;
      r.hypothesis = recognize(d.output, r.reference);
      r.wer = wer({r.reference, r.hypothesis});
      rep.defended->items.push_back(r);
    }
  }
  finish_arm(rep.undefended);
  if (rep.defended) finish_arm(*rep.defended);
  if (!cfg.report.empty()) binio::write_file(cfg.report, report_text(rep));
  return rep;
}

EvalReport run_experiment(const fs::path& cfg_file) { return run_experiment(load_experiment_config(cfg_file)); }

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "arm" << std::right << std::setw(6) << "n" << std::setw(10) << "WER (%)"
     << std::setw(10) << "SLA (%)" << std::setw(10) << "mean k" << "\n";
  auto row = [&](const ArmReport& a) {
    os << std::left << std::setw(16) << a.name << std::right << std::setw(6) << a.n_total << std::fixed
       << std::setprecision(2) << std::setw(10) << a.wer_percent << std::setw(10) << a.sla_percent << std::setw(10)
       << a.mean_k << "\n";
  };
  row(r.undefended);
  if (r.defended) row(*r.defended);
  os << "items " << r.n_items << ", attack successes " << r.n_attack_success << "\n";
  return os.str();
}

std::string report_text(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "n_items=" << r.n_items << "\n"
     << "n_attack_success=" << r.n_attack_success << "\n";
  auto arm = [&](const std::string& key, const ArmReport& a) {
    os << key << ".name=" << a.name << "\n"
       << key << ".n_total=" << a.n_total << "\n"
       << key << ".wer_percent=" << a.wer_percent << "\n"
       << key << ".sla_percent=" << a.sla_percent << "\n"
       << key << ".mean_k=" << a.mean_k << "\n";
    for (std::size_t i = 0; i < a.items.size(); ++i) {
      const ItemRecord& it = a.items[i];
      const std::string p = key + ".item." + std::to_string(i);
      auto join = [](const std::vector<std::string>& w) {
        std::string s;
        for (std::size_t k = 0; k < w.size(); ++k) s += (k ? " " : "") + w[k];
        return s;
      };
      os << p << ".name=" << it.name << "\n"
         << p << ".label=" << it.label << "\n"
         << p << ".attack_success=" << it.attack_success << "\n"
         << p << ".loudness_db=" << it.loudness_db << "\n"
         << p << ".reference=" << join(it.reference) << "\n"
         << p << ".hypothesis=" << join(it.hypothesis) << "\n"
         << p << ".wer=" << it.wer << "\n"
         << p << ".k_used=" << it.k_used << "\n"
         << p << ".converged=" << it.converged << "\n";
    }
  };
  arm("undefended", r.undefended);
  if (r.defended) arm("defended", *r.defended);
  return os.str();
}

}  // namespace purify
