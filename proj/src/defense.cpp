// src/defense.cpp
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

#include "purify/defense.hpp"

#include <random>
#include <sstream>

#include "purify/error.hpp"

namespace purify {

using Eigen::Index;

void DefenseConfig::validate() const {
  if (k_max < 1) throw Error(Errc::BadConfig, "k_max must be >= 1");
  if (restarts < 1) throw Error(Errc::BadConfig, "restarts must be >= 1");
  if (!(perturb_std > 0.0)) throw Error(Errc::BadConfig, "perturb_std must be positive");
  if (!(xi_coeff >= 0.0)) throw Error(Errc::BadConfig, "xi_coeff must be non-negative");
  if (!(tol_beta > 0.0)) throw Error(Errc::BadConfig, "tol_beta must be positive");
}

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::mt19937_64 stream_rng(std::uint64_t seed, int class_id, int restart) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(class_id), static_cast<std::uint32_t>(restart)};
  return std::mt19937_64(seq);
}

Eigen::VectorXd normal_vector(Index n, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, sd);
  Eigen::VectorXd v(n);
  for (auto& e : v) e = nd(rng);
  return v;
}

// Up to 50 normalised gradient steps on the mean squared grid distance,
// keeping only steps that lower the chordal loss.
void refine(const Generator& gen, int class_id, const Eigen::MatrixXd& x, const ChordalTarget& target,
            double tol_beta, double step, Eigen::VectorXd& z, double& loss, std::vector<double>& trace) {
  Generator g = gen;
  const Index S = x.rows();
  nn::Batch xr(1, S * S);
  Eigen::Map<RowMajor>(xr.data(), S, S) = x;
  for (int k = 0; k < 50 && step > 1e-8; ++k) {
    GeneratorTrace tr;
    const nn::Batch y = g.forward(z.transpose(), {class_id}, false, &tr);
    const nn::Batch dout = 2.0 * (y - xr) / static_cast<double>(xr.size());
    const Eigen::VectorXd dz = g.backward(tr, dout).row(0).transpose();
    const double norm = dz.norm();
    if (!(norm > 0.0)) break;
    const Eigen::VectorXd cand = z - step * dz / norm;
    const double l = chordal_loss(generate_grid(gen, cand, class_id), target, tol_beta).total;
    if (l < loss) {
      z = cand;
      loss = l;
      trace.push_back(l);
    } else {
      step *= 0.5;
    }
  }
}

}  // namespace

SearchResult latent_search(const SquareGrid& x, int class_id, const Generator* gen, const DefenseConfig& cfg) {
  if (!gen) throw Error(Errc::GeneratorUnavailable, "no generator loaded");
  cfg.validate();
  const GeneratorConfig& gc = gen->config();
  if (x.values.rows() != gc.resolution || x.values.cols() != gc.resolution)
    throw Error(Errc::ShapeMismatch, "search grid does not match the generator resolution");
  if (class_id < 0 || class_id >= gc.n_classes) throw Error(Errc::BadConfig, "class id out of range");
  if (!x.values.allFinite()) throw Error(Errc::NonFinite, "search grid has non-finite values");

  const ChordalTarget target = make_chordal_target(x.values);
  SearchResult r;
  r.xi = cfg.xi_coeff * target.mean_eig_magnitude;
  auto loss_of = [&](const Eigen::VectorXd& z) {
    return chordal_loss(generate_grid(*gen, z, class_id), target, cfg.tol_beta).total;
  };

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int restart = 0; restart < cfg.restarts; ++restart) {
    std::mt19937_64 rng = stream_rng(cfg.seed, class_id, restart);
    Eigen::VectorXd z = normal_vector(gc.latent_dim, cfg.perturb_std, rng);
    double loss = loss_of(z);
    auto offer = [&] {
      if (r.loss_trace.empty() || loss < r.final_loss) {
        r.z_star = z;
        r.final_loss = loss;
        r.loss_trace.push_back(loss);
      }
    };
    offer();
    for (int k = 0; k < cfg.k_max && loss > r.xi; ++k) {
      const Eigen::VectorXd eta = normal_vector(gc.latent_dim, cfg.perturb_std, rng);
      const double s = 1.0 - unif(rng);  // (0, 1]
      const Eigen::VectorXd cand = z + s * eta;
      const double l = loss_of(cand);
      ++r.k_used;
      if (l < loss) {
        z = cand;
        loss = l;
        offer();
      }
    }
    if (r.final_loss <= r.xi) break;
  }

  if (cfg.use_gradient_refinement && r.final_loss > r.xi)
    refine(*gen, class_id, x.values, target, cfg.tol_beta, cfg.perturb_std, r.z_star, r.final_loss, r.loss_trace);
  r.converged = r.final_loss <= r.xi;
  return r;
}

DefenseResult defend(const Waveform& x, const Generator* gen, std::optional<int> class_id,
                     const TfaConfig& tfa, const DefenseConfig& cfg) {
  if (!gen) throw Error(Errc::GeneratorUnavailable, "no generator loaded");
  cfg.validate();
  const GeneratorConfig& gc = gen->config();
  if (cfg.class_strategy == ClassStrategy::Known && !class_id)
    throw Error(Errc::BadConfig, "class id required for the known-class strategy");

  const Spectrogram s = cwt_forward(x, tfa);
  const SquareGrid g = resize_bilinear(s.magnitude_db, gc.resolution);
  const RgbGrid rgb = to_rgb(g);
  const SquareGrid target{rgb.channels[0], g.source_dims};

  std::vector<int> classes;
  if (cfg.class_strategy == ClassStrategy::Known) {
    classes.push_back(*class_id);
  } else {
    for (int c = 0; c < gc.n_classes; ++c) classes.push_back(c);
  }

  DefenseResult out;
  std::optional<SearchResult> best;
  for (int c : classes) {
    SearchResult r = latent_search(target, c, gen, cfg);
    out.k_used += r.k_used;
    if (!best || r.final_loss < best->final_loss) {
      best = std::move(r);
      out.class_used = c;
    }
  }
  out.z_star = best->z_star;
  out.loss_trace = best->loss_trace;
  out.final_loss = best->final_loss;
  out.xi = best->xi;
  out.converged = best->converged;

  const Eigen::MatrixXd synth = generate_grid(*gen, out.z_star, out.class_used);
  SquareGrid db{from_unit_range(synth, rgb.lo, rgb.hi), g.source_dims};
  out.spectrogram = s;
  out.spectrogram.magnitude_db = unresize_bilinear(db);
  out.output = cwt_inverse(out.spectrogram);
  out.output.source_path.reset();
  return out;
}

Generator load_generator(const std::filesystem::path& checkpoint) {
  try {
    return load_checkpoint(checkpoint).generator;
  } catch (const Error& e) {
    throw Error(Errc::GeneratorUnavailable, checkpoint.string() + ": " + e.what());
  }
}

std::string defense_trace_text(const DefenseResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "class_used=" << r.class_used << "\n"
     << "k_used=" << r.k_used << "\n"
     << "final_loss=" << r.final_loss << "\n"
     << "xi=" << r.xi << "\n"
     << "converged=" << (r.converged ? 1 : 0) << "\n"
     << "loss_trace=";
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) os << (i ? "," : "") << r.loss_trace[i];
  os << "\n";
  return os.str();
}

}  // namespace purify
