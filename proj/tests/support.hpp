#pragma once

// Test-side oracles, written independently of the library code they check.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "har/harness.hpp"

namespace test {

using har::Matrix;
using har::ad::Tensor;

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// ---- gradient checking ----

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[i]"
  std::size_t coordinates = 0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6), central differences with step h.
/// `loss` must rebuild the graph from the current parameter values on every call.
GradReport grad_check(const std::vector<std::pair<std::string, Tensor>>& params,
                      const std::function<Tensor()>& loss, double h = 1e-5);

struct NamedCheck {
  std::string name;
  GradReport report;
};

/// Finite-difference check of every autodiff primitive and the three training losses.
std::vector<NamedCheck> primitive_grad_suite();
/// Finite-difference check of every neural architecture at toy width, through the CE loss.
std::vector<NamedCheck> model_grad_suite();

/// Small-width spec of each neural kind, cheap enough for exhaustive finite differences.
har::ModelSpec toy_spec(har::ModelKind kind);
/// Random batch matching the spec's inputs.
har::Batch random_batch(const har::ModelSpec& spec, std::size_t n, std::uint64_t seed);

// ---- reference formulas ----

/// Direct O(K S^2) Morlet transform magnitude.
Matrix cwt_direct(std::span<const double> signal, std::span<const double> scales, double omega0);

/// Moving average via prefix sums over [t - floor((M-1)/2), t + ceil((M-1)/2)].
std::vector<double> moving_average_prefix(std::span<const double> x, int m);

/// Supervised contrastive loss straight from the double-sum definition.
double supcon_direct(const Matrix& e, std::span<const int> labels, double tau);

/// One LSTM step with gates i, f, g, o computed element by element.
void lstm_step_direct(std::span<const double> x, std::span<const double> h, std::span<const double> c,
                      const Matrix& wx, const Matrix& wh, std::span<const double> b, std::vector<double>& h_out,
                      std::vector<double>& c_out);

/// Adam with bias correction on a plain parameter vector.
struct AdamOracle {
  double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  long t = 0;
  void step(std::vector<double>& x, const std::vector<double>& g);
};

/// Small synthetic experiment shared by harness tests and acceptance runs.
har::ExperimentConfig synthetic_config(const std::filesystem::path& out, int epochs_ce, int epochs_pretrain);

}  // namespace test
