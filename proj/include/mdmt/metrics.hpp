#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdmt/dataset.hpp"
#include "mdmt/model.hpp"

namespace mdmt {

// Probability that a random positive outranks a random negative, ties
// counted 0.5; rank-sum method, O(n log n). Throws ValidationError when only
// one class is present.
double auc(std::span<const double> scores, std::span<const uint8_t> labels);

// Mean binary cross entropy with scores clamped to [1e-7, 1-1e-7].
double logloss(std::span<const double> scores, std::span<const uint8_t> labels);

// ((auc_model - 0.5) / (auc_base - 0.5) - 1) * 100. Requires auc_base > 0.5.
double rela_impr(double auc_model, double auc_base);

struct PairMetrics {
  uint32_t domain = 0;
  uint32_t task = 0;
  bool present = false;  // false when the pair had a single label class
  double auc = 0.0;
  double logloss = 0.0;
  size_t n_samples = 0;
};

struct EvalReport {
  std::string split;
  std::vector<PairMetrics> pairs;  // D*T entries in (d, t) order
  double overall_auc = 0.0;        // unweighted mean over present pairs
  double overall_logloss = 0.0;
  size_t n_samples = 0;

  void finalize();  // recomputes the overall means from the pair fields
};

// Line-delimited report: one record per pair plus one overall record, fixed
// field order (split, domain, task, auc, logloss, n_samples).
std::string render_report(const EvalReport& report);
EvalReport parse_report(const std::string& text);

// Scores every sample of the split and computes per-(d,t) metrics. Pairs
// whose labels are single-class are reported absent. MDMT_THREADS (or the
// explicit override) caps the per-domain fan-out; results are merged in pair
// order regardless of thread count.
EvalReport evaluate(Model<float>& model, const Dataset& split, int max_threads = 0);

// Welch's unequal-variance t statistic and two-sided p-value. Returns
// nullopt when either side has zero variance or fewer than 2 runs.
struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
};
std::optional<WelchResult> welch_t_test(std::span<const double> a, std::span<const double> b);

double mean_of(std::span<const double> xs);
double sample_std(std::span<const double> xs);

// Regularized incomplete beta function I_x(a, b); backs the t distribution's
// tail probability.
double incomplete_beta(double a, double b, double x);

int eval_thread_cap();  // reads MDMT_THREADS, defaults to 1

}  // namespace mdmt
