#pragma once

#include "tucp/dialoguesim.hpp"
#include "tucp/rl.hpp"
#include "tucp/seqmodels.hpp"

#include <cstdint>
#include <string>
#include <vector>

// Latent-space cluster quality and the (beta, lambda) sweep.

namespace tucp::analysis {

struct LabeledLatents {
  std::vector<std::vector<double>> points;  // N x d
  std::vector<int> labels;                  // N

  void validate() const;  // N >= distinct labels >= 2, equal widths
};

// Variance ratio criterion: [tr(B)/(k-1)] / [tr(W)/(N-k)]. Returns +infinity
// when the within-cluster scatter is zero. Throws when k < 2, N <= k, or a
// label id in [0, max label] has no points.
double calinski_harabasz(const LabeledLatents& data);

// Renumbers the labels that occur to 0..k-1 in increasing order.
LabeledLatents compact_labels(LabeledLatents data);

struct PermutationTest {
  double observed = 0.0;
  std::vector<double> null;  // one score per shuffle, sorted ascending
  double quantile(double q) const;  // nearest-rank on the sorted null
  double p_value() const;           // (1 + #{null >= observed}) / (1 + shuffles)
};

PermutationTest permutation_test(const LabeledLatents& data, std::size_t shuffles, Rng& rng);

// Prior-head mean per turn with the two label sets.
struct LatentExport {
  std::vector<std::vector<double>> points;
  std::vector<int> domain;
  std::vector<int> act;
  std::vector<std::string> domain_names;
  std::vector<std::string> act_names;

  LabeledLatents by_domain() const { return {points, domain}; }
  LabeledLatents by_act() const { return {points, act}; }
};

LatentExport export_latents(const seq::ModelParams<float>& params, const std::vector<sim::Dialogue>& dialogues,
                            const sim::Vocab& vocab);

// Header "latents N d", then "domains ..." and "acts ..." name lines, then one
// row per point: "domain act v_1 ... v_d".
std::string format_latents(const LatentExport& e);
LatentExport parse_latents(const std::string& text);

struct GridCell {
  double beta = 0.0;
  double lambda = 0.0;
};

struct SweepRow {
  GridCell cell;
  bool ok = false;
  std::string error;
  train::EpochMetrics final_metrics;
  train::EpochMetrics selected_metrics;
  std::size_t selected_epoch = 0;
};

// bleu ~ c0 + c1 * success + c2 * success^2
struct QuadraticFit {
  double c0 = 0.0, c1 = 0.0, c2 = 0.0;
  double slope(double success) const { return c1 + 2.0 * c2 * success; }
};

// Least squares over (success, bleu); needs three points with at least three
// distinct success values.
QuadraticFit fit_quadratic(const std::vector<double>& success, const std::vector<double>& bleu);

struct SweepResult {
  std::vector<SweepRow> rows;  // grid order, failed cells included with ok = false
  QuadraticFit fit;            // over the final metrics of the successful cells
  bool fit_ok = false;
  std::string fit_error;
};

// One rl_train run per cell, all from the same SL checkpoint and base.seed.
// A throwing cell is recorded and the sweep goes on. Cells run on `workers`
// threads; each run is single-threaded, so results do not depend on it.
SweepResult pareto_sweep(const seq::ModelParams<float>& sl, const sim::Corpus& corpus, const sim::Vocab& vocab,
                         const std::vector<GridCell>& grid, const rl::RLConfig& base, double sl_bleu,
                         std::size_t workers = 1);

std::vector<GridCell> make_grid(const std::vector<double>& betas, const std::vector<double>& lambdas);

// Tab-separated with a fixed header, one row per successful cell; failed cells
// and the fit follow as '#' comment lines.
std::string format_sweep(const SweepResult& r);

}  // namespace tucp::analysis
