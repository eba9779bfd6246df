#include "tucp/analysis.hpp"

#include "tucp/objectives.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace tucp::analysis {

void LabeledLatents::validate() const {
  if (points.size() != labels.size()) throw std::invalid_argument("latents: points and labels differ in length");
  if (points.empty()) throw std::invalid_argument("latents: no points");
  const std::size_t d = points.front().size();
  for (const auto& p : points) {
    if (p.size() != d) throw std::invalid_argument("latents: rows of different width");
  }
  std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw std::invalid_argument("latents: need at least two labels");
}

double calinski_harabasz(const LabeledLatents& data) {
  data.validate();
  const std::size_t n = data.points.size(), d = data.points.front().size();
  const int max_label = *std::max_element(data.labels.begin(), data.labels.end());
  if (*std::min_element(data.labels.begin(), data.labels.end()) < 0) {
    throw std::invalid_argument("calinski_harabasz: negative label");
  }
  const std::size_t k = static_cast<std::size_t>(max_label) + 1;
  std::vector<std::size_t> count(k, 0);
  std::vector<std::vector<double>> centroid(k, std::vector<double>(d, 0.0));
  std::vector<double> global(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = static_cast<std::size_t>(data.labels[i]);
    ++count[l];
    for (std::size_t j = 0; j < d; ++j) {
      centroid[l][j] += data.points[i][j];
      global[j] += data.points[i][j];
    }
  }
  for (std::size_t l = 0; l < k; ++l) {
    if (count[l] == 0) throw std::invalid_argument("calinski_harabasz: label " + std::to_string(l) + " has no points");
    for (auto& v : centroid[l]) v /= static_cast<double>(count[l]);
  }
  if (n <= k) throw std::invalid_argument("calinski_harabasz: need more points than clusters");
  for (auto& v : global) v /= static_cast<double>(n);

  double between = 0.0, within = 0.0;
  for (std::size_t l = 0; l < k; ++l) {
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = centroid[l][j] - global[j];
      between += static_cast<double>(count[l]) * diff * diff;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = centroid[static_cast<std::size_t>(data.labels[i])];
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = data.points[i][j] - c[j];
      within += diff * diff;
    }
  }
  if (within == 0.0) return std::numeric_limits<double>::infinity();
  return (between / static_cast<double>(k - 1)) / (within / static_cast<double>(n - k));
}

LabeledLatents compact_labels(LabeledLatents data) {
  const std::set<int> present(data.labels.begin(), data.labels.end());
  for (auto& l : data.labels) l = static_cast<int>(std::distance(present.begin(), present.find(l)));
  return data;
}

double PermutationTest::quantile(double q) const {
  if (null.empty()) throw std::logic_error("permutation test: empty null");
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("permutation test: quantile must be in (0, 1]");
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(null.size())));
  return null[std::max<std::size_t>(rank, 1) - 1];
}

double PermutationTest::p_value() const {
  const auto above = static_cast<double>(null.end() - std::lower_bound(null.begin(), null.end(), observed));
  return (1.0 + above) / (1.0 + static_cast<double>(null.size()));
}

PermutationTest permutation_test(const LabeledLatents& data, std::size_t shuffles, Rng& rng) {
  PermutationTest t;
  t.observed = calinski_harabasz(data);
  LabeledLatents shuffled = data;
  t.null.reserve(shuffles);
  for (std::size_t s = 0; s < shuffles; ++s) {
    rng.shuffle(shuffled.labels.begin(), shuffled.labels.end());
    t.null.push_back(calinski_harabasz(shuffled));
  }
  std::sort(t.null.begin(), t.null.end());
  return t;
}

LatentExport export_latents(const seq::ModelParams<float>& params, const std::vector<sim::Dialogue>& dialogues,
                            const sim::Vocab& vocab) {
  LatentExport out;
  out.domain_names = sim::domain_names();
  out.act_names = sim::act_names();
  std::vector<std::vector<int>> contexts;
  for (const auto& d : dialogues) {
    const auto it = std::find(out.domain_names.begin(), out.domain_names.end(), d.goal.domain);
    if (it == out.domain_names.end()) throw std::invalid_argument("export: unknown domain " + d.goal.domain);
    for (const auto& t : d.turns) {
      contexts.push_back(obj::context_ids(t, vocab));
      out.domain.push_back(static_cast<int>(it - out.domain_names.begin()));
      out.act.push_back(sim::act_index(t.act));
    }
  }
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < contexts.size(); start += chunk) {
    const std::vector<std::vector<int>> part(contexts.begin() + static_cast<long>(start),
                                             contexts.begin() + static_cast<long>(std::min(contexts.size(), start + chunk)));
    ad::Tape<float> tape;
    const auto p = seq::bind(tape, params, seq::Trainable{false, false, false, false});
    const auto enc = seq::encode(p, seq::TokenBatch::make(part, vocab.size()));
    const auto mode = seq::latent_mode(seq::prior_head(p, enc.final));
    const std::size_t w = mode.size() / part.size();
    for (std::size_t r = 0; r < part.size(); ++r) {
      out.points.emplace_back(mode.begin() + static_cast<long>(r * w), mode.begin() + static_cast<long>((r + 1) * w));
    }
  }
  return out;
}

std::string format_latents(const LatentExport& e) {
  std::ostringstream s;
  s << std::setprecision(9);
  const std::size_t d = e.points.empty() ? 0 : e.points.front().size();
  s << "latents " << e.points.size() << ' ' << d << '\n';
  s << "domains";
  for (const auto& n : e.domain_names) s << ' ' << n;
  s << "\nacts";
  for (const auto& n : e.act_names) s << ' ' << n;
  s << '\n';
  for (std::size_t i = 0; i < e.points.size(); ++i) {
    s << e.domain[i] << ' ' << e.act[i];
    for (double v : e.points[i]) s << ' ' << v;
    s << '\n';
  }
  return s.str();
}

LatentExport parse_latents(const std::string& text) {
  std::istringstream in(text);
  std::string tag, line;
  std::size_t n = 0, d = 0;
  if (!(in >> tag >> n >> d) || tag != "latents") throw std::runtime_error("latents: bad header");
  LatentExport e;
  auto names = [&](const char* want, std::vector<std::string>& out) {
    std::getline(in >> std::ws, line);
    std::istringstream ls(line);
    ls >> tag;
    if (tag != want) throw std::runtime_error(std::string("latents: expected ") + want + " line");
    for (std::string w; ls >> w;) out.push_back(w);
  };
  names("domains", e.domain_names);
  names("acts", e.act_names);
  for (std::size_t i = 0; i < n; ++i) {
    int dom = 0, act = 0;
    std::vector<double> v(d);
    if (!(in >> dom >> act)) throw std::runtime_error("latents: truncated at row " + std::to_string(i));
    for (auto& x : v)
      if (!(in >> x)) throw std::runtime_error("latents: truncated at row " + std::to_string(i));
    e.domain.push_back(dom);
    e.act.push_back(act);
    e.points.push_back(std::move(v));
  }
  return e;
}

QuadraticFit fit_quadratic(const std::vector<double>& success, const std::vector<double>& bleu) {
  if (success.size() != bleu.size()) throw std::invalid_argument("fit: length mismatch");
  if (std::set<double>(success.begin(), success.end()).size() < 3) {
    throw std::invalid_argument("fit: need at least three distinct success values");
  }
  const auto n = static_cast<Eigen::Index>(success.size());
  Eigen::MatrixXd a(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = success[static_cast<std::size_t>(i)];
    a(i, 0) = 1.0;
    a(i, 1) = s;
    a(i, 2) = s * s;
    y(i) = bleu[static_cast<std::size_t>(i)];
  }
  const Eigen::Vector3d c = a.colPivHouseholderQr().solve(y);
  return {c(0), c(1), c(2)};
}

std::vector<GridCell> make_grid(const std::vector<double>& betas, const std::vector<double>& lambdas) {
  std::vector<GridCell> g;
  for (double b : betas)
    for (double l : lambdas) g.push_back({b, l});
  return g;
}

SweepResult pareto_sweep(const seq::ModelParams<float>& sl, const sim::Corpus& corpus, const sim::Vocab& vocab,
                         const std::vector<GridCell>& grid, const rl::RLConfig& base, double sl_bleu,
                         std::size_t workers) {
  SweepResult res;
  res.rows.resize(grid.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      auto& row = res.rows[i];
      row.cell = grid[i];
      try {
        auto cfg = base;
        cfg.beta = grid[i].beta;
        cfg.lambda = grid[i].lambda;
        const auto r = rl::rl_train(sl, corpus, vocab, cfg, sl_bleu);
        if (r.aborted) throw std::runtime_error(r.abort_reason);
        row.final_metrics = r.final_metrics;
        row.selected_metrics = r.selected_metrics;
        row.selected_epoch = r.selected_epoch;
        row.ok = true;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, grid.size()));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  std::vector<double> s, b;
  for (const auto& r : res.rows) {
    if (!r.ok) continue;
    s.push_back(r.final_metrics.success);
    b.push_back(r.final_metrics.bleu);
  }
  try {
    res.fit = fit_quadratic(s, b);
    res.fit_ok = true;
  } catch (const std::exception& e) {
    res.fit_error = e.what();
  }
  return res;
}

std::string format_sweep(const SweepResult& r) {
  std::ostringstream s;
  s << std::setprecision(10);
  s << "beta\tlambda\tsuccess\tbleu\tinform\tavg_len\tkl_mean\tselected_epoch\tselected_success\tselected_bleu\n";
  for (const auto& row : r.rows) {
    if (!row.ok) continue;
    const auto& f = row.final_metrics;
    s << row.cell.beta << '\t' << row.cell.lambda << '\t' << f.success << '\t' << f.bleu << '\t' << f.inform << '\t' << f.avg_len << '\t' << f.kl_mean << '\t'
      << row.selected_epoch << '\t' << row.selected_metrics.success << '\t' << row.selected_metrics.bleu << '\n';
  }
  for (const auto& row : r.rows) {
    if (row.ok) continue;
    std::string msg = row.error;
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    s << "# failed beta=" << row.cell.beta << " lambda=" << row.cell.lambda << ": " << msg << '\n';
  }
  if (r.fit_ok) s << "# fit bleu = " << r.fit.c0 << " + " << r.fit.c1 << " * s + " << r.fit.c2 << " * s^2\n";
  return s.str();
}

}  // namespace tucp::analysis
