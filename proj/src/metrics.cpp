#include "tucp/dialoguesim.hpp"

#include <cmath>
#include <map>
#include <unordered_set>

namespace tucp::sim {

namespace {

std::unordered_set<std::string> mentioned(const std::vector<Tokens>& responses) {
  std::unordered_set<std::string> out;
  for (const auto& r : responses) out.insert(r.begin(), r.end());
  return out;
}

std::map<Tokens, std::size_t> ngram_counts(const Tokens& toks, std::size_t n) {
  std::map<Tokens, std::size_t> out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[Tokens(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace

int evaluate_success(const Dialogue& dialogue, const std::vector<Tokens>& responses) {
  const auto seen = mentioned(responses);
  for (const auto& slot : dialogue.goal.requestables) {
    if (!seen.count(slot)) return 0;
  }
  return 1;
}

int evaluate_inform(const Dialogue& dialogue, const std::vector<Tokens>& responses) {
  return mentioned(responses).count(name_slot(dialogue.goal.domain)) ? 1 : 0;
}

double bleu(const std::vector<Tokens>& references, const std::vector<Tokens>& hypotheses) {
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty hypothesis list");
  if (references.size() != hypotheses.size()) {
    throw std::invalid_argument("bleu: " + std::to_string(references.size()) + " references vs " +
                                std::to_string(hypotheses.size()) + " hypotheses");
  }
  double matches[4] = {0, 0, 0, 0};
  double totals[4] = {0, 0, 0, 0};
  double hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    hyp_len += static_cast<double>(hypotheses[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = ngram_counts(hypotheses[i], n);
      const auto r = ngram_counts(references[i], n);
      for (const auto& [gram, count] : h) {
        totals[n - 1] += static_cast<double>(count);
        auto it = r.find(gram);
        if (it != r.end()) matches[n - 1] += static_cast<double>(std::min(count, it->second));
      }
    }
  }
  if (hyp_len == 0 || matches[0] == 0) return 0.0;
  double log_p = std::log(matches[0] / totals[0]);
  for (std::size_t n = 1; n < 4; ++n) log_p += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_p / 4.0);
}

Diversity diversity_metrics(const std::vector<Tokens>& hypotheses) {
  Diversity d;
  if (hypotheses.empty()) return d;
  std::set<Tokens> uni, bi, tri;
  std::map<std::string, std::map<std::string, double>> pairs;
  std::size_t total_len = 0;
  double n_pairs = 0;
  for (const auto& h : hypotheses) {
    total_len += h.size();
    for (std::size_t i = 0; i < h.size(); ++i) {
      uni.insert({h[i]});
      if (i + 1 < h.size()) {
        bi.insert({h[i], h[i + 1]});
        pairs[h[i]][h[i + 1]] += 1.0;
        n_pairs += 1.0;
      }
      if (i + 2 < h.size()) tri.insert({h[i], h[i + 1], h[i + 2]});
    }
  }
  d.avg_len = static_cast<double>(total_len) / static_cast<double>(hypotheses.size());
  d.unigrams = uni.size();
  d.bigrams = bi.size();
  d.trigrams = tri.size();
  for (const auto& [w1, nexts] : pairs) {
    double c1 = 0;
    for (const auto& [w2, c] : nexts) c1 += c;
    for (const auto& [w2, c] : nexts) d.cbe -= (c / n_pairs) * std::log2(c / c1);
  }
  return d;
}

CorpusScores score_corpus(const std::vector<Dialogue>& dialogues, const std::vector<std::vector<Tokens>>& responses) {
  if (dialogues.size() != responses.size()) throw std::invalid_argument("score_corpus: dialogue/response count mismatch");
  CorpusScores s;
  if (dialogues.empty()) return s;
  std::vector<Tokens> refs, hyps;
  double succ = 0, inform = 0;
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    if (responses[i].size() != dialogues[i].turns.size()) {
      throw std::invalid_argument("score_corpus: dialogue " + dialogues[i].id + " needs one response per turn");
    }
    succ += evaluate_success(dialogues[i], responses[i]);
    inform += evaluate_inform(dialogues[i], responses[i]);
    for (std::size_t t = 0; t < dialogues[i].turns.size(); ++t) {
      refs.push_back(dialogues[i].turns[t].response);
      hyps.push_back(responses[i][t]);
    }
  }
  const double n = static_cast<double>(dialogues.size());
  s.success = 100.0 * succ / n;
  s.inform = 100.0 * inform / n;
  s.bleu = bleu(refs, hyps);
  s.diversity = diversity_metrics(hyps);
  return s;
}

}  // namespace tucp::sim
