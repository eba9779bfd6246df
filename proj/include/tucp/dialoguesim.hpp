#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

// Synthetic delexicalized slot-filling corpus and the benchmark metric suite.
//
// Tokens are whitespace-separated strings. Anything of the form [x] is a
// placeholder: [value_area] style tokens carry user constraints, [domain_slot]
// tokens are what system responses must mention.

namespace tucp::sim {

using Tokens = std::vector<std::string>;

bool is_slot_token(const std::string& tok);
Tokens split_tokens(const std::string& text);
std::string join_tokens(const Tokens& toks);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;

  Vocab();
  // Reserved tokens first, then every other token in sorted order.
  static Vocab from_tokens(const std::set<std::string>& tokens);

  int id(const std::string& tok) const;  // throws std::out_of_range on unknown tokens
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  bool is_slot(int id) const { return slot_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const Tokens& toks) const;
  Tokens decode(std::span<const int> ids) const;  // stops at eos, skips pad/bos

 private:
  void add(const std::string& tok);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<bool> slot_;
};

struct GoalSpec {
  std::string domain;
  Tokens constraints;    // informable slot names, e.g. "area"
  Tokens requestables;   // slot tokens, e.g. "[hotel_phone]"
};

struct DialogueTurn {
  Tokens user;
  Tokens state;
  Tokens response;
  Tokens requested;  // slot tokens the gold response must mention
  std::string act;   // template family id of the gold response
};

struct Dialogue {
  std::string id;
  std::string split;
  GoalSpec goal;
  std::vector<DialogueTurn> turns;
};

struct CorpusParams {
  std::uint64_t seed = 1;
  std::size_t n_dialogues = 1000;
  std::size_t n_domains = 3;
  std::size_t slots_per_domain = 4;
  std::size_t min_turns = 2;
  std::size_t max_turns = 5;
  // Probability that a request turn leaves the wanted slots unsaid.
  double p_vague = 0.4;
  // Probability that the system phrasing follows the user phrasing.
  double p_linked = 0.85;
  // Probability that the offer turn lists every requestable of the domain.
  double p_volunteer = 0.3;
  std::size_t max_vocab = 400;
};

struct Corpus {
  CorpusParams params;
  std::vector<Dialogue> train, valid, test;

  const std::vector<Dialogue>& split(const std::string& name) const;
  std::size_t size() const { return train.size() + valid.size() + test.size(); }
  Vocab vocab() const;
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Domain names available to the generator, in order.
const std::vector<std::string>& domain_names();
std::string name_slot(const std::string& domain);
// Response family ids, used as act labels.
const std::vector<std::string>& act_names();
int act_index(const std::string& act);

Corpus generate_corpus(const CorpusParams& params);

// One header line with the generator params, then one dialogue per line.
std::string serialize(const Corpus& corpus);
Corpus deserialize(const std::string& text);
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

std::uint64_t fnv1a64(std::string_view data);
std::uint64_t corpus_hash(const Corpus& corpus);
std::string hex64(std::uint64_t v);

// ---- metrics ----

// 1 iff every goal requestable appears somewhere in the dialogue's responses.
int evaluate_success(const Dialogue& dialogue, const std::vector<Tokens>& responses);
// 1 iff the domain's name placeholder appears somewhere in the responses.
int evaluate_inform(const Dialogue& dialogue, const std::vector<Tokens>& responses);

// Corpus-level BLEU-4 in [0, 100], one reference per hypothesis. Clipped
// precisions with add-one smoothing for n >= 2 and the usual brevity penalty.
double bleu(const std::vector<Tokens>& references, const std::vector<Tokens>& hypotheses);

struct Diversity {
  double avg_len = 0.0;
  double cbe = 0.0;  // conditional bigram entropy, bits
  std::size_t unigrams = 0;
  std::size_t bigrams = 0;
  std::size_t trigrams = 0;
};
Diversity diversity_metrics(const std::vector<Tokens>& hypotheses);

struct CorpusScores {
  double success = 0.0;  // percent
  double inform = 0.0;   // percent
  double bleu = 0.0;
  Diversity diversity;
};

// responses[i][t] is the generated response for turn t of dialogues[i].
CorpusScores score_corpus(const std::vector<Dialogue>& dialogues, const std::vector<std::vector<Tokens>>& responses);

}  // namespace tucp::sim
