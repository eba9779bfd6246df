#include "tucp/dialoguesim.hpp"
#include "tucp/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tucp::sim {

using json = nlohmann::ordered_json;

bool is_slot_token(const std::string& tok) {
  return tok.size() > 2 && tok.front() == '[' && tok.back() == ']';
}

Tokens split_tokens(const std::string& text) {
  Tokens out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const Tokens& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

// ---- Vocab ----

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<bos>", "<eos>", "<sep>"}) add(t);
}

void Vocab::add(const std::string& tok) {
  if (index_.count(tok)) return;
  index_.emplace(tok, static_cast<int>(tokens_.size()));
  tokens_.push_back(tok);
  slot_.push_back(is_slot_token(tok));
}

Vocab Vocab::from_tokens(const std::set<std::string>& tokens) {
  Vocab v;
  for (const auto& t : tokens) v.add(t);
  return v;
}

int Vocab::id(const std::string& tok) const {
  auto it = index_.find(tok);
  if (it == index_.end()) throw std::out_of_range("vocab: unknown token '" + tok + "'");
  return it->second;
}

std::vector<int> Vocab::encode(const Tokens& toks) const {
  std::vector<int> out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(id(t));
  return out;
}

Tokens Vocab::decode(std::span<const int> ids) const {
  Tokens out;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    out.push_back(token(i));
  }
  return out;
}

// ---- generator tables ----

namespace {

struct DomainDef {
  std::string name;
  std::vector<std::string> informables;
  std::vector<std::string> requestables;
};

const std::vector<DomainDef>& domains() {
  static const std::vector<DomainDef> table = {
      {"restaurant", {"area", "pricerange", "food"}, {"address", "phone", "postcode", "reference", "openhours"}},
      {"hotel", {"area", "pricerange", "stars", "type"}, {"address", "phone", "postcode", "reference", "parking"}},
      {"attraction", {"area", "type"}, {"address", "phone", "postcode", "entrancefee", "openhours"}},
      {"train", {"departure", "destination", "day"}, {"price", "duration", "leaveat", "reference", "arriveby"}},
      {"taxi", {"departure", "destination"}, {"phone", "cartype", "colour", "reference", "arriveby"}},
  };
  return table;
}

const std::map<std::string, std::string>& slot_words() {
  static const std::map<std::string, std::string> words = {
      {"address", "address"},         {"phone", "phone number"},      {"postcode", "postcode"},
      {"reference", "reference number"}, {"openhours", "opening hours"}, {"parking", "parking"},
      {"entrancefee", "entrance fee"}, {"price", "price"},            {"duration", "travel time"},
      {"leaveat", "departure time"},  {"arriveby", "arrival time"},   {"cartype", "car type"},
      {"colour", "car colour"},
  };
  return words;
}

std::string constraint_phrase(const std::string& c) {
  if (c == "area") return "in the [value_area]";
  if (c == "pricerange") return "in the [value_pricerange] price range";
  if (c == "food") return "serving [value_food] food";
  if (c == "stars") return "with [value_stars] stars";
  if (c == "type") return "of type [value_type]";
  if (c == "departure") return "from [value_departure]";
  if (c == "destination") return "to [value_destination]";
  if (c == "day") return "on [value_day]";
  throw std::logic_error("no phrase for constraint " + c);
}

std::string slot_token(const std::string& domain, const std::string& slot) { return "[" + domain + "_" + slot + "]"; }

// Joins items as "a", "a and b", "a , b and c".
std::string enumerate(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += (i + 1 == items.size()) ? " and " : " , ";
    out += items[i];
  }
  return out;
}

void replace_all(std::string& s, const std::string& key, const std::string& value) {
  for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
    s.replace(pos, key.size(), value);
  }
}

struct Template {
  std::string act;
  std::vector<std::string> variants;
};

// {D} domain word, {N} name slot, {P} constraint phrases, {S} slot words,
// {I} "the w is [slot]" items, {H} "w [slot]" items.
const std::vector<std::string> kUserFind = {
    "i am looking for a {D} {P} .",
    "can you help me find a {D} {P} ?",
    "i would like a {D} {P} .",
    "please find me a {D} {P} .",
};
const std::vector<std::string> kUserRequest = {
    "what is the {S} ?",
    "can i get the {S} please ?",
    "could you tell me the {S} ?",
    "i need the {S} of the {D} .",
};
const std::vector<std::string> kUserVague = {
    "can you tell me more about it ?",
    "what other details do you have ?",
    "i need some more information please .",
};
const std::vector<std::string> kUserBye = {
    "thank you , goodbye .",
    "thanks , that is all i need .",
    "great , bye .",
};

const std::vector<Template> kOffer = {
    {"offer", {"[N] is a {D} {P} .", "i recommend [N] , a {D} {P} .", "how about [N] ? it is {P} ."}},
    {"offer_more",
     {"[N] is a {D} {P} . would you like to know more ?", "i found [N] {P} . what else can i tell you ?"}},
};
// Offer that volunteers every requestable of the domain.
const std::vector<Template> kOfferAll = {
    {"offer_all", {"here is [N] , a {D} {P} . the {I} ."}},
};
const std::vector<Template> kInform = {
    {"inform", {"the {I} .", "sure , the {I} .", "of course ! the {I} ."}},
    {"inform_name", {"[N] has {H} .", "for [N] the {I} ."}},
    {"inform_more", {"the {I} . anything else ?", "the {I} . is there anything else i can do ?"}},
};
const std::vector<Template> kBye = {
    {"bye", {"you are welcome , goodbye .", "thank you for using our service .", "have a nice day !"}},
};

// System phrasing follows the user phrasing (entry `key` of the flattened
// family list) with probability p_linked, otherwise it is drawn uniformly.
std::pair<std::string, std::string> linked_variant(Rng& rng, const std::vector<Template>& families, std::size_t key,
                                                   double p_linked) {
  std::vector<std::pair<std::string, std::string>> flat;
  for (const auto& f : families)
    for (const auto& v : f.variants) flat.emplace_back(f.act, v);
  const bool linked = rng.uniform() < p_linked;
  return flat[linked ? key % flat.size() : rng.below(flat.size())];
}

struct Fill {
  std::string domain;
  std::vector<std::string> constraints;
  std::vector<std::string> slots;
};

Tokens render(const std::string& pattern, const Fill& f) {
  std::string s = pattern;
  std::vector<std::string> phrases, words, items, has;
  for (const auto& c : f.constraints) phrases.push_back(constraint_phrase(c));
  for (const auto& sl : f.slots) {
    const auto& w = slot_words().at(sl);
    words.push_back(w);
    items.push_back(w + " is " + slot_token(f.domain, sl));
    has.push_back(w + " " + slot_token(f.domain, sl));
  }
  std::string p;
  for (std::size_t i = 0; i < phrases.size(); ++i) p += (i ? " " : "") + phrases[i];
  std::string joined_items;
  for (std::size_t i = 0; i < items.size(); ++i) joined_items += (i ? " and the " : "") + items[i];
  const bool vowel = std::string("aeiou").find(f.domain[0]) != std::string::npos;
  replace_all(s, "a {D}", (vowel ? "an " : "a ") + f.domain);
  replace_all(s, "{D}", f.domain);
  replace_all(s, "[N]", name_slot(f.domain));
  replace_all(s, "{P}", p);
  replace_all(s, "{S}", enumerate(words));
  replace_all(s, "{I}", joined_items);
  replace_all(s, "{H}", enumerate(has));
  return split_tokens(s);
}

Tokens state_tokens(const Fill& f) {
  Tokens out = {f.domain};
  for (const auto& c : f.constraints) {
    out.push_back(c);
    out.push_back("[value_" + c + "]");
  }
  return out;
}

void validate(const CorpusParams& p) {
  if (p.n_domains < 2 || p.n_domains > domains().size()) {
    throw std::invalid_argument("corpus: n_domains must be in [2, " + std::to_string(domains().size()) + "]");
  }
  if (p.slots_per_domain < 1 || p.slots_per_domain > 5) {
    throw std::invalid_argument("corpus: slots_per_domain must be in [1, 5]");
  }
  if (p.min_turns < 2 || p.max_turns < p.min_turns) {
    throw std::invalid_argument("corpus: turns range must satisfy 2 <= min_turns <= max_turns");
  }
  if (!(p.p_vague >= 0.0 && p.p_vague <= 1.0)) throw std::invalid_argument("corpus: p_vague must be in [0, 1]");
  if (!(p.p_volunteer >= 0.0 && p.p_volunteer <= 1.0)) {
    throw std::invalid_argument("corpus: p_volunteer must be in [0, 1]");
  }
  if (!(p.p_linked >= 0.0 && p.p_linked <= 1.0)) throw std::invalid_argument("corpus: p_linked must be in [0, 1]");
  if (p.n_dialogues < 1) throw std::invalid_argument("corpus: n_dialogues must be positive");
}

Dialogue generate_dialogue(const CorpusParams& p, Rng& rng) {
  const auto& dom = domains()[rng.below(p.n_domains)];
  Fill fill;
  fill.domain = dom.name;

  // Constraints: a random non-empty subset, kept in table order.
  const std::size_t n_con = 1 + rng.below(std::min<std::size_t>(3, dom.informables.size()));
  std::vector<std::size_t> idx(dom.informables.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(n_con);
  std::sort(idx.begin(), idx.end());
  for (auto i : idx) fill.constraints.push_back(dom.informables[i]);

  const std::size_t n_turns = p.min_turns + rng.below(p.max_turns - p.min_turns + 1);
  const bool bye = n_turns >= 3 && rng.below(2) == 1;
  const std::size_t middle = std::min(n_turns - 1 - (bye ? 1 : 0), p.slots_per_domain);
  const std::size_t n_req = middle + rng.below(p.slots_per_domain - middle + 1);

  std::vector<std::string> pool(dom.requestables.begin(), dom.requestables.begin() + p.slots_per_domain);
  rng.shuffle(pool.begin(), pool.end());
  pool.resize(n_req);
  std::vector<std::vector<std::string>> chunks(middle);
  for (std::size_t i = 0; i < middle; ++i) chunks[i].push_back(pool[i]);
  for (std::size_t i = middle; i < n_req; ++i) chunks[rng.below(middle)].push_back(pool[i]);

  Dialogue d;
  d.goal.domain = dom.name;
  d.goal.constraints = fill.constraints;
  const Tokens state = state_tokens(fill);

  auto add_turn = [&](const std::vector<std::string>& user, std::size_t user_offset,
                      const std::vector<Template>& families, const Fill& f) {
    const std::size_t u = rng.below(user.size());
    const auto [act, variant] = linked_variant(rng, families, user_offset + u, p.p_linked);
    DialogueTurn t;
    t.user = render(user[u], f);
    t.response = render(variant, f);
    t.act = act;
    t.state = state;
    for (const auto& sl : f.slots) {
      t.requested.push_back(slot_token(dom.name, sl));
      d.goal.requestables.push_back(slot_token(dom.name, sl));
    }
    d.turns.push_back(std::move(t));
  };

  if (rng.uniform() < p.p_volunteer) {
    const std::size_t u = rng.below(kUserFind.size());
    Fill all = fill;
    all.slots.assign(dom.requestables.begin(), dom.requestables.begin() + p.slots_per_domain);
    DialogueTurn t;
    t.user = render(kUserFind[u], fill);
    t.response = render(kOfferAll[0].variants[0], all);
    t.act = kOfferAll[0].act;
    t.state = state;
    d.turns.push_back(std::move(t));
  } else {
    add_turn(kUserFind, 0, kOffer, fill);
  }
  for (const auto& chunk : chunks) {
    Fill f = fill;
    f.slots = chunk;
    if (rng.uniform() < p.p_vague) {
      add_turn(kUserVague, kUserRequest.size(), kInform, f);
    } else {
      add_turn(kUserRequest, 0, kInform, f);
    }
  }
  if (bye) add_turn(kUserBye, 0, kBye, fill);
  return d;
}

json tokens_json(const Tokens& t) { return join_tokens(t); }

CorpusParams params_from_json(const json& j) {
  CorpusParams p;
  p.seed = j.at("seed").get<std::uint64_t>();
  p.n_dialogues = j.at("n_dialogues").get<std::size_t>();
  p.n_domains = j.at("n_domains").get<std::size_t>();
  p.slots_per_domain = j.at("slots_per_domain").get<std::size_t>();
  p.min_turns = j.at("min_turns").get<std::size_t>();
  p.max_turns = j.at("max_turns").get<std::size_t>();
  p.p_vague = j.at("p_vague").get<double>();
  p.p_linked = j.at("p_linked").get<double>();
  p.p_volunteer = j.at("p_volunteer").get<double>();
  p.max_vocab = j.at("max_vocab").get<std::size_t>();
  return p;
}

}  // namespace

const std::vector<std::string>& domain_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& d : domains()) out.push_back(d.name);
    return out;
  }();
  return names;
}

std::string name_slot(const std::string& domain) { return slot_token(domain, "name"); }

const std::vector<std::string>& act_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto* group : {&kOffer, &kOfferAll, &kInform, &kBye}) {
      for (const auto& t : *group) out.push_back(t.act);
    }
    return out;
  }();
  return names;
}

int act_index(const std::string& act) {
  const auto& names = act_names();
  auto it = std::find(names.begin(), names.end(), act);
  if (it == names.end()) throw std::invalid_argument("unknown act '" + act + "'");
  return static_cast<int>(it - names.begin());
}

const std::vector<Dialogue>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

Vocab Corpus::vocab() const {
  std::set<std::string> toks;
  for (const auto* s : {&train, &valid, &test}) {
    for (const auto& d : *s) {
      for (const auto& t : d.turns) {
        toks.insert(t.user.begin(), t.user.end());
        toks.insert(t.state.begin(), t.state.end());
        toks.insert(t.response.begin(), t.response.end());
      }
    }
  }
  // Every slot of every active domain, even those no dialogue happened to use.
  for (std::size_t i = 0; i < params.n_domains; ++i) {
    const auto& dom = domains()[i];
    toks.insert(name_slot(dom.name));
    for (std::size_t k = 0; k < params.slots_per_domain; ++k) toks.insert(slot_token(dom.name, dom.requestables[k]));
  }
  return Vocab::from_tokens(toks);
}

Corpus generate_corpus(const CorpusParams& params) {
  validate(params);
  Rng rng(params.seed);
  Corpus c;
  c.params = params;
  const std::size_t n_train = params.n_dialogues * 8 / 10;
  const std::size_t n_valid = params.n_dialogues / 10;
  for (std::size_t i = 0; i < params.n_dialogues; ++i) {
    Dialogue d = generate_dialogue(params, rng);
    char id[32];
    std::snprintf(id, sizeof id, "d%05zu", i);
    d.id = id;
    if (i < n_train) {
      d.split = "train";
      c.train.push_back(std::move(d));
    } else if (i < n_train + n_valid) {
      d.split = "valid";
      c.valid.push_back(std::move(d));
    } else {
      d.split = "test";
      c.test.push_back(std::move(d));
    }
  }
  const auto v = c.vocab();
  if (v.size() > params.max_vocab) {
    throw CorpusError("corpus: vocabulary of " + std::to_string(v.size()) + " tokens exceeds max_vocab " +
                      std::to_string(params.max_vocab));
  }
  return c;
}

std::string serialize(const Corpus& corpus) {
  std::string out;
  const auto& p = corpus.params;
  json header = {{"format", "tucp-corpus-1"},
                 {"seed", p.seed},
                 {"n_dialogues", p.n_dialogues},
                 {"n_domains", p.n_domains},
                 {"slots_per_domain", p.slots_per_domain},
                 {"min_turns", p.min_turns},
                 {"max_turns", p.max_turns},
                 {"p_vague", p.p_vague},
                 {"p_linked", p.p_linked},
                 {"p_volunteer", p.p_volunteer},
                 {"max_vocab", p.max_vocab}};
  out += header.dump() + "\n";
  for (const auto* s : {&corpus.train, &corpus.valid, &corpus.test}) {
    for (const auto& d : *s) {
      json turns = json::array();
      for (const auto& t : d.turns) {
        turns.push_back({{"user", tokens_json(t.user)},
                         {"state", tokens_json(t.state)},
                         {"response", tokens_json(t.response)},
                         {"requested", t.requested},
                         {"act", t.act}});
      }
      json line = {{"id", d.id},
                   {"split", d.split},
                   {"goal",
                    {{"domain", d.goal.domain},
                     {"constraints", d.goal.constraints},
                     {"requestables", d.goal.requestables}}},
                   {"turns", std::move(turns)}};
      out += line.dump() + "\n";
    }
  }
  return out;
}

Corpus deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw CorpusError("corpus: empty file");
  Corpus c;
  try {
    const auto header = json::parse(line);
    if (header.value("format", "") != "tucp-corpus-1") throw CorpusError("corpus: unrecognized header");
    c.params = params_from_json(header);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      Dialogue d;
      d.id = j.at("id").get<std::string>();
      d.split = j.at("split").get<std::string>();
      const auto& g = j.at("goal");
      d.goal.domain = g.at("domain").get<std::string>();
      d.goal.constraints = g.at("constraints").get<Tokens>();
      d.goal.requestables = g.at("requestables").get<Tokens>();
      for (const auto& tj : j.at("turns")) {
        DialogueTurn t;
        t.user = split_tokens(tj.at("user").get<std::string>());
        t.state = split_tokens(tj.at("state").get<std::string>());
        t.response = split_tokens(tj.at("response").get<std::string>());
        t.requested = tj.at("requested").get<Tokens>();
        t.act = tj.at("act").get<std::string>();
        d.turns.push_back(std::move(t));
      }
      if (d.split == "train") {
        c.train.push_back(std::move(d));
      } else if (d.split == "valid") {
        c.valid.push_back(std::move(d));
      } else if (d.split == "test") {
        c.test.push_back(std::move(d));
      } else {
        throw CorpusError("corpus: dialogue " + d.id + " has unknown split '" + d.split + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(std::string("corpus: malformed record: ") + e.what());
  }
  return c;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("corpus: cannot write " + path);
  out << serialize(corpus);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("corpus: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t corpus_hash(const Corpus& corpus) { return fnv1a64(serialize(corpus)); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace tucp::sim
