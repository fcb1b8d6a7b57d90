#include "ng/vocab.hpp"

#include <stdexcept>

#include "ng/rng.hpp"
#include "ng/sha256.hpp"

namespace ng {

namespace {
const char* kAttrNames[kNumAttributes] = {"gender", "race", "appearance", "disability", "religion", "age"};
const char* kControlNames[Vocab::kNumControl] = {"<pad>", "<bos>", "<sep>", "<usr>", "<mdl>", "<q>",
                                                 "<aff>", "<neg>", "<no>",  "<ana>", "<fmt>"};
}  // namespace

const char* attribute_name(AttributeTag a) { return kAttrNames[static_cast<size_t>(a)]; }

AttributeTag attribute_from_name(const std::string& s) {
  for (int i = 0; i < kNumAttributes; ++i)
    if (s == kAttrNames[i]) return static_cast<AttributeTag>(i);
  throw std::invalid_argument("unknown attribute '" + s + "'");
}

const char* token_class_name(TokenClass c) {
  switch (c) {
    case TokenClass::kControl: return "control";
    case TokenClass::kAttribute: return "attribute";
    case TokenClass::kStereotype: return "stereotype";
    case TokenClass::kNeutralPred: return "neutral";
    case TokenClass::kToxic: return "toxic";
    case TokenClass::kFactQ: return "fact_q";
    case TokenClass::kFactA: return "fact_a";
    case TokenClass::kFiller: return "filler";
  }
  return "?";
}

TokenClass Vocab::class_of(int id) const {
  if (!contains(id)) throw std::invalid_argument("token id " + std::to_string(id) + " out of range");
  return class_of_[static_cast<size_t>(id)];
}

AttributeTag Vocab::attribute_of(int id) const {
  int g = contains(id) ? group_of_[static_cast<size_t>(id)] : -1;
  if (g < 0) throw std::invalid_argument("token " + std::to_string(id) + " has no attribute group");
  return static_cast<AttributeTag>(g);
}

std::vector<int> Vocab::all_attribute_tokens() const {
  std::vector<int> out;
  for (const auto& v : attr_) out.insert(out.end(), v.begin(), v.end());
  return out;
}

std::vector<int> Vocab::all_stereotype_tokens() const {
  std::vector<int> out;
  for (const auto& v : ster_) out.insert(out.end(), v.begin(), v.end());
  return out;
}

int Vocab::fact_index_of(int id) const {
  if (!contains(id)) return -1;
  return fact_index_[static_cast<size_t>(id)];
}

bool Vocab::is_paired(int attr_token, int stereotype_token) const {
  if (!contains(attr_token) || !contains(stereotype_token)) return false;
  if (class_of_[static_cast<size_t>(attr_token)] != TokenClass::kAttribute) return false;
  if (class_of_[static_cast<size_t>(stereotype_token)] != TokenClass::kStereotype) return false;
  return group_of_[static_cast<size_t>(attr_token)] == group_of_[static_cast<size_t>(stereotype_token)];
}

std::string Vocab::token_name(int id) const {
  if (!contains(id)) return "<invalid:" + std::to_string(id) + ">";
  if (id < kNumControl) return kControlNames[id];
  TokenClass c = class_of_[static_cast<size_t>(id)];
  auto pos_in = [&](const std::vector<int>& v) {
    for (size_t i = 0; i < v.size(); ++i)
      if (v[i] == id) return static_cast<int>(i);
    return -1;
  };
  switch (c) {
    case TokenClass::kAttribute: {
      int g = group_of_[static_cast<size_t>(id)];
      return std::string("attr:") + kAttrNames[g] + ":" +
             std::to_string(pos_in(attr_[static_cast<size_t>(g)]));
    }
    case TokenClass::kStereotype: {
      int g = group_of_[static_cast<size_t>(id)];
      return std::string("ster:") + kAttrNames[g] + ":" +
             std::to_string(pos_in(ster_[static_cast<size_t>(g)]));
    }
    case TokenClass::kNeutralPred: {
      int g = group_of_[static_cast<size_t>(id)];
      return std::string("neut:") + kAttrNames[g] + ":" +
             std::to_string(pos_in(neut_[static_cast<size_t>(g)]));
    }
    case TokenClass::kToxic: return "tox:" + std::to_string(pos_in(toxic_));
    case TokenClass::kFactQ: return "fq:" + std::to_string(fact_index_[static_cast<size_t>(id)]);
    case TokenClass::kFactA: return "fa:" + std::to_string(fact_index_[static_cast<size_t>(id)]);
    case TokenClass::kFiller: return "w:" + std::to_string(pos_in(filler_));
    default: return "?";
  }
}

std::string Vocab::token_seq_str(const std::vector<int>& toks) const {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += " ";
    out += token_name(toks[i]);
  }
  return out;
}

std::string Vocab::digest() const {
  Sha256 d;
  for (int id = 0; id < size(); ++id) {
    std::string n = token_name(id) + "\n";
    d.update(n);
  }
  return d.hex_digest();
}

Vocab build_vocab(const VocabSpec& spec) {
  if (spec.surface_per_attribute < 1 || spec.stereotypes_per_attribute < 1 ||
      spec.neutral_per_attribute < 1 || spec.num_toxic < 1 || spec.num_facts < 1)
    throw std::invalid_argument("build_vocab: every token class needs at least one token");
  int needed = Vocab::kNumControl +
               kNumAttributes * (spec.surface_per_attribute + spec.stereotypes_per_attribute +
                                 spec.neutral_per_attribute) +
               spec.num_toxic + 2 * spec.num_facts;
  if (needed >= spec.total_size)
    throw std::invalid_argument("build_vocab: token classes overlap: " + std::to_string(needed) +
                                " class slots do not fit disjointly in total_size " +
                                std::to_string(spec.total_size) + " with room for filler");

  Vocab v;
  v.spec_ = spec;
  int n = spec.total_size;
  v.class_of_.assign(static_cast<size_t>(n), TokenClass::kFiller);
  v.group_of_.assign(static_cast<size_t>(n), -1);
  v.fact_index_.assign(static_cast<size_t>(n), -1);

  // Non-control ids get a seeded permutation; class membership stays exact
  // and queryable, only the numbering moves.
  std::vector<int> ids;
  for (int i = Vocab::kNumControl; i < n; ++i) ids.push_back(i);
  Rng rng = Rng::stream(spec.seed, "vocab");
  rng.shuffle(ids);
  size_t next = 0;
  auto take = [&]() { return ids[next++]; };

  for (int i = 0; i < Vocab::kNumControl; ++i) v.class_of_[static_cast<size_t>(i)] = TokenClass::kControl;

  for (int g = 0; g < kNumAttributes; ++g) {
    for (int s = 0; s < spec.surface_per_attribute; ++s) {
      int id = take();
      v.class_of_[static_cast<size_t>(id)] = TokenClass::kAttribute;
      v.group_of_[static_cast<size_t>(id)] = g;
      v.attr_[static_cast<size_t>(g)].push_back(id);
    }
    for (int s = 0; s < spec.stereotypes_per_attribute; ++s) {
      int id = take();
      v.class_of_[static_cast<size_t>(id)] = TokenClass::kStereotype;
      v.group_of_[static_cast<size_t>(id)] = g;
      v.ster_[static_cast<size_t>(g)].push_back(id);
    }
    for (int s = 0; s < spec.neutral_per_attribute; ++s) {
      int id = take();
      v.class_of_[static_cast<size_t>(id)] = TokenClass::kNeutralPred;
      v.group_of_[static_cast<size_t>(id)] = g;
      v.neut_[static_cast<size_t>(g)].push_back(id);
    }
  }
  for (int i = 0; i < spec.num_toxic; ++i) {
    int id = take();
    v.class_of_[static_cast<size_t>(id)] = TokenClass::kToxic;
    v.toxic_.push_back(id);
  }
  for (int i = 0; i < spec.num_facts; ++i) {
    int q = take(), a = take();
    v.class_of_[static_cast<size_t>(q)] = TokenClass::kFactQ;
    v.class_of_[static_cast<size_t>(a)] = TokenClass::kFactA;
    v.fact_index_[static_cast<size_t>(q)] = i;
    v.fact_index_[static_cast<size_t>(a)] = i;
    v.fact_q_.push_back(q);
    v.fact_a_.push_back(a);
  }
  while (next < ids.size()) v.filler_.push_back(take());

  return v;
}

}  // namespace ng
