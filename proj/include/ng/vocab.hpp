#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ng {

// The six demographic attribute groups of the toy world.
enum class AttributeTag { kGender, kRace, kAppearance, kDisability, kReligion, kAge };
constexpr int kNumAttributes = 6;
const char* attribute_name(AttributeTag a);
AttributeTag attribute_from_name(const std::string& s);

enum class TokenClass { kControl, kAttribute, kStereotype, kNeutralPred, kToxic, kFactQ, kFactA, kFiller };
const char* token_class_name(TokenClass c);

// Layout request for a symbolic vocabulary. The corpus is symbolic on
// purpose: every judge decision and every ground-truth label is exact,
// so downstream statistics measure the neuron mechanism, not NLP noise.
struct VocabSpec {
  int surface_per_attribute = 1;   // attribute mention tokens per group
  int stereotypes_per_attribute = 2;
  int neutral_per_attribute = 8;   // unbiased continuations per group
  int num_toxic = 4;
  int num_facts = 12;              // reliable q->a knowledge pairs
  int total_size = 200;            // filler absorbs the remainder
  uint64_t seed = 0;               // permutes non-control token ids
};

class Vocab {
public:
  // Control token ids (pinned at the front of the id space).
  int pad = 0, bos = 1, sep = 2, usr = 3, mdl = 4, question = 5;
  int aff = 6, neg = 7, decline = 8, anaphor = 9, fmt = 10;
  static constexpr int kNumControl = 11;

  int size() const { return static_cast<int>(class_of_.size()); }
  bool contains(int id) const { return id >= 0 && id < size(); }

  TokenClass class_of(int id) const;
  // Attribute group of an attribute/stereotype/neutral-predicate token.
  AttributeTag attribute_of(int id) const;

  const std::vector<int>& attribute_tokens(AttributeTag a) const { return attr_[idx(a)]; }
  const std::vector<int>& stereotype_tokens(AttributeTag a) const { return ster_[idx(a)]; }
  const std::vector<int>& neutral_tokens(AttributeTag a) const { return neut_[idx(a)]; }
  const std::vector<int>& toxic_tokens() const { return toxic_; }
  const std::vector<int>& filler_tokens() const { return filler_; }
  std::vector<int> all_attribute_tokens() const;
  std::vector<int> all_stereotype_tokens() const;

  int num_facts() const { return static_cast<int>(fact_q_.size()); }
  int fact_q(int i) const { return fact_q_[static_cast<size_t>(i)]; }
  int fact_a(int i) const { return fact_a_[static_cast<size_t>(i)]; }
  // Fact index of a fact question/answer token, -1 otherwise.
  int fact_index_of(int id) const;

  // True when a stereotype token belongs to the attribute token's group.
  bool is_paired(int attr_token, int stereotype_token) const;

  std::string token_name(int id) const;
  std::string token_seq_str(const std::vector<int>& toks) const;

  // Content hash of the full layout; recorded in corpus manifests.
  std::string digest() const;

  const VocabSpec& spec() const { return spec_; }

private:
  friend Vocab build_vocab(const VocabSpec&);
  static size_t idx(AttributeTag a) { return static_cast<size_t>(a); }

  VocabSpec spec_;
  std::vector<TokenClass> class_of_;
  std::vector<int> group_of_;  // attribute group per id, -1 elsewhere
  std::array<std::vector<int>, kNumAttributes> attr_, ster_, neut_;
  std::vector<int> toxic_, filler_, fact_q_, fact_a_;
  std::vector<int> fact_index_;  // per id, -1 when not a fact token
};

// Builds the vocabulary. Rejects specs whose classes cannot fit disjointly
// into total_size. Deterministic for a fixed spec (seed included).
Vocab build_vocab(const VocabSpec& spec);

}  // namespace ng
