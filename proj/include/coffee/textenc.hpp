#pragma once

// Toy text encoder: whitespace tokenizer over a tiny closed vocabulary, an
// embedding table, and mean pooling. The encoder output v is the object the
// whole fine-tuning study manipulates; reference embeddings are snapshotted
// into immutable constants before any training step.

#include <algorithm>
#include <cctype>
#include <string>
#include <unordered_map>
#include <vector>

#include "coffee/autodiff.hpp"
#include "coffee/rng.hpp"
#include "coffee/tensor.hpp"

namespace coffee {

inline constexpr int64_t kEmbedDim = 32;
inline const char* kUncondToken = "<uncond>";

struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  static Vocabulary from_tokens(std::vector<std::string> toks) {
    Vocabulary v;
    v.tokens = std::move(toks);
    int uncond = 0;
    for (size_t i = 0; i < v.tokens.size(); ++i) {
      const std::string& t = v.tokens[i];
      if (t.empty()) throw Error(Error::Kind::vocab, "vocabulary: empty token");
      for (char c : t)
        if (std::isupper(static_cast<unsigned char>(c)) || std::isspace(static_cast<unsigned char>(c)))
          throw Error(Error::Kind::vocab, "vocabulary: token '" + t + "' must be lowercase with no spaces");
      if (!v.index.emplace(t, int(i)).second)
        throw Error(Error::Kind::vocab, "vocabulary: duplicate token '" + t + "'");
      if (t == kUncondToken) ++uncond;
    }
    if (uncond != 1)
      throw Error(Error::Kind::vocab, "vocabulary: '<uncond>' must appear exactly once");
    return v;
  }

  // Base concepts, attribute concepts, the negation word, the null prompt.
  static Vocabulary standard() {
    return from_tokens({"circle", "square", "triangle", "cross", "frame", "stripe", "dot",
                        "checker", "without", kUncondToken});
  }

  int size() const { return int(tokens.size()); }

  int id(const std::string& tok) const {
    auto it = index.find(tok);
    if (it == index.end()) {
      std::string list;
      for (const std::string& t : tokens) list += (list.empty() ? "" : ", ") + t;
      throw Error(Error::Kind::vocab, "unknown token '" + tok + "'; vocabulary: [" + list + "]");
    }
    return it->second;
  }
};

inline std::vector<int> tokenize(const std::string& prompt, const Vocabulary& vocab) {
  std::vector<int> ids;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      ids.push_back(vocab.id(cur));
      cur.clear();
    }
  };
  for (char c : prompt) {
    if (std::isspace(static_cast<unsigned char>(c))) flush();
    else cur += char(std::tolower(static_cast<unsigned char>(c)));
  }
  flush();
  if (ids.empty()) throw Error(Error::Kind::vocab, "empty prompt");
  return ids;
}

struct EmbeddingTable {
  Tensor matrix;  // [vocab_size, kEmbedDim]

  static EmbeddingTable init(const Vocabulary& vocab, uint64_t seed) {
    EmbeddingTable t;
    t.matrix = Tensor::zeros({int64_t(vocab.size()), kEmbedDim});
    Rng rng(seed);
    for (float& x : t.matrix.data) x = float(rng.normal() * 0.02);
    return t;
  }

  void check_rows(const Vocabulary& vocab) const {
    if (matrix.rank() != 2 || matrix.shape[0] != vocab.size() || matrix.shape[1] != kEmbedDim)
      throw Error(Error::Kind::contract,
                  "embedding table shape " + shape_str(matrix.shape) + " does not match vocabulary of " +
                      std::to_string(vocab.size()) + " tokens");
  }
};

// Mean of the token embedding rows, no gradient tracking. Bit-identical to
// the graph path below (same kernels, same accumulation order).
inline std::vector<float> encode(const std::string& prompt, const Vocabulary& vocab,
                                 const EmbeddingTable& table) {
  table.check_rows(vocab);
  const std::vector<int> ids = tokenize(prompt, vocab);
  std::vector<float> v(size_t(kEmbedDim), 0.0f);
  detail::mean_rows(table.matrix.data.data(), kEmbedDim, ids, v.data());
  return v;
}

// Differentiable encode: index_rows then column mean, producing a [d] node.
inline int encode_node(Graph& g, const std::string& prompt, const Vocabulary& vocab, int table_node) {
  const std::vector<int> ids = tokenize(prompt, vocab);
  return g.mean(g.index_rows(table_node, ids), 0);
}

// Frozen prompt/concept embeddings captured before fine-tuning. All fields
// are plain values: nothing here ever receives a gradient.
struct ConceptRefs {
  std::string user_prompt;
  std::vector<std::string> undesired_concepts;
  std::vector<float> v_i;                    // [d]
  std::vector<std::vector<float>> v_m_list;  // each [d]
  std::vector<float> ref_cosines;            // cos(v_i, v_m_list[k]) at snapshot

  void check() const {
    if (v_i.empty() || v_m_list.empty() || v_m_list.size() != ref_cosines.size() ||
        undesired_concepts.size() != v_m_list.size())
      throw Error(Error::Kind::contract,
                  "concept refs not snapshotted: call snapshot_refs before fine-tuning");
  }
};

inline ConceptRefs snapshot_refs(const std::string& c_i, const std::vector<std::string>& c_m_list,
                                 const Vocabulary& vocab, const EmbeddingTable& table) {
  if (c_m_list.empty())
    throw Error(Error::Kind::contract, "snapshot_refs: need at least one undesired concept");
  ConceptRefs refs;
  refs.user_prompt = c_i;
  refs.undesired_concepts = c_m_list;
  refs.v_i = encode(c_i, vocab, table);
  for (const std::string& c_m : c_m_list) {
    refs.v_m_list.push_back(encode(c_m, vocab, table));
    refs.ref_cosines.push_back(
        float(detail::cosine_d(refs.v_i.data(), refs.v_m_list.back().data(), size_t(kEmbedDim))));
  }
  return refs;
}

// Training-free re-specification: swap in new undesired concepts by a single
// forward pass through the supplied (possibly adapted) table. The frozen v_i
// is kept; no parameter changes.
inline ConceptRefs respecify_concepts(const std::vector<std::string>& new_c_m,
                                      const Vocabulary& vocab, const EmbeddingTable& table,
                                      const ConceptRefs& refs) {
  refs.check();
  if (new_c_m.empty())
    throw Error(Error::Kind::contract, "respecify_concepts: need at least one undesired concept");
  ConceptRefs out;
  out.user_prompt = refs.user_prompt;
  out.undesired_concepts = new_c_m;
  out.v_i = refs.v_i;
  for (const std::string& c_m : new_c_m) {
    out.v_m_list.push_back(encode(c_m, vocab, table));
    out.ref_cosines.push_back(
        float(detail::cosine_d(out.v_i.data(), out.v_m_list.back().data(), size_t(kEmbedDim))));
  }
  return out;
}

}  // namespace coffee
