#pragma once

// Beam search over any step decoder, mixing of next-token distributions over
// retrieved problems, and end-to-end solving.

#include "mwp/bundle.hpp"
#include "mwp/decoder.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace mwp::infer {

using Vector = Eigen::VectorXd;

template <class D>
concept StepDecoder = requires(const D& d, const typename D::State& s, int token) {
  { d.start() } -> std::convertible_to<typename D::State>;
  { d.distribution(s) } -> std::convertible_to<Vector>;
  { d.advance(s, token) } -> std::convertible_to<typename D::State>;
  { d.eos() } -> std::convertible_to<int>;
};

struct Hypothesis {
  std::vector<int> tokens;  // EOS excluded
  double log_prob = 0.0;
  double score = 0.0;       // log_prob / emitted token count (EOS counted)
  bool finished = false;
};

/// Orders by score, then by token sequence.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

/// Length-normalized beam search. Each step expands every live hypothesis,
/// keeps the best 2·width candidates, finalizes EOS candidates ranked within
/// the first `width`, and continues with up to `width` others. At the last
/// step every live hypothesis is closed with EOS if it can be. Stops after
/// `max_len` tokens, or once `width` hypotheses are finished and none of the
/// live ones scores better than the width-th best of them. Returns the best
/// finished hypothesis, else the best unfinished one.
template <StepDecoder D>
Hypothesis beam_search(const D& decoder, int width, int max_len) {
  struct Live {
    typename D::State state;
    std::vector<int> tokens;
    double log_prob;
  };
  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
  };
  std::vector<Live> live;
  live.push_back({decoder.start(), {}, 0.0});
  std::vector<Hypothesis> finished;
  const int eos = decoder.eos();

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const Vector dist = decoder.distribution(live[i].state);
      for (Eigen::Index t = 0; t < dist.size(); ++t) {
        if (dist(t) > 0.0) cands.push_back({i, static_cast<int>(t), live[i].log_prob + std::log(dist(t))});
      }
    }
    const auto before = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      const auto& ta = live[a.parent].tokens;
      const auto& tb = live[b.parent].tokens;
      if (ta != tb) return ta < tb;
      return a.token < b.token;
    };
    const auto keep = std::min<std::size_t>(cands.size(), 2 * static_cast<std::size_t>(width));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), before);
    const auto finish = [&](const Candidate& c) {
      const auto& tokens = live[c.parent].tokens;
      finished.push_back({tokens, c.log_prob, c.log_prob / static_cast<double>(tokens.size() + 1), true});
    };
    // The last step closes every hypothesis that can still end.
    const bool last = step + 1 == max_len;
    if (last) {
      for (const auto& c : cands) {
        if (c.token == eos) finish(c);
      }
    }
    std::vector<Live> next;
    for (std::size_t rank = 0; rank < keep && static_cast<int>(next.size()) < width; ++rank) {
      const Candidate& c = cands[rank];
      const Live& parent = live[c.parent];
      if (c.token == eos) {
        if (!last && rank < static_cast<std::size_t>(width)) finish(c);
        continue;
      }
      std::vector<int> tokens = parent.tokens;
      tokens.push_back(c.token);
      next.push_back({decoder.advance(parent.state, c.token), std::move(tokens), c.log_prob});
    }
    live = std::move(next);
    if (static_cast<int>(finished.size()) >= width) {
      // Stop once the width-th best finished score beats every live one at its current length.
      std::vector<double> scores;
      for (const auto& f : finished) scores.push_back(f.score);
      std::nth_element(scores.begin(), scores.begin() + (width - 1), scores.end(), std::greater<>());
      bool open = false;
      for (const auto& l : live) open = open || l.log_prob / static_cast<double>(l.tokens.size()) > scores[width - 1];
      if (!open) break;
    }
  }

  if (!finished.empty()) return *std::min_element(finished.begin(), finished.end(), better);
  Hypothesis best;
  bool any = false;
  for (const auto& l : live) {
    Hypothesis h{l.tokens, l.log_prob, l.tokens.empty() ? l.log_prob : l.log_prob / static_cast<double>(l.tokens.size()),
                 false};
    if (!any || better(h, best)) best = std::move(h);
    any = true;
  }
  return best;
}

/// Convex combination of several decoders' next-token distributions.
class MixtureDecoder {
public:
  using State = std::vector<net::IncrementalDecoder::State>;

  MixtureDecoder(std::vector<const net::IncrementalDecoder*> parts, std::vector<double> weights);

  State start() const;
  Vector distribution(const State& s) const;
  State advance(const State& s, int token) const;
  int eos() const noexcept { return parts_.front()->eos(); }

private:
  std::vector<const net::IncrementalDecoder*> parts_;
  std::vector<double> weights_;
};

struct SolveResult {
  std::string id;
  std::vector<std::string> expression;
  std::optional<expr::Rational> value;  // empty when the prediction is malformed or divides by zero
  std::optional<bool> correct;          // empty when the problem has no gold answer
  int k = 0;
  std::vector<std::string> retrieved_ids;
  double score = 0.0;
  bool truncated = false;               // fewer memory rows than K
  std::string failure;                  // parse or evaluation error, if any
};

nlohmann::json to_json(const SolveResult& r);

/// Solves problems against a trained bundle.
class Solver {
public:
  /// `copy` mirrors the bundle's training switch unless overridden.
  Solver(const Bundle& bundle, InferConfig config);
  Solver(const Bundle& bundle, InferConfig config, bool copy);

  const InferConfig& config() const noexcept { return config_; }

  memory::RetrievalSet retrieve(const Problem& p, int k, const std::unordered_set<std::string>& exclude = {}) const;

  /// Mixture weights for a retrieval set under the configured weighting.
  std::vector<double> weights(const memory::RetrievalSet& r) const;

  /// Next-token distribution after `prefix` (outcome ids). K = 0 when
  /// `retrievals` is empty.
  Vector step_distribution(const Problem& p, const memory::RetrievalSet& retrievals,
                           const std::vector<int>& prefix) const;

  /// Best expression for `p` given its retrievals.
  Hypothesis decode(const Problem& p, const memory::RetrievalSet& retrievals, const net::CopySpace& space) const;

  /// Retrieves K problems (nothing excluded unless asked), decodes, parses
  /// and evaluates. Never throws on a bad prediction.
  SolveResult solve(const Problem& p, int k, const std::unordered_set<std::string>& exclude = {}) const;

private:
  std::vector<net::IncrementalDecoder> decoders(const Problem& p, const memory::RetrievalSet& r,
                                                const net::CopySpace& space) const;

  const Bundle* bundle_;
  InferConfig config_;
  bool copy_;
};

}  // namespace mwp::infer
