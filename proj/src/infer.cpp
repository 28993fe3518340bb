#include "mwp/infer.hpp"

#include "mwp/error.hpp"

namespace mwp::infer {

MixtureDecoder::MixtureDecoder(std::vector<const net::IncrementalDecoder*> parts, std::vector<double> weights)
    : parts_(std::move(parts)), weights_(std::move(weights)) {
  if (parts_.empty() || parts_.size() != weights_.size()) throw Error("mixture needs one weight per decoder");
}

MixtureDecoder::State MixtureDecoder::start() const {
  State s;
  s.reserve(parts_.size());
  for (const auto* p : parts_) s.push_back(p->start());
  return s;
}

Vector MixtureDecoder::distribution(const State& s) const {
  Vector out = weights_[0] * parts_[0]->distribution(s[0]);
  for (std::size_t k = 1; k < parts_.size(); ++k) out += weights_[k] * parts_[k]->distribution(s[k]);
  return out;
}

MixtureDecoder::State MixtureDecoder::advance(const State& s, int token) const {
  State next;
  next.reserve(parts_.size());
  for (std::size_t k = 0; k < parts_.size(); ++k) next.push_back(parts_[k]->advance(s[k], token));
  return next;
}

nlohmann::json to_json(const SolveResult& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["predicted_expression"] = expr::join(r.expression);
  j["predicted_value"] = r.value ? nlohmann::json(expr::to_string(*r.value)) : nlohmann::json(nullptr);
  j["correct"] = r.correct ? nlohmann::json(*r.correct) : nlohmann::json(nullptr);
  j["K"] = r.k;
  j["retrieved_ids"] = r.retrieved_ids;
  j["score"] = r.score;
  if (r.truncated) j["truncated"] = true;
  if (!r.failure.empty()) j["failure"] = r.failure;
  return j;
}

Solver::Solver(const Bundle& bundle, InferConfig config) : Solver(bundle, config, bundle.config().copy) {}

Solver::Solver(const Bundle& bundle, InferConfig config, bool copy)
    : bundle_(&bundle), config_(config), copy_(copy) {
  if (config_.beam < 1 || config_.max_len < 1) throw UsageError("beam and max_len must be positive");
}

memory::RetrievalSet Solver::retrieve(const Problem& p, int k, const std::unordered_set<std::string>& exclude) const {
  if (k < 0) throw UsageError("K must be non-negative");
  if (k == 0) return {};
  const auto q = memory::embed_question(bundle_->embedder(), p.question);
  return bundle_->index().search(q.vector, static_cast<std::size_t>(k), exclude);
}

std::vector<double> Solver::weights(const memory::RetrievalSet& r) const {
  std::vector<double> w;
  for (const auto& item : r.items) {
    w.push_back(config_.uniform_weights ? 1.0 / static_cast<double>(r.items.size()) : item.probability);
  }
  return w;
}

std::vector<net::IncrementalDecoder> Solver::decoders(const Problem& p, const memory::RetrievalSet& r,
                                                      const net::CopySpace& space) const {
  const auto& vocab = bundle_->vocab();
  std::vector<int> question;
  for (const auto& t : p.question) question.push_back(vocab.id(t));
  std::vector<net::IncrementalDecoder> out;
  if (r.items.empty()) {
    out.emplace_back(bundle_->model(), question, space, nullptr, copy_);
    return out;
  }
  out.reserve(r.items.size());
  for (const auto& item : r.items) {
    out.emplace_back(bundle_->model(), question, space, &bundle_->memory_input(item.id), copy_);
  }
  return out;
}

Vector Solver::step_distribution(const Problem& p, const memory::RetrievalSet& retrievals,
                                 const std::vector<int>& prefix) const {
  const net::CopySpace space(bundle_->vocab(), p.question);
  const auto parts = decoders(p, retrievals, space);
  std::vector<const net::IncrementalDecoder*> ptrs;
  for (const auto& d : parts) ptrs.push_back(&d);
  const MixtureDecoder mix(ptrs, retrievals.items.empty() ? std::vector<double>{1.0} : weights(retrievals));
  auto s = mix.start();
  for (int t : prefix) s = mix.advance(s, t);
  return mix.distribution(s);
}

Hypothesis Solver::decode(const Problem& p, const memory::RetrievalSet& retrievals,
                          const net::CopySpace& space) const {
  const auto parts = decoders(p, retrievals, space);
  if (config_.per_sequence && parts.size() > 1) {
    std::optional<Hypothesis> best;
    for (const auto& d : parts) {
      const MixtureDecoder single({&d}, {1.0});
      auto h = beam_search(single, config_.beam, config_.max_len);
      if (!best || better(h, *best)) best = std::move(h);
    }
    return *best;
  }
  std::vector<const net::IncrementalDecoder*> ptrs;
  for (const auto& d : parts) ptrs.push_back(&d);
  const MixtureDecoder mix(ptrs, retrievals.items.empty() ? std::vector<double>{1.0} : weights(retrievals));
  return beam_search(mix, config_.beam, config_.max_len);
}

SolveResult Solver::solve(const Problem& p, int k, const std::unordered_set<std::string>& exclude) const {
  SolveResult r;
  r.id = p.id;
  r.k = k;
  const auto retrievals = retrieve(p, k, exclude);
  r.truncated = retrievals.truncated;
  for (const auto& item : retrievals.items) r.retrieved_ids.push_back(item.id);
  const net::CopySpace space(bundle_->vocab(), p.question);
  const Hypothesis h = decode(p, retrievals, space);
  r.score = h.score;
  for (int t : h.tokens) r.expression.push_back(space.token(t));
  if (!h.finished) r.failure = "no EOS within max_len";
  try {
    r.value = expr::evaluate(expr::parse(r.expression));
  } catch (const Error& e) {
    if (r.failure.empty()) r.failure = e.what();
  }
  if (!p.expression.empty()) r.correct = expr::answers_equal(r.value, p.answer);
  return r;
}

}  // namespace mwp::infer
