#include "mwp/bundle.hpp"

#include "mwp/error.hpp"
#include "mwp/expr.hpp"

namespace mwp {

std::vector<std::string> gold_expression(const Problem& p, bool normalize) {
  if (!normalize) return p.expression;
  return expr::normalize(expr::parse(p.expression), p.question);
}

net::ProblemInput encode_problem(const Vocab& vocab, std::span<const std::string> question,
                                 std::span<const std::string> expression) {
  net::ProblemInput in;
  in.question.reserve(question.size());
  for (const auto& t : question) in.question.push_back(vocab.id(t));
  in.expression.reserve(expression.size() + 1);
  in.expression.push_back(Vocab::kBos);
  for (const auto& t : expression) in.expression.push_back(vocab.id(t));
  return in;
}

Bundle::Bundle(TrainConfig config, std::shared_ptr<const Vocab> vocab, memory::Embedder embedder,
               memory::MemoryIndex index, net::Model model)
    : config_(std::move(config)),
      vocab_(std::move(vocab)),
      embedder_(std::move(embedder)),
      index_(std::move(index)),
      model_(std::move(model)) {
  if (!index_.store()) throw DataError("memory index has no problem store");
  if (model_.config().vocab_size != vocab_->size() || model_.config().gen_size != vocab_->gen_size()) {
    throw DataError("model vocabulary sizes do not match vocab.json");
  }
  encode_memory();
}

void Bundle::encode_memory() {
  for (const auto& p : *index_.store()) {
    auto e = gold_expression(p, config_.equation_normalization);
    memory_inputs_.emplace(p.id, encode_problem(*vocab_, p.question, e));
    memory_expressions_.emplace(p.id, std::move(e));
  }
}

Bundle Bundle::prepare(const Dataset& train, TrainConfig config) {
  config.validate();
  auto vocab = std::make_shared<const Vocab>(build_vocab(train, config.min_freq));
  auto embedder = memory::fit_embedder(train, config.embed_dim, config.seed, config.embed_window);
  auto store = std::make_shared<const Dataset>(train.problems(), Split::train);
  auto index = memory::build_index(embedder, store);
  config.model.vocab_size = vocab->size();
  config.model.gen_size = vocab->gen_size();
  config.model.seed = config.seed;
  net::Model model(config.model);
  return Bundle(std::move(config), std::move(vocab), std::move(embedder), std::move(index), std::move(model));
}

void Bundle::save(const std::filesystem::path& dir, const std::string& checkpoint) const {
  std::filesystem::create_directories(dir);
  save_train_config(config_, dir / "config.json");
  vocab_->save(dir / "vocab.json");
  embedder_.save(dir / "embedder.bin");
  index_.save(dir / "memory.bin");
  save_jsonl(*index_.store(), dir / "memory.jsonl");
  model_.save(dir / checkpoint);
}

Bundle Bundle::load(const std::filesystem::path& dir, const std::string& checkpoint) {
  if (!std::filesystem::is_regular_file(dir / "config.json")) throw DataError("no model directory at " + dir.string());
  TrainConfig config = load_train_config(dir / "config.json");
  auto vocab = std::make_shared<const Vocab>(Vocab::load(dir / "vocab.json"));
  auto embedder = memory::Embedder::load(dir / "embedder.bin");
  auto store = std::make_shared<const Dataset>(load_jsonl(dir / "memory.jsonl", {Split::train, 1e-4}).problems(),
                                               Split::train);
  auto index = memory::MemoryIndex::load(dir / "memory.bin", store);
  if (index.size() != store->size()) throw DataError("memory.bin and memory.jsonl disagree on size");
  for (std::size_t i = 0; i < store->size(); ++i) {
    if (index.ids()[i] != (*store)[i].id) throw DataError("memory.bin and memory.jsonl disagree on ids");
  }
  auto model = net::Model::load(dir / checkpoint);
  config.model = model.config();
  return Bundle(std::move(config), std::move(vocab), std::move(embedder), std::move(index), std::move(model));
}

const net::ProblemInput& Bundle::memory_input(const std::string& id) const {
  const auto it = memory_inputs_.find(id);
  if (it == memory_inputs_.end()) throw DataError("unknown memory problem " + id);
  return it->second;
}

const std::vector<std::string>& Bundle::memory_expression(const std::string& id) const {
  const auto it = memory_expressions_.find(id);
  if (it == memory_expressions_.end()) throw DataError("unknown memory problem " + id);
  return it->second;
}

}  // namespace mwp
