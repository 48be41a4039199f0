#include "icl_lab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "icl_lab/rng.hpp"

namespace icl {

using nlohmann::json;

namespace {

constexpr std::string_view kX = "[x]";
constexpr std::string_view kY = "[y]";

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

std::string rtrim(std::string s) {
  while (!s.empty() && is_space(s.back())) s.pop_back();
  return s;
}

template <class It>
void append(std::vector<TokenId>& out, It first, It last) {
  out.insert(out.end(), first, last);
}

// k distinct indices from [0, n) in random order.
std::vector<std::size_t> pick(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, n - 1);
    std::swap(idx[i], idx[u(rng)]);
  }
  idx.resize(k);
  return idx;
}

std::string padded(int i, int width) {
  auto s = std::to_string(i);
  return std::string(std::size_t(std::max(0, width - int(s.size()))), '0') + s;
}

int digits(int n) { return n <= 1 ? 1 : int(std::to_string(n - 1).size()); }

}  // namespace

// ---------------------------------------------------------------------------

void Template::validate() const {
  const auto x = unit.find(kX);
  const auto y = unit.find(kY);
  if (x == std::string::npos || unit.find(kX, x + 1) != std::string::npos) {
    throw SpecError("template must contain exactly one [x]: \"" + unit + "\"");
  }
  if (y == std::string::npos || unit.find(kY, y + 1) != std::string::npos || y < x) {
    throw SpecError("template must contain one [y] after [x]: \"" + unit + "\"");
  }
  for (std::size_t i = y + kY.size(); i < unit.size(); ++i) {
    if (!is_space(unit[i])) throw SpecError("template label slot must be terminal: \"" + unit + "\"");
  }
  auto delimited = [&](std::size_t pos, std::size_t len) {
    return (pos == 0 || is_space(unit[pos - 1])) && (pos + len == unit.size() || is_space(unit[pos + len]));
  };
  if (!delimited(x, kX.size()) || !delimited(y, kY.size())) {
    throw SpecError("template slots must be whitespace-delimited: \"" + unit + "\"");
  }
}

std::string Template::before_x() const { return unit.substr(0, unit.find(kX)); }

std::string Template::between() const {
  const auto x = unit.find(kX) + kX.size();
  return unit.substr(x, unit.find(kY) - x);
}

std::string Template::after_y() const { return unit.substr(unit.find(kY) + kY.size()); }

std::string Template::render(std::string_view x, std::string_view y) const {
  validate();
  return before_x() + std::string(x) + between() + std::string(y) + after_y();
}

std::string Template::render_query(std::string_view x) const {
  validate();
  return rtrim(before_x() + std::string(x) + between());
}

std::string to_string(DemoMode m) {
  switch (m) {
    case DemoMode::kGold: return "gold";
    case DemoMode::kRandomLabel: return "random_label";
    case DemoMode::kUnseen: return "unseen";
    case DemoMode::kSeen: return "seen";
  }
  return "?";
}

std::string to_string(InstructionMode m) {
  switch (m) {
    case InstructionMode::kNone: return "none";
    case InstructionMode::kBasic: return "basic";
    case InstructionMode::kWithLabelSpace: return "with_label_space";
  }
  return "?";
}

DemoMode parse_demo_mode(std::string_view s) {
  if (s == "gold") return DemoMode::kGold;
  if (s == "random_label" || s == "random") return DemoMode::kRandomLabel;
  if (s == "unseen") return DemoMode::kUnseen;
  if (s == "seen") return DemoMode::kSeen;
  throw SpecError("unknown demo mode '" + std::string(s) + "'");
}

InstructionMode parse_instruction_mode(std::string_view s) {
  if (s == "none") return InstructionMode::kNone;
  if (s == "basic") return InstructionMode::kBasic;
  if (s == "with_label_space") return InstructionMode::kWithLabelSpace;
  throw SpecError("unknown instruction mode '" + std::string(s) + "'");
}

std::vector<ShownDemo> sample_demos(std::span<const Example> pool, int k, DemoMode mode, const Example& query,
                                    std::span<const std::string> label_space, std::mt19937_64& rng) {
  if (k < 0) throw SpecError("sample_demos: negative k");
  if (mode == DemoMode::kSeen && k < 1) throw SpecError("sample_demos: seen mode needs k >= 1");
  if (mode == DemoMode::kRandomLabel && label_space.empty()) {
    throw SpecError("sample_demos: random_label mode needs a label space");
  }
  if (mode == DemoMode::kUnseen && label_space.size() == 1) {
    throw SpecError("sample_demos: unseen mode needs at least 2 labels");
  }

  std::vector<const Example*> candidates;
  for (const auto& e : pool) {
    if (e.input == query.input) continue;
    if (mode == DemoMode::kUnseen && e.label == query.label) continue;
    candidates.push_back(&e);
  }
  const auto need = std::size_t(k);
  if (candidates.size() < need) {
    throw InsufficientPool("sample_demos: " + std::to_string(candidates.size()) + " eligible examples for " +
                           std::to_string(k) + " " + to_string(mode) + " demonstrations");
  }

  std::vector<const Example*> chosen;
  if (mode == DemoMode::kSeen) {
    std::vector<std::size_t> same;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (candidates[i]->label == query.label) same.push_back(i);
    }
    if (same.empty()) throw InsufficientPool("sample_demos: no example shares the query label for seen mode");
    std::uniform_int_distribution<std::size_t> u(0, same.size() - 1);
    const auto anchor = same[u(rng)];
    chosen.push_back(candidates[anchor]);
    candidates.erase(candidates.begin() + std::ptrdiff_t(anchor));
    for (auto i : pick(candidates.size(), need - 1, rng)) chosen.push_back(candidates[i]);
    std::shuffle(chosen.begin(), chosen.end(), rng);
  } else {
    for (auto i : pick(candidates.size(), need, rng)) chosen.push_back(candidates[i]);
  }

  std::vector<ShownDemo> out;
  out.reserve(chosen.size());
  for (const auto* e : chosen) {
    ShownDemo d{*e, e->label};
    if (mode == DemoMode::kRandomLabel) {
      std::uniform_int_distribution<std::size_t> u(0, label_space.size() - 1);
      d.shown_label = label_space[u(rng)];
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::string instruction_text(InstructionMode mode, const TaskInfo& task) {
  if (mode == InstructionMode::kNone) return {};
  std::string s = "You are a helpful assistant. Please predict the " + task.name + " of the following " +
                  task.input_noun;
  if (mode == InstructionMode::kWithLabelSpace && !task.labels.empty()) {
    s += " in ";
    const auto n = task.labels.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) s += n == 2 ? " and " : (i + 1 == n ? ", and " : ", ");
      s += task.labels[i];
    }
  }
  return s + ":";
}

std::vector<int> PromptInstance::all_label_token_positions() const {
  std::vector<int> out;
  for (const auto& v : label_token_positions) out.insert(out.end(), v.begin(), v.end());
  return out;
}

PromptInstance build_prompt(const Template& tmpl, InstructionMode instruction, const TaskInfo& task,
                            std::span<const ShownDemo> demos, const Example& query, const Tokenizer& tokenizer) {
  tmpl.validate();
  const auto pre = tokenizer.tokenize(tmpl.before_x());
  const auto mid = tokenizer.tokenize(tmpl.between());
  const auto post = tokenizer.tokenize(tmpl.after_y());

  PromptInstance p;
  p.instruction = instruction;
  p.k = static_cast<int>(demos.size());
  p.tokens.push_back(tokenizer.bos());
  if (instruction != InstructionMode::kNone) {
    const auto ins = tokenizer.tokenize(instruction_text(instruction, task));
    append(p.tokens, ins.begin(), ins.end());
    p.tokens.push_back(tokenizer.id(Tokenizer::kNewline));
  }
  for (const auto& d : demos) {
    append(p.tokens, pre.begin(), pre.end());
    const auto x = tokenizer.tokenize(d.example.input);
    append(p.tokens, x.begin(), x.end());
    append(p.tokens, mid.begin(), mid.end());
    const auto y = tokenizer.tokenize(d.shown_label);
    if (y.empty()) throw TokenizationError("build_prompt: empty label");
    std::vector<int> pos;
    for (std::size_t i = 0; i < y.size(); ++i) pos.push_back(static_cast<int>(p.tokens.size() + i));
    p.label_positions.push_back(pos.front());
    p.label_token_positions.push_back(std::move(pos));
    append(p.tokens, y.begin(), y.end());
    append(p.tokens, post.begin(), post.end());
    p.shown_labels.push_back(d.shown_label);
  }
  p.query_span.first = static_cast<int>(p.tokens.size());
  const auto q = tokenizer.tokenize(tmpl.render_query(query.input));
  append(p.tokens, q.begin(), q.end());
  p.query_span.second = static_cast<int>(p.tokens.size());
  p.last_index = static_cast<int>(p.tokens.size()) - 1;
  p.query_input = query.input;
  p.gold_label = query.label;
  p.gold_tokens = tokenizer.tokenize(query.label);
  return p;
}

// ---------------------------------------------------------------------------

std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::kAmbiguousAttributes: return "ambiguous_attributes";
    case SyntheticKind::kBijection: return "bijection";
    case SyntheticKind::kClusteringFact: return "clustering_fact";
  }
  return "?";
}

SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "ambiguous_attributes") return SyntheticKind::kAmbiguousAttributes;
  if (s == "bijection") return SyntheticKind::kBijection;
  if (s == "clustering_fact") return SyntheticKind::kClusteringFact;
  throw SpecError("unknown synthetic task kind '" + std::string(s) + "'");
}

void SyntheticTaskSpec::validate() const {
  if (item_count < 2) throw SpecError("synthetic spec: item_count must be >= 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw SpecError("synthetic spec: test_fraction in (0, 1)");
  if (attributes.empty()) throw SpecError("synthetic spec: no attributes");
  std::set<std::string> names;
  int bijective = 0;
  for (const auto& a : attributes) {
    if (a.name.empty() || !names.insert(a.name).second) throw SpecError("synthetic spec: attribute names must be unique");
    if (a.name.find_first_of(" \t\n") != std::string::npos) {
      throw SpecError("synthetic spec: attribute name '" + a.name + "' contains whitespace");
    }
    if (a.n_labels < 0 || a.n_labels == 1) throw SpecError("synthetic spec: " + a.name + " needs >= 2 labels or 0");
    if (a.n_labels > item_count) throw SpecError("synthetic spec: " + a.name + " has more labels than items");
    if (!a.labels.empty() && int(a.labels.size()) != (a.n_labels == 0 ? item_count : a.n_labels)) {
      throw SpecError("synthetic spec: " + a.name + " label list has the wrong length");
    }
    if (!(a.prior > 0.0)) throw SpecError("synthetic spec: " + a.name + " prior must be positive");
    if (a.n_labels == 0) ++bijective;
  }
  switch (kind) {
    case SyntheticKind::kAmbiguousAttributes:
      if (attributes.size() < 2) throw SpecError("ambiguous_attributes needs at least 2 attributes");
      if (bijective) throw SpecError("ambiguous_attributes attributes must be many-to-one");
      break;
    case SyntheticKind::kBijection:
      if (bijective == 0) throw SpecError("bijection world needs a one-to-one attribute (n_labels 0)");
      break;
    case SyntheticKind::kClusteringFact:
      if (bijective) throw SpecError("clustering_fact attributes must be many-to-one");
      break;
  }
}

SyntheticTaskSpec SyntheticTaskSpec::ambiguous(std::uint64_t seed) {
  SyntheticTaskSpec s;
  s.kind = SyntheticKind::kAmbiguousAttributes;
  s.attributes = {{"temperature", 2, {"warm", "cold"}, 0.75}, {"shape", 2, {"round", "sharp"}, 0.25}};
  s.item_count = 48;
  s.seed = seed;
  return s;
}

SyntheticTaskSpec SyntheticTaskSpec::facts(std::uint64_t seed) {
  SyntheticTaskSpec s;
  s.kind = SyntheticKind::kBijection;
  s.attributes = {{"kind", 4, {"animal", "plant", "tool", "place"}, 0.5},
                  {"capital", 0, {}, 0.25},
                  {"job", 4, {"farmer", "baker", "smith", "miner"}, 0.25}};
  s.item_count = 64;
  s.seed = seed;
  return s;
}

std::string spec_to_json(const SyntheticTaskSpec& spec) {
  json attrs = json::array();
  for (const auto& a : spec.attributes) {
    attrs.push_back({{"name", a.name}, {"n_labels", a.n_labels}, {"labels", a.labels}, {"prior", a.prior}});
  }
  json j = {{"kind", to_string(spec.kind)},
            {"attributes", attrs},
            {"item_count", spec.item_count},
            {"test_fraction", spec.test_fraction},
            {"seed", spec.seed}};
  return j.dump();
}

SyntheticTaskSpec spec_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    SyntheticTaskSpec s;
    s.kind = parse_synthetic_kind(j.at("kind").get<std::string>());
    for (const auto& a : j.at("attributes")) {
      s.attributes.push_back({a.at("name").get<std::string>(), a.value("n_labels", 2),
                              a.value("labels", std::vector<std::string>{}), a.value("prior", 1.0)});
    }
    s.item_count = j.value("item_count", s.item_count);
    s.test_fraction = j.value("test_fraction", s.test_fraction);
    s.seed = j.value("seed", std::uint64_t{0});
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw SpecError(std::string("synthetic spec JSON: ") + e.what());
  }
}

const SyntheticTask& SyntheticWorld::task(std::string_view name) const { return tasks[task_index(name)]; }

std::size_t SyntheticWorld::task_index(std::string_view name) const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].name == name) return i;
  }
  throw SpecError("no task named '" + std::string(name) + "' in this world");
}

std::vector<Example> SyntheticWorld::pretrain_pool(std::size_t t) const {
  const auto& task = tasks.at(t);
  std::vector<Example> pool = task.train;
  if (spec.kind != SyntheticKind::kAmbiguousAttributes) pool.insert(pool.end(), task.test.begin(), task.test.end());
  return pool;
}

std::vector<std::string> SyntheticWorld::corpus_strings() const {
  std::vector<std::string> out{tmpl.before_x(), tmpl.between(), tmpl.after_y()};
  for (const auto& t : tasks) {
    out.push_back(instruction_text(InstructionMode::kBasic, t.info()));
    out.push_back(instruction_text(InstructionMode::kWithLabelSpace, t.info()));
  }
  for (const auto& t : tasks) out.insert(out.end(), t.labels.begin(), t.labels.end());
  for (const auto& t : tasks) {
    for (const auto& e : t.train) out.push_back(e.input);
    for (const auto& e : t.test) out.push_back(e.input);
  }
  return out;
}

Tokenizer SyntheticWorld::tokenizer() const {
  const auto corpus = corpus_strings();
  return Tokenizer::build(corpus);
}

SyntheticWorld gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  SyntheticWorld w;
  w.spec = spec;
  const int n = spec.item_count;
  const int width = digits(n);
  const auto n_attr = spec.attributes.size();

  // Item -> label index per attribute, balanced over labels.
  std::vector<std::vector<std::string>> labels(n_attr);
  std::vector<std::vector<int>> label_of(n_attr, std::vector<int>(static_cast<std::size_t>(n)));
  for (std::size_t a = 0; a < n_attr; ++a) {
    const auto& attr = spec.attributes[a];
    const int n_labels = attr.n_labels == 0 ? n : attr.n_labels;
    labels[a] = attr.labels;
    if (labels[a].empty()) {
      for (int i = 0; i < n_labels; ++i) labels[a].push_back(attr.name + padded(i, digits(n_labels)));
    }
    auto rng = substream(spec.seed, "world.labels", a);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int i = 0; i < n; ++i) label_of[a][std::size_t(order[std::size_t(i)])] = i % n_labels;
  }
  {
    std::set<std::string> seen;
    for (const auto& ls : labels) {
      for (const auto& l : ls) {
        if (l.find_first_of(" \t\n") != std::string::npos || !seen.insert(l).second) {
          throw SpecError("synthetic spec: label words must be unique single words ('" + l + "')");
        }
      }
    }
  }

  // Items: index tuples (one word per attribute) or single entities.
  std::vector<std::vector<int>> items;
  if (spec.kind == SyntheticKind::kAmbiguousAttributes) {
    constexpr std::size_t kMaxItems = 4096;
    double total = 1;
    for (std::size_t a = 0; a < n_attr; ++a) total *= n;
    if (total <= double(kMaxItems)) {
      std::vector<int> cur(n_attr, 0);
      for (;;) {
        items.push_back(cur);
        std::size_t a = n_attr;
        while (a > 0 && ++cur[a - 1] == n) cur[--a] = 0;
        if (a == 0) break;
      }
    } else {
      auto rng = substream(spec.seed, "world.items");
      std::uniform_int_distribution<int> u(0, n - 1);
      std::set<std::vector<int>> uniq;
      while (uniq.size() < kMaxItems) {
        std::vector<int> cur(n_attr);
        for (auto& c : cur) c = u(rng);
        uniq.insert(cur);
      }
      items.assign(uniq.begin(), uniq.end());
    }
  } else {
    for (int i = 0; i < n; ++i) items.push_back({i});
  }
  {
    auto rng = substream(spec.seed, "world.split");
    std::shuffle(items.begin(), items.end(), rng);
  }
  const auto n_test = std::max<std::size_t>(1, std::size_t(std::llround(spec.test_fraction * double(items.size()))));
  if (n_test >= items.size()) throw SpecError("synthetic spec: test split leaves no training items");

  auto input_of = [&](const std::vector<int>& item) {
    if (spec.kind != SyntheticKind::kAmbiguousAttributes) return "e" + padded(item[0], width);
    std::string s;
    for (std::size_t a = 0; a < n_attr; ++a) {
      if (a) s += ' ';
      s += std::string(1, char('a' + a)) + padded(item[a], width);
    }
    return s;
  };
  auto word_of = [&](const std::vector<int>& item, std::size_t a) {
    return spec.kind == SyntheticKind::kAmbiguousAttributes ? item[a] : item[0];
  };

  for (std::size_t a = 0; a < n_attr; ++a) {
    SyntheticTask t;
    t.name = spec.attributes[a].name;
    t.labels = labels[a];
    t.bijective = spec.attributes[a].n_labels == 0;
    t.prior = spec.attributes[a].prior;
    for (std::size_t i = 0; i < items.size(); ++i) {
      Example e{input_of(items[i]), labels[a][std::size_t(label_of[a][std::size_t(word_of(items[i], a))])]};
      (i < n_test ? t.test : t.train).push_back(std::move(e));
    }
    w.tasks.push_back(std::move(t));
  }
  return w;
}

// ---------------------------------------------------------------------------

std::vector<PromptInstance> make_prompts(const SyntheticWorld& world, const Tokenizer& tokenizer,
                                         const PromptRequest& req, std::size_t n_queries, std::mt19937_64& rng) {
  const auto& task = world.tasks.at(req.task);
  const auto& split = req.split == Split::kTrain ? task.train : task.test;
  if (split.empty()) throw InsufficientPool("make_prompts: empty split");
  if (req.demos_per_query < 1) throw SpecError("make_prompts: demos_per_query must be >= 1");
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto info = task.info();

  std::vector<PromptInstance> out;
  out.reserve(n_queries * std::size_t(req.demos_per_query));
  for (std::size_t i = 0; i < n_queries; ++i) {
    const auto& q = split[order[i % order.size()]];
    for (int j = 0; j < req.demos_per_query; ++j) {
      const auto demos = sample_demos(task.train, req.k, req.mode, q, task.labels, rng);
      auto p = build_prompt(world.tmpl, req.instruction, info, demos, q, tokenizer);
      p.mode = req.mode;
      out.push_back(std::move(p));
    }
  }
  return out;
}

PretrainSampler::PretrainSampler(const SyntheticWorld& world, const Tokenizer& tokenizer, CorpusConfig cfg)
    : world_(&world), tokenizer_(&tokenizer), cfg_(cfg) {
  if (cfg_.max_shots < 0) throw SpecError("corpus: max_shots must be >= 0");
  if (!(cfg_.distractor_prob >= 0 && cfg_.distractor_prob < 1)) throw SpecError("corpus: distractor_prob must be in [0, 1)");
  for (std::size_t t = 0; t < world.tasks.size(); ++t) {
    pools_.push_back(world.pretrain_pool(t));
    priors_.push_back(world.tasks[t].prior);
    auto& m = label_of_.emplace_back();
    for (const auto& e : pools_.back()) m.emplace(e.input, e.label);
  }
}

PromptInstance PretrainSampler::next(std::mt19937_64& rng) const {
  std::discrete_distribution<std::size_t> pick_task(priors_.begin(), priors_.end());
  const auto t = pick_task(rng);
  const auto& pool = pools_[t];
  std::uniform_int_distribution<std::size_t> pick_query(0, pool.size() - 1);
  const auto& q = pool[pick_query(rng)];
  std::uniform_int_distribution<int> pick_k(0, cfg_.max_shots);
  const int k = pick_k(rng);
  auto instruction = InstructionMode::kNone;
  if (std::uniform_real_distribution<double>(0, 1)(rng) < cfg_.instruction_prob) {
    instruction = std::bernoulli_distribution(0.5)(rng) ? InstructionMode::kBasic : InstructionMode::kWithLabelSpace;
  }
  const auto& task = world_->tasks[t];
  auto demos = sample_demos(pool, k, DemoMode::kGold, q, task.labels, rng);
  if (cfg_.distractor_prob > 0 && pools_.size() > 1) {
    std::bernoulli_distribution flip(cfg_.distractor_prob);
    std::uniform_int_distribution<std::size_t> other(0, pools_.size() - 2);
    for (auto& d : demos) {
      if (!flip(rng)) continue;
      auto o = other(rng);
      if (o >= t) ++o;
      if (auto it = label_of_[o].find(d.example.input); it != label_of_[o].end()) d.shown_label = it->second;
    }
  }
  return build_prompt(world_->tmpl, instruction, task.info(), demos, q, *tokenizer_);
}

std::vector<Example> load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open TSV dataset " + path.string());
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected two tab-separated columns");
    }
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

}  // namespace icl
