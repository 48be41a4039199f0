#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <unordered_map>
#include <vector>

#include "icl_lab/tokenizer.hpp"

namespace icl {

struct Example {
  std::string input;
  std::string label;
  friend bool operator==(const Example&, const Example&) = default;
};

/// Per-demonstration unit with [x] and [y] slots, e.g. "[x] label: [y]\n".
/// Slots must be word-delimited; the query unit is the prefix before [y].
struct Template {
  std::string unit = "[x] label: [y]\n";

  void validate() const;
  std::string render(std::string_view x, std::string_view y) const;
  std::string render_query(std::string_view x) const;
  /// unit = before_x [x] between [y] after
  std::string before_x() const;
  std::string between() const;
  std::string after_y() const;
};

enum class DemoMode { kGold, kRandomLabel, kUnseen, kSeen };
enum class InstructionMode { kNone, kBasic, kWithLabelSpace };

std::string to_string(DemoMode m);
std::string to_string(InstructionMode m);
DemoMode parse_demo_mode(std::string_view s);
InstructionMode parse_instruction_mode(std::string_view s);

struct ShownDemo {
  Example example;
  std::string shown_label;
};

/// Draws k demonstrations (without replacement) from pool, never the query
/// itself. random_label shows a label drawn uniformly from label_space for
/// every demo; unseen draws only examples whose gold differs from the
/// query's; seen guarantees at least one demo sharing the query's gold.
std::vector<ShownDemo> sample_demos(std::span<const Example> pool, int k, DemoMode mode, const Example& query,
                                    std::span<const std::string> label_space, std::mt19937_64& rng);

/// What an instruction needs to know about a task.
struct TaskInfo {
  std::string name;
  std::string input_noun = "item";
  std::vector<std::string> labels;
};

/// "You are a helpful assistant. Please predict the <name> of the following
/// <noun>:" with " in a and b" before the colon for kWithLabelSpace.
std::string instruction_text(InstructionMode mode, const TaskInfo& task);

struct PromptInstance {
  std::vector<TokenId> tokens;
  int last_index = 0;
  /// First token of each demonstration label.
  std::vector<int> label_positions;
  /// Every token of each demonstration label, per demo.
  std::vector<std::vector<int>> label_token_positions;
  std::pair<int, int> query_span{0, 0};  // [begin, end)
  std::vector<std::string> shown_labels;
  DemoMode mode = DemoMode::kGold;
  int k = 0;
  InstructionMode instruction = InstructionMode::kNone;
  std::string query_input;
  std::string gold_label;
  std::vector<TokenId> gold_tokens;

  std::vector<int> all_label_token_positions() const;
};

/// [<bos>][instruction?][x1 y1]...[xk yk][query unit without label].
PromptInstance build_prompt(const Template& tmpl, InstructionMode instruction, const TaskInfo& task,
                            std::span<const ShownDemo> demos, const Example& query, const Tokenizer& tokenizer);

// ---------------------------------------------------------------------------
// Synthetic worlds.

enum class SyntheticKind { kAmbiguousAttributes, kBijection, kClusteringFact };

std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(std::string_view s);

struct AttributeSpec {
  std::string name;
  /// Number of labels; 0 makes the attribute a bijection (one label per item).
  int n_labels = 2;
  /// Optional explicit label words; generated from the name when empty.
  std::vector<std::string> labels;
  /// Weight of this task in the pretraining mixture.
  double prior = 1.0;
};

/// Ambiguous worlds: an item is a word pair (one word per attribute) and each
/// attribute's label is a function of its own word, so a zero-shot query
/// does not say which attribute to report. Fact worlds (bijection,
/// clustering_fact): an item is a single entity token and every attribute is
/// a fact about it, one-to-one or many-to-one.
struct SyntheticTaskSpec {
  SyntheticKind kind = SyntheticKind::kAmbiguousAttributes;
  std::vector<AttributeSpec> attributes;
  int item_count = 48;  // words per attribute, or entities
  double test_fraction = 0.25;
  std::uint64_t seed = 0;

  void validate() const;

  /// Two 2-way attributes; attribute "temperature" dominates the prior so the
  /// zero-shot answer defaults to it.
  static SyntheticTaskSpec ambiguous(std::uint64_t seed);
  /// 64 entities with a dominant 4-way "kind", a bijective "capital" and a
  /// 4-way "job".
  static SyntheticTaskSpec facts(std::uint64_t seed);
};

std::string spec_to_json(const SyntheticTaskSpec& spec);
SyntheticTaskSpec spec_from_json(std::string_view json_text);

struct SyntheticTask {
  std::string name;
  std::vector<std::string> labels;
  bool bijective = false;
  double prior = 1.0;
  std::vector<Example> train;
  std::vector<Example> test;

  TaskInfo info() const { return {name, "item", labels}; }
};

struct SyntheticWorld {
  SyntheticTaskSpec spec;
  Template tmpl;
  std::vector<SyntheticTask> tasks;

  const SyntheticTask& task(std::string_view name) const;
  std::size_t task_index(std::string_view name) const;
  /// Queries used for pretraining: train items, plus test items in fact
  /// worlds where facts have to be memorized to be answerable at all.
  std::vector<Example> pretrain_pool(std::size_t task) const;
  /// Every string the model may see; builds the vocabulary.
  std::vector<std::string> corpus_strings() const;
  Tokenizer tokenizer() const;
};

/// Deterministic given spec (including seed); train and test items disjoint.
SyntheticWorld gen_synthetic(const SyntheticTaskSpec& spec);

// ---------------------------------------------------------------------------
// Prompt sets.

enum class Split { kTrain, kTest };

struct PromptRequest {
  std::size_t task = 0;
  Split split = Split::kTest;
  int k = 0;
  DemoMode mode = DemoMode::kGold;
  InstructionMode instruction = InstructionMode::kNone;
  /// Demonstration sequences drawn per query (cloud construction uses 2).
  int demos_per_query = 1;
};

/// n_queries × demos_per_query prompts, grouped by query. Queries walk a
/// seeded permutation of the split (wrapping when n_queries exceeds it);
/// demonstrations come from the task's train items.
std::vector<PromptInstance> make_prompts(const SyntheticWorld& world, const Tokenizer& tokenizer,
                                         const PromptRequest& request, std::size_t n_queries, std::mt19937_64& rng);

struct CorpusConfig {
  int max_shots = 8;
  /// Probability of prepending an instruction (half basic, half with label
  /// space).
  double instruction_prob = 0.2;
  /// Probability that a demonstration shows another task's label for its
  /// input. Task identity then has to be accumulated over demonstrations
  /// instead of being settled by the first label.
  double distractor_prob = 0.25;
};

/// Pretraining prompts: task by prior, k uniform in [0, max_shots], gold
/// demonstrations.
class PretrainSampler {
 public:
  PretrainSampler(const SyntheticWorld& world, const Tokenizer& tokenizer, CorpusConfig cfg = {});
  PromptInstance next(std::mt19937_64& rng) const;

 private:
  const SyntheticWorld* world_;
  const Tokenizer* tokenizer_;
  CorpusConfig cfg_;
  std::vector<std::vector<Example>> pools_;
  std::vector<double> priors_;
  std::vector<std::unordered_map<std::string, std::string>> label_of_;
};

/// Two-column "input<TAB>label" file; '#' lines and blank lines skipped.
std::vector<Example> load_tsv(const std::filesystem::path& path);

}  // namespace icl
