#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mad/attacks.hpp"
#include "mad/meta_params.hpp"
#include "mad/model.hpp"
#include "mad/tensor.hpp"

namespace mad {

inline constexpr int kMadFormatVersion = 1;
/// Origin tag of clean examples inside episodes.
inline constexpr int kCleanOrigin = -1;

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };
enum class Role { kMetaTrain, kMetaVal, kMetaFinetuneNew, kTestLearned, kTestNew };

std::string to_string(Split s);
std::string to_string(Role r);
Role parse_role(const std::string& s);
/// The split an evaluation role draws its tasks from.
Split eval_split(Role r);

/// Examples of one (attack, class) cell or one clean class. Once split, the
/// storage order is train, then val, then test.
struct ClassBucket {
  std::vector<float> pixels;
  std::vector<std::int64_t> source_index;  // into the originating clean test set
  std::array<std::size_t, 3> split_counts{};

  std::size_t count() const { return source_index.size(); }
  /// [begin, end) of a split in storage order.
  std::pair<std::size_t, std::size_t> split_range(Split s) const;
  bool operator==(const ClassBucket&) const = default;
};

struct AttackRecord {
  AttackSpec spec;
  int group = 0;
  bool removed = false;
  std::string removed_reason;
  std::vector<std::size_t> success_counts;  // per class, before balancing
  std::vector<ClassBucket> classes;         // one per class; empty when removed

  int attack_id() const { return spec.attack_id; }
  bool operator==(const AttackRecord&) const = default;
};

/// Maps each role to the group tags that serve it.
struct SplitAssignment {
  std::map<Role, std::vector<int>> role_groups;

  /// ConfigError when one group serves two roles.
  void validate() const;
  std::optional<Role> role_of_group(int group) const;
  bool operator==(const SplitAssignment&) const = default;
};

struct MadDataset {
  std::string name;
  int num_classes = 0;
  ImageShape shape;
  std::string reference_checkpoint_id;
  double cca = 0.0;  // reference accuracy on the clean test set, percent
  std::vector<AttackRecord> attacks;
  std::vector<ClassBucket> clean_pool;
  std::map<int, int> grouping;  // attack_id -> group
  SplitAssignment roles;
  std::vector<std::string> warnings;
  bool is_split = false;

  const AttackRecord* find(int attack_id) const;
  std::vector<int> retained_attack_ids() const;
  std::vector<int> removed_attacks() const;
  std::optional<Role> role_of(int attack_id) const;
  std::vector<int> attacks_in_role(Role r) const;
  /// Every example of one retained attack (or split of it), for accuracy checks.
  LabeledImages attack_examples(int attack_id, std::optional<Split> split = std::nullopt) const;
  LabeledImages clean_examples(std::optional<Split> split = std::nullopt) const;
  std::size_t total_examples() const;
  bool operator==(const MadDataset&) const = default;
};

/// Signature of an attack invocation; generate_mad uses run_attack unless a
/// replacement is injected.
using AttackRunner = std::function<AttackOutcome(const AttackSpec&, const Classifier&, const LabeledImages&,
                                                 std::uint64_t seed)>;

struct GenerateOptions {
  std::string name = "mad";
  std::size_t batch = 256;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;  // attacks run concurrently
  AttackRunner runner;   // empty selects run_attack
};

/// Attacks every clean test image with each implemented suite entry and keeps
/// successes only. Placeholder attacks are skipped with a warning; a suite with
/// no implemented attack raises ConfigError, zero successes GenerationError.
MadDataset generate_mad(const ModelState& reference, const LabeledImages& clean_test,
                        const std::vector<AttackSpec>& suite, const GenerateOptions& opts);

/// Removes attacks whose smallest class has fewer than min_per_class
/// successes, then truncates the rest (and the clean pool) to equal per-class
/// counts. Subsampling keeps original order among the selected examples.
MadDataset filter_and_balance(const MadDataset& dataset, std::size_t min_per_class, std::uint64_t seed);

/// Per cell with count c: test = val = floor(c/5), train gets the rest.
MadDataset split_3_1_1(const MadDataset& dataset, std::uint64_t seed);

MadDataset assign_groups(const MadDataset& dataset, const std::map<int, int>& grouping,
                         const SplitAssignment& roles);

/// group = floor(id * 9 / 30) + 1 for registry IDs 0..29; anything else lands in group 9.
std::map<int, int> default_grouping(const std::vector<int>& attack_ids);
/// meta_train {1,2}, meta_val {4,5}, meta_finetune_new {7,8}, test_learned {3,6}, test_new {9}.
SplitAssignment default_roles();

struct ExampleSet {
  LabeledImages images;
  std::vector<int> origin;  // attack_id or kCleanOrigin
  std::vector<std::int64_t> source_index;

  std::size_t size() const { return images.count(); }
  /// Only the adversarial members.
  LabeledImages adversarial() const;
  LabeledImages clean() const;
};

struct Episode {
  ExampleSet support;
  ExampleSet query;
  std::vector<int> attacks_support;
  std::vector<int> attacks_query;
};

/// Draws `ways` distinct meta_train attacks uniformly, k per class per attack
/// plus k clean per class for S, and m per class for the first `query_ways`
/// drawn attacks plus m clean per class for Q. Train split only.
Episode sample_train_episode(const MadDataset& dataset, const MetaParams& params, std::mt19937_64& rng);

/// S' with K per class of the attack plus K clean per class, Q' with M + M.
/// The split follows the attack's role (see eval_split).
Episode sample_eval_task(const MadDataset& dataset, int attack_id, const MetaParams& params,
                         std::mt19937_64& rng);

/// Throws IntegrityError naming the first violated invariant: zero CA under the
/// reference (when given), balance, 3:1:1, split disjointness, role disjointness.
void check_dataset_invariants(const MadDataset& dataset, const ModelState* reference = nullptr);

void save_mad(const MadDataset& dataset, const std::filesystem::path& dir);
/// SchemaError on a malformed manifest, VersionError on an unknown
/// format_version, ChecksumError when a blob does not match its digest.
MadDataset load_mad(const std::filesystem::path& dir);

/// Structural manifest check shared by load_mad and the validate-mad command.
void validate_manifest(const nlohmann::json& manifest);

}  // namespace mad
