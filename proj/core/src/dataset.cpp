#include "mad/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "mad/checkpoint.hpp"
#include "mad/errors.hpp"
#include "mad/io.hpp"

namespace mad {

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

std::string to_string(Role r) {
  switch (r) {
    case Role::kMetaTrain: return "meta_train";
    case Role::kMetaVal: return "meta_val";
    case Role::kMetaFinetuneNew: return "meta_finetune_new";
    case Role::kTestLearned: return "test_learned";
    case Role::kTestNew: return "test_new";
  }
  return "meta_train";
}

Role parse_role(const std::string& s) {
  for (Role r : {Role::kMetaTrain, Role::kMetaVal, Role::kMetaFinetuneNew, Role::kTestLearned, Role::kTestNew}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("unknown role '" + s + "'");
}

Split eval_split(Role r) {
  switch (r) {
    case Role::kMetaVal: return Split::kVal;
    case Role::kTestLearned:
    case Role::kTestNew: return Split::kTest;
    case Role::kMetaTrain:
    case Role::kMetaFinetuneNew: return Split::kTrain;
  }
  return Split::kTrain;
}

std::pair<std::size_t, std::size_t> ClassBucket::split_range(Split s) const {
  const auto i = static_cast<std::size_t>(s);
  std::size_t begin = 0;
  for (std::size_t k = 0; k < i; ++k) begin += split_counts[k];
  return {begin, begin + split_counts[i]};
}

void SplitAssignment::validate() const {
  std::map<int, Role> seen;
  for (const auto& [role, groups] : role_groups) {
    for (int g : groups) {
      auto [it, inserted] = seen.emplace(g, role);
      if (!inserted && it->second != role) {
        throw ConfigError("group " + std::to_string(g) + " assigned to both " + to_string(it->second) + " and " +
                          to_string(role));
      }
    }
  }
}

std::optional<Role> SplitAssignment::role_of_group(int group) const {
  for (const auto& [role, groups] : role_groups) {
    if (std::find(groups.begin(), groups.end(), group) != groups.end()) return role;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- MadDataset

const AttackRecord* MadDataset::find(int attack_id) const {
  for (const auto& a : attacks) {
    if (a.attack_id() == attack_id) return &a;
  }
  return nullptr;
}

std::vector<int> MadDataset::retained_attack_ids() const {
  std::vector<int> ids;
  for (const auto& a : attacks) {
    if (!a.removed) ids.push_back(a.attack_id());
  }
  return ids;
}

std::vector<int> MadDataset::removed_attacks() const {
  std::vector<int> ids;
  for (const auto& a : attacks) {
    if (a.removed) ids.push_back(a.attack_id());
  }
  return ids;
}

std::optional<Role> MadDataset::role_of(int attack_id) const {
  const AttackRecord* rec = find(attack_id);
  if (!rec || rec->removed) return std::nullopt;
  return roles.role_of_group(rec->group);
}

std::vector<int> MadDataset::attacks_in_role(Role r) const {
  std::vector<int> ids;
  for (int id : retained_attack_ids()) {
    if (role_of(id) == r) ids.push_back(id);
  }
  return ids;
}

namespace {

void append_bucket(LabeledImages& out, const ClassBucket& b, int label, std::optional<Split> split,
                   std::size_t image_size) {
  auto [begin, end] = split ? b.split_range(*split) : std::pair<std::size_t, std::size_t>{0, b.count()};
  for (std::size_t i = begin; i < end; ++i) {
    out.push_back(std::span<const float>(b.pixels).subspan(i * image_size, image_size), label);
  }
}

}  // namespace

LabeledImages MadDataset::attack_examples(int attack_id, std::optional<Split> split) const {
  const AttackRecord* rec = find(attack_id);
  if (!rec) throw ConfigError("attack " + std::to_string(attack_id) + " is not in dataset " + name);
  LabeledImages out;
  out.shape = shape;
  for (std::size_t c = 0; c < rec->classes.size(); ++c) {
    append_bucket(out, rec->classes[c], static_cast<int>(c), split, shape.size());
  }
  return out;
}

LabeledImages MadDataset::clean_examples(std::optional<Split> split) const {
  LabeledImages out;
  out.shape = shape;
  for (std::size_t c = 0; c < clean_pool.size(); ++c) {
    append_bucket(out, clean_pool[c], static_cast<int>(c), split, shape.size());
  }
  return out;
}

std::size_t MadDataset::total_examples() const {
  std::size_t n = 0;
  for (const auto& a : attacks) {
    for (const auto& b : a.classes) n += b.count();
  }
  return n;
}

LabeledImages ExampleSet::adversarial() const {
  LabeledImages out;
  out.shape = images.shape;
  for (std::size_t i = 0; i < size(); ++i) {
    if (origin[i] != kCleanOrigin) out.push_back(images.image(i), images.labels[i]);
  }
  return out;
}

LabeledImages ExampleSet::clean() const {
  LabeledImages out;
  out.shape = images.shape;
  for (std::size_t i = 0; i < size(); ++i) {
    if (origin[i] == kCleanOrigin) out.push_back(images.image(i), images.labels[i]);
  }
  return out;
}

// ---------------------------------------------------------------- generation

MadDataset generate_mad(const ModelState& reference, const LabeledImages& clean_test,
                        const std::vector<AttackSpec>& suite, const GenerateOptions& opts) {
  if (suite.empty()) throw ConfigError("generate_mad: empty attack suite");
  if (opts.batch == 0) throw ConfigError("generate_mad: batch must be >= 1");
  validate_examples(reference.spec, clean_test);

  MadDataset ds;
  ds.name = opts.name;
  ds.num_classes = reference.spec.num_classes;
  ds.shape = clean_test.shape;
  ds.reference_checkpoint_id = model_fingerprint(reference);
  ds.cca = evaluate_accuracy(reference, clean_test);
  if (!(ds.cca > 0.0)) throw DataError("generate_mad: reference model has zero clean accuracy");

  const auto n = static_cast<std::size_t>(ds.num_classes);
  ds.clean_pool.resize(n);
  for (std::size_t i = 0; i < clean_test.count(); ++i) {
    auto& b = ds.clean_pool[static_cast<std::size_t>(clean_test.labels[i])];
    const auto img = clean_test.image(i);
    b.pixels.insert(b.pixels.end(), img.begin(), img.end());
    b.source_index.push_back(static_cast<std::int64_t>(i));
  }

  std::vector<AttackSpec> runnable;
  for (const auto& spec : suite) {
    const AttackInfo* info = find_attack(spec.attack_id);
    if (!info) throw ConfigError("unknown attack_id " + std::to_string(spec.attack_id));
    if (!info->implemented) {
      ds.warnings.push_back("attack " + std::to_string(spec.attack_id) + " (" + std::string(info->name) +
                            ") is not implemented; skipped");
      continue;
    }
    if (std::any_of(runnable.begin(), runnable.end(),
                    [&](const AttackSpec& s) { return s.attack_id == spec.attack_id; })) {
      throw ConfigError("attack " + std::to_string(spec.attack_id) + " listed twice in suite");
    }
    spec.validate();
    runnable.push_back(spec);
  }
  if (runnable.empty()) throw ConfigError("generate_mad: suite has no implemented attack");

  const ModelClassifier clf(reference);
  const AttackRunner runner = opts.runner ? opts.runner : AttackRunner(run_attack);
  const std::size_t num_batches = (clean_test.count() + opts.batch - 1) / opts.batch;

  std::vector<AttackRecord> records(runnable.size());
  std::vector<std::string> dropped(runnable.size());
  auto run_one = [&](std::size_t a) {
    AttackRecord& rec = records[a];
    rec.spec = runnable[a];
    rec.classes.resize(n);
    std::size_t not_verified = 0;
    for (std::size_t bi = 0; bi < num_batches; ++bi) {
      const std::size_t begin = bi * opts.batch;
      const std::size_t end = std::min(clean_test.count(), begin + opts.batch);
      const auto batch = clean_test.slice(begin, end);
      const auto out = runner(rec.spec, clf, batch, attack_stream_seed(opts.seed, rec.spec.attack_id, bi));
      if (out.x_adv.count() != batch.count() || !(out.x_adv.shape == batch.shape) ||
          out.success_mask.size() != batch.count()) {
        throw DataError("attack " + std::to_string(rec.spec.attack_id) + " returned a malformed batch");
      }
      // The reference must misclassify every stored example.
      const auto verified = misclassified(clf, LabeledImages{batch.shape, out.x_adv.pixels, batch.labels});
      for (std::size_t i = 0; i < batch.count(); ++i) {
        if (!out.success_mask[i]) continue;
        if (!verified[i]) {
          ++not_verified;
          continue;
        }
        auto& b = rec.classes[static_cast<std::size_t>(batch.labels[i])];
        const auto img = out.x_adv.image(i);
        b.pixels.insert(b.pixels.end(), img.begin(), img.end());
        b.source_index.push_back(static_cast<std::int64_t>(begin + i));
      }
    }
    rec.success_counts.resize(n);
    for (std::size_t c = 0; c < n; ++c) rec.success_counts[c] = rec.classes[c].count();
    if (not_verified > 0) {
      dropped[a] = "attack " + std::to_string(rec.spec.attack_id) + ": " + std::to_string(not_verified) +
                   " reported successes failed re-verification and were dropped";
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, runnable.size()));
  if (jobs == 1) {
    for (std::size_t a = 0; a < runnable.size(); ++a) run_one(a);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
      pool.emplace_back([&] {
        for (std::size_t a = next++; a < runnable.size(); a = next++) {
          try {
            run_one(a);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  for (auto& msg : dropped) {
    if (!msg.empty()) ds.warnings.push_back(msg);
  }
  ds.attacks = std::move(records);
  if (ds.total_examples() == 0) throw GenerationError("generate_mad: no attack produced a successful example");
  return ds;
}

// ---------------------------------------------------------------- balance and split

namespace {

ClassBucket gather(const ClassBucket& b, const std::vector<std::size_t>& idx, std::size_t image_size) {
  ClassBucket out;
  out.pixels.reserve(idx.size() * image_size);
  for (std::size_t i : idx) {
    out.pixels.insert(out.pixels.end(), b.pixels.begin() + static_cast<std::ptrdiff_t>(i * image_size),
                      b.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * image_size));
    out.source_index.push_back(b.source_index[i]);
  }
  return out;
}

std::vector<std::size_t> permutation(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> p(count);
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

std::size_t min_count(const std::vector<ClassBucket>& buckets) {
  std::size_t m = std::numeric_limits<std::size_t>::max();
  for (const auto& b : buckets) m = std::min(m, b.count());
  return buckets.empty() ? 0 : m;
}

bool balanced(const std::vector<ClassBucket>& buckets) {
  return std::all_of(buckets.begin(), buckets.end(),
                     [&](const ClassBucket& b) { return b.count() == buckets.front().count(); });
}

bool truncate_buckets(std::vector<ClassBucket>& buckets, std::size_t m, int tag, std::uint64_t seed,
                      std::size_t image_size) {
  bool changed = false;
  for (std::size_t c = 0; c < buckets.size(); ++c) {
    auto& b = buckets[c];
    if (b.count() == m) continue;
    auto p = permutation(b.count(), attack_stream_seed(seed, tag, c));
    p.resize(m);
    std::sort(p.begin(), p.end());
    b = gather(b, p, image_size);
    changed = true;
  }
  return changed;
}

void split_buckets(std::vector<ClassBucket>& buckets, int tag, std::uint64_t seed, std::size_t image_size) {
  for (std::size_t c = 0; c < buckets.size(); ++c) {
    auto& b = buckets[c];
    const std::size_t count = b.count();
    if (count < 5) {
      throw ConfigError("split_3_1_1: " + (tag == kCleanOrigin ? std::string("clean pool") : "attack " + std::to_string(tag)) +
                        " class " + std::to_string(c) + " has " + std::to_string(count) +
                        " examples; at least 5 are required");
    }
    const std::size_t fifth = count / 5;
    const std::size_t train = count - 2 * fifth;
    auto p = permutation(count, attack_stream_seed(seed ^ 0x3131u, tag, c));
    std::sort(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(train));
    std::sort(p.begin() + static_cast<std::ptrdiff_t>(train), p.begin() + static_cast<std::ptrdiff_t>(train + fifth));
    std::sort(p.begin() + static_cast<std::ptrdiff_t>(train + fifth), p.end());
    b = gather(b, p, image_size);
    b.split_counts = {train, fifth, fifth};
  }
}

}  // namespace

MadDataset filter_and_balance(const MadDataset& dataset, std::size_t min_per_class, std::uint64_t seed) {
  if (min_per_class < 1) throw ConfigError("filter_and_balance: min_per_class must be >= 1");
  MadDataset ds = dataset;
  const std::size_t isz = ds.shape.size();
  bool changed = false;
  for (auto& rec : ds.attacks) {
    if (rec.removed) continue;
    const std::size_t m = min_count(rec.classes);
    if (m < min_per_class) {
      rec.removed = true;
      rec.removed_reason = "smallest class has " + std::to_string(m) + " successful examples (minimum " +
                           std::to_string(min_per_class) + ")";
      rec.classes.clear();
      continue;
    }
    changed |= truncate_buckets(rec.classes, m, rec.attack_id(), seed, isz);
  }
  if (ds.retained_attack_ids().empty()) throw GenerationError("filter_and_balance: every attack was removed");
  changed |= truncate_buckets(ds.clean_pool, min_count(ds.clean_pool), kCleanOrigin, seed, isz);
  if (changed && ds.is_split) {
    // Truncation invalidates the old split.
    ds.is_split = false;
    for (auto& rec : ds.attacks) {
      for (auto& b : rec.classes) b.split_counts = {};
    }
    for (auto& b : ds.clean_pool) b.split_counts = {};
  }
  return ds;
}

MadDataset split_3_1_1(const MadDataset& dataset, std::uint64_t seed) {
  MadDataset ds = dataset;
  const std::size_t isz = ds.shape.size();
  for (auto& rec : ds.attacks) {
    if (rec.removed) continue;
    if (!balanced(rec.classes)) {
      throw ConfigError("split_3_1_1: attack " + std::to_string(rec.attack_id()) + " is not class-balanced");
    }
    split_buckets(rec.classes, rec.attack_id(), seed, isz);
  }
  if (!balanced(ds.clean_pool)) throw ConfigError("split_3_1_1: clean pool is not class-balanced");
  split_buckets(ds.clean_pool, kCleanOrigin, seed, isz);
  ds.is_split = true;
  return ds;
}

MadDataset assign_groups(const MadDataset& dataset, const std::map<int, int>& grouping,
                         const SplitAssignment& roles) {
  roles.validate();
  MadDataset ds = dataset;
  for (auto& rec : ds.attacks) {
    auto it = grouping.find(rec.attack_id());
    if (it == grouping.end()) {
      if (rec.removed) continue;
      throw ConfigError("attack " + std::to_string(rec.attack_id()) + " has no group assignment");
    }
    rec.group = it->second;
  }
  ds.grouping = grouping;
  ds.roles = roles;
  return ds;
}

std::map<int, int> default_grouping(const std::vector<int>& attack_ids) {
  std::map<int, int> g;
  for (int id : attack_ids) g[id] = (id >= 0 && id < 30) ? id * 9 / 30 + 1 : 9;
  return g;
}

SplitAssignment default_roles() {
  SplitAssignment r;
  r.role_groups = {{Role::kMetaTrain, {1, 2}},
                   {Role::kMetaVal, {4, 5}},
                   {Role::kMetaFinetuneNew, {7, 8}},
                   {Role::kTestLearned, {3, 6}},
                   {Role::kTestNew, {9}}};
  return r;
}

// ---------------------------------------------------------------- sampling

namespace {

/// `need` distinct offsets from [0, available), in draw order.
std::vector<std::size_t> draw(std::mt19937_64& rng, std::size_t available, std::size_t need) {
  std::vector<std::size_t> pool(available);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < need; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, available - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(need);
  return pool;
}

void take(ExampleSet& dst, const ClassBucket& b, std::size_t offset, int label, int origin, std::size_t isz) {
  dst.images.push_back(std::span<const float>(b.pixels).subspan(offset * isz, isz), label);
  dst.origin.push_back(origin);
  dst.source_index.push_back(b.source_index[offset]);
}

// Draws s_count examples into `s` and q_count into `q` from one split of a bucket.
void draw_cell(std::mt19937_64& rng, const ClassBucket& b, Split split, std::size_t s_count, std::size_t q_count,
               ExampleSet& s, ExampleSet* q, int label, int origin, std::size_t isz) {
  const auto [begin, end] = b.split_range(split);
  const std::size_t available = end - begin;
  if (available < s_count + q_count) {
    throw SamplingError((origin == kCleanOrigin ? std::string("clean pool") : "attack " + std::to_string(origin)) +
                        ", class " + std::to_string(label) + ": " + std::to_string(available) + " examples in " +
                        to_string(split) + " split, " + std::to_string(s_count + q_count) + " required");
  }
  const auto picks = draw(rng, available, s_count + q_count);
  for (std::size_t i = 0; i < s_count; ++i) take(s, b, begin + picks[i], label, origin, isz);
  for (std::size_t i = s_count; i < s_count + q_count; ++i) take(*q, b, begin + picks[i], label, origin, isz);
}

void require_split(const MadDataset& ds) {
  if (!ds.is_split) throw SamplingError("dataset " + ds.name + " has not been split");
}

}  // namespace

Episode sample_train_episode(const MadDataset& dataset, const MetaParams& params, std::mt19937_64& rng) {
  params.validate();
  require_split(dataset);
  auto ids = dataset.attacks_in_role(Role::kMetaTrain);
  const auto ways = static_cast<std::size_t>(params.ways);
  if (ids.size() < ways) {
    throw SamplingError("meta_train role has " + std::to_string(ids.size()) + " attacks, ways = " +
                        std::to_string(ways));
  }
  // Uniform A-subset: partial Fisher-Yates over the role's attacks.
  const auto order = draw(rng, ids.size(), ways);
  Episode ep;
  for (std::size_t i = 0; i < ways; ++i) ep.attacks_support.push_back(ids[order[i]]);
  ep.attacks_query.assign(ep.attacks_support.begin(), ep.attacks_support.begin() + params.query_ways);

  const std::size_t isz = dataset.shape.size();
  const auto k = static_cast<std::size_t>(params.shot_k);
  const auto m = static_cast<std::size_t>(params.query_m);
  ep.support.images.shape = ep.query.images.shape = dataset.shape;
  for (std::size_t i = 0; i < ways; ++i) {
    const int id = ep.attacks_support[i];
    const AttackRecord& rec = *dataset.find(id);
    const bool in_query = i < static_cast<std::size_t>(params.query_ways);
    for (std::size_t c = 0; c < rec.classes.size(); ++c) {
      draw_cell(rng, rec.classes[c], Split::kTrain, k, in_query ? m : 0, ep.support, &ep.query,
                static_cast<int>(c), id, isz);
    }
  }
  for (std::size_t c = 0; c < dataset.clean_pool.size(); ++c) {
    draw_cell(rng, dataset.clean_pool[c], Split::kTrain, k, m, ep.support, &ep.query, static_cast<int>(c),
              kCleanOrigin, isz);
  }
  return ep;
}

Episode sample_eval_task(const MadDataset& dataset, int attack_id, const MetaParams& params,
                         std::mt19937_64& rng) {
  params.validate();
  require_split(dataset);
  const AttackRecord* rec = dataset.find(attack_id);
  if (!rec || rec->removed) throw ConfigError("attack " + std::to_string(attack_id) + " is not retained in " + dataset.name);
  const auto role = dataset.role_of(attack_id);
  if (!role || *role == Role::kMetaTrain) {
    throw ConfigError("attack " + std::to_string(attack_id) + " is not assigned to an evaluation role");
  }
  const Split split = eval_split(*role);
  const std::size_t isz = dataset.shape.size();
  const auto K = static_cast<std::size_t>(params.test_shot_K);
  const auto M = static_cast<std::size_t>(params.test_query_M);

  Episode ep;
  ep.attacks_support = ep.attacks_query = {attack_id};
  ep.support.images.shape = ep.query.images.shape = dataset.shape;
  for (std::size_t c = 0; c < rec->classes.size(); ++c) {
    draw_cell(rng, rec->classes[c], split, K, M, ep.support, &ep.query, static_cast<int>(c), attack_id, isz);
  }
  for (std::size_t c = 0; c < dataset.clean_pool.size(); ++c) {
    draw_cell(rng, dataset.clean_pool[c], split, K, M, ep.support, &ep.query, static_cast<int>(c), kCleanOrigin,
              isz);
  }
  return ep;
}

// ---------------------------------------------------------------- invariants

void check_dataset_invariants(const MadDataset& ds, const ModelState* reference) {
  const auto n = static_cast<std::size_t>(ds.num_classes);
  const std::size_t isz = ds.shape.size();
  auto fail = [](const std::string& what) { throw IntegrityError(what); };
  auto check_cells = [&](const std::vector<ClassBucket>& cells, const std::string& what) {
    if (cells.size() != n) fail(what + ": expected " + std::to_string(n) + " classes");
    for (std::size_t c = 0; c < n; ++c) {
      const auto& b = cells[c];
      if (b.pixels.size() != b.count() * isz) fail(what + " class " + std::to_string(c) + ": pixel count mismatch");
      if (b.count() != cells.front().count()) fail(what + ": per-class counts differ (not balanced)");
      std::set<std::int64_t> uniq(b.source_index.begin(), b.source_index.end());
      if (uniq.size() != b.count()) fail(what + " class " + std::to_string(c) + ": duplicate source index");
      if (ds.is_split) {
        const std::size_t fifth = b.count() / 5;
        if (b.split_counts[0] + b.split_counts[1] + b.split_counts[2] != b.count() || b.split_counts[1] != fifth ||
            b.split_counts[2] != fifth) {
          fail(what + " class " + std::to_string(c) + ": split is not 3:1:1");
        }
      }
    }
  };
  for (const auto& rec : ds.attacks) {
    if (rec.removed) {
      if (!rec.classes.empty()) fail("removed attack " + std::to_string(rec.attack_id()) + " still holds data");
      continue;
    }
    check_cells(rec.classes, "attack " + std::to_string(rec.attack_id()));
    if (reference) {
      const double ca = evaluate_accuracy(*reference, ds.attack_examples(rec.attack_id()));
      if (ca != 0.0) {
        fail("attack " + std::to_string(rec.attack_id()) + ": reference accuracy " + std::to_string(ca) +
             "% on stored examples (expected 0)");
      }
    }
  }
  check_cells(ds.clean_pool, "clean pool");
  try {
    ds.roles.validate();
  } catch (const ConfigError& e) {
    fail(std::string("role assignment: ") + e.what());
  }
}

// ---------------------------------------------------------------- persistence

namespace {

std::string bucket_file(int tag, std::size_t c) {
  return (tag == kCleanOrigin ? std::string("clean") : "attack_" + std::to_string(tag)) + "/class_" +
         std::to_string(c) + ".f32";
}

nlohmann::json bucket_meta(const std::vector<ClassBucket>& cells, int tag) {
  auto counts = nlohmann::json::array();
  auto sources = nlohmann::json::array();
  auto files = nlohmann::json::array();
  for (std::size_t c = 0; c < cells.size(); ++c) {
    counts.push_back(cells[c].split_counts);
    sources.push_back(cells[c].source_index);
    files.push_back(bucket_file(tag, c));
  }
  return {{"counts", counts}, {"source_index", sources}, {"files", files}};
}

}  // namespace

void validate_manifest(const nlohmann::json& m) {
  auto need = [&](const nlohmann::json& obj, const char* key, auto pred, const char* type, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key) || !pred(obj.at(key))) {
      throw SchemaError("manifest" + where + ": field '" + key + "' missing or not " + type);
    }
  };
  auto is_int = [](const nlohmann::json& v) { return v.is_number_integer(); };
  auto is_num = [](const nlohmann::json& v) { return v.is_number(); };
  auto is_str = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_arr = [](const nlohmann::json& v) { return v.is_array(); };
  auto is_obj = [](const nlohmann::json& v) { return v.is_object(); };
  auto is_bool = [](const nlohmann::json& v) { return v.is_boolean(); };

  need(m, "format_version", is_int, "an integer", "");
  if (m.at("format_version").get<int>() != kMadFormatVersion) {
    throw VersionError("unsupported MAD format_version " + m.at("format_version").dump() + " (expected " +
                       std::to_string(kMadFormatVersion) + ")");
  }
  need(m, "name", is_str, "a string", "");
  need(m, "num_classes", is_int, "an integer", "");
  need(m, "image_shape", is_arr, "an array", "");
  need(m, "reference_checkpoint_id", is_str, "a string", "");
  need(m, "cca", is_num, "a number", "");
  need(m, "is_split", is_bool, "a boolean", "");
  need(m, "grouping", is_obj, "an object", "");
  need(m, "roles", is_obj, "an object", "");
  need(m, "warnings", is_arr, "an array", "");
  need(m, "clean", is_obj, "an object", "");
  need(m, "attacks", is_arr, "an array", "");
  need(m, "checksums", is_obj, "an object", "");
  if (m.at("image_shape").size() != 3) throw SchemaError("manifest: image_shape must have 3 entries");
  const auto n = m.at("num_classes").get<std::int64_t>();
  if (n < 2) throw SchemaError("manifest: num_classes must be >= 2");

  auto check_cells = [&](const nlohmann::json& cells, const std::string& where) {
    need(cells, "counts", is_arr, "an array", where);
    need(cells, "source_index", is_arr, "an array", where);
    need(cells, "files", is_arr, "an array", where);
    for (const char* key : {"counts", "source_index", "files"}) {
      if (static_cast<std::int64_t>(cells.at(key).size()) != n) {
        throw SchemaError("manifest" + where + ": '" + key + "' must have one entry per class");
      }
    }
    for (const auto& c : cells.at("counts")) {
      if (!c.is_array() || c.size() != 3) throw SchemaError("manifest" + where + ": counts entries are [train, val, test]");
    }
    for (const auto& f : cells.at("files")) {
      if (!f.is_string() || !m.at("checksums").contains(f.get<std::string>())) {
        throw SchemaError("manifest" + where + ": file without checksum");
      }
    }
  };
  check_cells(m.at("clean"), ".clean");
  for (std::size_t i = 0; i < m.at("attacks").size(); ++i) {
    const auto& a = m.at("attacks")[i];
    const std::string where = ".attacks[" + std::to_string(i) + "]";
    need(a, "attack_id", is_int, "an integer", where);
    need(a, "spec", is_obj, "an object", where);
    need(a, "group", is_int, "an integer", where);
    need(a, "removed", is_bool, "a boolean", where);
    need(a, "success_counts", is_arr, "an array", where);
    if (!a.at("removed").get<bool>()) check_cells(a, where);
  }
}

void save_mad(const MadDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json checksums = nlohmann::json::object();
  auto write_cells = [&](const std::vector<ClassBucket>& cells, int tag) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      std::vector<std::uint8_t> bytes;
      append_f32_le(bytes, cells[c].pixels);
      const std::string rel = bucket_file(tag, c);
      write_file(dir / rel, bytes);
      checksums[rel] = sha256_hex(bytes);
    }
  };

  nlohmann::json m;
  m["format_version"] = kMadFormatVersion;
  m["name"] = ds.name;
  m["num_classes"] = ds.num_classes;
  m["image_shape"] = {ds.shape.channels, ds.shape.height, ds.shape.width};
  m["reference_checkpoint_id"] = ds.reference_checkpoint_id;
  m["cca"] = ds.cca;
  m["is_split"] = ds.is_split;
  m["grouping"] = nlohmann::json::object();
  for (const auto& [id, g] : ds.grouping) m["grouping"][std::to_string(id)] = g;
  m["roles"] = nlohmann::json::object();
  for (const auto& [role, groups] : ds.roles.role_groups) m["roles"][to_string(role)] = groups;
  m["warnings"] = ds.warnings;
  m["clean"] = bucket_meta(ds.clean_pool, kCleanOrigin);
  write_cells(ds.clean_pool, kCleanOrigin);
  m["attacks"] = nlohmann::json::array();
  for (const auto& rec : ds.attacks) {
    nlohmann::json a = {{"attack_id", rec.attack_id()}, {"spec", to_json(rec.spec)},
                        {"group", rec.group},           {"removed", rec.removed},
                        {"removed_reason", rec.removed_reason}, {"success_counts", rec.success_counts}};
    if (!rec.removed) {
      a.update(bucket_meta(rec.classes, rec.attack_id()));
      write_cells(rec.classes, rec.attack_id());
    }
    m["attacks"].push_back(a);
  }
  m["checksums"] = checksums;
  const std::string text = m.dump(2) + "\n";
  write_file(dir / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

MadDataset load_mad(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("no MAD manifest at " + path.string());
  nlohmann::json m;
  try {
    const auto bytes = read_file(path);
    m = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  validate_manifest(m);

  try {
    MadDataset ds;
    ds.name = m.at("name").get<std::string>();
    ds.num_classes = m.at("num_classes").get<int>();
    const auto shp = m.at("image_shape").get<std::vector<std::size_t>>();
    ds.shape = {shp[0], shp[1], shp[2]};
    ds.reference_checkpoint_id = m.at("reference_checkpoint_id").get<std::string>();
    ds.cca = m.at("cca").get<double>();
    ds.is_split = m.at("is_split").get<bool>();
    for (const auto& [key, g] : m.at("grouping").items()) ds.grouping[std::stoi(key)] = g.get<int>();
    for (const auto& [key, groups] : m.at("roles").items()) {
      ds.roles.role_groups[parse_role(key)] = groups.get<std::vector<int>>();
    }
    ds.warnings = m.at("warnings").get<std::vector<std::string>>();
    const std::size_t isz = ds.shape.size();

    auto read_cells = [&](const nlohmann::json& meta) {
      std::vector<ClassBucket> cells(static_cast<std::size_t>(ds.num_classes));
      for (std::size_t c = 0; c < cells.size(); ++c) {
        auto& b = cells[c];
        const std::string rel = meta.at("files")[c].get<std::string>();
        const auto bytes = read_file(dir / rel);
        if (sha256_hex(bytes) != m.at("checksums").at(rel).get<std::string>()) {
          throw ChecksumError("checksum mismatch for " + (dir / rel).string());
        }
        b.pixels = decode_f32_le(bytes);
        b.source_index = meta.at("source_index")[c].get<std::vector<std::int64_t>>();
        const auto counts = meta.at("counts")[c].get<std::vector<std::size_t>>();
        b.split_counts = {counts[0], counts[1], counts[2]};
        if (b.pixels.size() != b.count() * isz) {
          throw SchemaError(rel + ": blob holds " + std::to_string(b.pixels.size()) + " values, manifest implies " +
                            std::to_string(b.count() * isz));
        }
        if (ds.is_split && counts[0] + counts[1] + counts[2] != b.count()) {
          throw SchemaError(rel + ": split counts do not add up");
        }
      }
      return cells;
    };
    ds.clean_pool = read_cells(m.at("clean"));
    for (const auto& a : m.at("attacks")) {
      AttackRecord rec;
      rec.spec = attack_spec_from_json(a.at("spec"));
      if (rec.spec.attack_id != a.at("attack_id").get<int>()) throw SchemaError("attack_id differs from its spec");
      rec.group = a.at("group").get<int>();
      rec.removed = a.at("removed").get<bool>();
      rec.removed_reason = a.value("removed_reason", "");
      rec.success_counts = a.at("success_counts").get<std::vector<std::size_t>>();
      if (!rec.removed) rec.classes = read_cells(a);
      ds.attacks.push_back(std::move(rec));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

}  // namespace mad
