#include "trm/dataset.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "trm/errors.hpp"
#include "trm/rng.hpp"

namespace trm {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

int Task::max_height() const {
  int best = 1;
  auto scan = [&](const std::vector<ExamplePair>& pairs) {
    for (const auto& pair : pairs) {
      best = std::max(best, pair.input.height);
      if (pair.output) best = std::max(best, pair.output->height);
    }
  };
  scan(train_pairs);
  scan(test_pairs);
  return best;
}

int Task::max_width() const {
  int best = 1;
  auto scan = [&](const std::vector<ExamplePair>& pairs) {
    for (const auto& pair : pairs) {
      best = std::max(best, pair.input.width);
      if (pair.output) best = std::max(best, pair.output->width);
    }
  };
  scan(train_pairs);
  scan(test_pairs);
  return best;
}

double Split::mean_train_pairs() const {
  if (tasks.empty()) return 0.0;
  size_t total = 0;
  for (const auto& task : tasks) total += task.train_pairs.size();
  return static_cast<double>(total) / static_cast<double>(tasks.size());
}

double Split::mean_test_pairs() const {
  if (tasks.empty()) return 0.0;
  size_t total = 0;
  for (const auto& task : tasks) total += task.test_pairs.size();
  return static_cast<double>(total) / static_cast<double>(tasks.size());
}

const Task* Split::find(const std::string& task_id) const {
  for (const auto& task : tasks) {
    if (task.task_id == task_id) return &task;
  }
  return nullptr;
}

namespace {

Grid grid_from_json(const ordered_json& value, const std::string& context) {
  if (!value.is_array() || value.empty()) {
    raise(ErrorCode::ParseError, context + ": grid must be a non-empty array of rows");
  }
  std::vector<std::vector<int>> rows;
  rows.reserve(value.size());
  for (const auto& row : value) {
    if (!row.is_array()) raise(ErrorCode::ParseError, context + ": grid row is not an array");
    std::vector<int> cells;
    cells.reserve(row.size());
    for (const auto& cell : row) {
      if (!cell.is_number_integer()) {
        raise(ErrorCode::ParseError, context + ": grid cell is not an integer");
      }
      cells.push_back(cell.get<int>());
    }
    rows.push_back(std::move(cells));
  }
  return make_grid(rows);  // throws GridBoundsError on bad sizes/values
}

ordered_json grid_to_json(const Grid& grid) {
  ordered_json rows = ordered_json::array();
  for (int r = 0; r < grid.height; ++r) {
    ordered_json row = ordered_json::array();
    for (int c = 0; c < grid.width; ++c) row.push_back(static_cast<int>(grid.at(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

ordered_json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::IoError, "cannot open " + path);
  ordered_json doc;
  try {
    in >> doc;
  } catch (const std::exception& e) {
    raise(ErrorCode::ParseError, path + ": " + e.what());
  }
  return doc;
}

}  // namespace

Split load_challenges(const std::string& path, const std::optional<std::string>& solutions_path) {
  const ordered_json doc = parse_json_file(path);
  if (!doc.is_object()) raise(ErrorCode::ParseError, path + ": top level must be an object keyed by task id");

  ordered_json solutions;
  if (solutions_path) {
    solutions = parse_json_file(*solutions_path);
    if (!solutions.is_object()) {
      raise(ErrorCode::ParseError, *solutions_path + ": solutions must be an object keyed by task id");
    }
  }

  Split split;
  split.name = fs::path(path).stem().string();
  for (const auto& [task_id, body] : doc.items()) {
    if (!body.is_object() || !body.contains("train") || !body.contains("test")) {
      raise(ErrorCode::ParseError, path + ": task " + task_id + " must contain train and test arrays");
    }
    Task task;
    task.task_id = task_id;
    for (const auto& item : body["train"]) {
      if (!item.contains("input") || !item.contains("output")) {
        raise(ErrorCode::ParseError, task_id + ": train pair missing input or output");
      }
      ExamplePair pair;
      pair.input = grid_from_json(item["input"], task_id);
      pair.output = grid_from_json(item["output"], task_id);
      task.train_pairs.push_back(std::move(pair));
    }
    if (task.train_pairs.empty()) {
      raise(ErrorCode::ParseError, task_id + ": task has no train pairs");
    }
    size_t test_index = 0;
    for (const auto& item : body["test"]) {
      if (!item.contains("input")) raise(ErrorCode::ParseError, task_id + ": test pair missing input");
      ExamplePair pair;
      pair.input = grid_from_json(item["input"], task_id);
      if (item.contains("output")) {
        pair.output = grid_from_json(item["output"], task_id);
      } else if (solutions_path && solutions.contains(task_id)) {
        const auto& sols = solutions[task_id];
        if (!sols.is_array() || test_index >= sols.size()) {
          raise(ErrorCode::ParseError, task_id + ": solutions entry does not cover test input " +
                                           std::to_string(test_index));
        }
        pair.output = grid_from_json(sols[test_index], task_id);
      }
      task.test_pairs.push_back(std::move(pair));
      ++test_index;
    }
    split.tasks.push_back(std::move(task));
  }

  std::unordered_set<std::string> ids;
  for (const auto& task : split.tasks) {
    if (!ids.insert(task.task_id).second) {
      raise(ErrorCode::ParseError, path + ": duplicate task id " + task.task_id);
    }
  }
  return split;
}

void save_challenges(const Split& split, const std::string& path,
                     const std::optional<std::string>& solutions_path) {
  ordered_json doc = ordered_json::object();
  ordered_json sols = ordered_json::object();
  for (const auto& task : split.tasks) {
    ordered_json body;
    body["train"] = ordered_json::array();
    for (const auto& pair : task.train_pairs) {
      ordered_json item;
      item["input"] = grid_to_json(pair.input);
      item["output"] = grid_to_json(pair.output.value());
      body["train"].push_back(std::move(item));
    }
    body["test"] = ordered_json::array();
    ordered_json task_sols = ordered_json::array();
    bool all_outputs = !task.test_pairs.empty();
    for (const auto& pair : task.test_pairs) {
      ordered_json item;
      item["input"] = grid_to_json(pair.input);
      body["test"].push_back(std::move(item));
      if (pair.output) {
        task_sols.push_back(grid_to_json(*pair.output));
      } else {
        all_outputs = false;
      }
    }
    doc[task.task_id] = std::move(body);
    // Solutions are positional per test input; emit them only when complete.
    if (all_outputs) sols[task.task_id] = std::move(task_sols);
  }
  std::ofstream out(path);
  if (!out) raise(ErrorCode::IoError, "cannot write " + path);
  out << doc.dump();
  if (solutions_path) {
    std::ofstream sout(*solutions_path);
    if (!sout) raise(ErrorCode::IoError, "cannot write " + *solutions_path);
    sout << sols.dump();
  }
}

DerivedEvalSplits build_derived_eval_splits(const Split& eval_split, uint64_t seed) {
  if (eval_split.tasks.size() < 120) {
    raise(ErrorCode::TooFewTasks, "need at least 120 tasks, have " + std::to_string(eval_split.tasks.size()));
  }
  std::vector<std::string> ids;
  ids.reserve(eval_split.tasks.size());
  for (const auto& task : eval_split.tasks) ids.push_back(task.task_id);
  std::sort(ids.begin(), ids.end());
  ids.resize(120);

  std::vector<std::string> shuffled = ids;
  Rng rng(mix_seed(seed, fnv1a64("derived-eval-splits")));
  rng.shuffle(shuffled.data(), shuffled.size());

  auto take = [&](size_t begin, size_t end) {
    std::vector<std::string> keep(shuffled.begin() + begin, shuffled.begin() + end);
    std::sort(keep.begin(), keep.end());
    return keep;
  };

  DerivedEvalSplits out;
  out.train100 = filter_split(eval_split, take(0, 100));
  out.train100.name = eval_split.name + "_train100";
  out.eval10 = filter_split(eval_split, take(100, 110));
  out.eval10.name = eval_split.name + "_eval10";
  out.test10 = filter_split(eval_split, take(110, 120));
  out.test10.name = eval_split.name + "_test10";
  return out;
}

Split filter_split(const Split& split, const std::vector<std::string>& keep_ids) {
  std::unordered_set<std::string> keep(keep_ids.begin(), keep_ids.end());
  std::unordered_set<std::string> present;
  for (const auto& task : split.tasks) present.insert(task.task_id);
  for (const auto& id : keep_ids) {
    if (!present.count(id)) raise(ErrorCode::UnknownTaskId, id);
  }
  Split out;
  out.name = split.name;
  for (const auto& task : split.tasks) {
    if (keep.count(task.task_id)) out.tasks.push_back(task);
  }
  return out;
}

std::vector<std::string> load_id_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::IoError, "cannot open " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos) continue;
    const auto end = line.find_last_not_of(" \t\r");
    ids.push_back(line.substr(begin, end - begin + 1));
  }
  return ids;
}

VariantRegistry::VariantRegistry(std::vector<Entry> entries, uint32_t n_tasks, uint32_t augs_per_task)
    : entries_(std::move(entries)), n_tasks_(n_tasks), augs_per_task_(augs_per_task) {
  if (entries_.size() != static_cast<size_t>(n_tasks_) * augs_per_task_) {
    raise(ErrorCode::ParseError, "registry entry count does not equal n_tasks * augs_per_task");
  }
}

std::vector<uint8_t> VariantRegistry::serialize() const {
  std::vector<uint8_t> bytes;
  bytes.reserve(8 + entries_.size() * 24);
  auto put_u32 = [&](uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
  };
  put_u32(n_tasks_);
  put_u32(augs_per_task_);
  for (const auto& entry : entries_) {
    if (entry.task_id.size() > 255) raise(ErrorCode::ParseError, "task id longer than 255 bytes");
    bytes.push_back(static_cast<uint8_t>(entry.task_id.size()));
    bytes.insert(bytes.end(), entry.task_id.begin(), entry.task_id.end());
    const AugmentationRecord rec = serialize_augmentation(entry.augmentation);
    bytes.insert(bytes.end(), rec.begin(), rec.end());
  }
  return bytes;
}

VariantRegistry VariantRegistry::deserialize(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > bytes.size()) raise(ErrorCode::ParseError, "truncated registry data");
  };
  auto get_u32 = [&]() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos++]) << (8 * i);
    return v;
  };
  const uint32_t n_tasks = get_u32();
  const uint32_t augs_per_task = get_u32();
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(n_tasks) * augs_per_task);
  for (size_t i = 0; i < static_cast<size_t>(n_tasks) * augs_per_task; ++i) {
    need(1);
    const size_t len = bytes[pos++];
    need(len);
    Entry entry;
    entry.task_id.assign(bytes.begin() + pos, bytes.begin() + pos + len);
    pos += len;
    need(13);
    AugmentationRecord rec;
    std::copy(bytes.begin() + pos, bytes.begin() + pos + 13, rec.begin());
    pos += 13;
    entry.augmentation = deserialize_augmentation(rec);
    entries.push_back(std::move(entry));
  }
  if (pos != bytes.size()) raise(ErrorCode::ParseError, "trailing bytes after registry data");
  return VariantRegistry(std::move(entries), n_tasks, augs_per_task);
}

void VariantRegistry::save(const std::string& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::IoError, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

VariantRegistry VariantRegistry::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::IoError, "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

uint64_t VariantRegistry::digest() const {
  const auto bytes = serialize();
  return fnv1a64(bytes.data(), bytes.size());
}

bool VariantRegistry::operator==(const VariantRegistry& other) const {
  if (n_tasks_ != other.n_tasks_ || augs_per_task_ != other.augs_per_task_) return false;
  if (entries_.size() != other.entries_.size()) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].task_id != other.entries_[i].task_id) return false;
    if (!(entries_[i].augmentation == other.entries_[i].augmentation)) return false;
  }
  return true;
}

size_t DataMix::task_count() const {
  size_t n = 0;
  for (const auto& entry : entries) n += entry.split.tasks.size();
  return n;
}

std::vector<const Task*> DataMix::tasks() const {
  std::vector<const Task*> out;
  out.reserve(task_count());
  for (const auto& entry : entries) {
    for (const auto& task : entry.split.tasks) out.push_back(&task);
  }
  return out;
}

std::vector<std::pair<const Task*, const ExamplePair*>> DataMix::held_out_test_pairs() const {
  std::vector<std::pair<const Task*, const ExamplePair*>> out;
  for (const auto& entry : entries) {
    if (entry.use_test) continue;
    for (const auto& task : entry.split.tasks) {
      for (const auto& pair : task.test_pairs) {
        if (pair.has_output()) out.emplace_back(&task, &pair);
      }
    }
  }
  return out;
}

namespace {

std::string expand_data_root(const std::string& raw) {
  const std::string token = "${TRM_DATA_ROOT}";
  const auto at = raw.find(token);
  if (at == std::string::npos) return raw;
  const char* root = std::getenv("TRM_DATA_ROOT");
  if (root == nullptr) {
    raise(ErrorCode::ConfigError, "path references ${TRM_DATA_ROOT} but the variable is not set");
  }
  std::string out = raw;
  out.replace(at, token.size(), root);
  return out;
}

bool parse_bool(const std::string& raw, const std::string& context) {
  if (raw == "true" || raw == "1" || raw == "yes") return true;
  if (raw == "false" || raw == "0" || raw == "no") return false;
  raise(ErrorCode::ParseError, context + ": expected a boolean, got '" + raw + "'");
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::optional<std::string> sibling_solutions_path(const std::string& challenges_path) {
  const std::string needle = "challenges";
  std::string candidate = challenges_path;
  const auto at = candidate.rfind(needle);
  if (at == std::string::npos) return std::nullopt;
  candidate.replace(at, needle.size(), "solutions");
  if (!fs::exists(candidate)) return std::nullopt;
  return candidate;
}

}  // namespace

DataMix load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) raise(ErrorCode::IoError, "cannot open manifest " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();

  DataMix mix;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;

    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      fields.push_back(trim(line.substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 3) {
      raise(ErrorCode::ParseError, manifest_path + ":" + std::to_string(line_no) +
                                       ": expected 'split_path, use_train, use_test'");
    }
    std::string path = expand_data_root(fields[0]);
    if (fs::path(path).is_relative()) path = (base / path).string();

    MixEntry entry;
    entry.use_train = parse_bool(fields[1], manifest_path + ":" + std::to_string(line_no));
    entry.use_test = parse_bool(fields[2], manifest_path + ":" + std::to_string(line_no));
    entry.split = load_challenges(path, sibling_solutions_path(path));
    mix.entries.push_back(std::move(entry));
  }
  return mix;
}

namespace {

VariantRegistry build_registry_over(const std::vector<const Task*>& tasks, uint32_t augs_per_task,
                                    uint64_t seed, bool fix_background, int canvas_side) {
  std::vector<VariantRegistry::Entry> entries;
  entries.reserve(tasks.size() * augs_per_task);
  for (const Task* task : tasks) {
    const uint64_t task_seed = mix_seed(seed, fnv1a64(task->task_id));
    const auto augs =
        sample_augmentations(task_seed, static_cast<int>(augs_per_task), task->max_height(),
                             task->max_width(), fix_background, canvas_side);
    for (const auto& aug : augs) entries.push_back({task->task_id, aug});
  }
  return VariantRegistry(std::move(entries), static_cast<uint32_t>(tasks.size()), augs_per_task);
}

}  // namespace

VariantRegistry build_registry(const DataMix& mix, uint32_t augs_per_task, uint64_t seed,
                               bool fix_background, int canvas_side) {
  return build_registry_over(mix.tasks(), augs_per_task, seed, fix_background, canvas_side);
}

VariantRegistry build_registry(const Split& split, uint32_t augs_per_task, uint64_t seed,
                               bool fix_background, int canvas_side) {
  std::vector<const Task*> tasks;
  tasks.reserve(split.tasks.size());
  for (const auto& task : split.tasks) tasks.push_back(&task);
  return build_registry_over(tasks, augs_per_task, seed, fix_background, canvas_side);
}

std::vector<Batch> sample_epoch(const VariantRegistry& registry, const DataMix& mix, int batch_size,
                                uint64_t epoch_seed, int canvas_side) {
  if (batch_size < 1) raise(ErrorCode::ConfigError, "batch_size must be >= 1");

  Rng variant_rng(mix_seed(epoch_seed, fnv1a64("epoch-variants")));
  std::vector<BatchItem> items;

  size_t task_ordinal = 0;
  for (const auto& entry : mix.entries) {
    for (const auto& task : entry.split.tasks) {
      const size_t variant = registry.augs_per_task() > 1
                                 ? static_cast<size_t>(variant_rng.next_below(registry.augs_per_task()))
                                 : 0;
      const size_t row = registry.row_index(task_ordinal, variant);
      const Augmentation& aug = registry.entry(row).augmentation;

      auto push_pair = [&](const ExamplePair& pair) {
        if (!pair.has_output()) return;
        BatchItem item;
        item.embedding_index = static_cast<uint32_t>(row);
        item.task_ordinal = static_cast<uint32_t>(task_ordinal);
        item.augmentation = aug;
        item.input = apply_augmentation(pair.input, aug, canvas_side);
        item.target = apply_augmentation(*pair.output, aug, canvas_side);
        items.push_back(std::move(item));
      };
      if (entry.use_train) {
        for (const auto& pair : task.train_pairs) push_pair(pair);
      }
      if (entry.use_test) {
        for (const auto& pair : task.test_pairs) push_pair(pair);
      }
      ++task_ordinal;
    }
  }

  Rng shuffle_rng(mix_seed(epoch_seed, fnv1a64("epoch-shuffle")));
  shuffle_rng.shuffle(items.data(), items.size());

  std::vector<Batch> batches;
  for (size_t begin = 0; begin < items.size(); begin += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(items.size(), begin + static_cast<size_t>(batch_size));
    Batch batch;
    batch.items.assign(std::make_move_iterator(items.begin() + begin),
                       std::make_move_iterator(items.begin() + end));
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace trm
