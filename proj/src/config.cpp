#include "rpt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace rpt {

namespace {

using nlohmann::json;

// Reads fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(label(key) + ": " + e.what());
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string label(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + label(k) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E>
E parse_enum(const std::string& value, const std::vector<std::pair<std::string, E>>& table, const std::string& where) {
  std::string options;
  for (const auto& [name, e] : table) {
    if (name == value) return e;
    options += (options.empty() ? "" : ", ") + name;
  }
  throw ConfigError(where + ": unknown value '" + value + "' (expected " + options + ")");
}

template <typename E>
std::string enum_name(E e, const std::vector<std::pair<std::string, E>>& table) {
  for (const auto& [name, v] : table) {
    if (v == e) return name;
  }
  return "unknown";
}

const std::vector<std::pair<std::string, TrainMethod>> kMethods{
    {"standard", TrainMethod::standard}, {"adversarial", TrainMethod::adversarial}, {"augmented", TrainMethod::augmented}};
const std::vector<std::pair<std::string, PerturbLevel>> kLevels{{"word", PerturbLevel::word},
                                                                {"sentence", PerturbLevel::sentence}};
const std::vector<std::pair<std::string, LayerEnd>> kEnds{{"bottom", LayerEnd::bottom}, {"top", LayerEnd::top}};
const std::vector<std::pair<std::string, Normalization>> kNorms{
    {"dynamic", Normalization::dynamic}, {"static", Normalization::fixed}, {"none", Normalization::none}};
const std::vector<std::pair<std::string, BatchMode::Kind>> kBatchKinds{{"fixed", BatchMode::Kind::fixed},
                                                                       {"adaptive", BatchMode::Kind::adaptive}};

void read_model(Section s, ModelConfig& m) {
  s.get("num_layers", m.num_layers);
  s.get("hidden_dim", m.hidden_dim);
  s.get("num_heads", m.num_heads);
  s.get("vocab_size", m.vocab_size);
  s.get("max_seq_len", m.max_seq_len);
  s.get("prefix_len", m.prefix_len);
  s.finish();
}

void read_data(Section s, SyntheticTaskSpec& d) {
  s.get("vocab_size", d.vocab_size);
  s.get("num_classes", d.num_classes);
  s.get("signal_per_class", d.signal_per_class);
  s.get("cue_per_class", d.cue_per_class);
  s.get("noise_ratio", d.noise_ratio);
  s.get("min_context", d.min_context);
  s.get("max_context", d.max_context);
  s.get("train_count", d.train_count);
  s.get("dev_count", d.dev_count);
  s.get("test_count", d.test_count);
  s.get("pretrain_count", d.pretrain_count);
  s.get("synonym_density", d.synonym_density);
  s.get("confusion_density", d.confusion_density);
  s.get("synonym_rate", d.synonym_rate);
  s.get("cue_rate", d.cue_rate);
  s.get("cue_agreement", d.cue_agreement);
  s.get("max_cues", d.max_cues);
  s.get("pretrain_label_rate", d.pretrain_label_rate);
  s.finish();
}

void read_pretrain(Section s, PretrainConfig& p) {
  s.get("epochs", p.epochs);
  s.get("batch_size", p.batch_size);
  s.get("learning_rate", p.learning_rate);
  s.get("weight_decay", p.weight_decay);
  s.finish();
}

void read_train(Section s, TrainConfig& t, std::vector<TrainMethod>& methods) {
  s.get("epochs", t.epochs);
  s.get("learning_rate", t.learning_rate);
  s.get("batch_size", t.batch_size);
  s.get("milestones", t.milestones);
  s.get("weight_decay", t.weight_decay);
  std::vector<std::string> names;
  if (s.has("methods")) {
    s.get("methods", names);
    methods.clear();
    for (const auto& n : names) methods.push_back(parse_enum(n, kMethods, s.label("methods")));
  } else {
    s.get("methods", names);
  }
  s.finish();
}

void read_adv(Section s, AdvConfig& a) {
  s.get("epsilon", a.epsilon);
  s.get("step_size", a.step_size);
  s.get("iterations", a.iterations);
  std::string level = enum_name(a.level, kLevels);
  s.get("level", level);
  a.level = parse_enum(level, kLevels, s.label("level"));
  s.get_optional("kl_beta", a.kl_beta);
  s.finish();
}

void read_defense(Section s, DefenseConfig& d, bool& enabled) {
  s.get("enabled", enabled);
  s.get("num_layers", d.num_layers);
  std::string end = enum_name(d.layer_end, kEnds), norm = enum_name(d.normalization, kNorms);
  s.get("layer_end", end);
  s.get("normalization", norm);
  d.layer_end = parse_enum(end, kEnds, s.label("layer_end"));
  d.normalization = parse_enum(norm, kNorms, s.label("normalization"));
  s.get("steps", d.steps);
  if (!s.has("learning_rate")) {
    throw ConfigError(s.label("learning_rate") + " is required (a number, or null to sweep on the dev split)");
  }
  s.get_optional("learning_rate", d.learning_rate);
  if (const json* b = s.child("batch")) {
    Section bs(*b, s.label("batch"));
    std::string kind = enum_name(d.batch.kind, kBatchKinds);
    bs.get("mode", kind);
    d.batch.kind = parse_enum(kind, kBatchKinds, bs.label("mode"));
    bs.get("size", d.batch.size);
    bs.get("token_budget", d.batch.token_budget);
    bs.finish();
  }
  s.finish();
}

void read_attacks(Section s, AttackSelection& a) {
  if (s.has("selected")) {
    std::vector<std::string> names;
    s.get("selected", names);
    a.kinds.clear();
    for (const auto& n : names) a.kinds.push_back(parse_attack(n));
  } else {
    s.child("selected");
  }
  s.get("noise_budget", a.noise_budget);
  if (const json* u = s.child("uat")) {
    Section us(*u, s.label("uat"));
    us.get("trigger_len", a.uat.trigger_len);
    us.get("beam", a.uat.beam);
    us.get("epochs", a.uat.epochs);
    us.get("candidates", a.uat.candidates);
    us.get("batch_size", a.uat.batch_size);
    us.finish();
  }
  s.finish();
}

json to_json_impl(const ExperimentConfig& c) {
  json j;
  const auto& m = c.model;
  j["model"] = {{"num_layers", m.num_layers}, {"hidden_dim", m.hidden_dim}, {"num_heads", m.num_heads},
                {"vocab_size", m.vocab_size}, {"max_seq_len", m.max_seq_len}, {"prefix_len", m.prefix_len}};
  const auto& d = c.data;
  j["data"] = {{"vocab_size", d.vocab_size},
               {"num_classes", d.num_classes},
               {"signal_per_class", d.signal_per_class},
               {"cue_per_class", d.cue_per_class},
               {"noise_ratio", d.noise_ratio},
               {"min_context", d.min_context},
               {"max_context", d.max_context},
               {"train_count", d.train_count},
               {"dev_count", d.dev_count},
               {"test_count", d.test_count},
               {"pretrain_count", d.pretrain_count},
               {"synonym_density", d.synonym_density},
               {"confusion_density", d.confusion_density},
               {"synonym_rate", d.synonym_rate},
               {"cue_rate", d.cue_rate},
               {"cue_agreement", d.cue_agreement},
               {"max_cues", d.max_cues},
               {"pretrain_label_rate", d.pretrain_label_rate}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"learning_rate", c.pretrain.learning_rate},
                   {"weight_decay", c.pretrain.weight_decay}};
  std::vector<std::string> methods;
  for (auto mth : c.methods) methods.push_back(enum_name(mth, kMethods));
  j["train"] = {{"epochs", c.train.epochs},
                {"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"milestones", c.train.milestones},
                {"weight_decay", c.train.weight_decay},
                {"methods", methods}};
  j["adv"] = {{"epsilon", c.adv.epsilon},
              {"step_size", c.adv.step_size},
              {"iterations", c.adv.iterations},
              {"level", enum_name(c.adv.level, kLevels)},
              {"kl_beta", c.adv.kl_beta ? json(*c.adv.kl_beta) : json(nullptr)}};
  j["defense"] = {
      {"enabled", c.defense_enabled},
      {"num_layers", c.defense.num_layers},
      {"layer_end", enum_name(c.defense.layer_end, kEnds)},
      {"normalization", enum_name(c.defense.normalization, kNorms)},
      {"steps", c.defense.steps},
      {"learning_rate", c.defense.learning_rate ? json(*c.defense.learning_rate) : json(nullptr)},
      {"batch",
       {{"mode", enum_name(c.defense.batch.kind, kBatchKinds)},
        {"size", c.defense.batch.size},
        {"token_budget", c.defense.batch.token_budget}}}};
  std::vector<std::string> attacks;
  for (auto k : c.attacks.kinds) attacks.push_back(attack_name(k));
  j["attacks"] = {{"selected", attacks},
                  {"noise_budget", c.attacks.noise_budget},
                  {"uat",
                   {{"trigger_len", c.attacks.uat.trigger_len},
                    {"beam", c.attacks.uat.beam},
                    {"epochs", c.attacks.uat.epochs},
                    {"candidates", c.attacks.uat.candidates},
                    {"batch_size", c.attacks.uat.batch_size}}}};
  j["analysis"] = {{"enabled", c.analysis.enabled},
                   {"max_samples", c.analysis.max_samples},
                   {"resamples", c.analysis.resamples}};
  j["mixed"] = {{"enabled", c.mixed.enabled}, {"steps", c.mixed.steps}};
  j["sweep"] = {{"learning_rates", c.sweep.learning_rates},
                {"layer_sweep", c.sweep.layer_sweep},
                {"layer_counts", c.sweep.layer_counts},
                {"steps", c.sweep.steps},
                {"normalization_variants", c.sweep.normalization_variants},
                {"dynamic_batch_sizes", c.sweep.dynamic_batch_sizes},
                {"dev_samples", c.sweep.dev_samples}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  json inputs = json::object();
  if (c.lm_path) inputs["lm"] = *c.lm_path;
  if (c.prefix_path) inputs["prefix"] = *c.prefix_path;
  if (c.test_set_path) inputs["test_set"] = *c.test_set_path;
  j["inputs"] = inputs;
  return j;
}

}  // namespace

std::string method_name(TrainMethod m) { return enum_name(m, kMethods); }

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.pretrain.epochs = 2;
  c.train.epochs = 3;
  c.train.learning_rate = 1e-3f;
  c.defense.num_layers = 3;
  c.defense.normalization = Normalization::fixed;
  c.defense.steps = 10;
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  data.validate();
  train.validate();
  adv.validate();
  if (data.vocab_size != model.vocab_size) throw ConfigError("data.vocab_size must equal model.vocab_size");
  if (methods.empty()) throw ConfigError("train.methods must name at least one method");
  if (pretrain.epochs < 1 || pretrain.batch_size < 1) throw ConfigError("pretrain epochs and batch_size must be >= 1");
  DefenseConfig d = defense;
  if (!d.learning_rate) {
    if (sweep.learning_rates.empty()) {
      throw ConfigError("defense.learning_rate is null and sweep.learning_rates is empty");
    }
    d.learning_rate = sweep.learning_rates.front();
  }
  d.validate(model);
  if (!(attacks.noise_budget > 0.0 && attacks.noise_budget <= 1.0)) {
    throw ConfigError("attacks.noise_budget must lie in (0, 1]");
  }
  if (analysis.resamples < 100) throw ConfigError("analysis.resamples must be >= 100");
  for (int n : sweep.layer_counts) {
    if (n < 0 || n > model.num_layers) throw ConfigError("sweep.layer_counts entries must lie in [0, num_layers]");
  }
  for (int b : sweep.dynamic_batch_sizes) {
    if (b < 2) throw ConfigError("sweep.dynamic_batch_sizes entries must be >= 2");
  }
  if (sweep.dev_samples < 1) throw ConfigError("sweep.dev_samples must be >= 1");
  for (int s : sweep.steps) {
    if (s < 0) throw ConfigError("sweep.steps entries must be non-negative");
  }
  for (int s : mixed.steps) {
    if (s < 0) throw ConfigError("mixed.steps entries must be non-negative");
  }
  for (const auto* p : {&lm_path, &prefix_path, &test_set_path}) {
    if (*p && !std::filesystem::exists(**p)) throw ConfigError("referenced file does not exist: " + **p);
  }
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = ExperimentConfig::defaults();
  Section root(j, "");
  if (const json* v = root.child("model")) read_model(Section(*v, "model"), c.model);
  if (const json* v = root.child("data")) read_data(Section(*v, "data"), c.data);
  if (const json* v = root.child("pretrain")) read_pretrain(Section(*v, "pretrain"), c.pretrain);
  if (const json* v = root.child("train")) read_train(Section(*v, "train"), c.train, c.methods);
  if (const json* v = root.child("adv")) read_adv(Section(*v, "adv"), c.adv);
  if (const json* v = root.child("defense")) read_defense(Section(*v, "defense"), c.defense, c.defense_enabled);
  if (const json* v = root.child("attacks")) read_attacks(Section(*v, "attacks"), c.attacks);
  if (const json* v = root.child("analysis")) {
    Section s(*v, "analysis");
    s.get("enabled", c.analysis.enabled);
    s.get("max_samples", c.analysis.max_samples);
    s.get("resamples", c.analysis.resamples);
    s.finish();
  }
  if (const json* v = root.child("mixed")) {
    Section s(*v, "mixed");
    s.get("enabled", c.mixed.enabled);
    s.get("steps", c.mixed.steps);
    s.finish();
  }
  if (const json* v = root.child("sweep")) {
    Section s(*v, "sweep");
    s.get("learning_rates", c.sweep.learning_rates);
    s.get("layer_sweep", c.sweep.layer_sweep);
    s.get("layer_counts", c.sweep.layer_counts);
    s.get("steps", c.sweep.steps);
    s.get("normalization_variants", c.sweep.normalization_variants);
    s.get("dynamic_batch_sizes", c.sweep.dynamic_batch_sizes);
    s.get("dev_samples", c.sweep.dev_samples);
    s.finish();
  }
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  if (const json* v = root.child("inputs")) {
    Section s(*v, "inputs");
    s.get_optional("lm", c.lm_path);
    s.get_optional("prefix", c.prefix_path);
    s.get_optional("test_set", c.test_set_path);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) { return to_json_impl(cfg).dump(2) + "\n"; }

}  // namespace rpt
