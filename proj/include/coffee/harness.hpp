#pragma once

// Experiment harness: strict JSON configuration, fingerprinted checkpoints,
// and deterministic end-to-end runs that produce byte-stable reports. Every
// run is a pure function of its config, so repeating a run reproduces each
// report file byte for byte.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coffee/coffee.hpp"
#include "coffee/datagen.hpp"
#include "coffee/diffusion.hpp"
#include "coffee/eval.hpp"
#include "coffee/io.hpp"
#include "coffee/textenc.hpp"

namespace coffee {

// Feature-distance fits need more samples than feature dimensions.
inline constexpr int kFfdMinSamples = FeatureExtractor::kFeatureDim + 1;

namespace harness_detail {

using Json = nlohmann::json;

// Strict-object guard: any key outside `allowed` is a config error, so typos
// fail loudly instead of silently falling back to defaults.
inline void check_keys(const Json& j, const char* ctx, std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw Error(Error::Kind::config, std::string(ctx) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw Error(Error::Kind::config, std::string(ctx) + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read_field(const Json& j, const char* ctx, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const Json::exception& e) {
    throw Error(Error::Kind::config,
                std::string(ctx) + "." + key + ": " + e.what());
  }
}

inline void read_seed_list(const Json& j, const char* ctx, const char* key,
                           std::vector<uint64_t>& out) {
  if (!j.contains(key)) return;
  const Json& a = j.at(key);
  if (!a.is_array())
    throw Error(Error::Kind::config, std::string(ctx) + "." + key + ": expected an array");
  out.clear();
  for (const Json& v : a) {
    if (!v.is_number_unsigned())
      throw Error(Error::Kind::config,
                  std::string(ctx) + "." + key + ": seeds must be non-negative integers");
    out.push_back(v.get<uint64_t>());
  }
}

inline void read_seed(const Json& j, const char* ctx, const char* key, uint64_t& out) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_number_unsigned())
    throw Error(Error::Kind::config,
                std::string(ctx) + "." + key + ": expected a non-negative integer");
  out = v.get<uint64_t>();
}

inline std::string fingerprint_of(const Json& canonical) {
  // nlohmann objects keep keys sorted, so dump() is a canonical serialization.
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical.dump())));
  return buf;
}

inline std::string format_float(double v) {
  // Shortest text that round-trips the double; used for CSV cells.
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string format_pct(double value, double baseline) {
  if (std::fabs(baseline) < 1e-12) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%+.2f%%", 100.0 * (value - baseline) / baseline);
  return buf;
}

}  // namespace harness_detail

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  int steps = 200;
  double beta_start = 0.008;
  double beta_end = 0.05;

  NoiseSchedule make() const { return make_schedule(steps, beta_start, beta_end); }
};

struct SamplerSettings {
  // Conditional guidance for plain-prompt sampling (direct, coffee,
  // concept_removal, neg_prompt_train rows).
  float guidance_scale = 5.0f;
  // Guidance for rows that pass the undesired concept as a negative prompt
  // (neg_prompt_infer, neg_prompt_both).
  float neg_guidance_scale = 3.0f;
};

struct CorpusConfig {
  int size = 320;
  uint64_t seed = 5;

  void validate() const {
    if (size < 1) throw Error(Error::Kind::config, "config: corpus.size must be >= 1");
  }
};

struct EvalHeadConfig {
  int corpus_size = 640;
  uint64_t corpus_seed = 41;
  uint64_t seed = 11;
  FxTrainConfig train;

  void validate() const {
    if (corpus_size < 10)
      throw Error(Error::Kind::config, "config: eval_head.corpus_size must be >= 10");
    train.validate();
  }
};

struct PathsConfig {
  std::string out_dir = "out";
  std::string checkpoint = "out/model.ckpt";
  std::string eval_head = "out/eval_head.ckpt";
};

struct ExperimentConfig {
  std::vector<std::pair<std::string, std::string>> concept_pairs = {
      {"circle", "frame"}, {"square", "stripe"}, {"triangle", "dot"}, {"cross", "checker"}};
  std::vector<FinetuneMethod> methods = {
      FinetuneMethod::direct,          FinetuneMethod::coffee,
      FinetuneMethod::concept_removal, FinetuneMethod::neg_prompt_infer,
      FinetuneMethod::neg_prompt_train, FinetuneMethod::neg_prompt_both};
  double lambda = 1.0;
  std::vector<double> lambda_sweep = {0.0, 0.1, 1.0, 10.0};
  std::vector<uint64_t> seeds = {101, 102, 103};
  TrainableGroups trainable_groups;  // text encoder only by default
  SamplerSettings sampler;
  int n_eval_samples = 16;
  int n_finetune_images = 10;
  int n_ref_samples = 64;  // reference renders per side for the feature distance
  bool dominant_attribute = false;  // failure-mode regime: attribute covers most of the canvas
  CoffeeConfig finetune;            // lambda field is overridden per run
  PretrainConfig pretrain = {.steps = 12000,
                             .batch_size = 32,
                             .lr = 3e-4,
                             .final_lr_frac = 0.03,
                             .p_uncond = 0.1,
                             .seed = 1};
  ScheduleConfig schedule;
  CorpusConfig corpus;
  EvalHeadConfig eval_head;
  PathsConfig paths;
  int threads = 1;

  void validate() const {
    if (concept_pairs.empty())
      throw Error(Error::Kind::config, "config: need at least one concept pair");
    for (const auto& [base, attr] : concept_pairs) {
      concept_by_name(base);      // throws on unknown names
      attribute_by_name(attr);
    }
    if (methods.empty()) throw Error(Error::Kind::config, "config: need at least one method");
    if (seeds.empty()) throw Error(Error::Kind::config, "config: need at least one seed");
    if (lambda < 0.0) throw Error(Error::Kind::config, "config: lambda must be >= 0");
    for (double l : lambda_sweep)
      if (l < 0.0) throw Error(Error::Kind::config, "config: lambda_sweep values must be >= 0");
    trainable_groups.validate();
    if (!(sampler.guidance_scale > 0.0f))
      throw Error(Error::Kind::config, "config: sampler.guidance_scale must be > 0");
    if (!(sampler.neg_guidance_scale > 0.0f))
      throw Error(Error::Kind::config, "config: sampler.neg_guidance_scale must be > 0");
    if (n_eval_samples < 16)
      throw Error(Error::Kind::config, "config: n_eval_samples must be >= 16, got " +
                                           std::to_string(n_eval_samples));
    if (n_finetune_images < 1)
      throw Error(Error::Kind::config, "config: n_finetune_images must be >= 1");
    if (n_ref_samples < kFfdMinSamples)
      throw Error(Error::Kind::config, "config: n_ref_samples must be >= " +
                                           std::to_string(kFfdMinSamples));
    if (threads < 1) throw Error(Error::Kind::config, "config: threads must be >= 1");
    finetune.validate();
    pretrain.validate();
    corpus.validate();
    eval_head.validate();
    schedule.make();  // validates the beta range
  }

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  // Identifies the pretrained-model lineage: anything that changes the
  // pretrained checkpoint's bits changes this string. Fine-tuning settings
  // and evaluation settings are deliberately excluded.
  std::string model_fingerprint() const {
    nlohmann::json c;
    c["schedule"] = {{"steps", schedule.steps},
                     {"beta_start", schedule.beta_start},
                     {"beta_end", schedule.beta_end}};
    c["pretrain"] = {{"steps", pretrain.steps},       {"batch_size", pretrain.batch_size},
                     {"lr", pretrain.lr},             {"final_lr_frac", pretrain.final_lr_frac},
                     {"p_uncond", pretrain.p_uncond}, {"seed", pretrain.seed}};
    c["corpus"] = {{"size", corpus.size}, {"seed", corpus.seed}};
    c["vocabulary"] = Vocabulary::standard().tokens;
    return harness_detail::fingerprint_of(c);
  }

  // Identifies the frozen evaluation head's lineage, independent of the
  // diffusion model.
  std::string eval_head_fingerprint() const {
    nlohmann::json c;
    c["eval_head"] = {{"corpus_size", eval_head.corpus_size},
                      {"corpus_seed", eval_head.corpus_seed},
                      {"seed", eval_head.seed},
                      {"steps", eval_head.train.steps},
                      {"batch_size", eval_head.train.batch_size},
                      {"lr", eval_head.train.lr},
                      {"heldout_frac", eval_head.train.heldout_frac}};
    return harness_detail::fingerprint_of(c);
  }
};

inline ExperimentConfig ExperimentConfig_from_json_impl(const nlohmann::json& j);

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  return ExperimentConfig_from_json_impl(j);
}

inline ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::config, "config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

inline ExperimentConfig ExperimentConfig_from_json_impl(const nlohmann::json& j) {
  using harness_detail::check_keys;
  using harness_detail::read_field;
  using harness_detail::read_seed;
  using harness_detail::read_seed_list;
  ExperimentConfig c;
  check_keys(j, "config",
             {"concept_pairs", "methods", "lambda", "lambda_sweep", "seeds", "trainable_groups",
              "sampler", "n_eval_samples", "n_finetune_images", "n_ref_samples",
              "dominant_attribute", "finetune", "pretrain", "schedule", "corpus", "eval_head",
              "paths", "threads"});
  if (j.contains("concept_pairs")) {
    const nlohmann::json& a = j.at("concept_pairs");
    if (!a.is_array())
      throw Error(Error::Kind::config, "config.concept_pairs: expected an array of [base, attribute] pairs");
    c.concept_pairs.clear();
    for (const nlohmann::json& p : a) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_string() || !p[1].is_string())
        throw Error(Error::Kind::config,
                    "config.concept_pairs: each entry must be a [base, attribute] string pair");
      c.concept_pairs.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
    }
  }
  if (j.contains("methods")) {
    std::vector<std::string> names;
    read_field(j, "config", "methods", names);
    c.methods.clear();
    for (const std::string& n : names) c.methods.push_back(method_from_name(n));
  }
  read_field(j, "config", "lambda", c.lambda);
  read_field(j, "config", "lambda_sweep", c.lambda_sweep);
  read_seed_list(j, "config", "seeds", c.seeds);
  if (j.contains("trainable_groups")) {
    std::vector<std::string> names;
    read_field(j, "config", "trainable_groups", names);
    c.trainable_groups = TrainableGroups::from_names(names);
  }
  if (j.contains("sampler")) {
    const nlohmann::json& s = j.at("sampler");
    check_keys(s, "config.sampler", {"guidance_scale", "neg_guidance_scale"});
    read_field(s, "config.sampler", "guidance_scale", c.sampler.guidance_scale);
    read_field(s, "config.sampler", "neg_guidance_scale", c.sampler.neg_guidance_scale);
  }
  read_field(j, "config", "n_eval_samples", c.n_eval_samples);
  read_field(j, "config", "n_finetune_images", c.n_finetune_images);
  read_field(j, "config", "n_ref_samples", c.n_ref_samples);
  read_field(j, "config", "dominant_attribute", c.dominant_attribute);
  if (j.contains("finetune")) {
    const nlohmann::json& f = j.at("finetune");
    check_keys(f, "config.finetune", {"steps", "lr", "batch_size", "neg_prompt_w"});
    read_field(f, "config.finetune", "steps", c.finetune.steps);
    read_field(f, "config.finetune", "lr", c.finetune.lr);
    read_field(f, "config.finetune", "batch_size", c.finetune.batch_size);
    read_field(f, "config.finetune", "neg_prompt_w", c.finetune.neg_prompt_w);
  }
  if (j.contains("pretrain")) {
    const nlohmann::json& p = j.at("pretrain");
    check_keys(p, "config.pretrain",
               {"steps", "batch_size", "lr", "final_lr_frac", "p_uncond", "seed"});
    read_field(p, "config.pretrain", "steps", c.pretrain.steps);
    read_field(p, "config.pretrain", "batch_size", c.pretrain.batch_size);
    read_field(p, "config.pretrain", "lr", c.pretrain.lr);
    read_field(p, "config.pretrain", "final_lr_frac", c.pretrain.final_lr_frac);
    read_field(p, "config.pretrain", "p_uncond", c.pretrain.p_uncond);
    read_seed(p, "config.pretrain", "seed", c.pretrain.seed);
  }
  if (j.contains("schedule")) {
    const nlohmann::json& s = j.at("schedule");
    check_keys(s, "config.schedule", {"steps", "beta_start", "beta_end"});
    read_field(s, "config.schedule", "steps", c.schedule.steps);
    read_field(s, "config.schedule", "beta_start", c.schedule.beta_start);
    read_field(s, "config.schedule", "beta_end", c.schedule.beta_end);
  }
  if (j.contains("corpus")) {
    const nlohmann::json& s = j.at("corpus");
    check_keys(s, "config.corpus", {"size", "seed"});
    read_field(s, "config.corpus", "size", c.corpus.size);
    read_seed(s, "config.corpus", "seed", c.corpus.seed);
  }
  if (j.contains("eval_head")) {
    const nlohmann::json& s = j.at("eval_head");
    check_keys(s, "config.eval_head",
               {"corpus_size", "corpus_seed", "seed", "steps", "batch_size", "lr", "heldout_frac"});
    read_field(s, "config.eval_head", "corpus_size", c.eval_head.corpus_size);
    read_seed(s, "config.eval_head", "corpus_seed", c.eval_head.corpus_seed);
    read_seed(s, "config.eval_head", "seed", c.eval_head.seed);
    read_field(s, "config.eval_head", "steps", c.eval_head.train.steps);
    read_field(s, "config.eval_head", "batch_size", c.eval_head.train.batch_size);
    read_field(s, "config.eval_head", "lr", c.eval_head.train.lr);
    read_field(s, "config.eval_head", "heldout_frac", c.eval_head.train.heldout_frac);
  }
  if (j.contains("paths")) {
    const nlohmann::json& s = j.at("paths");
    check_keys(s, "config.paths", {"out_dir", "checkpoint", "eval_head"});
    read_field(s, "config.paths", "out_dir", c.paths.out_dir);
    read_field(s, "config.paths", "checkpoint", c.paths.checkpoint);
    read_field(s, "config.paths", "eval_head", c.paths.eval_head);
  }
  read_field(j, "config", "threads", c.threads);
  c.validate();
  return c;
}

inline nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [base, attr] : concept_pairs) pairs.push_back({base, attr});
  j["concept_pairs"] = pairs;
  std::vector<std::string> names;
  for (FinetuneMethod m : methods) names.emplace_back(method_name(m));
  j["methods"] = names;
  j["lambda"] = lambda;
  j["lambda_sweep"] = lambda_sweep;
  j["seeds"] = seeds;
  j["trainable_groups"] = trainable_groups.names();
  j["sampler"] = {{"guidance_scale", sampler.guidance_scale},
                  {"neg_guidance_scale", sampler.neg_guidance_scale}};
  j["n_eval_samples"] = n_eval_samples;
  j["n_finetune_images"] = n_finetune_images;
  j["n_ref_samples"] = n_ref_samples;
  j["dominant_attribute"] = dominant_attribute;
  j["finetune"] = {{"steps", finetune.steps},
                   {"lr", finetune.lr},
                   {"batch_size", finetune.batch_size},
                   {"neg_prompt_w", finetune.neg_prompt_w}};
  j["pretrain"] = {{"steps", pretrain.steps},       {"batch_size", pretrain.batch_size},
                   {"lr", pretrain.lr},             {"final_lr_frac", pretrain.final_lr_frac},
                   {"p_uncond", pretrain.p_uncond}, {"seed", pretrain.seed}};
  j["schedule"] = {{"steps", schedule.steps},
                   {"beta_start", schedule.beta_start},
                   {"beta_end", schedule.beta_end}};
  j["corpus"] = {{"size", corpus.size}, {"seed", corpus.seed}};
  j["eval_head"] = {{"corpus_size", eval_head.corpus_size},
                    {"corpus_seed", eval_head.corpus_seed},
                    {"seed", eval_head.seed},
                    {"steps", eval_head.train.steps},
                    {"batch_size", eval_head.train.batch_size},
                    {"lr", eval_head.train.lr},
                    {"heldout_frac", eval_head.train.heldout_frac}};
  j["paths"] = {{"out_dir", paths.out_dir},
                {"checkpoint", paths.checkpoint},
                {"eval_head", paths.eval_head}};
  j["threads"] = threads;
  return j;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// File layout: one JSON header line, then the named tensors as raw
// little-endian float32 in header order. Saving the result of a load writes
// the identical bytes.

inline constexpr int kCheckpointVersion = 1;

struct CheckpointData {
  std::string kind;  // "model" or "eval_head"
  std::string fingerprint;
  uint64_t seed = 0;
  nlohmann::json meta;  // kind-specific immutable facts (vocabulary, schedule, ...)
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline std::string checkpoint_bytes(const CheckpointData& d) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["kind"] = d.kind;
  header["fingerprint"] = d.fingerprint;
  header["seed"] = d.seed;
  header["meta"] = d.meta;
  nlohmann::json tl = nlohmann::json::array();
  for (const auto& [name, t] : d.tensors) tl.push_back({{"name", name}, {"shape", t.shape}});
  header["tensors"] = tl;
  std::string bytes = header.dump();
  bytes.push_back('\n');
  for (const auto& [name, t] : d.tensors) append_f32le(bytes, t.data.data(), t.data.size());
  return bytes;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& d) {
  write_file(path, checkpoint_bytes(d));
}

// `expected_fingerprint` empty means "accept any"; otherwise a mismatch is a
// hard error so results can never silently mix model lineages.
inline CheckpointData load_checkpoint(const std::filesystem::path& path,
                                      const std::string& expected_kind,
                                      const std::string& expected_fingerprint,
                                      const std::string& produce_hint) {
  if (!std::filesystem::exists(path))
    throw Error(Error::Kind::io, "checkpoint not found: " + path.string() +
                                     (produce_hint.empty() ? "" : "; produce it with: " + produce_hint));
  const std::string bytes = read_file(path);
  const size_t nl = bytes.find('\n');
  if (nl == std::string::npos)
    throw Error(Error::Kind::io, "checkpoint " + path.string() + ": missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::io, "checkpoint " + path.string() + ": corrupt header: " + e.what());
  }
  CheckpointData d;
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw Error(Error::Kind::version,
                  "checkpoint " + path.string() + ": format version " + std::to_string(version) +
                      ", this build reads version " + std::to_string(kCheckpointVersion));
    d.kind = header.at("kind").get<std::string>();
    if (d.kind != expected_kind)
      throw Error(Error::Kind::version, "checkpoint " + path.string() + ": kind '" + d.kind +
                                            "', expected '" + expected_kind + "'");
    d.fingerprint = header.at("fingerprint").get<std::string>();
    if (!expected_fingerprint.empty() && d.fingerprint != expected_fingerprint)
      throw Error(Error::Kind::fingerprint,
                  "checkpoint " + path.string() + ": fingerprint " + d.fingerprint +
                      " does not match the current configuration's " + expected_fingerprint +
                      "; re-run the producing command or fix the config");
    d.seed = header.at("seed").get<uint64_t>();
    d.meta = header.value("meta", nlohmann::json::object());
    size_t offset = nl + 1;
    size_t expected_payload = 0;
    for (const nlohmann::json& t : header.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      Tensor tensor = Tensor::zeros(shape);
      expected_payload += 4 * size_t(tensor.numel());
      read_f32le(bytes, offset, tensor.data.data(), tensor.data.size(),
                 "checkpoint " + path.string());
      offset += 4 * tensor.data.size();
      d.tensors.emplace_back(t.at("name").get<std::string>(), std::move(tensor));
    }
    if (bytes.size() - (nl + 1) != expected_payload)
      throw Error(Error::Kind::io, "checkpoint " + path.string() + ": payload has " +
                                       std::to_string(bytes.size() - (nl + 1)) +
                                       " bytes, header promises " +
                                       std::to_string(expected_payload));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::io, "checkpoint " + path.string() + ": corrupt header: " + e.what());
  }
  return d;
}

// Model state = embedding table + denoiser. Fine-tuned states reuse the same
// kind on purpose: runs that must be bit-identical (for example the lambda = 0
// degeneracy) then produce bit-identical files.
inline CheckpointData model_checkpoint_data(const DenoiserNet& net, const EmbeddingTable& table,
                                            const Vocabulary& vocab,
                                            const ScheduleConfig& schedule,
                                            const std::string& fingerprint, uint64_t seed) {
  CheckpointData d;
  d.kind = "model";
  d.fingerprint = fingerprint;
  d.seed = seed;
  d.meta = {{"vocabulary", vocab.tokens},
            {"schedule",
             {{"steps", schedule.steps},
              {"beta_start", schedule.beta_start},
              {"beta_end", schedule.beta_end}}}};
  d.tensors.emplace_back("table.matrix", table.matrix);
  d.tensors.emplace_back("net.w1", net.w1);
  d.tensors.emplace_back("net.b1", net.b1);
  d.tensors.emplace_back("net.w2", net.w2);
  d.tensors.emplace_back("net.b2", net.b2);
  d.tensors.emplace_back("net.w3", net.w3);
  d.tensors.emplace_back("net.b3", net.b3);
  return d;
}

struct ModelState {
  DenoiserNet net;
  EmbeddingTable table;
};

inline ModelState model_from_checkpoint(const CheckpointData& d, const Vocabulary& vocab,
                                        const std::string& path_for_errors) {
  const auto meta_vocab = d.meta.value("vocabulary", std::vector<std::string>{});
  if (meta_vocab != vocab.tokens)
    throw Error(Error::Kind::fingerprint,
                "checkpoint " + path_for_errors + ": vocabulary does not match this build's");
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : d.tensors) by_name[name] = &t;
  auto take = [&](const char* name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw Error(Error::Kind::io,
                  "checkpoint " + path_for_errors + ": missing tensor '" + std::string(name) + "'");
    dst = *it->second;
  };
  ModelState m;
  m.table.matrix = Tensor::zeros({int64_t(vocab.size()), kEmbedDim});
  take("table.matrix", m.table.matrix);
  if (m.table.matrix.shape != Shape{int64_t(vocab.size()), kEmbedDim})
    throw Error(Error::Kind::shape, "checkpoint " + path_for_errors + ": table.matrix has shape " +
                                        shape_str(m.table.matrix.shape));
  take("net.w1", m.net.w1);
  take("net.b1", m.net.b1);
  take("net.w2", m.net.w2);
  take("net.b2", m.net.b2);
  take("net.w3", m.net.w3);
  take("net.b3", m.net.b3);
  return m;
}

inline CheckpointData eval_head_checkpoint_data(const FeatureExtractor& fx,
                                                const std::string& fingerprint, uint64_t seed) {
  fx.require_trained();
  CheckpointData d;
  d.kind = "eval_head";
  d.fingerprint = fingerprint;
  d.seed = seed;
  d.meta = {{"class_names", fx.class_names}, {"attr_names", fx.attr_names}};
  d.tensors.emplace_back("fx.w1", fx.w1);
  d.tensors.emplace_back("fx.b1", fx.b1);
  d.tensors.emplace_back("fx.w2", fx.w2);
  d.tensors.emplace_back("fx.b2", fx.b2);
  d.tensors.emplace_back("fx.wc", fx.wc);
  d.tensors.emplace_back("fx.bc", fx.bc);
  d.tensors.emplace_back("fx.wa", fx.wa);
  d.tensors.emplace_back("fx.ba", fx.ba);
  return d;
}

inline FeatureExtractor eval_head_from_checkpoint(const CheckpointData& d,
                                                  const std::string& path_for_errors) {
  FeatureExtractor fx;
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : d.tensors) by_name[name] = &t;
  auto take = [&](const char* name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw Error(Error::Kind::io,
                  "checkpoint " + path_for_errors + ": missing tensor '" + std::string(name) + "'");
    dst = *it->second;
  };
  take("fx.w1", fx.w1);
  take("fx.b1", fx.b1);
  take("fx.w2", fx.w2);
  take("fx.b2", fx.b2);
  take("fx.wc", fx.wc);
  take("fx.bc", fx.bc);
  take("fx.wa", fx.wa);
  take("fx.ba", fx.ba);
  fx.class_names = d.meta.value("class_names", std::vector<std::string>{});
  fx.attr_names = d.meta.value("attr_names", std::vector<std::string>{});
  if (int(fx.class_names.size()) != FeatureExtractor::kClassCount ||
      int(fx.attr_names.size()) != FeatureExtractor::kAttrCount)
    throw Error(Error::Kind::io, "checkpoint " + path_for_errors + ": bad head label lists");
  fx.trained = true;
  return fx;
}

// ---------------------------------------------------------------------------
// Artifacts: everything a run needs beyond its (pair, method, seed) triple
// ---------------------------------------------------------------------------

struct Artifacts {
  Vocabulary vocab;
  NoiseSchedule schedule;
  DenoiserNet net;
  EmbeddingTable table;
  FeatureExtractor fx;
  std::vector<LabeledImage> corpus;  // reference set for concept-similarity prototypes
  std::string fingerprint;           // model lineage fingerprint
};

// Loads the pretrained model and evaluation head, or (when build_missing)
// trains and saves them first. Strict loads tell the caller exactly which
// command produces the missing file.
inline Artifacts prepare_artifacts(const ExperimentConfig& cfg, bool build_missing) {
  cfg.validate();
  Artifacts a;
  a.vocab = Vocabulary::standard();
  a.schedule = cfg.schedule.make();
  a.fingerprint = cfg.model_fingerprint();
  a.corpus = build_pretrain_corpus(cfg.corpus.size, cfg.corpus.seed);

  const std::filesystem::path model_path = cfg.paths.checkpoint;
  if (!std::filesystem::exists(model_path)) {
    if (!build_missing)
      throw Error(Error::Kind::io,
                  "checkpoint not found: " + model_path.string() +
                      "; produce it with: coffee pretrain --config <your config>");
    PretrainResult pr = pretrain(a.corpus, a.vocab, cfg.pretrain, a.schedule);
    save_checkpoint(model_path, model_checkpoint_data(pr.net, pr.table, a.vocab, cfg.schedule,
                                                      a.fingerprint, cfg.pretrain.seed));
  }
  const CheckpointData md =
      load_checkpoint(model_path, "model", a.fingerprint,
                      "coffee pretrain --config <your config>");
  ModelState ms = model_from_checkpoint(md, a.vocab, model_path.string());
  a.net = std::move(ms.net);
  a.table = std::move(ms.table);

  const std::filesystem::path head_path = cfg.paths.eval_head;
  const std::string head_fp = cfg.eval_head_fingerprint();
  if (!std::filesystem::exists(head_path)) {
    if (!build_missing)
      throw Error(Error::Kind::io,
                  "checkpoint not found: " + head_path.string() +
                      "; produce it with: coffee train-eval-head --config <your config>");
    const auto head_corpus =
        build_pretrain_corpus(cfg.eval_head.corpus_size, cfg.eval_head.corpus_seed);
    FeatureExtractor fx =
        train_feature_extractor(head_corpus, cfg.eval_head.seed, cfg.eval_head.train);
    save_checkpoint(head_path, eval_head_checkpoint_data(fx, head_fp, cfg.eval_head.seed));
  }
  const CheckpointData hd = load_checkpoint(head_path, "eval_head", head_fp,
                                            "coffee train-eval-head --config <your config>");
  a.fx = eval_head_from_checkpoint(hd, head_path.string());
  return a;
}

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string base;
  std::string attribute;
  std::string method;
  uint64_t seed = 0;
  std::optional<double> lambda;  // set on drift-regularized rows
  float guidance_scale = 0.0f;
  int n_samples = 0;
  float presence_rate = 0.0f;
  float mcs_analog = 0.0f;
  float is_analog = 0.0f;
  std::optional<float> ffd;           // vs attribute-free renders of the base concept
  std::optional<float> ffd_finetune;  // vs renders matching the fine-tuning distribution
  std::vector<float> drift;           // per undesired concept
  std::string fingerprint;

  float drift_mean() const {
    if (drift.empty()) return 0.0f;
    double s = 0.0;
    for (float d : drift) s += d;
    return float(s / double(drift.size()));
  }
};

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["base"] = r.base;
  j["attribute"] = r.attribute;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["lambda"] = r.lambda ? nlohmann::json(*r.lambda) : nlohmann::json(nullptr);
  j["guidance_scale"] = r.guidance_scale;
  j["n_samples"] = r.n_samples;
  j["presence_rate"] = r.presence_rate;
  j["mcs_analog"] = r.mcs_analog;
  j["is_analog"] = r.is_analog;
  j["ffd"] = r.ffd ? nlohmann::json(*r.ffd) : nlohmann::json(nullptr);
  j["ffd_finetune"] = r.ffd_finetune ? nlohmann::json(*r.ffd_finetune) : nlohmann::json(nullptr);
  j["drift"] = r.drift;
  j["fingerprint"] = r.fingerprint;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    j.at("base").get_to(r.base);
    j.at("attribute").get_to(r.attribute);
    j.at("method").get_to(r.method);
    j.at("seed").get_to(r.seed);
    if (!j.at("lambda").is_null()) r.lambda = j.at("lambda").get<double>();
    j.at("guidance_scale").get_to(r.guidance_scale);
    j.at("n_samples").get_to(r.n_samples);
    j.at("presence_rate").get_to(r.presence_rate);
    j.at("mcs_analog").get_to(r.mcs_analog);
    j.at("is_analog").get_to(r.is_analog);
    if (!j.at("ffd").is_null()) r.ffd = j.at("ffd").get<float>();
    if (!j.at("ffd_finetune").is_null()) r.ffd_finetune = j.at("ffd_finetune").get<float>();
    j.at("drift").get_to(r.drift);
    j.at("fingerprint").get_to(r.fingerprint);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Error::Kind::io, std::string("report row: ") + e.what());
  }
  return r;
}

// Which training loss a method runs; methods sharing a key produce
// bit-identical fine-tuned weights under the same seed.
inline FinetuneMethod training_method(FinetuneMethod m) {
  switch (m) {
    case FinetuneMethod::concept_removal:
    case FinetuneMethod::neg_prompt_infer:
      return FinetuneMethod::direct;
    case FinetuneMethod::neg_prompt_both:
      return FinetuneMethod::neg_prompt_train;
    default:
      return m;
  }
}

struct RunSpec {
  std::string base;
  std::string attribute;
  FinetuneMethod method = FinetuneMethod::direct;
  uint64_t seed = 0;
  double lambda = 1.0;  // used by drift-regularized rows only
};

// The full per-run pipeline: snapshot references, fine-tune, sample with the
// method's inference prompt, evaluate. Deterministic in (config, spec).
struct RunOutput {
  EvalReport report;
  FinetuneResult finetune;
  std::vector<std::vector<float>> samples;
};

inline RunOutput run_one(const Artifacts& a, const ExperimentConfig& cfg, const RunSpec& spec) {
  const ConceptSpec& base_spec = concept_by_name(spec.base);
  attribute_by_name(spec.attribute);  // validate the name early

  ConceptRefs refs = snapshot_refs(spec.base, {spec.attribute}, a.vocab, a.table);
  const std::vector<LabeledImage> data =
      build_finetune_set(spec.base, spec.attribute, cfg.n_finetune_images,
                         derive_seed(derive_seed(spec.seed, "finetune-data"),
                                     spec.base + "/" + spec.attribute),
                         cfg.dominant_attribute);

  CoffeeConfig fcfg = cfg.finetune;
  fcfg.lambda = spec.lambda;
  fcfg.trainable_groups = cfg.trainable_groups;

  // The seed stream deliberately ignores the method and lambda: fine-tuning
  // runs that differ only in the loss head then see identical (t, eps) draws,
  // which is what makes the lambda = 0 run bit-identical to direct.
  Rng rng(derive_seed(derive_seed(spec.seed, "finetune-run"),
                      spec.base + "/" + spec.attribute));
  RunOutput out;
  out.finetune = finetune(training_method(spec.method), a.net, a.table, data, refs, a.vocab,
                          a.schedule, fcfg, rng);

  std::string prompt = spec.base;
  SamplerConfig sc;
  sc.steps = a.schedule.T;
  sc.guidance_scale = cfg.sampler.guidance_scale;
  sc.seed = derive_seed(derive_seed(spec.seed, "eval-samples"),
                        spec.base + "/" + spec.attribute);
  switch (spec.method) {
    case FinetuneMethod::concept_removal:
      prompt = spec.base + " without " + spec.attribute;
      break;
    case FinetuneMethod::neg_prompt_infer:
    case FinetuneMethod::neg_prompt_both:
      sc.negative_prompt = spec.attribute;
      sc.guidance_scale = cfg.sampler.neg_guidance_scale;
      break;
    default:
      break;
  }
  out.samples = ddpm_sample_batch(out.finetune.net, out.finetune.table, a.vocab, prompt,
                                  a.schedule, sc, cfg.n_eval_samples);

  EvalReport& r = out.report;
  r.base = spec.base;
  r.attribute = spec.attribute;
  r.method = method_name(spec.method);
  r.seed = spec.seed;
  if (spec.method == FinetuneMethod::coffee) r.lambda = spec.lambda;
  r.guidance_scale = sc.guidance_scale;
  r.n_samples = cfg.n_eval_samples;
  r.presence_rate = presence_rate(out.samples, spec.attribute, a.fx);
  r.mcs_analog = mcs_analog(out.samples, spec.attribute, a.fx, a.corpus);
  r.is_analog = is_analog(out.samples, a.fx);
  if (cfg.n_eval_samples >= kFfdMinSamples) {
    std::vector<std::vector<float>> free_refs, bearing_refs;
    free_refs.reserve(size_t(cfg.n_ref_samples));
    bearing_refs.reserve(size_t(cfg.n_ref_samples));
    const AttributeSpec attr_spec = attribute_by_name(spec.attribute, cfg.dominant_attribute);
    const uint64_t free_seed = derive_seed(derive_seed(3000, "ffd-free"), spec.base);
    const uint64_t bearing_seed =
        derive_seed(derive_seed(2000, "ffd-bearing"), spec.base + "/" + spec.attribute);
    for (int i = 0; i < cfg.n_ref_samples; ++i) {
      free_refs.push_back(render(base_spec, {}, derive_seed(free_seed, "jitter", uint64_t(i))).pixels);
      bearing_refs.push_back(
          render(base_spec, {attr_spec}, derive_seed(bearing_seed, "jitter", uint64_t(i))).pixels);
    }
    const auto sample_f = detail::features_of(out.samples, a.fx);
    r.ffd = float(detail::ffd_features(sample_f, detail::features_of(free_refs, a.fx)));
    r.ffd_finetune =
        float(detail::ffd_features(sample_f, detail::features_of(bearing_refs, a.fx)));
  }
  r.drift = drift(out.finetune.table, refs, a.vocab);
  r.fingerprint = a.fingerprint;
  return out;
}

// ---------------------------------------------------------------------------
// Experiment drivers
// ---------------------------------------------------------------------------

namespace harness_detail {

// Runs one unit of work per (pair, seed) cell, optionally across threads.
// Results land in a pre-sized vector indexed by cell, so the output order
// and bytes never depend on the thread count.
template <class Fn>
void run_cells(int n_cells, int threads, Fn&& fn) {
  if (threads <= 1 || n_cells <= 1) {
    for (int i = 0; i < n_cells; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_cells) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min(threads, n_cells);
  pool.reserve(size_t(n_threads));
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

inline std::string run_tag(const EvalReport& r) {
  std::string tag = r.base + "_" + r.attribute + "_" + r.method;
  if (r.lambda) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "_l%g", *r.lambda);
    tag += buf;
  }
  return tag + "_s" + std::to_string(r.seed);
}

inline std::string trace_csv(const FinetuneResult& ft) {
  std::string csv = "step,loss_diffusion,loss_reg,loss_total,drift_mean\n";
  for (size_t i = 0; i < ft.trace.size(); ++i) {
    const LossBreakdown& b = ft.trace[i];
    double dm = 0.0;
    for (float d : b.per_concept_drift) dm += d;
    if (!b.per_concept_drift.empty()) dm /= double(b.per_concept_drift.size());
    csv += std::to_string(i) + "," + format_float(b.l_diffusion) + "," + format_float(b.l_reg) +
           "," + format_float(b.l_total) + "," + format_float(dm) + "\n";
  }
  return csv;
}

}  // namespace harness_detail

// All (pair, method, seed) rows for the configured methods. Rows come back
// sorted by (base, attribute, method, seed) regardless of thread count.
inline std::vector<EvalReport> run_experiment(const ExperimentConfig& cfg, const Artifacts& a) {
  cfg.validate();
  struct Cell {
    std::string base, attribute;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const auto& [base, attr] : cfg.concept_pairs)
    for (uint64_t seed : cfg.seeds) cells.push_back({base, attr, seed});

  std::vector<std::vector<EvalReport>> per_cell(cells.size());
  harness_detail::run_cells(int(cells.size()), cfg.threads, [&](int i) {
    const Cell& c = cells[size_t(i)];
    for (FinetuneMethod m : cfg.methods) {
      RunSpec spec{c.base, c.attribute, m, c.seed, cfg.lambda};
      per_cell[size_t(i)].push_back(run_one(a, cfg, spec).report);
    }
  });

  std::vector<EvalReport> rows;
  for (auto& cell_rows : per_cell)
    for (auto& r : cell_rows) rows.push_back(std::move(r));
  std::sort(rows.begin(), rows.end(), [](const EvalReport& x, const EvalReport& y) {
    return std::tie(x.base, x.attribute, x.method, x.seed) <
           std::tie(y.base, y.attribute, y.method, y.seed);
  });
  return rows;
}

inline std::vector<EvalReport> run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(cfg, prepare_artifacts(cfg, /*build_missing=*/true));
}

// Drift-regularized rows across the lambda grid. The grid must be sorted
// ascending and contain 0 and 1: 0 anchors the degeneracy with direct
// fine-tuning, 1 is the default operating point.
inline std::vector<EvalReport> run_lambda_sweep(const ExperimentConfig& cfg, const Artifacts& a) {
  cfg.validate();
  const std::vector<double>& lambdas = cfg.lambda_sweep;
  if (lambdas.empty()) throw Error(Error::Kind::config, "lambda sweep: empty lambda grid");
  if (!std::is_sorted(lambdas.begin(), lambdas.end()) ||
      std::adjacent_find(lambdas.begin(), lambdas.end()) != lambdas.end())
    throw Error(Error::Kind::config, "lambda sweep: grid must be strictly ascending");
  const bool has0 = std::find(lambdas.begin(), lambdas.end(), 0.0) != lambdas.end();
  const bool has1 = std::find(lambdas.begin(), lambdas.end(), 1.0) != lambdas.end();
  if (!has0 || !has1)
    throw Error(Error::Kind::config, "lambda sweep: grid must include 0 and 1");
  if (cfg.n_eval_samples < kFfdMinSamples)
    throw Error(Error::Kind::config,
                "lambda sweep: n_eval_samples must be >= " + std::to_string(kFfdMinSamples) +
                    " so the feature-distance fit is defined (48 recommended)");

  struct Cell {
    std::string base, attribute;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (const auto& [base, attr] : cfg.concept_pairs)
    for (uint64_t seed : cfg.seeds) cells.push_back({base, attr, seed});

  std::vector<std::vector<EvalReport>> per_cell(cells.size());
  harness_detail::run_cells(int(cells.size()), cfg.threads, [&](int i) {
    const Cell& c = cells[size_t(i)];
    for (double l : lambdas) {
      RunSpec spec{c.base, c.attribute, FinetuneMethod::coffee, c.seed, l};
      EvalReport r = run_one(a, cfg, spec).report;
      r.lambda = l;
      per_cell[size_t(i)].push_back(std::move(r));
    }
  });

  std::vector<EvalReport> rows;
  for (auto& cell_rows : per_cell)
    for (auto& r : cell_rows) rows.push_back(std::move(r));
  std::sort(rows.begin(), rows.end(), [](const EvalReport& x, const EvalReport& y) {
    return std::tie(*x.lambda, x.base, x.attribute, x.seed) <
           std::tie(*y.lambda, y.base, y.attribute, y.seed);
  });
  return rows;
}

// Direct fine-tuning under the three trainable-group protocols.
struct ProtocolRow {
  std::string groups;  // "+"-joined group names
  int64_t trained_params = 0;
  double param_fraction_of_full = 0.0;
  float is_analog = 0.0f;
  std::optional<float> ffd;
  std::optional<float> ffd_finetune;
  std::vector<EvalReport> rows;  // the per-run rows behind the pooled numbers
};

inline std::vector<ProtocolRow> run_protocol_comparison(const ExperimentConfig& cfg,
                                                        const Artifacts& a) {
  cfg.validate();
  if (cfg.n_eval_samples < kFfdMinSamples)
    throw Error(Error::Kind::config,
                "protocol comparison: n_eval_samples must be >= " +
                    std::to_string(kFfdMinSamples) +
                    " so the feature-distance fit is defined (48 recommended)");
  const std::vector<TrainableGroups> protocols = {
      {.text_encoder = true, .denoiser = false},
      {.text_encoder = false, .denoiser = true},
      {.text_encoder = true, .denoiser = true},
  };
  const int64_t text_params = a.table.matrix.numel();
  const int64_t denoiser_params = a.net.param_count();
  const int64_t full_params = text_params + denoiser_params;

  std::vector<ProtocolRow> out;
  for (const TrainableGroups& g : protocols) {
    ExperimentConfig pc = cfg;
    pc.trainable_groups = g;
    pc.methods = {FinetuneMethod::direct};
    ProtocolRow row;
    std::string joined;
    for (const std::string& n : g.names()) joined += (joined.empty() ? "" : "+") + n;
    row.groups = joined;
    row.trained_params =
        (g.text_encoder ? text_params : 0) + (g.denoiser ? denoiser_params : 0);
    row.param_fraction_of_full = double(row.trained_params) / double(full_params);
    row.rows = run_experiment(pc, a);
    double is_sum = 0.0, ffd_sum = 0.0, ffd_ft_sum = 0.0;
    for (const EvalReport& r : row.rows) {
      is_sum += r.is_analog;
      ffd_sum += r.ffd.value();
      ffd_ft_sum += r.ffd_finetune.value();
    }
    const double n = double(row.rows.size());
    row.is_analog = float(is_sum / n);
    row.ffd = float(ffd_sum / n);
    row.ffd_finetune = float(ffd_ft_sum / n);
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooled statistics and report serialization
// ---------------------------------------------------------------------------

struct PooledStats {
  int n = 0;
  double presence = 0.0, mcs = 0.0, is = 0.0, drift = 0.0;
  double ffd = 0.0, ffd_finetune = 0.0;  // NaN when any row lacks the field
  double mcs_se = 0.0, ffd_se = 0.0, ffd_finetune_se = 0.0;
};

inline PooledStats pool_rows(const std::vector<EvalReport>& rows) {
  if (rows.empty()) throw Error(Error::Kind::contract, "pool_rows: no rows");
  PooledStats s;
  s.n = int(rows.size());
  std::vector<double> mcs, ffd, ffd_ft;
  bool ffd_ok = true;
  for (const EvalReport& r : rows) {
    s.presence += r.presence_rate;
    s.mcs += r.mcs_analog;
    s.is += r.is_analog;
    s.drift += r.drift_mean();
    mcs.push_back(r.mcs_analog);
    if (r.ffd && r.ffd_finetune) {
      ffd.push_back(*r.ffd);
      ffd_ft.push_back(*r.ffd_finetune);
    } else {
      ffd_ok = false;
    }
  }
  const double n = double(s.n);
  s.presence /= n;
  s.mcs /= n;
  s.is /= n;
  s.drift /= n;
  auto se = [](const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / double(v.size() - 1)) / std::sqrt(double(v.size()));
  };
  s.mcs_se = se(mcs, s.mcs);
  if (ffd_ok) {
    for (double x : ffd) s.ffd += x;
    for (double x : ffd_ft) s.ffd_finetune += x;
    s.ffd /= double(ffd.size());
    s.ffd_finetune /= double(ffd_ft.size());
    s.ffd_se = se(ffd, s.ffd);
    s.ffd_finetune_se = se(ffd_ft, s.ffd_finetune);
  } else {
    s.ffd = s.ffd_finetune = std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

inline std::vector<EvalReport> rows_for_method(const std::vector<EvalReport>& rows,
                                               const std::string& method) {
  std::vector<EvalReport> out;
  for (const EvalReport& r : rows)
    if (r.method == method) out.push_back(r);
  return out;
}

// One JSON object per method: its rows plus pooled means.
inline nlohmann::json experiment_report_json(const ExperimentConfig& cfg,
                                             const std::vector<EvalReport>& rows) {
  nlohmann::json j;
  j["fingerprint"] = cfg.model_fingerprint();
  j["config"] = cfg.to_json();
  nlohmann::json methods = nlohmann::json::object();
  for (FinetuneMethod m : cfg.methods) {
    const std::string name = method_name(m);
    const auto mrows = rows_for_method(rows, name);
    if (mrows.empty()) continue;
    const PooledStats s = pool_rows(mrows);
    nlohmann::json entry;
    entry["rows"] = nlohmann::json::array();
    for (const EvalReport& r : mrows) entry["rows"].push_back(report_to_json(r));
    entry["mean"] = {{"presence_rate", s.presence},
                     {"mcs_analog", s.mcs},
                     {"is_analog", s.is},
                     {"drift", s.drift}};
    if (!std::isnan(s.ffd)) {
      entry["mean"]["ffd"] = s.ffd;
      entry["mean"]["ffd_finetune"] = s.ffd_finetune;
    } else {
      entry["mean"]["ffd"] = nullptr;
      entry["mean"]["ffd_finetune"] = nullptr;
    }
    methods[name] = std::move(entry);
  }
  j["methods"] = std::move(methods);
  return j;
}

// Per-method means, then the same metrics as signed percentage differences
// against the direct fine-tuning row.
inline std::string experiment_summary_csv(const ExperimentConfig& cfg,
                                          const std::vector<EvalReport>& rows) {
  using harness_detail::format_float;
  using harness_detail::format_pct;
  std::string csv = "method,presence_rate,mcs_analog,is_analog,ffd,ffd_finetune,drift\n";
  std::map<std::string, PooledStats> stats;
  std::vector<std::string> order;
  for (FinetuneMethod m : cfg.methods) {
    const std::string name = method_name(m);
    const auto mrows = rows_for_method(rows, name);
    if (mrows.empty()) continue;
    stats[name] = pool_rows(mrows);
    order.push_back(name);
  }
  auto cell = [](double v) { return std::isnan(v) ? std::string("n/a") : format_float(v); };
  for (const std::string& name : order) {
    const PooledStats& s = stats[name];
    csv += name + "," + format_float(s.presence) + "," + format_float(s.mcs) + "," +
           format_float(s.is) + "," + cell(s.ffd) + "," + cell(s.ffd_finetune) + "," +
           format_float(s.drift) + "\n";
  }
  if (stats.count("direct")) {
    const PooledStats& d = stats["direct"];
    csv += "\nDifference with Direct Fine-tuning\n";
    csv += "method,presence_rate,mcs_analog,is_analog,ffd,ffd_finetune,drift\n";
    auto pct_cell = [&](double v, double base) {
      return (std::isnan(v) || std::isnan(base)) ? std::string("n/a") : format_pct(v, base);
    };
    for (const std::string& name : order) {
      if (name == "direct") continue;
      const PooledStats& s = stats[name];
      csv += name + "," + format_pct(s.presence, d.presence) + "," + format_pct(s.mcs, d.mcs) +
             "," + format_pct(s.is, d.is) + "," + pct_cell(s.ffd, d.ffd) + "," +
             pct_cell(s.ffd_finetune, d.ffd_finetune) + "," + format_pct(s.drift, d.drift) + "\n";
    }
  }
  return csv;
}

inline std::string sweep_csv(const ExperimentConfig& cfg, const std::vector<EvalReport>& rows) {
  using harness_detail::format_float;
  std::string csv =
      "lambda,presence_rate,mcs_analog,mcs_se,is_analog,ffd,ffd_se,ffd_finetune,ffd_finetune_se,"
      "drift,default\n";
  for (double l : cfg.lambda_sweep) {
    std::vector<EvalReport> lrows;
    for (const EvalReport& r : rows)
      if (r.lambda && *r.lambda == l) lrows.push_back(r);
    if (lrows.empty()) continue;
    const PooledStats s = pool_rows(lrows);
    csv += format_float(l) + "," + format_float(s.presence) + "," + format_float(s.mcs) + "," +
           format_float(s.mcs_se) + "," + format_float(s.is) + "," + format_float(s.ffd) + "," +
           format_float(s.ffd_se) + "," + format_float(s.ffd_finetune) + "," +
           format_float(s.ffd_finetune_se) + "," + format_float(s.drift) + "," +
           (l == 1.0 ? "*" : "") + "\n";
  }
  return csv;
}

inline std::string protocol_csv(const std::vector<ProtocolRow>& rows) {
  using harness_detail::format_float;
  using harness_detail::format_pct;
  std::string csv = "groups,trained_params,param_fraction_of_full,is_analog,ffd,ffd_finetune\n";
  for (const ProtocolRow& r : rows) {
    csv += r.groups + "," + std::to_string(r.trained_params) + "," +
           format_float(r.param_fraction_of_full) + "," + format_float(r.is_analog) + "," +
           format_float(r.ffd.value()) + "," + format_float(r.ffd_finetune.value()) + "\n";
  }
  const ProtocolRow* full = nullptr;
  for (const ProtocolRow& r : rows)
    if (r.groups == "text_encoder+denoiser") full = &r;
  if (full) {
    csv += "\nDifference with Full-Model Fine-tuning\n";
    csv += "groups,is_analog,ffd,ffd_finetune\n";
    for (const ProtocolRow& r : rows) {
      csv += r.groups + "," + format_pct(r.is_analog, full->is_analog) + "," +
             format_pct(r.ffd.value(), full->ffd.value()) + "," +
             format_pct(r.ffd_finetune.value(), full->ffd_finetune.value()) + "\n";
    }
  }
  return csv;
}

}  // namespace coffee
