#pragma once

// Training stages over a scene corpus: joint ITC+ITM+LM pretraining, per-task
// fine-tuning (captioning, prompt-masked VQA, statement head) and logit
// distillation into a smaller student.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nv/checkpoint.hpp"
#include "nv/corpus.hpp"
#include "nv/objectives.hpp"

namespace nv {

enum class Stage { Pretrain, FinetuneCaption, FinetuneVqa, FinetuneNlvr, Distill };
std::string_view to_string(Stage s);
// Throws ConfigError.
Stage parse_stage(std::string_view name);

struct AdamWConfig {
  float lr = 3e-4f;
  float weight_decay = 0.01f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// p <- p * (1 - lr * wd) for rank-2 weights, then the bias-corrected Adam
// update; the temperature is clamped to [0.01, 1] afterwards. grads[i] is
// aligned with params.at(i). Throws NaNGradient naming the parameter.
void adamw_step(MEDParams& params, std::span<const Tensor> grads, AdamState& state,
                const AdamWConfig& config);
// Same, leaving parameters whose trainable entry is false untouched.
void adamw_step(MEDParams& params, std::span<const Tensor> grads, AdamState& state,
                const AdamWConfig& config, const std::vector<bool>& trainable);

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  std::size_t steps = 100;
  std::size_t batch_size = 16;
  AdamWConfig optim;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::string augment = "identity";
  std::filesystem::path corpus;
  std::filesystem::path init_checkpoint;     // required except for pretrain
  std::filesystem::path output_checkpoint;   // optional
  std::filesystem::path metrics_log;         // optional JSON lines
  std::filesystem::path teacher_checkpoint;  // distill only
  MEDConfig model;                           // pretrain from scratch / distill student
  float kd_temperature = 2.0f;

  // Throws ConfigError.
  void validate() const;
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
};

struct StepMetrics {
  std::size_t step = 0;
  double itc = 0, itm = 0, lm = 0;
  double aux = 0;  // statement or distillation loss
  double total = 0;
  bool operator==(const StepMetrics&) const = default;
};

std::string to_json_line(const StepMetrics& m, Stage stage);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> log;
};

using StepCallback = std::function<void(const StepMetrics&)>;

// Throws MissingCorpus, MissingTeacher, ConfigError, NaNGradient.
TrainResult train(const TrainConfig& config, const StepCallback& on_step = {});

// Individual pretraining losses for one batch of (image, caption) pairs.
// Caption j matches image i when the texts are identical or, given scene
// specs, when caption j holds for scene i. Matches are ITM positives and are
// never mined as each other's negatives.
struct PretrainLosses {
  Tensor itc, itm, lm;
};
PretrainLosses pretrain_losses(const MEDParams& params, const MEDConfig& config,
                               const Vocabulary& vocab, std::span<const Image* const> images,
                               std::span<const std::string> captions,
                               std::span<const SceneSpec> specs = {});

}  // namespace nv
