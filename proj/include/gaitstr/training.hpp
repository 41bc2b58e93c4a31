#pragma once

#include "gaitstr/refinement.hpp"
#include "gaitstr/synthetic.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace gaitstr {

struct TrainConfig {
  ModelConfig model;
  double lambda1 = 1.0;  // triplet weight
  double lambda2 = 1.0;  // classification weight
  double margin = 0.2;
  int batch_identities = 4;  // P
  int batch_sequences = 4;   // K_s
  int frames = 30;           // n
  FrameSelection frame_selection = FrameSelection::center;
  std::string optimizer = "sgd";  // sgd | adam
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<int> decay_steps;
  double decay_factor = 0.1;
  int iterations = 1000;
  std::uint64_t seed = 0;
  int log_interval = 10;
  int checkpoint_interval = 0;  // 0: final checkpoint only
  // Training-time skeleton jitter augmentation (0 disables).
  double augment_jitter_rate = 0.0;
  double augment_jitter_magnitude = 0.1;

  void validate() const;
  // Applies one `key = value` setting; unknown keys and bad values raise
  // ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  double learning_rate_at(int iteration) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Flat text: one `key = value` per line, `#` starts a comment. Errors carry
// the file name and line number.
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
void apply_config_text(TrainConfig& config, const std::string& text, const std::string& source);
// Keys accepted by TrainConfig::set, in documentation order.
const std::vector<std::string>& train_config_keys();

// --- losses ---------------------------------------------------------------------
// features: [B, parts, C]. Batch-all triplet loss per part, averaged over the
// triplets with a positive hinge, then over parts.
ad::Var triplet_loss(const ad::Var& features, const std::vector<int>& labels, double margin);
// logits: [B, classes]; mean softmax cross-entropy.
ad::Var classification_loss(const ad::Var& logits, const std::vector<int>& labels);

struct LossTerms {
  ad::Var triplet, classification, total;
};
LossTerms combined_loss(const ad::Var& features, const ad::Var& logits, const std::vector<int>& labels,
                        double lambda1, double lambda2, double margin);

// --- batches ----------------------------------------------------------------------
struct BatchItem {
  const GaitSample* sample = nullptr;
  int label = 0;  // class index among training identities
  JointSequence joints{synth13(), 0};
  SilhouetteSequence silhouettes;
};

// Sorted identities of `samples`, mapped to class indices 0..n-1.
std::map<int, int> class_index(const std::vector<const GaitSample*>& samples);

// P identities x K_s sequences, drawn deterministically from (seed, iteration);
// frames are selected to length n.
std::vector<BatchItem> sample_batch(const std::vector<const GaitSample*>& samples, int identities, int sequences,
                                    int frames, FrameSelection selection, std::uint64_t seed, int iteration);

// --- optimizers -----------------------------------------------------------------
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual std::string kind() const = 0;
  virtual void step(ParameterStore& params, double learning_rate) = 0;
  // Per-parameter state tensors in a fixed order (for checkpoints).
  virtual std::vector<Tensor*> state() = 0;
  std::int64_t steps = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config, const ParameterStore& params);

// --- training loop --------------------------------------------------------------
struct MetricsRow {
  int iteration = 0;
  double triplet = 0.0, classification = 0.0, total = 0.0, train_rank1 = 0.0;
};

struct StepResult {
  double triplet = 0.0, classification = 0.0, total = 0.0, train_rank1 = 0.0;
};

class Trainer {
 public:
  // Keeps pointers into `dataset`, which must outlive the trainer.
  Trainer(TrainConfig config, const Dataset& dataset);

  const TrainConfig& config() const { return config_; }
  GaitStrModel& model() { return *model_; }
  const GaitStrModel& model() const { return *model_; }
  int iteration() const { return iteration_; }
  Optimizer& optimizer() { return *optimizer_; }

  // One optimizer update on the batch for the current iteration.
  StepResult step();
  // Runs until `config.iterations`, logging every log_interval iterations.
  // With a non-empty `dir`, writes metrics.csv and checkpoints there.
  std::vector<MetricsRow> run(const std::filesystem::path& dir = {},
                              const std::function<void(const MetricsRow&)>& on_log = {});

  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores parameters, optimizer state and the iteration counter; the
  // stored model config must match this trainer's.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  TrainConfig config_;
  std::vector<const GaitSample*> train_;
  std::map<int, int> classes_;
  std::unique_ptr<GaitStrModel> model_;
  std::unique_ptr<Optimizer> optimizer_;
  int iteration_ = 0;
};

// Checkpoint container: magic "GSCK", u32 version, u64 length + config JSON,
// i64 iteration, u32 parameter count, then per tensor u32 name length, name,
// u32 rank, i32 dims, f64 values; then u32 optimizer-kind length + kind,
// i64 optimizer steps, u32 state count and the state tensors.
struct Checkpoint {
  TrainConfig config;
  std::int64_t iteration = 0;
  std::vector<std::pair<std::string, Tensor>> parameters;
  std::string optimizer_kind;
  std::int64_t optimizer_steps = 0;
  std::vector<std::pair<std::string, Tensor>> optimizer_state;
};
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Builds the model described by a checkpoint and loads its parameters,
// validating every name and shape.
std::unique_ptr<GaitStrModel> load_model(const Checkpoint& ckpt);

// Nearest-neighbour (leave-one-out) rank-1 inside a batch of flattened features.
double batch_rank1(const Tensor& features, const std::vector<int>& labels);

}  // namespace gaitstr
