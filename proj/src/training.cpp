#include "gaitstr/training.hpp"

#include "gaitstr/errors.hpp"
#include "gaitstr/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace gaitstr {

namespace fs = std::filesystem;

// --- configuration ------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError("invalid value '" + v + "' for key '" + key + "' (expected a number)");
  return out;
}

long long parse_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError("invalid value '" + v + "' for key '" + key + "' (expected an integer)");
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  const long long x = parse_integer(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    throw ConfigError("value '" + v + "' for key '" + key + "' is out of range");
  return static_cast<int>(x);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid value '" + v + "' for key '" + key + "' (expected true|false)");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys{
      "variant", "topology", "silhouette_channels", "gcn_channels", "decoder_channels", "embed", "scales",
      "temporal_kernel", "cma_hidden", "cma_layers", "cma", "include_pre_refinement", "init_seed", "lambda1",
      "lambda2", "margin", "batch_identities", "batch_sequences", "frames", "frame_selection", "optimizer",
      "learning_rate", "momentum", "weight_decay", "decay_steps", "decay_factor", "iterations", "seed",
      "log_interval", "checkpoint_interval", "augment_jitter_rate", "augment_jitter_magnitude"};
  return keys;
}

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "variant") model.variant = parse_variant(v);
  else if (key == "topology") model.topology = v;
  else if (key == "silhouette_channels") model.silhouette_channels = parse_int_list(key, v);
  else if (key == "gcn_channels") model.gcn_channels = parse_int_list(key, v);
  else if (key == "decoder_channels") model.decoder_channels = parse_int_list(key, v);
  else if (key == "embed") model.embed = parse_int(key, v);
  else if (key == "scales") model.scales = parse_int(key, v);
  else if (key == "temporal_kernel") model.temporal_kernel = parse_int(key, v);
  else if (key == "cma_hidden") model.cma_hidden = parse_int(key, v);
  else if (key == "cma_layers") model.cma_layers = parse_int(key, v);
  else if (key == "cma") model.cma = parse_cma_mode(v);
  else if (key == "include_pre_refinement") model.include_pre_refinement = parse_bool(key, v);
  else if (key == "init_seed") model.init_seed = static_cast<std::uint64_t>(parse_integer(key, v));
  else if (key == "lambda1") lambda1 = parse_double(key, v);
  else if (key == "lambda2") lambda2 = parse_double(key, v);
  else if (key == "margin") margin = parse_double(key, v);
  else if (key == "batch_identities") batch_identities = parse_int(key, v);
  else if (key == "batch_sequences") batch_sequences = parse_int(key, v);
  else if (key == "frames") frames = parse_int(key, v);
  else if (key == "frame_selection") {
    try {
      frame_selection = parse_frame_selection(v);
    } catch (const InvalidInput& e) {
      throw ConfigError(std::string("key 'frame_selection': ") + e.what());
    }
  } else if (key == "optimizer") {
    if (v != "sgd" && v != "adam") throw ConfigError("invalid value '" + v + "' for key 'optimizer' (sgd|adam)");
    optimizer = v;
  } else if (key == "learning_rate") learning_rate = parse_double(key, v);
  else if (key == "momentum") momentum = parse_double(key, v);
  else if (key == "weight_decay") weight_decay = parse_double(key, v);
  else if (key == "decay_steps") decay_steps = parse_int_list(key, v);
  else if (key == "decay_factor") decay_factor = parse_double(key, v);
  else if (key == "iterations") iterations = parse_int(key, v);
  else if (key == "seed") seed = static_cast<std::uint64_t>(parse_integer(key, v));
  else if (key == "log_interval") log_interval = parse_int(key, v);
  else if (key == "checkpoint_interval") checkpoint_interval = parse_int(key, v);
  else if (key == "augment_jitter_rate") augment_jitter_rate = parse_double(key, v);
  else if (key == "augment_jitter_magnitude") augment_jitter_magnitude = parse_double(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::validate() const {
  try {
    model.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("lambda1 and lambda2 must be >= 0");
  if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
  if (batch_identities < 2) throw ConfigError("batch_identities (P) must be >= 2");
  if (batch_sequences < 2) throw ConfigError("batch_sequences (K_s) must be >= 2");
  if (frames < 1) throw ConfigError("frames must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(decay_factor > 0.0)) throw ConfigError("decay_factor must be > 0");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  for (int s : decay_steps)
    if (s <= 0 || s >= std::max(1, iterations))
      throw ConfigError("decay step " + std::to_string(s) + " must lie in (0, iterations)");
  if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
  if (!(augment_jitter_rate >= 0.0 && augment_jitter_rate <= 1.0))
    throw ConfigError("augment_jitter_rate must lie in [0, 1]");
  if (!(augment_jitter_magnitude >= 0.0)) throw ConfigError("augment_jitter_magnitude must be >= 0");
}

double TrainConfig::learning_rate_at(int iteration) const {
  double lr = learning_rate;
  for (int s : decay_steps)
    if (iteration >= s) lr *= decay_factor;
  return lr;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"variant", std::string(variant_name(model.variant))},
          {"topology", model.topology},
          {"silhouette_channels", join(model.silhouette_channels)},
          {"gcn_channels", join(model.gcn_channels)},
          {"decoder_channels", join(model.decoder_channels)},
          {"embed", model.embed},
          {"scales", model.scales},
          {"temporal_kernel", model.temporal_kernel},
          {"cma_hidden", model.cma_hidden},
          {"cma_layers", model.cma_layers},
          {"cma", std::string(cma_mode_name(model.cma))},
          {"include_pre_refinement", model.include_pre_refinement},
          {"num_classes", model.num_classes},
          {"init_seed", model.init_seed},
          {"lambda1", lambda1},
          {"lambda2", lambda2},
          {"margin", margin},
          {"batch_identities", batch_identities},
          {"batch_sequences", batch_sequences},
          {"frames", frames},
          {"frame_selection", frame_selection == FrameSelection::center ? "center" : "repeat"},
          {"optimizer", optimizer},
          {"learning_rate", learning_rate},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"decay_steps", join(decay_steps)},
          {"decay_factor", decay_factor},
          {"iterations", iterations},
          {"seed", seed},
          {"log_interval", log_interval},
          {"checkpoint_interval", checkpoint_interval},
          {"augment_jitter_rate", augment_jitter_rate},
          {"augment_jitter_magnitude", augment_jitter_magnitude}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "num_classes") {
      c.model.num_classes = value.get<int>();
      continue;
    }
    if (value.is_string()) c.set(key, value.get<std::string>());
    else if (value.is_boolean()) c.set(key, value.get<bool>() ? "true" : "false");
    else if (value.is_number_unsigned()) c.set(key, std::to_string(value.get<std::uint64_t>()));
    else if (value.is_number_integer()) c.set(key, std::to_string(value.get<std::int64_t>()));
    else {
      // Round-trip exact text for doubles.
      char buf[64];
      const auto res = std::to_chars(buf, buf + sizeof buf, value.get<double>());
      c.set(key, std::string(buf, res.ptr));
    }
  }
  return c;
}

void apply_config_text(TrainConfig& config, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + body + "'");
    const std::string key = trim(body.substr(0, eq));
    try {
      config.set(key, body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

TrainConfig load_train_config(const fs::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(base, ss.str(), path.string());
  return base;
}

// --- losses ---------------------------------------------------------------------------

ad::Var triplet_loss(const ad::Var& features, const std::vector<int>& labels, double margin) {
  const auto& s = features->shape();
  if (s.size() != 3) throw InvalidInput("triplet_loss expects [B, parts, C], got " + shape_string(s));
  const int b = s[0], parts = s[1], c = s[2];
  if (static_cast<int>(labels.size()) != b) throw InvalidInput("triplet_loss: label count does not match batch");
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  int feasible = 0;
  for (const auto& [l, n] : counts)
    if (n >= 2) ++feasible;
  if (counts.size() < 2 || feasible < 1)
    throw InvalidBatch("triplet_loss needs >= 2 identities and an identity with >= 2 samples");

  const double* x = features->value.data();
  auto row = [&](int i, int p) { return x + (static_cast<std::size_t>(i) * parts + p) * c; };
  // coef[p][i][j]: d(loss)/d(dist_p(i, j)).
  std::vector<double> coef(static_cast<std::size_t>(parts) * b * b, 0.0);
  std::vector<double> dist(static_cast<std::size_t>(parts) * b * b, 0.0);
  double total = 0.0;
  for (int p = 0; p < parts; ++p) {
    double* d = dist.data() + static_cast<std::size_t>(p) * b * b;
    for (int i = 0; i < b; ++i)
      for (int j = i + 1; j < b; ++j) {
        double acc = 0.0;
        const double *u = row(i, p), *v = row(j, p);
        for (int k = 0; k < c; ++k) acc += (u[k] - v[k]) * (u[k] - v[k]);
        d[i * b + j] = d[j * b + i] = std::sqrt(acc);
      }
    double sum = 0.0;
    long active = 0;
    double* g = coef.data() + static_cast<std::size_t>(p) * b * b;
    std::vector<std::pair<int, int>> hits;
    for (int a = 0; a < b; ++a)
      for (int pos = 0; pos < b; ++pos) {
        if (pos == a || labels[static_cast<std::size_t>(pos)] != labels[static_cast<std::size_t>(a)]) continue;
        for (int n = 0; n < b; ++n) {
          if (labels[static_cast<std::size_t>(n)] == labels[static_cast<std::size_t>(a)]) continue;
          const double h = d[a * b + pos] - d[a * b + n] + margin;
          if (h > 0.0) {
            sum += h;
            ++active;
            g[a * b + pos] += 1.0;
            g[a * b + n] -= 1.0;
          }
        }
      }
    if (active > 0) {
      total += sum / static_cast<double>(active);
      for (int k = 0; k < b * b; ++k) g[k] /= static_cast<double>(active) * parts;
    }
  }
  total /= parts;
  return ad::make_op(Tensor::scalar(total), {features}, [coef, dist, b, parts, c](ad::Node& self) {
    Tensor& gx = self.inputs[0]->grad_ref();
    const double up = self.grad[0];
    const double* x = self.inputs[0]->value.data();
    for (int p = 0; p < parts; ++p)
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) {
          const std::size_t k = (static_cast<std::size_t>(p) * b + i) * b + j;
          if (coef[k] == 0.0 || dist[k] == 0.0) continue;  // zero distance: zero subgradient
          const double w = up * coef[k] / dist[k];
          const std::size_t oi = (static_cast<std::size_t>(i) * parts + p) * c;
          const std::size_t oj = (static_cast<std::size_t>(j) * parts + p) * c;
          for (int ch = 0; ch < c; ++ch) {
            const double diff = x[oi + ch] - x[oj + ch];
            gx[oi + ch] += w * diff;
            gx[oj + ch] -= w * diff;
          }
        }
  });
}

ad::Var classification_loss(const ad::Var& logits, const std::vector<int>& labels) {
  const auto& s = logits->shape();
  if (s.size() != 2) throw InvalidInput("classification_loss expects [B, classes], got " + shape_string(s));
  const int b = s[0], n = s[1];
  if (static_cast<int>(labels.size()) != b || b == 0)
    throw InvalidInput("classification_loss: label count does not match batch");
  for (int l : labels)
    if (l < 0 || l >= n) throw InvalidInput("classification_loss: label " + std::to_string(l) + " out of range");
  Tensor prob({b, n});
  double total = 0.0;
  const double* z = logits->value.data();
  for (int i = 0; i < b; ++i) {
    const double* zi = z + static_cast<std::size_t>(i) * n;
    const double m = *std::max_element(zi, zi + n);
    double sum = 0.0;
    for (int k = 0; k < n; ++k) sum += std::exp(zi[k] - m);
    const double lse = m + std::log(sum);
    total += lse - zi[labels[static_cast<std::size_t>(i)]];
    for (int k = 0; k < n; ++k) prob[static_cast<std::size_t>(i) * n + k] = std::exp(zi[k] - lse);
  }
  total /= b;
  return ad::make_op(Tensor::scalar(total), {logits}, [prob = std::move(prob), labels, b, n](ad::Node& self) {
    Tensor& g = self.inputs[0]->grad_ref();
    const double up = self.grad[0] / b;
    for (int i = 0; i < b; ++i)
      for (int k = 0; k < n; ++k) {
        const std::size_t o = static_cast<std::size_t>(i) * n + k;
        g[o] += up * (prob[o] - (k == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
      }
  });
}

LossTerms combined_loss(const ad::Var& features, const ad::Var& logits, const std::vector<int>& labels,
                        double lambda1, double lambda2, double margin) {
  LossTerms t;
  t.triplet = triplet_loss(features, labels, margin);
  t.classification = classification_loss(logits, labels);
  t.total = ad::weighted_sum({t.triplet, t.classification}, {lambda1, lambda2});
  return t;
}

// --- batches ------------------------------------------------------------------------------

std::map<int, int> class_index(const std::vector<const GaitSample*>& samples) {
  std::set<int> ids;
  for (const auto* s : samples) ids.insert(s->identity);
  std::map<int, int> out;
  for (int id : ids) out.emplace(id, static_cast<int>(out.size()));
  return out;
}

std::vector<BatchItem> sample_batch(const std::vector<const GaitSample*>& samples, int identities, int sequences,
                                    int frames, FrameSelection selection, std::uint64_t seed, int iteration) {
  std::map<int, std::vector<const GaitSample*>> by_id;
  for (const auto* s : samples) by_id[s->identity].push_back(s);
  std::vector<int> eligible;
  for (const auto& [id, v] : by_id)
    if (static_cast<int>(v.size()) >= sequences) eligible.push_back(id);
  if (static_cast<int>(eligible.size()) < identities)
    throw ConfigError("dataset has " + std::to_string(eligible.size()) + " identities with >= " +
                      std::to_string(sequences) + " sequences; batch needs " + std::to_string(identities));
  const auto classes = class_index(samples);
  Rng rng(derive_seed(seed, {0xba7c4ULL, static_cast<std::uint64_t>(iteration)}));
  rng.shuffle(eligible.begin(), eligible.end());
  std::vector<BatchItem> batch;
  for (int p = 0; p < identities; ++p) {
    const int id = eligible[static_cast<std::size_t>(p)];
    auto seqs = by_id[id];
    rng.shuffle(seqs.begin(), seqs.end());
    for (int k = 0; k < sequences; ++k) {
      const GaitSample* s = seqs[static_cast<std::size_t>(k)];
      const auto idx = select_frame_indices(s->joints.frames(), frames, selection);
      batch.push_back({s, classes.at(id), take_frames(s->joints, idx), s->silhouettes.take_frames(idx)});
    }
  }
  return batch;
}

// --- optimizers -------------------------------------------------------------------------

namespace {

class Sgd : public Optimizer {
 public:
  Sgd(const ParameterStore& params, double momentum, double weight_decay) : momentum_(momentum), decay_(weight_decay) {
    for (const auto& v : params.vars()) velocity_.emplace_back(v->value.shape());
  }
  std::string kind() const override { return "sgd"; }
  void step(ParameterStore& params, double lr) override {
    const auto& vars = params.vars();
    for (std::size_t i = 0; i < vars.size(); ++i) {
      Tensor& w = vars[i]->value;
      if (vars[i]->grad.empty()) vars[i]->grad_ref();
      const Tensor& g = vars[i]->grad;
      Tensor& v = velocity_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k] + decay_ * w[k];
        w[k] -= lr * v[k];
      }
    }
    ++steps;
  }
  std::vector<Tensor*> state() override {
    std::vector<Tensor*> out;
    for (auto& v : velocity_) out.push_back(&v);
    return out;
  }

 private:
  double momentum_, decay_;
  std::vector<Tensor> velocity_;
};

class Adam : public Optimizer {
 public:
  Adam(const ParameterStore& params, double weight_decay) : decay_(weight_decay) {
    for (const auto& v : params.vars()) {
      m_.emplace_back(v->value.shape());
      v_.emplace_back(v->value.shape());
    }
  }
  std::string kind() const override { return "adam"; }
  void step(ParameterStore& params, double lr) override {
    ++steps;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps));
    const auto& vars = params.vars();
    for (std::size_t i = 0; i < vars.size(); ++i) {
      Tensor& w = vars[i]->value;
      if (vars[i]->grad.empty()) vars[i]->grad_ref();
      const Tensor& g = vars[i]->grad;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k] + decay_ * w[k];
        m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * gk;
        v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * gk * gk;
        w[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps);
      }
    }
  }
  std::vector<Tensor*> state() override {
    std::vector<Tensor*> out;
    for (auto& t : m_) out.push_back(&t);
    for (auto& t : v_) out.push_back(&t);
    return out;
  }

 private:
  double decay_;
  std::vector<Tensor> m_, v_;
};

}  // namespace

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config, const ParameterStore& params) {
  if (config.optimizer == "sgd") return std::make_unique<Sgd>(params, config.momentum, config.weight_decay);
  if (config.optimizer == "adam") return std::make_unique<Adam>(params, config.weight_decay);
  throw ConfigError("unknown optimizer '" + config.optimizer + "'");
}

// --- training loop ------------------------------------------------------------------------

double batch_rank1(const Tensor& features, const std::vector<int>& labels) {
  const int b = features.dim(0);
  const Tensor flat = features.reshaped({b, static_cast<int>(features.size()) / std::max(1, b)});
  const auto m = flat.matrix();
  int hits = 0;
  for (int i = 0; i < b; ++i) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      const double d = (m.row(i) - m.row(j)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    if (best >= 0 && labels[static_cast<std::size_t>(best)] == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return b ? static_cast<double>(hits) / b : 0.0;
}

Trainer::Trainer(TrainConfig config, const Dataset& dataset) : config_(std::move(config)) {
  train_ = dataset.train_samples();
  classes_ = class_index(train_);
  if (classes_.empty()) throw ConfigError("dataset has no training identities");
  config_.model.num_classes = static_cast<int>(classes_.size());
  config_.validate();
  model_ = std::make_unique<GaitStrModel>(config_.model);
  optimizer_ = make_optimizer(config_, model_->params());
}

StepResult Trainer::step() {
  const auto batch = sample_batch(train_, config_.batch_identities, config_.batch_sequences, config_.frames,
                                  config_.frame_selection, config_.seed, iteration_);
  std::vector<ad::Var> features, logits;
  std::vector<int> labels;
  const int rows = config_.model.feature_rows(), c = config_.model.embed;
  for (std::size_t slot = 0; slot < batch.size(); ++slot) {
    const BatchItem& item = batch[slot];
    JointSequence joints = item.joints;
    if (config_.augment_jitter_rate > 0.0)
      joints = inject_jitter(joints, config_.augment_jitter_rate, config_.augment_jitter_magnitude,
                             derive_seed(config_.seed, {0x717e5ULL, static_cast<std::uint64_t>(iteration_), slot}))
                   .joints;
    const EmbeddingBundle bundle = model_->forward(make_input(item.silhouettes, joints));
    features.push_back(ad::reshape(bundle.feature, {1, rows, c}));
    logits.push_back(bundle.logits);
    labels.push_back(item.label);
  }
  const ad::Var f = ad::concat_first(features);
  const LossTerms loss =
      combined_loss(f, ad::concat_first(logits), labels, config_.lambda1, config_.lambda2, config_.margin);
  StepResult r{loss.triplet->value[0], loss.classification->value[0], loss.total->value[0],
               batch_rank1(f->value, labels)};
  if (!std::isfinite(r.total))
    throw DivergenceError("non-finite loss at iteration " + std::to_string(iteration_) +
                          " (triplet " + std::to_string(r.triplet) + ", cls " + std::to_string(r.classification) + ")");
  model_->params().zero_grad();
  ad::backward(loss.total);
  optimizer_->step(model_->params(), config_.learning_rate_at(iteration_));
  ++iteration_;
  return r;
}

namespace {

void write_metrics_header(std::ofstream& out) { out << "iteration,L_triplet,L_cls,L,train_rank1\n"; }

void write_metrics_row(std::ofstream& out, const MetricsRow& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.6f\n", m.iteration, m.triplet, m.classification, m.total,
                m.train_rank1);
  out << buf;
}

}  // namespace

std::vector<MetricsRow> Trainer::run(const fs::path& dir, const std::function<void(const MetricsRow&)>& on_log) {
  std::vector<MetricsRow> log;
  std::ofstream csv;
  if (!dir.empty()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    const fs::path p = dir / "metrics.csv";
    const bool append = iteration_ > 0 && fs::exists(p);
    csv.open(p, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write '" + p.string() + "'");
    if (!append) write_metrics_header(csv);
  }
  while (iteration_ < config_.iterations) {
    StepResult r;
    try {
      r = step();
    } catch (const DivergenceError&) {
      if (!dir.empty()) save_checkpoint(dir / "diverged.ckpt");
      throw;
    }
    if (iteration_ % config_.log_interval == 0 || iteration_ == config_.iterations) {
      MetricsRow row{iteration_, r.triplet, r.classification, r.total, r.train_rank1};
      log.push_back(row);
      if (csv.is_open()) {
        write_metrics_row(csv, row);
        csv.flush();
      }
      if (on_log) on_log(row);
    }
    if (!dir.empty() && config_.checkpoint_interval > 0 && iteration_ % config_.checkpoint_interval == 0)
      save_checkpoint(dir / ("iter_" + std::to_string(iteration_) + ".ckpt"));
  }
  if (!dir.empty()) save_checkpoint(dir / "final.ckpt");
  return log;
}

void Trainer::save_checkpoint(const fs::path& path) const {
  Checkpoint ck;
  ck.config = config_;
  ck.iteration = iteration_;
  const auto& names = model_->params().names();
  const auto& vars = model_->params().vars();
  for (std::size_t i = 0; i < vars.size(); ++i) ck.parameters.emplace_back(names[i], vars[i]->value);
  ck.optimizer_kind = optimizer_->kind();
  ck.optimizer_steps = optimizer_->steps;
  auto state = const_cast<Optimizer&>(*optimizer_).state();
  for (std::size_t i = 0; i < state.size(); ++i) ck.optimizer_state.emplace_back("state" + std::to_string(i), *state[i]);
  write_checkpoint(path, ck);
}

void Trainer::load_checkpoint(const fs::path& path) {
  Checkpoint ck = read_checkpoint(path);
  // Only the iteration budget, schedule and logging cadence may differ on resume.
  TrainConfig stored = ck.config;
  stored.iterations = config_.iterations;
  stored.log_interval = config_.log_interval;
  stored.checkpoint_interval = config_.checkpoint_interval;
  stored.decay_steps = config_.decay_steps;
  if (stored.to_json().dump() != config_.to_json().dump())
    throw ConfigError("checkpoint '" + path.string() + "' was written with a different configuration");
  auto model = load_model(ck);
  model_->params().copy_values_from(model->params());
  if (ck.optimizer_kind != optimizer_->kind())
    throw ConfigError("checkpoint optimizer '" + ck.optimizer_kind + "' differs from '" + optimizer_->kind() + "'");
  auto state = optimizer_->state();
  if (state.size() != ck.optimizer_state.size()) throw IoError("checkpoint optimizer state is incomplete");
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (!state[i]->same_shape(ck.optimizer_state[i].second)) throw IoError("checkpoint optimizer state shape mismatch");
    *state[i] = ck.optimizer_state[i].second;
  }
  optimizer_->steps = ck.optimizer_steps;
  iteration_ = static_cast<int>(ck.iteration);
}

// --- checkpoint I/O -------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'G', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated checkpoint");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, std::size_t limit = 1 << 20) {
  const auto n = get<std::uint32_t>(in);
  if (n > limit) throw IoError("corrupt checkpoint string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw IoError("truncated checkpoint");
  return s;
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  put_string(out, name);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put<std::int32_t>(out, d);
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

std::pair<std::string, Tensor> get_tensor(std::istream& in) {
  std::string name = get_string(in);
  const auto rank = get<std::uint32_t>(in);
  if (rank > 8) throw IoError("corrupt checkpoint tensor rank for '" + name + "'");
  Shape shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = get<std::int32_t>(in);
    if (d < 0 || d > (1 << 28)) throw IoError("corrupt checkpoint dimension for '" + name + "'");
    shape.push_back(d);
    n *= static_cast<std::size_t>(d);
  }
  if (n > (std::size_t{1} << 30)) throw IoError("checkpoint tensor '" + name + "' too large");
  Tensor t(shape);
  if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(n * sizeof(double))))
    throw IoError("truncated checkpoint tensor '" + name + "'");
  return {std::move(name), std::move(t)};
}

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(kCheckpointMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string cfg = ck.config.to_json().dump();
    put<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put<std::int64_t>(out, ck.iteration);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.parameters.size()));
    for (const auto& [name, t] : ck.parameters) put_tensor(out, name, t);
    put_string(out, ck.optimizer_kind);
    put<std::int64_t>(out, ck.optimizer_steps);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.optimizer_state.size()));
    for (const auto& [name, t] : ck.optimizer_state) put_tensor(out, name, t);
    if (!out) throw IoError("write to checkpoint '" + path.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("'" + path.string() + "' is not a checkpoint");
  if (get<std::uint32_t>(in) != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  Checkpoint ck;
  const auto len = get<std::uint64_t>(in);
  if (len > (1 << 20)) throw IoError("corrupt checkpoint config");
  std::string cfg(len, '\0');
  if (!in.read(cfg.data(), static_cast<std::streamsize>(len))) throw IoError("truncated checkpoint");
  try {
    ck.config = TrainConfig::from_json(nlohmann::json::parse(cfg));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint config: ") + e.what());
  }
  ck.iteration = get<std::int64_t>(in);
  const auto np = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < np; ++i) ck.parameters.push_back(get_tensor(in));
  ck.optimizer_kind = get_string(in);
  ck.optimizer_steps = get<std::int64_t>(in);
  const auto ns = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < ns; ++i) ck.optimizer_state.push_back(get_tensor(in));
  return ck;
}

std::unique_ptr<GaitStrModel> load_model(const Checkpoint& ck) {
  auto model = std::make_unique<GaitStrModel>(ck.config.model);
  auto& params = model->params();
  if (ck.parameters.size() != params.size())
    throw IoError("checkpoint holds " + std::to_string(ck.parameters.size()) + " tensors; model expects " +
                  std::to_string(params.size()));
  for (std::size_t i = 0; i < ck.parameters.size(); ++i) {
    const auto& [name, t] = ck.parameters[i];
    if (name != params.names()[i]) throw IoError("checkpoint tensor '" + name + "' where '" + params.names()[i] + "' expected");
    const Tensor& cur = params.vars()[i]->value;
    if (!cur.same_shape(t))
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_string(t.shape()) + ", config implies " +
                    shape_string(cur.shape()));
    params.vars()[i]->value = t;
  }
  return model;
}

}  // namespace gaitstr
