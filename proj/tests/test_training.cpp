#include "gaitstr/errors.hpp"
#include "gaitstr/training.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

using namespace gaitstr;

namespace {

ad::Var leaf(const Tensor& t) { return ad::constant(t); }

double oracle_triplet(const Tensor& f, const std::vector<int>& labels, double margin) {
  const int b = f.dim(0), parts = f.dim(1), c = f.dim(2);
  auto dist = [&](int i, int j, int p) {
    double s = 0.0;
    for (int k = 0; k < c; ++k) {
      const double d = f[static_cast<std::size_t>((i * parts + p) * c + k)] - f[static_cast<std::size_t>((j * parts + p) * c + k)];
      s += d * d;
    }
    return std::sqrt(s);
  };
  double total = 0.0;
  for (int p = 0; p < parts; ++p) {
    double sum = 0.0;
    int active = 0;
    for (int a = 0; a < b; ++a)
      for (int q = 0; q < b; ++q)
        for (int n = 0; n < b; ++n) {
          if (q == a || labels[static_cast<std::size_t>(q)] != labels[static_cast<std::size_t>(a)] ||
              labels[static_cast<std::size_t>(n)] == labels[static_cast<std::size_t>(a)]) continue;
          const double h = dist(a, q, p) - dist(a, n, p) + margin;
          if (h > 0) {
            sum += h;
            ++active;
          }
        }
    if (active) total += sum / active;
  }
  return total / parts;
}

TrainConfig micro_train_config() {
  TrainConfig c;
  c.model.silhouette_channels = {2, 3, 4};
  c.model.gcn_channels = {6};
  c.model.decoder_channels = {6, 5, 4};
  c.model.embed = 8;
  c.model.temporal_kernel = 3;
  c.model.cma_hidden = 4;
  c.model.scales = 2;
  c.model.init_seed = 3;
  c.batch_identities = 2;
  c.batch_sequences = 2;
  c.frames = 6;
  c.optimizer = "adam";
  c.learning_rate = 1e-2;
  c.iterations = 6;
  c.log_interval = 2;
  c.seed = 11;
  return c;
}

const Dataset& micro_dataset() {
  static const Dataset d = [] {
    DatasetSpec s;
    s.identities = 4;
    s.sequences_per_identity = 4;
    s.frames = 8;
    s.seed = 5;
    return generate_dataset(s);
  }();
  return d;
}

std::vector<Tensor> param_values(Trainer& t) {
  std::vector<Tensor> out;
  for (const auto& v : t.model().params().vars()) out.push_back(v->value);
  return out;
}

bool same_values(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].to_vector() != b[i].to_vector()) return false;
  return true;
}

}  // namespace

TEST_CASE("triplet loss examples") {
  // Identical embeddings: every triplet has hinge exactly equal to the margin.
  const Tensor same({4, 2, 3}, std::vector<double>(24, 0.7));
  CHECK(triplet_loss(leaf(same), {0, 0, 1, 1}, 0.2)->value[0] == doctest::Approx(0.2).epsilon(1e-15));
  // Well separated classes: no active triplets.
  Tensor far({4, 1, 2}, {0, 0, 0, 0.01, 100, 0, 100, 0.01});
  CHECK(triplet_loss(leaf(far), {0, 0, 1, 1}, 0.2)->value[0] == 0.0);
  CHECK_THROWS_AS(triplet_loss(leaf(same), {0, 1, 2, 3}, 0.2), InvalidBatch);
  CHECK_THROWS_AS(triplet_loss(leaf(same), {0, 0, 0, 0}, 0.2), InvalidBatch);
  CHECK_THROWS_AS(triplet_loss(leaf(same), {0, 0, 1}, 0.2), InvalidInput);
  CHECK_THROWS_AS(triplet_loss(leaf(Tensor({4, 3})), {0, 0, 1, 1}, 0.2), InvalidInput);
}

TEST_CASE("triplet loss matches a nested-loop oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 120; ++trial) {
    const int b = 3 + static_cast<int>(rng.index(6));
    const int parts = 1 + static_cast<int>(rng.index(3));
    const int c = 1 + static_cast<int>(rng.index(4));
    std::vector<int> labels(static_cast<std::size_t>(b));
    for (int& l : labels) l = static_cast<int>(rng.index(3));
    labels[0] = labels[1] = 0;
    labels[2] = 1;
    rng.shuffle(labels.begin(), labels.end());
    const Tensor f = testutil::random_tensor({b, parts, c}, rng, -1, 1);
    const double margin = rng.uniform(0, 0.5);
    CHECK(std::abs(triplet_loss(leaf(f), labels, margin)->value[0] - oracle_triplet(f, labels, margin)) <= 1e-9);
  }
}

TEST_CASE("triplet and classification gradients") {
  Rng rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    ad::Var f = ad::leaf(testutil::random_tensor({6, 2, 3}, rng, -1, 1));
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    const auto rep = testutil::gradcheck({{"f", f}}, [&] { return triplet_loss(f, labels, 0.3); });
    CHECK(rep.worst <= 1e-6);
    ad::Var z = ad::leaf(testutil::random_tensor({6, 4}, rng, -2, 2));
    const auto rep2 = testutil::gradcheck({{"z", z}}, [&] { return classification_loss(z, {0, 3, 1, 2, 2, 0}); });
    CHECK(rep2.worst <= 1e-6);
  }
}

TEST_CASE("classification loss") {
  for (int n : {2, 5, 8})
    CHECK(classification_loss(leaf(Tensor({3, n})), {0, 1, 1})->value[0] == doctest::Approx(std::log(n)).epsilon(1e-14));
  Tensor sure({2, 3}, {1000, 0, 0, 0, 0, 1000});
  CHECK(classification_loss(leaf(sure), {0, 2})->value[0] == 0.0);
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const int b = 1 + static_cast<int>(rng.index(5)), n = 2 + static_cast<int>(rng.index(6));
    const Tensor z = testutil::random_tensor({b, n}, rng, -5, 5);
    std::vector<int> labels(static_cast<std::size_t>(b));
    for (int& l : labels) l = static_cast<int>(rng.index(static_cast<std::uint64_t>(n)));
    double expect = 0.0;
    for (int i = 0; i < b; ++i) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += std::exp(z[static_cast<std::size_t>(i * n + k)]);
      expect += std::log(s) - z[static_cast<std::size_t>(i * n + labels[static_cast<std::size_t>(i)])];
    }
    CHECK(std::abs(classification_loss(leaf(z), labels)->value[0] - expect / b) <= 1e-12);
  }
  CHECK_THROWS_AS(classification_loss(leaf(Tensor({2, 3})), {0, 3}), InvalidInput);
  CHECK_THROWS_AS(classification_loss(leaf(Tensor({2, 3})), {0, -1}), InvalidInput);
  CHECK_THROWS_AS(classification_loss(leaf(Tensor({2, 3})), {0}), InvalidInput);
}

TEST_CASE("combined loss is the weighted sum") {
  Rng rng(24);
  const Tensor f = testutil::random_tensor({4, 2, 3}, rng, -1, 1);
  const Tensor z = testutil::random_tensor({4, 3}, rng, -1, 1);
  const std::vector<int> labels{0, 0, 1, 1};
  const LossTerms only_triplet = combined_loss(leaf(f), leaf(z), labels, 1.0, 0.0, 0.2);
  CHECK(only_triplet.total->value[0] == only_triplet.triplet->value[0]);
  for (double l1 : {0.0, 0.01, 0.5, 2.0})
    for (double l2 : {0.0, 1.0, 3.0}) {
      const LossTerms t = combined_loss(leaf(f), leaf(z), labels, l1, l2, 0.2);
      CHECK(t.total->value[0] ==
            doctest::Approx(l1 * t.triplet->value[0] + l2 * t.classification->value[0]).epsilon(1e-14));
    }
}

TEST_CASE("batch sampling") {
  DatasetSpec s;
  s.identities = 10;
  s.sequences_per_identity = 3;
  s.frames = 12;
  s.seed = 2;
  const Dataset d = generate_dataset(s);
  const auto train = d.train_samples();
  const auto batch = sample_batch(train, 4, 2, 5, FrameSelection::center, 9, 0);
  REQUIRE(batch.size() == 8);
  std::set<int> ids;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ids.insert(batch[i].sample->identity);
    CHECK(batch[i].joints.frames() == 5);
    CHECK(batch[i].silhouettes.frames() == 5);
    CHECK(batch[i].sample->identity == batch[i / 2 * 2].sample->identity);
    CHECK(Dataset::is_train_identity(batch[i].sample->identity));
    CHECK(batch[i].label == class_index(train).at(batch[i].sample->identity));
  }
  CHECK(ids.size() == 4);
  CHECK(batch[0].sample != batch[1].sample);

  auto signature = [&](int iteration) {
    std::vector<const GaitSample*> out;
    for (const auto& b : sample_batch(train, 4, 2, 5, FrameSelection::center, 9, iteration)) out.push_back(b.sample);
    return out;
  };
  CHECK(signature(3) == signature(3));
  int differing = 0;
  for (int it = 0; it < 10; ++it) differing += signature(it) != signature(it + 1);
  CHECK(differing >= 8);
  CHECK_THROWS_AS(sample_batch(train, 6, 2, 5, FrameSelection::center, 9, 0), ConfigError);
  CHECK_THROWS_AS(sample_batch(train, 2, 4, 5, FrameSelection::center, 9, 0), ConfigError);
}

TEST_CASE("class index is sorted and dense") {
  const auto train = micro_dataset().train_samples();
  const auto idx = class_index(train);
  int expect = 0;
  for (const auto& [id, cls] : idx) CHECK(cls == expect++);
}

TEST_CASE("config text parsing") {
  TrainConfig c;
  apply_config_text(c, "# comment\nlambda1 = 0.5\n\n  margin=0.3  # trailing\ndecay_steps = 10, 20\noptimizer = adam\n", "x.cfg");
  CHECK(c.lambda1 == 0.5);
  CHECK(c.margin == 0.3);
  CHECK(c.decay_steps == std::vector<int>{10, 20});
  CHECK(c.optimizer == "adam");

  auto message = [](const std::string& text) {
    TrainConfig t;
    try {
      apply_config_text(t, text, "bad.cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  const std::string unknown = message("lambda1 = 1\nbogus_key = 3\n");
  CHECK(unknown.find("bad.cfg:2") != std::string::npos);
  CHECK(unknown.find("bogus_key") != std::string::npos);
  CHECK(message("margin = abc\n").find("margin") != std::string::npos);
  CHECK(message("\n\nno equals sign\n").find("bad.cfg:3") != std::string::npos);
  CHECK(message("optimizer = rmsprop\n").find("optimizer") != std::string::npos);

  TrainConfig r;
  for (const auto& key : train_config_keys()) CHECK_NOTHROW(r.to_json().contains(key));
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(load_train_config("/nonexistent/x.cfg"), ConfigError);
}

TEST_CASE("config validation") {
  auto invalid = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    try {
      c.validate();
    } catch (const ConfigError&) {
      return true;
    }
    return false;
  };
  CHECK(invalid([](TrainConfig& c) { c.batch_identities = 1; }));
  CHECK(invalid([](TrainConfig& c) { c.batch_sequences = 1; }));
  CHECK(invalid([](TrainConfig& c) { c.lambda1 = -1; }));
  CHECK(invalid([](TrainConfig& c) { c.learning_rate = 0; }));
  CHECK(invalid([](TrainConfig& c) { c.decay_steps = {2000}; }));
  CHECK(invalid([](TrainConfig& c) { c.momentum = 1.0; }));
  CHECK_FALSE(invalid([](TrainConfig&) {}));
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.learning_rate = 1.0;
  c.decay_steps = {10, 20};
  c.decay_factor = 0.1;
  CHECK(c.learning_rate_at(0) == 1.0);
  CHECK(c.learning_rate_at(9) == 1.0);
  CHECK(c.learning_rate_at(10) == doctest::Approx(0.1));
  CHECK(c.learning_rate_at(25) == doctest::Approx(0.01));
}

TEST_CASE("batch rank-1") {
  const Tensor f({4, 2}, {0, 0, 0, 0.1, 5, 5, 5, 5.1});
  CHECK(batch_rank1(f, {0, 0, 1, 1}) == 1.0);
  CHECK(batch_rank1(f, {0, 1, 0, 1}) == 0.0);
}

TEST_CASE("zero-iteration run leaves the model untouched") {
  testutil::TempDir dir("train0");
  TrainConfig c = micro_train_config();
  c.iterations = 0;
  Trainer t(c, micro_dataset());
  const auto before = param_values(t);
  CHECK(t.run(dir.path()).empty());
  CHECK(same_values(before, param_values(t)));
  CHECK(testutil::read_text(dir / "metrics.csv") == "iteration,L_triplet,L_cls,L,train_rank1\n");
  CHECK(std::filesystem::exists(dir / "final.ckpt"));
}

TEST_CASE("training is deterministic and logs on schedule") {
  testutil::TempDir a("train_a"), b("train_b");
  Trainer t1(micro_train_config(), micro_dataset());
  Trainer t2(micro_train_config(), micro_dataset());
  const auto log = t1.run(a.path());
  t2.run(b.path());
  REQUIRE(log.size() == 3);
  CHECK(log[0].iteration == 2);
  CHECK(log[2].iteration == 6);
  CHECK(same_values(param_values(t1), param_values(t2)));
  CHECK(testutil::read_text(a / "metrics.csv") == testutil::read_text(b / "metrics.csv"));
  CHECK(testutil::read_bytes(a / "final.ckpt") == testutil::read_bytes(b / "final.ckpt"));
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
  for (const std::string opt : {"adam", "sgd"}) {
    testutil::TempDir dir("resume");
    TrainConfig c = micro_train_config();
    c.optimizer = opt;
    Trainer straight(c, micro_dataset());
    straight.run();

    TrainConfig first = c;
    first.iterations = 3;
    Trainer part(first, micro_dataset());
    part.run(dir.path());
    Trainer resumed(c, micro_dataset());
    resumed.load_checkpoint(dir / "final.ckpt");
    CHECK(resumed.iteration() == 3);
    resumed.run(dir.path());
    CHECK(same_values(param_values(straight), param_values(resumed)));
    CHECK(resumed.optimizer().steps == straight.optimizer().steps);
  }
}

TEST_CASE("checkpoint round trip and mismatch detection") {
  testutil::TempDir dir("ckpt");
  Trainer t(micro_train_config(), micro_dataset());
  t.step();
  t.save_checkpoint(dir / "a.ckpt");
  const Checkpoint ck = read_checkpoint(dir / "a.ckpt");
  CHECK(ck.iteration == 1);
  CHECK(ck.optimizer_kind == "adam");
  CHECK(ck.optimizer_steps == 1);
  write_checkpoint(dir / "b.ckpt", ck);
  CHECK(testutil::read_bytes(dir / "a.ckpt") == testutil::read_bytes(dir / "b.ckpt"));

  auto model = load_model(ck);
  const auto& vars = model->params().vars();
  const auto expect = param_values(t);
  REQUIRE(vars.size() == expect.size());
  for (std::size_t i = 0; i < vars.size(); ++i) CHECK(vars[i]->value.to_vector() == expect[i].to_vector());

  TrainConfig other = micro_train_config();
  other.margin = 0.5;
  Trainer mismatch(other, micro_dataset());
  CHECK_THROWS_AS(mismatch.load_checkpoint(dir / "a.ckpt"), ConfigError);

  auto bytes = testutil::read_bytes(dir / "a.ckpt");
  testutil::write_bytes(dir / "trunc.ckpt", {bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2)});
  CHECK_THROWS_AS(read_checkpoint(dir / "trunc.ckpt"), IoError);
  bytes[0] = 'X';
  testutil::write_bytes(dir / "magic.ckpt", bytes);
  CHECK_THROWS_AS(read_checkpoint(dir / "magic.ckpt"), IoError);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("smoothed loss decreases on a small problem") {
  TrainConfig c = micro_train_config();
  c.iterations = 60;
  c.log_interval = 1;
  Trainer t(c, micro_dataset());
  const auto log = t.run();
  REQUIRE(log.size() == 60);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += log[static_cast<std::size_t>(i)].total;
    tail += log[log.size() - 1 - static_cast<std::size_t>(i)].total;
  }
  CHECK(tail < 0.8 * head);
}
