#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "wmla/errors.hpp"
#include "wmla/training.hpp"

using namespace wmla;
using testutil::spec_with_variant;

namespace {

std::vector<Example> small_batch(uint64_t seed, int64_t n, int64_t max_len = 5) {
  SyntheticTask task;
  task.sample_count = n;
  task.min_len = 2;
  task.max_len = max_len;
  task.seed = seed;
  return generate_dataset(task);
}

}  // namespace

TEST_CASE("uniform logits give ln(vocab) loss") {
  Model m = Model::random_init(ModelSpec::toy(), 5);
  m.w_out.fill(0.0);
  m.b_out.fill(0.0);
  const double loss = forward_loss(m, small_batch(1, 3));
  CHECK(loss == doctest::Approx(std::log(64.0)).epsilon(1e-12));
}

TEST_CASE("peaked logits give near-zero loss and near-zero gradients") {
  Model m = Model::random_init(ModelSpec::toy(), 6);
  m.w_out.fill(0.0);
  m.b_out.fill(0.0);
  m.b_out.at(0, 7) = 60.0;  // probability ~1 on token 7 everywhere
  const std::vector<Example> batch = {{{7, 7}, {7, 7, 7}}};  // targets are all token 7
  CHECK(forward_loss(m, batch) < 1e-8);
  Model g = backward(m, batch);
  double norm = 0.0;
  g.visit_tensors([&norm](const std::string&, const Matrix& t) {
    for (double v : t.data()) norm += v * v;
  });
  CHECK(std::sqrt(norm) < 1e-8);
}

TEST_CASE("forward_loss equals an explicit log-softmax summation") {
  Model m = Model::random_init(ModelSpec::toy(), 7);
  const std::vector<Example> batch = small_batch(2, 4);
  double nll = 0.0;
  int64_t count = 0;
  for (const Example& e : batch) {
    Matrix logits = oracles::naive_forward_logits(m, e.source, decoder_input(e));
    for (int64_t i = 0; i < logits.rows(); ++i) {
      const int tgt = e.target[static_cast<size_t>(i)];
      double mx = logits.at(i, 0);
      for (int64_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits.at(i, j));
      double sum = 0.0;
      for (int64_t j = 0; j < logits.cols(); ++j) sum += std::exp(logits.at(i, j) - mx);
      nll += mx + std::log(sum) - logits.at(i, tgt);
      ++count;
    }
  }
  CHECK(std::fabs(forward_loss(m, batch) - nll / static_cast<double>(count)) < 1e-10);
}

TEST_CASE("forward_loss argument errors") {
  Model m = Model::random_init(ModelSpec::toy(), 8);
  CHECK_THROWS_AS(forward_loss(m, {}), ArgumentError);
  const std::vector<Example> all_pad = {{{5, 6}, {kPadToken, kPadToken}}};
  CHECK_THROWS_AS(forward_loss(m, all_pad), ArgumentError);
}

TEST_CASE("analytic gradients match central finite differences") {
  const std::vector<Example> batch = small_batch(3, 2, 4);
  SUBCASE("mha") {
    Model m = Model::random_init(ModelSpec::toy(), 11);
    FdReport rep = finite_diff_check(m, batch, 60, 77);
    CAPTURE(rep.max_rel_err);
    CHECK(rep.max_rel_err <= 1e-4);
  }
  SUBCASE("mla_full") {
    Model m = Model::random_init(spec_with_variant(AttentionVariant::mla_full), 12);
    FdReport rep = finite_diff_check(m, batch, 60, 78);
    CAPTURE(rep.max_rel_err);
    CHECK(rep.max_rel_err <= 1e-4);
  }
  SUBCASE("mla_preserving") {
    Model m = Model::random_init(spec_with_variant(AttentionVariant::mla_preserving), 13);
    FdReport rep = finite_diff_check(m, batch, 60, 79);
    CAPTURE(rep.max_rel_err);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("finite_diff_check is deterministic given a seed") {
  Model m = Model::random_init(ModelSpec::toy(), 14);
  const std::vector<Example> batch = small_batch(4, 2, 4);
  FdReport a = finite_diff_check(m, batch, 10, 5);
  FdReport b = finite_diff_check(m, batch, 10, 5);
  REQUIRE(a.coords.size() == b.coords.size());
  for (size_t i = 0; i < a.coords.size(); ++i) {
    CHECK(a.coords[i].tensor == b.coords[i].tensor);
    CHECK(a.coords[i].index == b.coords[i].index);
    CHECK(a.coords[i].rel_err == b.coords[i].rel_err);
  }
}

TEST_CASE("DSO freeze zeroes encoder and cross-attention gradients exactly") {
  Model m = Model::random_init(ModelSpec::toy(), 15);
  const std::vector<Example> batch = small_batch(5, 3);
  Model g = backward(m, batch, FreezeSet::dso());
  bool any_nonzero_unfrozen = false;
  g.visit_tensors([&](const std::string& name, const Matrix& t) {
    double mx = 0.0;
    for (double v : t.data()) mx = std::max(mx, std::fabs(v));
    if (FreezeSet::dso().frozen(name)) {
      CHECK(mx == 0.0);
    } else if (mx > 0.0) {
      any_nonzero_unfrozen = true;
    }
  });
  CHECK(any_nonzero_unfrozen);
}

TEST_CASE("frozen gradients agree with the unfrozen ones elsewhere") {
  Model m = Model::random_init(ModelSpec::toy(), 16);
  const std::vector<Example> batch = small_batch(6, 2);
  Model g_all = backward(m, batch);
  Model g_dso = backward(m, batch, FreezeSet::dso());
  std::vector<std::pair<std::string, const Matrix*>> all, dso;
  g_all.visit_tensors([&all](const std::string& n, const Matrix& t) { all.push_back({n, &t}); });
  g_dso.visit_tensors([&dso](const std::string& n, const Matrix& t) { dso.push_back({n, &t}); });
  for (size_t i = 0; i < all.size(); ++i) {
    if (FreezeSet::dso().frozen(all[i].first)) continue;
    CHECK(linalg::max_abs_diff(*all[i].second, *dso[i].second) == 0.0);
  }
}

TEST_CASE("finetune is bitwise deterministic and freezes what it promises") {
  Model m = Model::random_init(ModelSpec::toy(), 17);
  SyntheticTask task;
  task.sample_count = 40;
  task.min_len = 2;
  task.max_len = 6;
  task.seed = 3;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 9;

  FinetuneResult r1 = finetune(m, task, cfg, FreezeSet::dso());
  FinetuneResult r2 = finetune(m, task, cfg, FreezeSet::dso());
  CHECK(r1.model.to_container().serialize() == r2.model.to_container().serialize());
  REQUIRE(r1.trace.size() == 4);  // train + heldout per epoch
  for (size_t i = 0; i < r1.trace.size(); ++i) {
    CHECK(r1.trace[i].loss == r2.trace[i].loss);
    CHECK(r1.trace[i].token_accuracy == r2.trace[i].token_accuracy);
  }

  // frozen tensors byte-identical, trained ones changed
  CheckpointContainer before = m.to_container();
  CheckpointContainer after = r1.model.to_container();
  bool some_changed = false;
  for (const TensorRecord& t : before.tensors) {
    const TensorRecord* other = after.find(t.name);
    REQUIRE(other != nullptr);
    if (FreezeSet::dso().frozen(t.name)) {
      CHECK(other->bytes == t.bytes);
    } else if (other->bytes != t.bytes) {
      some_changed = true;
    }
  }
  CHECK(some_changed);
}

TEST_CASE("copy-task loss drops below ln(vocab) after one epoch") {
  Model m = Model::random_init(ModelSpec::toy(), 18);
  SyntheticTask task;
  task.sample_count = 300;
  task.min_len = 2;
  task.max_len = 8;
  task.seed = 4;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 32;
  cfg.seed = 10;
  FinetuneResult r = finetune(m, task, cfg);
  CHECK(r.trace[0].split == "train");
  CHECK(r.trace[0].loss < std::log(64.0));
  CHECK(r.trace[1].split == "heldout");
  CHECK(r.trace[1].loss < std::log(64.0));
}

TEST_CASE("training divergence raises a numerical error naming the step") {
  Model m = Model::random_init(ModelSpec::toy(), 19);
  SyntheticTask task;
  task.sample_count = 30;
  task.min_len = 2;
  task.max_len = 4;
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.optimizer = TrainConfig::Optimizer::sgd;
  cfg.learning_rate = 1e200;  // one unclipped step overflows the layer-norm variance
  cfg.gradient_clip = 0.0;
  CHECK_THROWS_WITH_AS(finetune(m, task, cfg), doctest::Contains("diverged"), NumericalError);
}

TEST_CASE("reverse task targets are reversed sources") {
  SyntheticTask task;
  task.kind = SyntheticTask::Kind::reverse;
  task.sample_count = 3;
  task.min_len = 3;
  task.max_len = 3;
  for (const Example& e : generate_dataset(task)) {
    REQUIRE(e.target.size() == 4);
    CHECK(e.target[3] == kEosToken);
    for (int i = 0; i < 3; ++i) CHECK(e.target[static_cast<size_t>(i)] == e.source[static_cast<size_t>(2 - i)]);
  }
}
