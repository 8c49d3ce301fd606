#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "modt/errors.hpp"
#include "modt/trainer.hpp"

using namespace modt;
using namespace modt::train;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "modt_unit" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

diff::ParameterStore<double> scalar_store(double w, double g, const std::string& name = "w") {
  diff::ParameterStore<double> s;
  auto& t = s.add(name, {1}, {w});
  t.grad = {g};
  return s;
}

const env::Dataset& small_data() {
  static const env::Dataset d = env::generate_dataset(env::parse_mix("random:0.5,expert:0.5"), 8, 1);
  return d;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  c.weight_decay = 1e-2;
  c.warmup_steps = 5;
  c.total_updates = 12;
  c.eval_every = 6;
  c.eval_episodes = 1;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("lamb single scalar step by hand") {
  auto s = scalar_store(1.0, 1.0);
  OptimizerState st;
  const double lr = 1e-3;
  lamb_step(s, st, LambConfig{}, lr);
  // m_hat = v_hat = 1, r = 1/(1+eps), u = r, trust = |w|/|u| = 1+eps, step = lr * trust * u = lr
  const double r = 1.0 / (1.0 + 1e-6);
  const double expected = 1.0 - lr * (1.0 / r) * r;
  CHECK(std::abs(s.get("w").values[0] - expected) <= 1e-12);
  CHECK(st.step == 1);
}

TEST_CASE("lamb zero gradient without decay is the identity") {
  diff::ParameterStore<double> s;
  s.add("a.weight", {2, 2}, {0.5, -1.5, 2.0, 0.25});
  s.add("a.bias", {2}, {0.1, -0.2});
  s.zero_grad();
  const auto before = s.get("a.weight").values;
  OptimizerState st;
  lamb_step(s, st, LambConfig{}, 0.1);
  CHECK(s.get("a.weight").values == before);
  CHECK(s.get("a.bias").values == std::vector<double>{0.1, -0.2});
}

TEST_CASE("lamb without trust ratio reduces to the adaptive-moment update") {
  auto s = scalar_store(0.7, 0.0);
  OptimizerState st;
  const LambConfig cfg{0.9, 0.999, 1e-6, 0.0, false};
  double w = 0.7, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -1.2, 0.05, 2.0};
  for (int t = 1; t <= 4; ++t) {
    const double g = grads[t - 1];
    s.get("w").grad = {g};
    lamb_step(s, st, cfg, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-6);
    CHECK(std::abs(s.get("w").values[0] - w) <= 1e-12);
  }
}

TEST_CASE("lamb is deterministic and rejects NaN gradients") {
  auto run = [] {
    auto s = scalar_store(1.0, 0.5);
    OptimizerState st;
    lamb_step(s, st, LambConfig{0.9, 0.999, 1e-6, 0.01}, 1e-2);
    s.get("w").grad = {-0.25};
    lamb_step(s, st, LambConfig{0.9, 0.999, 1e-6, 0.01}, 1e-2);
    return std::make_pair(s.get("w").values[0], st.moments["w"].m);
  };
  CHECK(run() == run());

  auto s = scalar_store(1.0, std::nan(""), "blocks.0.attn.qkv.weight");
  OptimizerState st;
  try {
    lamb_step(s, st, LambConfig{}, 1e-3);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("blocks.0.attn.qkv.weight") != std::string::npos);
  }
  CHECK(s.get("blocks.0.attn.qkv.weight").values[0] == 1.0);
  CHECK(st.step == 0);
}

TEST_CASE("weight decay exclusions") {
  CHECK(decays("blocks.0.mlp.fc.weight"));
  CHECK(!decays("blocks.0.mlp.fc.bias"));
  CHECK(!decays("ln_f.gain"));
  CHECK(decays("embed.timestep.table"));
}

TEST_CASE("learning rate warmup") {
  TrainConfig c;
  CHECK(lr_schedule(5000, c) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_schedule(10000, c) == 1e-4);
  CHECK(lr_schedule(90000, c) == 1e-4);
  c.warmup_steps = 0;
  CHECK(lr_schedule(1, c) == 1e-4);
}

TEST_CASE("global gradient norm clipping") {
  diff::ParameterStore<double> s;
  s.add("a", {2}, {0, 0}).grad = {0.6, 0.0};
  s.add("b", {1}, {0}).grad = {0.8};
  CHECK(clip_grad_norm(s, 0.25) == doctest::Approx(1.0));
  CHECK(s.get("a").grad[0] == doctest::Approx(0.15));
  CHECK(s.get("b").grad[0] == doctest::Approx(0.2));
  double sq = 0.0;
  for (auto& [_, p] : s)
    for (double g : p.grad) sq += g * g;
  CHECK(std::sqrt(sq) <= 0.25 + 1e-9);

  diff::ParameterStore<double> small;
  small.add("a", {1}, {0}).grad = {0.1};
  clip_grad_norm(small, 0.25);
  CHECK(small.get("a").grad[0] == 0.1);
}

TEST_CASE("presets and config json") {
  auto paper = make_preset("paper", Variant::modt);
  CHECK(paper.model.num_layers == 4);
  CHECK(paper.model.num_heads == 4);
  CHECK(paper.model.embed_dim == 256);
  CHECK(paper.model.context_len == 20);
  CHECK(paper.model.dropout == 0.1);
  CHECK(paper.train.batch_size == 256);
  CHECK(paper.train.learning_rate == 1e-4);
  CHECK(paper.train.weight_decay == 1e-3);
  CHECK(paper.train.grad_clip == 0.25);
  CHECK(paper.train.warmup_steps == 10000);
  CHECK(paper.train.total_updates == 100000);
  auto desk = make_preset("desk", Variant::motrdt);
  CHECK(desk.model.embed_dim == 128);
  CHECK(desk.model.region_bins == 3);
  CHECK(desk.train.batch_size == 64);
  CHECK(desk.train.total_updates == 20000);
  CHECK(desk.train.warmup_steps == 1000);
  CHECK(desk.train.learning_rate == 1e-3);
  CHECK(desk.train.loss_weights.lambda[3] == 0.25);
  CHECK_THROWS_AS(make_preset("huge", Variant::modt), ConfigError);

  auto back = train_config_from_json(to_json(desk.train));
  CHECK(to_json(back) == to_json(desk.train));
  auto j = to_json(desk.train);
  j["momentum"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  auto w = loss_weights_from_json(nlohmann::json{{"lambda0", 0.5}, {"lambda1", 0.5}, {"lambda2", 0.0}});
  CHECK(w.lambda[0] == 0.5);
  TrainConfig bad = tiny_train();
  bad.warmup_steps = 100;
  CHECK_THROWS_AS(bad.validate(Variant::modt), ConfigError);
}

TEST_CASE("metrics csv round trip") {
  MetricsRow a{1, {2.5, 1.0, 0.5, std::nullopt}, 1.25, 1e-4, std::nullopt, std::nullopt};
  MetricsRow b{2, {2.0, 0.75, 0.25, 0.125}, 1.0, 2e-4, -40.5, 3.25};
  const auto dir = temp_dir("metrics");
  {
    std::ofstream f(dir / "m.csv");
    f << metrics_csv_header() << metrics_csv_line(a) << metrics_csv_line(b);
  }
  auto rows = read_metrics_csv(dir / "m.csv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == a);
  CHECK(rows[1] == b);
  CHECK(metrics_csv_line(a) == "1,2.5,1,0.5,,1.25,0.0001,,\n");
}

TEST_CASE("training writes metrics and checkpoints deterministically") {
  auto cfg = fixtures::tiny_config(Variant::modt);
  const auto dir1 = temp_dir("train1"), dir2 = temp_dir("train2");
  TrainOptions o1, o2;
  o1.out_dir = dir1;
  o2.out_dir = dir2;
  auto r1 = train::train(small_data(), cfg, tiny_train(), o1);
  auto r2 = train::train(small_data(), cfg, tiny_train(), o2);
  REQUIRE(r1.metrics.size() == 12);
  CHECK(r1.metrics == r2.metrics);
  CHECK(r1.metrics[5].eval_mean);
  CHECK(!r1.metrics[6].eval_mean);
  CHECK(r1.metrics[11].eval_mean);
  CHECK(r1.metrics[0].lr == doctest::Approx(1e-3 / 5));
  CHECK(fs::exists(dir1 / "checkpoints" / "step_6" / "manifest.json"));
  CHECK(fs::exists(dir1 / "checkpoints" / "step_12" / "params.bin"));
  CHECK(fs::exists(dir1 / "checkpoint" / "manifest.json"));
  CHECK(read_metrics_csv(dir1 / "metrics.csv").size() == 12);

  std::ifstream a(dir1 / "metrics.csv"), b(dir2 / "metrics.csv");
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("checkpoint reload reproduces forward outputs bitwise") {
  auto cfg = fixtures::tiny_config(Variant::motrdt);
  const auto dir = temp_dir("ckpt");
  TrainOptions o;
  o.out_dir = dir;
  auto tc = tiny_train();
  tc.loss_weights = traj::LossWeights::uniform(Variant::motrdt);
  auto res = train::train(small_data(), cfg, tc, o);
  auto loaded = load_checkpoint(dir / "checkpoint");
  CHECK(loaded.step == 12);
  CHECK(loaded.dataset == small_data().header);
  CHECK(loaded.dataset_digest == env::header_digest(small_data().header));
  CHECK(loaded.metrics_tail.size() == 12);
  CHECK(loaded.optimizer.step == 12);

  auto before = model_from_checkpoint<float>(res.final_checkpoint);
  auto after = model_from_checkpoint<float>(loaded);
  std::vector<ContextWindow> ws{env::window_ending_at(small_data(), 0, 30, 4, Variant::motrdt, 3)};
  diff::Tape<float> t1(false), t2(false);
  CHECK(before.encode(t1, ws, backbone::Mode::eval).hidden->values ==
        after.encode(t2, ws, backbone::Mode::eval).hidden->values);

  fs::resize_file(dir / "checkpoint" / "params.bin", 100);
  CHECK_THROWS_AS(load_checkpoint(dir / "checkpoint"), TruncatedFileError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
}

TEST_CASE("with lambda = (1,0,0) auxiliary heads only decay") {
  auto cfg = fixtures::tiny_config(Variant::modt);
  auto tc = tiny_train();
  tc.precision = 64;
  tc.loss_weights = traj::LossWeights{{1, 0, 0, 0}};
  auto res = train::train(small_data(), cfg, tc);
  traj::DecisionModel<double> init(cfg, tc.seed);
  double factor = 1.0;
  for (const auto& row : res.metrics) factor *= 1.0 - row.lr;
  const auto final_params = res.final_checkpoint.params;
  for (const auto& [name, p0] : init.parameters()) {
    if (!(name.starts_with("head.state") || name.starts_with("head.return"))) continue;
    const auto& p1 = final_params.get(name);
    for (std::size_t i = 0; i < p0.numel(); ++i) {
      const double expected = decays(name) ? p0.values[i] * factor : p0.values[i];
      CHECK(std::abs(p1.values[i] - expected) <= 1e-6 * std::max(1e-3, std::abs(expected)));
    }
  }
}

TEST_CASE("non-finite loss aborts and keeps the last checkpoint") {
  auto cfg = fixtures::tiny_config(Variant::modt);
  auto tc = tiny_train();
  tc.learning_rate = 100.0;
  tc.warmup_steps = 0;
  tc.total_updates = 40;
  tc.eval_every = 1;
  const auto dir = temp_dir("abort");
  TrainOptions o;
  o.out_dir = dir;
  try {
    train::train(small_data(), cfg, tc, o);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find((dir / "checkpoints" / "step_").string()) != std::string::npos);
  }
  CHECK(!fs::is_empty(dir / "checkpoints"));
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(!fs::exists(dir / "checkpoint"));
}

TEST_CASE("dimension mismatch between data and model") {
  auto cfg = fixtures::tiny_config(Variant::modt);
  cfg.state_dim = 5;
  CHECK_THROWS_AS(train::train(small_data(), cfg, tiny_train()), ConfigError);
}
