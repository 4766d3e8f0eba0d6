// Steering modules as hooks: exact delta arithmetic for both kinds, the
// position-policy boundary in teacher-forced vs generation mode, the capture
// side channel, alpha overrides, and persistence.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "psr/model.hpp"
#include "psr/steering.hpp"

using namespace psr;
using T = Tensor<double>;
using M = Model<double>;
using SM = SteeringModule<double>;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.vocab_size = 12;
  mc.n_layers = 3;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.ffn_mult = 2;
  mc.max_context = 16;
  return mc;
}

M seeded_model(uint64_t seed) {
  M m = M::init(small_config(), seed);
  // give the head some signal so logits are not all zero
  Rng rng(derive_seed(seed, {seed_tag("test-head")}));
  for (auto* p : m.parameters())
    for (size_t i = 0; i < p->numel(); ++i) p->data()[i] += 0.03 * double(rng() % 7) / 7.0;
  return m;
}

std::filesystem::path scratch_dir() {
  auto d = std::filesystem::temp_directory_path() / "psr-steering-tests";
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_SUITE("steering") {

TEST_CASE("constant module adds exactly alpha*z on response rows and nothing else") {
  M m = seeded_model(10);
  auto cfg = m.config();
  T z = SM::random_direction(cfg.d_model, 77);
  SM mod = SM::make_const(cfg, 2, PositionPolicy::kResponse, z);
  mod.alpha = 1.75;

  std::vector<int> toks{3, 4, 5, 6, 7, 8};
  const int qlen = 3;
  auto plain = m.forward(toks);
  auto hooks = attach(mod, cfg, qlen, AttachMode::kForward);
  auto hooked = m.forward(toks, &hooks);

  // below the steered layer nothing moves at all
  for (size_t i = 0; i < plain.layer(1).numel(); ++i)
    CHECK(hooked.layer(1).data()[i] == plain.layer(1).data()[i]);
  // at the steered layer: question rows identical, response rows shifted by
  // exactly alpha * z
  for (int r = 0; r < int(toks.size()); ++r)
    for (int c = 0; c < cfg.d_model; ++c) {
      double expect = plain.layer(2).at(r, c) + (r >= qlen ? z.at(c) * mod.alpha : 0.0);
      CHECK(hooked.layer(2).at(r, c) == expect);
    }
  // the shift propagates: layer 3 differs on steered rows
  double moved = 0;
  for (int c = 0; c < cfg.d_model; ++c)
    moved += std::abs(hooked.layer(3).at(qlen, c) - plain.layer(3).at(qlen, c));
  CHECK(moved > 1e-4);
}

TEST_CASE("token-adaptive module applies alpha*relu(w.a+b)*z per row") {
  M m = seeded_model(11);
  auto cfg = m.config();
  T z = SM::random_direction(cfg.d_model, 5);
  SM mod = SM::make_psr(cfg, 2, PositionPolicy::kResponse, z, 99);
  mod.alpha = 0.8;
  // force a mix of live and clamped rows
  mod.units[0].b = T::scalar(-0.01);

  std::vector<int> toks{2, 3, 4, 5, 6};
  const int qlen = 2;
  auto plain = m.forward(toks);
  auto cap = std::make_shared<HookCapture<double>>();
  auto hooks = attach(mod, cfg, qlen, AttachMode::kForward, cap);
  auto hooked = m.forward(toks, &hooks);

  const T& w = mod.units[0].w;
  double b = mod.units[0].b.item();
  for (int r = 0; r < int(toks.size()); ++r) {
    double pre = b;
    for (int c = 0; c < cfg.d_model; ++c) pre += plain.layer(2).at(r, c) * w.at(c);
    double lam = r >= qlen ? std::max(pre, 0.0) : 0.0;
    for (int c = 0; c < cfg.d_model; ++c) {
      double expect = plain.layer(2).at(r, c) + mod.alpha * lam * z.at(c);
      CHECK(hooked.layer(2).at(r, c) == doctest::Approx(expect).epsilon(1e-12));
    }
    // capture agrees with the hand computation
    CHECK(cap->pre[2].at(r) == doctest::Approx(pre).epsilon(1e-12));
    CHECK(cap->lambda[2].at(r) == doctest::Approx(lam).epsilon(1e-12));
    CHECK(cap->mask[2][size_t(r)] == (r >= qlen ? 1 : 0));
  }
  // delta capture is exactly hooked minus plain at that layer
  for (int r = 0; r < int(toks.size()); ++r)
    for (int c = 0; c < cfg.d_model; ++c)
      CHECK(cap->delta[2].at(r, c) ==
            doctest::Approx(hooked.layer(2).at(r, c) - plain.layer(2).at(r, c)).epsilon(1e-12));
}

TEST_CASE("generation mode starts the response mask one position early") {
  auto cfg = small_config();
  T z = T::full({cfg.d_model}, 0.5);
  SM mod = SM::make_const(cfg, 1, PositionPolicy::kResponse, z);
  mod.alpha = 2.0;
  const int qlen = 4;

  T row = T::full({1, cfg.d_model}, 0.1);
  auto fwd = attach(mod, cfg, qlen, AttachMode::kForward);
  auto gen = attach(mod, cfg, qlen, AttachMode::kGenerate);
  REQUIRE(fwd.size() == 1);

  // teacher-forced: position qlen-1 still belongs to the question
  T f_off = fwd[0].fn(row, qlen - 1);
  CHECK(f_off.at(0, 0) == 0.1);
  T f_on = fwd[0].fn(row, qlen);
  CHECK(f_on.at(0, 0) == doctest::Approx(0.1 + 2.0 * 0.5).epsilon(1e-15));

  // generation: the state predicting the first response token is steered
  T g_off = gen[0].fn(row, qlen - 2);
  CHECK(g_off.at(0, 0) == 0.1);
  T g_on = gen[0].fn(row, qlen - 1);
  CHECK(g_on.at(0, 0) == doctest::Approx(0.1 + 2.0 * 0.5).epsilon(1e-15));
}

TEST_CASE("question+response policy steers every position") {
  M m = seeded_model(12);
  auto cfg = m.config();
  T z = SM::random_direction(cfg.d_model, 8);
  SM mod = SM::make_const(cfg, 1, PositionPolicy::kQuestionResponse, z);
  mod.alpha = 1.0;
  std::vector<int> toks{2, 3, 4, 5};
  auto plain = m.forward(toks);
  auto hooks = attach(mod, cfg, 2, AttachMode::kForward);
  auto hooked = m.forward(toks, &hooks);
  for (int r = 0; r < int(toks.size()); ++r)
    for (int c = 0; c < cfg.d_model; ++c)
      CHECK(hooked.layer(1).at(r, c) == plain.layer(1).at(r, c) + z.at(c) * 1.0);
}

TEST_CASE("an all-layer module steers each layer on the already-steered stream") {
  M m = seeded_model(13);
  auto cfg = m.config();
  std::vector<T> zs;
  for (int l = 0; l < cfg.n_layers; ++l) zs.push_back(SM::random_direction(cfg.d_model, 100 + uint64_t(l)));
  SM mod = SM::make_const_all(cfg, PositionPolicy::kResponse, zs);
  mod.alpha = 1.3;
  std::vector<int> toks{2, 3, 4, 5, 6};
  const int qlen = 2;
  auto plain = m.forward(toks);
  auto hooks = attach(mod, cfg, qlen, AttachMode::kForward);
  auto hooked = m.forward(toks, &hooks);

  // layer 1's pre-hook stream equals the plain one, so its delta is exact
  for (int r = qlen; r < int(toks.size()); ++r)
    for (int c = 0; c < cfg.d_model; ++c)
      CHECK(hooked.layer(1).at(r, c) == plain.layer(1).at(r, c) + zs[0].at(c) * 1.3);
  // layer 2 saw the steered layer-1 output: its recorded stream is not just
  // plain layer 2 plus its own delta
  double dev = 0;
  for (int c = 0; c < cfg.d_model; ++c)
    dev += std::abs(hooked.layer(2).at(qlen, c) - (plain.layer(2).at(qlen, c) + zs[1].at(c) * 1.3));
  CHECK(dev > 1e-6);
}

TEST_CASE("alpha map overrides the module knob per layer") {
  auto cfg = small_config();
  T z = T::full({cfg.d_model}, 1.0);
  SM mod = SM::make_const(cfg, 2, PositionPolicy::kQuestionResponse, z);
  mod.alpha = 7.0;  // must be ignored when a map is supplied

  AlphaMap<double> alphas;
  alphas[2] = T::scalar(2.5);
  auto hooks = attach(mod, cfg, 1, AttachMode::kForward, {}, &alphas);
  T row = T::zeros({1, cfg.d_model});
  T out = hooks[0].fn(row, 0);
  CHECK(out.at(0, 3) == 2.5);

  AlphaMap<double> wrong;
  wrong[1] = T::scalar(1.0);
  CHECK_THROWS_WITH_AS(attach(mod, cfg, 1, AttachMode::kForward, {}, &wrong),
                       doctest::Contains("no alpha provided for layer 2"), ValidationError);
}

TEST_CASE("capture is only filled on full-stream passes") {
  auto cfg = small_config();
  SM mod = SM::make_psr(cfg, 1, PositionPolicy::kQuestionResponse, SM::random_direction(cfg.d_model, 3), 4);
  auto cap = std::make_shared<HookCapture<double>>();
  auto hooks = attach(mod, cfg, 1, AttachMode::kGenerate, cap);
  T row = T::full({1, cfg.d_model}, 0.2);
  hooks[0].fn(row, 5);  // mid-generation single row
  CHECK(cap->lambda.empty());
  hooks[0].fn(row, 0);  // prompt-start row
  CHECK(cap->lambda.count(1) == 1);
}

TEST_CASE("module construction and attachment validation") {
  auto cfg = small_config();
  T z = T::zeros({cfg.d_model});
  CHECK_THROWS_WITH_AS(SM::make_const(cfg, 0, PositionPolicy::kResponse, z), doctest::Contains("out of range"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(SM::make_const(cfg, 4, PositionPolicy::kResponse, z), doctest::Contains("out of range"),
                       ValidationError);
  CHECK_THROWS_AS(SM::make_const(cfg, 1, PositionPolicy::kResponse, T::zeros({cfg.d_model + 1})), ShapeError);
  CHECK_THROWS_WITH_AS(SM::make_const_all(cfg, PositionPolicy::kResponse, {z}), doctest::Contains("directions"),
                       ValidationError);

  SM ok = SM::make_const(cfg, 1, PositionPolicy::kResponse, z);
  CHECK_THROWS_WITH_AS(attach(ok, cfg, 0, AttachMode::kForward), doctest::Contains("question_len"), ValidationError);
  ModelConfig other = cfg;
  other.d_model = 16;
  CHECK_THROWS_WITH_AS(attach(ok, other, 1, AttachMode::kForward), doctest::Contains("does not fit"), ValidationError);

  SM broken = ok;
  broken.units.push_back(broken.units[0]);
  CHECK_THROWS_AS(broken.validate(), ValidationError);
  SM no_probe = ok;
  no_probe.kind = ModuleKind::kPsr;
  CHECK_THROWS_AS(no_probe.validate(), ShapeError);
}

TEST_CASE("random directions are unit norm and seed-stable") {
  T a = SM::random_direction(32, 9);
  T b = SM::random_direction(32, 9);
  T c = SM::random_direction(32, 10);
  double n = 0;
  bool same = true, differ = false;
  for (int i = 0; i < 32; ++i) {
    n += a.at(i) * a.at(i);
    same = same && a.at(i) == b.at(i);
    differ = differ || a.at(i) != c.at(i);
  }
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(same);
  CHECK(differ);
}

TEST_CASE("save and load round trip both kinds exactly") {
  auto dir = scratch_dir();
  auto cfg = small_config();

  SM psr = SM::make_psr_all(cfg, PositionPolicy::kResponse,
                            {SM::random_direction(cfg.d_model, 1), SM::random_direction(cfg.d_model, 2),
                             SM::random_direction(cfg.d_model, 3)},
                            55);
  psr.alpha = 3.25;
  auto path = (dir / "psr_all.json").string();
  psr.save(path);
  SM back = SM::load(path);
  CHECK(back.kind == ModuleKind::kPsr);
  CHECK(back.all_layers);
  CHECK(back.positions == PositionPolicy::kResponse);
  CHECK(back.alpha == 3.25);
  REQUIRE(back.units.size() == 3);
  for (size_t u = 0; u < 3; ++u) {
    for (int i = 0; i < cfg.d_model; ++i) {
      CHECK(back.units[u].z.at(i) == psr.units[u].z.at(i));
      CHECK(back.units[u].w.at(i) == psr.units[u].w.at(i));
    }
    CHECK(back.units[u].b.item() == psr.units[u].b.item());
  }

  SM cm = SM::make_const(cfg, 2, PositionPolicy::kQuestionResponse, SM::random_direction(cfg.d_model, 4));
  auto cpath = (dir / "const_single.json").string();
  cm.save(cpath);
  SM cback = SM::load(cpath);
  CHECK(cback.kind == ModuleKind::kConst);
  CHECK_FALSE(cback.all_layers);
  CHECK(cback.units[0].layer == 2);
  CHECK_FALSE(cback.units[0].w.defined());
}

TEST_CASE("module loader rejects damaged files with specific messages") {
  auto dir = scratch_dir();
  CHECK_THROWS_AS(SM::load((dir / "nope.json").string()), IoError);

  auto not_module = (dir / "not_module.json").string();
  std::ofstream(not_module) << R"({"format":"psr-checkpoint","version":1})";
  CHECK_THROWS_WITH_AS(SM::load(not_module), doctest::Contains("not a steering module"), ValidationError);

  auto cfg = small_config();
  SM ok = SM::make_psr(cfg, 1, PositionPolicy::kResponse, SM::random_direction(cfg.d_model, 6), 7);
  auto good = (dir / "good.json").string();
  ok.save(good);
  nlohmann::json j;
  std::ifstream(good) >> j;

  nlohmann::json bad = j;
  bad["kind"] = "mystery";
  auto bk = (dir / "bad_kind.json").string();
  std::ofstream(bk) << bad.dump();
  CHECK_THROWS_WITH_AS(SM::load(bk), doctest::Contains("unknown kind"), ValidationError);

  bad = j;
  bad["units"][0]["z"].erase(0);
  auto bz = (dir / "bad_z.json").string();
  std::ofstream(bz) << bad.dump();
  CHECK_THROWS_WITH_AS(SM::load(bz), doctest::Contains("expected"), ValidationError);

  bad = j;
  bad["version"] = 2;
  auto bv = (dir / "bad_version.json").string();
  std::ofstream(bv) << bad.dump();
  CHECK_THROWS_WITH_AS(SM::load(bv), doctest::Contains("version"), ValidationError);
}

}  // TEST_SUITE
