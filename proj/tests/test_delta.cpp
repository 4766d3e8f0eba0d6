// Activation-difference probes: exact nullity, exact recovery of a planted
// intervention, the two layer-local variants, alignment validation, and the
// strength-profile arithmetic on hand-built traces.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "psr/delta.hpp"
#include "psr/model.hpp"
#include "psr/steering.hpp"

using namespace psr;
using T = Tensor<double>;
using M = Model<double>;
using SM = SteeringModule<double>;

namespace {

ModelConfig probe_config() {
  ModelConfig mc;
  mc.vocab_size = 16;
  mc.n_layers = 3;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.ffn_mult = 2;
  mc.max_context = 24;
  return mc;
}

M probe_model(uint64_t seed) {
  M m = M::init(probe_config(), seed);
  Rng rng(derive_seed(seed, {seed_tag("probe-head")}));
  for (auto* p : m.parameters())
    for (size_t i = 0; i < p->numel(); ++i) p->data()[i] += 0.04 * double(rng() % 11) / 11.0;
  return m;
}

}  // namespace

TEST_SUITE("delta") {

TEST_CASE("identical questions yield an exactly zero accumulated delta") {
  M m = probe_model(1);
  std::vector<int> x{3, 4, 5}, y{6, 7, 8, 9};
  auto tr = delta_acc(m, x, x, y);
  CHECK(tr.offset == 0);
  CHECK(tr.n_shared == 7);
  CHECK(tr.question_len == 3);
  for (int l = 1; l <= tr.n_layers; ++l)
    for (size_t i = 0; i < tr.layer(l).numel(); ++i) CHECK(tr.layer(l).data()[i] == 0.0);
}

TEST_CASE("a planted constant intervention is recovered by the aligned difference") {
  M m = probe_model(2);
  auto cfg = m.config();
  T z = SM::random_direction(cfg.d_model, 42);
  SM mod = SM::make_const(cfg, 2, PositionPolicy::kResponse, z);
  mod.alpha = 1.5;

  std::vector<int> x{2, 3, 4}, y{5, 6, 7, 8};
  std::vector<int> seq = x;
  seq.insert(seq.end(), y.begin(), y.end());
  auto base = m.forward(seq);
  auto hooks = attach(mod, cfg, int(x.size()), AttachMode::kForward);
  auto steered = m.forward(seq, &hooks);
  auto tr = delta_between(base, steered, 0, int(x.size()));

  // below the intervention: exactly zero
  for (size_t i = 0; i < tr.layer(1).numel(); ++i) CHECK(tr.layer(1).data()[i] == 0.0);
  // at the intervention: question rows exactly zero; response rows carry
  // alpha * z up to the one rounding of (acts + alpha z) - acts
  for (int r = 0; r < tr.n_shared; ++r)
    for (int c = 0; c < cfg.d_model; ++c) {
      double expect = r >= int(x.size()) ? z.at(c) * mod.alpha : 0.0;
      if (r < int(x.size()))
        CHECK(tr.layer(2).at(r, c) == expect);
      else
        CHECK(tr.layer(2).at(r, c) == doctest::Approx(expect).epsilon(1e-12));
    }
  // above it: the effect has propagated
  double moved = 0;
  auto n3 = tr.norms(3);
  for (int r = int(x.size()); r < tr.n_shared; ++r) moved += n3[size_t(r)];
  CHECK(moved > 1e-4);
}

TEST_CASE("prefix steering produces aligned nonzero deltas everywhere") {
  M m = probe_model(3);
  std::vector<int> prefix{10, 11}, x{3, 4, 5}, y{6, 7};
  std::vector<int> xs = prefix;
  xs.insert(xs.end(), x.begin(), x.end());
  auto tr = delta_acc(m, x, xs, y);
  CHECK(tr.offset == 2);
  CHECK(tr.n_shared == 5);
  CHECK(tr.shared_tokens == std::vector<int>{3, 4, 5, 6, 7});
  // every shared position can attend to the prefix, so deltas are generically
  // nonzero at every layer
  for (int l = 1; l <= tr.n_layers; ++l) {
    auto ns = tr.norms(l);
    for (double n : ns) CHECK(n > 0.0);
  }
  // activation norms recorded from the steered pass are positive too
  for (const auto& layer_norms : tr.act_norm)
    for (double n : layer_norms) CHECK(n > 0.0);
}

TEST_CASE("local variants are exactly zero without steering and diverge with it") {
  M m = probe_model(4);
  std::vector<int> x{2, 3, 4}, y{5, 6, 7};
  for (auto variant : {LocalVariant::kAttentionExclusion, LocalVariant::kActivationSubstitution}) {
    auto tr = delta_loc(m, x, x, y, variant);
    for (int l = 1; l <= tr.n_layers; ++l)
      for (size_t i = 0; i < tr.layer(l).numel(); ++i) CHECK(tr.layer(l).data()[i] == 0.0);
  }

  std::vector<int> xs{12, 13, 2, 3, 4};
  auto excl = delta_loc(m, x, xs, y, LocalVariant::kAttentionExclusion);
  auto subst = delta_loc(m, x, xs, y, LocalVariant::kActivationSubstitution);
  auto acc = delta_acc(m, x, xs, y);
  double diff_variants = 0, diff_from_acc = 0;
  for (int l = 1; l <= excl.n_layers; ++l)
    for (size_t i = 0; i < excl.layer(l).numel(); ++i) {
      diff_variants += std::abs(excl.layer(l).data()[i] - subst.layer(l).data()[i]);
      diff_from_acc += std::abs(excl.layer(l).data()[i] - acc.layer(l).data()[i]);
    }
  CHECK(diff_variants > 1e-6);   // the two realizations measure different things
  CHECK(diff_from_acc > 1e-6);   // and neither equals the accumulated delta
  // local layer-wise attributions are bounded by sanity: finite and not all zero
  double total = 0;
  for (int l = 1; l <= excl.n_layers; ++l)
    for (double n : excl.norms(l)) total += n;
  CHECK(total > 1e-8);
}

TEST_CASE("alignment validation names the suffix rule") {
  M m = probe_model(5);
  std::vector<int> x{3, 4, 5}, y{6};
  CHECK_THROWS_WITH_AS(delta_acc(m, x, {3, 4}, y), doctest::Contains("shorter"), ValidationError);
  CHECK_THROWS_WITH_AS(delta_acc(m, x, {9, 3, 4, 8}, y), doctest::Contains("suffix"), ValidationError);
  CHECK_THROWS_WITH_AS(delta_acc(m, {}, {3}, y), doctest::Contains("empty"), ValidationError);
}

TEST_CASE("strength profile arithmetic on a hand-built trace") {
  DeltaTrace<double> tr;
  tr.n_layers = 2;
  tr.d_model = 2;
  tr.n_shared = 3;
  tr.offset = 0;
  tr.question_len = 1;
  tr.shared_tokens = {2, 3, 4};
  // layer 1 per-position norms: 5, 0, 13;  layer 2: 1, 1, 1
  tr.delta.push_back(T::from({3, 2}, {3, 4, 0, 0, 5, 12}));
  tr.delta.push_back(T::from({3, 2}, {1, 0, 0, 1, 1, 0}));
  tr.act_norm = {{10, 10, 10}, {2, 2, 2}};

  StrengthProfile p = strength_profile(tr);
  CHECK(p.mean_abs[0] == doctest::Approx(18.0 / 3).epsilon(1e-12));
  CHECK(p.mean_abs[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.mean_rel[0] == doctest::Approx((0.5 + 0.0 + 1.3) / 3).epsilon(1e-12));
  CHECK(p.mean_rel[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.heat[0][2] == doctest::Approx(13.0).epsilon(1e-12));
  CHECK(p.heat_normalized[0][0] == doctest::Approx(5.0 / 18).epsilon(1e-12));
  CHECK(p.heat_normalized[1][1] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // aggregation averages layer means across traces
  DeltaTrace<double> tr2 = tr;
  tr2.delta[0] = T::from({3, 2}, {0, 0, 0, 0, 0, 0});
  tr2.delta[1] = T::from({3, 2}, {3, 4, 3, 4, 3, 4});
  StrengthProfile agg = aggregate_profile<double>({tr, tr2});
  CHECK(agg.mean_abs[0] == doctest::Approx((6.0 + 0.0) / 2).epsilon(1e-12));
  CHECK(agg.mean_abs[1] == doctest::Approx((1.0 + 5.0) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(aggregate_profile<double>({}), ValidationError);
}

TEST_CASE("norm variation separates constant from varying per-token strengths") {
  DeltaTrace<double> tr;
  tr.n_layers = 1;
  tr.d_model = 1;
  tr.n_shared = 4;
  tr.question_len = 1;
  tr.shared_tokens = {2, 3, 4, 5};
  tr.act_norm = {{1, 1, 1, 1}};
  // response norms 2, 2, 2: a constant intervention
  tr.delta.push_back(T::from({4, 1}, {9, 2, 2, 2}));  // question row excluded
  CHECK(norm_variation<double>({tr}, 1) == 0.0);

  // response norms 1, 2, 3: mean 2, population sd sqrt(2/3)
  DeltaTrace<double> tv = tr;
  tv.delta[0] = T::from({4, 1}, {9, 1, 2, 3});
  CHECK(norm_variation<double>({tv}, 1) == doctest::Approx(std::sqrt(2.0 / 3.0) / 2.0).epsilon(1e-12));

  // pooling across traces: (2,2,2) + (1,2,3) has mean 2 and the pooled spread
  CHECK(norm_variation<double>({tr, tv}, 1) == doctest::Approx(std::sqrt(2.0 / 6.0) / 2.0).epsilon(1e-12));

  DeltaTrace<double> short_tr = tr;
  short_tr.n_shared = 2;
  short_tr.question_len = 1;
  short_tr.delta[0] = T::from({2, 1}, {9, 2});
  short_tr.act_norm = {{1, 1}};
  CHECK_THROWS_AS(norm_variation<double>({short_tr}, 1), ValidationError);

  DeltaTrace<double> zero_tr = tr;
  zero_tr.delta[0] = T::from({4, 1}, {9, 0, 0, 0});
  CHECK_THROWS_AS(norm_variation<double>({zero_tr}, 1), NumericError);
}

}  // TEST_SUITE
