#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "unigen/core/gradcheck.hpp"
#include "unigen/dpo/dpo.hpp"

using namespace unigen;
using core::Rng;
using core::Tensor;

TEST_CASE("dpo_loss analytic values") {
    // Policy equals reference: -ln sigmoid(0) = ln 2.
    CHECK(dpo::dpo_loss(-3.7, -5.1, -3.7, -5.1, 0.1) ==
          Catch::Approx(std::log(2.0)).margin(1e-15));

    // beta = 0.1 with log-ratio difference (1, -1): -ln sigmoid(0.2).
    const double expect = std::log1p(std::exp(-0.2));
    CHECK(dpo::dpo_loss(1.0, -1.0, 0.0, 0.0, 0.1) == Catch::Approx(expect).margin(1e-15));
    CHECK(expect == Catch::Approx(0.598139).margin(5e-7));

    // Monotone limits.
    CHECK(dpo::dpo_loss(1e9, -1e9, 0.0, 0.0, 1.0) == 0.0);
    CHECK(dpo::dpo_loss(-1e3, 1e3, 0.0, 0.0, 1.0) > 100.0);
    CHECK_THROWS_AS(dpo::dpo_loss(0, 0, 0, 0, 0.0), std::invalid_argument);
}

TEST_CASE("implicit reward is consistent with the loss on 100 random instances") {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const double beta = 0.01 + rng.next_double();
        const double lpw = rng.next_gaussian() * 10, lpl = rng.next_gaussian() * 10;
        const double rw = rng.next_gaussian() * 10, rl = rng.next_gaussian() * 10;
        const double margin = dpo::implicit_reward(beta, lpw, rw) - dpo::implicit_reward(beta, lpl, rl);
        const double via_margin = core::softplus_scalar(-margin);
        CHECK(std::fabs(dpo::dpo_loss(lpw, lpl, rw, rl, beta) - via_margin) <= 1e-12);
    }
    // theta == ref gives zero reward everywhere; swapping winner and loser
    // flips the margin sign.
    CHECK(dpo::implicit_reward(0.3, -2.5, -2.5) == 0.0);
    Rng r2(9);
    for (int t = 0; t < 20; ++t) {
        const double lpw = r2.next_gaussian(), lpl = r2.next_gaussian();
        const double rw = r2.next_gaussian(), rl = r2.next_gaussian();
        const double m1 = dpo::implicit_reward(0.1, lpw, rw) - dpo::implicit_reward(0.1, lpl, rl);
        const double m2 = dpo::implicit_reward(0.1, lpl, rl) - dpo::implicit_reward(0.1, lpw, rw);
        CHECK(m1 == -m2);
    }
}

TEST_CASE("dpo loss depends only on the difference of log-ratio differences") {
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        const double beta = 0.05 + rng.next_double();
        const double lpw = rng.next_gaussian(), lpl = rng.next_gaussian();
        const double rw = rng.next_gaussian(), rl = rng.next_gaussian();
        const double base = dpo::dpo_loss(lpw, lpl, rw, rl, beta);
        // Shifting a (policy, reference) pair together leaves the loss alone.
        const double c = rng.next_gaussian() * 5;
        CHECK(dpo::dpo_loss(lpw + c, lpl, rw + c, rl, beta) == Catch::Approx(base).margin(1e-12));
        CHECK(dpo::dpo_loss(lpw, lpl + c, rw, rl + c, beta) == Catch::Approx(base).margin(1e-12));
        // Shifting only the policy side moves it.
        CHECK(dpo::dpo_loss(lpw + 1.0, lpl, rw, rl, beta) != Catch::Approx(base).margin(1e-9));
    }
}

TEST_CASE("image_token_logprob analytic cases") {
    core::Tape<double> t(false);
    {
        // All logits zero: -(total bits) * ln 2 per example.
        auto logits = t.constant(Tensor<double>::zeros({2, 3, 4}));
        auto lp = dpo::image_token_logprob_batch(logits, std::vector<double>(24, 1.0));
        for (int i = 0; i < 2; ++i)
            CHECK(lp.val().v[static_cast<size_t>(i)] ==
                  Catch::Approx(-12.0 * std::log(2.0)).margin(1e-12));
    }
    {
        // Perfectly confident correct logits: 0.
        Tensor<double> lt({1, 1, 2}, {1e9, -1e9});
        auto lp = dpo::image_token_logprob_batch(t.constant(lt), std::vector<double>{1.0, 0.0});
        CHECK(lp.val().v[0] == 0.0);
    }
    {
        // Hand case, d = 2, one position, against a direct evaluation.
        Tensor<double> lt({1, 1, 2}, {0.3, -1.2});
        const std::vector<double> tgt{1.0, 1.0};
        auto lp = dpo::image_token_logprob_batch(t.constant(lt), tgt);
        const double expect = std::log(1.0 / (1.0 + std::exp(-0.3))) +
                              std::log(1.0 / (1.0 + std::exp(1.2)));
        CHECK(lp.val().v[0] == Catch::Approx(expect).epsilon(1e-12));
    }
    {
        auto logits = t.constant(Tensor<double>::zeros({1, 1, 2}));
        CHECK_THROWS_AS(dpo::image_token_logprob_batch(logits, std::vector<double>{0.25, 1.0}),
                        std::invalid_argument);
        CHECK_THROWS_AS(dpo::image_token_logprob_batch(logits, std::vector<double>{1.0}),
                        std::invalid_argument);
    }
}

TEST_CASE("gradcheck of dpo_loss through image_token_logprob") {
    // Tiny model, winner and loser teacher-forced through the same weights.
    quant::ScaleSchedule sched;
    sched.scales = {{1, 1}, {2, 2}};
    sched.latent_dim = 4;
    sched.base_h = sched.base_w = 2;
    auto cfg = model::ModelConfig::tiny(24, sched);
    model::UnifiedModel<double> m(cfg, 33);
    Rng rng(71);
    for (auto& pr : m.params)
        for (auto& v : pr.value.v) v = rng.next_gaussian() * 0.05;

    // Hand-built single-example batches (same prompt layout, different bits).
    auto make_batch = [&](uint64_t s) {
        model::Batch<double> b;
        b.layout.prompt_start = 1;
        b.layout.gen_start = 4;
        b.layout.gen_blocks = {1, 4};
        b.layout.total = 10;
        b.batch = 1;
        b.tokens = {20, 1, 2, 3, 19, 19, 19, 19, 19, 23};
        Rng r(s);
        b.gen_inputs = Tensor<double>({1, 5, 4});
        for (auto& v : b.gen_inputs.v) v = r.next_gaussian() * 0.3;
        b.bit_targets.resize(20);
        for (auto& v : b.bit_targets) v = static_cast<double>(r.next_below(2));
        return b;
    };
    auto bw = make_batch(1), bl = make_batch(2);
    const std::vector<double> ref_w{-13.0}, ref_l{-12.0};

    std::vector<Tensor<double>> points;
    for (const auto& pr : m.params) points.push_back(pr.value);
    auto f = [&](core::Tape<double>& tape, std::vector<core::Var<double>>& vars) {
        auto bm = model::bind_vars(m, tape, vars);
        auto ow = model::forward_mixed(bm, bw);
        auto ol = model::forward_mixed(bm, bl);
        auto lpw = dpo::image_token_logprob_batch(ow.bit_logits, bw.bit_targets);
        auto lpl = dpo::image_token_logprob_batch(ol.bit_logits, bl.bit_targets);
        return dpo::dpo_loss_batch(lpw, lpl, ref_w, ref_l, 0.1);
    };
    auto rep = core::gradcheck<double>(f, points, 1e-4);
    INFO(rep.detail);
    CHECK(rep.pass);
}

TEST_CASE("build_preference_pairs construction invariants") {
    CHECK(dpo::build_preference_pairs({}, nullptr, 32, 1).empty());

    auto prompts = data::make_corpus(data::RecordKind::preference_prompt, 1000, 77);
    dpo::PairBuildStats stats;
    auto pairs = dpo::build_preference_pairs(prompts, nullptr, 32, 5, &stats);
    CHECK(pairs.size() == 1000);
    CHECK(stats.built == 1000);
    CHECK(stats.skipped == 0);

    // Corrupted-loser mode: the oracle color must disagree with the caption
    // on at least 45% of losers (half get the wrong color outright).
    int64_t disagree = 0;
    for (const auto& p : pairs) {
        CHECK(p.provenance == "oracle");
        const auto spec = data::parse_caption(p.prompt);
        const auto read = data::oracle_classify(p.loser);
        if (!read.known || read.color != spec.color) ++disagree;
    }
    CHECK(static_cast<double>(disagree) / static_cast<double>(pairs.size()) >= 0.45);

    // Malformed captions are skipped and counted.
    auto bad = prompts;
    bad[3].caption = "definitely not a caption";
    bad[9].caption = "";
    dpo::PairBuildStats stats2;
    auto pairs2 = dpo::build_preference_pairs(bad, nullptr, 32, 5, &stats2);
    CHECK(pairs2.size() == 998);
    CHECK(stats2.skipped == 2);
}
