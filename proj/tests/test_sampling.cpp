#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "unigen/gen/sampling.hpp"

using namespace unigen;
using core::Rng;
using core::Tensor;

TEST_CASE("apply_cfg basics and affinity in s") {
    Rng rng(3);
    Tensor<double> cond({2, 3}), uncond({2, 3});
    for (auto& v : cond.v) v = rng.next_gaussian();
    for (auto& v : uncond.v) v = rng.next_gaussian();

    auto s1 = gen::apply_cfg(cond, uncond, 1.0);
    CHECK(s1.v == cond.v);  // bit-exact
    auto s0 = gen::apply_cfg(cond, uncond, 0.0);
    CHECK(s0.v == uncond.v);

    // Paper default strength on a scalar pair.
    Tensor<double> c1({1}, {2.0}), u1({1}, {1.0});
    CHECK(gen::apply_cfg(c1, u1, 1.5).v[0] == Catch::Approx(2.5).margin(1e-15));

    // Three-point collinearity: out(s) is affine in s.
    auto a = gen::apply_cfg(cond, uncond, 0.5);
    auto b = gen::apply_cfg(cond, uncond, 1.5);
    auto m = gen::apply_cfg(cond, uncond, 1.0);
    for (int64_t i = 0; i < m.size(); ++i)
        CHECK(m.v[static_cast<size_t>(i)] ==
              Catch::Approx(0.5 * (a.v[static_cast<size_t>(i)] + b.v[static_cast<size_t>(i)])).margin(1e-12));

    Tensor<double> bad({3});
    CHECK_THROWS_AS(gen::apply_cfg(cond, bad, 1.0), std::invalid_argument);
}

TEST_CASE("top-k top-p filter") {
    // Identity when k >= vocab and p = 1.
    std::vector<double> probs{0.5, 0.3, 0.15, 0.05};
    auto id = gen::top_k_top_p_filter(probs, 10, 1.0);
    for (size_t i = 0; i < probs.size(); ++i)
        CHECK(id[i] == Catch::Approx(probs[i]).margin(1e-12));

    // k = 1: point mass on the argmax.
    auto point = gen::top_k_top_p_filter(probs, 1, 1.0);
    CHECK(point == std::vector<double>{1.0, 0.0, 0.0, 0.0});

    // Hand renormalization: k=3, p=0.9 keeps {0,1,2}.
    auto f = gen::top_k_top_p_filter(probs, 3, 0.9);
    const double denom = 0.95;
    CHECK(f[0] == Catch::Approx(0.5 / denom).margin(1e-12));
    CHECK(f[1] == Catch::Approx(0.3 / denom).margin(1e-12));
    CHECK(f[2] == Catch::Approx(0.15 / denom).margin(1e-12));
    CHECK(f[3] == 0.0);

    // Idempotence.
    auto ff = gen::top_k_top_p_filter(f, 3, 0.9);
    for (size_t i = 0; i < f.size(); ++i) CHECK(ff[i] == Catch::Approx(f[i]).margin(1e-12));

    CHECK_THROWS_AS(gen::top_k_top_p_filter(probs, 0, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(gen::top_k_top_p_filter(probs, 3, 0.0), std::invalid_argument);
}

TEST_CASE("sample_bits behaviour") {
    Rng rng(7);
    // Huge logit: always 1.
    std::vector<double> big(32, 1e9);
    auto bits = gen::sample_bits(big.data(), 32, 1.0, rng);
    for (uint8_t b : bits) CHECK(b == 1);

    // Zero logit: empirical rate 0.5 +- 0.02 over 10k draws.
    std::vector<double> zero(1, 0.0);
    int64_t ones = 0;
    for (int i = 0; i < 10000; ++i) ones += gen::sample_bits(zero.data(), 1, 1.0, rng)[0];
    CHECK(std::fabs(static_cast<double>(ones) / 10000.0 - 0.5) < 0.02);

    // Tiny temperature equals sign thresholding.
    std::vector<double> logits(64);
    Rng lr(9);
    for (auto& x : logits) x = lr.next_gaussian();
    auto cold = gen::sample_bits(logits.data(), 64, 1e-6, rng);
    for (size_t i = 0; i < logits.size(); ++i) CHECK(cold[i] == (logits[i] >= 0 ? 1 : 0));

    CHECK_THROWS_AS(gen::sample_bits(zero.data(), 1, 0.0, rng), std::invalid_argument);
}

TEST_CASE("generate_image is reproducible and batching-independent") {
    quant::ScaleSchedule sched = quant::ScaleSchedule::desk_lo();
    text::Vocab vocab;
    model::ModelConfig cfg = model::ModelConfig::desk(vocab.size(), sched);
    cfg.d_model = 32;
    cfg.d_visdec = 32;
    cfg.n_layers_llm = 2;
    cfg.n_layers_visdec = 2;
    model::UnifiedModel<float> m(cfg, 5);
    Rng rng(13);
    for (auto& pr : m.params)
        for (auto& v : pr.value.v) v = static_cast<float>(rng.next_gaussian() * 0.05);
    quant::Tokenizer<float> tok(sched, 6);

    gen::SamplerConfig sc;
    sc.cfg_scale = 1.5;
    sc.seed = 42;
    const std::string prompt = "a red square in the center";
    auto r1 = gen::generate_image(m, tok, vocab, prompt, sched, sc);
    auto r2 = gen::generate_image(m, tok, vocab, prompt, sched, sc);
    CHECK(r1.tokens.bits == r2.tokens.bits);
    CHECK(r1.image.v == r2.image.v);
    CHECK(r1.image.shape == core::Shape{3, 32, 32});

    // Batched generation matches solo generation bit for bit.
    gen::SamplerConfig sc2 = sc;
    sc2.seed = 43;
    auto solo2 = gen::generate_image(m, tok, vocab, "a blue circle in the top left", sched, sc2);
    auto batched = gen::generate_images(m, tok, vocab,
                                        {prompt, "a blue circle in the top left"}, sched, sc,
                                        {42, 43});
    CHECK(batched[0].tokens.bits == r1.tokens.bits);
    CHECK(batched[1].tokens.bits == solo2.tokens.bits);
    CHECK(batched[0].image.v == r1.image.v);
    CHECK(batched[1].image.v == solo2.image.v);

    // Requesting more scales than the trained ladder is rejected.
    auto longer = quant::ScaleSchedule::desk_hi();
    CHECK_THROWS_AS(gen::generate_image(m, tok, vocab, prompt, longer, sc),
                    std::invalid_argument);
}

TEST_CASE("generate with the explicit-vocabulary code head") {
    quant::ScaleSchedule sched;
    sched.scales = {{1, 1}, {2, 2}};
    sched.latent_dim = 4;
    sched.base_h = sched.base_w = 2;
    text::Vocab vocab;
    model::ModelConfig cfg = model::ModelConfig::desk(vocab.size(), sched);
    cfg.d_model = 16;
    cfg.d_visdec = 16;
    cfg.n_layers_llm = 1;
    cfg.n_layers_visdec = 1;
    cfg.n_heads = cfg.n_heads_visdec = 2;
    model::UnifiedModel<float> m(cfg, 15);
    Rng rng(21);
    for (auto& pr : m.params)
        for (auto& v : pr.value.v) v = static_cast<float>(rng.next_gaussian() * 0.05);
    quant::Tokenizer<float> tok(sched, 8);

    gen::SamplerConfig sc;
    sc.use_code_head = true;
    sc.top_k = 900;  // clamped to the 16-code vocabulary
    sc.top_p = 0.95;
    sc.seed = 4;
    auto r = gen::generate_image(m, tok, vocab, "a red circle in the center", sched, sc);
    CHECK(r.tokens.num_scales() == 2);
    auto again = gen::generate_image(m, tok, vocab, "a red circle in the center", sched, sc);
    CHECK(r.tokens.bits == again.tokens.bits);
}
