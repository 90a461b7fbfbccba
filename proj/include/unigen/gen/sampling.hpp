#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "unigen/data/render.hpp"
#include "unigen/model/backbone.hpp"
#include "unigen/pipe/batch.hpp"
#include "unigen/quant/tokenizer.hpp"

namespace unigen::gen {

struct SamplerConfig {
    double cfg_scale = 1.5;  // guidance strength
    int64_t top_k = 900;     // explicit-vocabulary head only; clamped to vocab
    double top_p = 0.95;     // explicit-vocabulary head only
    double temperature = 1.0;
    uint64_t seed = 0;
    bool use_code_head = false;  // per-bit sampling by default

    void validate() const {
        core::require(top_p > 0.0 && top_p <= 1.0, "sampler: top_p must be in (0,1]");
        core::require(top_k >= 1, "sampler: top_k must be >= 1");
        core::require(temperature > 0.0, "sampler: temperature must be > 0");
    }
};

// Classifier-free guidance on logits: out = uncond + s * (cond - uncond).
// s = 1 returns the conditional logits bit-for-bit; s = 0 the unconditional.
template <class T>
core::Tensor<T> apply_cfg(const core::Tensor<T>& cond, const core::Tensor<T>& uncond, double s) {
    core::require_same_shape(cond.shape, uncond.shape, "apply_cfg");
    if (s == 1.0) return cond;
    if (s == 0.0) return uncond;
    core::Tensor<T> out(cond.shape);
    for (int64_t i = 0; i < out.size(); ++i) {
        const double u = static_cast<double>(uncond.v[static_cast<size_t>(i)]);
        const double c = static_cast<double>(cond.v[static_cast<size_t>(i)]);
        out.v[static_cast<size_t>(i)] = static_cast<T>(u + s * (c - u));
    }
    return out;
}

// Keeps the top-k entries by probability, then the smallest prefix (in
// descending probability, ties by lower index) whose mass reaches p, and
// renormalizes. Input must be a distribution.
inline std::vector<double> top_k_top_p_filter(const std::vector<double>& probs, int64_t k,
                                              double p) {
    core::require(k >= 1, "top_k_top_p_filter: k must be >= 1");
    core::require(p > 0.0 && p <= 1.0, "top_k_top_p_filter: p must be in (0,1]");
    double total = 0.0;
    for (double q : probs) {
        core::require(q >= 0.0 && std::isfinite(q), "top_k_top_p_filter: probs must be nonnegative");
        total += q;
    }
    core::require(std::fabs(total - 1.0) < 1e-6, "top_k_top_p_filter: probs must sum to 1");

    const int64_t n = static_cast<int64_t>(probs.size());
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (probs[static_cast<size_t>(a)] != probs[static_cast<size_t>(b)])
            return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
        return a < b;  // ties broken by lower index
    });
    const int64_t keep_k = std::min(k, n);
    std::vector<double> out(static_cast<size_t>(n), 0.0);
    double mass = 0.0;
    int64_t kept = 0;
    for (int64_t r = 0; r < keep_k; ++r) {
        const int64_t idx = order[static_cast<size_t>(r)];
        out[static_cast<size_t>(idx)] = probs[static_cast<size_t>(idx)];
        mass += probs[static_cast<size_t>(idx)];
        ++kept;
        if (mass >= p - 1e-12) break;
    }
    core::require(kept >= 1 && mass > 0.0, "top_k_top_p_filter: filtered everything away");
    for (double& q : out) q /= mass;
    return out;
}

// Independent Bernoulli over sigmoid(logit / temperature) per bit. The
// temperature -> 0 limit is thresholding at zero.
template <class T>
std::vector<uint8_t> sample_bits(const T* logits, int64_t n, double temperature, core::Rng& rng) {
    core::require(temperature > 0.0, "sample_bits: temperature must be > 0");
    std::vector<uint8_t> bits(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double p = core::sigmoid_scalar(static_cast<double>(logits[i]) / temperature);
        bits[static_cast<size_t>(i)] = rng.next_double() < p ? 1 : 0;
    }
    return bits;
}

template <class T>
struct GenerateResult {
    quant::ScaleTokens tokens;
    core::Tensor<T> image;  // [3,H,W], clamped to [0,1]
};

namespace detail {

// Truncates a full generation layout to the first `blocks` scale blocks; the
// causal mask makes the dropped suffix irrelevant to those positions.
inline text::MixedLayout truncate_layout(const text::MixedLayout& full, size_t blocks) {
    text::MixedLayout lay = full;
    lay.gen_blocks.assign(full.gen_blocks.begin(), full.gen_blocks.begin() + static_cast<int64_t>(blocks));
    int64_t g = 0;
    for (int64_t b : lay.gen_blocks) g += b;
    lay.total = lay.gen_start + g;
    lay.eos_pos = -1;
    return lay;
}

}  // namespace detail

// Scale-by-scale decode with classifier-free guidance: at every scale the
// prompt-conditioned and null-prompt branches are recomputed over the
// realized prefix (no cache), their block logits combined, bits sampled, and
// the running reconstruction extended with the calibrated per-scale gain.
// Batched over prompts; each sample owns one rng stream, so results are
// independent of batching.
template <class T>
std::vector<GenerateResult<T>> generate_images(
    model::UnifiedModel<T>& mdl, const quant::Tokenizer<T>& tokenizer, const text::Vocab& vocab,
    const std::vector<std::string>& prompts, const quant::ScaleSchedule& schedule,
    const SamplerConfig& cfg, const std::vector<uint64_t>& seeds,
    const std::vector<data::Image>* und_images = nullptr) {
    using core::Tensor;
    cfg.validate();
    schedule.validate();
    core::require(schedule.is_prefix_of(mdl.cfg.schedule),
                  "generate: schedule longer than the trained ladder");
    core::require(static_cast<int>(tokenizer.calibration.size()) >= schedule.num_scales(),
                  "generate: tokenizer calibration missing scales");
    core::require(!prompts.empty() && prompts.size() == seeds.size(),
                  "generate: prompt/seed count mismatch");
    if (cfg.use_code_head)
        core::require(mdl.cfg.has_code_head(), "generate: model has no code head");

    const int64_t B = static_cast<int64_t>(prompts.size());
    const int d = schedule.latent_dim;
    const int K = schedule.num_scales();
    const int64_t G = schedule.total_positions();
    pipe::BatchBuilder<T> builder(vocab, tokenizer);

    // Assemble conditional and unconditional token streams (same layout; the
    // null branch replaces the prompt with the single null token plus pads).
    auto assemble_all = [&](bool null_prompt) {
        model::Batch<T> b;
        const bool with_und = und_images != nullptr;
        auto first = with_und ? builder.assemble_edit("", null_prompt)
                              : builder.assemble_t2i("", null_prompt);
        b.layout = first.layout;
        b.batch = B;
        b.tokens.assign(static_cast<size_t>(B * b.layout.total), 0);
        for (int64_t i = 0; i < B; ++i) {
            auto a = with_und ? builder.assemble_edit(prompts[static_cast<size_t>(i)], null_prompt)
                              : builder.assemble_t2i(prompts[static_cast<size_t>(i)], null_prompt);
            core::require(a.seq.size() == b.layout.total, "generate: layout drift");
            std::copy(a.seq.tokens.begin(), a.seq.tokens.end(),
                      b.tokens.begin() + i * b.layout.total);
        }
        if (with_und) {
            core::require(static_cast<int64_t>(und_images->size()) == B,
                          "generate: image count mismatch");
            const int64_t res = (*und_images)[0].dim(1);
            b.und_images = Tensor<T>({B, 3, res, res});
            for (int64_t i = 0; i < B; ++i) {
                auto img = (*und_images)[static_cast<size_t>(i)].template cast<T>();
                std::copy(img.v.begin(), img.v.end(), b.und_images.data() + i * img.size());
            }
        }
        b.gen_inputs = Tensor<T>({B, G, d});
        b.bit_targets.clear();
        return b;
    };
    model::Batch<T> cond = assemble_all(false);
    model::Batch<T> uncond = assemble_all(true);
    core::require(cond.layout.gen_start == uncond.layout.gen_start &&
                      cond.layout.total == uncond.layout.total,
                  "generate: conditional/unconditional layouts diverged");

    std::vector<core::Rng> streams;
    for (uint64_t s : seeds) streams.emplace_back(core::mix_seed(s, 0x9e2u));

    // Running per-sample reconstruction at the base latent size.
    const int64_t Hl = schedule.base_h, Wl = schedule.base_w;
    std::vector<Tensor<T>> acc(static_cast<size_t>(B), Tensor<T>::zeros({d, Hl, Wl}));
    std::vector<quant::ScaleTokens> tokens(static_cast<size_t>(B));
    const T unit = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d)));

    auto forward_block = [&](model::Batch<T>& batch, const text::MixedLayout& lay, int64_t g_done,
                             int64_t block) {
        model::Batch<T> view = batch;
        view.layout = lay;
        // Slice per-example token rows to the truncated layout.
        view.tokens.assign(static_cast<size_t>(B * lay.total), 0);
        for (int64_t i = 0; i < B; ++i)
            std::copy_n(batch.tokens.begin() + i * batch.layout.total, lay.total,
                        view.tokens.begin() + i * lay.total);
        const int64_t g_now = g_done + block;
        view.gen_inputs = Tensor<T>({B, g_now, d});
        for (int64_t i = 0; i < B; ++i)
            std::copy_n(batch.gen_inputs.data() + i * G * d, g_now * d,
                        view.gen_inputs.data() + i * g_now * d);
        core::Tape<T> tape(false);
        auto bm = model::bind(mdl, tape);
        auto outs = model::forward_mixed(bm, view);
        // Block logits: last `block` generation rows.
        if (cfg.use_code_head) {
            auto full = outs.code_logits.val();
            Tensor<T> blk({B, block, full.dim(2)});
            for (int64_t i = 0; i < B; ++i)
                std::copy_n(full.data() + (i * g_now + g_done) * full.dim(2), block * full.dim(2),
                            blk.data() + i * block * full.dim(2));
            return blk;
        }
        auto full = outs.bit_logits.val();
        Tensor<T> blk({B, block, d});
        for (int64_t i = 0; i < B; ++i)
            std::copy_n(full.data() + (i * g_now + g_done) * d, block * d,
                        blk.data() + i * block * d);
        return blk;
    };

    int64_t g_done = 0;
    for (int k = 0; k < K; ++k) {
        const auto [hk, wk] = schedule.scales[static_cast<size_t>(k)];
        const int64_t block = static_cast<int64_t>(hk) * wk;
        const auto lay = detail::truncate_layout(cond.layout, static_cast<size_t>(k + 1));

        // Teacher inputs for this block come from the running reconstruction.
        if (k > 0) {
            for (int64_t i = 0; i < B; ++i) {
                Tensor<T> resized;
                quant::detail::resize_chw(acc[static_cast<size_t>(i)], hk, wk, resized);
                T* dst = cond.gen_inputs.data() + (i * G + g_done) * d;
                for (int64_t y = 0; y < hk; ++y)
                    for (int64_t x = 0; x < wk; ++x)
                        for (int c = 0; c < d; ++c)
                            dst[(y * wk + x) * d + c] =
                                resized.v[static_cast<size_t>((c * hk + y) * wk + x)];
            }
            std::copy_n(cond.gen_inputs.data(), cond.gen_inputs.size(), uncond.gen_inputs.data());
        }

        auto logits_c = forward_block(cond, lay, g_done, block);
        Tensor<T> logits;
        if (cfg.cfg_scale == 1.0) {
            logits = std::move(logits_c);  // guidance is the identity at s=1
        } else {
            auto logits_u = forward_block(uncond, lay, g_done, block);
            logits = apply_cfg(logits_c, logits_u, cfg.cfg_scale);
        }

        const double gain = tokenizer.calibration[static_cast<size_t>(k)];
        for (int64_t i = 0; i < B; ++i) {
            std::vector<uint8_t> bits;
            if (cfg.use_code_head) {
                const int64_t V = logits.dim(2);
                bits.resize(static_cast<size_t>(block * d));
                for (int64_t p = 0; p < block; ++p) {
                    const T* row = logits.data() + (i * block + p) * V;
                    std::vector<double> probs(static_cast<size_t>(V));
                    double mx = -1e300;
                    for (int64_t j = 0; j < V; ++j)
                        mx = std::max(mx, static_cast<double>(row[j]) / cfg.temperature);
                    double denom = 0;
                    for (int64_t j = 0; j < V; ++j) {
                        probs[static_cast<size_t>(j)] =
                            std::exp(static_cast<double>(row[j]) / cfg.temperature - mx);
                        denom += probs[static_cast<size_t>(j)];
                    }
                    for (double& q : probs) q /= denom;
                    auto filtered = top_k_top_p_filter(probs, std::min<int64_t>(cfg.top_k, V), cfg.top_p);
                    double u = streams[static_cast<size_t>(i)].next_double(), acc_p = 0;
                    int64_t code = 0;
                    for (int64_t j = 0; j < V; ++j) {
                        acc_p += filtered[static_cast<size_t>(j)];
                        if (u < acc_p) {
                            code = j;
                            break;
                        }
                    }
                    for (int c = 0; c < d; ++c)
                        bits[static_cast<size_t>(p * d + c)] = (code >> c) & 1;
                }
            } else {
                bits = sample_bits(logits.data() + i * block * d, block * d, cfg.temperature,
                                   streams[static_cast<size_t>(i)]);
            }

            // Extend the running reconstruction with the calibrated gain.
            Tensor<T> q({d, hk, wk});
            for (int64_t y = 0; y < hk; ++y)
                for (int64_t x = 0; x < wk; ++x)
                    for (int c = 0; c < d; ++c) {
                        const T base = bits[static_cast<size_t>((y * wk + x) * d + c)] ? unit : -unit;
                        q.v[static_cast<size_t>((c * hk + y) * wk + x)] =
                            static_cast<T>(static_cast<double>(base) * gain);
                    }
            Tensor<T> up;
            quant::detail::resize_chw(q, Hl, Wl, up);
            auto& a = acc[static_cast<size_t>(i)];
            for (int64_t e = 0; e < a.size(); ++e) a.v[static_cast<size_t>(e)] += up.v[static_cast<size_t>(e)];
            tokens[static_cast<size_t>(i)].bits.push_back(std::move(bits));
            tokens[static_cast<size_t>(i)].gains.push_back(gain);
        }
        g_done += block;
    }

    // Decode all samples in one batch.
    Tensor<T> latents({B, d, Hl, Wl});
    for (int64_t i = 0; i < B; ++i)
        std::copy_n(acc[static_cast<size_t>(i)].data(), d * Hl * Wl, latents.data() + i * d * Hl * Wl);
    auto imgs = tokenizer.decode_values(latents);
    std::vector<GenerateResult<T>> out(static_cast<size_t>(B));
    const int64_t hw = imgs.dim(2) * imgs.dim(3);
    for (int64_t i = 0; i < B; ++i) {
        out[static_cast<size_t>(i)].tokens = std::move(tokens[static_cast<size_t>(i)]);
        Tensor<T> img({3, imgs.dim(2), imgs.dim(3)});
        for (int64_t e = 0; e < 3 * hw; ++e) {
            T v = imgs.v[static_cast<size_t>(i * 3 * hw + e)];
            img.v[static_cast<size_t>(e)] = v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
        }
        out[static_cast<size_t>(i)].image = std::move(img);
    }
    return out;
}

// Single-prompt convenience wrapper.
template <class T>
GenerateResult<T> generate_image(model::UnifiedModel<T>& mdl, const quant::Tokenizer<T>& tokenizer,
                                 const text::Vocab& vocab, const std::string& prompt,
                                 const quant::ScaleSchedule& schedule, const SamplerConfig& cfg,
                                 const std::optional<data::Image>& und_image = {}) {
    std::vector<data::Image> imgs;
    if (und_image) imgs.push_back(*und_image);
    auto res = generate_images(mdl, tokenizer, vocab, {prompt}, schedule, cfg, {cfg.seed},
                               und_image ? &imgs : nullptr);
    return std::move(res[0]);
}

}  // namespace unigen::gen
