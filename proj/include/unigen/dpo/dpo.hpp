#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "unigen/data/oracle.hpp"
#include "unigen/model/backbone.hpp"
#include "unigen/pipe/batch.hpp"

namespace unigen::dpo {

struct DpoConfig {
    double beta = 0.1;  // reward temperature; paper leaves it unstated
    std::string reference_id;
    double lr = 1e-6;
    int64_t steps = 0;

    void validate() const { core::require(beta > 0.0, "dpo: beta must be > 0"); }
};

// (prompt, winner, loser) with shared prompt; provenance records whether the
// loser came from the policy or the corruption oracle.
struct PreferencePair {
    std::string prompt;
    data::Image winner;
    data::Image loser;
    std::string provenance;  // "oracle" or "policy"
    uint64_t seed = 0;
};

// log pi^img(y | x) of the factorized Bernoulli head: the summed per-bit log
// Bernoulli over every generation position. Returns one scalar per example.
template <class T>
core::Var<T> image_token_logprob_batch(core::Var<T> bit_logits, const std::vector<T>& target_bits) {
    using namespace core;
    const int64_t n = bit_logits.val().size();
    core::require(static_cast<int64_t>(target_bits.size()) == n,
                  "image_token_logprob: target layout mismatch (" +
                      std::to_string(target_bits.size()) + " vs " + std::to_string(n) + ")");
    for (const T& t : target_bits)
        core::require(t == T(0) || t == T(1), "image_token_logprob: targets must be bits");
    auto tgt = bit_logits.tape->constant(
        Tensor<T>(bit_logits.val().shape, std::vector<T>(target_bits)));
    // log Bernoulli(sigmoid(x))[t] = -(softplus(x) - x*t)
    auto nll = sub(softplus(bit_logits), mul(bit_logits, tgt));
    return neg(sum_per_example(nll));
}

// Eq. of the preference objective: -log sigmoid(beta*(lpw - lpref_w) -
// beta*(lpl - lpref_l)), evaluated in double.
inline double dpo_loss(double lp_theta_w, double lp_theta_l, double lp_ref_w, double lp_ref_l,
                       double beta) {
    core::require(beta > 0.0, "dpo_loss: beta must be > 0");
    core::require(std::isfinite(lp_theta_w) && std::isfinite(lp_theta_l) &&
                      std::isfinite(lp_ref_w) && std::isfinite(lp_ref_l),
                  "dpo_loss: non-finite input");
    const double z = beta * (lp_theta_w - lp_ref_w) - beta * (lp_theta_l - lp_ref_l);
    return core::softplus_scalar(-z);
}

// Implicit reward r_hat = beta * (log pi_theta - log pi_ref).
inline double implicit_reward(double beta, double lp_theta, double lp_ref) {
    core::require(beta > 0.0, "implicit_reward: beta must be > 0");
    return beta * (lp_theta - lp_ref);
}

// Differentiable batch objective: mean over pairs of
// softplus(-(beta*((lpw-lprefw)-(lpl-lprefl)))). Reference log-probs enter as
// constants (the reference model is frozen per phase).
template <class T>
core::Var<T> dpo_loss_batch(core::Var<T> lp_w, core::Var<T> lp_l, const std::vector<T>& lp_ref_w,
                            const std::vector<T>& lp_ref_l, double beta) {
    using namespace core;
    core::require(beta > 0.0, "dpo_loss_batch: beta must be > 0");
    const int64_t B = lp_w.val().dim(0);
    core::require(lp_l.val().dim(0) == B &&
                      static_cast<int64_t>(lp_ref_w.size()) == B &&
                      static_cast<int64_t>(lp_ref_l.size()) == B,
                  "dpo_loss_batch: pair count mismatch");
    auto refw = lp_w.tape->constant(Tensor<T>({B}, std::vector<T>(lp_ref_w)));
    auto refl = lp_w.tape->constant(Tensor<T>({B}, std::vector<T>(lp_ref_l)));
    auto z = scale(sub(sub(lp_w, refw), sub(lp_l, refl)), static_cast<T>(beta));
    return mean_all(softplus(neg(z)));
}

// Preference-pair construction: winners are oracle renders of the caption;
// losers come from the supplied policy sampler when available, otherwise from
// the corruption oracle (wrong color with probability 1/2, heavy pixel noise
// otherwise). Malformed captions are skipped and counted.
struct PairBuildStats {
    int64_t built = 0;
    int64_t skipped = 0;
};

using PolicySampler = std::function<std::vector<data::Image>(const std::vector<std::string>&,
                                                             const std::vector<uint64_t>&)>;

inline std::vector<PreferencePair> build_preference_pairs(
    const std::vector<data::Record>& prompt_records, const PolicySampler* policy, int resolution,
    uint64_t seed, PairBuildStats* stats = nullptr) {
    std::vector<PreferencePair> out;
    std::vector<std::string> policy_prompts;
    std::vector<uint64_t> policy_seeds;
    std::vector<size_t> policy_slots;

    for (size_t i = 0; i < prompt_records.size(); ++i) {
        const auto& rec = prompt_records[i];
        PreferencePair pair;
        pair.prompt = rec.caption;
        pair.seed = core::mix_seed(seed, rec.seed, static_cast<uint64_t>(i));
        core::Rng rng(pair.seed);
        data::SceneSpec spec;
        try {
            spec = data::parse_caption(rec.caption);
        } catch (const std::invalid_argument&) {
            if (stats) ++stats->skipped;
            continue;
        }
        spec.resolution = resolution;
        spec.background = static_cast<data::Background>(rng.next_below(data::kNumBackgrounds));
        pair.winner = data::render(spec, pair.seed);

        if (policy) {
            pair.provenance = "policy";
            policy_prompts.push_back(rec.caption);
            policy_seeds.push_back(core::mix_seed(pair.seed, 0x105e7u));
            policy_slots.push_back(out.size());
            pair.loser = pair.winner;  // placeholder until the policy fills it
        } else {
            pair.provenance = "oracle";
            if (rng.next_double() < 0.5) {
                // Wrong color, same geometry.
                auto wrong = spec;
                auto c = static_cast<data::ColorKind>(rng.next_below(data::kNumColors - 1));
                if (c == spec.color) c = static_cast<data::ColorKind>(static_cast<int>(c) + 1);
                wrong.color = c;
                pair.loser = data::render(wrong, pair.seed);
            } else {
                pair.loser = data::add_gaussian_noise(pair.winner, 0.2, rng);
            }
        }
        out.push_back(std::move(pair));
        if (stats) ++stats->built;
    }
    if (policy && !policy_prompts.empty()) {
        auto imgs = (*policy)(policy_prompts, policy_seeds);
        core::require(imgs.size() == policy_slots.size(), "build_preference_pairs: policy sampler count");
        for (size_t i = 0; i < policy_slots.size(); ++i) out[policy_slots[i]].loser = imgs[i];
    }
    return out;
}

// Per-pair teacher-forced log-probs for a model snapshot (no gradients).
template <class T>
std::vector<double> pair_logprobs(model::UnifiedModel<T>& mdl, pipe::BatchBuilder<T>& builder,
                                  const std::vector<std::string>& captions,
                                  const std::vector<quant::ScaleTokens>& tokens,
                                  int64_t batch_size = 32) {
    std::vector<double> out;
    out.reserve(captions.size());
    for (size_t at = 0; at < captions.size(); at += static_cast<size_t>(batch_size)) {
        const size_t n = std::min(static_cast<size_t>(batch_size), captions.size() - at);
        std::vector<std::string> caps(captions.begin() + at, captions.begin() + at + n);
        std::vector<quant::ScaleTokens> toks(tokens.begin() + at, tokens.begin() + at + n);
        auto batch = builder.gen_pairs(caps, toks);
        core::Tape<T> tape(false);
        auto bm = model::bind(mdl, tape);
        auto outs = model::forward_mixed(bm, batch);
        auto lp = image_token_logprob_batch(outs.bit_logits, batch.bit_targets);
        for (int64_t i = 0; i < lp.val().size(); ++i)
            out.push_back(static_cast<double>(lp.val().v[static_cast<size_t>(i)]));
    }
    return out;
}

}  // namespace unigen::dpo
