#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "unigen/core/ops_nn.hpp"
#include "unigen/quant/bsq.hpp"

namespace unigen::quant {

// Fully convolutional encoder/decoder with a 4x downsampling factor, so the
// same weights map 32px images to an 8x8 latent and 64px images to 16x16.
template <class T>
class Tokenizer {
public:
    struct Param {
        std::string name;
        core::Tensor<T> value;
        bool trainable = true;
    };

    ScaleSchedule schedule;          // current ladder (base latent follows images / 4)
    std::vector<double> calibration; // per-scale mean training gain, for generation
    std::vector<Param> params;

    Tokenizer() = default;

    Tokenizer(ScaleSchedule sched, uint64_t seed, int c1 = 24, int c2 = 48)
        : schedule(std::move(sched)), c1_(c1), c2_(c2) {
        schedule.validate();
        calibration.assign(static_cast<size_t>(schedule.num_scales()), 1.0);
        core::Rng rng(core::mix_seed(seed, 0x70cull));
        const int d = schedule.latent_dim;
        auto w = [&](core::Shape s) { return core::Tensor<T>::trunc_randn(std::move(s), rng, T(0.05)); };
        add("enc.c1.w", w({c1_, 3, 3, 3}));
        add("enc.c1.b", core::Tensor<T>::zeros({c1_}));
        add("enc.c2.w", w({c2_, c1_, 3, 3}));
        add("enc.c2.b", core::Tensor<T>::zeros({c2_}));
        add("enc.c3.w", w({c2_, c2_, 3, 3}));
        add("enc.c3.b", core::Tensor<T>::zeros({c2_}));
        add("enc.out.w", w({d, c2_, 1, 1}));
        add("enc.out.b", core::Tensor<T>::zeros({d}));
        add("dec.in.w", w({c2_, d, 3, 3}));
        add("dec.in.b", core::Tensor<T>::zeros({c2_}));
        add("dec.c1.w", w({c2_, c2_, 3, 3}));
        add("dec.c1.b", core::Tensor<T>::zeros({c2_}));
        add("dec.c2.w", w({c1_, c2_, 3, 3}));
        add("dec.c2.b", core::Tensor<T>::zeros({c1_}));
        add("dec.out.w", w({3, c1_, 3, 3}));
        add("dec.out.b", core::Tensor<T>::zeros({3}));
    }

    core::Tensor<T>& p(const std::string& name) {
        auto it = index_.find(name);
        core::require(it != index_.end(), "tokenizer: unknown parameter " + name);
        return params[it->second].value;
    }

    void set_trainable(bool on) {
        for (auto& pr : params) pr.trainable = on;
    }

    int64_t num_parameters() const {
        int64_t n = 0;
        for (const auto& pr : params) n += pr.value.size();
        return n;
    }

    int channels1() const { return c1_; }
    int channels2() const { return c2_; }

    struct Bound {
        const Tokenizer* tok = nullptr;
        core::Tape<T>* tape = nullptr;
        std::vector<core::Var<T>> vars;
        std::shared_ptr<std::unordered_map<std::string, size_t>> index;
        core::Var<T> operator[](const std::string& name) const {
            auto it = index->find(name);
            core::require(it != index->end(), "tokenizer: unknown parameter " + name);
            return vars[it->second];
        }
    };

    Bound bind(core::Tape<T>& tape) const {
        Bound b;
        b.tok = this;
        b.tape = &tape;
        b.index = std::make_shared<std::unordered_map<std::string, size_t>>(index_);
        b.vars.reserve(params.size());
        for (const auto& pr : params) b.vars.push_back(tape.leaf(pr.value, pr.trainable));
        return b;
    }

    // images [B,3,H,W] -> latents [B,d,H/4,W/4]
    static core::Var<T> encode(const Bound& b, core::Var<T> images) {
        using namespace core;
        auto x = silu(conv2d(images, b["enc.c1.w"], b["enc.c1.b"], 1, 1));
        x = silu(conv2d(x, b["enc.c2.w"], b["enc.c2.b"], 2, 1));
        x = silu(conv2d(x, b["enc.c3.w"], b["enc.c3.b"], 2, 1));
        return conv2d(x, b["enc.out.w"], b["enc.out.b"], 1, 0);
    }

    // latents [B,d,h,w] -> images [B,3,4h,4w]
    static core::Var<T> decode(const Bound& b, core::Var<T> latents) {
        using namespace core;
        const int64_t h = latents.val().dim(2), w = latents.val().dim(3);
        auto x = silu(conv2d(latents, b["dec.in.w"], b["dec.in.b"], 1, 1));
        x = resize_nearest(x, h * 2, w * 2);
        x = silu(conv2d(x, b["dec.c1.w"], b["dec.c1.b"], 1, 1));
        x = resize_nearest(x, h * 4, w * 4);
        x = silu(conv2d(x, b["dec.c2.w"], b["dec.c2.b"], 1, 1));
        return conv2d(x, b["dec.out.w"], b["dec.out.b"], 1, 1);
    }

    // Inference helpers (no gradient tracking).
    core::Tensor<T> encode_values(const core::Tensor<T>& images) const {
        core::Tape<T> tape(false);
        auto b = bind(tape);
        return encode(b, tape.constant(images)).val();
    }

    core::Tensor<T> decode_values(const core::Tensor<T>& latents) const {
        core::Tape<T> tape(false);
        auto b = bind(tape);
        return decode(b, tape.constant(latents)).val();
    }

    // Full image -> token ladder, with partial reconstructions kept for
    // teacher-forcing inputs.
    QuantizeResult<T> tokenize_image(const core::Tensor<T>& image, bool keep_partials = true) const {
        core::require(image.rank() == 3 && image.dim(0) == 3, "tokenize_image: expect [3,H,W]");
        core::Tensor<T> batched({1, 3, image.dim(1), image.dim(2)});
        batched.v = image.v;
        auto lat = encode_values(batched);
        core::Tensor<T> f({lat.dim(1), lat.dim(2), lat.dim(3)});
        f.v = lat.v;
        return quantize_scales(f, schedule, keep_partials);
    }

    // Token ladder -> pixels, optionally with generation-time calibration
    // gains instead of the ladder's own.
    core::Tensor<T> decode_tokens(const ScaleTokens& tokens, bool use_calibration) const {
        auto acc = reconstruct<T>(tokens, schedule, use_calibration ? &calibration : nullptr);
        core::Tensor<T> batched({1, acc.dim(0), acc.dim(1), acc.dim(2)});
        batched.v = acc.v;
        auto img = decode_values(batched);
        core::Tensor<T> out({3, img.dim(2), img.dim(3)});
        out.v = img.v;
        return out;
    }

private:
    int c1_ = 24, c2_ = 48;
    std::unordered_map<std::string, size_t> index_;

    void add(const std::string& name, core::Tensor<T> value) {
        index_.emplace(name, params.size());
        params.push_back(Param{name, std::move(value), true});
    }
};

template <class T>
struct TokenizerLosses {
    core::Var<T> total;
    core::Var<T> recon;
    core::Var<T> commit;
    double psnr = 0.0;
};

// Reconstruction + commitment objective. Gradients pass through the
// quantizer by the straight-through estimator: the decoder sees
// f + stopgrad(acc - f), so d(acc_st)/d(f) is the identity.
template <class T>
TokenizerLosses<T> tokenizer_losses(const typename Tokenizer<T>::Bound& b,
                                    const core::Tensor<T>& images, T commit_weight) {
    using namespace core;
    core::require(images.rank() == 4 && images.dim(0) >= 1, "tokenizer_losses: expect [B,3,H,W]");
    const Tokenizer<T>& tok = *b.tok;
    Tape<T>& tape = *b.tape;

    auto imgs = tape.constant(images);
    auto f = Tokenizer<T>::encode(b, imgs);

    // Quantize each latent map (pure, outside the tape).
    const Tensor<T>& fv = f.val();
    const int64_t B = fv.dim(0), d = fv.dim(1), h = fv.dim(2), w = fv.dim(3);
    Tensor<T> acc_minus_f({B, d, h, w});
    for (int64_t bi = 0; bi < B; ++bi) {
        Tensor<T> one({d, h, w});
        std::copy_n(fv.data() + bi * d * h * w, d * h * w, one.data());
        auto q = quantize_scales(one, tok.schedule, false);
        for (int64_t i = 0; i < d * h * w; ++i)
            acc_minus_f.v[static_cast<size_t>(bi * d * h * w + i)] =
                q.acc.v[static_cast<size_t>(i)] - one.v[static_cast<size_t>(i)];
    }

    Tensor<T> acc_values = fv;
    for (int64_t i = 0; i < acc_values.size(); ++i)
        acc_values.v[static_cast<size_t>(i)] += acc_minus_f.v[static_cast<size_t>(i)];

    auto acc_st = add(f, tape.constant(acc_minus_f));       // value acc, gradient identity to f
    auto commit_diff = sub(f, tape.constant(acc_values));   // f - stopgrad(acc)

    auto recon = Tokenizer<T>::decode(b, acc_st);
    auto rdiff = sub(recon, imgs);
    TokenizerLosses<T> out;
    out.recon = mean_all(mul(rdiff, rdiff));
    out.commit = mean_all(mul(commit_diff, commit_diff));
    out.total = add(out.recon, scale(out.commit, commit_weight));
    const double mse = static_cast<double>(out.recon.scalar());
    out.psnr = mse > 0 ? 10.0 * std::log10(1.0 / mse) : 99.0;
    if (!std::isfinite(static_cast<double>(out.total.scalar())))
        throw std::runtime_error("tokenizer_losses: non-finite loss");
    return out;
}

template <class T>
inline double psnr(const core::Tensor<T>& a, const core::Tensor<T>& b) {
    core::require_same_shape(a.shape, b.shape, "psnr");
    double mse = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.v[static_cast<size_t>(i)]) -
                         static_cast<double>(b.v[static_cast<size_t>(i)]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    return mse > 0 ? 10.0 * std::log10(1.0 / mse) : 99.0;
}

}  // namespace unigen::quant
