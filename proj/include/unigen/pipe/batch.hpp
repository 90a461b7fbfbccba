#pragma once

#include <optional>
#include <unordered_map>
#include <vector>

#include "unigen/data/corpus.hpp"
#include "unigen/data/render.hpp"
#include "unigen/model/backbone.hpp"
#include "unigen/quant/tokenizer.hpp"

namespace unigen::pipe {

// Fixed padding so every sequence of a batch shares one layout.
inline constexpr int64_t kPromptPad = 7;       // longest caption
inline constexpr int64_t kQuestionPad = 6;     // longest question
inline constexpr int64_t kInstructionPad = 7;  // longest edit instruction
inline constexpr int64_t kAnswerPad = 2;       // one-word answer + eos

// Teacher-forcing inputs for the generation block: rows of scale k hold the
// partial reconstruction over scales < k resized to (h_k, w_k); the first
// scale has no history and stays zero (the model substitutes its start
// embedding there).
template <class T>
void ladder_inputs_into(const quant::ScaleTokens& tokens, const quant::ScaleSchedule& schedule,
                        T* dst) {
    std::vector<core::Tensor<T>> partials;
    quant::reconstruct<T>(tokens, schedule, nullptr, &partials);
    const int d = schedule.latent_dim;
    int64_t row = 0;
    for (int k = 0; k < schedule.num_scales(); ++k) {
        const auto [hk, wk] = schedule.scales[static_cast<size_t>(k)];
        if (k == 0) {
            std::fill_n(dst + row * d, static_cast<int64_t>(hk) * wk * d, T(0));
        } else {
            core::Tensor<T> resized;
            quant::detail::resize_chw(partials[static_cast<size_t>(k - 1)], hk, wk, resized);
            // channel-first -> per-position vectors
            for (int64_t y = 0; y < hk; ++y)
                for (int64_t x = 0; x < wk; ++x)
                    for (int c = 0; c < d; ++c)
                        dst[(row + y * wk + x) * d + c] =
                            resized.v[static_cast<size_t>((c * hk + y) * wk + x)];
        }
        row += static_cast<int64_t>(hk) * wk;
    }
}

template <class T>
std::vector<T> bits_flat(const quant::ScaleTokens& tokens) {
    std::vector<T> out;
    for (const auto& scale_bits : tokens.bits)
        for (uint8_t b : scale_bits) out.push_back(static_cast<T>(b));
    return out;
}

// Builds uniform-layout batches from corpus records, rendering scenes and
// tokenizing target images through the frozen tokenizer. Token ladders are
// cached per scene (the renderer is pure, so the spec identifies the image).
template <class T>
class BatchBuilder {
public:
    BatchBuilder(const text::Vocab& vocab, const quant::Tokenizer<T>& tokenizer)
        : vocab_(&vocab), tokenizer_(&tokenizer) {}

    const quant::ScaleSchedule& schedule() const { return tokenizer_->schedule; }

    const quant::ScaleTokens& tokens_for(const data::SceneSpec& spec) {
        const uint64_t key = spec_key(spec);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        auto img = data::render(spec, 0);
        auto q = tokenizer_->tokenize_image(img.template cast<T>(), false);
        return cache_.emplace(key, std::move(q.tokens)).first->second;
    }

    quant::ScaleTokens tokens_for_image(const data::Image& img) const {
        return tokenizer_->tokenize_image(img.template cast<T>(), false).tokens;
    }

    // Text-to-image training batch; records must be t2i or preference_prompt.
    // When null_prompt_rate > 0, that fraction of examples trains the CFG
    // unconditional branch (prompt replaced by the null token).
    model::Batch<T> t2i(const std::vector<data::Record>& records, double null_prompt_rate,
                        uint64_t seed) {
        core::require(!records.empty(), "t2i batch: no records");
        model::Batch<T> out = gen_skeleton(static_cast<int64_t>(records.size()));
        const int64_t G = out.gen_len(), d = schedule().latent_dim;
        for (size_t i = 0; i < records.size(); ++i) {
            const auto& rec = records[i];
            const bool null_prompt =
                null_prompt_rate > 0 &&
                core::Rng(core::mix_seed(seed, rec.seed, 0xcf9u)).next_double() < null_prompt_rate;
            fill_tokens(out, static_cast<int64_t>(i), assemble_t2i(rec.caption, null_prompt).seq);
            const auto& toks = tokens_for(rec.spec);
            ladder_inputs_into(toks, schedule(),
                               out.gen_inputs.data() + static_cast<int64_t>(i) * G * d);
            auto bits = bits_flat<T>(toks);
            std::copy(bits.begin(), bits.end(),
                      out.bit_targets.begin() + static_cast<int64_t>(i) * G * d);
        }
        return out;
    }

    // Teacher-forcing batch for explicit (caption, image) pairs; used by the
    // preference objective (winner/loser images share the prompt layout).
    model::Batch<T> gen_pairs(const std::vector<std::string>& captions,
                              const std::vector<quant::ScaleTokens>& tokens) {
        core::require(!captions.empty() && captions.size() == tokens.size(),
                      "gen_pairs batch: caption/token count mismatch");
        model::Batch<T> out = gen_skeleton(static_cast<int64_t>(captions.size()));
        const int64_t G = out.gen_len(), d = schedule().latent_dim;
        for (size_t i = 0; i < captions.size(); ++i) {
            fill_tokens(out, static_cast<int64_t>(i), assemble_t2i(captions[i], false).seq);
            ladder_inputs_into(tokens[i], schedule(),
                               out.gen_inputs.data() + static_cast<int64_t>(i) * G * d);
            auto bits = bits_flat<T>(tokens[i]);
            std::copy(bits.begin(), bits.end(),
                      out.bit_targets.begin() + static_cast<int64_t>(i) * G * d);
        }
        return out;
    }

    // Understanding QA batch: image + question -> one-word answer.
    model::Batch<T> qa(const std::vector<data::Record>& records) {
        core::require(!records.empty(), "qa batch: no records");
        const int64_t B = static_cast<int64_t>(records.size());
        text::AssembleOptions opt;
        opt.und_image = true;
        opt.prompt = records[0].question;
        opt.response_text = records[0].answer;
        opt.pad_prompt_to = kQuestionPad;
        opt.pad_response_to = kAnswerPad;
        auto first = text::assemble(*vocab_, opt);
        model::Batch<T> out;
        out.layout = first.layout;
        out.batch = B;
        out.tokens.assign(static_cast<size_t>(B * out.layout.total), 0);
        const int res = records[0].spec.resolution;
        out.und_images = core::Tensor<T>({B, 3, res, res});
        for (int64_t i = 0; i < B; ++i) {
            const auto& rec = records[static_cast<size_t>(i)];
            core::require(rec.spec.resolution == res, "qa batch: mixed resolutions");
            opt.prompt = rec.question;
            opt.response_text = rec.answer;
            auto a = text::assemble(*vocab_, opt);
            fill_tokens(out, i, a.seq);
            collect_text_targets(out, i, a.seq);
            auto img = data::render(rec.spec, rec.seed).template cast<T>();
            std::copy(img.v.begin(), img.v.end(), out.und_images.data() + i * img.size());
        }
        return out;
    }

    // Editing batch: source image + instruction -> target image ladder.
    model::Batch<T> edit(const std::vector<data::Record>& records, double null_prompt_rate,
                         uint64_t seed) {
        core::require(!records.empty(), "edit batch: no records");
        const int64_t B = static_cast<int64_t>(records.size());
        model::Batch<T> out = edit_skeleton(B, records[0].spec.resolution);
        const int64_t G = out.gen_len(), d = schedule().latent_dim;
        for (int64_t i = 0; i < B; ++i) {
            const auto& rec = records[static_cast<size_t>(i)];
            core::require(rec.kind == data::RecordKind::editing && rec.target_spec,
                          "edit batch: record is not an edit");
            const bool null_prompt =
                null_prompt_rate > 0 &&
                core::Rng(core::mix_seed(seed, rec.seed, 0xed17u)).next_double() < null_prompt_rate;
            fill_tokens(out, i, assemble_edit(rec.instruction, null_prompt).seq);
            auto src = data::render(rec.spec, rec.seed).template cast<T>();
            std::copy(src.v.begin(), src.v.end(), out.und_images.data() + i * src.size());
            const auto& toks = tokens_for(*rec.target_spec);
            ladder_inputs_into(toks, schedule(), out.gen_inputs.data() + i * G * d);
            auto bits = bits_flat<T>(toks);
            std::copy(bits.begin(), bits.end(), out.bit_targets.begin() + i * G * d);
        }
        return out;
    }

    text::Assembled assemble_t2i(const std::string& prompt, bool null_prompt) const {
        text::AssembleOptions opt;
        opt.prompt = prompt;
        opt.null_prompt = null_prompt;
        opt.gen_schedule = schedule();
        opt.pad_prompt_to = kPromptPad;
        return text::assemble(*vocab_, opt);
    }

    text::Assembled assemble_edit(const std::string& instruction, bool null_prompt) const {
        text::AssembleOptions opt;
        opt.prompt = instruction;
        opt.null_prompt = null_prompt;
        opt.und_image = true;
        opt.gen_schedule = schedule();
        opt.pad_prompt_to = kInstructionPad;
        return text::assemble(*vocab_, opt);
    }

    void clear_cache() { cache_.clear(); }

private:
    const text::Vocab* vocab_;
    const quant::Tokenizer<T>* tokenizer_;
    std::unordered_map<uint64_t, quant::ScaleTokens> cache_;

    static uint64_t spec_key(const data::SceneSpec& s) {
        return core::mix_seed(static_cast<uint64_t>(s.shape),
                              static_cast<uint64_t>(s.color) * 64 + static_cast<uint64_t>(s.cell),
                              static_cast<uint64_t>(s.background),
                              static_cast<uint64_t>(s.resolution));
    }

    model::Batch<T> gen_skeleton(int64_t B) {
        auto a = assemble_t2i("", false);
        model::Batch<T> out;
        out.layout = a.layout;
        out.batch = B;
        out.tokens.assign(static_cast<size_t>(B * out.layout.total), 0);
        const int64_t G = out.gen_len();
        out.gen_inputs = core::Tensor<T>({B, G, schedule().latent_dim});
        out.bit_targets.assign(static_cast<size_t>(B * G * schedule().latent_dim), T(0));
        return out;
    }

    model::Batch<T> edit_skeleton(int64_t B, int resolution) {
        auto a = assemble_edit("", false);
        model::Batch<T> out;
        out.layout = a.layout;
        out.batch = B;
        out.tokens.assign(static_cast<size_t>(B * out.layout.total), 0);
        out.und_images = core::Tensor<T>({B, 3, resolution, resolution});
        const int64_t G = out.gen_len();
        out.gen_inputs = core::Tensor<T>({B, G, schedule().latent_dim});
        out.bit_targets.assign(static_cast<size_t>(B * G * schedule().latent_dim), T(0));
        return out;
    }

    void fill_tokens(model::Batch<T>& out, int64_t i, const text::MixedSequence& seq) {
        core::require(seq.size() == out.layout.total,
                      "batch: layout drift (sequence length " + std::to_string(seq.size()) +
                          " vs " + std::to_string(out.layout.total) + ")");
        std::copy(seq.tokens.begin(), seq.tokens.end(),
                  out.tokens.begin() + i * out.layout.total);
    }

    void collect_text_targets(model::Batch<T>& out, int64_t i, const text::MixedSequence& seq) {
        for (int64_t t = 0; t < seq.size(); ++t)
            if (seq.loss_mask[static_cast<size_t>(t)]) {
                out.text_pos.push_back(static_cast<int32_t>(i * out.layout.total + t - 1));
                out.text_tok.push_back(seq.tokens[static_cast<size_t>(t)]);
            }
    }
};

}  // namespace unigen::pipe
