#pragma once

#include <optional>
#include <string>
#include <vector>

#include "unigen/attn/masks.hpp"
#include "unigen/quant/schedule.hpp"
#include "unigen/text/vocab.hpp"

namespace unigen::text {

enum class Segment : uint8_t { text, image_und, image_gen };

inline constexpr int kUndPatches = 16;  // 4x4 pooled grid from the embedder

// One interleaved stream: token ids, per-position segment labels, scale index
// for generation slots, and the loss mask over response text + eos.
struct MixedSequence {
    std::vector<int32_t> tokens;
    std::vector<Segment> segments;
    std::vector<int32_t> scale_index;  // -1 outside generation slots
    std::vector<uint8_t> loss_mask;    // text-loss positions (response + eos)

    int64_t size() const { return static_cast<int64_t>(tokens.size()); }
};

// Section offsets of an assembled sequence, shared by every example built
// with the same options (fixed prompt padding gives fixed layouts).
struct MixedLayout {
    int64_t total = 0;
    int64_t und_start = -1;  // first patch slot, -1 when absent
    int64_t prompt_start = 0;
    int64_t prompt_capacity = 0;  // includes padding
    int64_t response_start = -1;
    int64_t response_capacity = 0;
    int64_t gen_start = -1;  // first generation slot
    std::vector<int64_t> gen_blocks;
    int64_t eos_pos = -1;
};

struct AssembleOptions {
    std::string prompt;
    std::optional<std::string> response_text;
    std::optional<quant::ScaleSchedule> gen_schedule;
    bool und_image = false;
    bool null_prompt = false;    // CFG unconditional branch: single null token
    int64_t pad_prompt_to = 0;   // pad prompt region to this many tokens
    int64_t pad_response_to = 0; // pad response region (response + eos inside)
};

struct Assembled {
    MixedSequence seq;
    MixedLayout layout;
};

// Layout:
//   [bos][<und> patch-slots </und>]?[prompt(+pads)][response(+eos,+pads)]?
//   [<gen> slots </gen>]?[eos (when no response carried it)]
// The loss mask covers response tokens and their eos; never prompts, markers,
// pads, or slots. Generation slots carry the per-scale block structure.
inline Assembled assemble(const Vocab& vocab, const AssembleOptions& opt) {
    const auto& sp = vocab.specials();
    Assembled out;
    auto& s = out.seq;
    auto push = [&](int32_t tok, Segment seg, int32_t scale, uint8_t loss) {
        s.tokens.push_back(tok);
        s.segments.push_back(seg);
        s.scale_index.push_back(scale);
        s.loss_mask.push_back(loss);
    };

    push(sp.bos, Segment::text, -1, 0);

    if (opt.und_image) {
        out.layout.und_start = s.size() + 1;
        push(sp.image_und_start, Segment::text, -1, 0);
        for (int i = 0; i < kUndPatches; ++i) push(sp.und_slot, Segment::image_und, -1, 0);
        push(sp.image_und_end, Segment::text, -1, 0);
    }

    out.layout.prompt_start = s.size();
    std::vector<int32_t> prompt_ids;
    if (opt.null_prompt) {
        prompt_ids = {sp.null_prompt};
    } else {
        prompt_ids = vocab.tokenize(opt.prompt);
    }
    for (int32_t id : prompt_ids) push(id, Segment::text, -1, 0);
    const int64_t prompt_cap = std::max<int64_t>(opt.pad_prompt_to, static_cast<int64_t>(prompt_ids.size()));
    for (int64_t i = static_cast<int64_t>(prompt_ids.size()); i < prompt_cap; ++i)
        push(sp.pad, Segment::text, -1, 0);
    out.layout.prompt_capacity = prompt_cap;

    bool eos_emitted = false;
    if (opt.response_text) {
        out.layout.response_start = s.size();
        const auto resp = vocab.tokenize(*opt.response_text);
        for (int32_t id : resp) push(id, Segment::text, -1, 1);
        out.layout.eos_pos = s.size();
        push(sp.eos, Segment::text, -1, 1);  // model must learn to stop
        eos_emitted = true;
        const int64_t cap = std::max<int64_t>(opt.pad_response_to,
                                              static_cast<int64_t>(resp.size()) + 1);
        for (int64_t i = static_cast<int64_t>(resp.size()) + 1; i < cap; ++i)
            push(sp.pad, Segment::text, -1, 0);
        out.layout.response_capacity = cap;
    }

    if (opt.gen_schedule) {
        opt.gen_schedule->validate();
        out.layout.gen_blocks = attn::segment_blocks(*opt.gen_schedule);
        push(sp.image_gen_start, Segment::text, -1, 0);
        out.layout.gen_start = s.size();
        for (size_t k = 0; k < out.layout.gen_blocks.size(); ++k)
            for (int64_t i = 0; i < out.layout.gen_blocks[k]; ++i)
                push(sp.gen_slot, Segment::image_gen, static_cast<int32_t>(k), 0);
        push(sp.image_gen_end, Segment::text, -1, 0);
    }

    if (!eos_emitted) {
        out.layout.eos_pos = s.size();
        push(sp.eos, Segment::text, -1, 0);
    }
    out.layout.total = s.size();
    return out;
}

struct ParsedParts {
    std::string prompt;
    bool null_prompt = false;
    std::optional<std::string> response_text;
    bool has_und_image = false;
    std::vector<int64_t> gen_blocks;  // empty when no generation segment
};

// Recovers the structured parts from a token stream. Rejects unbalanced or
// interleaved markers with the offending position.
inline ParsedParts parse(const Vocab& vocab, const MixedSequence& seq) {
    const auto& sp = vocab.specials();
    ParsedParts out;
    const int64_t n = seq.size();
    core::require(n >= 2, "parse: sequence too short");
    core::require(seq.tokens[0] == sp.bos, "parse: missing bos at position 0");

    auto fail_at = [&](int64_t pos, const std::string& what) {
        core::fail("parse: " + what + " at position " + std::to_string(pos));
    };

    int64_t i = 1;
    // Optional understanding block.
    if (i < n && seq.tokens[static_cast<size_t>(i)] == sp.image_und_start) {
        out.has_und_image = true;
        ++i;
        int64_t patches = 0;
        while (i < n && seq.tokens[static_cast<size_t>(i)] == sp.und_slot) ++i, ++patches;
        if (i >= n || seq.tokens[static_cast<size_t>(i)] != sp.image_und_end)
            fail_at(i, "understanding block not closed");
        if (patches != kUndPatches) fail_at(i, "unexpected understanding patch count");
        ++i;
    }

    // Prompt: text tokens until pad/response/gen/eos.
    std::vector<int32_t> prompt_ids;
    bool saw_null = false;
    while (i < n) {
        const int32_t t = seq.tokens[static_cast<size_t>(i)];
        if (t == sp.null_prompt) {
            saw_null = true;
            ++i;
            continue;
        }
        if (t >= vocab.text_range_end() || seq.loss_mask[static_cast<size_t>(i)]) break;
        prompt_ids.push_back(t);
        ++i;
    }
    while (i < n && seq.tokens[static_cast<size_t>(i)] == sp.pad) ++i;
    out.prompt = vocab.detokenize(prompt_ids);
    out.null_prompt = saw_null;

    // Optional response: masked text tokens ending in eos.
    if (i < n && seq.loss_mask[static_cast<size_t>(i)]) {
        std::vector<int32_t> resp;
        while (i < n && seq.loss_mask[static_cast<size_t>(i)] &&
               seq.tokens[static_cast<size_t>(i)] != sp.eos)
            resp.push_back(seq.tokens[static_cast<size_t>(i++)]);
        if (i >= n || seq.tokens[static_cast<size_t>(i)] != sp.eos)
            fail_at(i, "response not terminated by eos");
        ++i;
        while (i < n && seq.tokens[static_cast<size_t>(i)] == sp.pad) ++i;
        out.response_text = vocab.detokenize(resp);
    }

    // Optional generation block.
    if (i < n && seq.tokens[static_cast<size_t>(i)] == sp.image_gen_start) {
        const int64_t open_pos = i;
        ++i;
        int32_t cur_scale = -1;
        int64_t run = 0;
        while (i < n && seq.tokens[static_cast<size_t>(i)] == sp.gen_slot) {
            const int32_t sc = seq.scale_index[static_cast<size_t>(i)];
            if (sc != cur_scale) {
                if (sc != cur_scale + 1) fail_at(i, "generation scales out of order");
                if (cur_scale >= 0) out.gen_blocks.push_back(run);
                cur_scale = sc;
                run = 0;
            }
            ++run;
            ++i;
        }
        if (cur_scale >= 0) out.gen_blocks.push_back(run);
        if (i >= n || seq.tokens[static_cast<size_t>(i)] != sp.image_gen_end)
            fail_at(i < n ? i : open_pos, "generation block not closed");
        if (out.gen_blocks.empty()) fail_at(open_pos, "empty generation block");
        ++i;
    }

    // Trailing eos when the response did not carry one.
    if (i < n && seq.tokens[static_cast<size_t>(i)] == sp.eos) ++i;
    if (i != n) {
        // Leftover structure: nested/interleaved markers or stray tokens.
        fail_at(i, "unexpected token " + vocab.token_name(seq.tokens[static_cast<size_t>(i)]));
    }
    return out;
}

}  // namespace unigen::text
