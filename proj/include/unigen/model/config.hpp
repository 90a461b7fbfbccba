#pragma once

#include <cstdint>

#include "unigen/quant/schedule.hpp"
#include "unigen/text/mixed.hpp"

namespace unigen::model {

// One unified model: causal LLM trunk, understanding embedder + projector,
// two generation projectors, block-causal visual decoder, text head, per-bit
// image head and (for small bit widths) an explicit-vocabulary code head.
struct ModelConfig {
    int d_model = 64;
    int n_layers_llm = 4;
    int n_heads = 4;
    int d_visdec = 64;
    int n_layers_visdec = 4;
    int n_heads_visdec = 4;
    int mlp_ratio = 4;
    int proj_hidden = 64;  // width of the two-layer projectors
    int und_c1 = 16, und_c2 = 32;
    int32_t vocab_size = 0;
    quant::ScaleSchedule schedule;
    int64_t max_seq = 0;
    double dropout = 0.0;

    int bits() const { return schedule.latent_dim; }
    bool has_code_head() const { return schedule.latent_dim <= 10; }
    int32_t code_vocab() const { return has_code_head() ? (1 << schedule.latent_dim) : 0; }

    // Longest assembled layout: bos + und block + prompt + response + markers
    // + generation slots + eos, with headroom.
    static int64_t required_seq(const quant::ScaleSchedule& s) {
        return 40 + text::kUndPatches + s.total_positions();
    }

    void validate() const {
        core::require(d_model >= 1 && d_visdec >= 1, "config: model widths must be >= 1");
        core::require(n_heads >= 1 && d_model % n_heads == 0,
                      "config: d_model must be divisible by n_heads");
        core::require(n_heads_visdec >= 1 && d_visdec % n_heads_visdec == 0,
                      "config: d_visdec must be divisible by n_heads_visdec");
        core::require(n_layers_llm >= 1 && n_layers_visdec >= 1, "config: layer counts must be >= 1");
        core::require(vocab_size >= 2, "config: vocab_size must be set");
        core::require(max_seq >= required_seq(schedule), "config: max_seq too small for schedule");
        core::require(dropout == 0.0, "config: dropout is reserved and must be 0 in this build");
        schedule.validate();
    }

    static ModelConfig desk(int32_t vocab, const quant::ScaleSchedule& sched) {
        ModelConfig c;
        c.vocab_size = vocab;
        c.schedule = sched;
        // Leave room for the extended (hi-res) ladder so positional tables
        // only ever grow by appended rows.
        c.max_seq = required_seq(sched);
        return c;
    }

    static ModelConfig tiny(int32_t vocab, const quant::ScaleSchedule& sched) {
        // Under 10k parameters; used by gradient-fidelity checks.
        ModelConfig c;
        c.d_model = 8;
        c.n_layers_llm = 1;
        c.n_heads = 2;
        c.d_visdec = 8;
        c.n_layers_visdec = 1;
        c.n_heads_visdec = 2;
        c.mlp_ratio = 2;
        c.proj_hidden = 8;
        c.und_c1 = 4;
        c.und_c2 = 8;
        c.vocab_size = vocab;
        c.schedule = sched;
        c.max_seq = required_seq(sched);
        return c;
    }
};

}  // namespace unigen::model
