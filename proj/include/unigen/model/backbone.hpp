#pragma once

#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "unigen/attn/masks.hpp"
#include "unigen/core/ops_nn.hpp"
#include "unigen/model/config.hpp"
#include "unigen/quant/bsq.hpp"
#include "unigen/text/mixed.hpp"

namespace unigen::model {

template <class T>
struct Param {
    std::string name;
    std::string group;
    core::Tensor<T> value;
    bool trainable = true;
};

inline const std::vector<std::string>& parameter_groups() {
    static const std::vector<std::string> kGroups = {"llm",         "visual_decoder", "und_proj",
                                                     "gen_in_proj", "gen_out_proj",   "text_head"};
    return kGroups;
}

template <class T>
class UnifiedModel {
public:
    ModelConfig cfg;
    std::vector<Param<T>> params;

    UnifiedModel() = default;

    UnifiedModel(ModelConfig config, uint64_t seed) : cfg(std::move(config)) {
        cfg.validate();
        core::Rng rng(core::mix_seed(seed, 0xbacbu));
        build_params(rng);
    }

    core::Tensor<T>& p(const std::string& name) {
        auto it = index_.find(name);
        core::require(it != index_.end(), "model: unknown parameter " + name);
        return params[it->second].value;
    }
    const core::Tensor<T>& p(const std::string& name) const {
        auto it = index_.find(name);
        core::require(it != index_.end(), "model: unknown parameter " + name);
        return params[it->second].value;
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    int64_t num_parameters() const {
        int64_t n = 0;
        for (const auto& pr : params) n += pr.value.size();
        return n;
    }

    // Frozen groups receive no gradient and no optimizer update.
    void apply_freeze(const std::set<std::string>& trainable_groups) {
        for (const auto& g : trainable_groups)
            core::require(std::find(parameter_groups().begin(), parameter_groups().end(), g) !=
                              parameter_groups().end(),
                          "apply_freeze: unknown parameter group \"" + g + "\"");
        for (auto& pr : params) pr.trainable = trainable_groups.count(pr.group) != 0;
    }

    std::set<std::string> trainable_groups() const {
        std::set<std::string> out;
        for (const auto& pr : params)
            if (pr.trainable) out.insert(pr.group);
        return out;
    }

    // Appends one finer scale: existing parameters are preserved bit-exactly,
    // new positional/scale rows are freshly initialized.
    void extend_schedule(const quant::ScaleSchedule& next, uint64_t seed) {
        next.validate();
        core::require(cfg.schedule.is_prefix_of(next) &&
                          next.num_scales() == cfg.schedule.num_scales() + 1,
                      "extend_schedule: new schedule must append exactly one finer scale");
        core::Rng rng(core::mix_seed(seed, 0xe27e4du));
        const int64_t g_old = cfg.schedule.total_positions();
        const int64_t g_new = next.total_positions();
        const int64_t seq_new = ModelConfig::required_seq(next);
        grow_rows("llm.pos_emb", seq_new, rng);
        grow_rows("gen_in.pos_emb", g_new, rng);
        grow_rows("gen_in.scale_emb", next.num_scales(), rng);
        grow_rows("vd.pos_emb", g_new, rng);
        grow_rows("vd.scale_emb", next.num_scales(), rng);
        (void)g_old;
        cfg.schedule = next;
        cfg.max_seq = seq_new;
    }

private:
    std::unordered_map<std::string, size_t> index_;

    void add(const std::string& name, const std::string& group, core::Tensor<T> value,
             bool /*unused*/ = false) {
        index_.emplace(name, params.size());
        params.push_back(Param<T>{name, group, std::move(value), true});
    }

    core::Tensor<T> init_normal(core::Shape shape, core::Rng& rng) {
        return core::Tensor<T>::trunc_randn(std::move(shape), rng, T(0.02));
    }

    void add_block(const std::string& prefix, const std::string& group, int d, int mlp, core::Rng& rng) {
        add(prefix + ".ln1.g", group, core::Tensor<T>::full({d}, T(1)));
        add(prefix + ".ln1.b", group, core::Tensor<T>::zeros({d}));
        for (const char* w : {"wq", "wk", "wv", "wo"}) add(prefix + ".attn." + w, group, init_normal({d, d}, rng));
        for (const char* b : {"bq", "bk", "bv", "bo"}) add(prefix + ".attn." + b, group, core::Tensor<T>::zeros({d}));
        add(prefix + ".ln2.g", group, core::Tensor<T>::full({d}, T(1)));
        add(prefix + ".ln2.b", group, core::Tensor<T>::zeros({d}));
        add(prefix + ".mlp.w1", group, init_normal({d, d * mlp}, rng));
        add(prefix + ".mlp.b1", group, core::Tensor<T>::zeros({d * mlp}));
        add(prefix + ".mlp.w2", group, init_normal({d * mlp, d}, rng));
        add(prefix + ".mlp.b2", group, core::Tensor<T>::zeros({d}));
    }

    void build_params(core::Rng& rng) {
        const int D = cfg.d_model, Dv = cfg.d_visdec;
        const int d_lat = cfg.bits();
        const int64_t G = cfg.schedule.total_positions();
        const int K = cfg.schedule.num_scales();

        // llm (theta)
        add("llm.tok_emb", "llm", init_normal({cfg.vocab_size, D}, rng));
        add("llm.pos_emb", "llm", init_normal({cfg.max_seq, D}, rng));
        for (int l = 0; l < cfg.n_layers_llm; ++l)
            add_block("llm." + std::to_string(l), "llm", D, cfg.mlp_ratio, rng);
        add("llm.f.g", "llm", core::Tensor<T>::full({D}, T(1)));
        add("llm.f.b", "llm", core::Tensor<T>::zeros({D}));

        // text head (zero init: uniform softmax at start)
        add("text_head.w", "text_head", core::Tensor<T>::zeros({D, cfg.vocab_size}));
        add("text_head.b", "text_head", core::Tensor<T>::zeros({cfg.vocab_size}));

        // understanding embedder + projector (two-layer, zero-init output)
        add("und.conv1.w", "und_proj", init_normal({cfg.und_c1, 3, 3, 3}, rng));
        add("und.conv1.b", "und_proj", core::Tensor<T>::zeros({cfg.und_c1}));
        add("und.conv2.w", "und_proj", init_normal({cfg.und_c2, cfg.und_c1, 3, 3}, rng));
        add("und.conv2.b", "und_proj", core::Tensor<T>::zeros({cfg.und_c2}));
        add("und.lin1.w", "und_proj", init_normal({cfg.und_c2, cfg.proj_hidden}, rng));
        add("und.lin1.b", "und_proj", core::Tensor<T>::zeros({cfg.proj_hidden}));
        add("und.lin2.w", "und_proj", core::Tensor<T>::zeros({cfg.proj_hidden, D}));
        add("und.lin2.b", "und_proj", core::Tensor<T>::zeros({D}));
        add("und.pos", "und_proj", init_normal({text::kUndPatches, D}, rng));

        // generation input projector (+ start/scale/position embeddings)
        add("gen_in.lin1.w", "gen_in_proj", init_normal({d_lat, cfg.proj_hidden}, rng));
        add("gen_in.lin1.b", "gen_in_proj", core::Tensor<T>::zeros({cfg.proj_hidden}));
        add("gen_in.lin2.w", "gen_in_proj", core::Tensor<T>::zeros({cfg.proj_hidden, D}));
        add("gen_in.lin2.b", "gen_in_proj", core::Tensor<T>::zeros({D}));
        add("gen_in.start", "gen_in_proj", init_normal({1, D}, rng));
        add("gen_in.scale_emb", "gen_in_proj", init_normal({K, D}, rng));
        add("gen_in.pos_emb", "gen_in_proj", init_normal({G, D}, rng));

        // generation output projector (LLM hidden -> visual decoder input)
        add("gen_out.lin1.w", "gen_out_proj", init_normal({D, cfg.proj_hidden}, rng));
        add("gen_out.lin1.b", "gen_out_proj", core::Tensor<T>::zeros({cfg.proj_hidden}));
        add("gen_out.lin2.w", "gen_out_proj", core::Tensor<T>::zeros({cfg.proj_hidden, Dv}));
        add("gen_out.lin2.b", "gen_out_proj", core::Tensor<T>::zeros({Dv}));

        // visual decoder (phi), including its bit head and code head
        add("vd.pos_emb", "visual_decoder", init_normal({G, Dv}, rng));
        add("vd.scale_emb", "visual_decoder", init_normal({K, Dv}, rng));
        for (int l = 0; l < cfg.n_layers_visdec; ++l)
            add_block("vd." + std::to_string(l), "visual_decoder", Dv, cfg.mlp_ratio, rng);
        add("vd.f.g", "visual_decoder", core::Tensor<T>::full({Dv}, T(1)));
        add("vd.f.b", "visual_decoder", core::Tensor<T>::zeros({Dv}));
        add("vd.ivc.w", "visual_decoder", core::Tensor<T>::zeros({Dv, d_lat}));
        add("vd.ivc.b", "visual_decoder", core::Tensor<T>::zeros({d_lat}));
        if (cfg.has_code_head()) {
            add("vd.code.w", "visual_decoder", core::Tensor<T>::zeros({Dv, cfg.code_vocab()}));
            add("vd.code.b", "visual_decoder", core::Tensor<T>::zeros({cfg.code_vocab()}));
        }
    }

    void grow_rows(const std::string& name, int64_t new_rows, core::Rng& rng) {
        core::Tensor<T>& old = p(name);
        core::require(old.rank() == 2 && old.dim(0) <= new_rows, "extend: cannot shrink " + name);
        if (old.dim(0) == new_rows) return;
        core::Tensor<T> grown = init_normal({new_rows, old.dim(1)}, rng);
        std::copy(old.v.begin(), old.v.end(), grown.v.begin());
        old = std::move(grown);
    }
};

// Model bound to a tape: one leaf var per parameter. Frozen parameters are
// registered without gradient tracking, which is what apply_freeze verifies.
template <class T>
struct BoundModel {
    UnifiedModel<T>* model = nullptr;
    core::Tape<T>* tape = nullptr;
    std::vector<core::Var<T>> vars;

    core::Var<T> operator[](const std::string& name) const {
        auto it = index->find(name);
        core::require(it != index->end(), "bound model: unknown parameter " + name);
        return vars[it->second];
    }
    std::shared_ptr<std::unordered_map<std::string, size_t>> index;
};

template <class T>
BoundModel<T> bind(UnifiedModel<T>& m, core::Tape<T>& tape) {
    BoundModel<T> b;
    b.model = &m;
    b.tape = &tape;
    b.index = std::make_shared<std::unordered_map<std::string, size_t>>();
    b.vars.reserve(m.params.size());
    for (size_t i = 0; i < m.params.size(); ++i) {
        b.index->emplace(m.params[i].name, i);
        b.vars.push_back(tape.leaf(m.params[i].value, m.params[i].trainable));
    }
    return b;
}

// Binds the model structure to caller-provided leaves (gradient checking
// perturbs parameters through these).
template <class T>
BoundModel<T> bind_vars(UnifiedModel<T>& m, core::Tape<T>& tape,
                        const std::vector<core::Var<T>>& vars) {
    core::require(vars.size() == m.params.size(), "bind_vars: parameter count mismatch");
    BoundModel<T> b;
    b.model = &m;
    b.tape = &tape;
    b.index = std::make_shared<std::unordered_map<std::string, size_t>>();
    for (size_t i = 0; i < m.params.size(); ++i) b.index->emplace(m.params[i].name, i);
    b.vars = vars;
    return b;
}

// ---- batched mixed-modal input ------------------------------------------------

// A batch of same-layout assembled sequences plus the per-segment payloads.
template <class T>
struct Batch {
    text::MixedLayout layout;
    int64_t batch = 0;
    std::vector<int32_t> tokens;  // batch * layout.total
    core::Tensor<T> und_images;   // [B,3,H,W]; empty when absent
    core::Tensor<T> gen_inputs;   // [B,G,d_lat] teacher-forcing ladder inputs
    std::vector<T> bit_targets;   // B*G*bits in {0,1}; empty when absent
    // Text positions with next-token targets: logits at flat position p
    // predict token target_tok[i] (already shifted by one).
    std::vector<int32_t> text_pos;
    std::vector<int32_t> text_tok;

    bool has_und() const { return und_images.size() > 0; }
    bool has_gen() const { return layout.gen_start >= 0; }
    int64_t gen_len() const {
        int64_t g = 0;
        for (int64_t b : layout.gen_blocks) g += b;
        return g;
    }
};

template <class T>
struct ForwardOutputs {
    core::Var<T> hidden;      // [B,T,D] after the final norm
    core::Var<T> bit_logits;  // [B,G,bits] when the batch has a generation block
    core::Var<T> code_logits; // [B,G,2^bits] (trunk-detached) when enabled
};

namespace detail {

template <class T>
core::Var<T> two_layer(const BoundModel<T>& bm, const std::string& prefix, core::Var<T> x) {
    using namespace core;
    auto h = silu(add_bias(matmul(x, bm[prefix + ".lin1.w"]), bm[prefix + ".lin1.b"]));
    return add_bias(matmul(h, bm[prefix + ".lin2.w"]), bm[prefix + ".lin2.b"]);
}

template <class T>
core::Var<T> transformer_block(const BoundModel<T>& bm, const std::string& prefix, core::Var<T> x,
                               const std::shared_ptr<const std::vector<int32_t>>& bounds,
                               int n_heads) {
    using namespace core;
    const int64_t B = x.val().dim(0), Tn = x.val().dim(1), D = x.val().dim(2);
    const int64_t hd = D / n_heads;
    auto h = layer_norm(x, bm[prefix + ".ln1.g"], bm[prefix + ".ln1.b"]);
    auto heads = [&](const char* w, const char* b) {
        auto y = add_bias(matmul(h, bm[prefix + ".attn." + w]), bm[prefix + ".attn." + b]);
        return permute(reshape(y, {B, Tn, n_heads, hd}), {0, 2, 1, 3});  // [B,H,T,hd]
    };
    auto q = heads("wq", "bq"), k = heads("wk", "bk"), v = heads("wv", "bv");
    auto scores = scale(matmul(q, k, false, true), T(1.0 / std::sqrt(static_cast<double>(hd))));
    auto probs = masked_softmax(scores, bounds);
    auto ctx = reshape(permute(matmul(probs, v), {0, 2, 1, 3}), {B, Tn, D});
    auto att = add_bias(matmul(ctx, bm[prefix + ".attn.wo"]), bm[prefix + ".attn.bo"]);
    x = add(x, att);
    auto h2 = layer_norm(x, bm[prefix + ".ln2.g"], bm[prefix + ".ln2.b"]);
    auto u = silu(add_bias(matmul(h2, bm[prefix + ".mlp.w1"]), bm[prefix + ".mlp.b1"]));
    auto o = add_bias(matmul(u, bm[prefix + ".mlp.w2"]), bm[prefix + ".mlp.b2"]);
    return add(x, o);
}

template <class T>
core::Var<T> trunk(const BoundModel<T>& bm, const std::string& prefix, core::Var<T> x,
                   const std::shared_ptr<const std::vector<int32_t>>& bounds, int n_layers,
                   int n_heads) {
    for (int l = 0; l < n_layers; ++l)
        x = transformer_block(bm, prefix + "." + std::to_string(l), x, bounds, n_heads);
    return core::layer_norm(x, bm[prefix + ".f.g"], bm[prefix + ".f.b"]);
}

}  // namespace detail

// Understanding-side image path: conv stack, 4x4 pooled patch grid, two-layer
// projector, learned patch positions. Returns [B, kUndPatches, D].
template <class T>
core::Var<T> embed_und_image(const BoundModel<T>& bm, core::Var<T> images) {
    using namespace core;
    const int64_t B = images.val().dim(0);
    auto c1 = silu(conv2d(images, bm["und.conv1.w"], bm["und.conv1.b"], 2, 1));
    auto c2 = silu(conv2d(c1, bm["und.conv2.w"], bm["und.conv2.b"], 2, 1));
    auto pooled = avg_pool_to(c2, 4, 4);  // [B,C,4,4]
    const int64_t C = pooled.val().dim(1);
    auto patches = permute(reshape(pooled, {B, C, 16}), {0, 2, 1});  // [B,16,C]
    auto proj = detail::two_layer(bm, "und", patches);
    return add_broadcast_rows(proj, bm["und.pos"]);
}

// Mixed-modal embedding per the interleaved layout. Token embeddings fill
// text/marker positions; understanding patches and generation-ladder inputs
// replace their slot rows; positional (and per-scale) embeddings are added.
template <class T>
core::Var<T> embed_mixed(const BoundModel<T>& bm, const Batch<T>& batch) {
    using namespace core;
    const auto& lay = batch.layout;
    const int64_t B = batch.batch, Tn = lay.total;
    const ModelConfig& cfg = bm.model->cfg;
    core::require(static_cast<int64_t>(batch.tokens.size()) == B * Tn,
                  "embed_mixed: token buffer does not match layout");
    core::require(Tn <= cfg.max_seq, "embed_mixed: sequence longer than positional table");

    auto emb = reshape(gather_rows(bm["llm.tok_emb"], batch.tokens), {B, Tn, cfg.d_model});

    // Zero the slot rows; their content comes from the payload projections.
    std::vector<T> keep(static_cast<size_t>(Tn), T(1));
    if (lay.und_start >= 0)
        for (int64_t i = 0; i < text::kUndPatches; ++i) keep[static_cast<size_t>(lay.und_start + i)] = T(0);
    if (lay.gen_start >= 0)
        for (int64_t i = 0; i < batch.gen_len(); ++i) keep[static_cast<size_t>(lay.gen_start + i)] = T(0);
    emb = row_mask_scale(emb, keep);

    if (lay.und_start >= 0) {
        core::require(batch.has_und(), "embed_mixed: layout declares an understanding image but none was provided");
        auto und = embed_und_image(bm, bm.tape->constant(batch.und_images));
        emb = add_slice_rows(emb, und, lay.und_start);
    }

    if (lay.gen_start >= 0) {
        const int64_t G = batch.gen_len();
        core::require(batch.gen_inputs.size() == B * G * cfg.bits(),
                      "embed_mixed: generation inputs do not match layout");
        const int64_t p0 = lay.gen_blocks[0];
        auto gin = bm.tape->constant(batch.gen_inputs);
        core::Var<T> content;
        auto start = broadcast_to_batch(bm["gen_in.start"], B);
        if (p0 > 1) {
            // General schedules with a multi-token first scale reuse the
            // start embedding across the whole first block.
            std::vector<core::Var<T>> starts(static_cast<size_t>(p0), start);
            start = concat_rows(starts);
        }
        if (G > p0) {
            auto rest = detail::two_layer(bm, "gen_in",
                                          slice_rows(reshape(gin, {B, G, cfg.bits()}), p0, G - p0));
            content = concat_rows<T>({start, rest});
        } else {
            content = start;
        }
        // Per-position and per-scale embeddings over the generation block.
        std::vector<int32_t> pos_ids, scale_ids;
        for (size_t k = 0; k < lay.gen_blocks.size(); ++k)
            for (int64_t i = 0; i < lay.gen_blocks[k]; ++i) {
                pos_ids.push_back(static_cast<int32_t>(pos_ids.size()));
                scale_ids.push_back(static_cast<int32_t>(k));
            }
        content = add_broadcast_rows(content, gather_rows(bm["gen_in.pos_emb"], pos_ids));
        content = add_broadcast_rows(content, gather_rows(bm["gen_in.scale_emb"], scale_ids));
        emb = add_slice_rows(emb, content, lay.gen_start);
    }

    return add_broadcast_rows(emb, slice_rows(bm["llm.pos_emb"], 0, Tn));
}

// Standard pre-norm causal transformer over the mixed sequence.
template <class T>
core::Var<T> llm_forward(const BoundModel<T>& bm, core::Var<T> embeddings,
                         const std::shared_ptr<const std::vector<int32_t>>& causal_bounds) {
    core::require(static_cast<int64_t>(causal_bounds->size()) == embeddings.val().dim(1),
                  "llm_forward: mask size does not match sequence");
    auto h = detail::trunk(bm, "llm", embeddings, causal_bounds, bm.model->cfg.n_layers_llm,
                           bm.model->cfg.n_heads);
    if (!h.val().finite())
        throw std::runtime_error("llm_forward: non-finite activation in final hidden states");
    return h;
}

// Text logits at every position (used only where targets exist).
template <class T>
core::Var<T> text_logits_full(const BoundModel<T>& bm, core::Var<T> hidden) {
    return core::add_bias(core::matmul(hidden, bm["text_head.w"]), bm["text_head.b"]);
}

// Text logits at selected flat positions of [B*T, D].
template <class T>
core::Var<T> text_logits_at(const BoundModel<T>& bm, core::Var<T> hidden,
                            const std::vector<int32_t>& flat_positions) {
    using namespace core;
    const int64_t B = hidden.val().dim(0), Tn = hidden.val().dim(1), D = hidden.val().dim(2);
    auto flat = reshape(hidden, {B * Tn, D});
    auto sel = gather_rows(flat, flat_positions);
    return add_bias(matmul(sel, bm["text_head.w"]), bm["text_head.b"]);
}

// Visual decoder over the generation positions: LLM hiddens through the
// output projector, block-causal attention, per-bit logits (and, when the
// bit width allows, explicit-vocabulary code logits off a detached trunk).
template <class T>
ForwardOutputs<T> visual_decoder_forward(const BoundModel<T>& bm, core::Var<T> hidden,
                                         const text::MixedLayout& lay) {
    using namespace core;
    const ModelConfig& cfg = bm.model->cfg;
    core::require(lay.gen_start >= 0 && !lay.gen_blocks.empty(),
                  "visual_decoder_forward: layout has no generation block");
    int64_t G = 0;
    for (int64_t b : lay.gen_blocks) G += b;
    core::require(lay.gen_start + G <= hidden.val().dim(1),
                  "visual_decoder_forward: generation block exceeds sequence");

    auto gen_h = slice_rows(hidden, lay.gen_start, G);
    auto x = detail::two_layer(bm, "gen_out", gen_h);
    std::vector<int32_t> pos_ids, scale_ids;
    for (size_t k = 0; k < lay.gen_blocks.size(); ++k)
        for (int64_t i = 0; i < lay.gen_blocks[k]; ++i) {
            pos_ids.push_back(static_cast<int32_t>(pos_ids.size()));
            scale_ids.push_back(static_cast<int32_t>(k));
        }
    x = add_broadcast_rows(x, gather_rows(bm["vd.pos_emb"], pos_ids));
    x = add_broadcast_rows(x, gather_rows(bm["vd.scale_emb"], scale_ids));

    auto mask = attn::build_block_causal_mask(lay.gen_blocks);
    auto h = detail::trunk(bm, "vd", x, mask.row_bounds(), cfg.n_layers_visdec, cfg.n_heads_visdec);

    ForwardOutputs<T> out;
    out.bit_logits = add_bias(matmul(h, bm["vd.ivc.w"]), bm["vd.ivc.b"]);
    if (cfg.has_code_head())
        out.code_logits = add_bias(matmul(stopgrad(h), bm["vd.code.w"]), bm["vd.code.b"]);
    return out;
}

// Full mixed forward: embeddings -> causal LLM -> (visual decoder on the
// generation block when present).
template <class T>
ForwardOutputs<T> forward_mixed(const BoundModel<T>& bm, const Batch<T>& batch) {
    auto emb = embed_mixed(bm, batch);
    auto causal = attn::build_causal_mask(batch.layout.total);
    auto h = llm_forward(bm, emb, causal.row_bounds());
    ForwardOutputs<T> out;
    out.hidden = h;
    if (batch.has_gen()) {
        auto vd = visual_decoder_forward(bm, h, batch.layout);
        out.bit_logits = vd.bit_logits;
        out.code_logits = vd.code_logits;
    }
    return out;
}

// ---- losses -----------------------------------------------------------------

// Mean over positions of the summed per-bit binary cross-entropy. This is the
// negative log-likelihood of the factorized Bernoulli image head, so the same
// expression realizes log pi^img for preference training.
template <class T>
core::Var<T> ivc_loss(core::Var<T> bit_logits, const std::vector<T>& targets) {
    using namespace core;
    const int64_t n = bit_logits.val().size();
    const int64_t bits = bit_logits.val().dim(-1);
    core::require(static_cast<int64_t>(targets.size()) == n,
                  "ivc_loss: target size mismatch " + std::to_string(targets.size()) + " vs " +
                      std::to_string(n));
    for (const T& t : targets)
        core::require(t == T(0) || t == T(1), "ivc_loss: targets must be 0 or 1");
    auto tgt = bit_logits.tape->constant(Tensor<T>(bit_logits.val().shape, std::vector<T>(targets)));
    // BCE(logit x, target t) = softplus(x) - x*t, summed over bits.
    auto per_elem = sub(softplus(bit_logits), mul(bit_logits, tgt));
    const int64_t positions = n / bits;
    return scale(sum_all(per_elem), T(1) / static_cast<T>(positions));
}

// Mean cross-entropy over pre-aligned (logit row, target token) pairs.
template <class T>
core::Var<T> text_ce_loss(core::Var<T> logits, const std::vector<int32_t>& targets) {
    using namespace core;
    core::require(!targets.empty(), "text_ce_loss: empty target set");
    core::require(logits.val().rank() == 2 &&
                      logits.val().dim(0) == static_cast<int64_t>(targets.size()),
                  "text_ce_loss: logits/target count mismatch");
    auto lsm = log_softmax(logits);
    auto picked = select_cols(lsm, targets);
    return scale(sum_all(picked), T(-1) / static_cast<T>(targets.size()));
}

// Spec-shaped overload: full logits [B,T,V], target tokens and a loss mask
// over target positions; logits at position t-1 predict the token at t.
template <class T>
core::Var<T> text_ce_loss_masked(const BoundModel<T>& bm, core::Var<T> hidden,
                                 const std::vector<int32_t>& tokens,
                                 const std::vector<uint8_t>& mask) {
    const int64_t B = hidden.val().dim(0), Tn = hidden.val().dim(1);
    core::require(static_cast<int64_t>(tokens.size()) == B * Tn &&
                      tokens.size() == mask.size(),
                  "text_ce_loss_masked: buffer sizes mismatch");
    std::vector<int32_t> pos, tok;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < Tn; ++t)
            if (mask[static_cast<size_t>(b * Tn + t)]) {
                core::require(t > 0, "text_ce_loss_masked: target at position 0 has no context");
                pos.push_back(static_cast<int32_t>(b * Tn + t - 1));
                tok.push_back(tokens[static_cast<size_t>(b * Tn + t)]);
            }
    core::require(!pos.empty(), "text_ce_loss_masked: empty mask");
    auto logits = text_logits_at(bm, hidden, pos);
    return text_ce_loss(logits, tok);
}

// Cross-entropy of the explicit-vocabulary code head against code indices
// (the bit pattern read as an integer, low bit first).
template <class T>
core::Var<T> code_ce_loss(core::Var<T> code_logits, const std::vector<T>& bit_targets, int bits) {
    std::vector<int32_t> codes;
    const int64_t positions = static_cast<int64_t>(bit_targets.size()) / bits;
    codes.reserve(static_cast<size_t>(positions));
    for (int64_t p = 0; p < positions; ++p) {
        int32_t c = 0;
        for (int b = 0; b < bits; ++b)
            if (bit_targets[static_cast<size_t>(p * bits + b)] != T(0)) c |= (1 << b);
        codes.push_back(c);
    }
    using namespace core;
    auto flat = reshape(code_logits, {positions, code_logits.val().dim(-1)});
    return text_ce_loss(flat, codes);
}

}  // namespace unigen::model
