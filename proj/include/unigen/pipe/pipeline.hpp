#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unigen/dpo/dpo.hpp"
#include "unigen/gen/sampling.hpp"
#include "unigen/pipe/batch.hpp"
#include "unigen/pipe/checkpoint.hpp"
#include "unigen/pipe/metrics.hpp"
#include "unigen/pipe/optimizer.hpp"

namespace unigen::pipe {

// Thrown on non-finite losses; the CLI maps it to exit code 3. The last
// periodic checkpoint stays on disk untouched.
struct NumericalAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> kOrder = {
        "stage1_tok",    "stage2_mixed",  "stage3_sft_lo", "stage3_dpo_lo",
        "stage3_sft_hi", "stage3_dpo_hi", "stage_edit"};
    return kOrder;
}

struct StageConfig {
    std::string stage;
    double lr = 5e-5;
    std::string lr_schedule = "cosine";
    double warmup_ratio = 0.1;
    double weight_decay = 0.0;
    int64_t steps = 100;
    int64_t batch_size = 32;
    std::string resolution = "lo";  // lo=32px, hi=64px
    double beta = 0.1;              // preference phases
    double commit_weight = 0.25;    // tokenizer stage
    double lambda_img = 1.0;        // image-loss weight in mixed batches
    double null_prompt_rate = 0.1;  // fraction trained on the null prompt
    bool policy_losers = false;     // sample losers from the current policy
    int64_t checkpoint_every = 500;

    void validate() const {
        core::require(std::find(stage_order().begin(), stage_order().end(), stage) !=
                          stage_order().end(),
                      "stage config: unknown stage \"" + stage + "\"");
        core::require(steps >= 1, "stage config: steps must be >= 1");
        core::require(batch_size >= 1, "stage config: batch_size must be >= 1");
        core::require(warmup_ratio >= 0.0 && warmup_ratio < 1.0, "stage config: bad warmup ratio");
        core::require(lr > 0.0, "stage config: lr must be > 0");
        core::require(lr_schedule == "cosine", "stage config: only the cosine schedule is supported");
        core::require(resolution == "lo" || resolution == "hi", "stage config: resolution must be lo|hi");
        core::require(beta > 0.0, "stage config: beta must be > 0");
        const bool hi_stage = stage == "stage3_sft_hi" || stage == "stage3_dpo_hi" || stage == "stage_edit";
        core::require(hi_stage == (resolution == "hi"),
                      "stage config: resolution does not match stage " + stage);
    }

    int image_resolution() const { return resolution == "hi" ? 64 : 32; }

    // Desk-scale analog of the published per-stage settings.
    static StageConfig desk(const std::string& stage) {
        StageConfig c;
        c.stage = stage;
        if (stage == "stage1_tok") {
            c.lr = 1e-3;
            c.steps = 2000;
        } else if (stage == "stage2_mixed") {
            c.lr = 5e-5;
            c.steps = 1000;
        } else if (stage == "stage3_sft_lo") {
            c.lr = 5e-5;
            c.steps = 2000;
        } else if (stage == "stage3_dpo_lo") {
            c.lr = 1e-6;
            c.steps = 500;
        } else if (stage == "stage3_sft_hi") {
            c.lr = 5e-5;
            c.steps = 1500;
            c.resolution = "hi";
        } else if (stage == "stage3_dpo_hi") {
            c.lr = 1e-6;
            c.steps = 300;
            c.resolution = "hi";
        } else if (stage == "stage_edit") {
            c.lr = 5e-5;
            c.steps = 500;
            c.resolution = "hi";
        } else {
            core::fail("stage config: unknown stage \"" + stage + "\"");
        }
        return c;
    }

    nlohmann::json to_json() const {
        return {{"stage", stage},
                {"lr", lr},
                {"lr_schedule", lr_schedule},
                {"warmup_ratio", warmup_ratio},
                {"weight_decay", weight_decay},
                {"steps", steps},
                {"batch_size", batch_size},
                {"resolution", resolution},
                {"beta", beta},
                {"commit_weight", commit_weight},
                {"lambda_img", lambda_img},
                {"null_prompt_rate", null_prompt_rate},
                {"policy_losers", policy_losers},
                {"checkpoint_every", checkpoint_every}};
    }

    static StageConfig from_json(const nlohmann::json& j) {
        StageConfig c;
        c.stage = j.at("stage").get<std::string>();
        StageConfig base = desk(c.stage);
        c = base;
        for (const auto& [key, val] : j.items()) {
            if (key == "stage") continue;
            else if (key == "lr") c.lr = val.get<double>();
            else if (key == "lr_schedule") c.lr_schedule = val.get<std::string>();
            else if (key == "warmup_ratio") c.warmup_ratio = val.get<double>();
            else if (key == "weight_decay") c.weight_decay = val.get<double>();
            else if (key == "steps") c.steps = val.get<int64_t>();
            else if (key == "batch_size") c.batch_size = val.get<int64_t>();
            else if (key == "resolution") c.resolution = val.get<std::string>();
            else if (key == "beta") c.beta = val.get<double>();
            else if (key == "commit_weight") c.commit_weight = val.get<double>();
            else if (key == "lambda_img") c.lambda_img = val.get<double>();
            else if (key == "null_prompt_rate") c.null_prompt_rate = val.get<double>();
            else if (key == "policy_losers") c.policy_losers = val.get<bool>();
            else if (key == "checkpoint_every") c.checkpoint_every = val.get<int64_t>();
            else core::fail("stage config: unknown key \"" + key + "\"");
        }
        c.validate();
        return c;
    }
};

// Procedural corpora with the scaled-down stage emphasis.
struct Corpora {
    std::vector<data::Record> tok_images;  // 20k, stage 1
    std::vector<data::Record> qa;          // 10k, stage 2
    std::vector<data::Record> t2i_mixed;   // 2k, stage 2
    std::vector<data::Record> t2i_lo;      // 20k, stage 3 sft lo
    std::vector<data::Record> t2i_hi;      // 20k, stage 3 sft hi
    std::vector<data::Record> pref_lo;     // 2k prompts, dpo lo
    std::vector<data::Record> pref_hi;     // 2k prompts, dpo hi
    std::vector<data::Record> edits;       // 2k, editing stage

    static Corpora standard(uint64_t seed) {
        Corpora c;
        c.tok_images = data::make_corpus(data::RecordKind::t2i, 20000, core::mix_seed(seed, 1), 32);
        c.qa = data::make_corpus(data::RecordKind::understanding_qa, 10000, core::mix_seed(seed, 2), 32);
        c.t2i_mixed = data::make_corpus(data::RecordKind::t2i, 2000, core::mix_seed(seed, 3), 32);
        c.t2i_lo = data::make_corpus(data::RecordKind::t2i, 20000, core::mix_seed(seed, 4), 32);
        c.t2i_hi = data::make_corpus(data::RecordKind::t2i, 20000, core::mix_seed(seed, 5), 64);
        c.pref_lo = data::make_corpus(data::RecordKind::preference_prompt, 2000, core::mix_seed(seed, 6), 32);
        c.pref_hi = data::make_corpus(data::RecordKind::preference_prompt, 2000, core::mix_seed(seed, 7), 64);
        c.edits = data::make_corpus(data::RecordKind::editing, 2000, core::mix_seed(seed, 8), 64);
        return c;
    }

    // Smaller sizes for smoke runs.
    static Corpora smoke(uint64_t seed) {
        Corpora c;
        c.tok_images = data::make_corpus(data::RecordKind::t2i, 256, core::mix_seed(seed, 1), 32);
        c.qa = data::make_corpus(data::RecordKind::understanding_qa, 256, core::mix_seed(seed, 2), 32);
        c.t2i_mixed = data::make_corpus(data::RecordKind::t2i, 128, core::mix_seed(seed, 3), 32);
        c.t2i_lo = data::make_corpus(data::RecordKind::t2i, 256, core::mix_seed(seed, 4), 32);
        c.t2i_hi = data::make_corpus(data::RecordKind::t2i, 256, core::mix_seed(seed, 5), 64);
        c.pref_lo = data::make_corpus(data::RecordKind::preference_prompt, 64, core::mix_seed(seed, 6), 32);
        c.pref_hi = data::make_corpus(data::RecordKind::preference_prompt, 64, core::mix_seed(seed, 7), 64);
        c.edits = data::make_corpus(data::RecordKind::editing, 256, core::mix_seed(seed, 8), 64);
        return c;
    }
};

// Everything one training run owns.
template <class T>
struct TrainState {
    text::Vocab vocab;
    model::UnifiedModel<T> model;
    quant::Tokenizer<T> tokenizer;
    AdamW<T> optimizer;
    std::vector<std::string> completed;
    std::string current_stage;
    int64_t steps_done = 0;
    core::Rng rng;
    uint64_t master_seed = 0;
    std::vector<std::pair<std::string, core::Tensor<T>>> ref_params;  // dpo reference
    MetricsWriter* metrics = nullptr;

    static TrainState fresh(uint64_t seed) {
        TrainState s;
        s.master_seed = seed;
        auto sched = quant::ScaleSchedule::desk_lo();
        auto cfg = model::ModelConfig::desk(s.vocab.size(), sched);
        s.model = model::UnifiedModel<T>(cfg, core::mix_seed(seed, 0xabcdu));
        s.tokenizer = quant::Tokenizer<T>(sched, core::mix_seed(seed, 0x70cdu));
        s.rng = core::Rng(core::mix_seed(seed, 0x517a7eu));
        return s;
    }

    bool stage_completed(const std::string& stage) const {
        return std::find(completed.begin(), completed.end(), stage) != completed.end();
    }

    Checkpoint<T> to_checkpoint() const {
        Checkpoint<T> ck;
        ck.config = model.cfg;
        ck.model_params = model.params;
        ck.tok_schedule = tokenizer.schedule;
        ck.tok_calibration = tokenizer.calibration;
        ck.tok_c1 = tokenizer.channels1();
        ck.tok_c2 = tokenizer.channels2();
        ck.tok_trainable = !tokenizer.params.empty() && tokenizer.params[0].trainable;
        for (const auto& p : tokenizer.params) ck.tok_params.emplace_back(p.name, p.value);
        ck.has_optimizer = optimizer.step_count() > 0;
        ck.opt_step = optimizer.step_count();
        if (ck.has_optimizer) {
            // Deterministic order: follow model then tokenizer parameter order.
            for (const auto& p : model.params) {
                auto it = optimizer.state().find(p.name);
                if (it != optimizer.state().end()) ck.opt_state.emplace_back(p.name, it->second);
            }
            for (const auto& p : tokenizer.params) {
                auto it = optimizer.state().find(p.name);
                if (it != optimizer.state().end()) ck.opt_state.emplace_back(p.name, it->second);
            }
        }
        ck.completed_stages = completed;
        ck.current_stage = current_stage;
        ck.steps_done = steps_done;
        ck.rng_state = rng.state();
        ck.ref_params = ref_params;
        return ck;
    }

    static TrainState from_checkpoint(Checkpoint<T> ck, uint64_t seed) {
        TrainState s;
        s.master_seed = seed;
        s.model = model::UnifiedModel<T>(ck.config, 0);
        core::require(s.model.params.size() == ck.model_params.size(),
                      "checkpoint: parameter count does not match the architecture");
        for (size_t i = 0; i < ck.model_params.size(); ++i) {
            core::require(s.model.params[i].name == ck.model_params[i].name,
                          "checkpoint: parameter order mismatch at " + ck.model_params[i].name);
            s.model.params[i] = std::move(ck.model_params[i]);
        }
        s.tokenizer = quant::Tokenizer<T>(ck.tok_schedule, 0, ck.tok_c1, ck.tok_c2);
        s.tokenizer.calibration = ck.tok_calibration;
        core::require(s.tokenizer.params.size() == ck.tok_params.size(),
                      "checkpoint: tokenizer parameter count mismatch");
        for (size_t i = 0; i < ck.tok_params.size(); ++i) {
            core::require(s.tokenizer.params[i].name == ck.tok_params[i].first,
                          "checkpoint: tokenizer parameter order mismatch");
            s.tokenizer.params[i].value = std::move(ck.tok_params[i].second);
        }
        s.tokenizer.set_trainable(ck.tok_trainable);
        if (ck.has_optimizer) {
            std::unordered_map<std::string, typename AdamW<T>::Moments> st;
            for (auto& [name, mo] : ck.opt_state) st.emplace(name, std::move(mo));
            s.optimizer.restore(ck.opt_step, std::move(st));
        }
        s.completed = std::move(ck.completed_stages);
        s.current_stage = std::move(ck.current_stage);
        s.steps_done = ck.steps_done;
        s.rng = core::Rng(0);
        s.rng.set_state(ck.rng_state);
        s.ref_params = std::move(ck.ref_params);
        return s;
    }
};

namespace detail {

template <class T>
std::vector<data::Record> pick_records(const std::vector<data::Record>& corpus, int64_t n,
                                       uint64_t seed, const std::string& stage, int64_t step) {
    core::require(!corpus.empty(), "training: corpus for stage " + stage + " is empty");
    std::vector<data::Record> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const uint64_t h = core::mix_seed(seed, std::hash<std::string>{}(stage),
                                          static_cast<uint64_t>(step), static_cast<uint64_t>(i));
        out.push_back(corpus[static_cast<size_t>(h % corpus.size())]);
    }
    return out;
}

template <class T>
std::vector<OptSlot<T>> model_slots(model::UnifiedModel<T>& m, const model::BoundModel<T>& bm,
                                    core::Tape<T>& tape) {
    std::vector<OptSlot<T>> slots;
    for (size_t i = 0; i < m.params.size(); ++i) {
        if (!m.params[i].trainable) continue;
        const auto& var = bm.vars[i];
        slots.push_back({m.params[i].name, &m.params[i].value,
                         tape.has_grad(var.id) ? &tape.grad(var.id) : nullptr});
    }
    return slots;
}

template <class T>
std::vector<OptSlot<T>> tokenizer_slots(quant::Tokenizer<T>& tok,
                                        const typename quant::Tokenizer<T>::Bound& bt,
                                        core::Tape<T>& tape) {
    std::vector<OptSlot<T>> slots;
    for (size_t i = 0; i < tok.params.size(); ++i) {
        if (!tok.params[i].trainable) continue;
        const auto& var = bt.vars[i];
        slots.push_back({tok.params[i].name, &tok.params[i].value,
                         tape.has_grad(var.id) ? &tape.grad(var.id) : nullptr});
    }
    return slots;
}

inline void check_finite(double loss, const std::string& what) {
    if (!std::isfinite(loss)) throw NumericalAbort(what + ": non-finite loss");
}

template <class T>
core::Tensor<T> render_batch(const std::vector<data::Record>& recs) {
    const int res = recs[0].spec.resolution;
    core::Tensor<T> out({static_cast<int64_t>(recs.size()), 3, res, res});
    for (size_t i = 0; i < recs.size(); ++i) {
        auto img = data::render(recs[i].spec, recs[i].seed).template cast<T>();
        std::copy(img.v.begin(), img.v.end(), out.data() + static_cast<int64_t>(i) * img.size());
    }
    return out;
}

}  // namespace detail

// ---- evaluation ------------------------------------------------------------------

struct EvalReport {
    double gen_color_accuracy = 0, gen_shape_accuracy = 0, gen_cell_accuracy = 0, gen_all_accuracy = 0;
    double qa_accuracy = 0;
    double recon_psnr = 0;
    std::optional<double> dpo_margin_rate;
    std::optional<double> edit_accuracy;

    nlohmann::json to_json() const {
        nlohmann::json j{{"gen_color_accuracy", gen_color_accuracy},
                         {"gen_shape_accuracy", gen_shape_accuracy},
                         {"gen_cell_accuracy", gen_cell_accuracy},
                         {"gen_all_accuracy", gen_all_accuracy},
                         {"qa_accuracy", qa_accuracy},
                         {"recon_psnr", recon_psnr}};
        if (dpo_margin_rate) j["dpo_margin_rate"] = *dpo_margin_rate;
        if (edit_accuracy) j["edit_accuracy"] = *edit_accuracy;
        return j;
    }
};

// Greedy answer decode for understanding QA: batched, token by token.
template <class T>
std::vector<std::string> decode_answers(TrainState<T>& st, const std::vector<data::Record>& recs) {
    const auto& sp = st.vocab.specials();
    const int64_t B = static_cast<int64_t>(recs.size());
    // Base sequence: [bos, <und> slots </und>, question(+pads)]
    std::vector<std::vector<int32_t>> base(static_cast<size_t>(B));
    int64_t base_len = -1;
    text::MixedLayout lay0;
    for (int64_t i = 0; i < B; ++i) {
        text::AssembleOptions opt;
        opt.und_image = true;
        opt.prompt = recs[static_cast<size_t>(i)].question;
        opt.pad_prompt_to = kQuestionPad;
        auto a = text::assemble(st.vocab, opt);
        // Drop the trailing eos: generation continues from the question.
        auto toks = a.seq.tokens;
        toks.pop_back();
        if (base_len < 0) {
            base_len = static_cast<int64_t>(toks.size());
            lay0 = a.layout;
        }
        core::require(static_cast<int64_t>(toks.size()) == base_len, "decode_answers: layout drift");
        base[static_cast<size_t>(i)] = std::move(toks);
    }
    auto und = detail::render_batch<T>(recs);

    std::vector<std::vector<int32_t>> decoded(static_cast<size_t>(B));
    std::vector<bool> done(static_cast<size_t>(B), false);
    for (int64_t round = 0; round < kAnswerPad + 1; ++round) {
        const int64_t Tn = base_len + round;
        model::Batch<T> batch;
        batch.layout = lay0;
        batch.layout.total = Tn;
        batch.layout.eos_pos = -1;
        batch.batch = B;
        batch.und_images = und;
        batch.tokens.assign(static_cast<size_t>(B * Tn), sp.pad);
        for (int64_t i = 0; i < B; ++i) {
            std::copy(base[static_cast<size_t>(i)].begin(), base[static_cast<size_t>(i)].end(),
                      batch.tokens.begin() + i * Tn);
            for (int64_t r = 0; r < round; ++r) {
                const auto& d = decoded[static_cast<size_t>(i)];
                batch.tokens[static_cast<size_t>(i * Tn + base_len + r)] =
                    r < static_cast<int64_t>(d.size()) ? d[static_cast<size_t>(r)] : sp.pad;
            }
        }
        core::Tape<T> tape(false);
        auto bm = model::bind(st.model, tape);
        auto outs = model::forward_mixed(bm, batch);
        std::vector<int32_t> pos(static_cast<size_t>(B));
        for (int64_t i = 0; i < B; ++i) pos[static_cast<size_t>(i)] = static_cast<int32_t>(i * Tn + Tn - 1);
        auto logits = model::text_logits_at(bm, outs.hidden, pos);
        const auto& lv = logits.val();
        const int64_t V = lv.dim(1);
        bool all_done = true;
        for (int64_t i = 0; i < B; ++i) {
            if (done[static_cast<size_t>(i)]) continue;
            int32_t best = 0;
            T best_v = lv.v[static_cast<size_t>(i * V)];
            for (int32_t j = 1; j < V; ++j)
                if (lv.v[static_cast<size_t>(i * V + j)] > best_v) {
                    best_v = lv.v[static_cast<size_t>(i * V + j)];
                    best = j;
                }
            if (best == sp.eos || decoded[static_cast<size_t>(i)].size() >= 3) {
                done[static_cast<size_t>(i)] = true;
            } else {
                decoded[static_cast<size_t>(i)].push_back(best);
                all_done = false;
            }
        }
        if (all_done) break;
    }
    std::vector<std::string> out(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
        std::vector<int32_t> text_ids;
        for (int32_t id : decoded[static_cast<size_t>(i)])
            if (id < st.vocab.text_range_end()) text_ids.push_back(id);
        out[static_cast<size_t>(i)] = st.vocab.detokenize(text_ids);
    }
    return out;
}

// Generation-side oracle accuracy over sampled prompts.
template <class T>
void eval_generation(TrainState<T>& st, int64_t n_prompts, int64_t n_seeds, uint64_t seed,
                     EvalReport& rep, const gen::SamplerConfig& sc) {
    const auto& schedule = st.model.cfg.schedule;
    std::vector<std::string> prompts;
    std::vector<data::SceneSpec> specs;
    core::Rng rng(core::mix_seed(seed, 0xeva1u));
    for (int64_t i = 0; i < n_prompts; ++i) {
        data::SceneSpec s;
        s.shape = static_cast<data::ShapeKind>(rng.next_below(data::kNumShapes));
        s.color = static_cast<data::ColorKind>(rng.next_below(data::kNumColors));
        s.cell = static_cast<int>(rng.next_below(data::kNumCells));
        specs.push_back(s);
        prompts.push_back(data::caption(s));
    }
    int64_t color_ok = 0, shape_ok = 0, cell_ok = 0, all_ok = 0, total = 0;
    const int64_t chunk = 32;
    for (int64_t s0 = 0; s0 < n_seeds; ++s0) {
        for (int64_t at = 0; at < n_prompts; at += chunk) {
            const int64_t n = std::min(chunk, n_prompts - at);
            std::vector<std::string> ps(prompts.begin() + at, prompts.begin() + at + n);
            std::vector<uint64_t> seeds;
            for (int64_t i = 0; i < n; ++i)
                seeds.push_back(core::mix_seed(seed, static_cast<uint64_t>(s0),
                                               static_cast<uint64_t>(at + i)));
            auto results = gen::generate_images(st.model, st.tokenizer, st.vocab, ps, schedule, sc, seeds);
            for (int64_t i = 0; i < n; ++i) {
                const auto r = data::oracle_classify(results[static_cast<size_t>(i)].image.template cast<float>());
                const auto& want = specs[static_cast<size_t>(at + i)];
                const bool c_ok = r.known && r.color == want.color;
                const bool s_ok = r.known && r.shape == want.shape;
                const bool l_ok = r.known && r.cell == want.cell;
                color_ok += c_ok;
                shape_ok += s_ok;
                cell_ok += l_ok;
                all_ok += (c_ok && s_ok && l_ok);
                ++total;
            }
        }
    }
    rep.gen_color_accuracy = static_cast<double>(color_ok) / static_cast<double>(total);
    rep.gen_shape_accuracy = static_cast<double>(shape_ok) / static_cast<double>(total);
    rep.gen_cell_accuracy = static_cast<double>(cell_ok) / static_cast<double>(total);
    rep.gen_all_accuracy = static_cast<double>(all_ok) / static_cast<double>(total);
}

template <class T>
EvalReport evaluate(TrainState<T>& st, uint64_t seed, bool with_generation = true,
                    int64_t gen_prompts = 64, int64_t gen_seeds = 4) {
    EvalReport rep;
    gen::SamplerConfig sc;  // paper defaults: cfg 1.5; per-bit head, temperature 1
    sc.cfg_scale = 1.5;

    if (with_generation) eval_generation(st, gen_prompts, gen_seeds, seed, rep, sc);

    {  // understanding
        auto recs = data::make_corpus(data::RecordKind::understanding_qa, 200,
                                      core::mix_seed(seed, 0x9a2u), 32);
        auto answers = decode_answers(st, recs);
        int64_t ok = 0;
        for (size_t i = 0; i < recs.size(); ++i) ok += answers[i] == recs[i].answer;
        rep.qa_accuracy = static_cast<double>(ok) / static_cast<double>(recs.size());
    }

    {  // reconstruction
        const int res = st.tokenizer.schedule.base_h * 4;
        auto recs = data::make_corpus(data::RecordKind::t2i, 64, core::mix_seed(seed, 0xec0u), res);
        double acc = 0;
        for (const auto& r : recs) {
            auto img = data::render(r.spec, r.seed).template cast<T>();
            auto q = st.tokenizer.tokenize_image(img, false);
            auto dec = st.tokenizer.decode_tokens(q.tokens, false);
            acc += quant::psnr(img, dec);
        }
        rep.recon_psnr = acc / static_cast<double>(recs.size());
    }
    return rep;
}

// Held-out preference margins against a reference snapshot.
template <class T>
double eval_dpo_margin_rate(TrainState<T>& st, double beta, int64_t n_pairs, uint64_t seed) {
    core::require(!st.ref_params.empty(), "eval_dpo: no reference snapshot in state");
    const int res = st.tokenizer.schedule.base_h * 4;
    auto prompts = data::make_corpus(data::RecordKind::preference_prompt, n_pairs,
                                     core::mix_seed(seed, 0xd90u), res);
    auto pairs = dpo::build_preference_pairs(prompts, nullptr, res, core::mix_seed(seed, 0xd91u));
    BatchBuilder<T> builder(st.vocab, st.tokenizer);
    std::vector<std::string> caps;
    std::vector<quant::ScaleTokens> toks_w, toks_l;
    for (const auto& p : pairs) {
        caps.push_back(p.prompt);
        toks_w.push_back(builder.tokens_for_image(p.winner));
        toks_l.push_back(builder.tokens_for_image(p.loser));
    }
    auto lpw = dpo::pair_logprobs(st.model, builder, caps, toks_w);
    auto lpl = dpo::pair_logprobs(st.model, builder, caps, toks_l);

    // Swap in the reference weights, score, swap back.
    auto ref = st.ref_params;
    std::vector<core::Tensor<T>> saved;
    for (auto& [name, value] : ref) {
        saved.push_back(st.model.p(name));
        st.model.p(name) = value;
    }
    auto rw = dpo::pair_logprobs(st.model, builder, caps, toks_w);
    auto rl = dpo::pair_logprobs(st.model, builder, caps, toks_l);
    for (size_t i = 0; i < ref.size(); ++i) st.model.p(ref[i].first) = saved[i];

    int64_t positive = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const double margin = dpo::implicit_reward(beta, lpw[i], rw[i]) -
                              dpo::implicit_reward(beta, lpl[i], rl[i]);
        positive += margin > 0;
    }
    return static_cast<double>(positive) / static_cast<double>(pairs.size());
}

// Editing accuracy: does the oracle read the instructed attribute on the
// generated output?
template <class T>
double eval_edit_accuracy(TrainState<T>& st, int64_t n, uint64_t seed) {
    const int res = st.tokenizer.schedule.base_h * 4;
    auto recs = data::make_corpus(data::RecordKind::editing, n, core::mix_seed(seed, 0xed7u), res);
    gen::SamplerConfig sc;
    sc.cfg_scale = 1.5;
    int64_t ok = 0, total = 0;
    const int64_t chunk = 32;
    for (int64_t at = 0; at < static_cast<int64_t>(recs.size()); at += chunk) {
        const int64_t m = std::min<int64_t>(chunk, static_cast<int64_t>(recs.size()) - at);
        std::vector<std::string> prompts;
        std::vector<data::Image> sources;
        std::vector<uint64_t> seeds;
        for (int64_t i = 0; i < m; ++i) {
            const auto& r = recs[static_cast<size_t>(at + i)];
            prompts.push_back(r.instruction);
            sources.push_back(data::render(r.spec, r.seed));
            seeds.push_back(core::mix_seed(seed, 0x5e2u, static_cast<uint64_t>(at + i)));
        }
        auto results = gen::generate_images(st.model, st.tokenizer, st.vocab, prompts,
                                            st.model.cfg.schedule, sc, seeds, &sources);
        for (int64_t i = 0; i < m; ++i) {
            const auto& r = recs[static_cast<size_t>(at + i)];
            const auto& src = r.spec;
            const auto& dst = *r.target_spec;
            const auto read = data::oracle_classify(results[static_cast<size_t>(i)].image.template cast<float>());
            bool hit = false;
            if (read.known) {
                if (src.color != dst.color) hit = read.color == dst.color;
                else if (src.shape != dst.shape) hit = read.shape == dst.shape;
                else hit = read.cell == dst.cell;
            }
            ok += hit;
            ++total;
        }
    }
    return static_cast<double>(ok) / static_cast<double>(total);
}

}  // namespace unigen::pipe
