#pragma once

#include <filesystem>

#include "unigen/pipe/pipeline.hpp"

namespace unigen::pipe {

namespace detail {

inline uint64_t stage_hash(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) h = core::splitmix64(h ^ c);
    return h;
}

}  // namespace detail

// Per-scale mean least-squares gain over a sample of the corpus; stored in
// the tokenizer for generation time (there is no residual to fit then).
template <class T>
void calibrate_tokenizer(quant::Tokenizer<T>& tok, const std::vector<data::Record>& records,
                         int64_t sample, int append_from_scale = 0) {
    const int K = tok.schedule.num_scales();
    std::vector<double> acc(static_cast<size_t>(K), 0.0);
    int64_t n = std::min<int64_t>(sample, static_cast<int64_t>(records.size()));
    core::require(n > 0, "calibrate: no sample images");
    for (int64_t i = 0; i < n; ++i) {
        auto img = data::render(records[static_cast<size_t>(i)].spec,
                                records[static_cast<size_t>(i)].seed)
                       .template cast<T>();
        auto q = tok.tokenize_image(img, false);
        for (int k = 0; k < K; ++k) acc[static_cast<size_t>(k)] += q.tokens.gains[static_cast<size_t>(k)];
    }
    if (static_cast<int>(tok.calibration.size()) < K) tok.calibration.resize(static_cast<size_t>(K), 1.0);
    for (int k = append_from_scale; k < K; ++k)
        tok.calibration[static_cast<size_t>(k)] = acc[static_cast<size_t>(k)] / static_cast<double>(n);
}

// Moves the model and tokenizer from the lo ladder to the hi ladder: appends
// one finer scale, doubles the base latent, and extends the calibration.
template <class T>
void extend_to_hi(TrainState<T>& st, const Corpora& corpora) {
    const auto hi = quant::ScaleSchedule::desk_hi();
    if (st.model.cfg.schedule == hi) return;
    const int old_scales = st.model.cfg.schedule.num_scales();
    st.model.extend_schedule(hi, core::mix_seed(st.master_seed, 0xe77e4du));
    st.tokenizer.schedule = hi;
    calibrate_tokenizer(st.tokenizer, corpora.t2i_hi, 256, old_scales);
}

template <class T>
class StageRunner {
public:
    StageRunner(TrainState<T>& st, const Corpora& corpora, std::string out_dir)
        : st_(st), corpora_(&corpora), out_dir_(std::move(out_dir)) {}

    void run(const StageConfig& cfg) {
        cfg.validate();
        enforce_order(cfg.stage);
        const bool resuming = st_.current_stage == cfg.stage && st_.steps_done > 0;
        if (!resuming) {
            st_.current_stage = cfg.stage;
            st_.steps_done = 0;
            st_.optimizer.reset();
        }
        if (cfg.resolution == "hi") extend_to_hi(st_, *corpora_);
        configure_freeze(cfg.stage);
        builder_ = std::make_unique<BatchBuilder<T>>(st_.vocab, st_.tokenizer);
        if (is_dpo(cfg.stage)) setup_dpo(cfg, resuming);

        for (int64_t step = st_.steps_done; step < cfg.steps; ++step) {
            const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_ratio);
            st_.optimizer.weight_decay = cfg.weight_decay;
            double loss = 0;
            if (cfg.stage == "stage1_tok")
                loss = step_stage1(cfg, step, lr);
            else if (cfg.stage == "stage2_mixed")
                loss = step_stage2(cfg, step, lr);
            else if (is_dpo(cfg.stage))
                loss = step_dpo(cfg, step, lr);
            else if (cfg.stage == "stage_edit")
                loss = step_edit(cfg, step, lr);
            else
                loss = step_sft(cfg, step, lr);
            detail::check_finite(loss, cfg.stage);
            st_.steps_done = step + 1;

            if ((step + 1) % 50 == 0 || step + 1 == cfg.steps) {
                metric(step + 1, cfg.stage, "loss", loss);
                metric(step + 1, cfg.stage, "lr", lr);
            }
            if ((step + 1) % 250 == 0 && wants_probe(cfg.stage)) probe(cfg, step + 1);
            if ((step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) save();
        }

        finish_stage(cfg);
    }

private:
    TrainState<T>& st_;
    const Corpora* corpora_;
    std::string out_dir_;
    std::unique_ptr<BatchBuilder<T>> builder_;

    // Direct-preference phase state (rebuilt deterministically on resume).
    std::vector<std::string> pair_prompts_;
    std::vector<quant::ScaleTokens> pair_tokens_w_, pair_tokens_l_;
    std::vector<double> pair_ref_lp_w_, pair_ref_lp_l_;

    static bool is_dpo(const std::string& stage) {
        return stage == "stage3_dpo_lo" || stage == "stage3_dpo_hi";
    }
    static bool wants_probe(const std::string& stage) { return stage != "stage1_tok" && stage != "stage2_mixed"; }

    void metric(int64_t step, const std::string& stage, const std::string& name, double v) {
        if (st_.metrics) st_.metrics->append(step, stage, name, v);
    }

    void enforce_order(const std::string& stage) {
        const auto& order = stage_order();
        const auto it = std::find(order.begin(), order.end(), stage);
        core::require(it != order.end(), "run_stage: unknown stage " + stage);
        if (it != order.begin()) {
            const std::string& prev = *(it - 1);
            core::require(st_.stage_completed(prev),
                          "run_stage: stage " + stage + " requires a completed " + prev + " checkpoint");
        }
        core::require(!st_.stage_completed(stage), "run_stage: stage " + stage + " already completed");
    }

    void configure_freeze(const std::string& stage) {
        if (stage == "stage1_tok") {
            st_.model.apply_freeze({"gen_in_proj", "gen_out_proj"});
            st_.tokenizer.set_trainable(true);
            return;
        }
        st_.tokenizer.set_trainable(false);
        if (stage == "stage2_mixed" || stage == "stage_edit") {
            // Everything except the frozen tokenizer.
            st_.model.apply_freeze({"llm", "visual_decoder", "und_proj", "gen_in_proj",
                                    "gen_out_proj", "text_head"});
        } else {
            // Stage-3 supervised and preference phases share one set.
            st_.model.apply_freeze({"visual_decoder", "gen_in_proj", "gen_out_proj"});
        }
    }

    const std::vector<data::Record>& stage_t2i(const StageConfig& cfg) const {
        if (cfg.stage == "stage2_mixed") return corpora_->t2i_mixed;
        return cfg.resolution == "hi" ? corpora_->t2i_hi : corpora_->t2i_lo;
    }

    // -- per-stage steps ---------------------------------------------------

    double step_stage1(const StageConfig& cfg, int64_t step, double lr) {
        auto recs = detail::pick_records<T>(corpora_->tok_images, cfg.batch_size, st_.master_seed,
                                            cfg.stage, step);
        auto images = detail::render_batch<T>(recs);
        core::Tape<T> tape;
        auto bt = st_.tokenizer.bind(tape);
        auto losses = quant::tokenizer_losses<T>(bt, images, static_cast<T>(cfg.commit_weight));
        tape.backward(losses.total);
        auto slots = detail::tokenizer_slots(st_.tokenizer, bt, tape);
        st_.optimizer.step(slots, lr);
        if ((step + 1) % 50 == 0) {
            metric(step + 1, cfg.stage, "recon_mse", losses.recon.scalar());
            metric(step + 1, cfg.stage, "psnr", losses.psnr);
        }

        // Interleaved projector pretraining on the generation objective; the
        // tokenizer moves underneath, so ladder caching is bypassed.
        if (step % 4 == 3) {
            builder_->clear_cache();
            auto gen_recs = detail::pick_records<T>(corpora_->tok_images, cfg.batch_size,
                                                    st_.master_seed, "stage1_proj", step);
            core::Tape<T> t2;
            auto bm = model::bind(st_.model, t2);
            auto batch = builder_->t2i(gen_recs, cfg.null_prompt_rate, st_.master_seed + step);
            auto outs = model::forward_mixed(bm, batch);
            auto li = model::ivc_loss(outs.bit_logits, batch.bit_targets);
            t2.backward(li);
            auto mslots = detail::model_slots(st_.model, bm, t2);
            st_.optimizer.step(mslots, lr * 0.05);  // projector warmup at SFT-like scale
            if ((step + 1) % 50 == 0) metric(step + 1, cfg.stage, "ivc_warmup", li.scalar());
        }
        return static_cast<double>(losses.total.scalar());
    }

    double gen_objective_step(const StageConfig& cfg, const model::Batch<T>& batch, double lr,
                              int64_t step, const char* tag) {
        core::Tape<T> tape;
        auto bm = model::bind(st_.model, tape);
        auto outs = model::forward_mixed(bm, batch);
        auto li = core::scale(model::ivc_loss(outs.bit_logits, batch.bit_targets),
                              static_cast<T>(cfg.lambda_img));
        core::Var<T> loss = li;
        if (outs.code_logits.valid()) {
            auto lc = model::code_ce_loss(outs.code_logits, batch.bit_targets, st_.model.cfg.bits());
            loss = core::add(loss, lc);
            if ((step + 1) % 50 == 0) metric(step + 1, cfg.stage, std::string(tag) + "_code_ce", lc.scalar());
        }
        if (!batch.text_pos.empty()) {
            auto lt = model::text_ce_loss(model::text_logits_at(bm, outs.hidden, batch.text_pos),
                                          batch.text_tok);
            loss = core::add(loss, lt);
        }
        tape.backward(loss);
        auto slots = detail::model_slots(st_.model, bm, tape);
        st_.optimizer.step(slots, lr);
        if ((step + 1) % 50 == 0) metric(step + 1, cfg.stage, std::string(tag) + "_ivc", li.scalar());
        return static_cast<double>(loss.scalar());
    }

    double step_sft(const StageConfig& cfg, int64_t step, double lr) {
        auto recs = detail::pick_records<T>(stage_t2i(cfg), cfg.batch_size, st_.master_seed,
                                            cfg.stage, step);
        auto batch = builder_->t2i(recs, cfg.null_prompt_rate, core::mix_seed(st_.master_seed, step));
        return gen_objective_step(cfg, batch, lr, step, "t2i");
    }

    double step_stage2(const StageConfig& cfg, int64_t step, double lr) {
        if (step % 6 == 5) return step_sft(cfg, step, lr);
        auto recs = detail::pick_records<T>(corpora_->qa, cfg.batch_size, st_.master_seed,
                                            cfg.stage, step);
        auto batch = builder_->qa(recs);
        core::Tape<T> tape;
        auto bm = model::bind(st_.model, tape);
        auto outs = model::forward_mixed(bm, batch);
        auto loss = model::text_ce_loss(model::text_logits_at(bm, outs.hidden, batch.text_pos),
                                        batch.text_tok);
        tape.backward(loss);
        auto slots = detail::model_slots(st_.model, bm, tape);
        st_.optimizer.step(slots, lr);
        if ((step + 1) % 50 == 0) metric(step + 1, cfg.stage, "qa_ce", loss.scalar());
        return static_cast<double>(loss.scalar());
    }

    double step_edit(const StageConfig& cfg, int64_t step, double lr) {
        auto recs = detail::pick_records<T>(corpora_->edits, cfg.batch_size, st_.master_seed,
                                            cfg.stage, step);
        auto batch = builder_->edit(recs, cfg.null_prompt_rate, core::mix_seed(st_.master_seed, step));
        return gen_objective_step(cfg, batch, lr, step, "edit");
    }

    // -- preference phase ----------------------------------------------------

    void setup_dpo(const StageConfig& cfg, bool resuming) {
        if (!resuming) {
            st_.ref_params.clear();
            for (const auto& p : st_.model.params) st_.ref_params.emplace_back(p.name, p.value);
        }
        core::require(!st_.ref_params.empty(), "dpo: missing reference snapshot");

        // Pair construction, policy sampling and reference scoring all run
        // under the phase-start weights so a resumed phase rebuilds the exact
        // same dataset.
        std::vector<core::Tensor<T>> saved;
        for (auto& [name, value] : st_.ref_params) {
            saved.push_back(st_.model.p(name));
            st_.model.p(name) = value;
        }

        const auto& prompts = cfg.resolution == "hi" ? corpora_->pref_hi : corpora_->pref_lo;
        const int res = cfg.image_resolution();
        std::optional<dpo::PolicySampler> policy;
        if (cfg.policy_losers) {
            policy = [this](const std::vector<std::string>& caps,
                            const std::vector<uint64_t>& seeds) {
                gen::SamplerConfig sc;
                sc.cfg_scale = 1.5;
                std::vector<data::Image> out;
                const size_t chunk = 32;
                for (size_t at = 0; at < caps.size(); at += chunk) {
                    const size_t n = std::min<size_t>(chunk, caps.size() - at);
                    std::vector<std::string> c2(caps.begin() + at, caps.begin() + at + n);
                    std::vector<uint64_t> s2(seeds.begin() + at, seeds.begin() + at + n);
                    auto res2 = gen::generate_images(st_.model, st_.tokenizer, st_.vocab, c2,
                                                     st_.model.cfg.schedule, sc, s2);
                    for (auto& r : res2) out.push_back(r.image.template cast<float>());
                }
                return out;
            };
        }
        auto pairs = dpo::build_preference_pairs(
            prompts, policy ? &*policy : nullptr, res,
            core::mix_seed(st_.master_seed, detail::stage_hash(cfg.stage)));
        pair_prompts_.clear();
        pair_tokens_w_.clear();
        pair_tokens_l_.clear();
        for (const auto& p : pairs) {
            pair_prompts_.push_back(p.prompt);
            pair_tokens_w_.push_back(builder_->tokens_for_image(p.winner));
            pair_tokens_l_.push_back(builder_->tokens_for_image(p.loser));
        }
        pair_ref_lp_w_ = dpo::pair_logprobs(st_.model, *builder_, pair_prompts_, pair_tokens_w_);
        pair_ref_lp_l_ = dpo::pair_logprobs(st_.model, *builder_, pair_prompts_, pair_tokens_l_);
        for (size_t i = 0; i < st_.ref_params.size(); ++i)
            st_.model.p(st_.ref_params[i].first) = saved[i];
    }

    double step_dpo(const StageConfig& cfg, int64_t step, double lr) {
        const int64_t n_pairs = static_cast<int64_t>(pair_prompts_.size());
        std::vector<std::string> caps;
        std::vector<quant::ScaleTokens> tw, tl;
        std::vector<T> ref_w, ref_l;
        for (int64_t i = 0; i < cfg.batch_size; ++i) {
            const uint64_t h = core::mix_seed(st_.master_seed, detail::stage_hash(cfg.stage),
                                              static_cast<uint64_t>(step), static_cast<uint64_t>(i));
            const auto idx = static_cast<size_t>(h % static_cast<uint64_t>(n_pairs));
            caps.push_back(pair_prompts_[idx]);
            tw.push_back(pair_tokens_w_[idx]);
            tl.push_back(pair_tokens_l_[idx]);
            ref_w.push_back(static_cast<T>(pair_ref_lp_w_[idx]));
            ref_l.push_back(static_cast<T>(pair_ref_lp_l_[idx]));
        }
        auto bw = builder_->gen_pairs(caps, tw);
        auto bl = builder_->gen_pairs(caps, tl);

        core::Tape<T> tape;
        auto bm = model::bind(st_.model, tape);
        auto ow = model::forward_mixed(bm, bw);
        auto ol = model::forward_mixed(bm, bl);
        auto lpw = dpo::image_token_logprob_batch(ow.bit_logits, bw.bit_targets);
        auto lpl = dpo::image_token_logprob_batch(ol.bit_logits, bl.bit_targets);
        auto loss = dpo::dpo_loss_batch(lpw, lpl, ref_w, ref_l, cfg.beta);
        tape.backward(loss);
        auto slots = detail::model_slots(st_.model, bm, tape);
        st_.optimizer.step(slots, lr);

        // Reporting path in double so the phase-start value is ln 2 exactly.
        double loss_d = 0, margin_sum = 0;
        int64_t positive = 0;
        for (int64_t i = 0; i < cfg.batch_size; ++i) {
            const double m =
                cfg.beta * ((static_cast<double>(lpw.val().v[static_cast<size_t>(i)]) -
                             static_cast<double>(ref_w[static_cast<size_t>(i)])) -
                            (static_cast<double>(lpl.val().v[static_cast<size_t>(i)]) -
                             static_cast<double>(ref_l[static_cast<size_t>(i)])));
            loss_d += core::softplus_scalar(-m);
            margin_sum += m;
            positive += m > 0;
        }
        loss_d /= static_cast<double>(cfg.batch_size);
        if ((step + 1) % 50 == 0 || step == 0) {
            metric(step + 1, cfg.stage, "dpo_margin_mean", margin_sum / static_cast<double>(cfg.batch_size));
            metric(step + 1, cfg.stage, "dpo_margin_positive",
                   static_cast<double>(positive) / static_cast<double>(cfg.batch_size));
        }
        if (step == 0) metric(1, cfg.stage, "dpo_loss_start", loss_d);
        return loss_d;
    }

    // -- shared tail ---------------------------------------------------------

    void probe(const StageConfig& cfg, int64_t step) {
        EvalReport rep;
        gen::SamplerConfig sc;
        sc.cfg_scale = 1.5;
        eval_generation(st_, 16, 1, core::mix_seed(st_.master_seed, 0x9e0beull, static_cast<uint64_t>(step)), rep, sc);
        metric(step, cfg.stage, "probe_gen_color_accuracy", rep.gen_color_accuracy);
    }

    void save() {
        if (out_dir_.empty()) return;
        std::filesystem::create_directories(out_dir_);
        save_checkpoint(out_dir_ + "/checkpoint.bin", st_.to_checkpoint());
    }

    void finish_stage(const StageConfig& cfg) {
        if (cfg.stage == "stage1_tok") {
            calibrate_tokenizer(st_.tokenizer, corpora_->tok_images, 512);
            st_.tokenizer.set_trainable(false);  // frozen for all later stages
        }
        st_.completed.push_back(cfg.stage);
        st_.current_stage.clear();
        st_.steps_done = 0;
        save();
    }
};

template <class T>
void run_stage(TrainState<T>& st, const StageConfig& cfg, const Corpora& corpora,
               const std::string& out_dir) {
    StageRunner<T> runner(st, corpora, out_dir);
    runner.run(cfg);
}

}  // namespace unigen::pipe
