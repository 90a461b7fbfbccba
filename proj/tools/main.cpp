// unigen: train, sample and evaluate a desk-scale unified
// understanding/generation model on the procedural shapes corpus.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "unigen/img/ppm.hpp"
#include "unigen/pipe/train.hpp"

namespace fs = std::filesystem;
using namespace unigen;

using Scalar = float;
using State = pipe::TrainState<Scalar>;

namespace {

State load_state(const std::string& checkpoint, uint64_t seed) {
    auto ck = pipe::load_checkpoint<Scalar>(checkpoint);
    return State::from_checkpoint(std::move(ck), seed);
}

int cmd_make_data(const std::string& kind, int64_t n, uint64_t seed, int resolution,
                  const std::string& out) {
    const auto records = data::make_corpus(data::record_kind_from(kind), n, seed, resolution);
    data::write_manifest(out, records);
    std::cout << "wrote " << records.size() << " " << kind << " records to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& stage, const std::string& config_path, const std::string& out_dir,
              const std::string& resume, uint64_t seed, bool all_stages, bool smoke) {
    fs::create_directories(out_dir);
    State st = resume.empty() ? State::fresh(seed) : load_state(resume, seed);
    pipe::MetricsWriter metrics(out_dir + "/metrics.jsonl");
    st.metrics = &metrics;

    auto corpora = smoke ? pipe::Corpora::smoke(core::mix_seed(seed, 0xda7au))
                         : pipe::Corpora::standard(core::mix_seed(seed, 0xda7au));

    auto run_one = [&](const std::string& name) {
        pipe::StageConfig cfg = pipe::StageConfig::desk(name);
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            core::require(in.good(), "train: cannot open config " + config_path);
            cfg = pipe::StageConfig::from_json(nlohmann::json::parse(in));
            core::require(cfg.stage == name, "train: config stage " + cfg.stage +
                                                 " does not match requested " + name);
        }
        if (smoke) {
            cfg.steps = std::min<int64_t>(cfg.steps, 2);
            cfg.batch_size = std::min<int64_t>(cfg.batch_size, 4);
        }
        std::cout << "stage " << name << ": " << cfg.steps << " steps, lr " << cfg.lr << std::endl;
        pipe::run_stage(st, cfg, corpora, out_dir);
    };

    if (all_stages) {
        for (const auto& name : pipe::stage_order()) {
            if (st.stage_completed(name)) continue;
            run_one(name);
        }
    } else {
        core::require(!stage.empty(), "train: --stage or --all is required");
        run_one(stage);
    }
    std::cout << "checkpoint: " << out_dir << "/checkpoint.bin\n";
    return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& prompt, uint64_t seed,
                 double cfg_scale, int64_t top_k, double top_p, double temperature,
                 const std::string& head, const std::string& out) {
    State st = load_state(checkpoint, seed);
    gen::SamplerConfig sc;
    sc.cfg_scale = cfg_scale;
    sc.top_k = top_k;
    sc.top_p = top_p;
    sc.temperature = temperature;
    sc.seed = seed;
    sc.use_code_head = head == "code";
    core::require(head == "ivc" || head == "code", "generate: head must be ivc|code");
    auto res = gen::generate_image(st.model, st.tokenizer, st.vocab, prompt,
                                   st.model.cfg.schedule, sc);
    img::write_ppm(out, res.image.template cast<float>());
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_edit(const std::string& checkpoint, const std::string& image_path,
             const std::string& instruction, uint64_t seed, double cfg_scale,
             const std::string& out) {
    State st = load_state(checkpoint, seed);
    auto src = img::read_ppm(image_path);
    gen::SamplerConfig sc;
    sc.cfg_scale = cfg_scale;
    sc.seed = seed;
    auto res = gen::generate_image(st.model, st.tokenizer, st.vocab, instruction,
                                   st.model.cfg.schedule, sc, src);
    img::write_ppm(out, res.image.template cast<float>());
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, uint64_t seed,
             const std::string& out) {
    State st = load_state(checkpoint, seed);
    nlohmann::json j;
    if (split == "all" || split == "gen" || split == "qa" || split == "recon") {
        auto rep = pipe::evaluate(st, core::mix_seed(seed, 0xe0ffu),
                                  split == "all" || split == "gen");
        j = rep.to_json();
        if (split == "gen") {
            j.erase("qa_accuracy");
            j.erase("recon_psnr");
        }
    }
    if (split == "all" || split == "dpo") {
        if (!st.ref_params.empty())
            j["dpo_margin_rate"] =
                pipe::eval_dpo_margin_rate(st, 0.1, 200, core::mix_seed(seed, 0xe0f1u));
        else if (split == "dpo")
            core::fail("eval: checkpoint has no preference-phase reference snapshot");
    }
    if (split == "all" || split == "edit") {
        if (st.stage_completed("stage_edit") || split == "edit")
            j["edit_accuracy"] = pipe::eval_edit_accuracy(st, 200, core::mix_seed(seed, 0xe0f2u));
    }
    core::require(!j.empty(), "eval: unknown split " + split);
    const std::string text = j.dump(2);
    std::cout << text << "\n";
    if (!out.empty()) {
        std::ofstream o(out);
        o << text << "\n";
    }
    return 0;
}

int cmd_report(const std::string& log, const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto files = pipe::write_report(log, out_dir);
    std::cout << "wrote " << files.size() << " plots to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale unified visual understanding & generation"};
    app.require_subcommand(1);

    auto* mk = app.add_subcommand("make-data", "write a procedural corpus manifest");
    std::string mk_kind = "t2i", mk_out = "corpus.jsonl";
    int64_t mk_n = 1000;
    uint64_t mk_seed = 1;
    int mk_res = 32;
    mk->add_option("--kind", mk_kind, "t2i|understanding_qa|editing|preference_prompt");
    mk->add_option("--n", mk_n, "record count");
    mk->add_option("--seed", mk_seed, "corpus seed");
    mk->add_option("--resolution", mk_res, "32 or 64");
    mk->add_option("--out", mk_out, "output manifest path")->required();

    auto* tr = app.add_subcommand("train", "run one curriculum stage (or --all)");
    std::string tr_stage, tr_config, tr_out = "run", tr_resume;
    uint64_t tr_seed = 1;
    bool tr_all = false, tr_smoke = false;
    tr->add_option("--stage", tr_stage,
                   "stage1_tok|stage2_mixed|stage3_sft_lo|stage3_dpo_lo|stage3_sft_hi|"
                   "stage3_dpo_hi|stage_edit");
    tr->add_option("--config", tr_config, "json stage config (defaults to desk settings)");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    tr->add_option("--seed", tr_seed, "master seed");
    tr->add_flag("--all", tr_all, "run every remaining stage in order");
    tr->add_flag("--smoke", tr_smoke, "tiny corpora and 2 steps per stage");

    auto* ge = app.add_subcommand("generate", "sample an image for a prompt");
    std::string ge_ckpt, ge_prompt, ge_head = "ivc", ge_out = "sample.ppm";
    uint64_t ge_seed = 0;
    double ge_cfg = 1.5, ge_top_p = 0.95, ge_temp = 1.0;
    int64_t ge_top_k = 900;
    ge->add_option("--checkpoint", ge_ckpt)->required();
    ge->add_option("--prompt", ge_prompt)->required();
    ge->add_option("--seed", ge_seed);
    ge->add_option("--cfg-scale", ge_cfg);
    ge->add_option("--top-k", ge_top_k, "clamped to the head vocabulary size");
    ge->add_option("--top-p", ge_top_p);
    ge->add_option("--temperature", ge_temp);
    ge->add_option("--head", ge_head, "ivc (per-bit) or code (explicit vocabulary)");
    ge->add_option("--out", ge_out);

    auto* ed = app.add_subcommand("edit", "apply an instruction to an input image");
    std::string ed_ckpt, ed_img, ed_instr, ed_out = "edited.ppm";
    uint64_t ed_seed = 0;
    double ed_cfg = 1.5;
    ed->add_option("--checkpoint", ed_ckpt)->required();
    ed->add_option("--image", ed_img)->required();
    ed->add_option("--instruction", ed_instr)->required();
    ed->add_option("--seed", ed_seed);
    ed->add_option("--cfg-scale", ed_cfg);
    ed->add_option("--out", ed_out);

    auto* ev = app.add_subcommand("eval", "oracle-based evaluation report");
    std::string ev_ckpt, ev_split = "all", ev_out;
    uint64_t ev_seed = 9;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--split", ev_split, "all|gen|qa|recon|dpo|edit");
    ev->add_option("--seed", ev_seed);
    ev->add_option("--out", ev_out, "json report path");

    auto* rp = app.add_subcommand("report", "render metric plots from a training log");
    std::string rp_log, rp_out = "report";
    rp->add_option("--log", rp_log)->required();
    rp->add_option("--out", rp_out);

    try {
        app.parse(argc, argv);
        if (*mk) return cmd_make_data(mk_kind, mk_n, mk_seed, mk_res, mk_out);
        if (*tr) return cmd_train(tr_stage, tr_config, tr_out, tr_resume, tr_seed, tr_all, tr_smoke);
        if (*ge) return cmd_generate(ge_ckpt, ge_prompt, ge_seed, ge_cfg, ge_top_k, ge_top_p,
                                     ge_temp, ge_head, ge_out);
        if (*ed) return cmd_edit(ed_ckpt, ed_img, ed_instr, ed_seed, ed_cfg, ed_out);
        if (*ev) return cmd_eval(ev_ckpt, ev_split, ev_seed, ev_out);
        if (*rp) return cmd_report(rp_log, rp_out);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage/config problems
    } catch (const pipe::NumericalAbort& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
