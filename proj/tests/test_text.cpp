#include <catch2/catch_amalgamated.hpp>

#include "unigen/data/corpus.hpp"
#include "unigen/text/mixed.hpp"

using namespace unigen;
using text::AssembleOptions;
using text::Vocab;

TEST_CASE("tokenize basics") {
    Vocab v;
    CHECK(v.tokenize("").empty());
    CHECK(v.tokenize("a red circle in the top left").size() == 7);
    // Unknown words fall back to bytes, round-tripping exactly.
    const std::string odd = "a zebra9 circle";
    CHECK(v.detokenize(v.tokenize(odd)) == odd);
}

TEST_CASE("detokenize inverts tokenize on the caption grammar") {
    Vocab v;
    core::Rng rng(4);
    int checked = 0;
    for (int t = 0; t < 1000; ++t) {
        data::SceneSpec s;
        s.shape = static_cast<data::ShapeKind>(rng.next_below(3));
        s.color = static_cast<data::ColorKind>(rng.next_below(6));
        s.cell = static_cast<int>(rng.next_below(9));
        const std::string c = data::caption(s);
        REQUIRE(v.detokenize(v.tokenize(c)) == c);
        ++checked;
    }
    CHECK(checked == 1000);
}

TEST_CASE("assemble text-only qa has no image markers") {
    Vocab v;
    AssembleOptions opt;
    opt.prompt = "what color is the shape";
    opt.response_text = "red";
    auto a = assemble(v, opt);
    const auto& sp = v.specials();
    for (int32_t t : a.seq.tokens) {
        CHECK(t != sp.image_gen_start);
        CHECK(t != sp.image_gen_end);
        CHECK(t != sp.image_und_start);
        CHECK(t != sp.image_und_end);
    }
    CHECK(a.seq.tokens.front() == sp.bos);
}

TEST_CASE("generation block has exactly the scheduled number of slots") {
    Vocab v;
    quant::ScaleSchedule sched;
    sched.scales = {{1, 1}, {2, 2}};
    sched.latent_dim = 4;
    sched.base_h = sched.base_w = 2;
    AssembleOptions opt;
    opt.prompt = "a red circle in the center";
    opt.gen_schedule = sched;
    auto a = assemble(v, opt);
    int64_t slots = 0;
    for (size_t i = 0; i < a.seq.tokens.size(); ++i)
        if (a.seq.tokens[i] == v.specials().gen_slot) ++slots;
    CHECK(slots == 5);
    CHECK(a.layout.gen_blocks == std::vector<int64_t>{1, 4});
    // Slot count always equals the schedule total.
    CHECK(slots == sched.total_positions());
}

TEST_CASE("parse inverts assemble on 1000 random cases") {
    Vocab v;
    core::Rng rng(9);
    quant::ScaleSchedule lo = quant::ScaleSchedule::desk_lo();
    for (int t = 0; t < 1000; ++t) {
        data::SceneSpec s;
        s.shape = static_cast<data::ShapeKind>(rng.next_below(3));
        s.color = static_cast<data::ColorKind>(rng.next_below(6));
        s.cell = static_cast<int>(rng.next_below(9));
        AssembleOptions opt;
        opt.prompt = data::caption(s);
        const bool with_resp = rng.next_below(2) == 0;
        const bool with_gen = !with_resp && rng.next_below(2) == 0;
        const bool with_und = rng.next_below(2) == 0;
        if (with_resp) opt.response_text = std::string(data::color_name(s.color));
        if (with_gen) opt.gen_schedule = lo;
        opt.und_image = with_und;
        opt.pad_prompt_to = 7 + static_cast<int64_t>(rng.next_below(3));
        auto a = assemble(v, opt);
        auto p = parse(v, a.seq);
        CHECK(p.prompt == opt.prompt);
        CHECK(p.has_und_image == with_und);
        CHECK(p.response_text.has_value() == with_resp);
        if (with_resp) CHECK(*p.response_text == *opt.response_text);
        if (with_gen)
            CHECK(p.gen_blocks == std::vector<int64_t>{1, 4, 16, 64});
        else
            CHECK(p.gen_blocks.empty());
    }
}

TEST_CASE("parse rejects malformed marker structure with a position") {
    Vocab v;
    quant::ScaleSchedule sched = quant::ScaleSchedule::desk_lo();
    AssembleOptions opt;
    opt.prompt = "a red circle in the center";
    opt.gen_schedule = sched;
    auto a = assemble(v, opt);

    SECTION("gen start without end") {
        // Truncate before the closing marker.
        auto seq = a.seq;
        const int64_t cut = a.layout.gen_start + 3;
        seq.tokens.resize(static_cast<size_t>(cut));
        seq.segments.resize(static_cast<size_t>(cut));
        seq.scale_index.resize(static_cast<size_t>(cut));
        seq.loss_mask.resize(static_cast<size_t>(cut));
        try {
            parse(v, seq);
            FAIL("expected parse error");
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find("position") != std::string::npos);
        }
    }
    SECTION("nested generation markers rejected") {
        auto seq = a.seq;
        // Replace one slot with a second opening marker.
        seq.tokens[static_cast<size_t>(a.layout.gen_start + 2)] = v.specials().image_gen_start;
        CHECK_THROWS_AS(parse(v, seq), std::invalid_argument);
    }
    SECTION("interleaved und marker inside gen block rejected") {
        auto seq = a.seq;
        seq.tokens[static_cast<size_t>(a.layout.gen_start + 2)] = v.specials().image_und_start;
        CHECK_THROWS_AS(parse(v, seq), std::invalid_argument);
    }
}

TEST_CASE("loss mask never covers prompt or marker positions") {
    Vocab v;
    AssembleOptions opt;
    opt.prompt = "what shape is shown";
    opt.response_text = "triangle";
    opt.und_image = true;
    opt.pad_prompt_to = 6;
    auto a = assemble(v, opt);
    const auto& sp = v.specials();
    for (size_t i = 0; i < a.seq.tokens.size(); ++i) {
        const int32_t t = a.seq.tokens[i];
        const bool is_marker = t == sp.image_gen_start || t == sp.image_gen_end ||
                               t == sp.image_und_start || t == sp.image_und_end || t == sp.bos ||
                               t == sp.pad || t == sp.und_slot || t == sp.gen_slot;
        const bool in_prompt = static_cast<int64_t>(i) >= a.layout.prompt_start &&
                               static_cast<int64_t>(i) < a.layout.prompt_start + a.layout.prompt_capacity;
        if (is_marker || in_prompt) CHECK(a.seq.loss_mask[i] == 0);
    }
    // Response tokens and their eos are covered.
    CHECK(a.seq.loss_mask[static_cast<size_t>(a.layout.response_start)] == 1);
    CHECK(a.seq.loss_mask[static_cast<size_t>(a.layout.eos_pos)] == 1);
}

TEST_CASE("assemble rejects generation without a schedule only via type system") {
    // The schedule is an optional; requesting generation is exactly providing
    // one, so an invalid (empty) schedule must be rejected.
    Vocab v;
    AssembleOptions opt;
    opt.prompt = "a red circle in the center";
    opt.gen_schedule = quant::ScaleSchedule{};
    CHECK_THROWS_AS(assemble(v, opt), std::invalid_argument);
}
