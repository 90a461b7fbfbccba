#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "unigen/data/corpus.hpp"
#include "unigen/data/oracle.hpp"
#include "unigen/data/render.hpp"

using namespace unigen;
using namespace unigen::data;

TEST_CASE("render is deterministic") {
    SceneSpec s;
    s.shape = ShapeKind::triangle;
    s.color = ColorKind::purple;
    s.cell = 5;
    s.background = Background::gray;
    auto a = render(s, 7), b = render(s, 7);
    CHECK(a.v == b.v);
}

TEST_CASE("red circle renders to a red circle per the oracle") {
    SceneSpec s;  // defaults: red circle, cell 0 (top left), white, 32px
    auto img = render(s, 0);
    auto r = oracle_classify(img);
    REQUIRE(r.known);
    CHECK(r.color == ColorKind::red);
    CHECK(r.shape == ShapeKind::circle);
    CHECK(r.cell == 0);
}

TEST_CASE("white background brighter than black") {
    SceneSpec w, b;
    w.background = Background::white;
    b.background = Background::black;
    CHECK(mean_pixel(render(w, 0)) > mean_pixel(render(b, 0)));
}

TEST_CASE("caption grammar basics") {
    SceneSpec s;  // red circle top-left
    CHECK(caption(s) == "a red circle in the top left");
    SceneSpec c = s;
    c.cell = 4;
    CHECK(caption(c) == "a red circle in the center");
}

TEST_CASE("caption is a bijection over the 162 caption-visible specs") {
    std::set<std::string> seen;
    for (const auto& s : enumerate_caption_specs()) {
        const std::string text = caption(s);
        seen.insert(text);
        const SceneSpec back = parse_caption(text);
        CHECK(back.shape == s.shape);
        CHECK(back.color == s.color);
        CHECK(back.cell == s.cell);
    }
    CHECK(seen.size() == 162);
    CHECK_THROWS_AS(parse_caption("a maroon blob in the void"), std::invalid_argument);
}

TEST_CASE("oracle is exact on all clean renders") {
    for (int res : {32, 64}) {
        int correct = 0, total = 0;
        for (const auto& base : enumerate_caption_specs())
            for (int bg = 0; bg < kNumBackgrounds; ++bg) {
                SceneSpec s = base;
                s.background = static_cast<Background>(bg);
                s.resolution = res;
                const auto r = oracle_classify(render(s, 0));
                ++total;
                if (r.known && r.color == s.color && r.shape == s.shape && r.cell == s.cell)
                    ++correct;
            }
        INFO("resolution " << res);
        CHECK(total == 486);
        CHECK(correct == 486);
    }
}

TEST_CASE("oracle tolerates sigma=0.05 noise on at least 95%") {
    core::Rng rng(2024);
    int correct = 0;
    const int trials = 300;
    for (int t = 0; t < trials; ++t) {
        core::Rng spec_rng(core::mix_seed(11, static_cast<uint64_t>(t)));
        SceneSpec s;
        s.shape = static_cast<ShapeKind>(spec_rng.next_below(kNumShapes));
        s.color = static_cast<ColorKind>(spec_rng.next_below(kNumColors));
        s.cell = static_cast<int>(spec_rng.next_below(kNumCells));
        s.background = static_cast<Background>(spec_rng.next_below(kNumBackgrounds));
        auto img = add_gaussian_noise(render(s, 0), 0.05, rng);
        const auto r = oracle_classify(img);
        if (r.known && r.color == s.color && r.shape == s.shape && r.cell == s.cell) ++correct;
    }
    CHECK(static_cast<double>(correct) / trials >= 0.95);
}

TEST_CASE("blank image is unknown") {
    Image img({3, 32, 32});
    for (auto& v : img.v) v = 0.5f;
    CHECK(!oracle_classify(img).known);
}

TEST_CASE("make_corpus basics") {
    CHECK(make_corpus(RecordKind::t2i, 0, 1).empty());
    auto a = make_corpus(RecordKind::understanding_qa, 50, 7);
    auto b = make_corpus(RecordKind::understanding_qa, 50, 7);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].spec == b[i].spec);
        CHECK(a[i].question == b[i].question);
        CHECK(a[i].answer == b[i].answer);
        CHECK(a[i].seed == b[i].seed);
    }
}

TEST_CASE("t2i color marginal is uniform within 3 percent") {
    auto recs = make_corpus(RecordKind::t2i, 10000, 99);
    std::array<int, kNumColors> counts{};
    for (const auto& r : recs) counts[static_cast<size_t>(r.spec.color)]++;
    for (int c = 0; c < kNumColors; ++c) {
        const double frac = static_cast<double>(counts[static_cast<size_t>(c)]) / 10000.0;
        CHECK(std::fabs(frac - 1.0 / kNumColors) < 0.03);
    }
}

TEST_CASE("editing records change exactly one attribute") {
    auto recs = make_corpus(RecordKind::editing, 500, 21);
    for (const auto& r : recs) {
        REQUIRE(r.target_spec.has_value());
        const auto& src = r.spec;
        const auto& dst = *r.target_spec;
        int diffs = 0;
        if (src.shape != dst.shape) ++diffs;
        if (src.color != dst.color) ++diffs;
        if (src.cell != dst.cell) ++diffs;
        if (src.background != dst.background) ++diffs;
        CHECK(diffs == 1);
        CHECK(src.resolution == dst.resolution);
        CHECK(!r.instruction.empty());
    }
}

TEST_CASE("manifest round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "unigen_test_manifest.jsonl";
    auto recs = make_corpus(RecordKind::editing, 20, 5);
    auto prompts = make_corpus(RecordKind::preference_prompt, 10, 6);
    recs.insert(recs.end(), prompts.begin(), prompts.end());
    write_manifest(dir.string(), recs);
    auto back = read_manifest(dir.string());
    REQUIRE(back.size() == recs.size());
    for (size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].kind == recs[i].kind);
        CHECK(back[i].spec == recs[i].spec);
        CHECK(back[i].target_spec == recs[i].target_spec);
        CHECK(back[i].caption == recs[i].caption);
        CHECK(back[i].instruction == recs[i].instruction);
        CHECK(back[i].seed == recs[i].seed);
    }
    std::filesystem::remove(dir);
}
