#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unigen/core/rng.hpp"
#include "unigen/data/scene.hpp"

namespace unigen::data {

enum class RecordKind : uint8_t { t2i, understanding_qa, editing, preference_prompt };
enum class QaKind : uint8_t { color, shape, row, column };
enum class EditAttr : uint8_t { color, shape, cell };

inline const char* record_kind_name(RecordKind k) {
    switch (k) {
        case RecordKind::t2i: return "t2i";
        case RecordKind::understanding_qa: return "understanding_qa";
        case RecordKind::editing: return "editing";
        default: return "preference_prompt";
    }
}

inline RecordKind record_kind_from(const std::string& s) {
    if (s == "t2i") return RecordKind::t2i;
    if (s == "understanding_qa") return RecordKind::understanding_qa;
    if (s == "editing") return RecordKind::editing;
    if (s == "preference_prompt") return RecordKind::preference_prompt;
    core::fail("corpus: unknown record kind \"" + s + "\"");
}

struct Record {
    RecordKind kind = RecordKind::t2i;
    SceneSpec spec;                       // scene (source scene for edits)
    std::optional<SceneSpec> target_spec; // editing only
    std::string caption;                  // t2i / preference prompts
    std::string question, answer;         // understanding_qa
    std::string instruction;              // editing
    uint64_t seed = 0;
};

namespace detail {

inline SceneSpec random_spec(core::Rng& rng, int resolution) {
    SceneSpec s;
    s.shape = static_cast<ShapeKind>(rng.next_below(kNumShapes));
    s.color = static_cast<ColorKind>(rng.next_below(kNumColors));
    s.cell = static_cast<int>(rng.next_below(kNumCells));
    s.background = static_cast<Background>(rng.next_below(kNumBackgrounds));
    s.resolution = resolution;
    return s;
}

inline std::pair<std::string, std::string> make_question(const SceneSpec& s, QaKind k) {
    static const char* kRow[3] = {"top", "middle", "bottom"};
    static const char* kCol[3] = {"left", "center", "right"};
    switch (k) {
        case QaKind::color: return {"what color is the shape", color_name(s.color)};
        case QaKind::shape: return {"what shape is shown", shape_name(s.shape)};
        case QaKind::row: return {"which row is the shape in", kRow[s.row()]};
        default: return {"which column is the shape in", kCol[s.col()]};
    }
}

inline std::pair<SceneSpec, std::string> make_edit(const SceneSpec& src, core::Rng& rng) {
    SceneSpec dst = src;
    const auto attr = static_cast<EditAttr>(rng.next_below(3));
    std::string instruction;
    switch (attr) {
        case EditAttr::color: {
            auto c = static_cast<ColorKind>(rng.next_below(kNumColors - 1));
            if (c == src.color) c = static_cast<ColorKind>(static_cast<int>(c) + 1);
            dst.color = c;
            instruction = std::string("change the color to ") + color_name(c);
            break;
        }
        case EditAttr::shape: {
            auto sh = static_cast<ShapeKind>(rng.next_below(kNumShapes - 1));
            if (sh == src.shape) sh = static_cast<ShapeKind>(static_cast<int>(sh) + 1);
            dst.shape = sh;
            instruction = std::string("change the shape to a ") + shape_name(sh);
            break;
        }
        default: {
            int cell = static_cast<int>(rng.next_below(kNumCells - 1));
            if (cell == src.cell) cell = (cell + 1) % kNumCells;
            dst.cell = cell;
            instruction = "move the shape to the " + place_phrase(cell);
            break;
        }
    }
    return {dst, instruction};
}

}  // namespace detail

// Reproducible procedural corpus; record i depends only on (seed, kind, i).
inline std::vector<Record> make_corpus(RecordKind kind, int64_t n, uint64_t seed,
                                       int resolution = 32) {
    core::require(n >= 0, "make_corpus: n must be >= 0");
    std::vector<Record> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        core::Rng rng(core::mix_seed(seed, static_cast<uint64_t>(kind), static_cast<uint64_t>(i)));
        Record r;
        r.kind = kind;
        r.seed = core::mix_seed(seed, static_cast<uint64_t>(kind), static_cast<uint64_t>(i), 0x9e1u);
        r.spec = detail::random_spec(rng, resolution);
        switch (kind) {
            case RecordKind::t2i:
            case RecordKind::preference_prompt:
                r.caption = caption(r.spec);
                break;
            case RecordKind::understanding_qa: {
                const auto qk = static_cast<QaKind>(rng.next_below(4));
                auto [q, a] = detail::make_question(r.spec, qk);
                r.question = q;
                r.answer = a;
                break;
            }
            case RecordKind::editing: {
                auto [dst, instruction] = detail::make_edit(r.spec, rng);
                r.target_spec = dst;
                r.instruction = instruction;
                break;
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

// ---- manifest io (line-delimited json, versioned header line) -------------------

inline constexpr int kManifestVersion = 1;

inline nlohmann::json spec_to_json(const SceneSpec& s) {
    return {{"shape", shape_name(s.shape)},
            {"color", color_name(s.color)},
            {"cell", s.cell},
            {"background", background_name(s.background)},
            {"resolution", s.resolution}};
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
    SceneSpec s;
    const std::string sh = j.at("shape"), co = j.at("color"), bg = j.at("background");
    bool ok = false;
    for (int i = 0; i < kNumShapes; ++i)
        if (sh == shape_name(static_cast<ShapeKind>(i))) s.shape = static_cast<ShapeKind>(i), ok = true;
    core::require(ok, "manifest: bad shape " + sh);
    ok = false;
    for (int i = 0; i < kNumColors; ++i)
        if (co == color_name(static_cast<ColorKind>(i))) s.color = static_cast<ColorKind>(i), ok = true;
    core::require(ok, "manifest: bad color " + co);
    ok = false;
    for (int i = 0; i < kNumBackgrounds; ++i)
        if (bg == background_name(static_cast<Background>(i))) s.background = static_cast<Background>(i), ok = true;
    core::require(ok, "manifest: bad background " + bg);
    s.cell = j.at("cell").get<int>();
    s.resolution = j.at("resolution").get<int>();
    s.validate();
    return s;
}

inline void write_manifest(const std::string& path, const std::vector<Record>& records) {
    std::ofstream out(path);
    core::require(out.good(), "manifest: cannot open " + path + " for writing");
    out << nlohmann::json{{"format", "unigen-corpus"}, {"version", kManifestVersion}}.dump()
        << "\n";
    for (const auto& r : records) {
        nlohmann::json j{{"kind", record_kind_name(r.kind)}, {"spec", spec_to_json(r.spec)},
                         {"seed", r.seed}};
        if (r.target_spec) j["target_spec"] = spec_to_json(*r.target_spec);
        if (!r.caption.empty()) j["caption"] = r.caption;
        if (!r.question.empty()) j["question"] = r.question;
        if (!r.answer.empty()) j["answer"] = r.answer;
        if (!r.instruction.empty()) j["instruction"] = r.instruction;
        out << j.dump() << "\n";
    }
}

inline std::vector<Record> read_manifest(const std::string& path) {
    std::ifstream in(path);
    core::require(in.good(), "manifest: cannot open " + path);
    std::string line;
    core::require(static_cast<bool>(std::getline(in, line)), "manifest: empty file " + path);
    const auto header = nlohmann::json::parse(line);
    core::require(header.value("format", "") == "unigen-corpus",
                  "manifest: bad header in " + path);
    core::require(header.value("version", -1) == kManifestVersion,
                  "manifest: version " + std::to_string(header.value("version", -1)) +
                      " unsupported (expect " + std::to_string(kManifestVersion) + ")");
    std::vector<Record> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        Record r;
        r.kind = record_kind_from(j.at("kind"));
        r.spec = spec_from_json(j.at("spec"));
        if (j.contains("target_spec")) r.target_spec = spec_from_json(j.at("target_spec"));
        r.caption = j.value("caption", "");
        r.question = j.value("question", "");
        r.answer = j.value("answer", "");
        r.instruction = j.value("instruction", "");
        r.seed = j.at("seed").get<uint64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace unigen::data
