#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "unigen/core/common.hpp"

namespace unigen::data {

enum class ShapeKind : uint8_t { circle, square, triangle };
enum class ColorKind : uint8_t { red, green, blue, yellow, purple, orange };
enum class Background : uint8_t { white, black, gray };

constexpr int kNumShapes = 3;
constexpr int kNumColors = 6;
constexpr int kNumCells = 9;
constexpr int kNumBackgrounds = 3;

inline const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        default: return "triangle";
    }
}

inline const char* color_name(ColorKind c) {
    switch (c) {
        case ColorKind::red: return "red";
        case ColorKind::green: return "green";
        case ColorKind::blue: return "blue";
        case ColorKind::yellow: return "yellow";
        case ColorKind::purple: return "purple";
        default: return "orange";
    }
}

inline const char* background_name(Background b) {
    switch (b) {
        case Background::white: return "white";
        case Background::black: return "black";
        default: return "gray";
    }
}

inline std::array<double, 3> color_rgb(ColorKind c) {
    switch (c) {
        case ColorKind::red: return {1.0, 0.0, 0.0};
        case ColorKind::green: return {0.0, 1.0, 0.0};
        case ColorKind::blue: return {0.0, 0.0, 1.0};
        case ColorKind::yellow: return {1.0, 1.0, 0.0};
        case ColorKind::purple: return {0.5, 0.0, 0.5};
        default: return {1.0, 0.5, 0.0};  // orange
    }
}

inline std::array<double, 3> background_rgb(Background b) {
    switch (b) {
        case Background::white: return {1.0, 1.0, 1.0};
        case Background::black: return {0.0, 0.0, 0.0};
        default: return {0.5, 0.5, 0.5};
    }
}

// One procedural scene: a colored shape in one cell of a 3x3 grid.
struct SceneSpec {
    ShapeKind shape = ShapeKind::circle;
    ColorKind color = ColorKind::red;
    int cell = 0;  // row-major, 0..8
    Background background = Background::white;
    int resolution = 32;  // 32 or 64

    int row() const { return cell / 3; }
    int col() const { return cell % 3; }

    void validate() const {
        core::require(cell >= 0 && cell < kNumCells, "scene: cell out of range");
        core::require(resolution == 32 || resolution == 64, "scene: unsupported resolution");
    }

    bool operator==(const SceneSpec&) const = default;
};

// Grammar: "a {color} {shape} in the {place}", where place names the grid
// cell ("top left", ..., "bottom right") and the middle cell is "center".
inline std::string place_phrase(int cell) {
    static const char* kRow[3] = {"top", "middle", "bottom"};
    static const char* kCol[3] = {"left", "center", "right"};
    const int r = cell / 3, c = cell % 3;
    if (r == 1 && c == 1) return "center";
    return std::string(kRow[r]) + " " + kCol[c];
}

inline std::string caption(const SceneSpec& s) {
    s.validate();
    return std::string("a ") + color_name(s.color) + " " + shape_name(s.shape) + " in the " +
           place_phrase(s.cell);
}

// Inverse of caption(). Background and resolution are not caption-visible;
// the returned spec carries defaults for them.
inline SceneSpec parse_caption(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ') {
            if (!cur.empty()) words.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) words.push_back(cur);

    core::require(words.size() >= 6 && words.size() <= 7 && words[0] == "a" && words[3] == "in" &&
                      words[4] == "the",
                  "parse_caption: not a grammar caption: \"" + text + "\"");
    SceneSpec s;
    bool found = false;
    for (int c = 0; c < kNumColors; ++c)
        if (words[1] == color_name(static_cast<ColorKind>(c))) {
            s.color = static_cast<ColorKind>(c);
            found = true;
        }
    core::require(found, "parse_caption: unknown color \"" + words[1] + "\"");
    found = false;
    for (int k = 0; k < kNumShapes; ++k)
        if (words[2] == shape_name(static_cast<ShapeKind>(k))) {
            s.shape = static_cast<ShapeKind>(k);
            found = true;
        }
    core::require(found, "parse_caption: unknown shape \"" + words[2] + "\"");

    found = false;
    for (int cell = 0; cell < kNumCells; ++cell) {
        const std::string place = place_phrase(cell);
        const std::string got = words.size() == 6 ? words[5] : words[5] + " " + words[6];
        if (place == got) {
            s.cell = cell;
            found = true;
        }
    }
    core::require(found, "parse_caption: unknown place in \"" + text + "\"");
    return s;
}

// All caption-visible specs: 3 shapes x 6 colors x 9 cells = 162.
inline std::vector<SceneSpec> enumerate_caption_specs() {
    std::vector<SceneSpec> out;
    for (int sh = 0; sh < kNumShapes; ++sh)
        for (int co = 0; co < kNumColors; ++co)
            for (int cell = 0; cell < kNumCells; ++cell) {
                SceneSpec s;
                s.shape = static_cast<ShapeKind>(sh);
                s.color = static_cast<ColorKind>(co);
                s.cell = cell;
                out.push_back(s);
            }
    return out;
}

}  // namespace unigen::data
