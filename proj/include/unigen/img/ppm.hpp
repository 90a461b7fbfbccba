#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "unigen/data/render.hpp"

namespace unigen::img {

// Binary P6, 8 bits per channel.
inline void write_ppm(const std::string& path, const data::Image& image) {
    core::require(image.rank() == 3 && image.dim(0) == 3, "write_ppm: expect [3,H,W]");
    const int64_t H = image.dim(1), W = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    core::require(out.good(), "write_ppm: cannot open " + path);
    out << "P6\n" << W << " " << H << "\n255\n";
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = image.v[static_cast<size_t>((c * H + y) * W + x)];
                v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                out.put(static_cast<char>(static_cast<int>(v * 255.0f + 0.5f)));
            }
    core::require(out.good(), "write_ppm: write failed for " + path);
}

inline data::Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    core::require(in.good(), "read_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    core::require(magic == "P6", "read_ppm: not a binary ppm: " + path);
    int64_t w = 0, h = 0, maxval = 0;
    auto next_int = [&](int64_t& v) {
        // Skip whitespace and '#' comments.
        for (;;) {
            int ch = in.peek();
            if (ch == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(ch)) {
                in.get();
            } else {
                break;
            }
        }
        in >> v;
    };
    next_int(w);
    next_int(h);
    next_int(maxval);
    core::require(in.good() && w > 0 && h > 0 && maxval == 255, "read_ppm: bad header in " + path);
    in.get();  // single whitespace after maxval
    data::Image img({3, h, w});
    std::vector<unsigned char> row(static_cast<size_t>(w * 3));
    for (int64_t y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        core::require(in.good(), "read_ppm: truncated pixel data in " + path);
        for (int64_t x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.v[static_cast<size_t>((c * h + y) * w + x)] =
                    static_cast<float>(row[static_cast<size_t>(x * 3 + c)]) / 255.0f;
    }
    return img;
}

}  // namespace unigen::img
