#pragma once

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "unigen/model/backbone.hpp"
#include "unigen/pipe/optimizer.hpp"
#include "unigen/quant/tokenizer.hpp"

namespace unigen::pipe {

inline constexpr uint32_t kCheckpointMagic = 0x55474350;  // "UGCP"
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <class V>
void write_pod(std::ostream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::istream& in) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    core::require(in.good(), "checkpoint: truncated file");
    return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
    const uint32_t n = read_pod<uint32_t>(in);
    core::require(n <= (1u << 20), "checkpoint: implausible string length");
    std::string s(n, '\0');
    in.read(s.data(), n);
    core::require(in.good(), "checkpoint: truncated file");
    return s;
}

template <class T>
void write_tensor(std::ostream& out, const core::Tensor<T>& t) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) write_pod<int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(T)));
}

template <class T>
core::Tensor<T> read_tensor(std::istream& in) {
    const uint32_t rank = read_pod<uint32_t>(in);
    core::require(rank <= 8, "checkpoint: implausible tensor rank");
    core::Shape shape(rank);
    for (auto& d : shape) d = read_pod<int64_t>(in);
    core::Tensor<T> t(shape);
    in.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(T)));
    core::require(in.good(), "checkpoint: truncated file");
    return t;
}

inline void write_schedule(std::ostream& out, const quant::ScaleSchedule& s) {
    write_pod<int32_t>(out, s.latent_dim);
    write_pod<int32_t>(out, s.base_h);
    write_pod<int32_t>(out, s.base_w);
    write_pod<uint32_t>(out, static_cast<uint32_t>(s.scales.size()));
    for (auto [h, w] : s.scales) {
        write_pod<int32_t>(out, h);
        write_pod<int32_t>(out, w);
    }
}

inline quant::ScaleSchedule read_schedule(std::istream& in) {
    quant::ScaleSchedule s;
    s.latent_dim = read_pod<int32_t>(in);
    s.base_h = read_pod<int32_t>(in);
    s.base_w = read_pod<int32_t>(in);
    const uint32_t n = read_pod<uint32_t>(in);
    core::require(n <= 64, "checkpoint: implausible scale count");
    for (uint32_t i = 0; i < n; ++i) {
        const int32_t h = read_pod<int32_t>(in);
        const int32_t w = read_pod<int32_t>(in);
        s.scales.emplace_back(h, w);
    }
    return s;
}

}  // namespace detail

// Full training state: model, frozen tokenizer with calibration gains,
// optimizer moments, stage cursor and rng state. Reload then re-save is
// byte-identical (fixed field order, no timestamps).
template <class T>
struct Checkpoint {
    model::ModelConfig config;
    std::vector<model::Param<T>> model_params;
    quant::ScaleSchedule tok_schedule;
    std::vector<double> tok_calibration;
    int32_t tok_c1 = 24, tok_c2 = 48;
    std::vector<std::pair<std::string, core::Tensor<T>>> tok_params;
    bool tok_trainable = false;

    bool has_optimizer = false;
    int64_t opt_step = 0;
    std::vector<std::pair<std::string, typename AdamW<T>::Moments>> opt_state;

    std::vector<std::string> completed_stages;
    std::string current_stage;
    int64_t steps_done = 0;
    uint64_t rng_state = 0;

    // Reference snapshot for a direct-preference phase in progress.
    std::vector<std::pair<std::string, core::Tensor<T>>> ref_params;
};

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
    std::ofstream out(path, std::ios::binary);
    core::require(out.good(), "checkpoint: cannot open " + path + " for writing");
    using namespace detail;
    write_pod<uint32_t>(out, kCheckpointMagic);
    write_pod<uint32_t>(out, kCheckpointVersion);
    write_pod<uint8_t>(out, sizeof(T) == 4 ? 0 : 1);

    const auto& c = ck.config;
    write_pod<int32_t>(out, c.d_model);
    write_pod<int32_t>(out, c.n_layers_llm);
    write_pod<int32_t>(out, c.n_heads);
    write_pod<int32_t>(out, c.d_visdec);
    write_pod<int32_t>(out, c.n_layers_visdec);
    write_pod<int32_t>(out, c.n_heads_visdec);
    write_pod<int32_t>(out, c.mlp_ratio);
    write_pod<int32_t>(out, c.proj_hidden);
    write_pod<int32_t>(out, c.und_c1);
    write_pod<int32_t>(out, c.und_c2);
    write_pod<int32_t>(out, c.vocab_size);
    write_pod<int64_t>(out, c.max_seq);
    write_pod<double>(out, c.dropout);
    write_schedule(out, c.schedule);

    write_pod<uint32_t>(out, static_cast<uint32_t>(ck.model_params.size()));
    for (const auto& p : ck.model_params) {
        write_string(out, p.name);
        write_string(out, p.group);
        write_pod<uint8_t>(out, p.trainable ? 1 : 0);
        write_tensor(out, p.value);
    }

    write_schedule(out, ck.tok_schedule);
    write_pod<uint32_t>(out, static_cast<uint32_t>(ck.tok_calibration.size()));
    for (double g : ck.tok_calibration) write_pod<double>(out, g);
    write_pod<int32_t>(out, ck.tok_c1);
    write_pod<int32_t>(out, ck.tok_c2);
    write_pod<uint8_t>(out, ck.tok_trainable ? 1 : 0);
    write_pod<uint32_t>(out, static_cast<uint32_t>(ck.tok_params.size()));
    for (const auto& [name, value] : ck.tok_params) {
        write_string(out, name);
        write_tensor(out, value);
    }

    write_pod<uint8_t>(out, ck.has_optimizer ? 1 : 0);
    if (ck.has_optimizer) {
        write_pod<int64_t>(out, ck.opt_step);
        write_pod<uint32_t>(out, static_cast<uint32_t>(ck.opt_state.size()));
        for (const auto& [name, mo] : ck.opt_state) {
            write_string(out, name);
            write_pod<uint64_t>(out, mo.m.size());
            out.write(reinterpret_cast<const char*>(mo.m.data()),
                      static_cast<std::streamsize>(mo.m.size() * sizeof(T)));
            out.write(reinterpret_cast<const char*>(mo.v.data()),
                      static_cast<std::streamsize>(mo.v.size() * sizeof(T)));
        }
    }

    write_pod<uint32_t>(out, static_cast<uint32_t>(ck.completed_stages.size()));
    for (const auto& s : ck.completed_stages) write_string(out, s);
    write_string(out, ck.current_stage);
    write_pod<int64_t>(out, ck.steps_done);
    write_pod<uint64_t>(out, ck.rng_state);

    write_pod<uint32_t>(out, static_cast<uint32_t>(ck.ref_params.size()));
    for (const auto& [name, value] : ck.ref_params) {
        write_string(out, name);
        write_tensor(out, value);
    }
    core::require(out.good(), "checkpoint: write failed for " + path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    core::require(in.good(), "checkpoint: cannot open " + path);
    using namespace detail;
    const uint32_t magic = read_pod<uint32_t>(in);
    core::require(magic == kCheckpointMagic, "checkpoint: corrupted header in " + path);
    const uint32_t version = read_pod<uint32_t>(in);
    core::require(version == kCheckpointVersion,
                  "checkpoint: version " + std::to_string(version) + " unsupported (expect " +
                      std::to_string(kCheckpointVersion) + ")");
    const uint8_t dtype = read_pod<uint8_t>(in);
    core::require(dtype == (sizeof(T) == 4 ? 0 : 1),
                  "checkpoint: scalar type mismatch (file has " +
                      std::string(dtype == 0 ? "f32" : "f64") + ")");

    Checkpoint<T> ck;
    auto& c = ck.config;
    c.d_model = read_pod<int32_t>(in);
    c.n_layers_llm = read_pod<int32_t>(in);
    c.n_heads = read_pod<int32_t>(in);
    c.d_visdec = read_pod<int32_t>(in);
    c.n_layers_visdec = read_pod<int32_t>(in);
    c.n_heads_visdec = read_pod<int32_t>(in);
    c.mlp_ratio = read_pod<int32_t>(in);
    c.proj_hidden = read_pod<int32_t>(in);
    c.und_c1 = read_pod<int32_t>(in);
    c.und_c2 = read_pod<int32_t>(in);
    c.vocab_size = read_pod<int32_t>(in);
    c.max_seq = read_pod<int64_t>(in);
    c.dropout = read_pod<double>(in);
    c.schedule = read_schedule(in);

    const uint32_t np = read_pod<uint32_t>(in);
    core::require(np <= (1u << 20), "checkpoint: implausible parameter count");
    for (uint32_t i = 0; i < np; ++i) {
        model::Param<T> p;
        p.name = read_string(in);
        p.group = read_string(in);
        p.trainable = read_pod<uint8_t>(in) != 0;
        p.value = read_tensor<T>(in);
        ck.model_params.push_back(std::move(p));
    }

    ck.tok_schedule = read_schedule(in);
    const uint32_t ncal = read_pod<uint32_t>(in);
    core::require(ncal <= 64, "checkpoint: implausible calibration count");
    for (uint32_t i = 0; i < ncal; ++i) ck.tok_calibration.push_back(read_pod<double>(in));
    ck.tok_c1 = read_pod<int32_t>(in);
    ck.tok_c2 = read_pod<int32_t>(in);
    ck.tok_trainable = read_pod<uint8_t>(in) != 0;
    const uint32_t ntp = read_pod<uint32_t>(in);
    core::require(ntp <= (1u << 16), "checkpoint: implausible tokenizer parameter count");
    for (uint32_t i = 0; i < ntp; ++i) {
        std::string name = read_string(in);
        ck.tok_params.emplace_back(std::move(name), read_tensor<T>(in));
    }

    ck.has_optimizer = read_pod<uint8_t>(in) != 0;
    if (ck.has_optimizer) {
        ck.opt_step = read_pod<int64_t>(in);
        const uint32_t ns = read_pod<uint32_t>(in);
        core::require(ns <= (1u << 20), "checkpoint: implausible optimizer entry count");
        for (uint32_t i = 0; i < ns; ++i) {
            std::string name = read_string(in);
            const uint64_t n = read_pod<uint64_t>(in);
            core::require(n <= (1ull << 32), "checkpoint: implausible moment size");
            typename AdamW<T>::Moments mo;
            mo.m.resize(n);
            mo.v.resize(n);
            in.read(reinterpret_cast<char*>(mo.m.data()), static_cast<std::streamsize>(n * sizeof(T)));
            in.read(reinterpret_cast<char*>(mo.v.data()), static_cast<std::streamsize>(n * sizeof(T)));
            core::require(in.good(), "checkpoint: truncated file");
            ck.opt_state.emplace_back(std::move(name), std::move(mo));
        }
    }

    const uint32_t nc = read_pod<uint32_t>(in);
    core::require(nc <= 64, "checkpoint: implausible stage count");
    for (uint32_t i = 0; i < nc; ++i) ck.completed_stages.push_back(read_string(in));
    ck.current_stage = read_string(in);
    ck.steps_done = read_pod<int64_t>(in);
    ck.rng_state = read_pod<uint64_t>(in);

    const uint32_t nr = read_pod<uint32_t>(in);
    core::require(nr <= (1u << 20), "checkpoint: implausible reference parameter count");
    for (uint32_t i = 0; i < nr; ++i) {
        std::string name = read_string(in);
        ck.ref_params.emplace_back(std::move(name), read_tensor<T>(in));
    }

    // Trailing data means the writer and reader disagree about the format.
    in.peek();
    core::require(in.eof(), "checkpoint: trailing bytes in " + path);
    return ck;
}

}  // namespace unigen::pipe
