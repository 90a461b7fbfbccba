#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "unigen/core/common.hpp"

namespace unigen::text {

// Reserved ids living beyond the word and byte-fallback ranges (our token
// inventory for this artifact; ids are normative for the file formats).
struct SpecialTokens {
    int32_t bos, eos, pad, null_prompt;
    int32_t image_gen_start, image_gen_end;
    int32_t image_und_start, image_und_end;
    int32_t gen_slot, und_slot;  // placeholder positions inside marker pairs
};

// Word-level tokenizer over the closed caption/question/instruction grammar,
// with byte fallback for anything else. Deterministic construction.
class Vocab {
public:
    Vocab() {
        static const char* kWords[] = {
            // caption grammar
            "a", "red", "green", "blue", "yellow", "purple", "orange", "circle", "square",
            "triangle", "in", "the", "top", "middle", "bottom", "left", "center", "right",
            // questions
            "what", "color", "is", "shape", "shown", "which", "row", "column",
            // editing instructions
            "change", "to", "move"};
        for (const char* w : kWords) {
            word_to_id_.emplace(w, static_cast<int32_t>(words_.size()));
            words_.push_back(w);
        }
        byte_base_ = static_cast<int32_t>(words_.size());
        int32_t next = byte_base_ + 256;
        specials_.bos = next++;
        specials_.eos = next++;
        specials_.pad = next++;
        specials_.null_prompt = next++;
        specials_.image_gen_start = next++;
        specials_.image_gen_end = next++;
        specials_.image_und_start = next++;
        specials_.image_und_end = next++;
        specials_.gen_slot = next++;
        specials_.und_slot = next++;
        size_ = next;
    }

    int32_t size() const { return size_; }
    const SpecialTokens& specials() const { return specials_; }
    int32_t text_range_end() const { return byte_base_ + 256; }

    // Word-level with byte fallback. Reversible for single-space-separated
    // ASCII; exact inverse on the whole grammar.
    std::vector<int32_t> tokenize(const std::string& s) const {
        std::vector<int32_t> out;
        std::string word;
        auto flush = [&] {
            if (word.empty()) return;
            auto it = word_to_id_.find(word);
            if (it != word_to_id_.end()) {
                out.push_back(it->second);
            } else {
                for (unsigned char ch : word) out.push_back(byte_base_ + static_cast<int32_t>(ch));
            }
            word.clear();
        };
        for (char ch : s) {
            if (ch == ' ')
                flush();
            else
                word.push_back(ch);
        }
        flush();
        return out;
    }

    std::string detokenize(const std::vector<int32_t>& ids) const {
        std::string out;
        bool in_bytes = false;
        for (int32_t id : ids) {
            core::require(id >= 0 && id < text_range_end(),
                          "detokenize: id " + std::to_string(id) + " is not a text token");
            if (id < byte_base_) {
                if (!out.empty()) out.push_back(' ');
                out += words_[static_cast<size_t>(id)];
                in_bytes = false;
            } else {
                if (!in_bytes && !out.empty()) out.push_back(' ');
                out.push_back(static_cast<char>(id - byte_base_));
                in_bytes = true;
            }
        }
        return out;
    }

    std::string token_name(int32_t id) const {
        if (id < byte_base_) return words_[static_cast<size_t>(id)];
        if (id < byte_base_ + 256) return std::string(1, static_cast<char>(id - byte_base_));
        if (id == specials_.bos) return "<bos>";
        if (id == specials_.eos) return "<eos>";
        if (id == specials_.pad) return "<pad>";
        if (id == specials_.null_prompt) return "<null>";
        if (id == specials_.image_gen_start) return "<gen>";
        if (id == specials_.image_gen_end) return "</gen>";
        if (id == specials_.image_und_start) return "<und>";
        if (id == specials_.image_und_end) return "</und>";
        if (id == specials_.gen_slot) return "<gslot>";
        if (id == specials_.und_slot) return "<uslot>";
        return "<invalid>";
    }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int32_t> word_to_id_;
    int32_t byte_base_ = 0;
    int32_t size_ = 0;
    SpecialTokens specials_{};
};

}  // namespace unigen::text
