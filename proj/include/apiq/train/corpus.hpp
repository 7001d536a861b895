#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "apiq/error.hpp"

namespace apiq::train {

// Byte-level tokens: token i is byte i of the file, so the vocabulary is 256
// and detokenization is the identity. Documents are separated by byte 0x00.
struct Corpus {
    std::vector<std::int32_t> tokens;

    static Corpus from_bytes(std::string_view bytes)
    {
        Corpus c;
        c.tokens.reserve(bytes.size());
        for (unsigned char ch : bytes) c.tokens.push_back(static_cast<std::int32_t>(ch));
        return c;
    }

    static Corpus load(const std::string& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InputError("cannot open corpus file " + path);
        const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        if (bytes.empty()) throw InputError("corpus file " + path + " is empty");
        return from_bytes(bytes);
    }

    std::string bytes() const
    {
        std::string s;
        s.reserve(tokens.size());
        for (auto t : tokens) s.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        return s;
    }

    std::size_t documents() const
    {
        std::size_t n = tokens.empty() ? 0 : 1;
        for (auto t : tokens) n += t == 0;
        return n;
    }

    // First 90% of the bytes for training, the rest held out.
    std::size_t split_point() const { return tokens.size() * 9 / 10; }
    std::span<const std::int32_t> train() const { return std::span(tokens).first(split_point()); }
    std::span<const std::int32_t> heldout() const { return std::span(tokens).subspan(split_point()); }
};

} // namespace apiq::train
