#pragma once

#include <cstdint>
#include <vector>

#include "apiq/quant/quant.hpp"

namespace apiq::quant {

// Bit-packed code matrix. Within each row, code j occupies bits
// [j*b, j*b + b) of the row's bitstream, least significant bit first; byte k
// of a row holds stream bits [8k, 8k + 8). Rows start on byte boundaries and
// trailing pad bits are zero.
struct PackedCodes {
    std::size_t rows = 0, cols = 0;
    int bits = 0;
    std::vector<std::uint8_t> bytes;

    static std::size_t row_bytes(std::size_t cols, int bits) { return (cols * static_cast<std::size_t>(bits) + 7) / 8; }
    std::size_t row_bytes() const { return row_bytes(cols, bits); }

    friend bool operator==(const PackedCodes&, const PackedCodes&) = default;
};

inline PackedCodes pack(const Codes& codes, const QuantSpec& spec)
{
    spec.validate();
    const int b = spec.bits;
    if (codes.values.size() != codes.rows * codes.cols)
        throw DimensionError("pack: code buffer does not match its shape");
    PackedCodes out{codes.rows, codes.cols, b, {}};
    const std::size_t rb = out.row_bytes();
    out.bytes.assign(codes.rows * rb, 0);
    for (std::size_t r = 0; r < codes.rows; ++r) {
        std::uint8_t* row = out.bytes.data() + r * rb;
        for (std::size_t j = 0; j < codes.cols; ++j) {
            const unsigned v = codes.values[r * codes.cols + j];
            if (v > static_cast<unsigned>(spec.levels()))
                throw ArgumentError("pack: code " + std::to_string(v) + " exceeds " + std::to_string(b) + "-bit range");
            const std::size_t bit0 = j * static_cast<std::size_t>(b);
            for (int k = 0; k < b; ++k) {
                if ((v >> k) & 1u) {
                    const std::size_t bit = bit0 + static_cast<std::size_t>(k);
                    row[bit >> 3] |= static_cast<std::uint8_t>(1u << (bit & 7));
                }
            }
        }
    }
    return out;
}

inline Codes unpack(const PackedCodes& packed, const QuantSpec& spec)
{
    spec.validate();
    if (packed.bits != spec.bits)
        throw FormatError("unpack: stored width " + std::to_string(packed.bits) + " != requested " +
                              std::to_string(spec.bits),
                          0);
    const std::size_t rb = packed.row_bytes();
    if (packed.bytes.size() != packed.rows * rb)
        throw FormatError("unpack: expected " + std::to_string(packed.rows * rb) + " bytes, found " +
                              std::to_string(packed.bytes.size()),
                          std::min(packed.bytes.size(), packed.rows * rb));
    const int b = spec.bits;
    Codes out{packed.rows, packed.cols, std::vector<std::uint8_t>(packed.rows * packed.cols)};
    for (std::size_t r = 0; r < packed.rows; ++r) {
        const std::uint8_t* row = packed.bytes.data() + r * rb;
        for (std::size_t j = 0; j < packed.cols; ++j) {
            unsigned v = 0;
            const std::size_t bit0 = j * static_cast<std::size_t>(b);
            for (int k = 0; k < b; ++k) {
                const std::size_t bit = bit0 + static_cast<std::size_t>(k);
                v |= static_cast<unsigned>((row[bit >> 3] >> (bit & 7)) & 1u) << k;
            }
            out.values[r * packed.cols + j] = static_cast<std::uint8_t>(v);
        }
    }
    return out;
}

} // namespace apiq::quant
