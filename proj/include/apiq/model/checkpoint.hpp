#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "apiq/model/transformer.hpp"

namespace apiq::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// File layout (all integers little-endian):
//   "APIQCKPT" | version u32 | count u32
//   count x { name_len u32 | name | dtype u8 | bits u8 | rank u8 | reserved u8 |
//             dims u64[rank] | offset u64 | length u64 }
//   zero padding, then each tensor's bytes at its 64-aligned absolute offset.
// dtype 0 = f32, 1 = f64, 2 = packed codes (dims = logical rows, cols; bits
// is the code width; bytes as in quant::PackedCodes).
inline constexpr char kMagic[8] = {'A', 'P', 'I', 'Q', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kAlign = 64;

enum class DType : std::uint8_t { F32 = 0, F64 = 1, Packed = 2 };

struct Record {
    DType dtype = DType::F32;
    std::uint8_t bits = 0;
    Shape dims;
    std::vector<std::uint8_t> bytes;
};

// Named tensors in insertion order.
class Archive {
public:
    void put_f32(const std::string& name, const Tensor<float>& t) { put(name, DType::F32, 0, t.shape(), raw(t)); }
    void put_f64(const std::string& name, const Tensor<double>& t) { put(name, DType::F64, 0, t.shape(), raw(t)); }
    void put_packed(const std::string& name, const quant::PackedCodes& p)
    {
        put(name, DType::Packed, static_cast<std::uint8_t>(p.bits), {p.rows, p.cols}, p.bytes);
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }

    const Record& get(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end()) throw FormatError("checkpoint: missing tensor '" + name + "'", 0);
        return records_[it->second];
    }

    Tensor<float> f32(const std::string& name) const { return typed<float>(name, DType::F32); }
    Tensor<double> f64(const std::string& name) const { return typed<double>(name, DType::F64); }

    quant::PackedCodes packed(const std::string& name) const
    {
        const Record& r = get(name);
        if (r.dtype != DType::Packed) throw FormatError("checkpoint: '" + name + "' is not packed codes", 0);
        return quant::PackedCodes{r.dims[0], r.dims[1], r.bits, r.bytes};
    }

    std::vector<std::uint8_t> serialize() const
    {
        std::vector<std::uint8_t> out(kMagic, kMagic + 8);
        append_u32(out, kVersion);
        append_u32(out, static_cast<std::uint32_t>(order_.size()));
        std::size_t dir = out.size();
        for (const auto& n : order_) dir += 4 + n.size() + 4 + 8 * records_[index_.at(n)].dims.size() + 16;
        std::size_t off = align_up(dir);
        std::vector<std::uint64_t> offsets;
        for (const auto& n : order_) {
            offsets.push_back(off);
            off = align_up(off + records_[index_.at(n)].bytes.size());
        }
        for (std::size_t i = 0; i < order_.size(); ++i) {
            const Record& r = records_[index_.at(order_[i])];
            append_u32(out, static_cast<std::uint32_t>(order_[i].size()));
            out.insert(out.end(), order_[i].begin(), order_[i].end());
            out.push_back(static_cast<std::uint8_t>(r.dtype));
            out.push_back(r.bits);
            out.push_back(static_cast<std::uint8_t>(r.dims.size()));
            out.push_back(0);
            for (auto d : r.dims) append_u64(out, d);
            append_u64(out, offsets[i]);
            append_u64(out, r.bytes.size());
        }
        for (std::size_t i = 0; i < order_.size(); ++i) {
            const Record& r = records_[index_.at(order_[i])];
            out.resize(offsets[i], 0);
            out.insert(out.end(), r.bytes.begin(), r.bytes.end());
        }
        out.resize(align_up(out.size()), 0);
        return out;
    }

    static Archive parse(const std::vector<std::uint8_t>& buf)
    {
        Reader rd{buf};
        if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 8) != 0) throw FormatError("checkpoint: bad magic", 0);
        rd.pos = 8;
        const std::uint32_t ver = rd.u32();
        if (ver != kVersion)
            throw FormatError("checkpoint: unsupported version " + std::to_string(ver), 8);
        const std::uint32_t count = rd.u32();
        Archive a;
        std::uint64_t prev_end = 0;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::size_t entry_at = rd.pos;
            const std::uint32_t len = rd.u32();
            std::string name = rd.str(len);
            Record r;
            const std::uint8_t dt = rd.u8();
            if (dt > 2) throw FormatError("checkpoint: unknown dtype " + std::to_string(dt), rd.pos - 1);
            r.dtype = static_cast<DType>(dt);
            r.bits = rd.u8();
            const std::uint8_t rank = rd.u8();
            rd.u8();
            for (std::uint8_t k = 0; k < rank; ++k) r.dims.push_back(static_cast<std::size_t>(rd.u64()));
            const std::size_t off_at = rd.pos;
            const std::uint64_t off = rd.u64(), len_b = rd.u64();
            if (off % kAlign != 0) throw FormatError("checkpoint: misaligned data offset for '" + name + "'", off_at);
            if (off < prev_end) throw FormatError("checkpoint: overlapping data for '" + name + "'", off_at);
            if (off > buf.size() || len_b > buf.size() - off)
                throw FormatError("checkpoint: data for '" + name + "' runs past end of file (truncated)", off_at);
            if (len_b != expected_bytes(r))
                throw FormatError("checkpoint: '" + name + "' has " + std::to_string(len_b) + " bytes, shape needs " +
                                      std::to_string(expected_bytes(r)),
                                  off_at + 8);
            if (a.has(name)) throw FormatError("checkpoint: duplicate tensor '" + name + "'", entry_at);
            prev_end = off + len_b;
            r.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(off),
                           buf.begin() + static_cast<std::ptrdiff_t>(off + len_b));
            a.insert(std::move(name), std::move(r));
        }
        return a;
    }

    void save(const std::string& path) const
    {
        const auto bytes = serialize();
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw InputError("cannot open '" + path + "' for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw InputError("write to '" + path + "' failed");
    }

    static Archive load(const std::string& path)
    {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw InputError("cannot open checkpoint '" + path + "'");
        std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return parse(buf);
    }

private:
    struct Reader {
        const std::vector<std::uint8_t>& buf;
        std::size_t pos = 0;

        void need(std::size_t n) const
        {
            if (n > buf.size() - pos) throw FormatError("checkpoint: truncated directory", pos);
        }
        std::uint8_t u8()
        {
            need(1);
            return buf[pos++];
        }
        std::uint32_t u32()
        {
            need(4);
            std::uint32_t v;
            std::memcpy(&v, buf.data() + pos, 4);
            pos += 4;
            return v;
        }
        std::uint64_t u64()
        {
            need(8);
            std::uint64_t v;
            std::memcpy(&v, buf.data() + pos, 8);
            pos += 8;
            return v;
        }
        std::string str(std::size_t n)
        {
            need(n);
            std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
            pos += n;
            return s;
        }
    };

    static std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

    static std::uint64_t expected_bytes(const Record& r)
    {
        if (r.dtype == DType::Packed) {
            if (r.dims.size() != 2 || (r.bits != 2 && r.bits != 3 && r.bits != 4 && r.bits != 8)) return ~0ull;
            return r.dims[0] * quant::PackedCodes::row_bytes(r.dims[1], r.bits);
        }
        return shape_numel(r.dims) * (r.dtype == DType::F32 ? 4u : 8u);
    }

    template <typename T>
    static std::vector<std::uint8_t> raw(const Tensor<T>& t)
    {
        std::vector<std::uint8_t> b(t.numel() * sizeof(T));
        if (!b.empty()) std::memcpy(b.data(), t.data().data(), b.size());
        return b;
    }

    static void append_u32(std::vector<std::uint8_t>& o, std::uint32_t v)
    {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        o.insert(o.end(), p, p + 4);
    }
    static void append_u64(std::vector<std::uint8_t>& o, std::uint64_t v)
    {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        o.insert(o.end(), p, p + 8);
    }

    void put(const std::string& name, DType dt, std::uint8_t bits, Shape dims, std::vector<std::uint8_t> bytes)
    {
        if (name.empty()) throw ArgumentError("checkpoint: empty tensor name");
        if (has(name)) throw ArgumentError("checkpoint: duplicate tensor '" + name + "'");
        if (dims.size() > 255) throw ArgumentError("checkpoint: rank too large");
        insert(name, Record{dt, bits, std::move(dims), std::move(bytes)});
    }

    void insert(std::string name, Record r)
    {
        index_[name] = records_.size();
        order_.push_back(std::move(name));
        records_.push_back(std::move(r));
    }

    template <typename T>
    Tensor<T> typed(const std::string& name, DType want) const
    {
        const Record& r = get(name);
        if (r.dtype != want) throw FormatError("checkpoint: '" + name + "' has unexpected dtype", 0);
        Tensor<T> t(r.dims);
        if (!r.bytes.empty()) std::memcpy(t.data().data(), r.bytes.data(), r.bytes.size());
        return t;
    }

    std::vector<std::string> order_;
    std::map<std::string, std::size_t> index_;
    std::vector<Record> records_;
};

// --- model <-> archive -------------------------------------------------------

inline Tensor<double> config_tensor(const ModelConfig& c)
{
    return Tensor<double>({7}, {static_cast<double>(c.vocab), static_cast<double>(c.d_model),
                                static_cast<double>(c.n_heads), static_cast<double>(c.d_ff),
                                static_cast<double>(c.n_blocks), static_cast<double>(c.max_seq), c.rope_theta});
}

inline ModelConfig config_from(const Tensor<double>& t)
{
    if (t.shape() != Shape{7}) throw FormatError("checkpoint: model.config must have 7 entries", 0);
    for (std::size_t i = 0; i < 6; ++i)
        if (!(t[i] >= 1.0) || t[i] != std::floor(t[i]) || t[i] > 1e9)
            throw FormatError("checkpoint: model.config entry " + std::to_string(i) + " is not a positive integer", 0);
    ModelConfig c{static_cast<std::size_t>(t[0]), static_cast<std::size_t>(t[1]), static_cast<std::size_t>(t[2]),
                  static_cast<std::size_t>(t[3]), static_cast<std::size_t>(t[4]), static_cast<std::size_t>(t[5]), t[6]};
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: invalid model.config: ") + e.what(), 0);
    }
    return c;
}

// Full-precision weights are written when present; quantized layers add
// .qmeta [bits, group, granularity, rank, alpha], .qcodes, .scale, .zero,
// .gamma, .beta and, for rank > 0, .lora_a and .lora_b.
inline Archive to_archive(const TinyTransformer<float>& m)
{
    Archive a;
    a.put_f64("model.config", config_tensor(m.cfg));
    a.put_f32("tok_embedding", m.tok_embedding);
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        const auto& blk = m.blocks[b];
        a.put_f32(block_prefix(b) + ".attn_norm", blk.attn_norm);
        a.put_f32(block_prefix(b) + ".ffn_norm", blk.ffn_norm);
        for (Proj p : kAllProj) {
            const auto& l = blk[p];
            const auto name = layer_name(b, p);
            if (!l.weight.empty()) a.put_f32(name, l.weight);
            if (!l.q) continue;
            const auto& q = *l.q;
            a.put_f64(name + ".qmeta",
                      Tensor<double>({5}, {static_cast<double>(q.spec.bits), static_cast<double>(q.spec.group),
                                           q.spec.granularity == quant::ClipGranularity::PerMatrix ? 0.0 : 1.0,
                                           static_cast<double>(q.lora.rank()), q.lora.alpha}));
            a.put_packed(name + ".qcodes", q.codes);
            a.put_f32(name + ".scale", q.params.scale);
            Tensor<float> z(q.params.scale.shape());
            for (std::size_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(q.params.zero[i]);
            a.put_f32(name + ".zero", z);
            a.put_f32(name + ".gamma", q.clip.gamma);
            a.put_f32(name + ".beta", q.clip.beta);
            if (q.lora.rank() > 0) {
                a.put_f32(name + ".lora_a", q.lora.A);
                a.put_f32(name + ".lora_b", q.lora.B);
            }
        }
    }
    a.put_f32("final_norm", m.final_norm);
    return a;
}

namespace detail {

inline Tensor<float> expect_shape(Tensor<float> t, const Shape& want, const std::string& name)
{
    if (t.shape() != want)
        throw FormatError("checkpoint: '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                              shape_str(want),
                          0);
    return t;
}

} // namespace detail

inline TinyTransformer<float> from_archive(const Archive& a)
{
    TinyTransformer<float> m;
    m.cfg = config_from(a.f64("model.config"));
    const auto& c = m.cfg;
    m.tok_embedding = detail::expect_shape(a.f32("tok_embedding"), {c.vocab, c.d_model}, "tok_embedding");
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
        Block<float> blk;
        blk.attn_norm = detail::expect_shape(a.f32(block_prefix(b) + ".attn_norm"), {c.d_model}, "attn_norm");
        blk.ffn_norm = detail::expect_shape(a.f32(block_prefix(b) + ".ffn_norm"), {c.d_model}, "ffn_norm");
        for (Proj p : kAllProj) {
            const auto name = layer_name(b, p);
            const std::size_t d1 = proj_in(c, p), d2 = proj_out(c, p);
            auto& l = blk[p];
            if (a.has(name)) l.weight = detail::expect_shape(a.f32(name), {d1, d2}, name);
            if (!a.has(name + ".qmeta")) {
                if (l.weight.empty()) throw FormatError("checkpoint: layer '" + name + "' has no weights", 0);
                continue;
            }
            const auto meta = a.f64(name + ".qmeta");
            if (meta.shape() != Shape{5}) throw FormatError("checkpoint: bad qmeta for '" + name + "'", 0);
            QuantizedLinear<float> q;
            try {
                q.spec = quant::QuantSpec{static_cast<int>(meta[0]), static_cast<std::size_t>(meta[1]),
                                          meta[2] == 0.0 ? quant::ClipGranularity::PerMatrix
                                                         : quant::ClipGranularity::PerGroup};
                q.spec.validate_for(d1);
            } catch (const ConfigError& e) {
                throw FormatError("checkpoint: '" + name + "' quantization metadata: " + e.what(), 0);
            }
            q.codes = a.packed(name + ".qcodes");
            if (q.codes.rows != d1 || q.codes.cols != d2 || q.codes.bits != q.spec.bits)
                throw FormatError("checkpoint: '" + name + ".qcodes' does not match the layer", 0);
            const Shape gshape{d1 / q.spec.group, d2};
            q.params.scale = detail::expect_shape(a.f32(name + ".scale"), gshape, name + ".scale");
            q.params.group = q.spec.group;
            const auto z = detail::expect_shape(a.f32(name + ".zero"), gshape, name + ".zero");
            for (float v : z.data()) {
                if (!(v >= 0.0f && v <= static_cast<float>(q.spec.levels())) || v != std::floor(v))
                    throw FormatError("checkpoint: '" + name + ".zero' holds an invalid zero-point", 0);
                q.params.zero.push_back(static_cast<std::int32_t>(v));
            }
            const Shape cshape = q.spec.granularity == quant::ClipGranularity::PerMatrix ? Shape{1} : gshape;
            q.clip.gamma = detail::expect_shape(a.f32(name + ".gamma"), cshape, name + ".gamma");
            q.clip.beta = detail::expect_shape(a.f32(name + ".beta"), cshape, name + ".beta");
            const auto r = static_cast<std::size_t>(meta[3]);
            q.lora.alpha = meta[4];
            if (r > 0) {
                q.lora.A = detail::expect_shape(a.f32(name + ".lora_a"), {d1, r}, name + ".lora_a");
                q.lora.B = detail::expect_shape(a.f32(name + ".lora_b"), {d2, r}, name + ".lora_b");
            }
            q.rebuild();
            l.q = std::move(q);
        }
        m.blocks.push_back(std::move(blk));
    }
    m.final_norm = detail::expect_shape(a.f32("final_norm"), {c.d_model}, "final_norm");
    return m;
}

inline void save_model(const TinyTransformer<float>& m, const std::string& path) { to_archive(m).save(path); }
inline TinyTransformer<float> load_model(const std::string& path) { return from_archive(Archive::load(path)); }

} // namespace apiq::model
