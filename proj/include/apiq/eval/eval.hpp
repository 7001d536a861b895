#pragma once

#include <iomanip>
#include <limits>
#include <ostream>

#include "apiq/model/transformer.hpp"

namespace apiq::eval {

// Sum over rows of -log softmax(logits)[target], in double.
inline double nll_sum(const Tensor<float>& logits, std::span<const std::int32_t> targets)
{
    require_rank(logits.shape(), 2, "nll_sum");
    const std::size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n) throw DimensionError("nll_sum: target count does not match logit rows");
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const float* row = logits.data().data() + r * v;
        const auto tgt = targets[r];
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) throw InputError("target token out of range");
        double m = row[0];
        for (std::size_t j = 1; j < v; ++j) m = std::max(m, static_cast<double>(row[j]));
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - m);
        total += std::log(s) + m - static_cast<double>(row[tgt]);
    }
    return total;
}

struct PerplexityResult {
    double ppl = 0.0;
    double mean_nll = 0.0;
    std::size_t chunks = 0;
    std::size_t predictions = 0;
};

// Non-overlapping chunks of chunk_len tokens; the trailing partial chunk is
// dropped. Inside a chunk every token after the first is predicted from its
// prefix. Quantized layers (if any) are used.
inline PerplexityResult perplexity(const model::TinyTransformer<float>& m, std::span<const std::int32_t> corpus,
                                   std::size_t chunk_len, std::size_t chunks_per_batch = 8)
{
    if (chunk_len < 2) throw ConfigError("perplexity chunk length must be at least 2");
    if (chunk_len > m.cfg.max_seq)
        throw ConfigError("perplexity chunk length " + std::to_string(chunk_len) + " exceeds max_seq " +
                          std::to_string(m.cfg.max_seq));
    if (corpus.size() < chunk_len)
        throw InputError("corpus has " + std::to_string(corpus.size()) + " tokens, fewer than one chunk of " +
                         std::to_string(chunk_len));
    const std::size_t n_chunks = corpus.size() / chunk_len, t = chunk_len - 1;
    chunks_per_batch = std::max<std::size_t>(1, chunks_per_batch);
    PerplexityResult res;
    double total = 0.0;
    std::vector<std::int32_t> in, tgt;
    for (std::size_t c0 = 0; c0 < n_chunks; c0 += chunks_per_batch) {
        const std::size_t c1 = std::min(n_chunks, c0 + chunks_per_batch);
        in.clear();
        tgt.clear();
        for (std::size_t c = c0; c < c1; ++c) {
            const auto chunk = corpus.subspan(c * chunk_len, chunk_len);
            in.insert(in.end(), chunk.begin(), chunk.end() - 1);
            tgt.insert(tgt.end(), chunk.begin() + 1, chunk.end());
        }
        total += nll_sum(model::logits(m, in, c1 - c0, model::Mode::Quantized), tgt);
    }
    res.chunks = n_chunks;
    res.predictions = n_chunks * t;
    res.mean_nll = total / static_cast<double>(res.predictions);
    res.ppl = std::exp(res.mean_nll);
    return res;
}

enum class Metric { ActivationPerToken, WeightFrobenius, RelativeWeight };

inline std::string to_string(Metric k)
{
    switch (k) {
    case Metric::ActivationPerToken: return "activation-per-token";
    case Metric::WeightFrobenius: return "weight-frobenius";
    case Metric::RelativeWeight: return "relative-weight";
    }
    return "?";
}

struct ErrorReport {
    struct Record {
        std::string layer;
        std::size_t block;
        double value;
    };
    Metric metric = Metric::ActivationPerToken;
    std::vector<Record> records;

    const Record& at(const std::string& layer) const
    {
        for (const auto& r : records)
            if (r.layer == layer) return r;
        throw ArgumentError("no record for layer " + layer);
    }

    void write_tsv(std::ostream& os) const
    {
        os << "layer\tblock\tmetric\tvalue\n";
        const auto prec = os.precision(17);
        for (const auto& r : records) os << r.layer << '\t' << r.block << '\t' << to_string(metric) << '\t' << r.value << '\n';
        os.precision(prec);
    }
};

// "blocks.<b>.<proj>" -> b
inline std::size_t block_of(const std::string& layer)
{
    const std::string pre = "blocks.";
    if (layer.rfind(pre, 0) != 0) throw ArgumentError("layer name without block prefix: " + layer);
    const auto dot = layer.find('.', pre.size());
    return static_cast<std::size_t>(std::stoul(layer.substr(pre.size(), dot - pre.size())));
}

// Per layer (in capture order): ||Y_fp - Y_q||_F / n_tokens.
inline ErrorReport activation_errors(const model::Capture<float>& fp, const model::Capture<float>& q,
                                     std::size_t n_tokens)
{
    if (fp.order != q.order) throw ArgumentError("activation error: the two runs visited different layers");
    if (n_tokens == 0) throw ArgumentError("activation error: zero tokens");
    ErrorReport rep{Metric::ActivationPerToken, {}};
    for (const auto& name : fp.order) {
        const double e = frobenius_distance(fp.outputs.at(name), q.outputs.at(name)) / static_cast<double>(n_tokens);
        rep.records.push_back({name, block_of(name), e});
    }
    return rep;
}

inline void require_same_structure(const model::TinyTransformer<float>& a, const model::TinyTransformer<float>& b)
{
    if (!(a.cfg == b.cfg)) throw ArgumentError("models differ in configuration");
    if (a.blocks.size() != b.blocks.size()) throw ArgumentError("models differ in block count");
}

// The full-precision model runs in full precision, the other with its
// quantized layers; each path is propagated end to end on the same tokens.
inline ErrorReport activation_error_profile(const model::TinyTransformer<float>& full,
                                            const model::TinyTransformer<float>& quant,
                                            std::span<const std::int32_t> tokens, std::size_t n_seq)
{
    require_same_structure(full, quant);
    model::Capture<float> cf, cq;
    model::logits(full, tokens, n_seq, model::Mode::Full, &cf);
    model::logits(quant, tokens, n_seq, model::Mode::Quantized, &cq);
    return activation_errors(cf, cq, tokens.size());
}

inline Tensor<float> effective_weight(const model::Linear<float>& l)
{
    return l.quantized() ? l.q->effective_weight() : l.weight;
}

// ||W - (Q + (alpha/r) A B^T)||_F per layer.
inline ErrorReport weight_error_report(const model::TinyTransformer<float>& full, const model::TinyTransformer<float>& quant)
{
    require_same_structure(full, quant);
    ErrorReport rep{Metric::WeightFrobenius, {}};
    for (std::size_t b = 0; b < full.cfg.n_blocks; ++b)
        for (model::Proj p : model::kAllProj) {
            const auto& w = full.linear(b, p).weight;
            if (w.empty()) throw ArgumentError("weight error needs the full-precision weights");
            const auto q = effective_weight(quant.linear(b, p));
            if (q.shape() != w.shape()) throw ArgumentError("weight shapes differ at " + model::layer_name(b, p));
            rep.records.push_back({model::layer_name(b, p), b, frobenius_distance(w, q)});
        }
    return rep;
}

// e = ||dW_baseline||_F - ||dW_method||_F per layer; positive where the method
// is closer to the full-precision weight.
inline ErrorReport relative_weight_error(const model::TinyTransformer<float>& full,
                                         const model::TinyTransformer<float>& baseline,
                                         const model::TinyTransformer<float>& method)
{
    const auto base = weight_error_report(full, baseline);
    const auto meth = weight_error_report(full, method);
    ErrorReport rep{Metric::RelativeWeight, {}};
    for (std::size_t i = 0; i < base.records.size(); ++i)
        rep.records.push_back({base.records[i].layer, base.records[i].block, base.records[i].value - meth.records[i].value});
    return rep;
}

struct Histogram {
    double lo = 0.0, hi = 0.0;
    std::vector<double> centers;
    std::vector<std::size_t> counts;

    std::size_t total() const
    {
        std::size_t s = 0;
        for (auto c : counts) s += c;
        return s;
    }
};

// Equal-width bins over [min, max]; bin i is [lo + i*w, lo + (i+1)*w), the
// last bin also holds max. A constant tensor lands entirely in bin 0.
inline Histogram histogram(const Tensor<float>& t, std::size_t bins)
{
    if (bins < 2) throw ConfigError("histogram needs at least 2 bins");
    Histogram h;
    h.counts.assign(bins, 0);
    h.centers.resize(bins);
    if (t.numel() == 0) return h;
    h.lo = std::numeric_limits<double>::infinity();
    h.hi = -h.lo;
    for (float v : t.data()) {
        if (!std::isfinite(v)) throw NumericError("histogram: non-finite value");
        h.lo = std::min(h.lo, static_cast<double>(v));
        h.hi = std::max(h.hi, static_cast<double>(v));
    }
    const double width = (h.hi - h.lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i < bins; ++i) h.centers[i] = h.lo + (static_cast<double>(i) + 0.5) * width;
    for (float v : t.data()) {
        std::size_t i = 0;
        if (width > 0) {
            const double pos = std::floor((static_cast<double>(v) - h.lo) / width);
            i = pos < 0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(pos));
        }
        ++h.counts[i];
    }
    return h;
}

struct LayerHistograms {
    std::string layer;
    std::vector<std::pair<std::string, Histogram>> tables; // W (if present), Q, ABt, A, B
};

inline LayerHistograms histogram_export(const std::string& name, const model::Linear<float>& l, std::size_t bins)
{
    if (!l.quantized()) throw ArgumentError("histogram export needs a quantized layer: " + name);
    const auto& q = *l.q;
    LayerHistograms out{name, {}};
    if (!l.weight.empty()) out.tables.emplace_back("W", histogram(l.weight, bins));
    out.tables.emplace_back("Q", histogram(q.base, bins));
    const auto delta = q.lora.rank() > 0 ? q.lora.delta(q.d1(), q.d2()) : Tensor<float>({q.d1(), q.d2()});
    out.tables.emplace_back("ABt", histogram(delta, bins));
    if (q.lora.rank() > 0) {
        out.tables.emplace_back("A", histogram(q.lora.A, bins));
        out.tables.emplace_back("B", histogram(q.lora.B, bins));
    }
    return out;
}

inline void write_histograms_tsv(std::ostream& os, const std::vector<LayerHistograms>& all)
{
    os << "layer\ttensor\tbin_center\tcount\n";
    const auto prec = os.precision(17);
    for (const auto& lh : all)
        for (const auto& [tensor, h] : lh.tables)
            for (std::size_t i = 0; i < h.counts.size(); ++i)
                os << lh.layer << '\t' << tensor << '\t' << h.centers[i] << '\t' << h.counts[i] << '\n';
    os.precision(prec);
}

} // namespace apiq::eval
