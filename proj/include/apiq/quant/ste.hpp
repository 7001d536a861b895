#pragma once

#include "apiq/autodiff/ops.hpp"
#include "apiq/quant/quant.hpp"

namespace apiq::quant {

// Fake-quantization recorded on a tape with straight-through gradients.
//
// Forward is bitwise identical to fake_quant(w, {gamma, beta}, spec).
// Backward treats both roundings (in the codes and in the zero-point) as
// identity and each clamp as a gate that passes gradient strictly inside
// (0, 2^b - 1). Gradients reach gamma and beta through the scale and through
// the zero-point. The group range (min, max of w) is treated as constant, so
// dq/dw is exactly the element's clamp gate.
template <typename T>
ad::Var<T> fake_quant_ste(const ad::Var<T>& w, const ad::Var<T>& gamma, const ad::Var<T>& beta, const QuantSpec& spec)
{
    const Tensor<T>& wv = w.value();
    require_rank(wv.shape(), 2, "fake_quant_ste");
    spec.validate_for(wv.rows());
    require_same_shape(gamma.shape(), beta.shape(), "fake_quant_ste clip logits");
    const std::size_t ng = wv.rows() / spec.group, d2 = wv.cols();
    const Shape want = spec.granularity == ClipGranularity::PerMatrix ? Shape{1} : Shape{ng, d2};
    if (gamma.shape() != want)
        throw DimensionError("fake_quant_ste: clip logits " + shape_str(gamma.shape()) + ", expected " + shape_str(want));

    auto mm = std::make_shared<GroupMinMax<T>>(group_minmax(wv, spec.group));
    auto params = std::make_shared<GroupParams<T>>(clip_to_params(*mm, ClipParams<T>{gamma.value(), beta.value()}, spec));
    auto codes = std::make_shared<Codes>(quantize(wv, *params, spec));
    Tensor<T> q = dequantize(*codes, *params);

    const std::size_t iw = w.id(), ig = gamma.id(), ib = beta.id();
    return w.tape().record(
        "fake_quant_ste", std::move(q), {w, gamma, beta},
        [iw, ig, ib, spec, mm, params, codes, ng, d2](ad::Tape<T>& t, const Tensor<T>& gq, std::size_t) {
            const Tensor<T>& wv = t.value(iw);
            const Tensor<T>& gv = t.value(ig);
            const Tensor<T>& bv = t.value(ib);
            const double L = spec.levels();
            const std::size_t group = spec.group;
            Tensor<T> dw(wv.shape());
            Tensor<T> dgam(gv.shape());
            Tensor<T> dbet(bv.shape());
            std::vector<double> acc_g(gv.numel(), 0.0), acc_b(bv.numel(), 0.0);
            for (std::size_t g = 0; g < ng; ++g) {
                for (std::size_t c = 0; c < d2; ++c) {
                    const std::size_t ci = gv.numel() == 1 ? 0 : g * d2 + c;
                    const double s = params->scale.at(g, c);
                    const double z = params->zero[g * d2 + c];
                    const double lo = mm->mins.at(g, c), hi = mm->maxs.at(g, c);
                    const double sg = sigmoid(static_cast<double>(gv[ci]));
                    const double sb = sigmoid(static_cast<double>(bv[ci]));
                    const T sgT = sigmoid(gv[ci]), sbT = sigmoid(bv[ci]);
                    const T s_raw = (sgT * mm->maxs.at(g, c) - sbT * mm->mins.at(g, c)) / static_cast<T>(L);
                    const bool s_gate = s_raw >= static_cast<T>(kScaleFloor);
                    const T z_pre = -round_half_even(sbT * mm->mins.at(g, c) / params->scale.at(g, c));
                    const bool z_gate = z_pre > T{0} && z_pre < static_cast<T>(L);

                    double grad_s = 0.0, grad_z = 0.0;
                    for (std::size_t r = g * group; r < (g + 1) * group; ++r) {
                        const T wr = wv.at(r, c);
                        const T pre = round_half_even(wr / params->scale.at(g, c)) + static_cast<T>(params->zero[g * d2 + c]);
                        const bool gate = pre > T{0} && pre < static_cast<T>(L);
                        const double up = gq.at(r, c);
                        const double code = codes->at(r, c);
                        if (gate) dw.at(r, c) = gq.at(r, c);
                        grad_s += up * ((code - z) - (gate ? static_cast<double>(wr) / s : 0.0));
                        grad_z += up * s * ((gate ? 1.0 : 0.0) - 1.0);
                    }
                    const double ds_dsg = s_gate ? hi / L : 0.0;
                    const double ds_dsb = s_gate ? -lo / L : 0.0;
                    const double dzr_ds = sb * lo / (s * s);
                    const double dzr_dsb = -lo / s;
                    const double zg = z_gate ? 1.0 : 0.0;
                    const double d_sg = grad_s * ds_dsg + grad_z * zg * dzr_ds * ds_dsg;
                    const double d_sb = grad_s * ds_dsb + grad_z * zg * (dzr_dsb + dzr_ds * ds_dsb);
                    acc_g[ci] += d_sg * sg * (1.0 - sg);
                    acc_b[ci] += d_sb * sb * (1.0 - sb);
                }
            }
            for (std::size_t i = 0; i < acc_g.size(); ++i) {
                dgam[i] = static_cast<T>(acc_g[i]);
                dbet[i] = static_cast<T>(acc_b[i]);
            }
            if (t.requires_grad(iw)) t.accumulate_grad(iw, dw);
            if (t.requires_grad(ig)) t.accumulate_grad(ig, dgam);
            if (t.requires_grad(ib)) t.accumulate_grad(ib, dbet);
        });
}

} // namespace apiq::quant
