#include <algorithm>
#include <cstring>
#include <limits>

#include "tetra/tensor.hpp"

namespace tetra {

namespace {

struct ConvDims {
    std::int64_t n, ci, d, h, w;      // input
    std::int64_t co, kd, kh, kw;      // kernel
    std::int64_t od, oh, ow;          // output spatial
    int s;
    int pd, ph, pw;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                   std::array<int, 3> pad) {
    if (input.rank() != 5) throw ConfigError("conv3d: input must be [N,C,D,H,W], got " +
                                             shape_str(input.shape()));
    if (weight.rank() != 5) throw ConfigError("conv3d: weight must be [Cout,Cin,kd,kh,kw], got " +
                                              shape_str(weight.shape()));
    if (stride < 1) throw ConfigError("conv3d: stride must be >= 1");
    if (pad[0] < 0 || pad[1] < 0 || pad[2] < 0) throw ConfigError("conv3d: negative padding");
    ConvDims cd;
    cd.n = input.dim(0);
    cd.ci = input.dim(1);
    cd.d = input.dim(2);
    cd.h = input.dim(3);
    cd.w = input.dim(4);
    cd.co = weight.dim(0);
    cd.kd = weight.dim(2);
    cd.kh = weight.dim(3);
    cd.kw = weight.dim(4);
    cd.s = stride;
    cd.pd = pad[0];
    cd.ph = pad[1];
    cd.pw = pad[2];
    if (weight.dim(1) != cd.ci)
        throw ConfigError("conv3d: input channels " + std::to_string(cd.ci) +
                          " do not match weight Cin " + std::to_string(weight.dim(1)));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cd.co))
        throw ConfigError("conv3d: bias must be [Cout]");
    if (cd.d + 2 * cd.pd < cd.kd || cd.h + 2 * cd.ph < cd.kh || cd.w + 2 * cd.pw < cd.kw)
        throw ConfigError("conv3d: kernel does not fit padded input");
    cd.od = (cd.d + 2 * cd.pd - cd.kd) / stride + 1;
    cd.oh = (cd.h + 2 * cd.ph - cd.kh) / stride + 1;
    cd.ow = (cd.w + 2 * cd.pw - cd.kw) / stride + 1;
    return cd;
}

bool is_fast_case(const ConvDims& c) {
    return c.s == 1 && c.kd == 3 && c.kh == 3 && c.kw == 3 && c.pd == 1 && c.ph == 1 &&
           c.pw == 1;
}

// Zero-padded copy, one voxel on each side of every spatial axis. Removes all
// bounds checks from the 3x3x3 stencils below.
std::vector<double> pad1(const double* in, std::int64_t n, std::int64_t c, std::int64_t d,
                         std::int64_t h, std::int64_t w) {
    const std::int64_t pd = d + 2, ph = h + 2, pw = w + 2;
    std::vector<double> out(static_cast<std::size_t>(n * c * pd * ph * pw), 0.0);
    const std::int64_t maps = n * c;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t m = 0; m < maps; ++m) {
        const double* src = in + m * d * h * w;
        double* dst = out.data() + m * pd * ph * pw;
        for (std::int64_t z = 0; z < d; ++z)
            for (std::int64_t y = 0; y < h; ++y)
                std::memcpy(dst + ((z + 1) * ph + y + 1) * pw + 1, src + (z * h + y) * w,
                            static_cast<std::size_t>(w) * sizeof(double));
    }
    return out;
}

// 3x3x3, stride 1, same padding. `pin` is the pad1() buffer. Output rows are
// processed in 16-wide register tiles with a scalar tail.
void conv3x3_padded(std::int64_t n_, std::int64_t ci_, std::int64_t co_, std::int64_t d,
                    std::int64_t h, std::int64_t w, const double* pin, const double* wt,
                    const double* bias, double* out) {
    const std::int64_t ph = h + 2, pw = w + 2;
    constexpr std::int64_t TW = 16;
    const std::int64_t tasks = n_ * co_ * d;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t t = 0; t < tasks; ++t) {
        const std::int64_t od = t % d;
        const std::int64_t co = (t / d) % co_;
        const std::int64_t n = t / (d * co_);
        const double b = bias ? bias[co] : 0.0;
        const double* pin_n = pin + n * ci_ * (d + 2) * ph * pw;
        const double* w_co = wt + co * ci_ * 27;
        for (std::int64_t oh = 0; oh < h; ++oh) {
            double* orow = out + (((n * co_ + co) * d + od) * h + oh) * w;
            std::int64_t ow = 0;
            for (; ow + TW <= w; ow += TW) {
                double acc[TW];
                for (std::int64_t j = 0; j < TW; ++j) acc[j] = b;
                for (std::int64_t ci = 0; ci < ci_; ++ci) {
                    const double* pin_c = pin_n + ci * (d + 2) * ph * pw;
                    const double* w_ci = w_co + ci * 27;
                    for (int kd = 0; kd < 3; ++kd) {
                        for (int kh = 0; kh < 3; ++kh) {
                            const double* r = pin_c + ((od + kd) * ph + oh + kh) * pw + ow;
                            const double* wr = w_ci + (kd * 3 + kh) * 3;
                            const double w0 = wr[0], w1 = wr[1], w2 = wr[2];
                            for (std::int64_t j = 0; j < TW; ++j)
                                acc[j] += w0 * r[j] + w1 * r[j + 1] + w2 * r[j + 2];
                        }
                    }
                }
                for (std::int64_t j = 0; j < TW; ++j) orow[ow + j] = acc[j];
            }
            for (; ow < w; ++ow) {
                double acc = b;
                for (std::int64_t ci = 0; ci < ci_; ++ci) {
                    const double* pin_c = pin_n + ci * (d + 2) * ph * pw;
                    const double* w_ci = w_co + ci * 27;
                    for (int kd = 0; kd < 3; ++kd)
                        for (int kh = 0; kh < 3; ++kh) {
                            const double* r = pin_c + ((od + kd) * ph + oh + kh) * pw + ow;
                            const double* wr = w_ci + (kd * 3 + kh) * 3;
                            acc += wr[0] * r[0] + wr[1] * r[1] + wr[2] * r[2];
                        }
                }
                orow[ow] = acc;
            }
        }
    }
}

void conv3d_forward_generic(const ConvDims& c, const double* in, const double* w,
                            const double* bias, double* out) {
    const std::int64_t tasks = c.n * c.co * c.od;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t t = 0; t < tasks; ++t) {
        const std::int64_t od = t % c.od;
        const std::int64_t co = (t / c.od) % c.co;
        const std::int64_t n = t / (c.od * c.co);
        for (std::int64_t oh = 0; oh < c.oh; ++oh) {
            double* orow = out + (((n * c.co + co) * c.od + od) * c.oh + oh) * c.ow;
            const double b = bias ? bias[co] : 0.0;
            for (std::int64_t ow = 0; ow < c.ow; ++ow) orow[ow] = b;
            for (std::int64_t ci = 0; ci < c.ci; ++ci) {
                for (std::int64_t kd = 0; kd < c.kd; ++kd) {
                    const std::int64_t id = od * c.s - c.pd + kd;
                    if (id < 0 || id >= c.d) continue;
                    for (std::int64_t kh = 0; kh < c.kh; ++kh) {
                        const std::int64_t ih = oh * c.s - c.ph + kh;
                        if (ih < 0 || ih >= c.h) continue;
                        const double* irow = in + (((n * c.ci + ci) * c.d + id) * c.h + ih) * c.w;
                        const double* wrow =
                            w + (((co * c.ci + ci) * c.kd + kd) * c.kh + kh) * c.kw;
                        if (c.s == 1) {
                            for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                const double wv = wrow[kw];
                                const std::int64_t ofs = kw - c.pw;
                                const std::int64_t lo = std::max<std::int64_t>(0, -ofs);
                                const std::int64_t hi = std::min(c.ow, c.w - ofs);
                                const double* ir = irow + ofs;
                                for (std::int64_t ow = lo; ow < hi; ++ow)
                                    orow[ow] += wv * ir[ow];
                            }
                        } else {
                            for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                const double wv = wrow[kw];
                                for (std::int64_t ow = 0; ow < c.ow; ++ow) {
                                    const std::int64_t iw = ow * c.s - c.pw + kw;
                                    if (iw >= 0 && iw < c.w) orow[ow] += wv * irow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv3d_forward(const ConvDims& c, const double* in, const double* w, const double* bias,
                    double* out) {
    if (is_fast_case(c)) {
        std::vector<double> pin = pad1(in, c.n, c.ci, c.d, c.h, c.w);
        conv3x3_padded(c.n, c.ci, c.co, c.d, c.h, c.w, pin.data(), w, bias, out);
    } else {
        conv3d_forward_generic(c, in, w, bias, out);
    }
}

void conv3d_backward_input_generic(const ConvDims& c, const double* w, const double* gout,
                                   double* gin) {
    const std::int64_t tasks = c.n * c.ci * c.d;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t t = 0; t < tasks; ++t) {
        const std::int64_t id = t % c.d;
        const std::int64_t ci = (t / c.d) % c.ci;
        const std::int64_t n = t / (c.d * c.ci);
        for (std::int64_t ih = 0; ih < c.h; ++ih) {
            double* grow = gin + (((n * c.ci + ci) * c.d + id) * c.h + ih) * c.w;
            for (std::int64_t co = 0; co < c.co; ++co) {
                for (std::int64_t kd = 0; kd < c.kd; ++kd) {
                    const std::int64_t num_d = id + c.pd - kd;
                    if (num_d < 0 || num_d % c.s) continue;
                    const std::int64_t od = num_d / c.s;
                    if (od >= c.od) continue;
                    for (std::int64_t kh = 0; kh < c.kh; ++kh) {
                        const std::int64_t num_h = ih + c.ph - kh;
                        if (num_h < 0 || num_h % c.s) continue;
                        const std::int64_t oh = num_h / c.s;
                        if (oh >= c.oh) continue;
                        const double* gorow =
                            gout + (((n * c.co + co) * c.od + od) * c.oh + oh) * c.ow;
                        const double* wrow =
                            w + (((co * c.ci + ci) * c.kd + kd) * c.kh + kh) * c.kw;
                        if (c.s == 1) {
                            for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                const double wv = wrow[kw];
                                const std::int64_t ofs = c.pw - kw;
                                const std::int64_t lo = std::max<std::int64_t>(0, -ofs);
                                const std::int64_t hi = std::min(c.w, c.ow - ofs);
                                const double* gr = gorow + ofs;
                                for (std::int64_t iw = lo; iw < hi; ++iw)
                                    grow[iw] += wv * gr[iw];
                            }
                        } else {
                            for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                const double wv = wrow[kw];
                                for (std::int64_t iw = 0; iw < c.w; ++iw) {
                                    const std::int64_t num_w = iw + c.pw - kw;
                                    if (num_w < 0 || num_w % c.s) continue;
                                    const std::int64_t ow = num_w / c.s;
                                    if (ow < c.ow) grow[iw] += wv * gorow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv3d_backward_input(const ConvDims& c, const double* w, const double* gout, double* gin) {
    if (is_fast_case(c)) {
        // The input gradient of a same-padded 3x3x3 conv is itself such a
        // conv: pad the output gradient and convolve with the channel-swapped,
        // spatially flipped kernel.
        std::vector<double> flip(static_cast<std::size_t>(c.ci * c.co * 27));
        for (std::int64_t co = 0; co < c.co; ++co)
            for (std::int64_t ci = 0; ci < c.ci; ++ci)
                for (int k = 0; k < 27; ++k)
                    flip[(ci * c.co + co) * 27 + (26 - k)] = w[(co * c.ci + ci) * 27 + k];
        std::vector<double> pg = pad1(gout, c.n, c.co, c.od, c.oh, c.ow);
        conv3x3_padded(c.n, c.co, c.ci, c.d, c.h, c.w, pg.data(), flip.data(), nullptr, gin);
    } else {
        conv3d_backward_input_generic(c, w, gout, gin);
    }
}

void conv3d_backward_weight_generic(const ConvDims& c, const double* in, const double* gout,
                                    double* gw) {
    const std::int64_t pairs = c.co * c.ci;
    const std::int64_t klen = c.kd * c.kh * c.kw;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t p = 0; p < pairs; ++p) {
        const std::int64_t ci = p % c.ci;
        const std::int64_t co = p / c.ci;
        std::vector<double> acc(static_cast<std::size_t>(klen), 0.0);
        for (std::int64_t n = 0; n < c.n; ++n) {
            for (std::int64_t od = 0; od < c.od; ++od) {
                for (std::int64_t kd = 0; kd < c.kd; ++kd) {
                    const std::int64_t id = od * c.s - c.pd + kd;
                    if (id < 0 || id >= c.d) continue;
                    for (std::int64_t oh = 0; oh < c.oh; ++oh) {
                        const double* gorow =
                            gout + (((n * c.co + co) * c.od + od) * c.oh + oh) * c.ow;
                        for (std::int64_t kh = 0; kh < c.kh; ++kh) {
                            const std::int64_t ih = oh * c.s - c.ph + kh;
                            if (ih < 0 || ih >= c.h) continue;
                            const double* irow =
                                in + (((n * c.ci + ci) * c.d + id) * c.h + ih) * c.w;
                            double* arow = acc.data() + (kd * c.kh + kh) * c.kw;
                            if (c.s == 1) {
                                for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                    const std::int64_t ofs = kw - c.pw;
                                    const std::int64_t lo = std::max<std::int64_t>(0, -ofs);
                                    const std::int64_t hi = std::min(c.ow, c.w - ofs);
                                    const double* ir = irow + ofs;
                                    double a = 0.0;
                                    for (std::int64_t ow = lo; ow < hi; ++ow)
                                        a += gorow[ow] * ir[ow];
                                    arow[kw] += a;
                                }
                            } else {
                                for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                    double a = 0.0;
                                    for (std::int64_t ow = 0; ow < c.ow; ++ow) {
                                        const std::int64_t iw = ow * c.s - c.pw + kw;
                                        if (iw >= 0 && iw < c.w) a += gorow[ow] * irow[iw];
                                    }
                                    arow[kw] += a;
                                }
                            }
                        }
                    }
                }
            }
        }
        std::copy(acc.begin(), acc.end(), gw + (co * c.ci + ci) * klen);
    }
}

void conv3d_backward_weight(const ConvDims& c, const double* in, const double* gout, double* gw) {
    if (!is_fast_case(c)) {
        conv3d_backward_weight_generic(c, in, gout, gw);
        return;
    }
    const std::int64_t ph = c.h + 2, pw = c.w + 2;
    std::vector<double> pin = pad1(in, c.n, c.ci, c.d, c.h, c.w);
    const std::int64_t pairs = c.co * c.ci;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t p = 0; p < pairs; ++p) {
        const std::int64_t ci = p % c.ci;
        const std::int64_t co = p / c.ci;
        double acc[27] = {0.0};
        for (std::int64_t n = 0; n < c.n; ++n) {
            const double* pin_c = pin.data() + (n * c.ci + ci) * (c.d + 2) * ph * pw;
            for (std::int64_t od = 0; od < c.od; ++od) {
                for (std::int64_t oh = 0; oh < c.oh; ++oh) {
                    const double* gorow =
                        gout + (((n * c.co + co) * c.od + od) * c.oh + oh) * c.ow;
                    for (int kd = 0; kd < 3; ++kd) {
                        for (int kh = 0; kh < 3; ++kh) {
                            const double* r = pin_c + ((od + kd) * ph + oh + kh) * pw;
                            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                            for (std::int64_t ow = 0; ow < c.ow; ++ow) {
                                const double g = gorow[ow];
                                a0 += g * r[ow];
                                a1 += g * r[ow + 1];
                                a2 += g * r[ow + 2];
                            }
                            double* arow = acc + (kd * 3 + kh) * 3;
                            arow[0] += a0;
                            arow[1] += a1;
                            arow[2] += a2;
                        }
                    }
                }
            }
        }
        std::copy(acc, acc + 27, gw + (co * c.ci + ci) * 27);
    }
}

void reduce_per_channel(const double* g, std::int64_t n, std::int64_t c, std::int64_t spatial,
                        double* out) {
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::int64_t ni = 0; ni < n; ++ni) {
            const double* p = g + (ni * c + ch) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) acc += p[i];
        }
        out[ch] = acc;
    }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              std::array<int, 3> padding) {
    const ConvDims c = conv_dims(input, weight, bias, stride, padding);
    Tensor out = Tensor::zeros({c.n, c.co, c.od, c.oh, c.ow});
    conv3d_forward(c, input.data().data(), weight.data().data(),
                   bias.defined() ? bias.data().data() : nullptr, out.mutable_data().data());

    const bool ti = grad_tracked(input), tw = grad_tracked(weight),
               tb = bias.defined() && grad_tracked(bias);
    Tape* tape = Tape::active();
    if (tape && (ti || tw || tb)) {
        tape->record("conv3d", out,
                     [input, weight, bias, c, ti, tw, tb](std::span<const double> g,
                                                          Adjoints& adj) {
                         if (ti)
                             conv3d_backward_input(c, weight.data().data(), g.data(),
                                                   adj.of(input).data());
                         if (tw)
                             conv3d_backward_weight(c, input.data().data(), g.data(),
                                                    adj.of(weight).data());
                         if (tb)
                             reduce_per_channel(g.data(), c.n, c.co, c.od * c.oh * c.ow,
                                                adj.of(bias).data());
                     });
    }
    return out;
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
    return conv3d(input, weight, bias, stride, std::array<int, 3>{padding, padding, padding});
}

// ---------------------------------------------------------------------------
// transposed convolution
// ---------------------------------------------------------------------------

namespace {

struct TConvDims {
    std::int64_t n, ci, d, h, w;
    std::int64_t co, kd, kh, kw;
    std::int64_t od, oh, ow;
    int s;
};

TConvDims tconv_dims(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride) {
    if (input.rank() != 5)
        throw ConfigError("conv_transpose3d: input must be [N,C,D,H,W], got " +
                          shape_str(input.shape()));
    if (weight.rank() != 5)
        throw ConfigError("conv_transpose3d: weight must be [Cin,Cout,kd,kh,kw], got " +
                          shape_str(weight.shape()));
    if (stride < 1) throw ConfigError("conv_transpose3d: stride must be >= 1");
    TConvDims c;
    c.n = input.dim(0);
    c.ci = input.dim(1);
    c.d = input.dim(2);
    c.h = input.dim(3);
    c.w = input.dim(4);
    c.co = weight.dim(1);
    c.kd = weight.dim(2);
    c.kh = weight.dim(3);
    c.kw = weight.dim(4);
    c.s = stride;
    if (weight.dim(0) != c.ci)
        throw ConfigError("conv_transpose3d: input channels " + std::to_string(c.ci) +
                          " do not match weight Cin " + std::to_string(weight.dim(0)));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c.co))
        throw ConfigError("conv_transpose3d: bias must be [Cout]");
    c.od = (c.d - 1) * stride + c.kd;
    c.oh = (c.h - 1) * stride + c.kh;
    c.ow = (c.w - 1) * stride + c.kw;
    return c;
}

void tconv_forward(const TConvDims& c, const double* in, const double* w, const double* bias,
                   double* out) {
    const std::int64_t tasks = c.n * c.co;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t t = 0; t < tasks; ++t) {
        const std::int64_t co = t % c.co;
        const std::int64_t n = t / c.co;
        double* oblock = out + (n * c.co + co) * c.od * c.oh * c.ow;
        const double b = bias ? bias[co] : 0.0;
        for (std::int64_t i = 0; i < c.od * c.oh * c.ow; ++i) oblock[i] = b;
        for (std::int64_t ci = 0; ci < c.ci; ++ci) {
            const double* iblock = in + (n * c.ci + ci) * c.d * c.h * c.w;
            for (std::int64_t d = 0; d < c.d; ++d) {
                for (std::int64_t kd = 0; kd < c.kd; ++kd) {
                    const std::int64_t od = d * c.s + kd;
                    for (std::int64_t h = 0; h < c.h; ++h) {
                        const double* irow = iblock + (d * c.h + h) * c.w;
                        for (std::int64_t kh = 0; kh < c.kh; ++kh) {
                            const std::int64_t oh = h * c.s + kh;
                            double* orow = oblock + (od * c.oh + oh) * c.ow;
                            const double* wrow =
                                w + (((ci * c.co + co) * c.kd + kd) * c.kh + kh) * c.kw;
                            for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                const double wv = wrow[kw];
                                for (std::int64_t x = 0; x < c.w; ++x)
                                    orow[x * c.s + kw] += wv * irow[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

void tconv_backward_input(const TConvDims& c, const double* w, const double* gout, double* gin) {
    const std::int64_t tasks = c.n * c.ci * c.d;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t t = 0; t < tasks; ++t) {
        const std::int64_t d = t % c.d;
        const std::int64_t ci = (t / c.d) % c.ci;
        const std::int64_t n = t / (c.d * c.ci);
        for (std::int64_t h = 0; h < c.h; ++h) {
            double* grow = gin + (((n * c.ci + ci) * c.d + d) * c.h + h) * c.w;
            for (std::int64_t co = 0; co < c.co; ++co) {
                for (std::int64_t kd = 0; kd < c.kd; ++kd) {
                    const std::int64_t od = d * c.s + kd;
                    for (std::int64_t kh = 0; kh < c.kh; ++kh) {
                        const std::int64_t oh = h * c.s + kh;
                        const double* gorow =
                            gout + (((n * c.co + co) * c.od + od) * c.oh + oh) * c.ow;
                        const double* wrow =
                            w + (((ci * c.co + co) * c.kd + kd) * c.kh + kh) * c.kw;
                        for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                            const double wv = wrow[kw];
                            for (std::int64_t x = 0; x < c.w; ++x)
                                grow[x] += wv * gorow[x * c.s + kw];
                        }
                    }
                }
            }
        }
    }
}

void tconv_backward_weight(const TConvDims& c, const double* in, const double* gout, double* gw) {
    const std::int64_t pairs = c.ci * c.co;
    const std::int64_t klen = c.kd * c.kh * c.kw;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t p = 0; p < pairs; ++p) {
        const std::int64_t co = p % c.co;
        const std::int64_t ci = p / c.co;
        std::vector<double> acc(static_cast<std::size_t>(klen), 0.0);
        for (std::int64_t n = 0; n < c.n; ++n) {
            for (std::int64_t d = 0; d < c.d; ++d) {
                for (std::int64_t kd = 0; kd < c.kd; ++kd) {
                    const std::int64_t od = d * c.s + kd;
                    for (std::int64_t h = 0; h < c.h; ++h) {
                        const double* irow =
                            in + (((n * c.ci + ci) * c.d + d) * c.h + h) * c.w;
                        for (std::int64_t kh = 0; kh < c.kh; ++kh) {
                            const std::int64_t oh = h * c.s + kh;
                            const double* gorow =
                                gout + (((n * c.co + co) * c.od + od) * c.oh + oh) * c.ow;
                            double* arow = acc.data() + (kd * c.kh + kh) * c.kw;
                            for (std::int64_t kw = 0; kw < c.kw; ++kw) {
                                double a = 0.0;
                                for (std::int64_t x = 0; x < c.w; ++x)
                                    a += irow[x] * gorow[x * c.s + kw];
                                arow[kw] += a;
                            }
                        }
                    }
                }
            }
        }
        std::copy(acc.begin(), acc.end(), gw + (ci * c.co + co) * klen);
    }
}

}  // namespace

Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        int stride) {
    const TConvDims c = tconv_dims(input, weight, bias, stride);
    Tensor out = Tensor::zeros({c.n, c.co, c.od, c.oh, c.ow});
    tconv_forward(c, input.data().data(), weight.data().data(),
                  bias.defined() ? bias.data().data() : nullptr, out.mutable_data().data());

    const bool ti = grad_tracked(input), tw = grad_tracked(weight),
               tb = bias.defined() && grad_tracked(bias);
    Tape* tape = Tape::active();
    if (tape && (ti || tw || tb)) {
        tape->record("conv_transpose3d", out,
                     [input, weight, bias, c, ti, tw, tb](std::span<const double> g,
                                                          Adjoints& adj) {
                         if (ti)
                             tconv_backward_input(c, weight.data().data(), g.data(),
                                                  adj.of(input).data());
                         if (tw)
                             tconv_backward_weight(c, input.data().data(), g.data(),
                                                   adj.of(weight).data());
                         if (tb)
                             reduce_per_channel(g.data(), c.n, c.co, c.od * c.oh * c.ow,
                                                adj.of(bias).data());
                     });
    }
    return out;
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

Tensor maxpool3d(const Tensor& input, int window, int stride) {
    if (input.rank() != 5)
        throw ConfigError("maxpool3d: input must be [N,C,D,H,W], got " +
                          shape_str(input.shape()));
    if (window < 1 || stride < 1) throw ConfigError("maxpool3d: window and stride must be >= 1");
    const std::int64_t n = input.dim(0), ch = input.dim(1), d = input.dim(2), h = input.dim(3),
                       w = input.dim(4);
    if (d < window || h < window || w < window || (d - window) % stride ||
        (h - window) % stride || (w - window) % stride)
        throw ConfigError("maxpool3d: spatial dims " + shape_str({d, h, w}) +
                          " not divisible by stride " + std::to_string(stride));
    const std::int64_t od = (d - window) / stride + 1;
    const std::int64_t oh = (h - window) / stride + 1;
    const std::int64_t ow = (w - window) / stride + 1;

    Tensor out = Tensor::zeros({n, ch, od, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(out.numel()));
    const double* pin = input.data().data();
    double* pout = out.mutable_data().data();
    std::int64_t* parg = argmax->data();

    const std::int64_t tasks = n * ch * od;
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t t = 0; t < tasks; ++t) {
        const std::int64_t zo = t % od;
        const std::int64_t c = (t / od) % ch;
        const std::int64_t ni = t / (od * ch);
        const double* iblock = pin + (ni * ch + c) * d * h * w;
        for (std::int64_t yo = 0; yo < oh; ++yo) {
            for (std::int64_t xo = 0; xo < ow; ++xo) {
                double best = -std::numeric_limits<double>::infinity();
                std::int64_t best_idx = -1;
                // first occurrence in row-major scan wins ties
                for (int kz = 0; kz < window; ++kz)
                    for (int ky = 0; ky < window; ++ky)
                        for (int kx = 0; kx < window; ++kx) {
                            const std::int64_t iz = zo * stride + kz;
                            const std::int64_t iy = yo * stride + ky;
                            const std::int64_t ix = xo * stride + kx;
                            const std::int64_t idx = (iz * h + iy) * w + ix;
                            if (iblock[idx] > best) {
                                best = iblock[idx];
                                best_idx = idx;
                            }
                        }
                const std::int64_t oidx = (((ni * ch + c) * od + zo) * oh + yo) * ow + xo;
                pout[oidx] = best;
                parg[oidx] = (ni * ch + c) * d * h * w + best_idx;
            }
        }
    }

    if (Tape* tape = Tape::active(); tape && grad_tracked(input)) {
        tape->record("maxpool3d", out,
                     [input, argmax](std::span<const double> g, Adjoints& adj) {
                         auto& gin = adj.of(input);
                         const auto& am = *argmax;
                         for (std::size_t i = 0; i < g.size(); ++i)
                             gin[static_cast<std::size_t>(am[i])] += g[i];
                     });
    }
    return out;
}

}  // namespace tetra
