#include "tetra/warp.hpp"

#include <algorithm>
#include <cmath>

namespace tetra {

Volume Volume::zeros(Dims3 dims) {
    Volume v;
    v.dims = dims;
    v.values.assign(static_cast<std::size_t>(dims_numel(dims)), 0.0);
    return v;
}

Tensor Volume::to_tensor() const {
    return Tensor::from_data({dims[0], dims[1], dims[2]}, values);
}

Volume Volume::from_tensor(const Tensor& t, std::array<double, 3> spacing) {
    if (t.rank() != 3) throw InputError("Volume::from_tensor: expected rank-3 tensor");
    Volume v;
    v.dims = {t.dim(0), t.dim(1), t.dim(2)};
    v.spacing = spacing;
    v.values.assign(t.data().begin(), t.data().end());
    return v;
}

LabelMap LabelMap::zeros(Dims3 dims) {
    LabelMap m;
    m.dims = dims;
    m.values.assign(static_cast<std::size_t>(dims_numel(dims)), 0);
    return m;
}

DeformationField DeformationField::zeros(Dims3 dims) {
    DeformationField f;
    f.u = Tensor::zeros({3, dims[0], dims[1], dims[2]});
    return f;
}

DeformationField DeformationField::from_tensor(Tensor t) {
    if (t.rank() != 4 || t.dim(0) != 3)
        throw InputError("DeformationField: expected [3,D,H,W] tensor, got " +
                         shape_str(t.shape()));
    DeformationField f;
    f.u = std::move(t);
    return f;
}

Tensor identity_grid(Dims3 dims) {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw InputError("identity_grid: dims must be positive");
    Tensor g = Tensor::zeros({3, dims[0], dims[1], dims[2]});
    double* p = g.mutable_data().data();
    const std::int64_t d = dims[0], h = dims[1], w = dims[2];
    for (std::int64_t z = 0; z < d; ++z)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                const std::int64_t i = (z * h + y) * w + x;
                p[i] = static_cast<double>(z);
                p[d * h * w + i] = static_cast<double>(y);
                p[2 * d * h * w + i] = static_cast<double>(x);
            }
    return g;
}

namespace {

struct Corner {
    std::int64_t i0, i1;
    double f;  // fractional part; 0 exactly on the lattice
};

// Clamped floor split of one coordinate.
inline Corner split(double c, std::int64_t n) {
    if (c <= 0.0) return {0, 0, 0.0};
    if (c >= static_cast<double>(n - 1)) return {n - 1, n - 1, 0.0};
    const double fl = std::floor(c);
    std::int64_t i0 = static_cast<std::int64_t>(fl);
    return {i0, i0 + 1, c - fl};
}

}  // namespace

Tensor warp(const Tensor& moving, const Tensor& field) {
    if (moving.rank() != 3) throw InputError("warp: moving must be [D,H,W]");
    if (field.rank() != 4 || field.dim(0) != 3)
        throw InputError("warp: field must be [3,D,H,W], got " + shape_str(field.shape()));
    const std::int64_t d = moving.dim(0), h = moving.dim(1), w = moving.dim(2);
    if (field.dim(1) != d || field.dim(2) != h || field.dim(3) != w)
        throw InputError("warp: field dims " + shape_str(field.shape()) +
                         " do not match moving " + shape_str(moving.shape()));

    const std::int64_t vox = d * h * w;
    const double* m = moving.data().data();
    const double* u = field.data().data();
    Tensor out = Tensor::zeros(moving.shape());
    double* o = out.mutable_data().data();

#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < vox; ++i) {
        const std::int64_t z = i / (h * w);
        const std::int64_t y = (i / w) % h;
        const std::int64_t x = i % w;
        const Corner cz = split(static_cast<double>(z) + u[i], d);
        const Corner cy = split(static_cast<double>(y) + u[vox + i], h);
        const Corner cx = split(static_cast<double>(x) + u[2 * vox + i], w);
        const double v000 = m[(cz.i0 * h + cy.i0) * w + cx.i0];
        const double v001 = m[(cz.i0 * h + cy.i0) * w + cx.i1];
        const double v010 = m[(cz.i0 * h + cy.i1) * w + cx.i0];
        const double v011 = m[(cz.i0 * h + cy.i1) * w + cx.i1];
        const double v100 = m[(cz.i1 * h + cy.i0) * w + cx.i0];
        const double v101 = m[(cz.i1 * h + cy.i0) * w + cx.i1];
        const double v110 = m[(cz.i1 * h + cy.i1) * w + cx.i0];
        const double v111 = m[(cz.i1 * h + cy.i1) * w + cx.i1];
        const double c00 = v000 + (v001 - v000) * cx.f;
        const double c01 = v010 + (v011 - v010) * cx.f;
        const double c10 = v100 + (v101 - v100) * cx.f;
        const double c11 = v110 + (v111 - v110) * cx.f;
        const double c0 = c00 + (c01 - c00) * cy.f;
        const double c1 = c10 + (c11 - c10) * cy.f;
        o[i] = c0 + (c1 - c0) * cz.f;
    }

    const bool tm = grad_tracked(moving), tf = grad_tracked(field);
    Tape* tape = Tape::active();
    if (tape && (tm || tf)) {
        tape->record("warp", out, [moving, field, tm, tf](std::span<const double> g,
                                                          Adjoints& adj) {
            const std::int64_t d = moving.dim(0), h = moving.dim(1), w = moving.dim(2);
            const std::int64_t vox = d * h * w;
            const double* m = moving.data().data();
            const double* u = field.data().data();
            double* gm = tm ? adj.of(moving).data() : nullptr;
            double* gu = tf ? adj.of(field).data() : nullptr;
            // Sequential scatter keeps the moving-image gradient deterministic
            // (many voxels share corners).
            for (std::int64_t i = 0; i < vox; ++i) {
                const std::int64_t z = i / (h * w);
                const std::int64_t y = (i / w) % h;
                const std::int64_t x = i % w;
                const Corner cz = split(static_cast<double>(z) + u[i], d);
                const Corner cy = split(static_cast<double>(y) + u[vox + i], h);
                const Corner cx = split(static_cast<double>(x) + u[2 * vox + i], w);
                const double wz0 = 1.0 - cz.f, wz1 = cz.f;
                const double wy0 = 1.0 - cy.f, wy1 = cy.f;
                const double wx0 = 1.0 - cx.f, wx1 = cx.f;
                const double gv = g[i];
                const std::int64_t i000 = (cz.i0 * h + cy.i0) * w + cx.i0;
                const std::int64_t i001 = (cz.i0 * h + cy.i0) * w + cx.i1;
                const std::int64_t i010 = (cz.i0 * h + cy.i1) * w + cx.i0;
                const std::int64_t i011 = (cz.i0 * h + cy.i1) * w + cx.i1;
                const std::int64_t i100 = (cz.i1 * h + cy.i0) * w + cx.i0;
                const std::int64_t i101 = (cz.i1 * h + cy.i0) * w + cx.i1;
                const std::int64_t i110 = (cz.i1 * h + cy.i1) * w + cx.i0;
                const std::int64_t i111 = (cz.i1 * h + cy.i1) * w + cx.i1;
                if (gm) {
                    gm[i000] += gv * wz0 * wy0 * wx0;
                    gm[i001] += gv * wz0 * wy0 * wx1;
                    gm[i010] += gv * wz0 * wy1 * wx0;
                    gm[i011] += gv * wz0 * wy1 * wx1;
                    gm[i100] += gv * wz1 * wy0 * wx0;
                    gm[i101] += gv * wz1 * wy0 * wx1;
                    gm[i110] += gv * wz1 * wy1 * wx0;
                    gm[i111] += gv * wz1 * wy1 * wx1;
                }
                if (gu) {
                    const double v000 = m[i000], v001 = m[i001], v010 = m[i010], v011 = m[i011];
                    const double v100 = m[i100], v101 = m[i101], v110 = m[i110], v111 = m[i111];
                    // d/dcoord of the trilinear interpolant; zero where the
                    // sample clamped to the border (i0 == i1).
                    const double dz = (v100 - v000) * wy0 * wx0 + (v101 - v001) * wy0 * wx1 +
                                      (v110 - v010) * wy1 * wx0 + (v111 - v011) * wy1 * wx1;
                    const double dy = (v010 - v000) * wz0 * wx0 + (v011 - v001) * wz0 * wx1 +
                                      (v110 - v100) * wz1 * wx0 + (v111 - v101) * wz1 * wx1;
                    const double dx = (v001 - v000) * wz0 * wy0 + (v011 - v010) * wz0 * wy1 +
                                      (v101 - v100) * wz1 * wy0 + (v111 - v110) * wz1 * wy1;
                    gu[i] += gv * (cz.i1 > cz.i0 ? dz : 0.0);
                    gu[vox + i] += gv * (cy.i1 > cy.i0 ? dy : 0.0);
                    gu[2 * vox + i] += gv * (cx.i1 > cx.i0 ? dx : 0.0);
                }
            }
        });
    }
    return out;
}

Volume warp(const Volume& moving, const DeformationField& field) {
    if (field.dims() != moving.dims)
        throw InputError("warp: field dims do not match volume dims");
    Tensor warped = warp(moving.to_tensor(), field.u);
    return Volume::from_tensor(warped, moving.spacing);
}

LabelMap warp_labels(const LabelMap& labels, const DeformationField& field) {
    if (field.dims() != labels.dims)
        throw InputError("warp_labels: field dims do not match label dims");
    const std::int64_t d = labels.dims[0], h = labels.dims[1], w = labels.dims[2];
    const std::int64_t vox = d * h * w;
    const double* u = field.u.data().data();
    LabelMap out = LabelMap::zeros(labels.dims);
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (std::int64_t i = 0; i < vox; ++i) {
        const std::int64_t z = i / (h * w);
        const std::int64_t y = (i / w) % h;
        const std::int64_t x = i % w;
        auto nearest = [](double c, std::int64_t n) {
            const double r = std::round(c);
            if (r <= 0.0) return std::int64_t{0};
            if (r >= static_cast<double>(n - 1)) return n - 1;
            return static_cast<std::int64_t>(r);
        };
        const std::int64_t sz = nearest(static_cast<double>(z) + u[i], d);
        const std::int64_t sy = nearest(static_cast<double>(y) + u[vox + i], h);
        const std::int64_t sx = nearest(static_cast<double>(x) + u[2 * vox + i], w);
        out.values[static_cast<std::size_t>(i)] = labels.at(sz, sy, sx);
    }
    return out;
}

}  // namespace tetra
