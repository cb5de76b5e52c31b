#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tetra/tensor.hpp"

namespace tetra {

using Dims3 = std::array<std::int64_t, 3>;

inline std::int64_t dims_numel(const Dims3& d) { return d[0] * d[1] * d[2]; }

/// Scalar 3D image. Intensities are expected in [0,1] (the phantom generator
/// and any preprocessed input guarantee this); spacing is carried as metadata.
struct Volume {
    Dims3 dims{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<double> values;

    static Volume zeros(Dims3 dims);
    double& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return values[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    double at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return values[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    /// Copy into a [D,H,W] tensor.
    Tensor to_tensor() const;
    static Volume from_tensor(const Tensor& t, std::array<double, 3> spacing = {1, 1, 1});
};

/// Integer segmentation; label 0 is background.
struct LabelMap {
    Dims3 dims{0, 0, 0};
    std::vector<std::int32_t> values;

    static LabelMap zeros(Dims3 dims);
    std::int32_t& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return values[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    std::int32_t at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return values[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }
};

/// Per-voxel displacement u, stored as a [3,D,H,W] tensor in voxel units.
/// Warping convention: warped(p) = moving(p + u(p)).
struct DeformationField {
    Tensor u;

    static DeformationField zeros(Dims3 dims);
    static DeformationField from_tensor(Tensor t);
    Dims3 dims() const { return {u.dim(1), u.dim(2), u.dim(3)}; }
    double component(int c, std::int64_t z, std::int64_t y, std::int64_t x) const {
        const auto d = u.shape();
        return u.data()[((c * d[1] + z) * d[2] + y) * d[3] + x];
    }
};

}  // namespace tetra
