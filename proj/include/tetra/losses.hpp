#pragma once

#include "tetra/volume.hpp"

namespace tetra {

struct LossConfig {
    double lambda_smooth = 1.0;
    int ncc_window = 9;     // odd
    double epsilon = 1e-5;  // NCC denominator stabilizer

    void validate() const;
};

/// Negated mean of local windowed squared NCC, so lower is better and a
/// perfect (or affine) match scores -1. Zero-variance windows contribute 0
/// through the epsilon term. Inputs are [D,H,W] tensors.
Tensor ncc_loss(const Tensor& fixed, const Tensor& warped, const LossConfig& cfg = {});

/// Mean over voxels of the squared forward-difference gradients of u, summed
/// over components and axes. Constant fields score exactly 0.
Tensor smooth_loss(const Tensor& field_u);
double smooth_loss(const DeformationField& field);

/// ncc_loss(fixed, warp(moving, field)) + lambda * smooth_loss(field).
Tensor total_loss(const Tensor& fixed, const Tensor& moving, const Tensor& field_u,
                  const LossConfig& cfg = {});

}  // namespace tetra
