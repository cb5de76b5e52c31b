#pragma once

#include "tetra/volume.hpp"

namespace tetra {

/// [3,D,H,W] tensor with grid[c] holding the coordinate along axis c.
Tensor identity_grid(Dims3 dims);

/// Trilinear resampling of `moving` at p + u(p). Out-of-range samples clamp
/// to the border. Differentiable w.r.t. both arguments.
Tensor warp(const Tensor& moving, const Tensor& field);
Volume warp(const Volume& moving, const DeformationField& field);

/// Nearest-neighbour resampling for categorical maps; not differentiable.
LabelMap warp_labels(const LabelMap& labels, const DeformationField& field);

}  // namespace tetra
