// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <string>
#include <vector>

#include "mstream/errors.hpp"

namespace mstream::kin {

/// Rigid skeleton. Joints are stored in topological order: parent[j] < j for
/// every non-root joint, parent[0] == -1. Offsets are rest-pose translations
/// from the parent joint, meters, z-up.
struct Skeleton {
  std::vector<std::string> names;
  std::vector<int> parent;
  std::vector<std::array<double, 3>> offset;
  std::vector<int> foot_joints;   // ankles and toes, used by foot loss terms
  std::vector<int> upper_joints;  // gesture joints, used by beat metrics

  int joints() const { return int(parent.size()); }
  int channels() const { return 3 + 6 * joints(); }

  /// Throws DimensionError unless the joint arrays are consistent and
  /// topologically ordered with exactly one root at index 0.
  void validate() const;
};

/// Motion clip in feature space. Frame layout, row-major N x D:
///   [0] root planar velocity x (m/frame)
///   [1] root planar velocity y
///   [2] root height (m, world z of the root joint)
///   [3 + 6j .. 8 + 6j] 6d rotation of joint j (first two matrix columns)
/// Positions produced by fk() are character-centric: planar velocity is not
/// integrated, the root stays above the origin.
struct Clip {
  int frames = 0;
  int channels = 0;
  double fps = 30.0;
  std::vector<double> data;

  Clip() = default;
  Clip(int n, int d, double fps_ = 30.0)
      : frames(n), channels(d), fps(fps_), data(size_t(n) * d, 0.0) {}

  double* frame(int t) { return data.data() + size_t(t) * channels; }
  const double* frame(int t) const { return data.data() + size_t(t) * channels; }
  double& at(int t, int c) { return data[size_t(t) * channels + c]; }
  double at(int t, int c) const { return data[size_t(t) * channels + c]; }
};

/// Maps a 6d rotation parameterization to a rotation matrix by Gram-Schmidt.
/// r = [a1; a2], columns b1 = a1/|a1|, b2 = normalized rejection of a2 from
/// b1, b3 = b1 x b2. Invariant to positive rescaling of a1 and a2.
/// Throws DegenerateRotation if |a1| < 1e-8 or the rejection norm < 1e-8.
Eigen::Matrix3d rot6d_to_matrix(const double* r);

/// Inverse embedding: first two columns of R.
void matrix_to_rot6d(const Eigen::Matrix3d& R, double* r_out);

/// Adjoint of rot6d_to_matrix: given dL/dR accumulates dL/dr into r_grad.
/// Forward intermediates are recomputed from r.
void rot6d_backward(const double* r, const Eigen::Matrix3d& dR, double* r_grad);

/// Global joint transforms of one frame.
struct Pose {
  std::vector<Eigen::Matrix3d> rot;  // global rotation per joint
  std::vector<Eigen::Vector3d> pos;  // global position per joint
};

/// Forward kinematics for one frame of channel data.
///   root: G = R_root, p = (0, 0, height)
///   else: G_j = G_parent * R_j, p_j = p_parent + G_parent * offset_j
Pose fk_frame(const Skeleton& sk, const double* channels);

/// FK over a whole clip. Returns positions as a flat N x J x 3 array.
/// Throws DimensionError if clip.channels != sk.channels().
std::vector<double> fk_positions(const Skeleton& sk, const Clip& clip);

/// First differences of a position array: vel[t] = p[t+1] - p[t], N-1 frames,
/// acc[t] = vel[t+1] - vel[t], N-2 frames. Throws TooShort if frames < 3.
struct Derivatives {
  std::vector<double> vel;  // (N-1) x J x 3
  std::vector<double> acc;  // (N-2) x J x 3
};
Derivatives finite_difference(const std::vector<double>& positions, int frames, int joints);

struct AuxWeights {
  double pos = 0.02;
  double vel = 0.2;
  double acc = 0.2;
  double foot_vel = 0.3;
  double foot_pos = 0.05;
};

struct AuxBreakdown {
  double pos = 0, vel = 0, acc = 0, foot_vel = 0, foot_pos = 0;
  double total = 0;
};

/// Position-space penalty. Each term is the mean over frames and joints of
/// the per-joint L1 norm (coordinates summed). Velocity terms use first
/// differences; foot terms restrict to sk.foot_joints. Weighted sum in
/// .total. Optionally accumulates d(total)/d(positions_hat) into grad_out
/// (same layout as positions_hat, caller-zeroed).
AuxBreakdown aux_terms(const std::vector<double>& positions_hat,
                       const std::vector<double>& positions_gt, int frames, int joints,
                       const std::vector<int>& foot_joints, const AuxWeights& w,
                       std::vector<double>* grad_out = nullptr);

/// Full auxiliary loss between two clips: FK both, then aux_terms. If
/// grad_channels is non-null it receives d(total)/d(clip_hat channels),
/// resized to frames x channels. Planar velocity channels get zero gradient
/// because character-centric FK ignores them.
AuxBreakdown auxiliary_loss(const Clip& clip_hat, const Clip& clip_gt, const Skeleton& sk,
                            const AuxWeights& w, std::vector<double>* grad_channels = nullptr);

/// Integrates root planar velocity into a world trajectory. Returns N x 3
/// world root positions starting at (0, 0, height[0]).
std::vector<double> integrate_root(const Clip& clip);

/// Adjoint of fk_positions: given dL/dpositions (N x J x 3), accumulates
/// dL/dchannels into grad_channels (N x D, caller-zeroed).
void fk_backward(const Skeleton& sk, const Clip& clip, const std::vector<double>& dpos,
                 std::vector<double>* grad_channels);

/// Default desk-scale humanoid used by the synthetic benchmarks: 19 joints,
/// 117 channels, z-up, arms along +/-x, feet tagged for contact terms.
Skeleton default_skeleton();

/// Left/right mirror of a clip about the x=0 plane: swaps mirrored joint
/// pairs and conjugates rotations with diag(-1,1,1). Requires the skeleton's
/// joint names to use l_/r_ prefixes for mirrored pairs.
Clip mirror_clip(const Skeleton& sk, const Clip& clip);

}  // namespace mstream::kin
