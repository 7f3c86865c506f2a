// SPDX-License-Identifier: Apache-2.0
#include "mstream/kinematics.hpp"

#include <cmath>
#include <map>

namespace mstream::kin {

namespace {
constexpr double kDegenerateTol = 1e-8;

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }
}  // namespace

void Skeleton::validate() const {
  const size_t j = parent.size();
  if (j == 0) raise(Err::DimensionError, "skeleton has no joints");
  if (names.size() != j || offset.size() != j)
    raise(Err::DimensionError, "skeleton arrays disagree on joint count");
  if (parent[0] != -1) raise(Err::DimensionError, "joint 0 must be the root");
  for (size_t i = 1; i < j; i++) {
    if (parent[i] < 0 || parent[i] >= int(i))
      raise(Err::DimensionError, "parents must precede children (joint " + std::to_string(i) + ")");
  }
  for (int f : foot_joints)
    if (f < 0 || f >= int(j)) raise(Err::DimensionError, "foot joint out of range");
  for (int u : upper_joints)
    if (u < 0 || u >= int(j)) raise(Err::DimensionError, "upper joint out of range");
}

Eigen::Matrix3d rot6d_to_matrix(const double* r) {
  Eigen::Vector3d a1(r[0], r[1], r[2]), a2(r[3], r[4], r[5]);
  const double n1 = a1.norm();
  if (n1 < kDegenerateTol) raise(Err::DegenerateRotation, "first 6d column near zero");
  const Eigen::Vector3d b1 = a1 / n1;
  const Eigen::Vector3d w = a2 - b1.dot(a2) * b1;
  const double n2 = w.norm();
  if (n2 < kDegenerateTol) raise(Err::DegenerateRotation, "6d columns near parallel");
  const Eigen::Vector3d b2 = w / n2;
  Eigen::Matrix3d R;
  R.col(0) = b1;
  R.col(1) = b2;
  R.col(2) = b1.cross(b2);
  return R;
}

void matrix_to_rot6d(const Eigen::Matrix3d& R, double* r_out) {
  for (int i = 0; i < 3; i++) r_out[i] = R(i, 0);
  for (int i = 0; i < 3; i++) r_out[3 + i] = R(i, 1);
}

void rot6d_backward(const double* r, const Eigen::Matrix3d& dR, double* r_grad) {
  Eigen::Vector3d a1(r[0], r[1], r[2]), a2(r[3], r[4], r[5]);
  const double n1 = a1.norm();
  if (n1 < kDegenerateTol) raise(Err::DegenerateRotation, "first 6d column near zero");
  const Eigen::Vector3d b1 = a1 / n1;
  const double d = b1.dot(a2);
  const Eigen::Vector3d w = a2 - d * b1;
  const double n2 = w.norm();
  if (n2 < kDegenerateTol) raise(Err::DegenerateRotation, "6d columns near parallel");
  const Eigen::Vector3d b2 = w / n2;

  Eigen::Vector3d db1 = dR.col(0), db2 = dR.col(1);
  const Eigen::Vector3d db3 = dR.col(2);
  // b3 = b1 x b2
  db1 += b2.cross(db3);
  db2 += db3.cross(b1);
  // b2 = w / n2 (normalize adjoint projects out the radial component)
  const Eigen::Vector3d dw = (db2 - db2.dot(b2) * b2) / n2;
  // w = a2 - d * b1
  Eigen::Vector3d da2 = dw;
  double dd = -dw.dot(b1);
  db1 += -d * dw;
  // d = b1 . a2
  db1 += dd * a2;
  da2 += dd * b1;
  // b1 = a1 / n1
  const Eigen::Vector3d da1 = (db1 - db1.dot(b1) * b1) / n1;

  for (int i = 0; i < 3; i++) r_grad[i] += da1[i];
  for (int i = 0; i < 3; i++) r_grad[3 + i] += da2[i];
}

Pose fk_frame(const Skeleton& sk, const double* ch) {
  const int J = sk.joints();
  Pose pose;
  pose.rot.resize(J);
  pose.pos.resize(J);
  pose.rot[0] = rot6d_to_matrix(ch + 3);
  pose.pos[0] = Eigen::Vector3d(0.0, 0.0, ch[2]);
  for (int j = 1; j < J; j++) {
    const int p = sk.parent[j];
    const Eigen::Matrix3d Rj = rot6d_to_matrix(ch + 3 + 6 * j);
    const Eigen::Vector3d oj(sk.offset[j][0], sk.offset[j][1], sk.offset[j][2]);
    pose.rot[j] = pose.rot[p] * Rj;
    pose.pos[j] = pose.pos[p] + pose.rot[p] * oj;
  }
  return pose;
}

std::vector<double> fk_positions(const Skeleton& sk, const Clip& clip) {
  if (clip.channels != sk.channels())
    raise(Err::DimensionError, "clip channels " + std::to_string(clip.channels) +
                                   " vs skeleton " + std::to_string(sk.channels()));
  const int J = sk.joints();
  std::vector<double> out(size_t(clip.frames) * J * 3);
  for (int t = 0; t < clip.frames; t++) {
    const Pose pose = fk_frame(sk, clip.frame(t));
    for (int j = 0; j < J; j++)
      for (int c = 0; c < 3; c++) out[(size_t(t) * J + j) * 3 + c] = pose.pos[j][c];
  }
  return out;
}

void fk_backward(const Skeleton& sk, const Clip& clip, const std::vector<double>& dpos,
                 std::vector<double>* grad_channels) {
  const int J = sk.joints();
  if (dpos.size() != size_t(clip.frames) * J * 3)
    raise(Err::DimensionError, "position adjoint size mismatch");
  grad_channels->assign(size_t(clip.frames) * clip.channels, 0.0);
  std::vector<Eigen::Matrix3d> local(J);
  std::vector<Eigen::Vector3d> pbar(J);
  std::vector<Eigen::Matrix3d> gbar(J);
  for (int t = 0; t < clip.frames; t++) {
    const double* ch = clip.frame(t);
    double* gch = grad_channels->data() + size_t(t) * clip.channels;
    const Pose pose = fk_frame(sk, ch);
    for (int j = 0; j < J; j++) {
      local[j] = rot6d_to_matrix(ch + 3 + 6 * j);
      pbar[j] = Eigen::Vector3d(dpos[(size_t(t) * J + j) * 3 + 0],
                                dpos[(size_t(t) * J + j) * 3 + 1],
                                dpos[(size_t(t) * J + j) * 3 + 2]);
      gbar[j].setZero();
    }
    // Children before parents: reverse joint order is reverse topological.
    for (int j = J - 1; j >= 1; j--) {
      const int p = sk.parent[j];
      const Eigen::Vector3d oj(sk.offset[j][0], sk.offset[j][1], sk.offset[j][2]);
      pbar[p] += pbar[j];
      gbar[p] += pbar[j] * oj.transpose();
      gbar[p] += gbar[j] * local[j].transpose();
      const Eigen::Matrix3d rbar = pose.rot[p].transpose() * gbar[j];
      rot6d_backward(ch + 3 + 6 * j, rbar, gch + 3 + 6 * j);
    }
    rot6d_backward(ch + 3, gbar[0], gch + 3);
    gch[2] += pbar[0][2];
  }
}

Derivatives finite_difference(const std::vector<double>& positions, int frames, int joints) {
  if (frames < 3) raise(Err::TooShort, "finite differences need at least 3 frames");
  if (positions.size() != size_t(frames) * joints * 3)
    raise(Err::DimensionError, "position array size mismatch");
  Derivatives d;
  const size_t row = size_t(joints) * 3;
  d.vel.resize(row * (frames - 1));
  d.acc.resize(row * (frames - 2));
  for (int t = 0; t + 1 < frames; t++)
    for (size_t c = 0; c < row; c++)
      d.vel[t * row + c] = positions[(t + 1) * row + c] - positions[t * row + c];
  for (int t = 0; t + 2 < frames; t++)
    for (size_t c = 0; c < row; c++) d.acc[t * row + c] = d.vel[(t + 1) * row + c] - d.vel[t * row + c];
  return d;
}

namespace {

// Mean over frames and joints of per-joint L1 differences, restricted to a
// joint set; order = 0 compares positions, 1 first differences, 2 second.
// Accumulates lambda-weighted position adjoints when grad is non-null.
double l1_term(const std::vector<double>& a, const std::vector<double>& b, int frames,
               int joints, const std::vector<int>& set, int order, double lambda,
               std::vector<double>* grad) {
  const int n = frames - order;
  if (n <= 0 || set.empty()) return 0.0;
  const size_t row = size_t(joints) * 3;
  const double scale = 1.0 / (double(n) * double(set.size()));
  double acc = 0.0;
  for (int t = 0; t < n; t++) {
    for (int j : set) {
      for (int c = 0; c < 3; c++) {
        const size_t i0 = t * row + j * 3 + c;
        double diff = 0.0;
        if (order == 0) {
          diff = a[i0] - b[i0];
        } else if (order == 1) {
          diff = (a[i0 + row] - a[i0]) - (b[i0 + row] - b[i0]);
        } else {
          diff = (a[i0 + 2 * row] - 2 * a[i0 + row] + a[i0]) -
                 (b[i0 + 2 * row] - 2 * b[i0 + row] + b[i0]);
        }
        acc += std::abs(diff);
        if (grad) {
          const double g = lambda * scale * sgn(diff);
          if (order == 0) {
            (*grad)[i0] += g;
          } else if (order == 1) {
            (*grad)[i0 + row] += g;
            (*grad)[i0] -= g;
          } else {
            (*grad)[i0 + 2 * row] += g;
            (*grad)[i0 + row] -= 2 * g;
            (*grad)[i0] += g;
          }
        }
      }
    }
  }
  return acc * scale;
}

}  // namespace

AuxBreakdown aux_terms(const std::vector<double>& positions_hat,
                       const std::vector<double>& positions_gt, int frames, int joints,
                       const std::vector<int>& foot_joints, const AuxWeights& w,
                       std::vector<double>* grad_out) {
  if (positions_hat.size() != positions_gt.size() ||
      positions_hat.size() != size_t(frames) * joints * 3)
    raise(Err::DimensionError, "position arrays disagree");
  std::vector<int> all(joints);
  for (int j = 0; j < joints; j++) all[j] = j;
  AuxBreakdown out;
  out.pos = l1_term(positions_hat, positions_gt, frames, joints, all, 0, w.pos, grad_out);
  out.vel = l1_term(positions_hat, positions_gt, frames, joints, all, 1, w.vel, grad_out);
  out.acc = l1_term(positions_hat, positions_gt, frames, joints, all, 2, w.acc, grad_out);
  out.foot_vel =
      l1_term(positions_hat, positions_gt, frames, joints, foot_joints, 1, w.foot_vel, grad_out);
  out.foot_pos =
      l1_term(positions_hat, positions_gt, frames, joints, foot_joints, 0, w.foot_pos, grad_out);
  out.total = w.pos * out.pos + w.vel * out.vel + w.acc * out.acc + w.foot_vel * out.foot_vel +
              w.foot_pos * out.foot_pos;
  if (!std::isfinite(out.total)) raise(Err::NumericalError, "auxiliary loss is not finite");
  return out;
}

AuxBreakdown auxiliary_loss(const Clip& clip_hat, const Clip& clip_gt, const Skeleton& sk,
                            const AuxWeights& w, std::vector<double>* grad_channels) {
  if (clip_hat.frames != clip_gt.frames || clip_hat.channels != clip_gt.channels)
    raise(Err::DimensionError, "clips disagree in shape");
  const auto ph = fk_positions(sk, clip_hat);
  const auto pg = fk_positions(sk, clip_gt);
  if (!grad_channels)
    return aux_terms(ph, pg, clip_hat.frames, sk.joints(), sk.foot_joints, w, nullptr);
  std::vector<double> dpos(ph.size(), 0.0);
  const AuxBreakdown out =
      aux_terms(ph, pg, clip_hat.frames, sk.joints(), sk.foot_joints, w, &dpos);
  fk_backward(sk, clip_hat, dpos, grad_channels);
  return out;
}

std::vector<double> integrate_root(const Clip& clip) {
  std::vector<double> out(size_t(clip.frames) * 3, 0.0);
  double x = 0.0, y = 0.0;
  for (int t = 0; t < clip.frames; t++) {
    out[t * 3 + 0] = x;
    out[t * 3 + 1] = y;
    out[t * 3 + 2] = clip.at(t, 2);
    x += clip.at(t, 0);
    y += clip.at(t, 1);
  }
  return out;
}

Skeleton default_skeleton() {
  Skeleton sk;
  auto add = [&](const std::string& name, int parent, double x, double y, double z) {
    sk.names.push_back(name);
    sk.parent.push_back(parent);
    sk.offset.push_back({x, y, z});
  };
  add("root", -1, 0.0, 0.0, 0.0);           // 0
  add("spine", 0, 0.0, 0.0, 0.12);          // 1
  add("chest", 1, 0.0, 0.0, 0.14);          // 2
  add("neck", 2, 0.0, 0.0, 0.12);           // 3
  add("head", 3, 0.0, 0.0, 0.10);           // 4
  add("l_shoulder", 2, 0.16, 0.0, 0.08);    // 5
  add("l_elbow", 5, 0.26, 0.0, 0.0);        // 6
  add("l_hand", 6, 0.24, 0.0, 0.0);         // 7
  add("r_shoulder", 2, -0.16, 0.0, 0.08);   // 8
  add("r_elbow", 8, -0.26, 0.0, 0.0);       // 9
  add("r_hand", 9, -0.24, 0.0, 0.0);        // 10
  add("l_hip", 0, 0.09, 0.0, -0.02);        // 11
  add("l_knee", 11, 0.0, 0.0, -0.40);       // 12
  add("l_ankle", 12, 0.0, 0.0, -0.40);      // 13
  add("l_toe", 13, 0.0, 0.14, -0.06);       // 14
  add("r_hip", 0, -0.09, 0.0, -0.02);       // 15
  add("r_knee", 15, 0.0, 0.0, -0.40);       // 16
  add("r_ankle", 16, 0.0, 0.0, -0.40);      // 17
  add("r_toe", 17, 0.0, 0.14, -0.06);       // 18
  sk.foot_joints = {13, 14, 17, 18};
  sk.upper_joints = {2, 3, 4, 5, 6, 7, 8, 9, 10};
  sk.validate();
  return sk;
}

Clip mirror_clip(const Skeleton& sk, const Clip& clip) {
  const int J = sk.joints();
  std::vector<int> partner(J);
  std::map<std::string, int> index;
  for (int j = 0; j < J; j++) index[sk.names[j]] = j;
  for (int j = 0; j < J; j++) {
    const std::string& n = sk.names[j];
    partner[j] = j;
    if (n.rfind("l_", 0) == 0) {
      auto it = index.find("r_" + n.substr(2));
      if (it == index.end()) raise(Err::LabelError, "no mirror partner for " + n);
      partner[j] = it->second;
    } else if (n.rfind("r_", 0) == 0) {
      auto it = index.find("l_" + n.substr(2));
      if (it == index.end()) raise(Err::LabelError, "no mirror partner for " + n);
      partner[j] = it->second;
    }
  }
  Clip out(clip.frames, clip.channels, clip.fps);
  for (int t = 0; t < clip.frames; t++) {
    out.at(t, 0) = -clip.at(t, 0);  // planar x velocity flips
    out.at(t, 1) = clip.at(t, 1);
    out.at(t, 2) = clip.at(t, 2);
    for (int j = 0; j < J; j++) {
      const int s = partner[j];
      // R' = M R M with M = diag(-1,1,1): col1 -> -M col1, col2 -> M col2.
      const double* r = clip.frame(t) + 3 + 6 * s;
      double* o = out.frame(t) + 3 + 6 * j;
      o[0] = r[0];
      o[1] = -r[1];
      o[2] = -r[2];
      o[3] = -r[3];
      o[4] = r[4];
      o[5] = r[5];
    }
  }
  return out;
}

}  // namespace mstream::kin
