#pragma once

#include <Eigen/Dense>
#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace molang {

inline constexpr int kNumJoints = 22;

// First two columns of a rotation matrix, column-major: (c1x,c1y,c1z,c2x,c2y,c2z).
using Rotation6d = std::array<double, 6>;

// All 22 joint rotations of one frame, each relative to the joint's parent.
using Pose = std::array<Rotation6d, kNumJoints>;

struct DegenerateRotationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidSkeletonError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Kinematic tree: parent indices, rest-pose bone offsets (meters, in the
// parent frame) and the bone adjacency with self-loops.
struct SkeletonGraph {
  std::array<int, kNumJoints> parent;                // parent[0] == -1
  std::array<std::string, kNumJoints> joint_name;
  std::array<Eigen::Vector3d, kNumJoints> offset;
  Eigen::Matrix<double, kNumJoints, kNumJoints> adjacency;

  static const SkeletonGraph& smpl22();

  std::string to_json() const;
  static SkeletonGraph from_json(const std::string& text);
};

Eigen::Matrix3d axis_angle_to_matrix(const Eigen::Vector3d& v);
Rotation6d matrix_to_6d(const Eigen::Matrix3d& r);
Eigen::Matrix3d six_d_to_matrix(const Rotation6d& d);

Rotation6d identity_6d();

// Raw componentwise blend in 6D space; orthonormalization happens lazily in
// six_d_to_matrix.
Rotation6d interpolate_6d(const Rotation6d& a, const Rotation6d& b, double t);
Pose interpolate_pose(const Pose& a, const Pose& b, double t);

std::array<Eigen::Vector3d, kNumJoints> forward_kinematics(const Pose& pose,
                                                           const SkeletonGraph& skel);

// Symmetric 0/1 matrix with unit diagonal; throws InvalidSkeletonError on a
// cyclic or multi-root parent array.
Eigen::MatrixXd build_adjacency(const std::vector<int>& parents);

}  // namespace molang
