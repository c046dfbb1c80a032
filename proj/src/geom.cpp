#include "molang/geom.hpp"

#include <cmath>

#include "json.hpp"

namespace molang {

Eigen::Matrix3d axis_angle_to_matrix(const Eigen::Vector3d& v) {
  if (!v.allFinite()) {
    throw std::invalid_argument("axis_angle_to_matrix: non-finite input");
  }
  double angle = v.norm();
  if (angle < 1e-12) {
    return Eigen::Matrix3d::Identity();
  }
  Eigen::Vector3d axis = v / angle;
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

Rotation6d matrix_to_6d(const Eigen::Matrix3d& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

Eigen::Matrix3d six_d_to_matrix(const Rotation6d& d) {
  Eigen::Vector3d c1(d[0], d[1], d[2]);
  Eigen::Vector3d c2(d[3], d[4], d[5]);
  double n1 = c1.norm();
  if (n1 < 1e-8) {
    throw DegenerateRotationError("six_d_to_matrix: first column near zero");
  }
  c1 /= n1;
  c2 -= c1.dot(c2) * c1;
  double n2 = c2.norm();
  if (n2 < 1e-8) {
    throw DegenerateRotationError("six_d_to_matrix: columns are parallel");
  }
  c2 /= n2;
  Eigen::Matrix3d r;
  r.col(0) = c1;
  r.col(1) = c2;
  r.col(2) = c1.cross(c2);
  return r;
}

Rotation6d identity_6d() { return {1, 0, 0, 0, 1, 0}; }

Rotation6d interpolate_6d(const Rotation6d& a, const Rotation6d& b, double t) {
  if (t < 0.0 || t > 1.0) {
    throw std::invalid_argument("interpolate_6d: t out of [0,1]");
  }
  Rotation6d out;
  for (int i = 0; i < 6; ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
  return out;
}

Pose interpolate_pose(const Pose& a, const Pose& b, double t) {
  if (t < 0.0 || t > 1.0) {
    throw std::invalid_argument("interpolate_pose: t out of [0,1]");
  }
  Pose out;
  for (int j = 0; j < kNumJoints; ++j) out[j] = interpolate_6d(a[j], b[j], t);
  return out;
}

std::array<Eigen::Vector3d, kNumJoints> forward_kinematics(const Pose& pose,
                                                           const SkeletonGraph& skel) {
  std::array<Eigen::Vector3d, kNumJoints> position;
  std::array<Eigen::Matrix3d, kNumJoints> global;
  position[0] = Eigen::Vector3d::Zero();
  global[0] = six_d_to_matrix(pose[0]);
  // parents precede children in the SMPL ordering
  for (int j = 1; j < kNumJoints; ++j) {
    int p = skel.parent[j];
    position[j] = position[p] + global[p] * skel.offset[j];
    global[j] = global[p] * six_d_to_matrix(pose[j]);
  }
  return position;
}

Eigen::MatrixXd build_adjacency(const std::vector<int>& parents) {
  int n = static_cast<int>(parents.size());
  int roots = 0;
  for (int j = 0; j < n; ++j) {
    int p = parents[j];
    if (p < 0) {
      ++roots;
      continue;
    }
    if (p >= n || p == j) {
      throw InvalidSkeletonError("build_adjacency: bad parent index");
    }
    // walk to the root; a cycle never terminates within n hops
    int cur = j, hops = 0;
    while (parents[cur] >= 0) {
      cur = parents[cur];
      if (++hops > n) {
        throw InvalidSkeletonError("build_adjacency: cycle in parent array");
      }
    }
  }
  if (roots != 1) {
    throw InvalidSkeletonError("build_adjacency: expected exactly one root, got " +
                               std::to_string(roots));
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  for (int j = 0; j < n; ++j) {
    if (parents[j] >= 0) {
      a(j, parents[j]) = 1.0;
      a(parents[j], j) = 1.0;
    }
  }
  return a;
}

namespace {

SkeletonGraph make_smpl22() {
  SkeletonGraph s;
  struct JointDef {
    const char* name;
    int parent;
    double x, y, z;
  };
  // SMPL joint order, rest offsets in meters relative to the parent
  static const JointDef defs[kNumJoints] = {
      {"pelvis", -1, 0.00, 0.00, 0.00},
      {"left_hip", 0, 0.09, -0.06, 0.00},
      {"right_hip", 0, -0.09, -0.06, 0.00},
      {"spine1", 0, 0.00, 0.11, 0.00},
      {"left_knee", 1, 0.00, -0.40, 0.00},
      {"right_knee", 2, 0.00, -0.40, 0.00},
      {"spine2", 3, 0.00, 0.13, 0.00},
      {"left_ankle", 4, 0.00, -0.42, 0.00},
      {"right_ankle", 5, 0.00, -0.42, 0.00},
      {"spine3", 6, 0.00, 0.12, 0.00},
      {"left_foot", 7, 0.00, -0.06, 0.13},
      {"right_foot", 8, 0.00, -0.06, 0.13},
      {"neck", 9, 0.00, 0.22, 0.00},
      {"left_collar", 9, 0.07, 0.12, 0.00},
      {"right_collar", 9, -0.07, 0.12, 0.00},
      {"head", 12, 0.00, 0.21, 0.00},
      {"left_shoulder", 13, 0.10, 0.02, 0.00},
      {"right_shoulder", 14, -0.10, 0.02, 0.00},
      {"left_elbow", 16, 0.26, 0.00, 0.00},
      {"right_elbow", 17, -0.26, 0.00, 0.00},
      {"left_wrist", 18, 0.25, 0.00, 0.00},
      {"right_wrist", 19, -0.25, 0.00, 0.00},
  };
  std::vector<int> parents(kNumJoints);
  for (int j = 0; j < kNumJoints; ++j) {
    s.parent[j] = defs[j].parent;
    s.joint_name[j] = defs[j].name;
    s.offset[j] = Eigen::Vector3d(defs[j].x, defs[j].y, defs[j].z);
    parents[j] = defs[j].parent;
  }
  s.adjacency = build_adjacency(parents);
  return s;
}

}  // namespace

const SkeletonGraph& SkeletonGraph::smpl22() {
  static const SkeletonGraph s = make_smpl22();
  return s;
}

std::string SkeletonGraph::to_json() const {
  nlohmann::json joints = nlohmann::json::array();
  for (int j = 0; j < kNumJoints; ++j) {
    joints.push_back({{"id", j},
                      {"name", joint_name[j]},
                      {"parent", parent[j]},
                      {"offset", {offset[j].x(), offset[j].y(), offset[j].z()}}});
  }
  return nlohmann::json{{"joints", joints}}.dump(2);
}

SkeletonGraph SkeletonGraph::from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  const auto& joints = doc.at("joints");
  if (joints.size() != kNumJoints) {
    throw InvalidSkeletonError("skeleton json: expected 22 joints");
  }
  SkeletonGraph s;
  std::vector<int> parents(kNumJoints);
  for (const auto& jj : joints) {
    int id = jj.at("id").get<int>();
    if (id < 0 || id >= kNumJoints) {
      throw InvalidSkeletonError("skeleton json: joint id out of range");
    }
    s.joint_name[id] = jj.at("name").get<std::string>();
    s.parent[id] = jj.at("parent").get<int>();
    auto off = jj.at("offset");
    s.offset[id] = Eigen::Vector3d(off.at(0).get<double>(), off.at(1).get<double>(),
                                   off.at(2).get<double>());
    parents[id] = s.parent[id];
  }
  s.adjacency = build_adjacency(parents);
  return s;
}

}  // namespace molang
