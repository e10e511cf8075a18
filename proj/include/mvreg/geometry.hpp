#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

namespace mvreg {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

struct DegenerateSixd : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateConfiguration : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Rigid transform: p -> R*p + t.
struct RigidPose {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    static RigidPose identity() { return {}; }
};

bool is_rotation(const Mat3& m, double tol = 1e-9);

// a∘b: rotation a.R*b.R, translation a.R*b.t + a.t.
RigidPose compose(const RigidPose& a, const RigidPose& b);

RigidPose inverse(const RigidPose& a);

// Relative pose of the pair (a, b): T_ab = T_a ∘ T_b⁻¹.
RigidPose relative_pose(const RigidPose& a, const RigidPose& b);

// Gram-Schmidt conversion of two stacked 3-vectors into the rotation
// whose first two columns span them. Throws DegenerateSixd when the
// first vector vanishes or the second is parallel to it.
Mat3 sixd_to_rotation(const Vec6& v);

// Geodesic angle between two rotations, in [0, pi].
double rotation_error(const Mat3& pred, const Mat3& gt);

double translation_error(const Vec3& pred, const Vec3& gt);

Mat3 axis_angle_rotation(const Vec3& axis, double angle);

// Weighted rigid alignment minimizing sum_i w_i * |T(src_i) - dst_i|^2.
// Throws DegenerateConfiguration when the weighted covariance has rank < 2.
RigidPose kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                 const std::vector<double>& weights);

}  // namespace mvreg
