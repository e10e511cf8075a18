#include "mvreg/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace mvreg {

bool is_rotation(const Mat3& m, double tol) {
    return (m * m.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::abs(m.determinant() - 1.0) < tol;
}

RigidPose compose(const RigidPose& a, const RigidPose& b) {
    return {a.R * b.R, a.R * b.t + a.t};
}

RigidPose inverse(const RigidPose& a) {
    return {a.R.transpose(), -(a.R.transpose() * a.t)};
}

RigidPose relative_pose(const RigidPose& a, const RigidPose& b) {
    return compose(a, inverse(b));
}

Mat3 sixd_to_rotation(const Vec6& v) {
    const Vec3 a1 = v.head<3>();
    const Vec3 a2 = v.tail<3>();
    const double n1 = a1.norm();
    if (n1 < 1e-8) throw DegenerateSixd("sixd_to_rotation: first vector too small");
    const Vec3 b1 = a1 / n1;
    const Vec3 u2 = a2 - b1.dot(a2) * b1;
    const double n2 = u2.norm();
    if (n2 < 1e-8) throw DegenerateSixd("sixd_to_rotation: vectors nearly parallel");
    const Vec3 b2 = u2 / n2;
    const Vec3 b3 = b1.cross(b2);
    Mat3 r;
    r.col(0) = b1;
    r.col(1) = b2;
    r.col(2) = b3;
    return r;
}

double rotation_error(const Mat3& pred, const Mat3& gt) {
    const double c = ((pred.transpose() * gt).trace() - 1.0) / 2.0;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

double translation_error(const Vec3& pred, const Vec3& gt) {
    return (pred - gt).norm();
}

Mat3 axis_angle_rotation(const Vec3& axis, double angle) {
    return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

RigidPose kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                 const std::vector<double>& weights) {
    if (src.size() != dst.size() || src.size() != weights.size())
        throw DegenerateConfiguration("kabsch: length mismatch");
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (src.size() < 3 || wsum <= 0.0)
        throw DegenerateConfiguration("kabsch: need >= 3 weighted points");

    Vec3 src_mean = Vec3::Zero();
    Vec3 dst_mean = Vec3::Zero();
    for (size_t i = 0; i < src.size(); ++i) {
        src_mean += weights[i] * src[i];
        dst_mean += weights[i] * dst[i];
    }
    src_mean /= wsum;
    dst_mean /= wsum;

    Mat3 cov = Mat3::Zero();
    for (size_t i = 0; i < src.size(); ++i)
        cov += weights[i] * (dst[i] - dst_mean) * (src[i] - src_mean).transpose();

    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.singularValues()(1) < 1e-12 * std::max(1.0, svd.singularValues()(0)))
        throw DegenerateConfiguration("kabsch: covariance rank < 2");

    Mat3 d = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    Mat3 r = svd.matrixU() * d * svd.matrixV().transpose();
    return {r, dst_mean - r * src_mean};
}

}  // namespace mvreg
