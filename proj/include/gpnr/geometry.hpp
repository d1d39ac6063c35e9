#pragma once

#include <cmath>
#include <vector>

#include "gpnr/common.hpp"
#include "gpnr/rng.hpp"

namespace gpnr {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return {x / n, y / n, z / n};
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Row-major 3x3.
struct Mat3 {
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
    return {{r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z}};
  }
  static Mat3 from_cols(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
    return {{c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z}};
  }

  Vec3 row(int i) const { return {m[3 * i], m[3 * i + 1], m[3 * i + 2]}; }
  Vec3 col(int j) const { return {m[j], m[3 + j], m[6 + j]}; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += m[3 * i + k] * o.m[3 * k + j];
        r.m[3 * i + j] = s;
      }
    return r;
  }
  Mat3 transposed() const {
    return {{m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}};
  }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
};

// World-to-camera rigid transform: p_cam = R * p_world + t.
struct CameraPose {
  Mat3 R;
  Vec3 t;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
};

// r = (v, o x v); origin-independent along the line.
struct PluckerRay {
  Vec3 d;
  Vec3 m;
};

// p' = R * p + t.
struct RigidTransform {
  Mat3 R;
  Vec3 t;
};

// p' = s * R * p + t, s > 0.
struct SimilarityTransform {
  double s = 1;
  Mat3 R;
  Vec3 t;
};

enum class SelectMode { kTrain, kInfer };

Vec3 camera_center(const CameraPose& pose);

// Direction = normalize(R^T C^-1 (px, py, 1)); origin = camera center.
Ray pixel_to_ray(const CameraPose& pose, const CameraIntrinsics& intr, double px,
                 double py);

PluckerRay to_plucker(const Ray& ray);

// Rigid map taking the target ray to origin (0,0,0), direction (0,0,1). The
// frame is built by Gram-Schmidt against the target camera's y axis; if the
// ray is parallel to it, the camera x axis seeds the orthogonalization.
RigidTransform canonicalizing_transform(const CameraPose& target,
                                        const CameraIntrinsics& intr, double px,
                                        double py);

// World-to-camera pose of the same physical camera after re-expressing world
// points as p' = T(p).
CameraPose apply_rigid_to_pose(const RigidTransform& T, const CameraPose& pose);

Ray apply_rigid_to_ray(const RigidTransform& T, const Ray& ray);

RigidTransform inverse(const RigidTransform& T);

// Camera pose in the similarity-transformed world; pixels are unchanged and
// camera-frame depths scale by sim.s.
CameraPose apply_similarity_to_pose(const SimilarityTransform& sim,
                                    const CameraPose& pose);

// M depths linear in [near, far]; single sample at the midpoint.
std::vector<double> sample_depths(double near, double far, int M);

struct EpipolarSample {
  double px = 0, py = 0;
  bool valid = false;
  double cam_depth = 0;  // camera-frame z of the projected point
};

// Projects the target-ray point at `depth` into a reference camera. Valid
// when the point is in front of the camera and inside the image bounds
// expanded by `margin` pixels on each side.
EpipolarSample epipolar_project(const Ray& target, double depth,
                                const CameraPose& ref, const CameraIntrinsics& intr,
                                double margin = 0.0);

// K reference views for a target at `target_center`: the K nearest of the N
// nearest candidates (infer), or a uniform K-subset of them (train). Views in
// `exclude` and views coincident with the target are never candidates.
std::vector<int> select_reference_views(const std::vector<CameraPose>& poses,
                                        const Vec3& target_center, int N, int K,
                                        SelectMode mode, RngStream* rng,
                                        const std::vector<int>& exclude = {});

}  // namespace gpnr
