#include "gpnr/geometry.hpp"

#include <algorithm>
#include <string>

namespace gpnr {

Vec3 camera_center(const CameraPose& pose) {
  // c = -R^T t
  return -(pose.R.transposed() * pose.t);
}

Ray pixel_to_ray(const CameraPose& pose, const CameraIntrinsics& intr, double px,
                 double py) {
  const Vec3 cam_dir{(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0};
  const Vec3 world_dir = pose.R.transposed() * cam_dir;
  return Ray{camera_center(pose), world_dir.normalized()};
}

PluckerRay to_plucker(const Ray& ray) {
  return PluckerRay{ray.dir, ray.origin.cross(ray.dir)};
}

RigidTransform canonicalizing_transform(const CameraPose& target,
                                        const CameraIntrinsics& intr, double px,
                                        double py) {
  const Ray ray = pixel_to_ray(target, intr, px, py);
  const Vec3 v = ray.dir;

  // Camera y axis expressed in world coordinates (second row of R).
  Vec3 seed = target.R.row(1);
  Vec3 yp = seed - v * seed.dot(v);
  if (yp.norm() < 1e-8) {
    // Ray parallel to the y axis; reseed with the camera x axis.
    seed = target.R.row(0);
    yp = seed - v * seed.dot(v);
    if (yp.norm() < 1e-8)
      throw numeric_error("canonicalizing_transform: degenerate camera axes");
  }
  const Vec3 yh = yp.normalized();
  const Mat3 rc = Mat3::from_cols(yh.cross(v), yh, v);

  // T(p) = Rc^T (p - o) maps the ray origin to 0 and its direction to +z.
  const Mat3 rct = rc.transposed();
  return RigidTransform{rct, -(rct * ray.origin)};
}

CameraPose apply_rigid_to_pose(const RigidTransform& T, const CameraPose& pose) {
  // p_cam = R p + t with p = Q^T (p' - q)  =>  R' = R Q^T, t' = t - R' q.
  const Mat3 rqt = pose.R * T.R.transposed();
  return CameraPose{rqt, pose.t - rqt * T.t};
}

Ray apply_rigid_to_ray(const RigidTransform& T, const Ray& ray) {
  return Ray{T.R * ray.origin + T.t, T.R * ray.dir};
}

RigidTransform inverse(const RigidTransform& T) {
  const Mat3 rt = T.R.transposed();
  return RigidTransform{rt, -(rt * T.t)};
}

CameraPose apply_similarity_to_pose(const SimilarityTransform& sim,
                                    const CameraPose& pose) {
  // p' = s Q p + q  =>  R' = R Q^T, t' = s t - R' q; centers map as points,
  // pixels are unchanged, camera-frame depths scale by s.
  const Mat3 rqt = pose.R * sim.R.transposed();
  return CameraPose{rqt, pose.t * sim.s - rqt * sim.t};
}

std::vector<double> sample_depths(double near, double far, int M) {
  if (!(near > 0) || !(near < far))
    throw config_error("sample_depths: need 0 < near < far, got near=" +
                       std::to_string(near) + " far=" + std::to_string(far));
  if (M < 1) throw config_error("sample_depths: M must be >= 1");
  std::vector<double> d(static_cast<size_t>(M));
  if (M == 1) {
    d[0] = 0.5 * (near + far);
    return d;
  }
  const double step = (far - near) / static_cast<double>(M - 1);
  for (int m = 0; m < M; ++m) d[static_cast<size_t>(m)] = near + step * m;
  return d;
}

EpipolarSample epipolar_project(const Ray& target, double depth,
                                const CameraPose& ref, const CameraIntrinsics& intr,
                                double margin) {
  const Vec3 p = target.origin + target.dir * depth;
  const Vec3 q = ref.R * p + ref.t;
  EpipolarSample s;
  s.cam_depth = q.z;
  if (q.z <= 1e-6) return s;  // behind or grazing the camera
  s.px = intr.fx * q.x / q.z + intr.cx;
  s.py = intr.fy * q.y / q.z + intr.cy;
  s.valid = s.px >= -margin && s.px <= intr.width - 1 + margin && s.py >= -margin &&
            s.py <= intr.height - 1 + margin;
  return s;
}

std::vector<int> select_reference_views(const std::vector<CameraPose>& poses,
                                        const Vec3& target_center, int N, int K,
                                        SelectMode mode, RngStream* rng,
                                        const std::vector<int>& exclude) {
  std::vector<std::pair<double, int>> by_dist;
  by_dist.reserve(poses.size());
  for (int i = 0; i < static_cast<int>(poses.size()); ++i) {
    if (std::find(exclude.begin(), exclude.end(), i) != exclude.end()) continue;
    const Vec3 c = camera_center(poses[static_cast<size_t>(i)]);
    const double d = (c - target_center).norm();
    if (d < 1e-12) continue;  // the target view itself
    by_dist.emplace_back(d, i);
  }
  if (static_cast<int>(by_dist.size()) < K)
    throw config_error("select_reference_views: " + std::to_string(by_dist.size()) +
                       " candidate views for K=" + std::to_string(K));
  std::sort(by_dist.begin(), by_dist.end());

  const int pool = std::min<int>(N, static_cast<int>(by_dist.size()));
  std::vector<int> out;
  out.reserve(static_cast<size_t>(K));
  if (mode == SelectMode::kInfer) {
    for (int i = 0; i < K; ++i) out.push_back(by_dist[static_cast<size_t>(i)].second);
  } else {
    if (!rng)
      throw config_error("select_reference_views: train mode requires an rng");
    for (int pick : rng->sample_without_replacement(pool, K))
      out.push_back(by_dist[static_cast<size_t>(pick)].second);
  }
  return out;
}

}  // namespace gpnr
