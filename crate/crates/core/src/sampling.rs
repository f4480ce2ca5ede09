//! Query sampling points, camera projection and bilinear feature lookup.
//!
//! Frames: the ego frame is x forward, y left, z up. Camera frames follow the
//! pinhole convention x right, y down, z along the optical axis. Queries live
//! in the reference frame, the ego frame of the last clip step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::kernels::{Tensor, Var};
use crate::queries::QueryBox;
use crate::simworld::FeatureMapSet;

pub const MIN_DEPTH: f64 = 0.1;

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        Self {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&self.rotation[i]);
            m[i][3] = self.translation[i];
        }
        m[3][3] = 1.0;
        m
    }

    /// Whether the rotation block is orthonormal with determinant +1.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        let r = &self.rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (0..3).all(|i| (0..3).all(|j| (rrt[i][j] - f64::from(u8::from(i == j))).abs() <= tol))
            && (det - 1.0).abs() <= tol
    }

    pub(crate) fn to_vec(self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rotation.iter().flatten().copied().collect();
        v.extend_from_slice(&self.translation);
        v
    }

    pub(crate) fn from_slice(v: &[f64]) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            rotation[i].copy_from_slice(&v[3 * i..3 * i + 3]);
        }
        Self {
            rotation,
            translation: [v[9], v[10], v[11]],
        }
    }
}

/// Pinhole camera with extrinsics mapping ego coordinates to camera ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// camera ← ego.
    pub extrinsic: Pose,
}

/// Projection of one point into one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, extrinsic: Pose) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "camera needs positive focal lengths and size, got fx={fx} fy={fy} {width}x{height}"
            )));
        }
        if !extrinsic.is_rigid(1e-9) {
            return Err(Error::contract("camera extrinsic is not a rigid transform"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        })
    }

    /// Camera looking horizontally along ego yaw `yaw`, mounted at `position`.
    pub fn looking_at_yaw(yaw: f64, position: [f64; 3], hfov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // Rows: camera right, down, forward expressed in ego axes.
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let t = mat_vec(&rotation, position);
        let extrinsic = Pose {
            rotation,
            translation: [-t[0], -t[1], -t[2]],
        };
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, extrinsic)
    }

    pub fn intrinsics(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn extrinsics(&self) -> [[f64; 4]; 4] {
        self.extrinsic.to_matrix()
    }

    /// Projects a point given in this camera's frame.
    pub fn project_camera(&self, q: [f64; 3]) -> Projection {
        let depth = q[2];
        if depth <= MIN_DEPTH {
            return Projection {
                pixel: [f64::NAN; 2],
                depth,
                valid: false,
            };
        }
        let px = self.fx * q[0] / depth + self.cx;
        let py = self.fy * q[1] / depth + self.cy;
        let valid = px >= 0.0 && px < self.width as f64 && py >= 0.0 && py < self.height as f64;
        Projection {
            pixel: [px, py],
            depth,
            valid,
        }
    }

    pub(crate) fn to_vec(self) -> Vec<f64> {
        let mut v = vec![self.fx, self.fy, self.cx, self.cy, self.width as f64, self.height as f64];
        v.extend(self.extrinsic.to_vec());
        v
    }

    pub(crate) fn from_slice(v: &[f64]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize, Pose::from_slice(&v[6..18]))
    }

    pub(crate) const PACKED: usize = 18;
}

/// Evenly spaced ring of cameras around the ego vehicle.
pub fn ring_rig(cfg: &WorldConfig) -> Vec<CameraModel> {
    (0..cfg.cameras)
        .map(|i| {
            let yaw = 2.0 * std::f64::consts::PI * i as f64 / cfg.cameras as f64;
            CameraModel::looking_at_yaw(
                yaw,
                [0.0, 0.0, cfg.camera_height],
                cfg.hfov_deg,
                cfg.image_width,
                cfg.image_height,
            )
            .expect("ring geometry is valid by construction")
        })
        .collect()
}

/// Projects world points through the ego pose (`world ← ego`) at one step.
pub fn project(points: &[[f64; 3]], camera: &CameraModel, ego_pose: &Pose) -> Vec<Projection> {
    let cam_from_world = camera.extrinsic.compose(&ego_pose.inverse());
    points
        .iter()
        .map(|&p| camera.project_camera(cam_from_world.apply(p)))
        .collect()
}

/// Sampling geometry for a query set over a clip.
#[derive(Clone, Debug)]
pub struct SamplePoints {
    /// `[n × P × 3]` raw offsets.
    pub offsets: Tensor,
    /// World points indexed `[t][query · P + point]`.
    pub world_points: Vec<Vec<[f64; 3]>>,
}

/// Reference-frame point for one offset: scaled by `(l, w, h)`, rotated by
/// the yaw and placed at the box center.
fn local_point(b: &QueryBox, o: &[f64]) -> [f64; 3] {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy, dz) = (o[0] * b.l, o[1] * b.w, o[2] * b.h);
    let ctr = b.center();
    [ctr[0] + c * dx - s * dy, ctr[1] + s * dx + c * dy, ctr[2] + dz]
}

/// `d point / d offset`, a 3×3 matrix `R(θ)·diag(l, w, h)`.
fn local_jacobian(b: &QueryBox) -> Mat3 {
    let (s, c) = b.theta.sin_cos();
    [[c * b.l, -s * b.w, 0.0], [s * b.l, c * b.w, 0.0], [0.0, 0.0, b.h]]
}

fn check_offsets(boxes: &[QueryBox], offsets: &Tensor) -> Result<usize> {
    let n = boxes.len();
    if n == 0 || offsets.len() % (3 * n) != 0 || offsets.shape()[0] != n {
        return Err(Error::shape("sampling offsets", offsets.shape(), &[n, 3]));
    }
    Ok(offsets.len() / (3 * n))
}

/// Places the sampling points of every query at every step. The point of
/// step `t` is moved back along the query velocity by `(T-1-t)·dt` and then
/// mapped to world coordinates with the reference pose.
pub fn gen_sampling_points(boxes: &[QueryBox], offsets: &Tensor, poses: &[Pose], dt: f64) -> Result<SamplePoints> {
    let p = check_offsets(boxes, offsets)?;
    let frames = poses.len();
    let reference = poses.last().ok_or_else(|| Error::contract("no ego poses"))?;
    let o = offsets.data();
    let mut world_points = Vec::with_capacity(frames);
    for t in 0..frames {
        let lag = (frames - 1 - t) as f64 * dt;
        let mut pts = Vec::with_capacity(boxes.len() * p);
        for (q, b) in boxes.iter().enumerate() {
            for k in 0..p {
                let base = (q * p + k) * 3;
                let l = local_point(b, &o[base..base + 3]);
                pts.push(reference.apply([l[0] - b.vx * lag, l[1] - b.vy * lag, l[2]]));
            }
        }
        world_points.push(pts);
    }
    Ok(SamplePoints {
        offsets: offsets.reshape(&[boxes.len(), p, 3])?,
        world_points,
    })
}

/// Bilinear lookup into a `[C × H × W]` map at map coordinates `(u, v)`,
/// with zero padding. Adds `weight · value` into `out`.
fn bilinear_into(map: &[f64], h: usize, w: usize, u: f64, v: f64, weight: f64, out: &mut [f64]) {
    let i0 = u.floor();
    let j0 = v.floor();
    let (a, b) = (u - i0, v - j0);
    let corners = [
        (i0, j0, (1.0 - a) * (1.0 - b)),
        (i0 + 1.0, j0, a * (1.0 - b)),
        (i0, j0 + 1.0, (1.0 - a) * b),
        (i0 + 1.0, j0 + 1.0, a * b),
    ];
    let plane = h * w;
    for (ci, cj, cw) in corners {
        if ci < 0.0 || cj < 0.0 || ci >= w as f64 || cj >= h as f64 || cw == 0.0 {
            continue;
        }
        let idx = cj as usize * w + ci as usize;
        for (c, o) in out.iter_mut().enumerate() {
            *o += weight * cw * map[c * plane + idx];
        }
    }
}

/// `Σ_c g_c · d value_c / d(u, v)` for the bilinear lookup above.
fn bilinear_grad_uv(map: &[f64], h: usize, w: usize, u: f64, v: f64, g: &[f64]) -> [f64; 2] {
    let i0 = u.floor();
    let j0 = v.floor();
    let (a, b) = (u - i0, v - j0);
    let plane = h * w;
    let at = |c: usize, i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i >= w as f64 || j >= h as f64 {
            0.0
        } else {
            map[c * plane + j as usize * w + i as usize]
        }
    };
    let mut du = 0.0;
    let mut dv = 0.0;
    for (c, gc) in g.iter().enumerate() {
        if *gc == 0.0 {
            continue;
        }
        let m00 = at(c, i0, j0);
        let m10 = at(c, i0 + 1.0, j0);
        let m01 = at(c, i0, j0 + 1.0);
        let m11 = at(c, i0 + 1.0, j0 + 1.0);
        du += gc * ((1.0 - b) * (m10 - m00) + b * (m11 - m01));
        dv += gc * ((1.0 - a) * (m01 - m00) + a * (m11 - m10));
    }
    [du, dv]
}

impl<'t> Var<'t> {
    /// Bilinear sampling of a `[C × H × W]` map at `coords` `[M × 2]` given in
    /// map cells `(u, v)`. Rows flagged invalid return zeros. Differentiable
    /// with respect to both the map and the coordinates.
    pub fn bilinear_sample(&self, coords: &Var<'t>, valid: &[bool]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 || coords.shape().len() != 2 || coords.shape()[1] != 2 || coords.shape()[0] != valid.len() {
            return Err(Error::shape("bilinear_sample", s, coords.shape()));
        }
        let (ch, h, w) = (s[0], s[1], s[2]);
        let m = valid.len();
        let map = self.value_rc();
        let uv = coords.value_rc();
        let mut out = vec![0.0; m * ch];
        for r in 0..m {
            if valid[r] {
                let (u, v) = (uv.data()[2 * r], uv.data()[2 * r + 1]);
                bilinear_into(map.data(), h, w, u, v, 1.0, &mut out[r * ch..(r + 1) * ch]);
            }
        }
        let valid = valid.to_vec();
        let map_shape = s.to_vec();
        Ok(self.tape().record(Tensor::from_parts(vec![m, ch], out), &[self, coords], move |g, needs| {
            let dmap = needs[0].then(|| {
                let mut d = Tensor::zeros(&map_shape);
                let plane = h * w;
                for r in (0..m).filter(|&r| valid[r]) {
                    let (u, v) = (uv.data()[2 * r], uv.data()[2 * r + 1]);
                    let (i0, j0) = (u.floor(), v.floor());
                    let (a, b) = (u - i0, v - j0);
                    for (ci, cj, cw) in [
                        (i0, j0, (1.0 - a) * (1.0 - b)),
                        (i0 + 1.0, j0, a * (1.0 - b)),
                        (i0, j0 + 1.0, (1.0 - a) * b),
                        (i0 + 1.0, j0 + 1.0, a * b),
                    ] {
                        if ci < 0.0 || cj < 0.0 || ci >= w as f64 || cj >= h as f64 {
                            continue;
                        }
                        let idx = cj as usize * w + ci as usize;
                        for c in 0..ch {
                            d.data_mut()[c * plane + idx] += cw * g.data()[r * ch + c];
                        }
                    }
                }
                d
            });
            let dcoords = needs[1].then(|| {
                let mut d = vec![0.0; 2 * m];
                for r in (0..m).filter(|&r| valid[r]) {
                    let (u, v) = (uv.data()[2 * r], uv.data()[2 * r + 1]);
                    let duv = bilinear_grad_uv(map.data(), h, w, u, v, g.row(r));
                    d[2 * r] = duv[0];
                    d[2 * r + 1] = duv[1];
                }
                Tensor::from_parts(vec![m, 2], d)
            });
            vec![dmap, dcoords]
        }))
    }
}

/// Per-token record of one valid camera hit, kept for the backward pass.
#[derive(Clone, Copy)]
struct Hit {
    cam: usize,
    u: f64,
    v: f64,
    /// `d(u, v) / d offset`, row-major 2×3.
    jac: [f64; 6],
}

/// Samples features for every query point at every step: one `[n·P × C]`
/// var per step, averaging over the cameras in which the point is valid.
/// Differentiable with respect to `offsets` (`[n × 3P]`); maps and boxes are
/// constants.
pub fn sample_all<'t>(
    boxes: &[QueryBox],
    offsets: &Var<'t>,
    rig: &[CameraModel],
    poses: &[Pose],
    maps: &FeatureMapSet,
    dt: f64,
) -> Result<Vec<Var<'t>>> {
    let p = check_offsets(boxes, offsets.value())?;
    let frames = poses.len();
    if frames != maps.frames() || rig.len() != maps.cameras() {
        return Err(Error::contract(format!(
            "sample_all: {frames} poses and {} cameras against maps for {} steps and {} cameras",
            rig.len(),
            maps.frames(),
            maps.cameras()
        )));
    }
    let reference = *poses.last().unwrap();
    let (ch, h, w) = (maps.channels(), maps.height(), maps.width());
    let stride = maps.stride as f64;
    let tokens = boxes.len() * p;
    let o = offsets.value().data();
    let local_jac: Vec<Mat3> = boxes.iter().map(local_jacobian).collect();
    let local: Vec<[f64; 3]> = (0..tokens)
        .map(|tok| local_point(&boxes[tok / p], &o[tok * 3..tok * 3 + 3]))
        .collect();

    let mut out_vars = Vec::with_capacity(frames);
    for (t, pose) in poses.iter().enumerate() {
        let lag = (frames - 1 - t) as f64 * dt;
        let cams: Vec<Pose> = rig
            .iter()
            .map(|c| c.extrinsic.compose(&pose.inverse()).compose(&reference))
            .collect();
        let mut out = vec![0.0; tokens * ch];
        let mut hits: Vec<Vec<Hit>> = Vec::with_capacity(tokens);
        for tok in 0..tokens {
            let b = &boxes[tok / p];
            let l = local[tok];
            let pt = [l[0] - b.vx * lag, l[1] - b.vy * lag, l[2]];
            let mut tok_hits = Vec::new();
            for (ci, (cam, model)) in cams.iter().zip(rig).enumerate() {
                let q = cam.apply(pt);
                let pr = model.project_camera(q);
                if !pr.valid {
                    continue;
                }
                let z = q[2];
                let dq_dp = &cam.rotation;
                let du_dq = [model.fx / (stride * z), 0.0, -model.fx * q[0] / (stride * z * z)];
                let dv_dq = [0.0, model.fy / (stride * z), -model.fy * q[1] / (stride * z * z)];
                let lj = &local_jac[tok / p];
                let mut jac = [0.0; 6];
                for k in 0..3 {
                    // d q / d offset_k = R_cam · lj[:, k]
                    let col = [lj[0][k], lj[1][k], lj[2][k]];
                    let dq = mat_vec(dq_dp, col);
                    jac[k] = du_dq[0] * dq[0] + du_dq[1] * dq[1] + du_dq[2] * dq[2];
                    jac[3 + k] = dv_dq[0] * dq[0] + dv_dq[1] * dq[1] + dv_dq[2] * dq[2];
                }
                tok_hits.push(Hit {
                    cam: ci,
                    u: pr.pixel[0] / stride,
                    v: pr.pixel[1] / stride,
                    jac,
                });
            }
            if !tok_hits.is_empty() {
                let wgt = 1.0 / tok_hits.len() as f64;
                let dst = &mut out[tok * ch..(tok + 1) * ch];
                for hit in &tok_hits {
                    bilinear_into(maps.map(t, hit.cam), h, w, hit.u, hit.v, wgt, dst);
                }
            }
            hits.push(tok_hits);
        }
        let store = Arc::clone(&maps.maps);
        let (cams_n, off_shape) = (maps.cameras(), offsets.shape().to_vec());
        let var = offsets.tape().record(
            Tensor::from_parts(vec![tokens, ch], out),
            &[offsets],
            move |g, _| {
                let plane = ch * h * w;
                let mut d = vec![0.0; tokens * 3];
                for (tok, tok_hits) in hits.iter().enumerate() {
                    if tok_hits.is_empty() {
                        continue;
                    }
                    let wgt = 1.0 / tok_hits.len() as f64;
                    for hit in tok_hits {
                        let base = (t * cams_n + hit.cam) * plane;
                        let map = &store.data()[base..base + plane];
                        let duv = bilinear_grad_uv(map, h, w, hit.u, hit.v, g.row(tok));
                        for k in 0..3 {
                            d[tok * 3 + k] += wgt * (duv[0] * hit.jac[k] + duv[1] * hit.jac[3 + k]);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(off_shape.clone(), d))]
            },
        );
        out_vars.push(var);
    }
    Ok(out_vars)
}
