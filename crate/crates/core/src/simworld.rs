//! Synthetic multi-camera world standing in for images and a backbone.
//!
//! Each object leaves a Gaussian blob on every camera map it projects into.
//! The blob carries a fixed class signature over the leading channels; the
//! last [`CODE_CHANNELS`] channels hold the blob-weighted mean of the
//! objects' per-frame geometry codes wherever a blob is present, so box
//! parameters are readable from a well-placed sample and velocity only from
//! its change over time.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::kernels::archive::{self, TensorEntry};
use crate::kernels::Tensor;
use crate::par;
use crate::queries::{wrap_angle, QueryBox};
use crate::sampling::{ring_rig, CameraModel, Pose};

pub const NUM_CLASSES: usize = 4;
pub const CODE_CHANNELS: usize = 7;
/// Mean `(w, l, h)` per class: car, pedestrian, cyclist, truck.
pub const CLASS_SIZES: [[f64; 3]; NUM_CLASSES] = [
    [1.9, 4.5, 1.6],
    [0.7, 0.7, 1.8],
    [0.8, 1.8, 1.5],
    [2.6, 8.0, 3.2],
];
/// Positions sit on a 1/64 m grid and velocities on a 1/8 m/s grid, so
/// `v·dt` steps are exact in binary floating point for dyadic `dt`.
const POS_GRID: f64 = 64.0;
const VEL_GRID: f64 = 8.0;
const SIGNATURE_SEED: u64 = 0x5EED_C1A5;
/// Blob weight below which code channels are left empty.
const CODE_THRESHOLD: f64 = 0.05;

/// Independent sub-seed for item `index` of a run seeded with `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One ground-truth object: its class and its box at every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub track: Vec<QueryBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub frame_dt: f64,
    pub objects: Vec<SceneObject>,
    /// `world ← ego` per frame; the last one is the identity, so world
    /// coordinates are reference-frame coordinates.
    pub ego_poses: Vec<Pose>,
    pub rig: Vec<CameraModel>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.ego_poses.len()
    }

    /// Boxes and classes at the last frame, the detection targets.
    pub fn ground_truth(&self) -> Vec<(usize, QueryBox)> {
        self.objects
            .iter()
            .map(|o| (o.class, *o.track.last().unwrap()))
            .collect()
    }
}

fn quantize(v: f64, grid: f64) -> f64 {
    (v * grid).round() / grid
}

/// Draws a scene with the configured object count range.
pub fn generate_scene(cfg: &WorldConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let n = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    gen_scene(cfg, seed, n)
}

/// Scene with exactly `n_objects` objects moving at constant velocity.
pub fn gen_scene(cfg: &WorldConfig, seed: u64, n_objects: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = cfg.frames;
    let dt = cfg.frame_dt;
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = rng.gen_range(0..NUM_CLASSES);
        let mean = CLASS_SIZES[class];
        let mut size = [0.0; 3];
        for (s, m) in size.iter_mut().zip(mean) {
            let d = Normal::new(m, 0.1 * m).unwrap();
            *s = d.sample(&mut rng).max(0.2);
        }
        let r = rng.gen_range(cfg.range_min..=cfg.range_max);
        let bearing = rng.gen_range(-PI..PI);
        let x = quantize(r * bearing.cos(), POS_GRID);
        let y = quantize(r * bearing.sin(), POS_GRID);
        let vx = quantize(rng.gen_range(-cfg.max_speed..=cfg.max_speed), VEL_GRID);
        let vy = quantize(rng.gen_range(-cfg.max_speed..=cfg.max_speed), VEL_GRID);
        let theta = wrap_angle(rng.gen_range(-PI..PI));
        let mut track = vec![
            QueryBox {
                x,
                y,
                z: 0.0,
                w: size[0],
                l: size[1],
                h: size[2],
                theta,
                vx,
                vy,
            };
            frames
        ];
        for t in (0..frames - 1).rev() {
            track[t].x = track[t + 1].x - vx * dt;
            track[t].y = track[t + 1].y - vy * dt;
        }
        objects.push(SceneObject { class, track });
    }
    let ego_poses = (0..frames)
        .map(|t| {
            let back = if cfg.moving_ego {
                -cfg.ego_speed * (frames - 1 - t) as f64 * dt
            } else {
                0.0
            };
            Pose::from_yaw(0.0, [back, 0.0, 0.0])
        })
        .collect();
    Scene {
        seed,
        frame_dt: dt,
        objects,
        ego_poses,
        rig: ring_rig(cfg),
    }
}

/// Fixed unit vectors over the signature channels, one per class.
pub fn class_signatures(channels: usize) -> Vec<Vec<f64>> {
    let sig = channels - CODE_CHANNELS;
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..NUM_CLASSES)
        .map(|_| {
            let v: Vec<f64> = (0..sig).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Geometry code written into the code channels.
pub fn geometry_code(b: &QueryBox) -> [f64; CODE_CHANNELS] {
    [
        b.x / 20.0,
        b.y / 20.0,
        b.w / 4.0,
        b.l / 8.0,
        b.h / 4.0,
        b.theta.cos(),
        b.theta.sin(),
    ]
}

/// Camera feature maps of a whole clip, `[T × cameras × C × H' × W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    pub maps: Arc<Tensor>,
    pub stride: usize,
    pub noise_std: f64,
}

impl FeatureMapSet {
    pub fn frames(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn cameras(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[4]
    }

    /// The `[C × H' × W']` map of camera `cam` at step `t`.
    pub fn map(&self, t: usize, cam: usize) -> &[f64] {
        let plane = self.channels() * self.height() * self.width();
        let base = (t * self.cameras() + cam) * plane;
        &self.maps.data()[base..base + plane]
    }
}

/// Renders one camera map at step `t`. Noise uses its own stream keyed by
/// `(scene seed, t, camera)`.
pub fn render_features(scene: &Scene, t: usize, cam: usize, cfg: &WorldConfig) -> Tensor {
    let (ch, h, w) = (cfg.channels, cfg.map_height(), cfg.map_width());
    let plane = h * w;
    let sig_ch = ch - CODE_CHANNELS;
    let signatures = class_signatures(ch);
    let mut data = vec![0.0; ch * plane];
    let mut weight = vec![0.0; plane];
    let mut codes = vec![0.0; CODE_CHANNELS * plane];

    let camera = &scene.rig[cam];
    let cam_from_world = camera.extrinsic.compose(&scene.ego_poses[t].inverse());
    let sigma = cfg.blob_sigma;
    let reach = (4.0 * sigma).ceil() as i64;
    for obj in &scene.objects {
        let b = &obj.track[t];
        let pr = camera.project_camera(cam_from_world.apply(b.center()));
        if pr.depth <= crate::sampling::MIN_DEPTH {
            continue;
        }
        let (u, v) = (pr.pixel[0] / cfg.stride as f64, pr.pixel[1] / cfg.stride as f64);
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let code = geometry_code(b);
        let (ui, vi) = (u.round() as i64, v.round() as i64);
        for j in (vi - reach).max(0)..=(vi + reach).min(h as i64 - 1) {
            for i in (ui - reach).max(0)..=(ui + reach).min(w as i64 - 1) {
                let d2 = (i as f64 - u).powi(2) + (j as f64 - v).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                let idx = j as usize * w + i as usize;
                for (c, s) in signatures[obj.class].iter().enumerate() {
                    data[c * plane + idx] += g * s;
                }
                weight[idx] += g;
                for (k, cv) in code.iter().enumerate() {
                    codes[k * plane + idx] += g * cv;
                }
            }
        }
    }
    for idx in 0..plane {
        if weight[idx] >= CODE_THRESHOLD {
            for k in 0..CODE_CHANNELS {
                data[(sig_ch + k) * plane + idx] = codes[k * plane + idx] / weight[idx];
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, (t * 1000 + cam) as u64));
        let normal = Normal::new(0.0, cfg.noise_std).unwrap();
        for x in &mut data {
            *x += normal.sample(&mut rng);
        }
    }
    Tensor::new(&[ch, h, w], data).expect("map extents are positive")
}

/// Renders every camera at every step.
pub fn render_scene(scene: &Scene, cfg: &WorldConfig) -> FeatureMapSet {
    let (frames, cams) = (scene.frames(), scene.rig.len());
    let (ch, h, w) = (cfg.channels, cfg.map_height(), cfg.map_width());
    let mut data = Vec::with_capacity(frames * cams * ch * h * w);
    for t in 0..frames {
        for cam in 0..cams {
            data.extend(render_features(scene, t, cam, cfg).into_data());
        }
    }
    FeatureMapSet {
        maps: Arc::new(Tensor::new(&[frames, cams, ch, h, w], data).unwrap()),
        stride: cfg.stride,
        noise_std: cfg.noise_std,
    }
}

/// A scene together with its rendered maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub scene: Scene,
    pub maps: FeatureMapSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub world: WorldConfig,
    pub scenes: Vec<SceneData>,
}

/// Generates `count` scenes, each from its own derived seed. Scenes are
/// rendered in parallel; output order and content do not depend on threads.
pub fn generate_dataset(cfg: &WorldConfig, seed: u64, count: usize) -> Dataset {
    let scenes = par::map_range(count, |i| {
        let scene = generate_scene(cfg, derive_seed(seed, i as u64));
        let maps = render_scene(&scene, cfg);
        SceneData { scene, maps }
    });
    Dataset {
        seed,
        world: cfg.clone(),
        scenes,
    }
}

const DATASET_FORMAT: &str = "statequery-dataset-v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    world: WorldConfig,
    scenes: Vec<SceneEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneEntry {
    file: String,
    seed: u64,
    objects: usize,
    tensors: Vec<TensorEntry>,
}

fn scene_tensors(data: &SceneData) -> Vec<(&'static str, Tensor)> {
    let s = &data.scene;
    let frames = s.frames();
    let mut out = Vec::new();
    if !s.objects.is_empty() {
        let width = 1 + frames * QueryBox::PARAMS;
        let mut v = Vec::with_capacity(s.objects.len() * width);
        for o in &s.objects {
            v.push(o.class as f64);
            for b in &o.track {
                v.extend_from_slice(&b.to_array());
            }
        }
        out.push(("objects", Tensor::new(&[s.objects.len(), width], v).unwrap()));
    }
    let ego: Vec<f64> = s.ego_poses.iter().flat_map(|p| p.to_vec()).collect();
    out.push(("ego", Tensor::new(&[frames, 12], ego).unwrap()));
    let rig: Vec<f64> = s.rig.iter().flat_map(|c| c.to_vec()).collect();
    out.push(("rig", Tensor::new(&[s.rig.len(), CameraModel::PACKED], rig).unwrap()));
    out.push(("maps", (*data.maps.maps).clone()));
    out
}

fn scene_from_tensors(entry: &SceneEntry, world: &WorldConfig, tensors: Vec<(String, Tensor)>) -> Result<SceneData> {
    let field = |f: &str| format!("{}.{f}", entry.file);
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let need = |name: &str| find(name).ok_or_else(|| Error::format(field(name), "missing tensor"));
    let ego = need("ego")?;
    if ego.last_dim() != 12 {
        return Err(Error::format(field("ego"), format!("expected [T × 12], got {:?}", ego.shape())));
    }
    let frames = ego.rows();
    let ego_poses: Vec<Pose> = (0..frames).map(|t| Pose::from_slice(ego.row(t))).collect();
    let rig_t = need("rig")?;
    if rig_t.last_dim() != CameraModel::PACKED {
        return Err(Error::format(field("rig"), format!("expected [cams × 18], got {:?}", rig_t.shape())));
    }
    let rig = (0..rig_t.rows())
        .map(|c| CameraModel::from_slice(rig_t.row(c)).map_err(|e| Error::format(field("rig"), e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut objects = Vec::new();
    if let Some(obj) = find("objects") {
        if obj.last_dim() != 1 + frames * QueryBox::PARAMS {
            return Err(Error::format(field("objects"), format!("width {} for {frames} frames", obj.last_dim())));
        }
        for r in 0..obj.rows() {
            let row = obj.row(r);
            let track = row[1..]
                .chunks_exact(QueryBox::PARAMS)
                .map(|c| QueryBox::from_array(c.try_into().unwrap()))
                .collect();
            objects.push(SceneObject {
                class: row[0] as usize,
                track,
            });
        }
    }
    if objects.len() != entry.objects {
        return Err(Error::format(field("objects"), format!("{} stored, manifest says {}", objects.len(), entry.objects)));
    }
    let maps = need("maps")?;
    if maps.rank() != 5 || maps.shape()[0] != frames || maps.shape()[1] != rig.len() {
        return Err(Error::format(field("maps"), format!("shape {:?} disagrees with {frames} frames", maps.shape())));
    }
    Ok(SceneData {
        scene: Scene {
            seed: entry.seed,
            frame_dt: world.frame_dt,
            objects,
            ego_poses,
            rig,
        },
        maps: FeatureMapSet {
            maps: Arc::new(maps.clone()),
            stride: world.stride,
            noise_std: world.noise_std,
        },
    })
}

pub fn scene_file(index: usize) -> String {
    format!("scene_{index:04}.bin")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Writes `manifest.json` plus one blob per scene into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.scenes.len());
        for (i, data) in self.scenes.iter().enumerate() {
            let tensors = scene_tensors(data);
            let (table, blob) = archive::pack(tensors.iter().map(|(n, t)| (*n, t)));
            let file = scene_file(i);
            archive::write_bytes(&dir.join(&file), &blob)?;
            entries.push(SceneEntry {
                file,
                seed: data.scene.seed,
                objects: data.scene.objects.len(),
                tensors: table,
            });
        }
        archive::write_json(
            &dir.join(MANIFEST),
            &Manifest {
                format: DATASET_FORMAT.to_string(),
                seed: self.seed,
                world: self.world.clone(),
                scenes: entries,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = archive::read_json(&dir.join(MANIFEST))?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::format("format", format!("unknown dataset format {:?}", manifest.format)));
        }
        let scenes = manifest
            .scenes
            .iter()
            .map(|entry| {
                let path: PathBuf = dir.join(&entry.file);
                let blob = archive::read_bytes(&path)?;
                let tensors = archive::unpack(&entry.tensors, &blob)
                    .map_err(|e| Error::format(entry.file.clone(), e.to_string()))?;
                scene_from_tensors(entry, &manifest.world, tensors)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: manifest.seed,
            world: manifest.world,
            scenes,
        })
    }
}
