//! Synthetic LiDAR-like scene generation with parameterized domain shift.
//!
//! Objects are hollow boxes: surface points are sampled on the five
//! visible faces with a density that falls off as one over squared
//! distance from the sensor at the origin. Domain shift knobs cover size
//! distributions, point density, background clutter, and a rain-proxy
//! noise model (dropout plus spurious points). Everything is a pure
//! function of `(spec, seed, scene index)`.

mod io;

pub use io::{load_dir, save_dir, LabelMode};

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, DatasetError};
use crate::geometry::{iou_bev, Box3D};
use crate::parallel::parallel_map;
use crate::rng::{stream, RngSampling};
use rand::Rng;

/// Size prior for one object class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub mean_lwh: [f64; 3],
    pub std_lwh: [f64; 3],
}

/// Generative parameters for one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub classes: Vec<ClassSpec>,
    /// Inclusive range of object counts per scene.
    pub objects_per_scene: [usize; 2],
    /// Expected shell points for an object one meter from the sensor;
    /// an object at distance `d` receives about `density_base / d^2`.
    pub density_base: f64,
    /// Background points per square meter of covered area.
    pub clutter_rate: f64,
    /// Probability that any real point is dropped (rain proxy).
    pub dropout_prob: f64,
    /// Expected spurious points per scene (rain proxy).
    pub spurious_rate: f64,
    /// Half-extent in meters of the square region around the sensor.
    pub sensor_range: f64,
    /// Mixed into every stream key so source and target domains with the
    /// same seed stay decorrelated.
    pub seed_namespace: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.classes.is_empty() {
            return Err(ConfigError::Invalid("domain needs at least one class".into()));
        }
        for c in &self.classes {
            for a in 0..3 {
                if c.mean_lwh[a] <= 3.0 * c.std_lwh[a] || c.std_lwh[a] < 0.0 {
                    return Err(ConfigError::Invalid(format!(
                        "class {}: size mean must exceed 3x std on every axis",
                        c.name
                    )));
                }
            }
        }
        if self.objects_per_scene[0] > self.objects_per_scene[1] {
            return Err(ConfigError::Invalid("objects_per_scene range inverted".into()));
        }
        for (name, v) in [
            ("density_base", self.density_base),
            ("clutter_rate", self.clutter_rate),
            ("spurious_rate", self.spurious_rate),
            ("sensor_range", self.sensor_range),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(ConfigError::Invalid(format!("{name} must be nonnegative")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(ConfigError::Invalid("dropout_prob must be in [0, 1)".into()));
        }
        if self.sensor_range <= 0.0 {
            return Err(ConfigError::Invalid("sensor_range must be positive".into()));
        }
        Ok(())
    }
}

/// One generated point cloud with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<Box3D>,
    /// Labels discarded because no surface point survived sampling.
    pub dropped_labels: usize,
    /// Objects abandoned after repeated non-overlap placement failures.
    pub skipped_objects: usize,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_BOX_PAIR_IOU: f64 = 0.01;

/// Generate the scene at `index`. Bit-reproducible for a fixed
/// `(spec, seed, index)` key.
pub fn sample_scene(spec: &DomainSpec, seed: u64, index: u64) -> Scene {
    let ns = spec.seed_namespace;
    let mut layout = stream(&[ns, seed, index, 0]);
    let mut surface = stream(&[ns, seed, index, 1]);
    let mut noise = stream(&[ns, seed, index, 2]);

    // Place non-overlapping boxes.
    let n_objects = layout.gen_range(spec.objects_per_scene[0]..=spec.objects_per_scene[1]);
    let mut labels: Vec<Box3D> = Vec::with_capacity(n_objects);
    let mut skipped_objects = 0usize;
    for _ in 0..n_objects {
        let class_id = layout.gen_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let mut dims = [0.0f64; 3];
        for a in 0..3 {
            let mut v = layout.normal(class.mean_lwh[a], class.std_lwh[a]);
            let mut tries = 0;
            while v <= 0.05 && tries < 100 {
                v = layout.normal(class.mean_lwh[a], class.std_lwh[a]);
                tries += 1;
            }
            dims[a] = v.max(0.05);
        }
        let margin = (0.5 * dims[0].max(dims[1])).min(0.4 * spec.sensor_range);
        let lim = spec.sensor_range - margin;
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cx = layout.uniform(-lim, lim);
            let cy = layout.uniform(-lim, lim);
            let yaw = layout.uniform(-std::f64::consts::PI, std::f64::consts::PI);
            let candidate = Box3D::new(cx, cy, 0.5 * dims[2], dims[0], dims[1], dims[2], yaw, class_id)
                .expect("sampled dims are positive");
            if labels.iter().all(|b| iou_bev(b, &candidate) <= MAX_BOX_PAIR_IOU) {
                labels.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            skipped_objects += 1;
        }
    }

    // Shell points per object, thinned by dropout.
    let mut points: Vec<[f64; 3]> = Vec::new();
    let mut per_object = vec![0usize; labels.len()];
    for (i, b) in labels.iter().enumerate() {
        let d = (b.cx * b.cx + b.cy * b.cy).sqrt().max(1.0);
        let lambda = spec.density_base / (d * d);
        let count = surface.poisson(lambda);
        for _ in 0..count {
            let p = sample_shell_point(b, &mut surface);
            if spec.dropout_prob > 0.0 && noise.gen::<f64>() < spec.dropout_prob {
                continue;
            }
            points.push(p);
            per_object[i] += 1;
        }
    }

    // Background clutter over the covered square, same dropout.
    let area = (2.0 * spec.sensor_range) * (2.0 * spec.sensor_range);
    let clutter = surface.poisson(spec.clutter_rate * area);
    for _ in 0..clutter {
        let p = [
            surface.uniform(-spec.sensor_range, spec.sensor_range),
            surface.uniform(-spec.sensor_range, spec.sensor_range),
            surface.uniform(0.0, 2.5),
        ];
        if spec.dropout_prob > 0.0 && noise.gen::<f64>() < spec.dropout_prob {
            continue;
        }
        points.push(p);
    }

    // Spurious rain-proxy returns.
    let spurious = noise.poisson(spec.spurious_rate);
    for _ in 0..spurious {
        points.push([
            noise.uniform(-spec.sensor_range, spec.sensor_range),
            noise.uniform(-spec.sensor_range, spec.sensor_range),
            noise.uniform(0.0, 4.0),
        ]);
    }

    // Labels whose points all vanished are dropped and counted.
    let mut kept_labels = Vec::with_capacity(labels.len());
    let mut dropped_labels = 0usize;
    for (b, &n) in labels.iter().zip(&per_object) {
        if n > 0 {
            kept_labels.push(b.clone());
        } else {
            dropped_labels += 1;
        }
    }

    Scene {
        points,
        labels: kept_labels,
        dropped_labels,
        skipped_objects,
    }
}

/// Uniform point on one of the five visible faces (everything but the
/// bottom), chosen proportionally to face area.
fn sample_shell_point(b: &Box3D, rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    let (l, w, h) = (b.l, b.w, b.h);
    let areas = [
        l * w, // top
        w * h, // +length side
        w * h, // -length side
        l * h, // +width side
        l * h, // -width side
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.uniform(0.0, total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
        face = i;
    }
    let u = rng.uniform(-0.5, 0.5);
    let v = rng.uniform(-0.5, 0.5);
    let local = match face {
        0 => [u * l, v * w, 0.5 * h],
        1 => [0.5 * l, u * w, v * h],
        2 => [-0.5 * l, u * w, v * h],
        3 => [u * l, 0.5 * w, v * h],
        _ => [u * l, -0.5 * w, v * h],
    };
    b.to_world(local)
}

/// Train/val tag per scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// A generated or loaded dataset. Ground-truth labels sit behind an
/// access guard: handles opened for training withhold them entirely, and
/// any read through [`Dataset::labels`] fails rather than returning
/// something empty.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub seed: u64,
    points: Vec<Vec<[f64; 3]>>,
    labels: Option<Vec<Vec<Box3D>>>,
    pub split: Vec<Split>,
    pub dropped_labels: usize,
    pub skipped_objects: usize,
}

impl Dataset {
    /// Generate `count` scenes, fanning out across workers.
    pub fn generate(spec: &DomainSpec, seed: u64, count: usize) -> Dataset {
        let scenes = parallel_map(count, |i| sample_scene(spec, seed, i as u64));
        let mut points = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut dropped = 0;
        let mut skipped = 0;
        for s in scenes {
            dropped += s.dropped_labels;
            skipped += s.skipped_objects;
            points.push(s.points);
            labels.push(s.labels);
        }
        Dataset {
            spec: spec.clone(),
            seed,
            points,
            labels: Some(labels),
            split: vec![Split::Train; count],
            dropped_labels: dropped,
            skipped_objects: skipped,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self, i: usize) -> &[[f64; 3]] {
        &self.points[i]
    }

    /// Ground truth for scene `i`; fails on withheld handles.
    pub fn labels(&self, i: usize) -> Result<&[Box3D], DatasetError> {
        if i >= self.points.len() {
            return Err(DatasetError::SceneOutOfRange(i));
        }
        match &self.labels {
            Some(l) => Ok(&l[i]),
            None => Err(DatasetError::LabelsWithheld),
        }
    }

    pub fn labels_available(&self) -> bool {
        self.labels.is_some()
    }

    /// A clone of this handle with every label physically removed; the
    /// training path receives target data through this view only.
    pub fn withheld_view(&self) -> Dataset {
        let mut c = self.clone();
        c.labels = None;
        c
    }

    pub(crate) fn from_parts(
        spec: DomainSpec,
        seed: u64,
        points: Vec<Vec<[f64; 3]>>,
        labels: Option<Vec<Vec<Box3D>>>,
        split: Vec<Split>,
    ) -> Dataset {
        Dataset {
            spec,
            seed,
            points,
            labels,
            split,
            dropped_labels: 0,
            skipped_objects: 0,
        }
    }
}

/// Generate a labeled source set and a target set. The target's ground
/// truth stays inside the returned handle for later evaluation; training
/// code must go through [`Dataset::withheld_view`].
pub fn make_domain_pair(
    source_spec: &DomainSpec,
    target_spec: &DomainSpec,
    n_source: usize,
    n_target: usize,
    seed: u64,
) -> (Dataset, Dataset) {
    let mut src = source_spec.clone();
    let mut tgt = target_spec.clone();
    // Distinct namespaces even when both specs are identical, so the
    // control experiment sees different scene instances from one law.
    src.seed_namespace = src.seed_namespace.wrapping_mul(2).wrapping_add(1);
    tgt.seed_namespace = tgt.seed_namespace.wrapping_mul(2).wrapping_add(2);
    let source = Dataset::generate(&src, seed, n_source);
    let target = Dataset::generate(&tgt, seed, n_target);
    (source, target)
}

/// A source/target domain pair plus the scene counts to generate; the
/// on-disk format behind `gen --spec`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub n_source: usize,
    pub n_target: usize,
}

impl PairSpec {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let spec: PairSpec = serde_json::from_str(&body).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            source: e,
        })?;
        spec.source.validate()?;
        spec.target.validate()?;
        Ok(spec)
    }
}

/// Three-class desk-scale default: car-like, pedestrian-like,
/// cyclist-like.
pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            mean_lwh: [4.0, 1.8, 1.6],
            std_lwh: [0.25, 0.1, 0.08],
        },
        ClassSpec {
            name: "pedestrian".into(),
            mean_lwh: [0.9, 0.8, 1.7],
            std_lwh: [0.05, 0.05, 0.1],
        },
        ClassSpec {
            name: "cyclist".into(),
            mean_lwh: [1.8, 0.7, 1.5],
            std_lwh: [0.1, 0.05, 0.08],
        },
    ]
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            objects_per_scene: [2, 5],
            density_base: 12000.0,
            clutter_rate: 0.15,
            dropout_prob: 0.0,
            spurious_rate: 0.0,
            sensor_range: 16.0,
            seed_namespace: 0,
        }
    }
}
