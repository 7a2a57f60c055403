//! Procedural desk-scale scenes.
//!
//! A scene is a smooth low-amplitude background, one body silhouette and an
//! identity texture stamped into the silhouette's head region. Behaviour is
//! carried by the silhouette pose, which has at most four scalar parameters
//! per class; identity is an 8x8 random texture (64 free values) tiled over
//! the pixel grid and revealed only through the head region. Identity
//! therefore lives in a much higher-dimensional subspace than behaviour.
//!
//! Randomness is split by purpose: pose and background come from the instance
//! seed only, the texture from the identity seed only, so two identities
//! rendered with the same instance seed differ only inside the head region.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result, SpxError};
use crate::patterns::SensingOperator;
use crate::recognisability::{LabeledMeasurementSet, Split, Task};
use crate::rng::{derive_seed, streams, SpxRng};
use crate::sensing::{frame_noise_seed, FrameBatch, NoiseModel, Scene};

pub const TEXTURE_SIZE: usize = 8;
pub const MAX_POSE_PARAMS: usize = 4;
/// Fraction of the silhouette bounding box (from the top) treated as head.
pub const HEAD_FRACTION: f64 = 0.25;
const BODY_LEVEL: f64 = 0.6;
const TEXTURE_AMPLITUDE: f64 = 0.5;
const BACKGROUND_LEVEL: f64 = 0.15;
const BACKGROUND_SLOPE: f64 = 0.05;
const FRAME_PERIOD: f64 = 0.04;

/// Behaviour classes, drawn from the normal/abnormal activity taxonomy of
/// privacy-sensitive spaces (restrooms, changing rooms, showers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Behavior {
    /// Standing near the entrance / under the shower (normal, static).
    Standing,
    /// Collapse due to illness (abnormal): the body tips over to the floor.
    Collapse,
    /// Physical fighting (abnormal): arms swing above the shoulders.
    Fighting,
    /// Leaning over a basin or mirror, loitering (normal): slow sway.
    Leaning,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [
        Behavior::Standing,
        Behavior::Collapse,
        Behavior::Fighting,
        Behavior::Leaning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standing => "standing",
            Self::Collapse => "collapse",
            Self::Fighting => "fighting",
            Self::Leaning => "leaning",
        }
    }

    pub fn is_abnormal(self) -> bool {
        matches!(self, Self::Collapse | Self::Fighting)
    }

    /// Free pose parameters of the class.
    pub fn param_count(self) -> usize {
        match self {
            // centre, scale
            Self::Standing => 2,
            // centre, scale, fall direction
            Self::Collapse => 3,
            // centre, scale, swing phase
            Self::Fighting => 3,
            // centre, scale, signed lean, sway phase
            Self::Leaning => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub num_identities: usize,
    pub num_behaviors: usize,
    pub samples_per_class: usize,
    pub t_frames: usize,
    pub noise: NoiseModel,
    pub master_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_identities: 20,
            num_behaviors: 4,
            samples_per_class: 50,
            t_frames: 8,
            noise: NoiseModel::IidGaussian { sigma: DEFAULT_NOISE_SIGMA },
            master_seed: 0,
        }
    }
}

/// Default measurement noise (effective units) of the synthetic setup.
pub const DEFAULT_NOISE_SIGMA: f64 = 4.0;

impl SynthSpec {
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn behaviors(&self) -> &'static [Behavior] {
        &Behavior::ALL[..self.num_behaviors.min(Behavior::ALL.len())]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(invalid(format!(
                "synthetic scenes need at least 16x16 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_identities < 2 {
            return Err(invalid("need at least two identities"));
        }
        if !(2..=Behavior::ALL.len()).contains(&self.num_behaviors) {
            return Err(invalid(format!(
                "behaviour count must be in 2..={}",
                Behavior::ALL.len()
            )));
        }
        if self.samples_per_class == 0 || self.t_frames == 0 {
            return Err(invalid("sample and frame counts must be positive"));
        }
        self.noise.validate()
    }
}

/// Identity textures, one `8 x 8` patch per identity with entries in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityBank {
    pub textures: Vec<DMatrix<f64>>,
}

impl IdentityBank {
    pub fn new(num_identities: usize, master_seed: u64) -> Self {
        let root = derive_seed(master_seed, streams::IDENTITY);
        let textures = (0..num_identities)
            .map(|u| {
                let mut rng = SpxRng::new(derive_seed(root, u as u64));
                DMatrix::from_fn(TEXTURE_SIZE, TEXTURE_SIZE, |_, _| rng.uniform())
            })
            .collect();
        Self { textures }
    }
}

/// Pose of one frame: all geometry needed to rasterize the silhouette.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Column of the feet.
    pub center: f64,
    pub scale: f64,
    /// Rotation about the feet, radians, positive leans right.
    pub tilt: f64,
    /// 0 = arms hanging, 1 = arms straight up.
    pub arm_raise: f64,
}

/// Per-instance draw of a class's pose parameters plus its trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTrack {
    pub behavior: Behavior,
    pub params: [f64; MAX_POSE_PARAMS],
}

impl PoseTrack {
    pub fn draw(behavior: Behavior, width: usize, rng: &mut SpxRng) -> Self {
        let w = width as f64;
        let mid = w / 2.0;
        let scale = rng.uniform_range(0.85, 1.1) * w / 32.0;
        let params = match behavior {
            Behavior::Standing => [rng.uniform_range(mid - 4.0, mid + 4.0), scale, 0.0, 0.0],
            Behavior::Collapse => {
                let dir = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let center = mid - dir * rng.uniform_range(0.22 * w, 0.30 * w);
                [center, scale, dir, 0.0]
            }
            Behavior::Fighting => [
                rng.uniform_range(mid - 4.0, mid + 4.0),
                scale,
                rng.uniform_range(0.0, std::f64::consts::TAU),
                0.0,
            ],
            Behavior::Leaning => {
                let dir = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let lean = dir * rng.uniform_range(0.35, 0.55);
                [
                    rng.uniform_range(mid - 4.0, mid + 4.0) - dir * 3.0,
                    scale,
                    lean,
                    rng.uniform_range(0.0, std::f64::consts::TAU),
                ]
            }
        };
        Self { behavior, params }
    }

    /// Pose at frame `t` of a `t_frames` sequence.
    pub fn pose(&self, t: usize, t_frames: usize) -> Pose {
        let [center, scale, p2, p3] = self.params;
        let progress = if t_frames > 1 {
            t as f64 / (t_frames - 1) as f64
        } else {
            0.0
        };
        match self.behavior {
            Behavior::Standing => Pose {
                center,
                scale,
                tilt: 0.0,
                arm_raise: 0.0,
            },
            Behavior::Collapse => Pose {
                center,
                scale,
                tilt: p2 * (0.3 + 1.2 * progress),
                arm_raise: 0.15,
            },
            Behavior::Fighting => {
                let phase = p2 + std::f64::consts::FRAC_PI_2 * t as f64;
                Pose {
                    center,
                    scale,
                    tilt: 0.0,
                    arm_raise: 0.65 + 0.3 * phase.sin(),
                }
            }
            Behavior::Leaning => {
                let phase = p3 + std::f64::consts::FRAC_PI_4 * t as f64;
                Pose {
                    center,
                    scale,
                    tilt: p2 + 0.06 * phase.sin(),
                    arm_raise: 0.25,
                }
            }
        }
    }
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let (px, py) = (p.0 - self.a.0, p.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let s = if len2 > 0.0 {
            ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (ex, ey) = (px - s * dx, py - s * dy);
        ex * ex + ey * ey <= self.radius * self.radius
    }
}

/// Body parts in body coordinates: feet at the origin, `y` up, ~22 units tall.
fn body_parts(arm_raise: f64) -> Vec<Capsule> {
    let angle = arm_raise.clamp(0.0, 1.0) * std::f64::consts::PI;
    let arm = |side: f64| {
        let shoulder = (side * 2.4, 15.5);
        Capsule {
            a: shoulder,
            b: (shoulder.0 + side * 6.0 * angle.sin(), shoulder.1 - 6.0 * angle.cos()),
            radius: 1.1,
        }
    };
    vec![
        Capsule { a: (-1.4, 0.5), b: (-0.8, 9.0), radius: 1.3 },
        Capsule { a: (1.4, 0.5), b: (0.8, 9.0), radius: 1.3 },
        Capsule { a: (0.0, 9.0), b: (0.0, 15.5), radius: 2.6 },
        Capsule { a: (0.0, 19.2), b: (0.0, 19.2), radius: 2.9 },
        arm(-1.0),
        arm(1.0),
    ]
}

/// Binary silhouette mask (row-major, `h x w`).
pub fn silhouette(pose: &Pose, h: usize, w: usize) -> Vec<bool> {
    let parts = body_parts(pose.arm_raise);
    let floor = h as f64 - 2.0;
    let (sin, cos) = pose.tilt.sin_cos();
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            // world offset from the feet, y up
            let wx = c as f64 - pose.center;
            let wy = floor - r as f64;
            // undo the tilt (world = R(tilt) * body, with positive tilt leaning right)
            let bx = (wx * cos - wy * sin) / pose.scale;
            let by = (wx * sin + wy * cos) / pose.scale;
            if parts.iter().any(|p| p.contains((bx, by))) {
                mask[r * w + c] = true;
            }
        }
    }
    mask
}

/// Rows `[top, top + ceil(0.25 * bbox height))` of the mask's bounding box,
/// intersected with the mask.
pub fn head_region(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut top = h;
    let mut bottom = 0;
    for r in 0..h {
        if mask[r * w..(r + 1) * w].iter().any(|&m| m) {
            top = top.min(r);
            bottom = bottom.max(r);
        }
    }
    let mut head = vec![false; h * w];
    if top > bottom {
        return head;
    }
    let rows = ((bottom - top + 1) as f64 * HEAD_FRACTION).ceil() as usize;
    for r in top..(top + rows).min(h) {
        for c in 0..w {
            head[r * w + c] = mask[r * w + c];
        }
    }
    head
}

fn check_labels(spec: &SynthSpec, identity: usize, behavior: usize) -> Result<()> {
    if identity >= spec.num_identities {
        return Err(invalid(format!(
            "identity {identity} out of range 0..{}",
            spec.num_identities
        )));
    }
    if behavior >= spec.num_behaviors {
        return Err(invalid(format!(
            "behaviour {behavior} out of range 0..{}",
            spec.num_behaviors
        )));
    }
    Ok(())
}

struct Renderer<'a> {
    spec: &'a SynthSpec,
    texture: &'a DMatrix<f64>,
    background: Vec<f64>,
    track: PoseTrack,
}

impl<'a> Renderer<'a> {
    fn new(spec: &'a SynthSpec, bank: &'a IdentityBank, identity: usize, behavior: usize, instance_seed: u64) -> Self {
        let (h, w) = (spec.height, spec.width);
        let mut bg = SpxRng::substream(instance_seed, streams::BACKGROUND);
        let gr = bg.uniform_range(-BACKGROUND_SLOPE, BACKGROUND_SLOPE);
        let gc = bg.uniform_range(-BACKGROUND_SLOPE, BACKGROUND_SLOPE);
        let background = (0..h * w)
            .map(|p| {
                let (r, c) = ((p / w) as f64 / (h - 1) as f64, (p % w) as f64 / (w - 1) as f64);
                BACKGROUND_LEVEL + gr * (r - 0.5) + gc * (c - 0.5)
            })
            .collect();
        let mut pose_rng = SpxRng::substream(instance_seed, streams::POSE);
        let track = PoseTrack::draw(spec.behaviors()[behavior], w, &mut pose_rng);
        Self {
            spec,
            texture: &bank.textures[identity],
            background,
            track,
        }
    }

    fn frame(&self, t: usize) -> DVector<f64> {
        let (h, w) = (self.spec.height, self.spec.width);
        let pose = self.track.pose(t, self.spec.t_frames);
        let mask = silhouette(&pose, h, w);
        let head = head_region(&mask, h, w);
        DVector::from_fn(h * w, |p, _| {
            let v = if head[p] {
                let (r, c) = (p / w, p % w);
                let tex = self.texture[(r % TEXTURE_SIZE, c % TEXTURE_SIZE)];
                BODY_LEVEL + TEXTURE_AMPLITUDE * (tex - 0.5)
            } else if mask[p] {
                BODY_LEVEL
            } else {
                self.background[p]
            };
            v.clamp(0.0, 1.0)
        })
    }
}

/// Single frame (frame 0 of the instance's trajectory).
pub fn gen_scene(spec: &SynthSpec, identity: usize, behavior: usize, instance_seed: u64) -> Result<Scene> {
    spec.validate()?;
    check_labels(spec, identity, behavior)?;
    let bank = IdentityBank::new(spec.num_identities, spec.master_seed);
    Ok(scene_with_bank(spec, &bank, identity, behavior, instance_seed))
}

fn scene_with_bank(spec: &SynthSpec, bank: &IdentityBank, identity: usize, behavior: usize, instance_seed: u64) -> Scene {
    let values = Renderer::new(spec, bank, identity, behavior, instance_seed).frame(0);
    Scene {
        height: spec.height,
        width: spec.width,
        values,
    }
}

/// `t_frames` frames following the behaviour's trajectory; the texture is fixed.
pub fn gen_sequence(spec: &SynthSpec, identity: usize, behavior: usize, instance_seed: u64) -> Result<FrameBatch> {
    spec.validate()?;
    check_labels(spec, identity, behavior)?;
    let bank = IdentityBank::new(spec.num_identities, spec.master_seed);
    Ok(sequence_with_bank(spec, &bank, identity, behavior, instance_seed))
}

fn sequence_with_bank(spec: &SynthSpec, bank: &IdentityBank, identity: usize, behavior: usize, instance_seed: u64) -> FrameBatch {
    let renderer = Renderer::new(spec, bank, identity, behavior, instance_seed);
    let n = spec.n_pixels();
    let mut frames = DMatrix::zeros(n, spec.t_frames);
    for t in 0..spec.t_frames {
        frames.set_column(t, &renderer.frame(t));
    }
    FrameBatch {
        height: spec.height,
        width: spec.width,
        frames,
        frame_period: FRAME_PERIOD,
    }
}

/// One generated sample: its labels, seed and split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceRecord {
    pub instance: usize,
    pub identity: usize,
    pub behavior: usize,
    pub split: Split,
    pub seed: u64,
}

/// Per-class split sizes `(train, val, test)` in the ratio 8:1:1.
pub fn split_sizes(samples_per_class: usize) -> Result<(usize, usize, usize)> {
    if samples_per_class < 10 {
        return Err(SpxError::SplitTooSmall(format!(
            "{samples_per_class} samples per class cannot be split 8:1:1"
        )));
    }
    let train = samples_per_class * 8 / 10;
    let val = samples_per_class / 10;
    Ok((train, val, samples_per_class - train - val))
}

fn split_of(index: usize, sizes: (usize, usize, usize)) -> Split {
    if index < sizes.0 {
        Split::Train
    } else if index < sizes.0 + sizes.1 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Every instance of a task's dataset in generation order: class-major, then
/// instance index within the class.
pub fn instance_plan(spec: &SynthSpec, task: Task) -> Result<Vec<InstanceRecord>> {
    spec.validate()?;
    let sizes = split_sizes(spec.samples_per_class)?;
    let classes = match task {
        Task::Privacy => spec.num_identities,
        Task::Behavior => spec.num_behaviors,
    };
    let root = derive_seed(derive_seed(spec.master_seed, streams::INSTANCE), task as u64);
    let mut out = Vec::with_capacity(classes * spec.samples_per_class);
    for class in 0..classes {
        for k in 0..spec.samples_per_class {
            let instance = class * spec.samples_per_class + k;
            let seed = derive_seed(root, instance as u64);
            let mut nuisance = SpxRng::substream(seed, streams::LABEL);
            let (identity, behavior) = match task {
                Task::Privacy => (class, nuisance.below(spec.num_behaviors as u64) as usize),
                Task::Behavior => (nuisance.below(spec.num_identities as u64) as usize, class),
            };
            out.push(InstanceRecord {
                instance,
                identity,
                behavior,
                split: split_of(k, sizes),
                seed,
            });
        }
    }
    Ok(out)
}

/// Frames of every planned instance, stacked column-wise (`T` columns per
/// instance for the behaviour task, one for privacy).
pub fn render_plan(spec: &SynthSpec, task: Task, plan: &[InstanceRecord]) -> DMatrix<f64> {
    let bank = IdentityBank::new(spec.num_identities, spec.master_seed);
    let t = frames_per_instance(spec, task);
    let mut frames = DMatrix::zeros(spec.n_pixels(), plan.len() * t);
    for (k, rec) in plan.iter().enumerate() {
        match task {
            Task::Privacy => {
                let s = scene_with_bank(spec, &bank, rec.identity, rec.behavior, rec.seed);
                frames.set_column(k, &s.values);
            }
            Task::Behavior => {
                let seq = sequence_with_bank(spec, &bank, rec.identity, rec.behavior, rec.seed);
                frames.columns_mut(k * t, t).copy_from(&seq.frames);
            }
        }
    }
    frames
}

pub fn frames_per_instance(spec: &SynthSpec, task: Task) -> usize {
    match task {
        Task::Privacy => 1,
        Task::Behavior => spec.t_frames,
    }
}

/// Measures every instance with `op` and splits 8:1:1 per class.
///
/// Privacy samples are single frames with features `y`; behaviour samples are
/// `T`-frame sequences with [`temporal_features`](crate::recognisability::temporal_features).
/// Instance `i` is measured as `measure_batch(op, frames_i, noise, derive_seed(seed_i, NOISE))`.
pub fn build_dataset(
    spec: &SynthSpec,
    op: &SensingOperator,
    task: Task,
) -> Result<(LabeledMeasurementSet, LabeledMeasurementSet, LabeledMeasurementSet)> {
    if op.height() != spec.height || op.width() != spec.width {
        return Err(invalid(format!(
            "operator grid {}x{} vs scene grid {}x{}",
            op.height(),
            op.width(),
            spec.height,
            spec.width
        )));
    }
    let plan = instance_plan(spec, task)?;
    let frames = render_plan(spec, task, &plan);
    let t = frames_per_instance(spec, task);
    let mut y = op.apply_columns(&frames);
    if !matches!(spec.noise, NoiseModel::None) {
        for (k, rec) in plan.iter().enumerate() {
            let noise_seed = instance_noise_seed(rec.seed);
            for f in 0..t {
                let mut rng = SpxRng::new(frame_noise_seed(noise_seed, f));
                let e = spec.noise.sample(op.m(), &mut rng)?;
                let mut col = y.column_mut(k * t + f);
                col += e;
            }
        }
    }
    let m = op.m();
    let dim = match task {
        Task::Privacy => m,
        Task::Behavior => 2 * m,
    };
    let features = DMatrix::from_fn(plan.len(), dim, |_, _| 0.0);
    let mut features = features;
    for k in 0..plan.len() {
        let f = crate::recognisability::temporal_features_of(&y.columns(k * t, t).into_owned())?;
        let row = match task {
            Task::Privacy => f.rows(0, m).into_owned(),
            Task::Behavior => f,
        };
        features.set_row(k, &row.transpose());
    }
    let k = match task {
        Task::Privacy => spec.num_identities,
        Task::Behavior => spec.num_behaviors,
    };
    let pick = |split: Split| {
        let idx: Vec<usize> = (0..plan.len()).filter(|&i| plan[i].split == split).collect();
        LabeledMeasurementSet {
            features: features.select_rows(&idx),
            labels: idx
                .iter()
                .map(|&i| match task {
                    Task::Privacy => plan[i].identity,
                    Task::Behavior => plan[i].behavior,
                })
                .collect(),
            instance_seeds: idx.iter().map(|&i| plan[i].seed).collect(),
            k,
            task,
            rho: op.rho(),
            m,
            split,
        }
    };
    Ok((pick(Split::Train), pick(Split::Val), pick(Split::Test)))
}

pub fn instance_noise_seed(instance_seed: u64) -> u64 {
    derive_seed(instance_seed, streams::NOISE)
}
