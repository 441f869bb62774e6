//! Procedural moving-shape clips with a referring program per clip.
//!
//! Every scene is a pure function of `(seed, difficulty, geometry)`. Objects
//! never overlap on any frame and stay fully on the canvas, so the ground
//! truth of the referred object is simply its own silhouette.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::{Frame, CLS_TOKEN};
use crate::matching::{GroundTruthFrame, GroundTruthSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    Static,
    Linear(Direction),
    /// Counter-clockwise circle of the given radius around the start pose.
    Orbit { radius: f64 },
    Shrink,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta];
const DIRECTIONS: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

/// Pixels per frame travelled by linear movers.
const SPEED: f64 = 2.0;
/// Relative size lost per frame by shrinking objects.
const SHRINK_RATE: f64 = 0.07;
const BACKGROUND: [f64; 3] = [0.05, 0.05, 0.08];

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.12, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Magenta => [0.85, 0.2, 0.85],
        }
    }
}

/// Word ids of the program alphabet. Id 0 is the sentence token.
pub mod vocab {
    pub const RED: usize = 1;
    pub const GREEN: usize = 2;
    pub const BLUE: usize = 3;
    pub const YELLOW: usize = 4;
    pub const MAGENTA: usize = 5;
    pub const CIRCLE: usize = 6;
    pub const SQUARE: usize = 7;
    pub const TRIANGLE: usize = 8;
    pub const STATIC: usize = 9;
    pub const MOVING_LEFT: usize = 10;
    pub const MOVING_RIGHT: usize = 11;
    pub const MOVING_UP: usize = 12;
    pub const MOVING_DOWN: usize = 13;
    pub const ORBITING: usize = 14;
    pub const SHRINKING: usize = 15;

    pub const WORDS: [&str; 16] = [
        "<s>",
        "red",
        "green",
        "blue",
        "yellow",
        "magenta",
        "circle",
        "square",
        "triangle",
        "static",
        "moving-left",
        "moving-right",
        "moving-up",
        "moving-down",
        "orbiting",
        "shrinking",
    ];

    pub const SIZE: usize = WORDS.len();
}

pub fn color_token(c: Color) -> usize {
    vocab::RED + COLORS.iter().position(|&x| x == c).expect("listed color")
}

pub fn shape_token(s: Shape) -> usize {
    vocab::CIRCLE + SHAPES.iter().position(|&x| x == s).expect("listed shape")
}

pub fn motion_token(t: Trajectory) -> usize {
    match t {
        Trajectory::Static => vocab::STATIC,
        Trajectory::Linear(Direction::Left) => vocab::MOVING_LEFT,
        Trajectory::Linear(Direction::Right) => vocab::MOVING_RIGHT,
        Trajectory::Linear(Direction::Up) => vocab::MOVING_UP,
        Trajectory::Linear(Direction::Down) => vocab::MOVING_DOWN,
        Trajectory::Orbit { .. } => vocab::ORBITING,
        Trajectory::Shrink => vocab::SHRINKING,
    }
}

/// Human-readable program, e.g. `"red square moving-left"`.
pub fn describe(program: &[usize]) -> String {
    program
        .iter()
        .map(|&t| vocab::WORDS.get(t).copied().unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Half extent in pixels at frame 0.
    pub size: f64,
    pub trajectory: Trajectory,
    /// Centre `(x, y)` in pixels at frame 0.
    pub start: (f64, f64),
}

impl SceneObject {
    /// Centre and half extent at frame `t`.
    pub fn pose(&self, t: usize) -> (f64, f64, f64) {
        let (x0, y0) = self.start;
        let tf = t as f64;
        match self.trajectory {
            Trajectory::Static => (x0, y0, self.size),
            Trajectory::Linear(dir) => {
                let (dx, dy) = match dir {
                    Direction::Left => (-SPEED, 0.0),
                    Direction::Right => (SPEED, 0.0),
                    Direction::Up => (0.0, -SPEED),
                    Direction::Down => (0.0, SPEED),
                };
                (x0 + dx * tf, y0 + dy * tf, self.size)
            }
            Trajectory::Orbit { radius } => {
                let a = tf * std::f64::consts::FRAC_PI_3;
                (x0 + radius * (a.cos() - 1.0), y0 - radius * a.sin(), self.size)
            }
            Trajectory::Shrink => (x0, y0, self.size * (1.0 - SHRINK_RATE * tf)),
        }
    }

    fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy, r) = self.pose(t);
        let (dx, dy) = (px - cx, py - cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at the top, base at the bottom of the bounding square.
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Binary silhouette at frame `t` on an `h x w` canvas, sampled at pixel centres.
    pub fn silhouette(&self, t: usize, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = self.covers(t, x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        out
    }

    fn matches(&self, program: &[usize]) -> bool {
        program.iter().all(|&tok| {
            tok == color_token(self.color) || tok == shape_token(self.shape) || tok == motion_token(self.trajectory)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub difficulty: u8,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: Vec<SceneObject>,
    pub program: Vec<usize>,
    /// Indices into `objects` of the referred objects.
    pub targets: Vec<usize>,
}

/// Difficulty levels understood by [`generate_scene`].
pub const DIFFICULTY_SINGLE: u8 = 0;
pub const DIFFICULTY_DISTINCT: u8 = 1;
pub const DIFFICULTY_SHARED_ATTRIBUTE: u8 = 2;
pub const DIFFICULTY_MOTION_ONLY: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Standard,
    Motion,
    Attribute,
}

impl Suite {
    pub fn difficulty(self) -> u8 {
        match self {
            Suite::Standard => DIFFICULTY_DISTINCT,
            Suite::Motion => DIFFICULTY_MOTION_ONLY,
            Suite::Attribute => DIFFICULTY_SHARED_ATTRIBUTE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Standard => "standard",
            Suite::Motion => "motion",
            Suite::Attribute => "attribute",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Suite::Standard),
            "motion" => Ok(Suite::Motion),
            "attribute" => Ok(Suite::Attribute),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

impl SyntheticScene {
    pub fn render(&self, t: usize) -> Frame {
        let (h, w) = (self.height, self.width);
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let rgb = self
                    .objects
                    .iter()
                    .rev()
                    .find(|o| o.covers(t, px, py))
                    .map_or(BACKGROUND, |o| o.color.rgb());
                pixels.extend_from_slice(&rgb);
            }
        }
        Frame::new(h, w, pixels)
    }

    pub fn render_all(&self) -> Vec<Frame> {
        (0..self.frames).map(|t| self.render(t)).collect()
    }

    /// Union of the target silhouettes at frame `t`, full resolution.
    pub fn target_mask(&self, t: usize) -> Vec<bool> {
        let mut out = vec![false; self.height * self.width];
        for &i in &self.targets {
            for (o, s) in out.iter_mut().zip(self.objects[i].silhouette(t, self.height, self.width)) {
                *o |= s;
            }
        }
        out
    }

    /// Target mask pooled by `factor` (a cell is on when at least half of it is).
    pub fn target_mask_at(&self, t: usize, factor: usize) -> Vec<bool> {
        downsample(&self.target_mask(t), self.height, self.width, factor)
    }

    /// Per-frame ground truth at `1/factor` resolution; boxes come from the
    /// full-resolution silhouette and are normalized to `[0, 1]`.
    pub fn ground_truth(&self, factor: usize) -> GroundTruthSequence {
        let (h, w) = (self.height, self.width);
        let frames = (0..self.frames)
            .map(|t| {
                let full = self.target_mask(t);
                let mask = downsample(&full, h, w, factor)
                    .into_iter()
                    .map(|b| if b { 1.0 } else { 0.0 })
                    .collect();
                GroundTruthFrame {
                    present: full.iter().any(|&b| b),
                    bbox: mask_box(&full, h, w),
                    mask,
                }
            })
            .collect();
        GroundTruthSequence {
            frames,
            height: h / factor,
            width: w / factor,
        }
    }

    /// The self-checks every generated scene passes.
    pub fn validate(&self, factor: usize) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let matching: Vec<usize> = (0..self.objects.len())
            .filter(|&i| self.objects[i].matches(&self.program))
            .collect();
        if matching != self.targets || self.targets.is_empty() {
            return Err(Error::Contract(format!(
                "program {:?} matches objects {matching:?}, targets are {:?}",
                describe(&self.program),
                self.targets
            )));
        }
        for t in 0..self.frames {
            let masks: Vec<Vec<bool>> = self.objects.iter().map(|o| o.silhouette(t, h, w)).collect();
            for (i, o) in self.objects.iter().enumerate() {
                let (cx, cy, r) = o.pose(t);
                if cx - r < 0.0 || cy - r < 0.0 || cx + r > w as f64 || cy + r > h as f64 {
                    return Err(Error::Contract(format!("object {i} leaves the canvas at frame {t}")));
                }
                if !downsample(&masks[i], h, w, factor).iter().any(|&b| b) {
                    return Err(Error::Contract(format!("object {i} vanishes at frame {t}")));
                }
            }
            for a in 0..masks.len() {
                for b in a + 1..masks.len() {
                    if masks[a].iter().zip(&masks[b]).any(|(&x, &y)| x && y) {
                        return Err(Error::Contract(format!("objects {a} and {b} overlap at frame {t}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Majority pooling of a row-major mask over `factor x factor` cells.
pub fn downsample(mask: &[bool], h: usize, w: usize, factor: usize) -> Vec<bool> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut on = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    on += mask[(y * factor + dy) * w + x * factor + dx] as usize;
                }
            }
            out[y * ow + x] = 2 * on >= factor * factor;
        }
    }
    out
}

/// Normalized `(cx, cy, w, h)` of the tight pixel box around a mask.
pub fn mask_box(mask: &[bool], h: usize, w: usize) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 >= x1 {
        return [0.5, 0.5, 0.0, 0.0];
    }
    [
        (x0 + x1) as f64 / 2.0 / w as f64,
        (y0 + y1) as f64 / 2.0 / h as f64,
        (x1 - x0) as f64 / w as f64,
        (y1 - y0) as f64 / h as f64,
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct SceneGeometry {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Ratio between the canvas and the mask-prediction grid.
    pub mask_factor: usize,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        SceneGeometry {
            height: 64,
            width: 64,
            frames: 6,
            mask_factor: 4,
        }
    }
}

impl SceneGeometry {
    /// Object scale relative to the 64-pixel reference canvas.
    fn scale(&self) -> f64 {
        self.height.min(self.width) as f64 / 64.0
    }
}

const ATTEMPTS: usize = 400;

/// Deterministic scene for `(seed, difficulty)`:
///
/// - 0: one static object, the program names its color;
/// - 1: 2 to 5 objects of distinct colors;
/// - 2: a distractor shares the target's color or shape;
/// - 3: two identical objects that only their motion tells apart.
///
/// From difficulty 1 on, programs are `color shape motion`.
pub fn generate_scene(seed: u64, difficulty: u8, geom: SceneGeometry) -> Result<SyntheticScene> {
    if difficulty > DIFFICULTY_MOTION_ONLY {
        return Err(Error::Config(format!("difficulty {difficulty} is not one of 0..=3")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(difficulty) << 56));
    for _ in 0..ATTEMPTS {
        let Some(scene) = attempt(&mut rng, seed, difficulty, geom) else {
            continue;
        };
        if scene.validate(geom.mask_factor).is_ok() {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "no valid scene for seed {seed} at difficulty {difficulty} on a {}x{} canvas",
        geom.height, geom.width
    )))
}

fn random_trajectory(rng: &mut ChaCha8Rng, geom: SceneGeometry) -> Trajectory {
    match rng.gen_range(0..4) {
        0 => Trajectory::Static,
        1 => Trajectory::Linear(*DIRECTIONS.choose(rng).expect("non-empty")),
        2 => Trajectory::Orbit {
            radius: rng.gen_range(4.0..6.0) * geom.scale(),
        },
        _ => Trajectory::Shrink,
    }
}

fn place(shape: Shape, color: Color, trajectory: Trajectory, geom: SceneGeometry, rng: &mut ChaCha8Rng) -> SceneObject {
    let size = rng.gen_range(6.0..9.0f64) * geom.scale();
    let margin = size + 1.0;
    SceneObject {
        shape,
        color,
        size,
        trajectory,
        start: (
            rng.gen_range(margin..geom.width as f64 - margin),
            rng.gen_range(margin..geom.height as f64 - margin),
        ),
    }
}

fn disjoint(objects: &[SceneObject], geom: SceneGeometry) -> bool {
    let gap = 2.0;
    (0..geom.frames).all(|t| {
        let poses: Vec<_> = objects.iter().map(|o| o.pose(t)).collect();
        poses.iter().enumerate().all(|(i, a)| {
            poses[i + 1..]
                .iter()
                .all(|b| (a.0 - b.0).abs() > a.2 + b.2 + gap || (a.1 - b.1).abs() > a.2 + b.2 + gap)
        })
    })
}

fn attempt(rng: &mut ChaCha8Rng, seed: u64, difficulty: u8, geom: SceneGeometry) -> Option<SyntheticScene> {
    let mut objects = Vec::new();
    let program;
    match difficulty {
        DIFFICULTY_SINGLE => {
            let color = *COLORS.choose(rng)?;
            objects.push(place(*SHAPES.choose(rng)?, color, Trajectory::Static, geom, rng));
            program = vec![color_token(color)];
        }
        DIFFICULTY_DISTINCT => {
            let n = rng.gen_range(2..=5);
            let colors: Vec<Color> = COLORS.choose_multiple(rng, n).copied().collect();
            for &color in &colors {
                let o = place(*SHAPES.choose(rng)?, color, random_trajectory(rng, geom), geom, rng);
                objects.push(o);
            }
            let t = &objects[0];
            program = vec![color_token(t.color), shape_token(t.shape), motion_token(t.trajectory)];
        }
        DIFFICULTY_SHARED_ATTRIBUTE => {
            let n = rng.gen_range(2..=4);
            let color = *COLORS.choose(rng)?;
            let shape = *SHAPES.choose(rng)?;
            objects.push(place(shape, color, random_trajectory(rng, geom), geom, rng));
            let others: Vec<Shape> = SHAPES.iter().copied().filter(|&s| s != shape).collect();
            let other_colors: Vec<Color> = COLORS.iter().copied().filter(|&c| c != color).collect();
            // The first distractor always shares an attribute with the target.
            let d = if rng.gen_bool(0.5) {
                place(*others.choose(rng)?, color, random_trajectory(rng, geom), geom, rng)
            } else {
                place(shape, *other_colors.choose(rng)?, random_trajectory(rng, geom), geom, rng)
            };
            objects.push(d);
            for _ in 2..n {
                let o = place(*SHAPES.choose(rng)?, *COLORS.choose(rng)?, random_trajectory(rng, geom), geom, rng);
                objects.push(o);
            }
            let t = &objects[0];
            program = vec![color_token(t.color), shape_token(t.shape), motion_token(t.trajectory)];
        }
        _ => {
            let color = *COLORS.choose(rng)?;
            let shape = *SHAPES.choose(rng)?;
            let dir = *DIRECTIONS.choose(rng)?;
            let mut target = place(shape, color, Trajectory::Linear(dir), geom, rng);
            let mut twin = place(shape, color, Trajectory::Static, geom, rng);
            let size = rng.gen_range(6.0..9.0) * geom.scale();
            target.size = size;
            twin.size = size;
            let other_dir: Vec<Direction> = DIRECTIONS.iter().copied().filter(|&d| d != dir).collect();
            if rng.gen_bool(0.5) {
                twin.trajectory = Trajectory::Linear(*other_dir.choose(rng)?);
            }
            objects.push(target);
            objects.push(twin);
            program = vec![color_token(color), shape_token(shape), motion_token(Trajectory::Linear(dir))];
        }
    }
    if !disjoint(&objects, geom) {
        return None;
    }
    // Shuffle so the target index carries no information.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(rng);
    let objects: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
    let targets = (0..objects.len()).filter(|&i| objects[i].matches(&program)).collect();
    debug_assert!(!program.contains(&CLS_TOKEN));
    Some(SyntheticScene {
        seed,
        difficulty,
        height: geom.height,
        width: geom.width,
        frames: geom.frames,
        objects,
        program,
        targets,
    })
}
