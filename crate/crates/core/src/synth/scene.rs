use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Episode, OodAxis, WorldConfig};
use crate::numerics::{Rng, Tensor};

// Independent random streams per aspect of a scene, so appearance shifts
// never perturb the nominal layout, dynamics or actions.
const STREAM_LAYOUT: u64 = 1;
const STREAM_ACTIONS: u64 = 2;
const STREAM_PHYSICS: u64 = 3;
const STREAM_SHIFT: u64 = 4;

const MAX_CHANNEL: f32 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disc,
}

impl Shape {
    pub fn id(self) -> u8 {
        match self {
            Shape::Square => 0,
            Shape::Disc => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectKind {
    /// Pushable; may secretly be deformable.
    Block,
    /// Static; reveals its hidden interior once touched.
    Cabinet,
    /// Static distractor, no interaction.
    Clutter,
}

/// Per-object physical parameters that never appear in a frame directly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenParams {
    pub mass: f32,
    pub friction: f32,
    pub deformable: bool,
    /// Fraction of extent lost along the push axis on first contact.
    pub squash: f32,
    pub interior: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ObjectKind,
    pub shape: Shape,
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub color: [f32; 3],
    pub hidden: HiddenParams,
}

impl SceneObject {
    pub fn pushable(&self) -> bool {
        self.kind == ObjectKind::Block
    }
}

/// Fully specified initial state and action trajectory of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub ood_axis: OodAxis,
    pub background: [f32; 3],
    /// Second stripe colour for the background shift.
    pub stripes: Option<[f32; 3]>,
    pub tint: [f32; 3],
    pub agent_x: f32,
    pub agent_y: f32,
    pub agent_color: [f32; 3],
    pub agent_shape: Shape,
    /// Rendered side length of the agent relative to its collision box.
    pub agent_extent: f32,
    pub agent_palette: u8,
    pub objects: Vec<SceneObject>,
    pub actions: Vec<[f32; 2]>,
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x: f32,
    y: f32,
    w: f32,
    h: f32,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    fn inflate(&self, m: f32) -> Rect {
        Rect { x: self.x - m, y: self.y - m, w: self.w + 2.0 * m, h: self.h + 2.0 * m }
    }

    /// Area of this rectangle inside the unit pixel at `(px, py)`.
    fn coverage(&self, px: usize, py: usize) -> f32 {
        let ox = (self.x + self.w).min(px as f32 + 1.0) - self.x.max(px as f32);
        let oy = (self.y + self.h).min(py as f32 + 1.0) - self.y.max(py as f32);
        ox.max(0.0) * oy.max(0.0)
    }
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

fn random_color(rng: &mut Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.range(lo, hi), rng.range(lo, hi), rng.range(lo, hi)]
}

fn vivid_color(rng: &mut Rng) -> [f32; 3] {
    let mut c = random_color(rng, 0.05, 0.35);
    c[rng.below(3)] = rng.range(0.6, MAX_CHANNEL);
    c
}

impl Scene {
    pub fn sample(cfg: &WorldConfig, seed: u64) -> Scene {
        let base = Rng::new(seed);
        let mut layout = base.derive(STREAM_LAYOUT);
        let mut physics = base.derive(STREAM_PHYSICS);
        let (wf, hf) = (cfg.width as f32, cfg.height as f32);
        let s = cfg.agent_size;

        let g = layout.range(0.2, 0.45);
        let background = [
            g + layout.range(-0.05, 0.05),
            g + layout.range(-0.05, 0.05),
            g + layout.range(-0.05, 0.05),
        ];
        let agent = Rect { x: layout.range(0.0, wf - s), y: layout.range(0.0, hf - s), w: s, h: s };

        let mut occupied = vec![agent.inflate(1.0)];
        let place = |rng: &mut Rng, w: f32, h: f32, occupied: &mut Vec<Rect>| -> Option<Rect> {
            if w >= wf || h >= hf {
                return None;
            }
            for _ in 0..100 {
                let r = Rect { x: rng.range(0.0, wf - w), y: rng.range(0.0, hf - h), w, h };
                if occupied.iter().all(|o| !o.overlaps(&r)) {
                    occupied.push(r.inflate(1.0));
                    return Some(r);
                }
            }
            None
        };

        let mut objects = Vec::new();
        let n_blocks = cfg.min_objects + layout.below(cfg.max_objects - cfg.min_objects + 1);
        for _ in 0..n_blocks {
            let size = layout.range(4.0, 7.0);
            let mut color = vivid_color(&mut layout);
            while color_distance(color, background) < 0.4 {
                color = vivid_color(&mut layout);
            }
            let hidden = HiddenParams {
                mass: physics.range(0.5, 2.5),
                friction: physics.range(0.2, 0.8),
                deformable: physics.bernoulli(0.4),
                squash: physics.range(0.3, 0.55),
                interior: [0.0; 3],
            };
            if let Some(r) = place(&mut layout, size, size, &mut occupied) {
                objects.push(SceneObject {
                    kind: ObjectKind::Block,
                    shape: Shape::Square,
                    x: r.x,
                    y: r.y,
                    w: r.w,
                    h: r.h,
                    color,
                    hidden,
                });
            }
        }
        if layout.uniform() < cfg.cabinet_prob {
            let door = [layout.range(0.45, 0.6), layout.range(0.28, 0.38), layout.range(0.1, 0.2)];
            let hidden = HiddenParams {
                mass: f32::INFINITY,
                friction: 1.0,
                deformable: false,
                squash: 0.0,
                interior: vivid_color(&mut physics),
            };
            if let Some(r) = place(&mut layout, 8.0, 8.0, &mut occupied) {
                objects.push(SceneObject {
                    kind: ObjectKind::Cabinet,
                    shape: Shape::Square,
                    x: r.x,
                    y: r.y,
                    w: r.w,
                    h: r.h,
                    color: door,
                    hidden,
                });
            }
        }

        let actions = sample_actions(cfg, &base.derive(STREAM_ACTIONS), &agent, &objects);

        let mut scene = Scene {
            seed,
            ood_axis: cfg.ood_axis,
            background,
            stripes: None,
            tint: [0.0; 3],
            agent_x: agent.x,
            agent_y: agent.y,
            agent_color: [0.85, 0.8, 0.3],
            agent_shape: Shape::Square,
            agent_extent: 1.0,
            agent_palette: 0,
            objects,
            actions,
        };
        scene.apply_shift(cfg, &mut base.derive(STREAM_SHIFT));
        scene
    }

    pub(crate) fn apply_shift(&mut self, cfg: &WorldConfig, rng: &mut Rng) {
        match self.ood_axis {
            OodAxis::None => {}
            OodAxis::Background => {
                self.background = [rng.range(0.05, 0.2), rng.range(0.2, 0.4), rng.range(0.55, 0.8)];
                self.stripes = Some([rng.range(0.5, 0.7), rng.range(0.05, 0.2), rng.range(0.3, 0.5)]);
            }
            OodAxis::Lighting => self.tint = cfg.lighting_tint,
            OodAxis::Clutter => {
                let n = 9 + rng.below(4);
                let agent = Rect { x: self.agent_x, y: self.agent_y, w: cfg.agent_size, h: cfg.agent_size };
                let mut added = 0;
                let mut tries = 0;
                while added < n && tries < 500 {
                    tries += 1;
                    let size = rng.range(2.5, 4.5);
                    let r = Rect {
                        x: rng.range(0.0, cfg.width as f32 - size),
                        y: rng.range(0.0, cfg.height as f32 - size),
                        w: size,
                        h: size,
                    };
                    if r.overlaps(&agent.inflate(1.0)) {
                        continue;
                    }
                    let color = random_color(rng, 0.1, MAX_CHANNEL);
                    self.objects.insert(
                        0,
                        SceneObject {
                            kind: ObjectKind::Clutter,
                            shape: Shape::Square,
                            x: r.x,
                            y: r.y,
                            w: r.w,
                            h: r.h,
                            color,
                            hidden: HiddenParams {
                                mass: f32::INFINITY,
                                friction: 1.0,
                                deformable: false,
                                squash: 0.0,
                                interior: [0.0; 3],
                            },
                        },
                    );
                    added += 1;
                }
            }
            OodAxis::TargetObject => {
                for o in self.objects.iter_mut().filter(|o| o.pushable()) {
                    let (cx, cy) = (o.x + o.w / 2.0, o.y + o.h / 2.0);
                    o.w *= 1.5;
                    o.h *= 1.5;
                    o.x = (cx - o.w / 2.0).clamp(0.0, cfg.width as f32 - o.w);
                    o.y = (cy - o.h / 2.0).clamp(0.0, cfg.height as f32 - o.h);
                    o.shape = Shape::Disc;
                    o.color = random_color(rng, 0.75, 0.98);
                }
            }
            OodAxis::Effector => {
                self.agent_color = [0.9, 0.6, 0.2];
                self.agent_shape = Shape::Disc;
                self.agent_extent = 1.8;
                self.agent_palette = 1;
            }
        }
    }

    /// Runs the dynamics and renders every frame.
    pub fn simulate(&self, cfg: &WorldConfig) -> Episode {
        let t_len = cfg.frames;
        let s = cfg.agent_size;
        let (wf, hf) = (cfg.width as f32, cfg.height as f32);
        let mut objects = self.objects.clone();
        let mut velocity = vec![[0.0f32; 2]; objects.len()];
        let mut squashed = vec![false; objects.len()];
        let mut opened = vec![false; objects.len()];
        let (mut ax, mut ay) = (self.agent_x, self.agent_y);

        let per_frame = cfg.height * cfg.width * 3;
        let mut frames = Vec::with_capacity(t_len * per_frame);
        frames.extend(self.render(cfg, ax, ay, &objects, &opened));
        for t in 0..t_len - 1 {
            let [dx, dy] = self.actions[t];
            ax = (ax + dx).clamp(0.0, wf - s);
            ay = (ay + dy).clamp(0.0, hf - s);
            let agent = Rect { x: ax, y: ay, w: s, h: s };
            for (i, o) in objects.iter_mut().enumerate() {
                let r = Rect { x: o.x, y: o.y, w: o.w, h: o.h };
                match o.kind {
                    ObjectKind::Clutter => {}
                    ObjectKind::Cabinet => {
                        if agent.overlaps(&r) {
                            opened[i] = true;
                        }
                    }
                    ObjectKind::Block => {
                        let hp = o.hidden;
                        let v = &mut velocity[i];
                        v[0] *= 1.0 - hp.friction;
                        v[1] *= 1.0 - hp.friction;
                        o.x += v[0];
                        o.y += v[1];
                        let r = Rect { x: o.x, y: o.y, w: o.w, h: o.h };
                        if agent.overlaps(&r) {
                            let horizontal = dx.abs() >= dy.abs();
                            if hp.deformable && !squashed[i] {
                                squashed[i] = true;
                                let (cx, cy) = (o.x + o.w / 2.0, o.y + o.h / 2.0);
                                let keep = 1.0 - hp.squash;
                                if horizontal {
                                    o.w *= keep;
                                    o.h = (o.h / keep).min(hf / 2.0);
                                } else {
                                    o.h *= keep;
                                    o.w = (o.w / keep).min(wf / 2.0);
                                }
                                o.x = cx - o.w / 2.0;
                                o.y = cy - o.h / 2.0;
                            }
                            if dx == 0.0 && dy == 0.0 {
                                *v = [0.0, 0.0];
                            } else {
                                v[0] += dx / hp.mass;
                                v[1] += dy / hp.mass;
                            }
                            if horizontal {
                                o.x = if dx >= 0.0 { ax + s } else { ax - o.w };
                            } else {
                                o.y = if dy >= 0.0 { ay + s } else { ay - o.h };
                            }
                        }
                        o.x = o.x.clamp(0.0, wf - o.w);
                        o.y = o.y.clamp(0.0, hf - o.h);
                    }
                }
            }
            frames.extend(self.render(cfg, ax, ay, &objects, &opened));
        }

        let actions: Vec<f32> = self.actions.iter().flat_map(|a| a.iter().copied()).collect();
        Episode {
            frames: Tensor::new(&[t_len, cfg.height, cfg.width, 3], frames).unwrap(),
            actions: Tensor::new(&[t_len, 2], actions).unwrap(),
            seed: self.seed,
            ood_axis: self.ood_axis,
        }
    }

    fn background_layer(&self, cfg: &WorldConfig) -> Vec<f32> {
        let mut px = Vec::with_capacity(cfg.height * cfg.width * 3);
        for _y in 0..cfg.height {
            for x in 0..cfg.width {
                let c = match self.stripes {
                    Some(alt) if (x / 4) % 2 == 1 => alt,
                    _ => self.background,
                };
                px.extend_from_slice(&c);
            }
        }
        px
    }

    pub(crate) fn background_histogram_cells(&self, cfg: &WorldConfig) -> usize {
        let layer = self.background_layer(cfg);
        let cells: HashSet<[u8; 3]> = layer
            .chunks_exact(3)
            .map(|c| [0, 1, 2].map(|i| (c[i].clamp(0.0, 0.999) * 8.0) as u8))
            .collect();
        cells.len()
    }

    fn render(&self, cfg: &WorldConfig, ax: f32, ay: f32, objects: &[SceneObject], opened: &[bool]) -> Vec<f32> {
        let mut px = self.background_layer(cfg);
        let w = cfg.width;
        let paint = |px: &mut [f32], color: [f32; 3], cover: &dyn Fn(usize, usize) -> f32| {
            for y in 0..cfg.height {
                for x in 0..w {
                    let c = cover(x, y);
                    if c > 0.0 {
                        let p = &mut px[(y * w + x) * 3..][..3];
                        for k in 0..3 {
                            p[k] = (1.0 - c) * p[k] + c * color[k];
                        }
                    }
                }
            }
        };
        for (o, &open) in objects.iter().zip(opened) {
            let r = Rect { x: o.x, y: o.y, w: o.w, h: o.h };
            paint(&mut px, o.color, &|x, y| shape_coverage(o.shape, &r, x, y));
            if o.kind == ObjectKind::Cabinet {
                let inner = r.inflate(-1.5);
                let color = if open { o.hidden.interior } else { [o.color[0] * 0.7, o.color[1] * 0.7, o.color[2] * 0.7] };
                paint(&mut px, color, &|x, y| inner.coverage(x, y));
            }
        }
        let side = cfg.agent_size * self.agent_extent;
        let margin = (side - cfg.agent_size) / 2.0;
        let agent = Rect { x: ax - margin, y: ay - margin, w: side, h: side };
        paint(&mut px, self.agent_color, &|x, y| shape_coverage(self.agent_shape, &agent, x, y));
        if self.tint != [0.0; 3] {
            for p in px.chunks_exact_mut(3) {
                for k in 0..3 {
                    p[k] = (p[k] + self.tint[k]).clamp(0.0, 1.0);
                }
            }
        }
        px
    }
}

fn shape_coverage(shape: Shape, r: &Rect, x: usize, y: usize) -> f32 {
    match shape {
        Shape::Square => r.coverage(x, y),
        Shape::Disc => {
            if r.coverage(x, y) == 0.0 {
                return 0.0;
            }
            let (cx, cy) = (r.x + r.w / 2.0, r.y + r.h / 2.0);
            let (rx, ry) = (r.w / 2.0, r.h / 2.0);
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let u = (x as f32 + (sx as f32 + 0.5) / 4.0 - cx) / rx;
                    let v = (y as f32 + (sy as f32 + 0.5) / 4.0 - cy) / ry;
                    if u * u + v * v <= 1.0 {
                        hits += 1;
                    }
                }
            }
            hits as f32 / 16.0
        }
    }
}

fn sample_actions(cfg: &WorldConfig, rng: &Rng, agent: &Rect, objects: &[SceneObject]) -> Vec<[f32; 2]> {
    let mut rng = rng.clone();
    let target = objects.iter().find(|o| o.kind != ObjectKind::Clutter);
    let seek = target.is_some() && rng.uniform() < cfg.seek_prob;
    let mut heading = match (seek, target) {
        (true, Some(o)) => {
            let dx = o.x + o.w / 2.0 - (agent.x + agent.w / 2.0);
            let dy = o.y + o.h / 2.0 - (agent.y + agent.h / 2.0);
            dy.atan2(dx) + 0.2 * rng.normal()
        }
        _ => rng.range(-std::f32::consts::PI, std::f32::consts::PI),
    };
    let mut speed = rng.range(0.4, 1.0) * cfg.max_speed;
    (0..cfg.frames)
        .map(|_| {
            let a = [speed * heading.cos(), speed * heading.sin()];
            heading += 0.25 * rng.normal();
            speed = (speed + 0.2 * rng.normal()).clamp(0.0, cfg.max_speed);
            a
        })
        .collect()
}
