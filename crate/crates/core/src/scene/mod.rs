//! Synthetic tabletop pick-and-place world.
//!
//! The table is the unit square seen from above; `x` grows to the right
//! (image column), `y` grows toward the camera (image row), `z` is the
//! gripper height. Objects rest on patch centers of the default 8×8 grid;
//! the gripper moves on a finer 1/16 lattice.

pub mod dataset;
pub mod expert;
pub mod instruction;
pub mod render;

pub use dataset::{generate_dataset, load_dataset, Dataset, EpisodeRecord, Manifest, StepRecord};
pub use expert::scripted_expert;
pub use instruction::{Color, Instruction, ObjectRef, Relation, Shape};
pub use render::{render, render_with, RenderOptions, Rendered};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gripper lattice step in table lengths.
pub const UNIT: f64 = 1.0 / 16.0;
/// Per-step clip bound on every position delta.
pub const A_MAX: f64 = 2.0 * UNIT;
pub const Z_TRAVEL: f64 = 3.0 * UNIT;
pub const Z_RELEASE: f64 = UNIT;
pub const Z_MAX: f64 = 4.0 * UNIT;
/// Translations below this are not executed.
pub const DEADBAND: f64 = UNIT / 16.0;
pub const GRIP_MIN_XY: f64 = 2.0 * UNIT;
pub const GRIP_MAX_XY: f64 = 14.0 * UNIT;
/// Reference render size at which `Shape::radius_px` is defined.
pub const REFERENCE_SIZE: f64 = 112.0;
/// Object slots are centers of an 8×8 grid; usable columns/rows 1..=6.
const OBJECT_CELLS: usize = 8;
const PLACE_OFFSET: f64 = 2.0 / OBJECT_CELLS as f64;
const GRASP_RADIUS: f64 = 0.75 * UNIT;
const GRASP_HEIGHT: f64 = 0.5 * UNIT;
/// Proximity radius for the "close to" clause, as a multiple of the target radius.
pub const CLOSE_FACTOR: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub x: f64,
    pub y: f64,
    pub held: bool,
}

impl SceneObject {
    pub fn radius(&self) -> f64 {
        self.shape.radius_px() / REFERENCE_SIZE
    }

    pub fn matches(&self, r: ObjectRef) -> bool {
        self.shape == r.shape && self.color == r.color
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gripper {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// 1 = open, 0 = closed.
    pub aperture: f64,
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    pub gripper: Gripper,
}

impl SceneState {
    pub fn find(&self, r: ObjectRef) -> Option<usize> {
        self.objects.iter().position(|o| o.matches(r))
    }

    pub fn held(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    pub fn is_valid(&self) -> bool {
        let g = &self.gripper;
        self.objects.iter().filter(|o| o.held).count() <= 1
            && self
                .objects
                .iter()
                .all(|o| (0.0..=1.0).contains(&o.x) && (0.0..=1.0).contains(&o.y))
            && (GRIP_MIN_XY..=GRIP_MAX_XY).contains(&g.x)
            && (GRIP_MIN_XY..=GRIP_MAX_XY).contains(&g.y)
            && (0.0..=Z_MAX).contains(&g.z)
            && (0.0..=1.0).contains(&g.aperture)
    }

    /// Applies one control step: gripper command first, then motion.
    pub fn step(&mut self, action: &Action) {
        let a = action.clipped();
        self.gripper.aperture = a.grip.clamp(0.0, 1.0);
        let closed = self.gripper.aperture < 0.5;
        match self.held() {
            Some(i) if !closed => {
                let o = &mut self.objects[i];
                o.held = false;
                o.x = self.gripper.x;
                o.y = self.gripper.y;
            }
            None if closed && self.gripper.z <= GRASP_HEIGHT => {
                let g = self.gripper;
                let candidate = self
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.shape.graspable())
                    .map(|(i, o)| (i, (o.x - g.x).hypot(o.y - g.y)))
                    .filter(|&(_, d)| d <= GRASP_RADIUS)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = candidate {
                    self.objects[i].held = true;
                }
            }
            _ => {}
        }
        let d = a.dpos.map(|v| if v.abs() < DEADBAND { 0.0 } else { v });
        let g = &mut self.gripper;
        g.x = (g.x + d[0]).clamp(GRIP_MIN_XY, GRIP_MAX_XY);
        g.y = (g.y + d[1]).clamp(GRIP_MIN_XY, GRIP_MAX_XY);
        g.z = (g.z + d[2]).clamp(0.0, Z_MAX);
        g.yaw += a.drot[2];
        let (x, y) = (g.x, g.y);
        if let Some(i) = self.held() {
            self.objects[i].x = x;
            self.objects[i].y = y;
        }
    }
}

/// `[Δx (3), Δθ (3), grip]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub dpos: [f64; 3],
    pub drot: [f64; 3],
    pub grip: f64,
}

impl Action {
    pub const DIM: usize = 7;

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.dpos[0],
            self.dpos[1],
            self.dpos[2],
            self.drot[0],
            self.drot[1],
            self.drot[2],
            self.grip,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            dpos: [a[0], a[1], a[2]],
            drot: [a[3], a[4], a[5]],
            grip: a[6],
        }
    }

    pub fn clipped(&self) -> Self {
        let mut a = *self;
        for d in a.dpos.iter_mut() {
            *d = d.clamp(-A_MAX, A_MAX);
        }
        a.grip = a.grip.clamp(0.0, 1.0);
        a
    }

    pub fn is_no_motion(&self) -> bool {
        self.dpos.iter().all(|&d| d == 0.0) && self.drot.iter().all(|&d| d == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn cell_center(i: usize) -> f64 {
    (i as f64 + 0.5) / OBJECT_CELLS as f64
}

fn usable(v: f64) -> bool {
    (cell_center(1) - 1e-9..=cell_center(OBJECT_CELLS - 2) + 1e-9).contains(&v)
}

fn overlaps(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    let margin = 2.0 / REFERENCE_SIZE;
    (a.0 - b.0).hypot(a.1 - b.1) < a.2 + b.2 + margin
}

/// Where the pick object must be released to satisfy the instruction: the
/// target center for "in", otherwise the middle of the proximity band.
pub fn placement_target(state: &SceneState, ins: &Instruction) -> Option<(f64, f64)> {
    let t = &state.objects[state.find(ins.target)?];
    let p = &state.objects[state.find(ins.pick)?];
    let offset = (t.radius() * (1.0 + 0.5 * CLOSE_FACTOR) + p.radius()).min(PLACE_OFFSET);
    Some(match ins.relation {
        Relation::In => (t.x, t.y),
        Relation::LeftOf => (t.x - offset, t.y),
        Relation::FrontOf => (t.x, t.y + offset),
    })
}

/// Reproducible scene + instruction for a seed. Placement retries until a
/// valid layout is found.
pub fn sample_task(seed: u64) -> (SceneState, Instruction) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(task) = try_sample(&mut rng) {
            return task;
        }
    }
}

fn random_ref(rng: &mut ChaCha8Rng, shapes: &[Shape]) -> ObjectRef {
    ObjectRef {
        color: *Color::ALL.choose(rng).unwrap(),
        shape: *shapes.choose(rng).unwrap(),
    }
}

fn try_sample(rng: &mut ChaCha8Rng) -> Option<(SceneState, Instruction)> {
    let relation = *Relation::ALL.choose(rng).unwrap();
    let pick = random_ref(rng, &[Shape::Cube, Shape::Ball]);
    let target = if relation == Relation::In {
        random_ref(rng, &[Shape::Bowl, Shape::Bag])
    } else {
        random_ref(rng, &Shape::ALL)
    };
    if pick == target {
        return None;
    }
    let ins = Instruction { pick, relation, target };
    let n_objects = rng.gen_range(2..=5);

    let cell = |rng: &mut ChaCha8Rng| cell_center(rng.gen_range(1..=OBJECT_CELLS - 2));
    let mk = |r: ObjectRef, x: f64, y: f64| SceneObject {
        shape: r.shape,
        color: r.color,
        x,
        y,
        held: false,
    };
    let disc = |o: &SceneObject| (o.x, o.y, o.radius());

    let t = mk(target, cell(rng), cell(rng));
    let dest = match relation {
        Relation::In => (t.x, t.y),
        Relation::LeftOf => (t.x - PLACE_OFFSET, t.y),
        Relation::FrontOf => (t.x, t.y + PLACE_OFFSET),
    };
    if !usable(dest.0) || !usable(dest.1) {
        return None;
    }
    let pick_r = pick.shape.radius_px() / REFERENCE_SIZE;
    let mut objects = vec![t];
    let reserved = (dest.0, dest.1, pick_r);
    let free = |objects: &[SceneObject], c: (f64, f64, f64), check_dest: bool| {
        objects.iter().all(|o| !overlaps(disc(o), c)) && (!check_dest || !overlaps(reserved, c))
    };

    let mut placed_pick = false;
    for _ in 0..50 {
        let o = mk(pick, cell(rng), cell(rng));
        if free(&objects, disc(&o), true) {
            objects.push(o);
            placed_pick = true;
            break;
        }
    }
    if !placed_pick {
        return None;
    }
    let mut attempts = 0;
    while objects.len() < n_objects && attempts < 200 {
        attempts += 1;
        let r = random_ref(rng, &Shape::ALL);
        if objects.iter().any(|o| o.matches(r)) {
            continue;
        }
        let o = mk(r, cell(rng), cell(rng));
        if free(&objects, disc(&o), relation != Relation::In) {
            objects.push(o);
        }
    }
    if objects.len() < 2 {
        return None;
    }
    objects.shuffle(rng);
    // The gripper starts on the object grid, one patch per cell at the
    // default geometry, so every expert move is a whole number of cells.
    let gripper = Gripper {
        x: cell(rng),
        y: cell(rng),
        z: Z_TRAVEL,
        aperture: 1.0,
        yaw: 0.0,
    };
    let state = SceneState { objects, gripper };
    if check_success(&state, &ins) {
        return None;
    }
    Some((state, ins))
}

pub fn check_success(state: &SceneState, ins: &Instruction) -> bool {
    let (Some(pi), Some(ti)) = (state.find(ins.pick), state.find(ins.target)) else {
        return false;
    };
    let (p, t) = (&state.objects[pi], &state.objects[ti]);
    if p.held || !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
        return false;
    }
    let dist = (p.x - t.x).hypot(p.y - t.y);
    let close = dist - t.radius() - p.radius() <= CLOSE_FACTOR * t.radius();
    match ins.relation {
        Relation::In => dist <= t.radius(),
        Relation::LeftOf => p.x < t.x && close,
        Relation::FrontOf => p.y > t.y && close,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: Shape, color: Color, x: f64, y: f64) -> SceneObject {
        SceneObject { shape, color, x, y, held: false }
    }

    fn two_object_state(pick: (f64, f64), held: bool) -> SceneState {
        let mut p = obj(Shape::Cube, Color::Red, pick.0, pick.1);
        p.held = held;
        SceneState {
            objects: vec![p, obj(Shape::Bowl, Color::Blue, 0.5, 0.5)],
            gripper: Gripper { x: 0.5, y: 0.5, z: Z_TRAVEL, aperture: 1.0, yaw: 0.0 },
        }
    }

    #[test]
    fn sample_is_deterministic_and_valid() {
        for seed in 0..200 {
            let (a, ia) = sample_task(seed);
            let (b, ib) = sample_task(seed);
            assert_eq!(a, b);
            assert_eq!(ia, ib);
            assert!((2..=5).contains(&a.objects.len()));
            assert!(a.is_valid());
            for i in 0..a.objects.len() {
                for j in i + 1..a.objects.len() {
                    let (o, p) = (&a.objects[i], &a.objects[j]);
                    assert!(!overlaps((o.x, o.y, o.radius()), (p.x, p.y, p.radius())));
                    assert!(!(o.shape == p.shape && o.color == p.color));
                }
            }
            if ia.relation == Relation::In {
                assert!(ia.target.shape.container());
            }
            assert!(a.find(ia.pick).is_some() && a.find(ia.target).is_some());
            assert!(!check_success(&a, &ia));
        }
    }

    #[test]
    fn success_in_bowl() {
        let ins = Instruction::parse("place the red cube in the blue bowl").unwrap();
        assert!(check_success(&two_object_state((0.52, 0.5), false), &ins));
        assert!(!check_success(&two_object_state((0.5, 0.5), true), &ins));
        assert!(!check_success(&two_object_state((0.8, 0.5), false), &ins));
    }

    #[test]
    fn success_left_of_needs_proximity() {
        let ins = Instruction::parse("place the red cube left of the blue bowl").unwrap();
        let t_r = Shape::Bowl.radius_px() / REFERENCE_SIZE;
        let p_r = Shape::Cube.radius_px() / REFERENCE_SIZE;
        let near = 0.5 - (t_r + p_r + 0.5 * CLOSE_FACTOR * t_r);
        assert!(check_success(&two_object_state((near, 0.5), false), &ins));
        let far = 0.5 - (t_r + p_r + 10.0 * CLOSE_FACTOR * t_r);
        let s = two_object_state((far.max(0.0), 0.5), false);
        assert!(!check_success(&s, &ins));
        // Right of the target is the wrong half-plane.
        assert!(!check_success(&two_object_state((1.0 - near, 0.5), false), &ins));
    }

    #[test]
    fn grasp_and_release() {
        let mut s = two_object_state((0.25, 0.25), false);
        s.gripper = Gripper { x: 0.25, y: 0.25, z: 0.0, aperture: 1.0, yaw: 0.0 };
        s.step(&Action { dpos: [0.0, 0.0, UNIT], drot: [0.0; 3], grip: 0.0 });
        assert_eq!(s.held(), Some(0));
        assert_eq!(s.gripper.z, UNIT);
        s.step(&Action { dpos: [A_MAX * 3.0, 0.0, 0.0], drot: [0.0; 3], grip: 0.0 });
        assert_eq!(s.gripper.x, 0.25 + A_MAX);
        assert_eq!(s.objects[0].x, s.gripper.x);
        s.step(&Action { dpos: [0.0, 0.0, UNIT], drot: [0.0; 3], grip: 1.0 });
        assert_eq!(s.held(), None);
        assert_eq!(s.objects[0].x, 0.25 + A_MAX);
    }

    #[test]
    fn deadband_drops_tiny_translations() {
        let mut s = two_object_state((0.25, 0.25), false);
        s.gripper = Gripper { x: 0.5, y: 0.5, z: Z_TRAVEL, aperture: 1.0, yaw: 0.0 };
        s.step(&Action { dpos: [0.002, -0.002, 0.002], drot: [0.0; 3], grip: 1.0 });
        assert_eq!((s.gripper.x, s.gripper.y, s.gripper.z), (0.5, 0.5, Z_TRAVEL));
        s.step(&Action { dpos: [DEADBAND, 0.0, 0.0], drot: [0.0; 3], grip: 1.0 });
        assert_eq!(s.gripper.x, 0.5 + DEADBAND);
    }

    #[test]
    fn no_motion_detection() {
        let a = Action { dpos: [0.0; 3], drot: [0.0; 3], grip: 0.0 };
        assert!(a.is_no_motion());
        let b = Action { drot: [0.0, 0.0, 0.1], ..a };
        assert!(!b.is_no_motion());
    }
}
