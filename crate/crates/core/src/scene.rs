//! Tabletop scenes, stacks and static stability.
//!
//! Blocks are axis-aligned boxes of uniform density. A stack is stable when,
//! at every interface, the center of mass of everything above it lies inside
//! the footprint of the block (or ground contact) that carries it. The
//! boundary is closed: a margin of exactly zero is stable.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("object `{0}` is not on the table")]
    MissingObject(String),
    #[error("object `{0}` is already stacked")]
    AlreadyStacked(String),
    #[error("placement of `{object}` is unstable (worst margin {worst_margin} mm)")]
    StabilityRefused {
        object: String,
        worst_margin: f64,
        report: StabilityReport,
    },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub width: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub color: Color,
    pub size: Size,
    #[serde(default)]
    pub shape: Shape,
    pub footprint: Footprint,
    pub height: f64,
    pub position: Point,
}

impl SceneObject {
    pub fn volume(&self) -> f64 {
        self.footprint.width * self.footprint.depth * self.height
    }

    fn rect_at(&self, center: Point) -> Rect {
        Rect::centered(center, self.footprint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub width: f64,
    pub depth: f64,
}

impl Default for Table {
    fn default() -> Self {
        Table {
            width: 1200.0,
            depth: 800.0,
        }
    }
}

/// Objects resting on the table plus the stacking location. Table
/// coordinates run from (0, 0) to (width, depth) in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default)]
    pub table: Table,
    pub target: Point,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(o.id.as_str()) {
                return Err(SceneError::Invalid(format!("duplicate object id `{}`", o.id)));
            }
            if !(o.footprint.width > 0.0 && o.footprint.depth > 0.0 && o.height > 0.0) {
                return Err(SceneError::Invalid(format!("object `{}` has non-positive dimensions", o.id)));
            }
            if !self.contains(&o.position) {
                return Err(SceneError::Invalid(format!("object `{}` lies outside the table", o.id)));
            }
        }
        if !self.contains(&self.target) {
            return Err(SceneError::Invalid("stack target lies outside the table".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0.0..=self.table.width).contains(&p.x) && (0.0..=self.table.depth).contains(&p.y)
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Moves every object and the stack target by the same offset.
    pub fn translated(&self, dx: f64, dy: f64) -> Scene {
        let mut out = self.clone();
        out.target = Point::new(out.target.x + dx, out.target.y + dy);
        for o in &mut out.objects {
            o.position = Point::new(o.position.x + dx, o.position.y + dy);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub object: SceneObject,
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ghost: bool,
}

/// Committed stack, bottom layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackState {
    pub target: Point,
    pub layers: Vec<Layer>,
}

impl StackState {
    pub fn empty(target: Point) -> Self {
        StackState {
            target,
            layers: Vec::new(),
        }
    }

    pub fn height(&self) -> f64 {
        self.layers.iter().map(|l| l.object.height).sum()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.layers.iter().any(|l| l.object.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.object.id.as_str()).collect()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> StackState {
        let mut out = self.clone();
        out.target = Point::new(out.target.x + dx, out.target.y + dy);
        for l in &mut out.layers {
            l.pose.x += dx;
            l.pose.y += dy;
            l.object.position = Point::new(l.object.position.x + dx, l.object.position.y + dy);
        }
        out
    }
}

/// Where to put an object, relative to the stack center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub object: String,
    pub offset: Point,
    pub pose: Pose,
}

impl PlacementPlan {
    pub fn new(stack: &StackState, object: impl Into<String>, offset: Point) -> Self {
        PlacementPlan {
            object: object.into(),
            offset,
            pose: Self::pose_for(stack, offset),
        }
    }

    fn pose_for(stack: &StackState, offset: Point) -> Pose {
        Pose {
            x: stack.target.x + offset.x,
            y: stack.target.y + offset.y,
            z: stack.height(),
            yaw: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub stable: bool,
    /// Per interface, bottom first. Interface 0 is ground contact.
    pub margins: Vec<f64>,
    pub overlap_ratios: Vec<f64>,
}

impl StabilityReport {
    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index of the lowest interface with a negative margin.
    pub fn violating_interface(&self) -> Option<usize> {
        self.margins.iter().position(|m| *m < 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Rect {
    fn centered(c: Point, fp: Footprint) -> Rect {
        Rect {
            min_x: c.x - fp.width / 2.0,
            max_x: c.x + fp.width / 2.0,
            min_y: c.y - fp.depth / 2.0,
            max_y: c.y + fp.depth / 2.0,
        }
    }

    fn area(&self) -> f64 {
        (self.max_x - self.min_x).max(0.0) * (self.max_y - self.min_y).max(0.0)
    }

    fn intersection(&self, o: &Rect) -> Rect {
        Rect {
            min_x: self.min_x.max(o.min_x),
            max_x: self.max_x.min(o.max_x),
            min_y: self.min_y.max(o.min_y),
            max_y: self.max_y.min(o.max_y),
        }
    }

    /// Positive inside (distance to the nearest edge), negative outside
    /// (overhang along the worse axis).
    fn signed_margin(&self, p: Point) -> f64 {
        let mx = (p.x - self.min_x).min(self.max_x - p.x);
        let my = (p.y - self.min_y).min(self.max_y - p.y);
        mx.min(my)
    }
}

/// Layer center relative to the stack target. Working in these coordinates
/// keeps reports identical when the whole stack is translated.
fn center_of(layer: &Layer, origin: Point) -> Point {
    Point::new(layer.pose.x - origin.x, layer.pose.y - origin.y)
}

/// Checks every interface of the stack, cumulating mass from the top down.
pub fn check_stability(stack: &StackState) -> StabilityReport {
    let n = stack.layers.len();
    let mut margins = vec![0.0; n];
    let mut overlaps = vec![0.0; n];
    let (mut mass, mut mx, mut my) = (0.0, 0.0, 0.0);
    for k in (0..n).rev() {
        let layer = &stack.layers[k];
        let m = layer.object.volume();
        mass += m;
        let c = center_of(layer, stack.target);
        mx += m * c.x;
        my += m * c.y;
        let com = Point::new(mx / mass, my / mass);
        let own = layer.object.rect_at(c);
        let support = if k == 0 {
            own
        } else {
            let below = &stack.layers[k - 1];
            below.object.rect_at(center_of(below, stack.target))
        };
        margins[k] = support.signed_margin(com);
        overlaps[k] = (support.intersection(&own).area() / own.area()).clamp(0.0, 1.0);
    }
    StabilityReport {
        stable: margins.iter().all(|m| *m >= 0.0),
        margins,
        overlap_ratios: overlaps,
    }
}

/// Scene and stack as they would look after a placement, with the placed
/// object marked as a ghost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub scene: Scene,
    pub stack: StackState,
    pub report: StabilityReport,
}

/// Poses the planned object on top of the stack without touching the
/// committed scene.
pub fn project_future_state(
    scene: &Scene,
    stack: &StackState,
    plan: &PlacementPlan,
) -> Result<Projection, SceneError> {
    if stack.contains(&plan.object) {
        return Err(SceneError::AlreadyStacked(plan.object.clone()));
    }
    let object = scene
        .object(&plan.object)
        .ok_or_else(|| SceneError::MissingObject(plan.object.clone()))?
        .clone();
    let mut ghost_scene = scene.clone();
    ghost_scene.objects.retain(|o| o.id != plan.object);
    let mut ghost_stack = stack.clone();
    ghost_stack.layers.push(Layer {
        object,
        pose: PlacementPlan::pose_for(stack, plan.offset),
        ghost: true,
    });
    let report = check_stability(&ghost_stack);
    Ok(Projection {
        scene: ghost_scene,
        stack: ghost_stack,
        report,
    })
}

/// Commits a placement. Unstable placements are refused unless `force`.
pub fn apply_placement(
    scene: &Scene,
    stack: &StackState,
    plan: &PlacementPlan,
    force: bool,
) -> Result<(Scene, StackState, StabilityReport), SceneError> {
    let mut projection = project_future_state(scene, stack, plan)?;
    if !projection.report.stable && !force {
        return Err(SceneError::StabilityRefused {
            object: plan.object.clone(),
            worst_margin: projection.report.worst_margin(),
            report: projection.report,
        });
    }
    if let Some(top) = projection.stack.layers.last_mut() {
        top.ghost = false;
    }
    Ok((projection.scene, projection.stack, projection.report))
}

/// Whether the placed object, at its rest pose, would intersect any block
/// still standing on the table. Touching faces do not count.
pub fn check_collision(scene: &Scene, stack: &StackState, plan: &PlacementPlan) -> bool {
    let Some(object) = scene
        .object(&plan.object)
        .or_else(|| stack.layers.iter().map(|l| &l.object).find(|o| o.id == plan.object))
    else {
        return false;
    };
    let pose = PlacementPlan::pose_for(stack, plan.offset);
    let ghost = object.rect_at(Point::new(pose.x, pose.y));
    let (z0, z1) = (pose.z, pose.z + object.height);
    scene.objects.iter().filter(|o| o.id != plan.object).any(|o| {
        let r = o.rect_at(o.position);
        ghost.min_x < r.max_x
            && r.min_x < ghost.max_x
            && ghost.min_y < r.max_y
            && r.min_y < ghost.max_y
            && z0 < o.height
            && 0.0 < z1
    })
}


#[cfg(test)]
mod tests {
    use super::testing::block;
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scene() -> Scene {
        Scene {
            table: Table::default(),
            target: Point::new(600.0, 400.0),
            objects: vec![
                block("large", Color::Green, Size::Large, 80.0, 80.0, (200.0, 200.0)),
                block("small", Color::Red, Size::Small, 40.0, 40.0, (300.0, 200.0)),
                block("short", Color::Blue, Size::Small, 40.0, 20.0, (400.0, 200.0)),
            ],
        }
    }

    fn stack_one(scene: &Scene, id: &str, offset: Point) -> (Scene, StackState) {
        let stack = StackState::empty(scene.target);
        let plan = PlacementPlan::new(&stack, id, offset);
        let (s, st, _) = apply_placement(scene, &stack, &plan, false).unwrap();
        (s, st)
    }

    #[test]
    fn first_block_rests_on_ground() {
        let sc = scene();
        let stack = StackState::empty(sc.target);
        let p = project_future_state(&sc, &stack, &PlacementPlan::new(&stack, "large", Point::default())).unwrap();
        let layer = &p.stack.layers[0];
        assert_eq!(layer.pose.z, 0.0);
        assert!(layer.ghost);
        assert!(p.report.stable);
        assert_abs_diff_eq!(p.report.margins[0], 40.0);
        assert!(sc.object("large").is_some());
    }

    #[test]
    fn centered_small_on_large() {
        let sc = scene();
        let (sc, stack) = stack_one(&sc, "large", Point::default());
        let p = project_future_state(&sc, &stack, &PlacementPlan::new(&stack, "small", Point::default())).unwrap();
        assert!(p.report.stable);
        assert_eq!(p.stack.layers[1].pose.z, 80.0);
        assert_abs_diff_eq!(p.report.margins[1], 40.0);
        assert_abs_diff_eq!(p.report.overlap_ratios[1], 1.0);
    }

    #[test]
    fn overhanging_small_is_unstable() {
        let sc = scene();
        let (sc, stack) = stack_one(&sc, "large", Point::default());
        let plan = PlacementPlan::new(&stack, "small", Point::new(45.0, 0.0));
        let p = project_future_state(&sc, &stack, &plan).unwrap();
        assert!(!p.report.stable);
        assert_abs_diff_eq!(p.report.margins[1], -5.0, epsilon = 1e-9);
        assert_eq!(p.report.violating_interface(), Some(1));
        assert!(matches!(
            apply_placement(&sc, &stack, &plan, false),
            Err(SceneError::StabilityRefused { .. })
        ));
        let (_, forced, report) = apply_placement(&sc, &stack, &plan, true).unwrap();
        assert_eq!(forced.layers.len(), 2);
        assert!(!report.stable);
    }

    #[test]
    fn edge_contact_is_stable() {
        let sc = scene();
        let (sc, stack) = stack_one(&sc, "large", Point::default());
        let plan = PlacementPlan::new(&stack, "small", Point::new(40.0, 0.0));
        let p = project_future_state(&sc, &stack, &plan).unwrap();
        assert_eq!(p.report.margins[1], 0.0);
        assert!(p.report.stable);
    }

    #[test]
    fn combined_mass_can_tip_a_lower_interface() {
        // Middle block weighs twice the top one; each pair is fine on its own
        // but their joint center of mass overhangs the bottom block by 4 mm.
        let rect = |id: &str, w: f64, x: f64, z: f64| Layer {
            object: SceneObject {
                id: id.into(),
                color: Color::Red,
                size: Size::Small,
                shape: Shape::Block,
                footprint: Footprint { width: w, depth: 40.0 },
                height: 20.0,
                position: Point::default(),
            },
            pose: Pose { x, y: 0.0, z, yaw: 0.0 },
            ghost: false,
        };
        let mut bottom = rect("bottom", 80.0, 0.0, 0.0);
        bottom.object.footprint.depth = 80.0;
        let stack = StackState {
            target: Point::default(),
            layers: vec![bottom, rect("middle", 60.0, 36.0, 20.0), rect("top", 30.0, 60.0, 40.0)],
        };
        let r = check_stability(&stack);
        assert!(!r.stable);
        assert_eq!(r.violating_interface(), Some(1));
        assert_abs_diff_eq!(r.margins[1], -4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.margins[2], 6.0, epsilon = 1e-9);
        assert!(r.margins[0] > 0.0);
    }

    #[test]
    fn commit_twice_fails() {
        let sc = scene();
        let (sc2, stack) = stack_one(&sc, "large", Point::default());
        let plan = PlacementPlan::new(&stack, "large", Point::default());
        assert_eq!(apply_placement(&sc2, &stack, &plan, false), Err(SceneError::AlreadyStacked("large".into())));
        let missing = PlacementPlan::new(&stack, "nope", Point::default());
        assert_eq!(apply_placement(&sc2, &stack, &missing, false), Err(SceneError::MissingObject("nope".into())));
    }

    #[test]
    fn collision_cases() {
        let sc = scene();
        let stack = StackState::empty(sc.target);
        assert!(!check_collision(&sc, &stack, &PlacementPlan::new(&stack, "small", Point::default())));

        let mut crowded = sc.clone();
        crowded.target = Point::new(200.0, 200.0);
        let stack = StackState::empty(crowded.target);
        assert!(check_collision(&crowded, &stack, &PlacementPlan::new(&stack, "small", Point::default())));

        // Ghost resting above a 20 mm distractor does not touch it.
        let mut high = scene();
        high.target = Point::new(400.0, 200.0);
        let raised = StackState {
            target: high.target,
            layers: vec![Layer {
                object: block("base", Color::Yellow, Size::Large, 200.0, 30.0, (0.0, 0.0)),
                pose: Pose { x: 400.0, y: 200.0, z: 0.0, yaw: 0.0 },
                ghost: false,
            }],
        };
        assert!(!check_collision(&high, &raised, &PlacementPlan::new(&raised, "small", Point::default())));
        assert!(check_collision(&high, &StackState::empty(high.target), &PlacementPlan::new(&raised, "small", Point::default())));
    }

    #[test]
    fn scene_validation() {
        let mut sc = scene();
        assert!(sc.validate().is_ok());
        sc.objects.push(sc.objects[0].clone());
        assert!(sc.validate().is_err());
        let mut sc = scene();
        sc.objects[0].position = Point::new(-5.0, 0.0);
        assert!(sc.validate().is_err());
        let mut sc = scene();
        sc.objects[0].height = 0.0;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn ghost_marker_serializes_only_when_set() {
        let sc = scene();
        let stack = StackState::empty(sc.target);
        let p = project_future_state(&sc, &stack, &PlacementPlan::new(&stack, "small", Point::default())).unwrap();
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["stack"]["layers"][0]["ghost"], true);
        let (_, committed, _) = apply_placement(&sc, &stack, &PlacementPlan::new(&stack, "small", Point::default()), false).unwrap();
        assert!(serde_json::to_value(&committed).unwrap()["layers"][0].get("ghost").is_none());
    }
}
