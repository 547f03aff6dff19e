//! Static description of the virtual rearing chamber, the two display
//! objects and the twelve viewpoint ranges.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{vec3, Mat3, Vec3};

/// Chamber dimensions in chamber units. The x axis runs along the length,
/// y along the width and z points up; displays hang on the two end walls
/// (`x = 0` and `x = length`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChamberSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Size of the displayed object on screen (horizontal, vertical).
    pub object_width: f64,
    pub object_height: f64,
    /// White screen area of each display.
    pub screen_width: f64,
    pub screen_height: f64,
    /// Height of the screen's lower edge above the floor.
    pub screen_bottom: f64,
    pub bezel: f64,
    pub wire_mesh_floor: bool,
}

impl Default for ChamberSpec {
    fn default() -> Self {
        Self {
            length: 66.0,
            width: 42.0,
            height: 69.0,
            object_width: 8.0,
            object_height: 7.0,
            screen_width: 34.0,
            screen_height: 26.0,
            screen_bottom: 2.0,
            bezel: 2.0,
            wire_mesh_floor: true,
        }
    }
}

impl ChamberSpec {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.length,
            self.width,
            self.height,
            self.object_width,
            self.object_height,
            self.screen_width,
            self.screen_height,
        ];
        if extents.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(SimError::Config("chamber extents must be strictly positive".into()));
        }
        if self.screen_width + 2.0 * self.bezel > self.width
            || self.screen_bottom + self.screen_height + self.bezel > self.height
        {
            return Err(SimError::Config("display does not fit on the end wall".into()));
        }
        if self.object_width > self.screen_width || self.object_height > self.screen_height {
            return Err(SimError::Config("object larger than the display screen".into()));
        }
        Ok(())
    }

    /// Center of the screen on the given wall.
    pub fn display_center(&self, wall: Wall) -> Vec3 {
        vec3(
            match wall {
                Wall::Near => 0.0,
                Wall::Far => self.length,
            },
            self.width / 2.0,
            self.screen_bottom + self.screen_height / 2.0,
        )
    }
}

/// The two opposing display walls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wall {
    /// `x = 0`
    Near,
    /// `x = length`
    Far,
}

impl Wall {
    /// Unit normal pointing into the chamber.
    pub fn inward(self) -> Vec3 {
        match self {
            Wall::Near => vec3(1.0, 0.0, 0.0),
            Wall::Far => vec3(-1.0, 0.0, 0.0),
        }
    }

    /// Horizontal screen axis, to the right as seen from inside the chamber.
    pub fn screen_right(self) -> Vec3 {
        match self {
            Wall::Near => vec3(0.0, 1.0, 0.0),
            Wall::Far => vec3(0.0, -1.0, 0.0),
        }
    }

    pub fn for_episode(episode: u32) -> Wall {
        if episode % 2 == 0 {
            Wall::Near
        } else {
            Wall::Far
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectId {
    A,
    B,
}

impl ObjectId {
    pub const ALL: [ObjectId; 2] = [ObjectId::A, ObjectId::B];

    pub fn label(self) -> usize {
        match self {
            ObjectId::A => 0,
            ObjectId::B => 1,
        }
    }

    pub fn other(self) -> ObjectId {
        match self {
            ObjectId::A => ObjectId::B,
            ObjectId::B => ObjectId::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectId::A => "A",
            ObjectId::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<ObjectId> {
        match s {
            "A" | "a" => Some(ObjectId::A),
            "B" | "b" => Some(ObjectId::B),
            _ => None,
        }
    }
}

/// Bumped whenever the object geometry changes; stored in manifests.
pub const MESH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
struct LobeParams {
    lobes: f64,
    amplitude: f64,
    polar_bump: f64,
    bulge: f64,
    stretch: Vec3,
    base_tilt: f64,
}

/// Closed lobed surface, triangulated on a latitude/longitude grid.
#[derive(Clone, Debug)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise (outward) vertex triples.
    pub triangles: Vec<[usize; 3]>,
}

const LAT_STEPS: usize = 16;
const LON_STEPS: usize = 28;

impl ObjectSpec {
    pub fn new(id: ObjectId) -> Self {
        let p = match id {
            ObjectId::A => LobeParams {
                lobes: 3.0,
                amplitude: 0.45,
                polar_bump: 0.15,
                bulge: 0.25,
                stretch: vec3(1.35, 1.0, 0.8),
                base_tilt: 0.35,
            },
            ObjectId::B => LobeParams {
                lobes: 5.0,
                amplitude: 0.3,
                polar_bump: -0.25,
                bulge: -0.2,
                stretch: vec3(0.85, 1.25, 1.05),
                base_tilt: -0.5,
            },
        };
        let base = Mat3::axis_angle(vec3(1.0, 1.0, 0.0), p.base_tilt);
        let mut vertices = Vec::with_capacity(2 + (LAT_STEPS - 1) * LON_STEPS);
        let surface = |theta: f64, phi: f64| -> Vec3 {
            let r = 1.0
                + p.amplitude * (p.lobes * phi).cos() * theta.sin().powi(2)
                + p.polar_bump * (2.0 * theta).cos()
                + p.bulge * theta.sin() * phi.cos();
            let d = vec3(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let s = p.stretch;
            base.apply(vec3(d.x * r * s.x, d.y * r * s.y, d.z * r * s.z))
        };
        vertices.push(surface(0.0, 0.0));
        for i in 1..LAT_STEPS {
            let theta = std::f64::consts::PI * i as f64 / LAT_STEPS as f64;
            for j in 0..LON_STEPS {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / LON_STEPS as f64;
                vertices.push(surface(theta, phi));
            }
        }
        vertices.push(surface(std::f64::consts::PI, 0.0));
        let south = vertices.len() - 1;
        let ring = |i: usize, j: usize| 1 + (i - 1) * LON_STEPS + (j % LON_STEPS);
        let mut triangles = Vec::new();
        for j in 0..LON_STEPS {
            triangles.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..LAT_STEPS - 1 {
            for j in 0..LON_STEPS {
                let (a, b) = (ring(i, j), ring(i, j + 1));
                let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
                triangles.push([a, c, d]);
                triangles.push([a, d, b]);
            }
        }
        for j in 0..LON_STEPS {
            triangles.push([south, ring(LAT_STEPS - 1, j + 1), ring(LAT_STEPS - 1, j)]);
        }
        Self {
            id,
            vertices,
            triangles,
        }
    }
}

/// Rotation axes of the viewpoint ranges, in display coordinates
/// (x right, y up, z toward the viewer).
pub const VIEWPOINT_AXES: [Vec3; 3] = [vec3(1.0, 0.0, 0.0), vec3(0.0, 1.0, 0.0), vec3(0.0, 0.0, 1.0)];
pub const VIEWPOINT_PHASES_DEG: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const VIEWPOINT_SPAN_DEG: f64 = 60.0;
pub const NUM_VIEWPOINTS: usize = 12;

/// One of twelve 60° rotation ranges: three axes × four start angles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewpointRange {
    pub range_id: u8,
    pub axis: Vec3,
    pub start_deg: f64,
    pub span_deg: f64,
}

impl ViewpointRange {
    pub fn new(range_id: u8) -> Result<Self> {
        let id = range_id as usize;
        if id >= NUM_VIEWPOINTS {
            return Err(SimError::Config(format!("viewpoint range {range_id} not in 0..12")));
        }
        Ok(Self {
            range_id,
            axis: VIEWPOINT_AXES[id / 4],
            start_deg: VIEWPOINT_PHASES_DEG[id % 4],
            span_deg: VIEWPOINT_SPAN_DEG,
        })
    }

    pub fn all() -> Vec<ViewpointRange> {
        (0..NUM_VIEWPOINTS as u8)
            .map(|i| ViewpointRange::new(i).expect("id in range"))
            .collect()
    }

    /// Object orientation at `phase_deg ∈ [0, span]` within this range.
    pub fn rotation(&self, phase_deg: f64) -> Result<Mat3> {
        if !(0.0..=self.span_deg).contains(&phase_deg) {
            return Err(SimError::Config(format!(
                "phase {phase_deg} outside the {}° viewpoint span",
                self.span_deg
            )));
        }
        Ok(Mat3::axis_angle(
            self.axis,
            (self.start_deg + phase_deg).to_radians(),
        ))
    }
}

/// A rearing condition binds one object to one viewpoint range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: u8,
    pub object: ObjectId,
    pub viewpoint: u8,
}

/// Viewpoint ranges used for rearing; a different axis for the second pair.
pub const REARING_VIEWPOINTS: [u8; 2] = [0, 5];

impl Condition {
    pub fn new(id: u8) -> Result<Self> {
        let (object, viewpoint) = match id {
            1 => (ObjectId::A, REARING_VIEWPOINTS[0]),
            2 => (ObjectId::A, REARING_VIEWPOINTS[1]),
            3 => (ObjectId::B, REARING_VIEWPOINTS[0]),
            4 => (ObjectId::B, REARING_VIEWPOINTS[1]),
            _ => {
                return Err(SimError::Config(format!(
                    "condition {id} is not one of 1..=4"
                )))
            }
        };
        Ok(Self {
            id,
            object,
            viewpoint,
        })
    }
}
