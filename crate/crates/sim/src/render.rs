//! Flat-shaded triangle rasterizer with a z-buffer and a fixed directional
//! light. No anti-aliasing; output bytes depend only on the inputs.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, MotionConfig};
use crate::chamber::{ChamberSpec, ObjectSpec, ViewpointRange, Wall};
use crate::error::{Result, SimError};
use crate::geometry::{vec3, Mat3, Vec3};

pub type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub fov_deg: f64,
    pub near: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            fov_deg: 60.0,
            near: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Material {
    Flat(Rgb),
    /// Wire-mesh floor: thin dark lines on a lighter base, in world x/y.
    Grid {
        base: Rgb,
        line: Rgb,
        spacing: f64,
        width: f64,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct Triangle {
    pub v: [Vec3; 3],
    pub material: Material,
}

const LIGHT_DIR: Vec3 = vec3(0.35, 0.25, 0.9);
const WALL_ALBEDO: Rgb = [0.93, 0.93, 0.9];
const BEZEL: Rgb = [0.08, 0.08, 0.09];
const SCREEN: Rgb = [1.0, 1.0, 1.0];
const OBJECT_ALBEDO: Rgb = [0.3, 0.32, 0.75];
/// Light direction for the displayed object, in display coordinates.
const OBJECT_LIGHT: Vec3 = vec3(-0.4, 0.6, 0.7);

fn lit(albedo: Rgb, normal: Vec3) -> Rgb {
    let k = 0.45 + 0.55 * normal.dot(LIGHT_DIR.normalized()).max(0.0) as f32;
    albedo.map(|c| c * k)
}

fn quad(out: &mut Vec<Triangle>, corners: [Vec3; 4], material: Material) {
    out.push(Triangle {
        v: [corners[0], corners[1], corners[2]],
        material,
    });
    out.push(Triangle {
        v: [corners[0], corners[2], corners[3]],
        material,
    });
}

/// Axis-aligned rectangle on a display wall, lifted `offset` into the room.
fn wall_rect(chamber: &ChamberSpec, wall: Wall, half_w: f64, bottom: f64, top: f64, offset: f64) -> [Vec3; 4] {
    let c = chamber.display_center(wall);
    let base = vec3(c.x, c.y, 0.0) + wall.inward() * offset;
    let r = wall.screen_right();
    [
        base + r * -half_w + vec3(0.0, 0.0, bottom),
        base + r * half_w + vec3(0.0, 0.0, bottom),
        base + r * half_w + vec3(0.0, 0.0, top),
        base + r * -half_w + vec3(0.0, 0.0, top),
    ]
}

/// Triangles of the empty chamber: floor, ceiling, walls and both displays.
pub fn chamber_scene(chamber: &ChamberSpec) -> Vec<Triangle> {
    let (l, w, h) = (chamber.length, chamber.width, chamber.height);
    let mut tris = Vec::new();
    let floor = if chamber.wire_mesh_floor {
        let k = lit([1.0; 3], vec3(0.0, 0.0, 1.0));
        Material::Grid {
            base: [0.62 * k[0], 0.6 * k[1], 0.56 * k[2]],
            line: [0.22 * k[0], 0.22 * k[1], 0.22 * k[2]],
            spacing: 3.0,
            width: 0.35,
        }
    } else {
        Material::Flat(lit([0.62, 0.6, 0.56], vec3(0.0, 0.0, 1.0)))
    };
    let p = |x, y, z| vec3(x, y, z);
    quad(&mut tris, [p(0., 0., 0.), p(l, 0., 0.), p(l, w, 0.), p(0., w, 0.)], floor);
    let surfaces = [
        ([p(0., 0., h), p(0., w, h), p(l, w, h), p(l, 0., h)], vec3(0.0, 0.0, -1.0)),
        ([p(0., 0., 0.), p(0., w, 0.), p(0., w, h), p(0., 0., h)], vec3(1.0, 0.0, 0.0)),
        ([p(l, 0., 0.), p(l, 0., h), p(l, w, h), p(l, w, 0.)], vec3(-1.0, 0.0, 0.0)),
        ([p(0., 0., 0.), p(0., 0., h), p(l, 0., h), p(l, 0., 0.)], vec3(0.0, 1.0, 0.0)),
        ([p(0., w, 0.), p(l, w, 0.), p(l, w, h), p(0., w, h)], vec3(0.0, -1.0, 0.0)),
    ];
    for (corners, normal) in surfaces {
        quad(&mut tris, corners, Material::Flat(lit(WALL_ALBEDO, normal)));
    }
    for wall in [Wall::Near, Wall::Far] {
        let half = chamber.screen_width / 2.0;
        let (bottom, top) = (chamber.screen_bottom, chamber.screen_bottom + chamber.screen_height);
        let b = chamber.bezel;
        quad(
            &mut tris,
            wall_rect(chamber, wall, half + b, (bottom - b).max(0.0), top + b, 0.02),
            Material::Flat(BEZEL),
        );
        quad(&mut tris, wall_rect(chamber, wall, half, bottom, top, 0.04), Material::Flat(SCREEN));
    }
    tris
}

/// The object as shown on a display: the rotated mesh is projected onto the
/// screen plane, scaled to fit the object box and centered on the screen.
/// Faces are shaded with their 3D normals; a tiny depth offset keeps the
/// object's own occlusion order for the z-buffer.
pub fn object_triangles(
    chamber: &ChamberSpec,
    object: &ObjectSpec,
    viewpoint: &ViewpointRange,
    phase_deg: f64,
    wall: Wall,
) -> Result<Vec<Triangle>> {
    let rot: Mat3 = viewpoint.rotation(phase_deg)?;
    let pts: Vec<Vec3> = object.vertices.iter().map(|&v| rot.apply(v)).collect();
    let (mut lo, mut hi) = (vec3(f64::MAX, f64::MAX, f64::MAX), vec3(f64::MIN, f64::MIN, f64::MIN));
    for p in &pts {
        lo = vec3(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = vec3(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let scale = (chamber.object_width / (hi.x - lo.x)).min(chamber.object_height / (hi.y - lo.y));
    let (cu, cv) = ((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0);
    let center = chamber.display_center(wall);
    let (right, inward) = (wall.screen_right(), wall.inward());
    let up = vec3(0.0, 0.0, 1.0);
    let place = |p: Vec3| {
        center
            + right * (scale * (p.x - cu))
            + up * (scale * (p.y - cv))
            + inward * (0.06 + 0.005 * scale * (p.z - lo.z))
    };
    let light = OBJECT_LIGHT.normalized();
    let mut tris = Vec::with_capacity(object.triangles.len());
    for t in &object.triangles {
        let [a, b, c] = t.map(|i| pts[i]);
        let n = (b - a).cross(c - a).normalized();
        if n.z <= 0.0 {
            continue;
        }
        let k = 0.25 + 0.75 * n.dot(light).max(0.0) as f32;
        tris.push(Triangle {
            v: [place(a), place(b), place(c)],
            material: Material::Flat(OBJECT_ALBEDO.map(|x| x * k)),
        });
    }
    Ok(tris)
}

/// Pinhole camera at the agent's eye.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub eye: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    pub fn from_pose(pose: &AgentState, motion: &MotionConfig, render: &RenderConfig, resolution: usize) -> Self {
        let yaw = (pose.heading_deg + pose.head_yaw_deg).to_radians();
        let pitch = (pose.gaze_pitch_deg + pose.head_tilt_deg).to_radians();
        let roll = pose.head_roll_deg.to_radians();
        let r = Mat3::axis_angle(vec3(0.0, 0.0, 1.0), yaw)
            .mul(&Mat3::axis_angle(vec3(0.0, 1.0, 0.0), -pitch))
            .mul(&Mat3::axis_angle(vec3(1.0, 0.0, 0.0), roll));
        Self {
            eye: pose.eye(motion),
            forward: r.column(0),
            right: -r.column(1),
            up: r.column(2),
            focal_px: resolution as f64 / 2.0 / (render.fov_deg.to_radians() / 2.0).tan(),
            width: resolution,
            height: resolution,
            near: render.near,
        }
    }

    fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = p - self.eye;
        vec3(d.dot(self.right), d.dot(self.up), d.dot(self.forward))
    }

    /// Pixel coordinates of a camera-space point in front of the camera.
    pub fn project(&self, c: Vec3) -> (f64, f64) {
        (
            self.width as f64 / 2.0 + self.focal_px * c.x / c.z,
            self.height as f64 / 2.0 - self.focal_px * c.y / c.z,
        )
    }
}

#[derive(Clone, Copy)]
struct ClipVert {
    cam: Vec3,
    world: Vec3,
}

fn clip_near(poly: &[ClipVert], near: f64) -> Vec<ClipVert> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.cam.z >= near, b.cam.z >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (near - a.cam.z) / (b.cam.z - a.cam.z);
            out.push(ClipVert {
                cam: a.cam.lerp(b.cam, t),
                world: a.world.lerp(b.world, t),
            });
        }
    }
    out
}

/// Color and inverse-depth buffers for one frame.
pub struct Raster {
    width: usize,
    height: usize,
    color: Vec<Rgb>,
    inv_depth: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, clear: Rgb) -> Self {
        Self {
            width,
            height,
            color: vec![clear; width * height],
            inv_depth: vec![0.0; width * height],
        }
    }

    pub fn draw(&mut self, cam: &Camera, tri: &Triangle) {
        let poly: Vec<ClipVert> = tri
            .v
            .iter()
            .map(|&w| ClipVert {
                cam: cam.to_camera(w),
                world: w,
            })
            .collect();
        let clipped = clip_near(&poly, cam.near);
        for k in 1..clipped.len().saturating_sub(1) {
            self.fill(cam, [clipped[0], clipped[k], clipped[k + 1]], &tri.material);
        }
    }

    fn fill(&mut self, cam: &Camera, v: [ClipVert; 3], material: &Material) {
        let s = v.map(|c| cam.project(c.cam));
        let iz = v.map(|c| 1.0 / c.cam.z);
        let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let area = edge(s[0], s[1], s[2]);
        if area.abs() < 1e-12 || !area.is_finite() {
            return;
        }
        let min_x = s.iter().map(|p| p.0).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let max_x = s.iter().map(|p| p.0).fold(f64::MIN, f64::max).ceil().min(self.width as f64) as usize;
        let min_y = s.iter().map(|p| p.1).fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let max_y = s.iter().map(|p| p.1).fold(f64::MIN, f64::max).ceil().min(self.height as f64) as usize;
        for py in min_y..max_y {
            for px in min_x..max_x {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let l0 = edge(s[1], s[2], p) / area;
                let l1 = edge(s[2], s[0], p) / area;
                let l2 = edge(s[0], s[1], p) / area;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let z = l0 * iz[0] + l1 * iz[1] + l2 * iz[2];
                let idx = py * self.width + px;
                if z <= self.inv_depth[idx] {
                    continue;
                }
                self.inv_depth[idx] = z;
                self.color[idx] = match *material {
                    Material::Flat(c) => c,
                    Material::Grid {
                        base,
                        line,
                        spacing,
                        width,
                    } => {
                        let w = (v[0].world * (l0 * iz[0]) + v[1].world * (l1 * iz[1]) + v[2].world * (l2 * iz[2])) * (1.0 / z);
                        let on = |t: f64| (t / spacing).rem_euclid(1.0) * spacing < width;
                        if on(w.x) || on(w.y) {
                            line
                        } else {
                            base
                        }
                    }
                };
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.color
            .iter()
            .flat_map(|c| c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
            .collect()
    }
}

/// What the active display shows.
#[derive(Clone, Copy, Debug)]
pub struct DisplayedObject<'a> {
    pub object: &'a ObjectSpec,
    pub viewpoint: &'a ViewpointRange,
    pub phase_deg: f64,
}

/// Renders chamber frames; the static chamber geometry is built once.
pub struct Renderer {
    chamber: ChamberSpec,
    motion: MotionConfig,
    config: RenderConfig,
    scene: Vec<Triangle>,
}

impl Renderer {
    pub fn new(chamber: &ChamberSpec, motion: &MotionConfig, config: &RenderConfig) -> Result<Self> {
        chamber.validate()?;
        motion.validate(chamber)?;
        if !(config.fov_deg > 1.0 && config.fov_deg < 179.0) || !(config.near > 0.0) {
            return Err(SimError::Config("invalid camera parameters".into()));
        }
        Ok(Self {
            chamber: chamber.clone(),
            motion: motion.clone(),
            config: config.clone(),
            scene: chamber_scene(chamber),
        })
    }

    pub fn camera(&self, pose: &AgentState, resolution: usize) -> Camera {
        Camera::from_pose(pose, &self.motion, &self.config, resolution)
    }

    /// RGB bytes (row-major, `resolution × resolution × 3`) seen from `pose`.
    pub fn render(
        &self,
        pose: &AgentState,
        wall: Wall,
        shown: Option<DisplayedObject<'_>>,
        resolution: usize,
    ) -> Result<Vec<u8>> {
        if resolution == 0 {
            return Err(SimError::Config("resolution must be positive".into()));
        }
        let cam = self.camera(pose, resolution);
        let mut raster = Raster::new(resolution, resolution, [0.0; 3]);
        for tri in &self.scene {
            raster.draw(&cam, tri);
        }
        if let Some(s) = shown {
            for tri in object_triangles(&self.chamber, s.object, s.viewpoint, s.phase_deg, wall)? {
                raster.draw(&cam, &tri);
            }
        }
        Ok(raster.to_bytes())
    }
}
