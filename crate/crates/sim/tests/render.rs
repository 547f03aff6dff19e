use digitwin_sim::geometry::{vec3, Vec3};
use digitwin_sim::render::object_triangles;
use digitwin_sim::*;

const RES: usize = 64;

fn centered_pose(c: &ChamberSpec, m: &MotionConfig, wall: Wall) -> AgentState {
    AgentState::facing(c, m, wall, c.length / 2.0, c.width / 2.0)
}

/// Look-at pinhole camera built from scratch: forward toward `target`,
/// right = forward × world-up, 60° field of view.
fn oracle_project(eye: Vec3, target: Vec3, p: Vec3, res: usize) -> (f64, f64) {
    let f = (target - eye).normalized();
    let r = f.cross(vec3(0.0, 0.0, 1.0)).normalized();
    let u = r.cross(f);
    let d = p - eye;
    let (x, y, z) = (d.dot(r), d.dot(u), d.dot(f));
    let focal = res as f64 / 2.0 / (30f64).to_radians().tan();
    (res as f64 / 2.0 + focal * x / z, res as f64 / 2.0 - focal * y / z)
}

fn changed_bbox(a: &[u8], b: &[u8], res: usize) -> Option<(f64, f64)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..res {
        for x in 0..res {
            let i = (y * res + x) * 3;
            if a[i..i + 3] != b[i..i + 3] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| ((x0 + x1 + 1) as f64 / 2.0, (y0 + y1 + 1) as f64 / 2.0))
}

#[test]
fn object_bbox_center_matches_pinhole_oracle() {
    let (c, m, rc) = (ChamberSpec::default(), MotionConfig::default(), RenderConfig::default());
    let renderer = Renderer::new(&c, &m, &rc).unwrap();
    for wall in [Wall::Near, Wall::Far] {
        for id in ObjectId::ALL {
            for v in [0u8, 5, 10] {
                let pose = centered_pose(&c, &m, wall);
                let object = ObjectSpec::new(id);
                let vp = ViewpointRange::new(v).unwrap();
                let shown = DisplayedObject {
                    object: &object,
                    viewpoint: &vp,
                    phase_deg: 30.0,
                };
                let with = renderer.render(&pose, wall, Some(shown), RES).unwrap();
                let without = renderer.render(&pose, wall, None, RES).unwrap();
                let (cx, cy) = changed_bbox(&with, &without, RES).expect("object visible");

                let eye = vec3(pose.x, pose.y, m.agent_height);
                let target = c.display_center(wall);
                let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
                for t in object_triangles(&c, &object, &vp, 30.0, wall).unwrap() {
                    for p in t.v {
                        let (u, w) = oracle_project(eye, target, p, RES);
                        lo = (lo.0.min(u), lo.1.min(w));
                        hi = (hi.0.max(u), hi.1.max(w));
                    }
                }
                let (ox, oy) = ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0);
                let half = RES as f64 / 2.0;
                assert!((ox - half).abs() <= 2.0 && (oy - half).abs() <= 2.0, "oracle ({ox},{oy})");
                assert!((cx - half).abs() <= 2.0 && (cy - half).abs() <= 2.0, "render ({cx},{cy})");
                assert!((cx - ox).abs() <= 2.0 && (cy - oy).abs() <= 2.0);
            }
        }
    }
}

#[test]
fn blank_display_equals_background_render() {
    let (c, m) = (ChamberSpec::default(), MotionConfig::default());
    let renderer = Renderer::new(&c, &m, &RenderConfig::default()).unwrap();
    let cfg = DatasetConfig {
        episode_frames: 100,
        ..Default::default()
    };
    let blank = generate_blank(3, 150, 21, &cfg).unwrap();
    for f in blank.iter().step_by(17) {
        assert!(f.meta.object.is_none());
        let bg = renderer.render(&f.meta.pose, f.meta.wall, None, cfg.resolution).unwrap();
        assert_eq!(f.pixels, bg);
    }
    // Same poses as the rearing data, and the object is what differs.
    let reared = generate_dataset(3, 150, 21, &cfg).unwrap();
    let mut differing = 0;
    for (a, b) in blank.iter().zip(&reared.frames) {
        assert_eq!(a.meta.pose, b.meta.pose);
        differing += (a.pixels != b.pixels) as usize;
    }
    assert!(differing > 0);
}

#[test]
fn rendering_is_byte_identical() {
    let (c, m) = (ChamberSpec::default(), MotionConfig::default());
    let renderer = Renderer::new(&c, &m, &RenderConfig::default()).unwrap();
    let object = ObjectSpec::new(ObjectId::B);
    let vp = ViewpointRange::new(3).unwrap();
    let pose = AgentState {
        head_roll_deg: 17.0,
        head_yaw_deg: -40.0,
        ..centered_pose(&c, &m, Wall::Far)
    };
    let shown = DisplayedObject {
        object: &object,
        viewpoint: &vp,
        phase_deg: 12.5,
    };
    let a = renderer.render(&pose, Wall::Far, Some(shown), 224).unwrap();
    let b = renderer.render(&pose, Wall::Far, Some(shown), 224).unwrap();
    assert_eq!(a.len(), 224 * 224 * 3);
    assert_eq!(a, b);
}

#[test]
fn phase_outside_span_is_rejected() {
    let (c, m) = (ChamberSpec::default(), MotionConfig::default());
    let renderer = Renderer::new(&c, &m, &RenderConfig::default()).unwrap();
    let object = ObjectSpec::new(ObjectId::A);
    let vp = ViewpointRange::new(0).unwrap();
    let shown = DisplayedObject {
        object: &object,
        viewpoint: &vp,
        phase_deg: 61.0,
    };
    let pose = centered_pose(&c, &m, Wall::Near);
    assert!(renderer.render(&pose, Wall::Near, Some(shown), RES).is_err());
}

#[test]
fn within_object_view_changes_exceed_between_object_distance() {
    let report = pixel_distance_audit(
        &ChamberSpec::default(),
        &MotionConfig::default(),
        &RenderConfig::default(),
        RES,
        3,
    )
    .unwrap();
    assert_eq!(report.images_per_object, 36);
    assert!(report.views_exceed_identity(), "{report:?}");
}
