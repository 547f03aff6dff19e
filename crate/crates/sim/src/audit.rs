//! Pixel-distance audit of the two object meshes: are within-object view
//! changes larger than the smallest between-object difference?

use crate::agent::{AgentState, MotionConfig};
use crate::chamber::{ChamberSpec, ObjectId, ObjectSpec, ViewpointRange, Wall};
use crate::error::Result;
use crate::render::{DisplayedObject, RenderConfig, Renderer};

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub images_per_object: usize,
    pub max_within: f64,
    pub mean_within: f64,
    pub min_between: f64,
    pub mean_between: f64,
}

impl AuditReport {
    /// Some pair of views of one object is farther apart than some A/B pair.
    pub fn views_exceed_identity(&self) -> bool {
        self.max_within > self.min_between
    }
}

fn l2(a: &[u8], b: &[u8]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Renders each object from a fixed neutral pose (centred in the chamber,
/// facing the near display) at `phases_per_range` evenly spaced phases of
/// every viewpoint range, then compares the images pairwise.
pub fn pixel_distance_audit(
    chamber: &ChamberSpec,
    motion: &MotionConfig,
    render: &RenderConfig,
    resolution: usize,
    phases_per_range: usize,
) -> Result<AuditReport> {
    let renderer = Renderer::new(chamber, motion, render)?;
    let wall = Wall::Near;
    let pose = AgentState::facing(chamber, motion, wall, chamber.length / 2.0, chamber.width / 2.0);
    let ranges = ViewpointRange::all();
    let steps = phases_per_range.max(1);
    let mut images: Vec<Vec<Vec<u8>>> = Vec::new();
    for id in ObjectId::ALL {
        let object = ObjectSpec::new(id);
        let mut views = Vec::new();
        for vp in &ranges {
            for k in 0..steps {
                let phase = if steps == 1 {
                    0.0
                } else {
                    vp.span_deg * k as f64 / (steps - 1) as f64
                };
                let shown = DisplayedObject {
                    object: &object,
                    viewpoint: vp,
                    phase_deg: phase,
                };
                views.push(renderer.render(&pose, wall, Some(shown), resolution)?);
            }
        }
        images.push(views);
    }

    let (mut max_within, mut sum_within, mut n_within) = (0.0f64, 0.0, 0usize);
    for views in &images {
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                let d = l2(&views[i], &views[j]);
                max_within = max_within.max(d);
                sum_within += d;
                n_within += 1;
            }
        }
    }
    let (mut min_between, mut sum_between, mut n_between) = (f64::INFINITY, 0.0, 0usize);
    for a in &images[0] {
        for b in &images[1] {
            let d = l2(a, b);
            min_between = min_between.min(d);
            sum_between += d;
            n_between += 1;
        }
    }
    Ok(AuditReport {
        images_per_object: images[0].len(),
        max_within,
        mean_within: sum_within / n_within.max(1) as f64,
        min_between,
        mean_between: sum_between / n_between.max(1) as f64,
    })
}
