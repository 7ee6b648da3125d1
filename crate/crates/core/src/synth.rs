//! Seeded synthetic room scene used for datasets and obfuscation checks.
//!
//! The room spans x in [0, 5], y in [0, 4], z in [0, 3]: a floor, four
//! walls, a table, a moving ball and a pillar. Points are emitted in random
//! order so that strided patterns pick a spatially uniform subset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::ply::{PointCloud, Vertex, VertexSchema};

pub const ROOM: [f64; 3] = [5.0, 4.0, 3.0];

#[derive(Debug, Clone, Copy)]
enum Surface {
    /// Axis-aligned rectangle: fixed axis, its value, and the two free
    /// ranges in increasing axis order.
    Rect { axis: usize, at: f64, lo: [f64; 2], hi: [f64; 2], color: [u8; 3] },
    Sphere { center: [f64; 3], radius: f64, color: [u8; 3] },
    /// Vertical cylinder side.
    Cylinder { base: [f64; 3], radius: f64, height: f64, color: [u8; 3] },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Rect { lo, hi, .. } => (hi[0] - lo[0]) * (hi[1] - lo[1]),
            Surface::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Surface::Cylinder { radius, height, .. } => 2.0 * std::f64::consts::PI * radius * height,
        }
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> Vertex {
        match *self {
            Surface::Rect { axis, at, lo, hi, color } => {
                let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
                let mut position = [0.0; 3];
                position[axis] = at;
                for (k, &a) in free.iter().enumerate() {
                    position[a] = rng.gen_range(lo[k]..=hi[k]);
                }
                let mut normal = [0.0; 3];
                normal[axis] = if at > 0.0 { -1.0 } else { 1.0 };
                Vertex { position, normal, color }
            }
            Surface::Sphere { center, radius, color } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                let normal = [r * phi.cos(), r * phi.sin(), z];
                let position = std::array::from_fn(|a| center[a] + radius * normal[a]);
                Vertex { position, normal, color }
            }
            Surface::Cylinder { base, radius, height, color } => {
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let h: f64 = rng.gen_range(0.0..=height);
                let normal = [phi.cos(), phi.sin(), 0.0];
                let position = [base[0] + radius * normal[0], base[1] + radius * normal[1], base[2] + h];
                Vertex { position, normal, color }
            }
        }
    }
}

fn surfaces(frame: usize) -> Vec<Surface> {
    let [w, d, h] = ROOM;
    let t = frame as f64 / 24.0;
    let ball_z = 0.4 + 1.2 * (t * std::f64::consts::PI).sin().abs();
    vec![
        Surface::Rect { axis: 2, at: 0.0, lo: [0.0, 0.0], hi: [w, d], color: [120, 100, 80] },
        Surface::Rect { axis: 0, at: 0.0, lo: [0.0, 0.0], hi: [d, h], color: [200, 200, 190] },
        Surface::Rect { axis: 0, at: w, lo: [0.0, 0.0], hi: [d, h], color: [190, 200, 200] },
        Surface::Rect { axis: 1, at: 0.0, lo: [0.0, 0.0], hi: [w, h], color: [210, 190, 190] },
        Surface::Rect { axis: 1, at: d, lo: [0.0, 0.0], hi: [w, h], color: [190, 210, 190] },
        Surface::Rect { axis: 2, at: 0.75, lo: [1.5, 1.0], hi: [3.0, 2.0], color: [90, 60, 30] },
        Surface::Sphere { center: [3.8, 2.8, ball_z], radius: 0.35, color: [220, 40, 40] },
        Surface::Cylinder { base: [1.0, 3.2, 0.0], radius: 0.25, height: 2.2, color: [60, 60, 200] },
    ]
}

/// One frame of the scene with `points` vertices, normals and colors.
pub fn room_scene(points: usize, frame: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    let surfaces = surfaces(frame);
    let total: f64 = surfaces.iter().map(Surface::area).sum();

    // split the budget by area, handing rounding leftovers to the largest
    let mut counts: Vec<usize> = surfaces
        .iter()
        .map(|s| (points as f64 * s.area() / total).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    counts[0] += points - assigned;

    let mut vertices = Vec::with_capacity(points);
    for (s, &n) in surfaces.iter().zip(&counts) {
        vertices.extend((0..n).map(|_| s.sample(&mut rng)));
    }
    vertices.shuffle(&mut rng);
    PointCloud::new(VertexSchema::canonical(true, true), vertices)
}
