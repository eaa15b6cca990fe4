//! Procedural inputs for tests and demos.

use crate::formats::depth::DepthInput;
use crate::prior::{DepthRaster, Intrinsics, PointLabel};

/// Axis-aligned box seen from above: a pixel rectangle and the depth of its top.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxFootprint {
    pub u: (usize, usize),
    pub v: (usize, usize),
    pub top_depth: f32,
}

pub const TWO_BOX_SIZE: usize = 128;
pub const TWO_BOX_GROUND: f32 = 10.0;
pub const TWO_BOXES: [BoxFootprint; 2] = [
    BoxFootprint {
        u: (16, 44),
        v: (20, 52),
        top_depth: 8.0,
    },
    BoxFootprint {
        u: (60, 96),
        v: (56, 100),
        top_depth: 6.5,
    },
];

/// Top-down depth of two cuboids standing on a ground plane.
///
/// The camera looks straight down from `TWO_BOX_GROUND` above the plane.
/// With `landmarks`, box `i` is labeled as landmark `i`.
pub fn two_box_town(landmarks: bool) -> DepthInput {
    let n = TWO_BOX_SIZE;
    let intrinsics = Intrinsics {
        fx: n as f64,
        fy: n as f64,
        cx: n as f64 / 2.0,
        cy: n as f64 / 2.0,
    };
    let mut depth = vec![TWO_BOX_GROUND; n * n];
    let mut labels = vec![PointLabel::Background; n * n];
    for (id, b) in TWO_BOXES.iter().enumerate() {
        for v in b.v.0..b.v.1 {
            for u in b.u.0..b.u.1 {
                depth[v * n + u] = b.top_depth;
                labels[v * n + u] = PointLabel::Foreground(id as u32);
            }
        }
    }
    let raster = DepthRaster::from_depth(n, n, depth, intrinsics).expect("fixture raster is valid");
    DepthInput {
        raster,
        labels: landmarks.then_some(labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_rise_above_ground() {
        let input = two_box_town(true);
        let d = input.raster.depth();
        assert_eq!(d[0], TWO_BOX_GROUND);
        assert_eq!(d[30 * TWO_BOX_SIZE + 20], 8.0);
        let labels = input.labels.unwrap();
        assert_eq!(labels[70 * TWO_BOX_SIZE + 70], PointLabel::Foreground(1));
        assert!(two_box_town(false).labels.is_none());
    }
}
