//! Colored point clouds: bounding-box crop and farthest point sampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("crop box is inverted: min {min:?} > max {max:?}")]
    InvertedBox { min: Vec3, max: Vec3 },
    #[error("point cloud is empty")]
    Empty,
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("start index {index} out of range for {len} points")]
    StartOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColoredPoint {
    pub position: Vec3,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
}

impl ColoredPoint {
    pub fn new(position: Vec3, color: [f64; 3]) -> Self {
        Self { position, color: color.map(|c| c.clamp(0.0, 1.0)) }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColoredPointCloud {
    pub points: Vec<ColoredPoint>,
}

impl ColoredPointCloud {
    pub fn new(points: Vec<ColoredPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> ColoredPointCloud {
        ColoredPointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Axis-aligned box, closed on every face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
}

impl CropBox {
    pub fn new(min_corner: Vec3, max_corner: Vec3) -> Result<Self, CloudError> {
        let b = Self { min_corner, max_corner };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        let (a, b) = (self.min_corner, self.max_corner);
        if a.x > b.x || a.y > b.y || a.z > b.z || !a.is_finite() || !b.is_finite() {
            return Err(CloudError::InvertedBox { min: a, max: b });
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (a, b) = (self.min_corner, self.max_corner);
        p.x >= a.x && p.x <= b.x && p.y >= a.y && p.y <= b.y && p.z >= a.z && p.z <= b.z
    }

    pub fn center(&self) -> Vec3 {
        (self.min_corner + self.max_corner) * 0.5
    }

    pub fn half_extent(&self) -> Vec3 {
        (self.max_corner - self.min_corner) * 0.5
    }
}

/// Keep the points inside `crop_box`, in their original order.
pub fn crop(cloud: &ColoredPointCloud, crop_box: &CropBox) -> Result<ColoredPointCloud, CloudError> {
    crop_box.validate()?;
    Ok(ColoredPointCloud::new(
        cloud.points.iter().filter(|p| crop_box.contains(p.position)).copied().collect(),
    ))
}

/// Greedy farthest point sampling on positions. Returns selected indices in
/// selection order. Ties go to the lowest index.
pub fn farthest_point_indices(
    cloud: &ColoredPointCloud,
    n: usize,
    start_index: usize,
) -> Result<Vec<usize>, CloudError> {
    let len = cloud.len();
    if len == 0 {
        return Err(CloudError::Empty);
    }
    if n == 0 {
        return Err(CloudError::ZeroSamples);
    }
    if start_index >= len {
        return Err(CloudError::StartOutOfRange { index: start_index, len });
    }
    if len <= n {
        return Ok((0..len).collect());
    }

    let pos: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.position.to_array()).collect();
    // selected points carry -1 so they are never chosen again
    let mut min_dist = vec![f64::INFINITY; len];
    let mut selected = Vec::with_capacity(n);
    let mut current = start_index;
    for _ in 0..n {
        selected.push(current);
        min_dist[current] = -1.0;
        let c = pos[current];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, p) in pos.iter().enumerate() {
            let md = min_dist[i];
            if md < 0.0 {
                continue;
            }
            let (dx, dy, dz) = (p[0] - c[0], p[1] - c[1], p[2] - c[2]);
            let d = dx * dx + dy * dy + dz * dz;
            let md = if d < md { d } else { md };
            min_dist[i] = md;
            if md > best_d {
                best_d = md;
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

pub fn farthest_point_sample(
    cloud: &ColoredPointCloud,
    n: usize,
    start_index: usize,
) -> Result<ColoredPointCloud, CloudError> {
    let idx = farthest_point_indices(cloud, n, start_index)?;
    Ok(cloud.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pt(x: f64, y: f64, z: f64) -> ColoredPoint {
        ColoredPoint::new(Vec3::new(x, y, z), [0.5, 0.5, 0.5])
    }

    fn unit_box() -> CropBox {
        CropBox::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn crop_examples() {
        let inside = ColoredPointCloud::new(vec![pt(0.1, 0.2, 0.3), pt(0.9, 0.9, 0.9)]);
        assert_eq!(crop(&inside, &unit_box()).unwrap(), inside);

        let face = ColoredPointCloud::new(vec![pt(1.0, 0.5, 0.0)]);
        assert_eq!(crop(&face, &unit_box()).unwrap().len(), 1);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mixed = ColoredPointCloud::new(
            (0..100)
                .map(|_| pt(rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5)))
                .collect(),
        );
        let expected: Vec<ColoredPoint> = mixed
            .points
            .iter()
            .filter(|p| {
                let q = p.position;
                (0.0..=1.0).contains(&q.x) && (0.0..=1.0).contains(&q.y) && (0.0..=1.0).contains(&q.z)
            })
            .copied()
            .collect();
        assert_eq!(crop(&mixed, &unit_box()).unwrap().points, expected);
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(CropBox::new(Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO).is_err());
        let bad = CropBox { min_corner: Vec3::new(0.0, 2.0, 0.0), max_corner: Vec3::new(1.0, 1.0, 1.0) };
        assert!(matches!(crop(&ColoredPointCloud::default(), &bad), Err(CloudError::InvertedBox { .. })));
    }

    #[test]
    fn fps_small_cloud_passes_through() {
        let cloud = ColoredPointCloud::new((0..10).map(|i| pt(i as f64, 0.0, 0.0)).collect());
        assert_eq!(farthest_point_sample(&cloud, 16, 0).unwrap(), cloud);
    }

    #[test]
    fn fps_line_example() {
        let cloud = ColoredPointCloud::new((0..5).map(|i| pt(i as f64, 0.0, 0.0)).collect());
        let idx = farthest_point_indices(&cloud, 3, 0).unwrap();
        assert_eq!(idx, vec![0, 4, 2]);
    }

    #[test]
    fn fps_errors() {
        let empty = ColoredPointCloud::default();
        assert_eq!(farthest_point_indices(&empty, 3, 0), Err(CloudError::Empty));
        let cloud = ColoredPointCloud::new(vec![pt(0.0, 0.0, 0.0)]);
        assert_eq!(farthest_point_indices(&cloud, 0, 0), Err(CloudError::ZeroSamples));
        assert!(matches!(farthest_point_indices(&cloud, 1, 5), Err(CloudError::StartOutOfRange { .. })));
    }

    #[test]
    fn fps_duplicates_never_reselected() {
        let cloud = ColoredPointCloud::new(vec![pt(0.0, 0.0, 0.0); 8]);
        let idx = farthest_point_indices(&cloud, 4, 0).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_large_cloud_budget() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cloud = ColoredPointCloud::new(
            (0..10_000).map(|_| pt(rng.random(), rng.random(), rng.random())).collect(),
        );
        let idx = farthest_point_indices(&cloud, 2048, 0).unwrap();
        assert_eq!(idx.len(), 2048);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 2048);
    }

    proptest! {
        #[test]
        fn crop_is_idempotent(pts in prop::collection::vec((-1.0..2.0f64, -1.0..2.0f64, -1.0..2.0f64), 0..64)) {
            let cloud = ColoredPointCloud::new(pts.iter().map(|&(x, y, z)| pt(x, y, z)).collect());
            let once = crop(&cloud, &unit_box()).unwrap();
            prop_assert_eq!(crop(&once, &unit_box()).unwrap(), once);
        }

        #[test]
        fn fps_is_deterministic_subset(
            pts in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..64),
            n in 1usize..40,
        ) {
            let cloud = ColoredPointCloud::new(pts.iter().map(|&(x, y, z)| pt(x, y, z)).collect());
            let a = farthest_point_indices(&cloud, n, 0).unwrap();
            let b = farthest_point_indices(&cloud, n, 0).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), n.min(cloud.len()));
            let mut s = a.clone();
            s.sort_unstable();
            s.dedup();
            prop_assert_eq!(s.len(), a.len());
        }
    }
}
