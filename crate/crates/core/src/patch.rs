//! Patch grid, windowed block matching, group assembly and aggregation.
//!
//! Patches are square and addressed by their top-left pixel. A group is a
//! `patch_side^2 x k` matrix whose columns are row-major vectorized patches.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::Image;

/// Top-left corner of a patch. Ordering is `(row, col)` lexicographic,
/// which is also the block-matching tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub patch_side: usize,
    /// Step between reference patches.
    pub stride: usize,
    /// Side of the square search window, in candidate positions.
    pub window_side: usize,
    /// Patches per group (upper bound, see [`block_match`]).
    pub k: usize,
}

impl PatchGeometry {
    pub fn new(patch_side: usize, stride: usize, window_side: usize, k: usize) -> Result<Self> {
        let g = Self {
            patch_side,
            stride,
            window_side,
            k,
        };
        g.validate()?;
        Ok(g)
    }

    /// Stride 4 for patches up to 8 pixels, 5 above.
    pub fn default_stride(patch_side: usize) -> usize {
        if patch_side <= 8 {
            4
        } else {
            5
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 {
            return Err(Error::InvalidParameter("patch_side must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        if self.window_side < self.patch_side {
            return Err(Error::InvalidParameter(format!(
                "window_side {} smaller than patch_side {}",
                self.window_side, self.patch_side
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        Ok(())
    }

    /// Fails if one patch does not fit in a `width` x `height` image.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        if self.patch_side > width.min(height) {
            return Err(Error::Geometry(format!(
                "patch side {} does not fit in {width}x{height} image",
                self.patch_side
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }
}

/// Members of one group, best match first. `members[0]` is the reference
/// and `distances[0]` is zero; distances are non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    pub reference: Position,
    pub patch_side: usize,
    pub members: Vec<Position>,
    pub distances: Vec<f64>,
}

impl GroupIndex {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Vectorized patches, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub patch_side: usize,
    pub matrix: DMatrix<f64>,
}

impl PatchGroup {
    pub fn new(patch_side: usize, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != patch_side * patch_side || matrix.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "group matrix {}x{} does not hold {patch_side}x{patch_side} patches",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { patch_side, matrix })
    }

    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }
}

fn axis_positions(extent: usize, patch_side: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch_side;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("at least position 0") != last {
        out.push(last);
    }
    out
}

/// Reference patch positions on a `stride` grid; the final row and column
/// are pulled back so patches reach the image border. The step never exceeds
/// `patch_side`, so every pixel is covered by at least one reference patch.
pub fn reference_positions(
    width: usize,
    height: usize,
    geometry: &PatchGeometry,
) -> Result<Vec<Position>> {
    geometry.validate_for(width, height)?;
    let step = geometry.stride.min(geometry.patch_side);
    let rows = axis_positions(height, geometry.patch_side, step);
    let cols = axis_positions(width, geometry.patch_side, step);
    Ok(rows
        .iter()
        .flat_map(|&row| cols.iter().map(move |&col| Position::new(row, col)))
        .collect())
}

/// Inclusive candidate range on one axis: `window` positions starting
/// `window / 2` before the reference, shifted (not truncated) to stay inside
/// `[0, last]`.
pub(crate) fn window_range(reference: usize, last: usize, window: usize) -> (usize, usize) {
    let mut start = reference.saturating_sub(window / 2);
    let mut end = start + window - 1;
    if end > last {
        end = last;
        start = last.saturating_sub(window - 1);
    }
    (start, end)
}

#[inline]
fn patch_distance(image: &Image, a: Position, b: Position, side: usize, bound: f64) -> f64 {
    let mut sum = 0.0;
    for dr in 0..side {
        let pa = image.row_segment(a.row + dr, a.col, side);
        let pb = image.row_segment(b.row + dr, b.col, side);
        sum += pa
            .iter()
            .zip(pb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        if sum > bound {
            return f64::INFINITY;
        }
    }
    sum
}

/// kNN search around `reference` by squared Euclidean patch distance.
///
/// The reference always comes first. Remaining members are ordered by
/// `(distance, row, col)`. When the window holds fewer than `k` positions
/// the group is simply smaller.
///
/// Panics if `reference` does not hold a full patch.
pub fn block_match(image: &Image, reference: Position, geometry: &PatchGeometry) -> GroupIndex {
    let side = geometry.patch_side;
    let last_row = image.height() - side;
    let last_col = image.width() - side;
    assert!(
        reference.row <= last_row && reference.col <= last_col,
        "reference {reference:?} outside valid patch area"
    );
    let (r0, r1) = window_range(reference.row, last_row, geometry.window_side);
    let (c0, c1) = window_range(reference.col, last_col, geometry.window_side);

    let wanted = geometry.k - 1;
    // Max-ordered list of the best `wanted` candidates; entries beyond the
    // current worst are pruned early.
    let mut best: Vec<(f64, Position)> = Vec::with_capacity(wanted + 1);
    let key_less = |a: &(f64, Position), b: &(f64, Position)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).is_lt()
    };
    for row in r0..=r1 {
        for col in c0..=c1 {
            let pos = Position::new(row, col);
            if pos == reference || wanted == 0 {
                continue;
            }
            let bound = if best.len() == wanted {
                best[wanted - 1].0
            } else {
                f64::INFINITY
            };
            let d = patch_distance(image, reference, pos, side, bound);
            if d.is_infinite() && bound.is_finite() {
                continue;
            }
            let cand = (d, pos);
            if best.len() == wanted {
                if !key_less(&cand, &best[wanted - 1]) {
                    continue;
                }
                best.pop();
            }
            let at = best.partition_point(|e| key_less(e, &cand));
            best.insert(at, cand);
        }
    }

    let mut members = Vec::with_capacity(best.len() + 1);
    let mut distances = Vec::with_capacity(best.len() + 1);
    members.push(reference);
    distances.push(0.0);
    for (d, p) in best {
        members.push(p);
        distances.push(d);
    }
    GroupIndex {
        reference,
        patch_side: side,
        members,
        distances,
    }
}

/// Stacks the patches listed in `index` as columns.
pub fn gather_group(image: &Image, index: &GroupIndex) -> Result<PatchGroup> {
    let patch_side = index.patch_side;
    if index.is_empty() {
        return Err(Error::Geometry("empty group index".into()));
    }
    let rows = patch_side * patch_side;
    let mut data = Vec::with_capacity(rows * index.len());
    for pos in &index.members {
        if pos.row + patch_side > image.height() || pos.col + patch_side > image.width() {
            return Err(Error::Geometry(format!(
                "patch at ({}, {}) exceeds {}x{} image",
                pos.row,
                pos.col,
                image.width(),
                image.height()
            )));
        }
        for dr in 0..patch_side {
            data.extend_from_slice(image.row_segment(pos.row + dr, pos.col, patch_side));
        }
    }
    PatchGroup::new(patch_side, DMatrix::from_vec(rows, index.len(), data))
}

/// Uniform-weight overlap averaging of patch estimates.
///
/// Contributions are summed in the order they are added, so feeding groups
/// in a fixed order gives bit-identical results.
#[derive(Debug, Clone)]
pub struct Aggregator {
    width: usize,
    height: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Aggregator {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            sum: vec![0.0; width * height],
            count: vec![0; width * height],
        }
    }

    pub fn add(&mut self, group: &PatchGroup, index: &GroupIndex) -> Result<()> {
        let side = group.patch_side;
        if side != index.patch_side {
            return Err(Error::DimensionMismatch(format!(
                "group patch side {side} vs index patch side {}",
                index.patch_side
            )));
        }
        if group.k() != index.len() {
            return Err(Error::DimensionMismatch(format!(
                "group has {} columns but index lists {} members",
                group.k(),
                index.len()
            )));
        }
        for (j, pos) in index.members.iter().enumerate() {
            if pos.row + side > self.height || pos.col + side > self.width {
                return Err(Error::Geometry(format!(
                    "patch at ({}, {}) exceeds {}x{} image",
                    pos.row, pos.col, self.width, self.height
                )));
            }
            let column = group.matrix.column(j);
            for dr in 0..side {
                let base = (pos.row + dr) * self.width + pos.col;
                for dc in 0..side {
                    self.sum[base + dc] += column[dr * side + dc];
                    self.count[base + dc] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Image> {
        if let Some(i) = self.count.iter().position(|&c| c == 0) {
            return Err(Error::Geometry(format!(
                "pixel ({}, {}) not covered by any patch",
                i / self.width,
                i % self.width
            )));
        }
        let data = self
            .sum
            .iter()
            .zip(&self.count)
            .map(|(s, &c)| s / f64::from(c))
            .collect();
        Image::new(self.width, self.height, data)
    }
}

pub fn aggregate_groups(
    groups: &[PatchGroup],
    indices: &[GroupIndex],
    width: usize,
    height: usize,
) -> Result<Image> {
    if groups.len() != indices.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} groups but {} indices",
            groups.len(),
            indices.len()
        )));
    }
    let mut agg = Aggregator::new(width, height);
    for (g, idx) in groups.iter().zip(indices) {
        agg.add(g, idx)?;
    }
    agg.finish()
}
