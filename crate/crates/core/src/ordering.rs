//! Image-specific generation orders and the locally masked convolution
//! stencils that enforce them.
//!
//! An order grows outward from the visible region: the next position is the
//! unordered background cell, 8-adjacent to what is already known, closest to
//! the visible center of mass. Equal distances are broken by the angle around
//! the center of mass (counter-clockwise in image coordinates, starting east),
//! which traces a spiral.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::TAU;
use std::fmt::Write as _;

use crate::grid::{Grid, Mask};
use crate::{Error, Result};

pub type VisibilityMask = Mask;

/// Rank per cell: `-1` on visible cells, `0..B` over the `B` background cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationOrder {
    rank: Grid<i32>,
    positions: Vec<usize>,
}

impl GenerationOrder {
    /// Builds an order from explicit ranks, validating the permutation.
    pub fn from_ranks(rank: Grid<i32>) -> Result<Self> {
        let b = rank.as_slice().iter().filter(|&&r| r >= 0).count();
        let mut positions = vec![usize::MAX; b];
        for (i, &r) in rank.as_slice().iter().enumerate() {
            if r < -1 {
                return Err(Error::InvalidArgument(format!("rank {r} below -1")));
            }
            if r >= 0 {
                let r = r as usize;
                if r >= b || positions[r] != usize::MAX {
                    return Err(Error::InvalidArgument(
                        "background ranks are not a permutation".into(),
                    ));
                }
                positions[r] = i;
            }
        }
        Ok(Self { rank, positions })
    }

    /// Raster-scan order over the background cells.
    pub fn raster(mask: &VisibilityMask) -> Self {
        let mut next = 0;
        let rank = mask.map(|&v| {
            if v {
                -1
            } else {
                next += 1;
                next - 1
            }
        });
        Self::from_ranks(rank).expect("raster ranks are a permutation")
    }

    pub fn ranks(&self) -> &Grid<i32> {
        &self.rank
    }

    pub fn rank_at(&self, row: usize, col: usize) -> i32 {
        *self.rank.get(row, col)
    }

    pub fn height(&self) -> usize {
        self.rank.height()
    }

    pub fn width(&self) -> usize {
        self.rank.width()
    }

    /// Number of background cells.
    pub fn background_count(&self) -> usize {
        self.positions.len()
    }

    /// Flat cell indices in generation order.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn visible_mask(&self) -> VisibilityMask {
        self.rank.map(|&r| r < 0)
    }

    /// Plain-text dump: `h w` then one row of ranks per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height(), self.width());
        for row in 0..self.height() {
            let line: Vec<String> = (0..self.width())
                .map(|c| self.rank_at(row, c).to_string())
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next = |what: &str| -> Result<i64> {
            tokens
                .next()
                .ok_or_else(|| Error::Format(format!("order dump missing {what}")))?
                .parse::<i64>()
                .map_err(|e| Error::Format(e.to_string()))
        };
        let h = next("height")? as usize;
        let w = next("width")? as usize;
        let mut ranks = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            ranks.push(next("rank")? as i32);
        }
        Self::from_ranks(Grid::from_vec(h, w, ranks)?)
    }
}

/// Mean `(row, col)` of the visible cells.
pub fn center_of_mass(mask: &VisibilityMask) -> Result<(f64, f64)> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (r, c, &v) in mask.iter_indexed() {
        if v {
            sr += r as f64;
            sc += c as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no visible pixels".into()));
    }
    Ok((sr / n as f64, sc / n as f64))
}

#[derive(Debug, Clone, Copy)]
struct Key {
    dist2: f64,
    angle: f64,
    row: usize,
    col: usize,
}

impl Key {
    fn new(row: usize, col: usize, center: (f64, f64)) -> Self {
        let dr = row as f64 - center.0;
        let dc = col as f64 - center.1;
        let mut angle = dr.atan2(dc);
        if angle < 0.0 {
            angle += TAU;
        }
        Self {
            dist2: dr * dr + dc * dc,
            angle,
            row,
            col,
        }
    }

    fn cmp_priority(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.angle.total_cmp(&other.angle))
            .then(self.row.cmp(&other.row))
            .then(self.col.cmp(&other.col))
    }
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp_priority(other) == Ordering::Equal
    }
}

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    // Reversed so the max-heap pops the highest priority (smallest key).
    fn cmp(&self, other: &Self) -> Ordering {
        other.cmp_priority(self)
    }
}

/// Grows an order outward from the visible region.
pub fn generate_order(mask: &VisibilityMask) -> GenerationOrder {
    let (h, w) = (mask.height(), mask.width());
    let center = center_of_mass(mask)
        .unwrap_or(((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0));
    let mut rank = mask.map(|&v| if v { -1 } else { i32::MIN });
    let background = mask.len() - mask.count();
    let mut queued = mask.clone();
    let mut frontier = BinaryHeap::new();
    let mut next = 0i32;

    let push_neighbors = |row: usize,
                              col: usize,
                              queued: &mut Mask,
                              frontier: &mut BinaryHeap<Key>| {
        for (r, c) in mask.neighbors8(row, col) {
            if !*queued.get(r, c) {
                queued.set(r, c, true);
                frontier.push(Key::new(r, c, center));
            }
        }
    };
    for (r, c, &v) in mask.iter_indexed() {
        if v {
            push_neighbors(r, c, &mut queued, &mut frontier);
        }
    }

    let assign = |row: usize,
                  col: usize,
                  next: &mut i32,
                  rank: &mut Grid<i32>,
                  queued: &mut Mask,
                  frontier: &mut BinaryHeap<Key>| {
        rank.set(row, col, *next);
        *next += 1;
        queued.set(row, col, true);
        push_neighbors(row, col, queued, frontier);
    };

    // Seed: the globally closest background cell.
    let global_nearest = |rank: &Grid<i32>| {
        rank.iter_indexed()
            .filter(|&(_, _, &r)| r == i32::MIN)
            .map(|(r, c, _)| Key::new(r, c, center))
            .min_by(|a, b| a.cmp_priority(b))
    };
    if let Some(seed) = global_nearest(&rank) {
        assign(seed.row, seed.col, &mut next, &mut rank, &mut queued, &mut frontier);
    }
    while (next as usize) < background {
        let key = loop {
            match frontier.pop() {
                Some(k) if *rank.get(k.row, k.col) == i32::MIN => break Some(k),
                Some(_) => continue,
                None => break None,
            }
        };
        // Disconnected background: jump to the closest unordered cell.
        let key = key.or_else(|| global_nearest(&rank)).expect("unordered cell remains");
        assign(key.row, key.col, &mut next, &mut rank, &mut queued, &mut frontier);
    }
    GenerationOrder::from_ranks(rank).expect("grown ranks are a permutation")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Excludes the center cell.
    First,
    /// Includes the center cell.
    Later,
}

/// Per-position `k x k` admission stencils for the first and later layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMaskSet {
    kernel: usize,
    layers: usize,
    height: usize,
    width: usize,
    first: Vec<bool>,
    later: Vec<bool>,
}

impl LocalMaskSet {
    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        if layer == 0 {
            LayerKind::First
        } else {
            LayerKind::Later
        }
    }

    /// Stencil of `(row, col)` at `layer`, row-major `k x k`; `(dy, dx)`
    /// indexes offsets `(dy - k/2, dx - k/2)`. Out-of-frame taps are never admitted.
    pub fn stencil(&self, layer: usize, row: usize, col: usize) -> &[bool] {
        let kk = self.kernel * self.kernel;
        let start = (row * self.width + col) * kk;
        match self.layer_kind(layer) {
            LayerKind::First => &self.first[start..start + kk],
            LayerKind::Later => &self.later[start..start + kk],
        }
    }

    pub fn admits(&self, layer: usize, row: usize, col: usize, dy: usize, dx: usize) -> bool {
        self.stencil(layer, row, col)[dy * self.kernel + dx]
    }

    /// For each position, the admitted `(input position, tap)` pairs in tap order.
    pub fn admitted(&self, kind: LayerKind) -> Vec<Vec<(u32, u16)>> {
        let k = self.kernel;
        let half = (k / 2) as isize;
        let masks = match kind {
            LayerKind::First => &self.first,
            LayerKind::Later => &self.later,
        };
        let mut out = Vec::with_capacity(self.height * self.width);
        for row in 0..self.height {
            for col in 0..self.width {
                let base = (row * self.width + col) * k * k;
                let mut list = Vec::new();
                for dy in 0..k {
                    for dx in 0..k {
                        if masks[base + dy * k + dx] {
                            let r = (row as isize + dy as isize - half) as usize;
                            let c = (col as isize + dx as isize - half) as usize;
                            list.push(((r * self.width + c) as u32, (dy * k + dx) as u16));
                        }
                    }
                }
                out.push(list);
            }
        }
        out
    }
}

/// Builds stencils admitting, for output cell `p` and in-window cell `q`:
/// visible `q`, `q` earlier than `p`, and `q = p` on later layers.
pub fn build_local_masks(order: &GenerationOrder, kernel: usize, layers: usize) -> Result<LocalMaskSet> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel {kernel} must be odd")));
    }
    if layers == 0 {
        return Err(Error::InvalidArgument("at least one layer required".into()));
    }
    let (h, w) = (order.height(), order.width());
    let half = (kernel / 2) as isize;
    let kk = kernel * kernel;
    let mut first = vec![false; h * w * kk];
    let mut later = vec![false; h * w * kk];
    for row in 0..h {
        for col in 0..w {
            let rp = order.rank_at(row, col);
            let base = (row * w + col) * kk;
            for dy in 0..kernel {
                for dx in 0..kernel {
                    let r = row as isize + dy as isize - half;
                    let c = col as isize + dx as isize - half;
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        continue;
                    }
                    let rq = order.rank_at(r as usize, c as usize);
                    let is_self = r as usize == row && c as usize == col;
                    let earlier = rq == -1 || (rp >= 0 && rq < rp);
                    first[base + dy * kernel + dx] = earlier;
                    later[base + dy * kernel + dx] = earlier || is_self;
                }
            }
        }
    }
    Ok(LocalMaskSet {
        kernel,
        layers,
        height: h,
        width: w,
        first,
        later,
    })
}
