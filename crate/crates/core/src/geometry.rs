//! Location bookkeeping: ordering, nearest-neighbor search and the
//! neighbor/parent sets that define the directed acyclic graph of the
//! nearest-neighbor process.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Result, SfError};

pub type Point = [f64; 2];

/// Above this many locations the ordered neighbor search switches from the
/// brute-force scan to the grid index.
pub const GRID_SEARCH_THRESHOLD: usize = 5_000;

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// A validated set of planar locations with stable external identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSet {
    coords: Vec<Point>,
    ids: Vec<String>,
    /// `order[k]` is the storage index of the k-th location in the ordering.
    order: Vec<usize>,
}

impl LocationSet {
    /// Validates coordinates (finite, pairwise distinct) and computes the ordering.
    pub fn new(coords: Vec<Point>, ids: Vec<String>) -> Result<Self> {
        if coords.len() != ids.len() {
            return Err(SfError::Dimension(format!(
                "{} coordinates but {} ids",
                coords.len(),
                ids.len()
            )));
        }
        let order = build_ordering(&coords)?;
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            if coords[a] == coords[b] {
                return Err(SfError::ingest(format!(
                    "duplicate coordinates ({}, {}) for ids '{}' and '{}'",
                    coords[a][0], coords[a][1], ids[a], ids[b]
                )));
            }
        }
        let mut seen = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), i) {
                return Err(SfError::ingest(format!(
                    "id '{id}' repeated at rows {prev} and {i}"
                )));
            }
        }
        Ok(Self { coords, ids, order })
    }

    /// Locations with ids `0..n`.
    pub fn from_coords(coords: Vec<Point>) -> Result<Self> {
        let ids = (0..coords.len()).map(|i| i.to_string()).collect();
        Self::new(coords, ids)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Coordinates listed in ordered position.
    pub fn ordered_coords(&self) -> Vec<Point> {
        self.order.iter().map(|&s| self.coords[s]).collect()
    }

    /// Inverse permutation: storage index → ordered position.
    pub fn rank_of(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len()];
        for (k, &s) in self.order.iter().enumerate() {
            rank[s] = k;
        }
        rank
    }

    pub fn index_of_id(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Restrict to the given storage rows, keeping their relative order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            rows.iter().map(|&r| self.coords[r]).collect(),
            rows.iter().map(|&r| self.ids[r].clone()).collect(),
        )
    }
}

/// Deterministic ordering: ascending first coordinate, then second, then
/// original index. Returns the storage indices in ordered position.
pub fn build_ordering(coords: &[Point]) -> Result<Vec<usize>> {
    for (i, c) in coords.iter().enumerate() {
        if !c[0].is_finite() || !c[1].is_finite() {
            return Err(SfError::ingest(format!(
                "non-finite coordinate ({}, {}) at row {i}",
                c[0], c[1]
            )));
        }
    }
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&a, &b| {
        coords[a][0]
            .total_cmp(&coords[b][0])
            .then(coords[a][1].total_cmp(&coords[b][1]))
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// Ordered neighbor sets `N(i)` and their transpose, the parent sets `P(i)`.
///
/// Both relations are stored in compressed rows. For every parent entry the
/// slot of `i` inside `N(j)` is kept alongside `j`, which is what the latent
/// updates need to pick the kriging weight `b_{j,i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    m: usize,
    nbr_offsets: Vec<usize>,
    nbrs: Vec<usize>,
    par_offsets: Vec<usize>,
    pars: Vec<usize>,
    par_slots: Vec<usize>,
}

impl NeighborGraph {
    /// Build from per-location neighbor lists (ordered indices, each `< i`).
    pub fn from_lists(m: usize, lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        let mut nbr_offsets = Vec::with_capacity(n + 1);
        nbr_offsets.push(0);
        let mut nbrs = Vec::new();
        let mut counts = vec![0usize; n];
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j >= i {
                    return Err(SfError::Dimension(format!(
                        "neighbor {j} of location {i} does not precede it"
                    )));
                }
                counts[j] += 1;
            }
            nbrs.extend_from_slice(list);
            nbr_offsets.push(nbrs.len());
        }
        let mut par_offsets = Vec::with_capacity(n + 1);
        par_offsets.push(0);
        for c in &counts {
            par_offsets.push(par_offsets.last().unwrap() + c);
        }
        let total = *par_offsets.last().unwrap();
        let mut pars = vec![0; total];
        let mut par_slots = vec![0; total];
        let mut fill = par_offsets[..n].to_vec();
        // children visited in increasing order, so parent lists come out sorted
        for (i, list) in lists.iter().enumerate() {
            for (d, &j) in list.iter().enumerate() {
                pars[fill[j]] = i;
                par_slots[fill[j]] = d;
                fill[j] += 1;
            }
        }
        Ok(Self {
            m,
            nbr_offsets,
            nbrs,
            par_offsets,
            pars,
            par_slots,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.nbr_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbrs[self.nbr_offsets[i]..self.nbr_offsets[i + 1]]
    }

    /// Offset of `N(i)` in the flattened neighbor storage; kriging weights
    /// share this layout.
    pub fn neighbor_offset(&self, i: usize) -> usize {
        self.nbr_offsets[i]
    }

    pub fn total_neighbors(&self) -> usize {
        self.nbrs.len()
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.pars[self.par_offsets[i]..self.par_offsets[i + 1]]
    }

    /// `(j, d)` pairs with `N(j)[d] == i`.
    pub fn parent_entries(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.par_offsets[i]..self.par_offsets[i + 1];
        self.pars[r.clone()]
            .iter()
            .copied()
            .zip(self.par_slots[r].iter().copied())
    }
}

/// Ordered nearest-neighbor graph over locations already in ordered position.
///
/// `N(i)` holds the `min(m, i)` predecessors closest to `i` (0-based), ties
/// broken by smaller index. Uses the brute-force scan up to
/// [`GRID_SEARCH_THRESHOLD`] locations and the grid index above it; both give
/// identical sets.
pub fn nearest_neighbors(ordered: &[Point], m: usize) -> Result<NeighborGraph> {
    if ordered.len() > GRID_SEARCH_THRESHOLD {
        nearest_neighbors_grid(ordered, m)
    } else {
        nearest_neighbors_brute(ordered, m)
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        return Err(SfError::Config("neighbor count m must be at least 1".into()));
    }
    Ok(())
}

pub fn nearest_neighbors_brute(ordered: &[Point], m: usize) -> Result<NeighborGraph> {
    check_m(m)?;
    let lists: Vec<Vec<usize>> = (0..ordered.len())
        .into_par_iter()
        .map(|i| {
            let mut best = Nearest::new(m.min(i));
            for j in 0..i {
                best.offer(dist2(&ordered[i], &ordered[j]), j);
            }
            best.into_indices()
        })
        .collect();
    NeighborGraph::from_lists(m, lists)
}

pub fn nearest_neighbors_grid(ordered: &[Point], m: usize) -> Result<NeighborGraph> {
    check_m(m)?;
    let grid = GridIndex::new(ordered);
    let lists: Vec<Vec<usize>> = (0..ordered.len())
        .into_par_iter()
        .map(|i| grid.knn_filtered(&ordered[i], m.min(i), |j| j < i))
        .collect();
    NeighborGraph::from_lists(m, lists)
}

/// The `m` reference locations nearest to `query` (all references eligible),
/// ties broken by smaller index. Returns all references when `m > n`.
pub fn knn_for_prediction(reference: &[Point], query: &Point, m: usize) -> Vec<usize> {
    let mut best = Nearest::new(m.min(reference.len()));
    for (j, r) in reference.iter().enumerate() {
        best.offer(dist2(query, r), j);
    }
    best.into_indices()
}

/// Reusable index for many prediction queries against one reference set.
pub struct KnnIndex {
    grid: GridIndex,
    n: usize,
}

impl KnnIndex {
    pub fn new(reference: &[Point]) -> Self {
        Self {
            grid: GridIndex::new(reference),
            n: reference.len(),
        }
    }

    pub fn query(&self, query: &Point, m: usize) -> Vec<usize> {
        self.grid.knn_filtered(query, m.min(self.n), |_| true)
    }
}

/// Bounded candidate list ordered by (squared distance, index).
struct Nearest {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Nearest {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst(&self) -> Option<f64> {
        if self.items.len() == self.k {
            self.items.last().map(|x| x.0)
        } else {
            None
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, j: usize) {
        if self.k == 0 {
            return;
        }
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if (d2, j) >= last {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|&(d, idx)| d < d2 || (d == d2 && idx < j));
        self.items.insert(pos, (d2, j));
    }

    fn into_indices(self) -> Vec<usize> {
        self.items.into_iter().map(|x| x.1).collect()
    }
}

/// Uniform bucket grid over the bounding box, about two points per cell.
struct GridIndex {
    points: Vec<Point>,
    x0: f64,
    y0: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    cell_start: Vec<usize>,
    members: Vec<usize>,
}

impl GridIndex {
    fn new(points: &[Point]) -> Self {
        let n = points.len().max(1);
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        if points.is_empty() {
            (x0, y0, x1, y1) = (0.0, 0.0, 1.0, 1.0);
        }
        let w = (x1 - x0).max(f64::EPSILON);
        let h = (y1 - y0).max(f64::EPSILON);
        let mut cell = (w * h * 2.0 / n as f64).sqrt();
        if !(cell > 0.0) {
            cell = w.max(h);
        }
        let max_cells = 4 * n + 16;
        let mut nx = ((w / cell).floor() as usize + 1).max(1);
        let mut ny = ((h / cell).floor() as usize + 1).max(1);
        // collinear inputs would otherwise give a degenerate, huge grid
        while nx.saturating_mul(ny) > max_cells {
            cell *= 2.0;
            nx = (w / cell).floor() as usize + 1;
            ny = (h / cell).floor() as usize + 1;
        }
        let mut grid = Self {
            points: points.to_vec(),
            x0,
            y0,
            cell,
            nx,
            ny,
            cell_start: vec![0; nx * ny + 1],
            members: vec![0; points.len()],
        };
        let cells: Vec<usize> = points.iter().map(|p| grid.cell_of(p)).collect();
        for &c in &cells {
            grid.cell_start[c + 1] += 1;
        }
        for c in 0..nx * ny {
            grid.cell_start[c + 1] += grid.cell_start[c];
        }
        let mut fill = grid.cell_start.clone();
        for (i, &c) in cells.iter().enumerate() {
            grid.members[fill[c]] = i;
            fill[c] += 1;
        }
        grid
    }

    #[inline]
    fn coords_of(&self, p: &Point) -> (isize, isize) {
        let cx = ((p[0] - self.x0) / self.cell).floor() as isize;
        let cy = ((p[1] - self.y0) / self.cell).floor() as isize;
        (
            cx.clamp(0, self.nx as isize - 1),
            cy.clamp(0, self.ny as isize - 1),
        )
    }

    #[inline]
    fn cell_of(&self, p: &Point) -> usize {
        let (cx, cy) = self.coords_of(p);
        cy as usize * self.nx + cx as usize
    }

    fn scan_cell(&self, cx: isize, cy: isize, q: &Point, best: &mut Nearest, keep: &impl Fn(usize) -> bool) {
        if cx < 0 || cy < 0 || cx >= self.nx as isize || cy >= self.ny as isize {
            return;
        }
        let c = cy as usize * self.nx + cx as usize;
        for &j in &self.members[self.cell_start[c]..self.cell_start[c + 1]] {
            if keep(j) {
                best.offer(dist2(q, &self.points[j]), j);
            }
        }
    }

    fn knn_filtered(&self, q: &Point, k: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        let mut best = Nearest::new(k);
        if k == 0 {
            return Vec::new();
        }
        let (cx, cy) = self.coords_of(q);
        let max_ring = self.nx.max(self.ny) as isize;
        for r in 0..=max_ring {
            if r == 0 {
                self.scan_cell(cx, cy, q, &mut best, &keep);
            } else {
                for dx in -r..=r {
                    self.scan_cell(cx + dx, cy - r, q, &mut best, &keep);
                    self.scan_cell(cx + dx, cy + r, q, &mut best, &keep);
                }
                for dy in (-r + 1)..r {
                    self.scan_cell(cx - r, cy + dy, q, &mut best, &keep);
                    self.scan_cell(cx + r, cy + dy, q, &mut best, &keep);
                }
            }
            if let Some(worst) = best.worst() {
                // every unvisited point lies outside the (2r+1)-cell block
                let bx0 = self.x0 + (cx - r) as f64 * self.cell;
                let bx1 = self.x0 + (cx + r + 1) as f64 * self.cell;
                let by0 = self.y0 + (cy - r) as f64 * self.cell;
                let by1 = self.y0 + (cy + r + 1) as f64 * self.cell;
                let gap = (q[0] - bx0)
                    .min(bx1 - q[0])
                    .min(q[1] - by0)
                    .min(by1 - q[1])
                    .max(0.0);
                if gap * gap > worst {
                    break;
                }
            }
        }
        best.into_indices()
    }
}
