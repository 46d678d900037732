//! Structured triangulation of the periodic unit cell and the boundary
//! pairing that enforces periodicity. Geometry only; materials live with
//! the solver.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{SMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MicroFeError;

/// Edge length of the square unit cell, mm.
pub const CELL_LENGTH: f64 = 1.0;
/// Default grid resolution: 32 divisions per side, 2048 triangles.
pub const DEFAULT_N_DIV: usize = 32;
pub const DEFAULT_N_FIBERS: usize = 4;
pub const DEFAULT_VF: f64 = 0.6;

/// Fibers must keep this clearance factor times the radius between centers
/// so circles never touch, which would leave degenerate slivers of matrix.
const MIN_CENTER_GAP: f64 = 2.002;
/// Lattice jitter never exceeds this fraction of the cell edge.
const MAX_JITTER_FRACTION: f64 = 0.05;
const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Matrix,
    Fiber,
}

#[derive(Clone, Copy, Debug)]
pub struct Fiber {
    pub center: Vector2<f64>,
    pub radius: f64,
}

/// Three-node constant-strain triangle with one integration point.
/// `b` maps the six nodal displacements to the engineering strain vector,
/// so it already carries the 1/(2A) factor.
#[derive(Clone, Debug)]
pub struct Element {
    pub nodes: [usize; 3],
    pub phase: Phase,
    pub area: f64,
    pub b: SMatrix<f64, 3, 6>,
}

#[derive(Clone, Debug)]
pub struct RveMesh {
    pub length: f64,
    pub n_div: usize,
    pub nodes: Vec<Vector2<f64>>,
    pub elements: Vec<Element>,
    pub fibers: Vec<Fiber>,
    pub target_vf: f64,
    /// Fiber area fraction actually captured by the centroid-in-circle test.
    pub measured_vf: f64,
}

impl RveMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn total_area(&self) -> f64 {
        self.elements.iter().map(|e| e.area).sum()
    }
}

/// One eliminated boundary node: `slave` carries the same fluctuation as
/// `master`; `shift` is the cell-periodic offset between their coordinates.
#[derive(Clone, Copy, Debug)]
pub struct PbcPair {
    pub slave: usize,
    pub master: usize,
    pub shift: Vector2<f64>,
}

/// Master-slave elimination map. Each nodal degree of freedom resolves to
/// either a condensed unknown index or to nothing (the pinned corner and
/// slaves of it), which makes assembly a plain scatter.
#[derive(Clone, Debug)]
pub struct PbcMap {
    pub pairs: Vec<PbcPair>,
    /// Corner node with fluctuation fixed to zero; removes rigid translation.
    pub pinned: usize,
    pub n_free: usize,
    resolved: Vec<Option<usize>>,
    owner: Vec<usize>,
}

impl PbcMap {
    fn build(n_div: usize, length: f64) -> Self {
        let n_side = n_div + 1;
        let node = |ix: usize, iy: usize| iy * n_side + ix;
        let n_nodes = n_side * n_side;

        let mut pairs: Vec<PbcPair> = Vec::with_capacity(2 * n_div + 1);
        for iy in 0..n_side {
            pairs.push(PbcPair {
                slave: node(n_div, iy),
                master: node(0, iy),
                shift: Vector2::new(length, 0.0),
            });
        }
        // Skip ix = n_div: the top-right corner is already a slave of the
        // right-edge rule.
        for ix in 0..n_div {
            pairs.push(PbcPair {
                slave: node(ix, n_div),
                master: node(ix, 0),
                shift: Vector2::new(0.0, length),
            });
        }

        // A master can itself be a slave (the top-left corner); re-point such
        // chains at their final master. Chains here have length at most two,
        // but loop until settled for robustness.
        let slave_of: std::collections::HashMap<usize, (usize, Vector2<f64>)> = pairs
            .iter()
            .map(|p| (p.slave, (p.master, p.shift)))
            .collect();
        for pair in &mut pairs {
            while let Some(&(master, shift)) = slave_of.get(&pair.master) {
                pair.master = master;
                pair.shift += shift;
            }
        }

        let pinned = node(0, 0);
        let mut is_slave = vec![false; n_nodes];
        for p in &pairs {
            is_slave[p.slave] = true;
        }

        let mut resolved = vec![None; 2 * n_nodes];
        let mut owner = Vec::new();
        for n in 0..n_nodes {
            if !is_slave[n] && n != pinned {
                for comp in 0..2 {
                    resolved[2 * n + comp] = Some(owner.len());
                    owner.push(2 * n + comp);
                }
            }
        }
        for p in &pairs {
            for comp in 0..2 {
                resolved[2 * p.slave + comp] = resolved[2 * p.master + comp];
            }
        }
        let n_free = owner.len();
        PbcMap { pairs, pinned, n_free, resolved, owner }
    }

    /// Condensed unknown index for a nodal component, if it has one.
    pub fn free_dof(&self, node: usize, comp: usize) -> Option<usize> {
        self.resolved[2 * node + comp]
    }

    /// Expands condensed unknowns to the full nodal fluctuation field;
    /// slaves mirror their masters and the pinned corner stays zero.
    pub fn expand(&self, condensed: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        let mut full = nalgebra::DVector::zeros(self.resolved.len());
        for (dof, r) in self.resolved.iter().enumerate() {
            if let Some(k) = r {
                full[dof] = condensed[*k];
            }
        }
        full
    }

    /// Inverse of `expand` restricted to owned degrees of freedom.
    pub fn condense(&self, full: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(self.n_free, self.owner.iter().map(|&dof| full[dof]))
    }
}

/// Shortest offset from `b` to `a` on the periodic cell.
fn periodic_delta(a: Vector2<f64>, b: Vector2<f64>, length: f64) -> Vector2<f64> {
    let mut d = a - b;
    d.x -= length * (d.x / length).round();
    d.y -= length * (d.y / length).round();
    d
}

fn place_fibers(
    n_fibers: usize,
    vf: f64,
    length: f64,
    seed: u64,
) -> Result<Vec<Fiber>, MicroFeError> {
    if n_fibers == 0 {
        return Ok(Vec::new());
    }
    let radius = length * (vf / (PI * n_fibers as f64)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let side = (n_fibers as f64).sqrt().round() as usize;
    if side * side == n_fibers {
        // Square counts get a jittered lattice: random sequential placement
        // jams near vf 0.55, below the default 0.6, while a lattice stays
        // feasible up to vf ~ 0.78. The jitter bound keeps worst-case
        // diagonal moves of two neighbors from closing below the center gap.
        let pitch = length / side as f64;
        let jitter = ((pitch - MIN_CENTER_GAP * radius) / (2.0 * SQRT_2))
            .clamp(0.0, MAX_JITTER_FRACTION * length);
        let mut fibers = Vec::with_capacity(n_fibers);
        for j in 0..side {
            for i in 0..side {
                let cx = (i as f64 + 0.5) * pitch + rng.gen_range(-jitter..=jitter);
                let cy = (j as f64 + 0.5) * pitch + rng.gen_range(-jitter..=jitter);
                fibers.push(Fiber {
                    center: Vector2::new(cx.rem_euclid(length), cy.rem_euclid(length)),
                    radius,
                });
            }
        }
        return Ok(fibers);
    }

    // Non-square counts fall back to rejection sampling with a periodic
    // minimum-distance check.
    let mut fibers: Vec<Fiber> = Vec::with_capacity(n_fibers);
    let mut attempts = 0usize;
    while fibers.len() < n_fibers {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(MicroFeError::Placement { attempts });
        }
        attempts += 1;
        let candidate = Vector2::new(rng.gen_range(0.0..length), rng.gen_range(0.0..length));
        let clear = fibers.iter().all(|f| {
            periodic_delta(candidate, f.center, length).norm() >= MIN_CENTER_GAP * radius
        });
        if clear {
            fibers.push(Fiber { center: candidate, radius });
        }
    }
    Ok(fibers)
}

fn phase_at(point: Vector2<f64>, fibers: &[Fiber], length: f64) -> Phase {
    for f in fibers {
        if periodic_delta(point, f.center, length).norm() <= f.radius {
            return Phase::Fiber;
        }
    }
    Phase::Matrix
}

fn triangle_area(p1: Vector2<f64>, p2: Vector2<f64>, p3: Vector2<f64>) -> f64 {
    0.5 * ((p2.x - p1.x) * (p3.y - p1.y) - (p3.x - p1.x) * (p2.y - p1.y))
}

/// Area and strain-displacement matrix of a counterclockwise triangle.
fn element_geometry(
    p1: Vector2<f64>,
    p2: Vector2<f64>,
    p3: Vector2<f64>,
) -> (f64, SMatrix<f64, 3, 6>) {
    let b = [p2.y - p3.y, p3.y - p1.y, p1.y - p2.y];
    let c = [p3.x - p2.x, p1.x - p3.x, p2.x - p1.x];
    let det = (p2.x - p1.x) * (p3.y - p1.y) - (p3.x - p1.x) * (p2.y - p1.y);
    let mut m = SMatrix::<f64, 3, 6>::zeros();
    for i in 0..3 {
        m[(0, 2 * i)] = b[i] / det;
        m[(1, 2 * i + 1)] = c[i] / det;
        m[(2, 2 * i)] = c[i] / det;
        m[(2, 2 * i + 1)] = b[i] / det;
    }
    (det / 2.0, m)
}

/// Builds the unit cell: fibers placed periodically, a structured grid of
/// right triangles, phases assigned by a centroid-in-circle test, and the
/// boundary pairing for periodicity.
pub fn build_rve(
    n_fibers: usize,
    vf: f64,
    n_div: usize,
    seed: u64,
) -> Result<(RveMesh, PbcMap), MicroFeError> {
    if n_div < 2 {
        return Err(MicroFeError::Config(format!("n_div must be at least 2, got {n_div}")));
    }
    if n_fibers > 0 && !(vf > 0.0 && vf <= 0.7) {
        return Err(MicroFeError::Config(format!(
            "volume fraction must lie in (0, 0.7], got {vf}"
        )));
    }
    let length = CELL_LENGTH;
    let fibers = place_fibers(n_fibers, vf, length, seed)?;

    let n_side = n_div + 1;
    let h = length / n_div as f64;
    let mut nodes = Vec::with_capacity(n_side * n_side);
    for iy in 0..n_side {
        for ix in 0..n_side {
            nodes.push(Vector2::new(ix as f64 * h, iy as f64 * h));
        }
    }

    let node = |ix: usize, iy: usize| iy * n_side + ix;
    let mut tri_indices = Vec::with_capacity(2 * n_div * n_div);
    for cy in 0..n_div {
        for cx in 0..n_div {
            let quad = [node(cx, cy), node(cx + 1, cy), node(cx + 1, cy + 1), node(cx, cy + 1)];
            tri_indices.push([quad[0], quad[1], quad[2]]);
            tri_indices.push([quad[0], quad[2], quad[3]]);
        }
    }

    // Warp the grid onto the fiber boundaries: every element edge that
    // crosses a circle snaps its nearer endpoint onto the crossing point.
    // The grid topology is untouched, but the interface becomes conforming
    // instead of a staircase, without which the homogenized stiffness of a
    // stiff-fiber cell is strongly mesh-dependent. Cell-boundary nodes stay
    // put so the periodic pairing remains exact.
    let lattice = nodes.clone();
    let is_interior =
        |id: usize| -> bool { id % n_side != 0 && id % n_side != n_div && id >= n_side && id < n_side * n_div };
    // Per node: the closest crossing (edge parameter from that node, target).
    let mut warp: Vec<Option<(f64, Vector2<f64>)>> = vec![None; nodes.len()];
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for iy in 0..n_side {
        for ix in 0..n_div {
            edges.push((node(ix, iy), node(ix + 1, iy)));
        }
    }
    for iy in 0..n_div {
        for ix in 0..n_side {
            edges.push((node(ix, iy), node(ix, iy + 1)));
        }
    }
    for cy in 0..n_div {
        for cx in 0..n_div {
            edges.push((node(cx, cy), node(cx + 1, cy + 1)));
        }
    }
    for &(a, b) in &edges {
        let (pa, pb) = (nodes[a], nodes[b]);
        let mid = (pa + pb) / 2.0;
        for f in &fibers {
            // Work in the periodic image of the fiber nearest this edge.
            let center = mid - periodic_delta(mid, f.center, length);
            let d = pb - pa;
            let m = pa - center;
            let qa = d.dot(&d);
            let qb = 2.0 * m.dot(&d);
            let qc = m.dot(&m) - f.radius * f.radius;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                continue;
            }
            for root in [(-qb - disc.sqrt()) / (2.0 * qa), (-qb + disc.sqrt()) / (2.0 * qa)] {
                if !(0.0..=1.0).contains(&root) {
                    continue;
                }
                let target = pa + d * root;
                for (id, t) in [(a, root), (b, 1.0 - root)] {
                    if t < 0.5
                        && is_interior(id)
                        && warp[id].map_or(true, |(best, _)| t < best)
                    {
                        warp[id] = Some((t, target));
                    }
                }
            }
        }
    }
    let mut snapped = vec![false; nodes.len()];
    for (id, w) in warp.iter().enumerate() {
        if let Some((_, target)) = w {
            nodes[id] = *target;
            snapped[id] = true;
        }
    }

    // First pass snaps each node to its nearest crossing, which can leave an
    // edge cut when both its endpoints were claimed by other crossings.
    // Follow-up passes cover those with whichever endpoint is still free.
    for _ in 0..3 {
        let mut changed = false;
        for &(a, b) in &edges {
            let (pa, pb) = (nodes[a], nodes[b]);
            let mid = (pa + pb) / 2.0;
            for f in &fibers {
                let center = mid - periodic_delta(mid, f.center, length);
                let d = pb - pa;
                let m = pa - center;
                let qa = d.dot(&d);
                let qb = 2.0 * m.dot(&d);
                let qc = m.dot(&m) - f.radius * f.radius;
                let disc = qb * qb - 4.0 * qa * qc;
                if disc < 0.0 {
                    continue;
                }
                for root in [(-qb - disc.sqrt()) / (2.0 * qa), (-qb + disc.sqrt()) / (2.0 * qa)] {
                    if !(1e-9..=1.0 - 1e-9).contains(&root) {
                        continue;
                    }
                    let target = pa + d * root;
                    let mut candidates = [(a, root), (b, 1.0 - root)];
                    candidates.sort_by(|x, y| x.1.total_cmp(&y.1));
                    for (id, _) in candidates {
                        if is_interior(id) && !snapped[id] {
                            nodes[id] = target;
                            snapped[id] = true;
                            changed = true;
                            break;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }

    // A circle grazing a grid line can pull two node rows onto the same arc
    // and squeeze the triangles between them. Revert the snapped corners of
    // any degenerate triangle until every element keeps a healthy area; the
    // loop terminates because reverts only shrink the snapped set.
    let area_floor = 0.05 * h * h / 2.0;
    loop {
        let mut reverted = false;
        for tri in &tri_indices {
            let area = triangle_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            if area <= area_floor {
                for &v in tri {
                    if snapped[v] {
                        nodes[v] = lattice[v];
                        snapped[v] = false;
                        reverted = true;
                    }
                }
            }
        }
        if !reverted {
            break;
        }
    }
    // Last-resort guard: fall back to the plain staircase mesh, which is
    // valid by construction.
    if tri_indices
        .iter()
        .any(|t| triangle_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) <= 0.0)
    {
        nodes = lattice;
    }

    let mut elements = Vec::with_capacity(tri_indices.len());
    let mut fiber_area = 0.0;
    for tri in tri_indices {
        let (p1, p2, p3) = (nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
        let (area, b) = element_geometry(p1, p2, p3);
        debug_assert!(area > 0.0, "triangulation produced a flipped element");
        let centroid = (p1 + p2 + p3) / 3.0;
        let phase = phase_at(centroid, &fibers, length);
        if phase == Phase::Fiber {
            fiber_area += area;
        }
        elements.push(Element { nodes: tri, phase, area, b });
    }

    let measured_vf = fiber_area / (length * length);
    let pbc = PbcMap::build(n_div, length);
    let mesh = RveMesh {
        length,
        n_div,
        nodes,
        elements,
        fibers,
        target_vf: if n_fibers == 0 { 0.0 } else { vf },
        measured_vf,
    };
    Ok((mesh, pbc))
}
