//! Periodic-structure domain model: lattices, fractional coordinates,
//! minimum-image geometry, and the flat feature vectors consumed by the
//! neural modules.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CrystalError {
    #[error("degenerate cell: {0}")]
    DegenerateCell(String),
    #[error("non-finite value in coordinates")]
    NonFinite,
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
}

const DEG: f64 = std::f64::consts::PI / 180.0;

/// Unit cell basis. Row `i` is the `i`-th base vector in Cartesian space.
///
/// The determinant is strictly positive (right-handed, non-degenerate cell).
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    rows: [[f64; 3]; 3],
}

impl Lattice {
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, CrystalError> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CrystalError::NonFinite);
        }
        let det = det3(&rows);
        if det <= 0.0 {
            return Err(CrystalError::DegenerateCell(format!(
                "determinant {det} is not strictly positive"
            )));
        }
        Ok(Self { rows })
    }

    /// Builds the canonical lower-triangular cell from the six lattice
    /// parameters (lengths, then angles in degrees). The triangular
    /// convention gives the 6-parameter head a unique decoding.
    pub fn from_params(
        a: f64,
        b: f64,
        c: f64,
        alpha: f64,
        beta: f64,
        gamma: f64,
    ) -> Result<Self, CrystalError> {
        for (name, len) in [("a", a), ("b", b), ("c", c)] {
            if !(len > 0.0 && len.is_finite()) {
                return Err(CrystalError::DegenerateCell(format!(
                    "length {name} = {len} must be positive"
                )));
            }
        }
        for (name, ang) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(ang > 0.0 && ang < 180.0) {
                return Err(CrystalError::DegenerateCell(format!(
                    "angle {name} = {ang} outside (0, 180)"
                )));
            }
        }
        let (ca, cb) = ((alpha * DEG).cos(), (beta * DEG).cos());
        let (cg, sg) = ((gamma * DEG).cos(), (gamma * DEG).sin());
        let cy = (ca - cb * cg) / sg;
        let cz2 = 1.0 - cb * cb - cy * cy;
        if cz2 <= 0.0 {
            return Err(CrystalError::DegenerateCell(format!(
                "angles ({alpha}, {beta}, {gamma}) imply non-positive cell volume"
            )));
        }
        let cz = cz2.sqrt();
        Self::from_rows([
            [a, 0.0, 0.0],
            [b * cg, b * sg, 0.0],
            [c * cb, c * cy, c * cz],
        ])
    }

    /// The six parameters `(a, b, c, alpha, beta, gamma)`, angles in degrees.
    /// Inverse of [`Lattice::from_params`] up to rigid rotation of the cell.
    pub fn params(&self) -> [f64; 6] {
        let [v0, v1, v2] = self.rows;
        let (a, b, c) = (norm3(&v0), norm3(&v1), norm3(&v2));
        let alpha = angle_deg(&v1, &v2);
        let beta = angle_deg(&v0, &v2);
        let gamma = angle_deg(&v0, &v1);
        [a, b, c, alpha, beta, gamma]
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.rows
    }

    pub fn volume(&self) -> f64 {
        det3(&self.rows)
    }

    /// Gram matrix G with G[i][j] = v_i . v_j; rotation-invariant cell shape.
    pub fn gram(&self) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = dot3(&self.rows[i], &self.rows[j]);
            }
        }
        g
    }

    /// Perpendicular distance between opposite cell faces along each axis.
    /// Governs how many periodic images a cutoff sphere can reach.
    pub fn heights(&self) -> [f64; 3] {
        let v = self.volume();
        let [v0, v1, v2] = self.rows;
        [
            v / norm3(&cross3(&v1, &v2)),
            v / norm3(&cross3(&v2, &v0)),
            v / norm3(&cross3(&v0, &v1)),
        ]
    }

    /// Cartesian position of a fractional coordinate (row vector times matrix).
    pub fn to_cartesian(&self, frac: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, out_k) in out.iter_mut().enumerate() {
            *out_k = frac[0] * self.rows[0][k] + frac[1] * self.rows[1][k] + frac[2] * self.rows[2][k];
        }
        out
    }
}

/// Derivative of each matrix entry of [`Lattice::from_params`] with respect
/// to the six parameters (angles in degrees). `jac[p][i][j] = dL[i][j]/dp`.
pub fn lattice_param_jacobian(params: &[f64; 6]) -> [[[f64; 3]; 3]; 6] {
    let [a, b, c, alpha, beta, gamma] = *params;
    let _ = a;
    let (sa, ca) = ((alpha * DEG).sin(), (alpha * DEG).cos());
    let (sb, cb) = ((beta * DEG).sin(), (beta * DEG).cos());
    let (sg, cg) = ((gamma * DEG).sin(), (gamma * DEG).cos());
    let cy = (ca - cb * cg) / sg;
    let cz = (1.0 - cb * cb - cy * cy).sqrt();

    let mut jac = [[[0.0; 3]; 3]; 6];
    // d/da
    jac[0][0][0] = 1.0;
    // d/db
    jac[1][1][0] = cg;
    jac[1][1][1] = sg;
    // d/dc
    jac[2][2][0] = cb;
    jac[2][2][1] = cy;
    jac[2][2][2] = cz;
    // d/dalpha (radians first, scaled to degrees at the end)
    let dcy_da = -sa / sg;
    let dcz_da = -cy * dcy_da / cz;
    jac[3][2][1] = c * dcy_da * DEG;
    jac[3][2][2] = c * dcz_da * DEG;
    // d/dbeta
    let dcy_db = sb * cg / sg;
    let dcz_db = (cb * sb - cy * dcy_db) / cz;
    jac[4][2][0] = -c * sb * DEG;
    jac[4][2][1] = c * dcy_db * DEG;
    jac[4][2][2] = c * dcz_db * DEG;
    // d/dgamma
    let dcy_dg = cb - cy * cg / sg;
    let dcz_dg = -cy * dcy_dg / cz;
    jac[5][1][0] = -b * sg * DEG;
    jac[5][1][1] = b * cg * DEG;
    jac[5][2][1] = c * dcy_dg * DEG;
    jac[5][2][2] = c * dcz_dg * DEG;
    jac
}

/// A periodic structure: cell, species ids, and wrapped fractional
/// coordinates, tagged with the composition it realizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Crystal {
    lattice: Lattice,
    species: Vec<u8>,
    frac: Vec<[f64; 3]>,
    composition: String,
}

impl Crystal {
    /// Coordinates are wrapped into `[0, 1)` on construction.
    pub fn new(
        lattice: Lattice,
        species: Vec<u8>,
        frac: Vec<[f64; 3]>,
        composition: impl Into<String>,
    ) -> Result<Self, CrystalError> {
        if species.is_empty() {
            return Err(CrystalError::InvalidStructure("no atoms".into()));
        }
        if species.len() != frac.len() {
            return Err(CrystalError::InvalidStructure(format!(
                "{} species ids but {} coordinate rows",
                species.len(),
                frac.len()
            )));
        }
        let frac = wrap_frac(&frac)?;
        Ok(Self {
            lattice,
            species,
            frac,
            composition: composition.into(),
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn species(&self) -> &[u8] {
        &self.species
    }

    pub fn frac_coords(&self) -> &[[f64; 3]] {
        &self.frac
    }

    pub fn composition(&self) -> &str {
        &self.composition
    }

    pub fn n(&self) -> usize {
        self.species.len()
    }

    pub fn cartesian_coords(&self) -> Vec<[f64; 3]> {
        self.frac.iter().map(|f| self.lattice.to_cartesian(f)).collect()
    }

    pub fn with_lattice(&self, lattice: Lattice) -> Self {
        Self { lattice, ..self.clone() }
    }

    pub fn with_frac_coords(&self, frac: Vec<[f64; 3]>) -> Result<Self, CrystalError> {
        Self::new(self.lattice.clone(), self.species.clone(), frac, self.composition.clone())
    }
}

/// Pairwise Lagrange size reduction of the three base vectors. Returns the
/// reduced rows and the inverse transform `V` with `frac_new = frac . V`.
/// Reduced bases have pairwise projections at most half a vector, which
/// puts the cell angles near [60, 120] degrees.
fn reduce_basis(rows: [[f64; 3]; 3]) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let mut l = rows;
    // V accumulates the inverse of the row operations; entries stay integer.
    let mut v = [[0.0; 3]; 3];
    for (k, row) in v.iter_mut().enumerate() {
        row[k] = 1.0;
    }
    for _sweep in 0..64 {
        let mut changed = false;
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let m = (dot3(&l[i], &l[j]) / dot3(&l[j], &l[j])).round();
                if m == 0.0 {
                    continue;
                }
                let mut candidate = l[i];
                for k in 0..3 {
                    candidate[k] -= m * l[j][k];
                }
                // Only accept strict decreases; ties at half-integers would
                // otherwise oscillate forever.
                if dot3(&candidate, &candidate) < dot3(&l[i], &l[i]) - 1e-12 {
                    l[i] = candidate;
                    // Row op l_i -= m l_j inverts as column op V[:,j] += m V[:,i].
                    for r in 0..3 {
                        v[r][j] += m * v[r][i];
                    }
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (l, v)
}

// Comparison grid for canonical-gauge tie breaking. Candidates are ranked
// on coordinates and parameters rounded to this resolution, so independent
// relaxations of the same basin (which agree to ~1e-6) pick the same
// representative instead of flip-flopping on floating-point noise.
const GAUGE_QUANTUM: f64 = 1e-3;

fn quantize(v: f64) -> i64 {
    (v / GAUGE_QUANTUM).round() as i64
}

/// Quantized fractional component with the 1.0 == 0.0 identification.
fn quantize_frac(v: f64) -> i64 {
    quantize(v).rem_euclid((1.0 / GAUGE_QUANTUM).round() as i64)
}

/// Identifies coordinates within half a grid cell of 1.0 with 0.0, so two
/// noisy copies of an atom sitting on the cell boundary end up with the
/// same representative instead of differing by a full cell.
fn snap_frac(v: f64) -> f64 {
    if v >= 1.0 - GAUGE_QUANTUM / 2.0 {
        0.0
    } else {
        v
    }
}

/// Canonical gauge for a periodic structure.
///
/// The same physical crystal can appear with any unimodular re-description
/// of its lattice basis, any rigid translation of the fractional
/// coordinates, and any atom order within a species. This picks one
/// representative: reduce the basis, then over every proper axis
/// relabeling of the reduced basis and every choice of origin atom, build
/// the (lattice parameters, species-sorted coordinates) candidate and keep
/// the smallest under quantized lexicographic comparison. Energies and
/// pair distances are unchanged.
pub fn canonicalize(crystal: &Crystal) -> Crystal {
    let (reduced, v) = reduce_basis(crystal.lattice().rows());
    let species = crystal.species();
    let n = crystal.n();

    // Coordinates in the reduced basis.
    let frac_red: Vec<[f64; 3]> = crystal
        .frac_coords()
        .iter()
        .map(|f| {
            [
                f[0] * v[0][0] + f[1] * v[1][0] + f[2] * v[2][0],
                f[0] * v[0][1] + f[1] * v[1][1] + f[2] * v[2][1],
                f[0] * v[0][2] + f[1] * v[1][2] + f[2] * v[2][2],
            ]
        })
        .collect();

    const PERMS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut best_key: Option<(Vec<i64>, Vec<i64>)> = None;
    let mut best: Option<([f64; 6], Vec<[f64; 3]>)> = None;

    for perm in PERMS {
        for signs_bits in 0..8u8 {
            let signs = [
                if signs_bits & 1 == 0 { 1.0 } else { -1.0 },
                if signs_bits & 2 == 0 { 1.0 } else { -1.0 },
                if signs_bits & 4 == 0 { 1.0 } else { -1.0 },
            ];
            let mut rows = [[0.0; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    rows[i][k] = signs[i] * reduced[perm[i]][k];
                }
            }
            // Only proper (right-handed) relabelings build a lattice.
            let Ok(lattice) = Lattice::from_rows(rows) else {
                continue;
            };
            let params = lattice.params();
            let params_key: Vec<i64> = params.iter().map(|&p| quantize(p)).collect();
            if let Some((current, _)) = &best_key {
                if params_key > *current {
                    continue;
                }
            }

            // Coordinates on the relabeled axes: the coefficient on new
            // row i is signs[i] * f_red[perm[i]].
            let oriented: Vec<[f64; 3]> = frac_red
                .iter()
                .map(|f| {
                    [
                        signs[0] * f[perm[0]],
                        signs[1] * f[perm[1]],
                        signs[2] * f[perm[2]],
                    ]
                })
                .collect();

            for origin in 0..n {
                let shift = oriented[origin];
                let mut atoms: Vec<(u8, [i64; 3], [f64; 3])> = oriented
                    .iter()
                    .zip(species)
                    .map(|(f, &s)| {
                        let w = [
                            snap_frac(wrap_component(f[0] - shift[0])),
                            snap_frac(wrap_component(f[1] - shift[1])),
                            snap_frac(wrap_component(f[2] - shift[2])),
                        ];
                        (s, [quantize_frac(w[0]), quantize_frac(w[1]), quantize_frac(w[2])], w)
                    })
                    .collect();
                atoms.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
                let coords_key: Vec<i64> = atoms
                    .iter()
                    .flat_map(|(_, q, _)| q.iter().copied())
                    .collect();
                let key = (params_key.clone(), coords_key);
                let better = match &best_key {
                    None => true,
                    Some(current) => key < *current,
                };
                if better {
                    best_key = Some(key);
                    best = Some((params, atoms.into_iter().map(|(_, _, w)| w).collect()));
                }
            }
        }
    }

    let (params, coords) = best.expect("a valid right-handed relabeling always exists");
    // The canonical cell is the lower-triangular build of the chosen
    // parameters, which also erases any rigid rotation.
    let lattice =
        Lattice::from_params(params[0], params[1], params[2], params[3], params[4], params[5])
            .expect("params of a valid lattice rebuild");
    let mut sorted_species = species.to_vec();
    sorted_species.sort_unstable();
    Crystal::new(lattice, sorted_species, coords, crystal.composition())
        .expect("canonical form of a valid crystal is valid")
}

/// Wraps one fractional component into `[0, 1)`.
pub fn wrap_component(x: f64) -> f64 {
    let w = x - x.floor();
    // x - floor(x) can round up to exactly 1.0 for tiny negative inputs.
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Wraps every fractional coordinate into `[0, 1)`; idempotent.
pub fn wrap_frac(coords: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, CrystalError> {
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CrystalError::NonFinite);
    }
    Ok(coords
        .iter()
        .map(|row| [wrap_component(row[0]), wrap_component(row[1]), wrap_component(row[2])])
        .collect())
}

/// Cartesian displacement from atom `i` to the nearest periodic image of
/// atom `j`, found by wrapping the fractional difference to `[-0.5, 0.5)`
/// and scanning neighbor shifts in `{-1..1}^3`. Exact whenever the cutoff
/// is below half the minimum cell height, which holds for the moderately
/// skewed cells this crate generates (angles in [60, 120] degrees).
pub fn min_image_displacement(crystal: &Crystal, i: usize, j: usize) -> [f64; 3] {
    debug_assert!(i != j, "minimum image is between distinct atoms");
    let fi = crystal.frac[i];
    let fj = crystal.frac[j];
    let mut d = [0.0; 3];
    for k in 0..3 {
        let raw = fj[k] - fi[k];
        d[k] = raw - raw.round();
    }
    let mut best = [f64::INFINITY; 3];
    let mut best_n2 = f64::INFINITY;
    for sx in -1..=1 {
        for sy in -1..=1 {
            for sz in -1..=1 {
                let u = [d[0] + sx as f64, d[1] + sy as f64, d[2] + sz as f64];
                let cart = crystal.lattice.to_cartesian(&u);
                let n2 = dot3(&cart, &cart);
                if n2 < best_n2 {
                    best_n2 = n2;
                    best = cart;
                }
            }
        }
    }
    best
}

pub fn min_image_distance(crystal: &Crystal, i: usize, j: usize) -> f64 {
    norm3(&min_image_displacement(crystal, i, j))
}

/// Normalization constants that keep every feature O(1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScale {
    /// Reference cell length; lattice lengths are divided by this.
    pub len_ref: f64,
}

impl FeatureScale {
    pub fn new(len_ref: f64) -> Self {
        Self { len_ref }
    }
}

/// Flat feature layout: six normalized lattice parameters followed by the
/// row-major fractional coordinates, dimension `6 + 3n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn feature_dim(n_atoms: usize) -> usize {
    6 + 3 * n_atoms
}

pub fn featurize(crystal: &Crystal, scale: &FeatureScale) -> FeatureVector {
    let p = crystal.lattice.params();
    let mut values = Vec::with_capacity(feature_dim(crystal.n()));
    for &len in &p[..3] {
        values.push(len / scale.len_ref);
    }
    for &ang in &p[3..] {
        values.push(ang / 180.0);
    }
    for row in &crystal.frac {
        values.extend_from_slice(row);
    }
    FeatureVector { values }
}

/// Rebuilds a crystal from a feature vector, undoing the normalization of
/// [`featurize`]. The cell comes back in the canonical lower-triangular
/// orientation, so only the Gram matrix of a rotated input is preserved.
pub fn defeaturize(
    features: &FeatureVector,
    species: &[u8],
    composition: &str,
    scale: &FeatureScale,
) -> Result<Crystal, CrystalError> {
    let n = species.len();
    if features.values.len() != feature_dim(n) {
        return Err(CrystalError::InvalidStructure(format!(
            "feature dimension {} does not match {} atoms",
            features.values.len(),
            n
        )));
    }
    let v = &features.values;
    let lattice = Lattice::from_params(
        v[0] * scale.len_ref,
        v[1] * scale.len_ref,
        v[2] * scale.len_ref,
        v[3] * 180.0,
        v[4] * 180.0,
        v[5] * 180.0,
    )?;
    let frac: Vec<[f64; 3]> = v[6..]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Crystal::new(lattice, species.to_vec(), frac, composition)
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    dot3(&m[0], &cross3(&m[1], &m[2]))
}

fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cosv = (dot3(a, b) / (norm3(a) * norm3(b))).clamp(-1.0, 1.0);
    cosv.acos() / DEG
}
