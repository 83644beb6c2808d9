//! Compression of states and controls: POD bases, feature normalization,
//! and the [`Reducer`] that composes them with learned autoencoders.
//!
//! POD snapshots are stored column-wise; the basis minimizes the train-set
//! reconstruction MSE among all linear rank-n maps, with the residual given
//! exactly by the discarded singular values. Controls get one basis per
//! velocity component, merged by singular value, so the two components
//! never leak into each other's modes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::neural::Mlp;
use crate::ocp::Trajectory;
use crate::{Error, Result};

/// Smallest feature range the min-max normalization will divide by.
const RANGE_FLOOR: f64 = 1e-12;

/// Orthonormal linear basis from a singular value decomposition of
/// snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// D × n, orthonormal columns.
    pub modes: DMatrix<f64>,
    /// Full singular-value spectrum of the snapshot matrix, descending.
    pub singular_values: DVector<f64>,
    /// Snapshot mean, subtracted before projection when present.
    pub mean: Option<DVector<f64>>,
}

/// How many POD modes to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModeSelection {
    /// Exactly this many modes.
    Count(usize),
    /// Smallest count whose discarded relative energy Σ_tail σ²/Σ σ² is at
    /// most this tolerance.
    EnergyTol(f64),
}

impl PodBasis {
    pub fn full_dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    /// Projection coefficients Vᵀ(x − mean).
    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.mean {
            None => self.modes.tr_mul(x),
            Some(m) => self.modes.tr_mul(&(x - m)),
        }
    }

    /// Reconstruction V z + mean.
    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        let x = &self.modes * z;
        match &self.mean {
            None => x,
            Some(m) => x + m,
        }
    }

    /// Encodes a batch with samples as rows (n × D in, n × n_modes out).
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.mean {
            None => x * &self.modes,
            Some(m) => {
                let mut c = x.clone();
                for mut row in c.row_iter_mut() {
                    row -= m.transpose();
                }
                c * &self.modes
            }
        }
    }

    /// Decodes a batch with samples as rows (n × n_modes in, n × D out).
    pub fn decode_batch(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z * self.modes.transpose();
        if let Some(m) = &self.mean {
            for mut row in x.row_iter_mut() {
                row += m.transpose();
            }
        }
        x
    }

    /// Basis restricted to the first n modes (spectrum kept in full).
    pub fn truncated(&self, n: usize) -> Result<PodBasis> {
        if n == 0 || n > self.n_modes() {
            return Err(Error::invalid(format!(
                "cannot truncate a {}-mode basis to {n} modes",
                self.n_modes()
            )));
        }
        Ok(PodBasis {
            modes: self.modes.columns(0, n).into_owned(),
            singular_values: self.singular_values.clone(),
            mean: self.mean.clone(),
        })
    }

    /// Discarded relative energy if only the first n modes were kept.
    pub fn discarded_energy(&self, n: usize) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 0.0;
        }
        let tail: f64 = self.singular_values.iter().skip(n).map(|s| s * s).sum();
        tail / total
    }
}

fn select_modes(sv: &DVector<f64>, selection: ModeSelection, available: usize) -> Result<usize> {
    match selection {
        ModeSelection::Count(n) => {
            if n == 0 || n > available {
                return Err(Error::invalid(format!(
                    "requested {n} POD modes but only {available} are available"
                )));
            }
            Ok(n)
        }
        ModeSelection::EnergyTol(tol) => {
            if !(0.0..1.0).contains(&tol) {
                return Err(Error::invalid(format!("energy tolerance {tol} outside [0, 1)")));
            }
            let total: f64 = sv.iter().map(|s| s * s).sum();
            if total == 0.0 {
                return Ok(1.min(available).max(1));
            }
            let mut tail = total;
            for n in 1..=available {
                tail -= sv[n - 1] * sv[n - 1];
                if tail <= tol * total {
                    return Ok(n);
                }
            }
            Ok(available)
        }
    }
}

/// POD of a D × n_snap snapshot matrix (snapshots are columns).
pub fn compute_pod(
    snapshots: &DMatrix<f64>,
    selection: ModeSelection,
    mean_center: bool,
) -> Result<PodBasis> {
    if snapshots.ncols() == 0 || snapshots.nrows() == 0 {
        return Err(Error::invalid("empty snapshot matrix"));
    }
    let mean = if mean_center {
        let n = snapshots.ncols() as f64;
        let mut m = DVector::zeros(snapshots.nrows());
        for c in snapshots.column_iter() {
            m += c;
        }
        Some(m / n)
    } else {
        None
    };
    let mut a = snapshots.clone();
    if let Some(m) = &mean {
        for mut c in a.column_iter_mut() {
            c -= m;
        }
    }
    let svd = a.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::SolverFailure("SVD did not produce U".into()))?;
    let sv = svd.singular_values;
    debug_assert!(
        sv.as_slice().windows(2).all(|w| w[0] >= w[1]),
        "singular values must come out sorted"
    );
    let n = select_modes(&sv, selection, u.ncols())?;
    Ok(PodBasis {
        modes: u.columns(0, n).into_owned(),
        singular_values: sv,
        mean,
    })
}

/// One POD basis per velocity component on stacked [ux; uy] snapshots
/// (2N × n_snap), n modes from each component, merged by singular value.
/// The merged modes keep disjoint support, so the basis stays orthonormal.
pub fn control_pod_componentwise(
    snapshots: &DMatrix<f64>,
    n_per_component: usize,
    mean_center: bool,
) -> Result<PodBasis> {
    let d2 = snapshots.nrows();
    if d2 % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "stacked control snapshots must have even row count, got {d2}"
        )));
    }
    let n = d2 / 2;
    let top = snapshots.rows(0, n).into_owned();
    let bot = snapshots.rows(n, n).into_owned();
    let px = compute_pod(&top, ModeSelection::Count(n_per_component), mean_center)?;
    let py = compute_pod(&bot, ModeSelection::Count(n_per_component), mean_center)?;

    // merge modes of both components, strongest singular values first;
    // ties break toward the x component to stay deterministic
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(2 * n_per_component);
    let (mut ix, mut iy) = (0usize, 0usize);
    while ix < n_per_component || iy < n_per_component {
        let sx = if ix < n_per_component { px.singular_values[ix] } else { f64::NEG_INFINITY };
        let sy = if iy < n_per_component { py.singular_values[iy] } else { f64::NEG_INFINITY };
        if sx >= sy {
            order.push((0, ix));
            ix += 1;
        } else {
            order.push((1, iy));
            iy += 1;
        }
    }
    let mut modes = DMatrix::zeros(d2, 2 * n_per_component);
    for (col, (comp, idx)) in order.iter().enumerate() {
        if *comp == 0 {
            modes.view_mut((0, col), (n, 1)).copy_from(&px.modes.column(*idx));
        } else {
            modes.view_mut((n, col), (n, 1)).copy_from(&py.modes.column(*idx));
        }
    }
    let mut sv: Vec<f64> = px
        .singular_values
        .iter()
        .chain(py.singular_values.iter())
        .copied()
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mean = match (px.mean, py.mean) {
        (Some(mx), Some(my)) => {
            let mut m = DVector::zeros(d2);
            m.rows_mut(0, n).copy_from(&mx);
            m.rows_mut(n, n).copy_from(&my);
            Some(m)
        }
        _ => None,
    };
    Ok(PodBasis { modes, singular_values: DVector::from_vec(sv), mean })
}

/// Per-feature min-max map onto [0, 1], fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub min: DVector<f64>,
    /// max − min, floored so constant features map to zero instead of NaN.
    pub range: DVector<f64>,
}

impl Normalization {
    /// Fits per-column bounds over a samples-as-rows matrix.
    pub fn fit(samples: &DMatrix<f64>) -> Result<Normalization> {
        if samples.nrows() == 0 {
            return Err(Error::invalid("cannot fit normalization on zero samples"));
        }
        let d = samples.ncols();
        let mut min = DVector::from_element(d, f64::INFINITY);
        let mut max = DVector::from_element(d, f64::NEG_INFINITY);
        for r in 0..samples.nrows() {
            for c in 0..d {
                let v = samples[(r, c)];
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        let range = DVector::from_fn(d, |c, _| {
            let r = max[c] - min[c];
            if r < RANGE_FLOOR {
                1.0
            } else {
                r
            }
        });
        Ok(Normalization { min, range })
    }

    /// The identity map, for pipelines that skip normalization.
    pub fn identity(dim: usize) -> Normalization {
        Normalization { min: DVector::zeros(dim), range: DVector::from_element(dim, 1.0) }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |k, _| (x[k] - self.min[k]) / self.range[k])
    }

    pub fn invert(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |k, _| z[k] * self.range[k] + self.min[k])
    }

    pub fn apply_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.min[c]) / self.range[c])
    }

    pub fn invert_batch(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| z[(r, c)] * self.range[c] + self.min[c])
    }
}

/// Reducer family selector used by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    Pod,
    Ae,
    PodAe,
}

/// A compression map between full vectors and latent coordinates.
///
/// The three variants share one calling convention; only the composition
/// differs. Plain POD applies no normalization, so its encode and decode
/// are bitwise identical to [`PodBasis::encode`]/[`PodBasis::decode`].
#[derive(Debug, Clone, PartialEq)]
pub enum Reducer {
    Pod {
        basis: PodBasis,
    },
    /// Autoencoder on normalized full vectors.
    Ae {
        encoder: Mlp,
        decoder: Mlp,
        norm: Normalization,
    },
    /// Autoencoder on normalized POD coefficients.
    PodAe {
        basis: PodBasis,
        encoder: Mlp,
        decoder: Mlp,
        norm: Normalization,
    },
}

impl Reducer {
    pub fn kind(&self) -> ReducerKind {
        match self {
            Reducer::Pod { .. } => ReducerKind::Pod,
            Reducer::Ae { .. } => ReducerKind::Ae,
            Reducer::PodAe { .. } => ReducerKind::PodAe,
        }
    }

    pub fn full_dim(&self) -> usize {
        match self {
            Reducer::Pod { basis } => basis.full_dim(),
            Reducer::Ae { encoder, .. } => encoder.in_dim(),
            Reducer::PodAe { basis, .. } => basis.full_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Reducer::Pod { basis } => basis.n_modes(),
            Reducer::Ae { encoder, .. } => encoder.out_dim(),
            Reducer::PodAe { encoder, .. } => encoder.out_dim(),
        }
    }

    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Reducer::Pod { basis } => basis.encode(x),
            Reducer::Ae { encoder, norm, .. } => encoder.forward(&norm.apply(x)),
            Reducer::PodAe { basis, encoder, norm, .. } => {
                encoder.forward(&norm.apply(&basis.encode(x)))
            }
        }
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Reducer::Pod { basis } => basis.decode(z),
            Reducer::Ae { decoder, norm, .. } => norm.invert(&decoder.forward(z)),
            Reducer::PodAe { basis, decoder, norm, .. } => {
                basis.decode(&norm.invert(&decoder.forward(z)))
            }
        }
    }

    pub fn encode_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Reducer::Pod { basis } => basis.encode_batch(x),
            Reducer::Ae { encoder, norm, .. } => encoder.forward_batch(&norm.apply_batch(x)),
            Reducer::PodAe { basis, encoder, norm, .. } => {
                encoder.forward_batch(&norm.apply_batch(&basis.encode_batch(x)))
            }
        }
    }

    pub fn decode_batch(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Reducer::Pod { basis } => basis.decode_batch(z),
            Reducer::Ae { decoder, norm, .. } => norm.invert_batch(&decoder.forward_batch(z)),
            Reducer::PodAe { basis, decoder, norm, .. } => {
                basis.decode_batch(&norm.invert_batch(&decoder.forward_batch(z)))
            }
        }
    }
}

/// All states of the given trajectories as snapshot columns,
/// trajectory-major (every time level, finals included).
pub fn state_snapshot_matrix(trajs: &[&Trajectory]) -> Result<DMatrix<f64>> {
    let first = trajs.first().ok_or_else(|| Error::invalid("no trajectories"))?;
    let d = first.grid().n_cells();
    let cols: usize = trajs.iter().map(|t| t.states.len()).sum();
    let mut out = DMatrix::zeros(d, cols);
    let mut c = 0;
    for t in trajs {
        for s in &t.states {
            out.column_mut(c).copy_from(&s.values);
            c += 1;
        }
    }
    Ok(out)
}

/// All controls as stacked [ux; uy] snapshot columns, trajectory-major.
pub fn control_snapshot_matrix(trajs: &[&Trajectory]) -> Result<DMatrix<f64>> {
    let first = trajs.first().ok_or_else(|| Error::invalid("no trajectories"))?;
    let d = first.grid().n_cells();
    let cols: usize = trajs.iter().map(|t| t.controls.len()).sum();
    let mut out = DMatrix::zeros(2 * d, cols);
    let mut c = 0;
    for t in trajs {
        for u in &t.controls {
            out.view_mut((0, c), (d, 1)).copy_from(&u.ux);
            out.view_mut((d, c), (d, 1)).copy_from(&u.uy);
            c += 1;
        }
    }
    Ok(out)
}

/// Mean relative reconstruction error over sample rows:
/// mean of ‖t − a‖/‖t‖, skipping zero-norm rows with a warning.
pub fn relative_error(truth: &DMatrix<f64>, approx: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != approx.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relative_error shapes {:?} vs {:?}",
            truth.shape(),
            approx.shape()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for r in 0..truth.nrows() {
        let tn = truth.row(r).norm();
        if tn == 0.0 {
            skipped += 1;
            continue;
        }
        total += (truth.row(r) - approx.row(r)).norm() / tn;
        counted += 1;
    }
    if skipped > 0 {
        log::warn!("relative_error skipped {skipped} zero-norm rows");
    }
    if counted == 0 {
        return Err(Error::invalid("relative_error: all rows have zero norm"));
    }
    Ok(total / counted as f64)
}
