//! On-disk artifacts: a single container format for datasets, models, and
//! closed-loop reports, plus CSV export.
//!
//! Layout of an artifact file:
//!
//! ```text
//! bytes 0..8    magic "ROMFBK01"
//! bytes 8..12   header length (u32, little endian)
//! header        UTF-8 JSON: {"version", "kind", "meta", "tensors"}
//! payload       tensor data, f64 little endian, in header order
//! ```
//!
//! Matrices are stored row-major. Readers validate the magic, the version,
//! every tensor's byte length, and that no trailing bytes follow the
//! payload, so truncated or oversized files fail loudly instead of
//! yielding shifted data. JSON object keys serialize in sorted order and
//! floats in shortest round-trip form; writing the same artifact twice
//! yields identical bytes. Wall-clock measurements are deliberately kept
//! out of artifacts so re-runs stay byte-comparable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as IoWrite};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::controller::LoopReport;
use crate::grid::{ControlField, FomConfig, Grid, Scenario, StateField};
use crate::neural::{Mlp, LEAKY_SLOPE};
use crate::ocp::{Dataset, TrajMeta, Trajectory};
use crate::reduction::{Normalization, PodBasis, Reducer};
use crate::training::{ControllerModel, FeatureMap, ModelMeta};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ROMFBK01";
pub const FORMAT_VERSION: u64 = 1;
/// Headers are small; anything past this is a corrupt length field.
const MAX_HEADER_BYTES: u32 = 1 << 26;

/// A named block of f64 data with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect = checked_len(&shape)?;
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { name: name.to_string(), shape, data })
    }

    pub fn from_vector(name: &str, v: &DVector<f64>) -> Tensor {
        Tensor { name: name.to_string(), shape: vec![v.len()], data: v.as_slice().to_vec() }
    }

    /// Row-major serialization of a matrix.
    pub fn from_matrix(name: &str, m: &DMatrix<f64>) -> Tensor {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Tensor { name: name.to_string(), shape: vec![m.nrows(), m.ncols()], data }
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, expected a vector",
                self.name, self.shape
            )));
        }
        Ok(DVector::from_vec(self.data.clone()))
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, expected a matrix",
                self.name, self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(DMatrix::from_fn(r, c, |i, j| self.data[i * c + j]))
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} overflows")))
    })
}

/// An artifact in memory: a kind tag, free-form JSON metadata, and the
/// ordered tensor list.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub kind: String,
    pub meta: Value,
    tensors: Vec<Tensor>,
}

impl Artifact {
    pub fn new(kind: &str) -> Artifact {
        Artifact { kind: kind.to_string(), meta: json!({}), tensors: Vec::new() }
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.tensors.iter().any(|t| t.name == tensor.name) {
            return Err(Error::invalid(format!("duplicate tensor name {}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::Format(format!("artifact is missing tensor {name}")))
    }

    pub fn write_to(&self, w: &mut impl IoWrite) -> Result<()> {
        let header = json!({
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "meta": self.meta,
            "tensors": self.tensors.iter().map(|t| json!({
                "name": t.name,
                "shape": t.shape,
            })).collect::<Vec<_>>(),
        });
        let header_bytes = serde_json::to_vec(&header)?;
        if header_bytes.len() > MAX_HEADER_BYTES as usize {
            return Err(Error::Format("artifact header exceeds the size cap".into()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            buf.reserve(t.data.len() * 8);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Artifact> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an artifact file (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let header_len = u32::from_le_bytes(len);
        if header_len > MAX_HEADER_BYTES {
            return Err(Error::Format(format!("header length {header_len} exceeds the cap")));
        }
        let mut header_bytes = vec![0u8; header_len as usize];
        r.read_exact(&mut header_bytes)?;
        let header: Value = serde_json::from_slice(&header_bytes)?;
        let version = header
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("header has no version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported artifact version {version}")));
        }
        let kind = header
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format("header has no kind".into()))?
            .to_string();
        let meta = header.get("meta").cloned().unwrap_or(json!({}));
        let descs = header
            .get("tensors")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("header has no tensor list".into()))?;
        let mut tensors = Vec::with_capacity(descs.len());
        for d in descs {
            let name = d
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Format("tensor entry has no name".into()))?;
            let shape: Vec<usize> = d
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Format(format!("tensor {name} has no shape")))?
                .iter()
                .map(|v| {
                    v.as_u64()
                        .map(|u| u as usize)
                        .ok_or_else(|| Error::Format(format!("tensor {name} shape is not integral")))
                })
                .collect::<Result<_>>()?;
            let n = checked_len(&shape)?;
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|e| {
                Error::Format(format!("tensor {name} is truncated ({e})"))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name: name.to_string(), shape, data });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after the tensor payload".into()));
        }
        Ok(Artifact { kind, meta, tensors })
    }

    /// Writes atomically: a temporary sibling file is renamed into place,
    /// so readers never observe a half-written artifact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Artifact> {
        let mut r = BufReader::new(File::open(path)?);
        Artifact::read_from(&mut r)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".tmp");
    PathBuf::from(os)
}

// ---- JSON helpers --------------------------------------------------------

fn get<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Format(format!("metadata is missing field {key}")))
}

fn get_usize(v: &Value, key: &str) -> Result<usize> {
    get(v, key)?
        .as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::Format(format!("metadata field {key} is not an integer")))
}

fn get_f64(v: &Value, key: &str) -> Result<f64> {
    get(v, key)?
        .as_f64()
        .ok_or_else(|| Error::Format(format!("metadata field {key} is not a number")))
}

fn get_str<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    get(v, key)?
        .as_str()
        .ok_or_else(|| Error::Format(format!("metadata field {key} is not a string")))
}

fn from_value<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T> {
    serde_json::from_value(get(v, key)?.clone()).map_err(Error::Json)
}

// ---- datasets ------------------------------------------------------------

fn states_matrix(traj: &Trajectory) -> DMatrix<f64> {
    let d = traj.grid().n_cells();
    DMatrix::from_fn(traj.states.len(), d, |r, c| traj.states[r].values[c])
}

fn controls_matrix(traj: &Trajectory) -> DMatrix<f64> {
    let d = traj.grid().n_cells();
    DMatrix::from_fn(traj.controls.len(), 2 * d, |r, c| {
        if c < d {
            traj.controls[r].ux[c]
        } else {
            traj.controls[r].uy[c - d]
        }
    })
}

pub fn dataset_to_artifact(ds: &Dataset) -> Result<Artifact> {
    let mut art = Artifact::new("dataset");
    let trajs: Vec<Value> = ds
        .trajectories
        .iter()
        .zip(&ds.meta)
        .map(|(t, m)| {
            json!({
                "scenario": t.scenario,
                "initial_center": t.initial_center,
                "cost": t.cost,
                "meta": m,
            })
        })
        .collect();
    art.meta = json!({
        "nx": ds.grid.nx(),
        "fom": ds.fom,
        "trajectories": trajs,
    });
    for (i, t) in ds.trajectories.iter().enumerate() {
        art.push(Tensor::from_matrix(&format!("states.{i}"), &states_matrix(t)))?;
        art.push(Tensor::from_matrix(&format!("controls.{i}"), &controls_matrix(t)))?;
    }
    Ok(art)
}

pub fn dataset_from_artifact(art: &Artifact) -> Result<Dataset> {
    if art.kind != "dataset" {
        return Err(Error::Format(format!("expected a dataset artifact, found {}", art.kind)));
    }
    let grid = Grid::build(get_usize(&art.meta, "nx")?)?;
    let fom: FomConfig = from_value(&art.meta, "fom")?;
    let entries = get(&art.meta, "trajectories")?
        .as_array()
        .ok_or_else(|| Error::Format("trajectory list is not an array".into()))?;
    let mut trajectories = Vec::with_capacity(entries.len());
    let mut meta = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let scenario: Scenario = from_value(e, "scenario")?;
        let initial_center: Option<(f64, f64)> = from_value(e, "initial_center")?;
        let cost: Option<f64> = from_value(e, "cost")?;
        let tm: TrajMeta = from_value(e, "meta")?;
        let states_m = art.require(&format!("states.{i}"))?.to_matrix()?;
        let controls_m = art.require(&format!("controls.{i}"))?.to_matrix()?;
        let d = grid.n_cells();
        if states_m.ncols() != d || controls_m.ncols() != 2 * d {
            return Err(Error::Format(format!("trajectory {i} tensors do not match the grid")));
        }
        let states = (0..states_m.nrows())
            .map(|r| StateField::new(grid, states_m.row(r).transpose()))
            .collect::<Result<Vec<_>>>()?;
        let controls = (0..controls_m.nrows())
            .map(|r| {
                ControlField::new(
                    grid,
                    DVector::from_fn(d, |k, _| controls_m[(r, k)]),
                    DVector::from_fn(d, |k, _| controls_m[(r, d + k)]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory { scenario, initial_center, states, controls, cost });
        meta.push(tm);
    }
    Ok(Dataset { grid, fom, trajectories, meta })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    dataset_to_artifact(ds)?.save(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_artifact(&Artifact::load(path)?)
}

// ---- models ----------------------------------------------------------------

fn push_mlp(art: &mut Artifact, name: &str, mlp: &Mlp) -> Result<()> {
    art.push(Tensor::from_vector(name, &mlp.flatten_params()))
}

fn read_mlp(art: &Artifact, name: &str, dims: &[usize], slope: f64) -> Result<Mlp> {
    let mut mlp = Mlp::new(dims, slope, 0)?;
    let flat = art.require(name)?.to_vector()?;
    mlp.assign_params(flat.as_slice())?;
    Ok(mlp)
}

fn push_norm(art: &mut Artifact, role: &str, norm: &Normalization) -> Result<()> {
    art.push(Tensor::from_vector(&format!("{role}.norm_min"), &norm.min))?;
    art.push(Tensor::from_vector(&format!("{role}.norm_range"), &norm.range))
}

fn read_norm(art: &Artifact, role: &str) -> Result<Normalization> {
    Ok(Normalization {
        min: art.require(&format!("{role}.norm_min"))?.to_vector()?,
        range: art.require(&format!("{role}.norm_range"))?.to_vector()?,
    })
}

fn push_basis(art: &mut Artifact, role: &str, basis: &PodBasis) -> Result<()> {
    art.push(Tensor::from_matrix(&format!("{role}.modes"), &basis.modes))?;
    art.push(Tensor::from_vector(
        &format!("{role}.singular_values"),
        &basis.singular_values,
    ))?;
    if let Some(mean) = &basis.mean {
        art.push(Tensor::from_vector(&format!("{role}.mean"), mean))?;
    }
    Ok(())
}

fn read_basis(art: &Artifact, role: &str) -> Result<PodBasis> {
    Ok(PodBasis {
        modes: art.require(&format!("{role}.modes"))?.to_matrix()?,
        singular_values: art.require(&format!("{role}.singular_values"))?.to_vector()?,
        mean: art
            .tensor(&format!("{role}.mean"))
            .map(Tensor::to_vector)
            .transpose()?,
    })
}

fn reducer_meta(reducer: &Reducer) -> Value {
    match reducer {
        Reducer::Pod { .. } => json!({"kind": "pod"}),
        Reducer::Ae { encoder, decoder, .. } => json!({
            "kind": "ae",
            "enc_dims": encoder.layer_dims(),
            "dec_dims": decoder.layer_dims(),
            "slope": encoder.slope(),
        }),
        Reducer::PodAe { encoder, decoder, .. } => json!({
            "kind": "pod_ae",
            "enc_dims": encoder.layer_dims(),
            "dec_dims": decoder.layer_dims(),
            "slope": encoder.slope(),
        }),
    }
}

fn push_reducer(art: &mut Artifact, role: &str, reducer: &Reducer) -> Result<()> {
    match reducer {
        Reducer::Pod { basis } => push_basis(art, role, basis),
        Reducer::Ae { encoder, decoder, norm } => {
            push_mlp(art, &format!("{role}.enc"), encoder)?;
            push_mlp(art, &format!("{role}.dec"), decoder)?;
            push_norm(art, role, norm)
        }
        Reducer::PodAe { basis, encoder, decoder, norm } => {
            push_basis(art, role, basis)?;
            push_mlp(art, &format!("{role}.enc"), encoder)?;
            push_mlp(art, &format!("{role}.dec"), decoder)?;
            push_norm(art, role, norm)
        }
    }
}

fn read_reducer(art: &Artifact, role: &str, meta: &Value) -> Result<Reducer> {
    let kind = get_str(meta, "kind")?;
    match kind {
        "pod" => Ok(Reducer::Pod { basis: read_basis(art, role)? }),
        "ae" | "pod_ae" => {
            let enc_dims: Vec<usize> = from_value(meta, "enc_dims")?;
            let dec_dims: Vec<usize> = from_value(meta, "dec_dims")?;
            let slope = get_f64(meta, "slope")?;
            let encoder = read_mlp(art, &format!("{role}.enc"), &enc_dims, slope)?;
            let decoder = read_mlp(art, &format!("{role}.dec"), &dec_dims, slope)?;
            let norm = read_norm(art, role)?;
            if kind == "ae" {
                Ok(Reducer::Ae { encoder, decoder, norm })
            } else {
                Ok(Reducer::PodAe { basis: read_basis(art, role)?, encoder, decoder, norm })
            }
        }
        other => Err(Error::Format(format!("unknown reducer kind {other}"))),
    }
}

pub fn model_to_artifact(model: &ControllerModel) -> Result<Artifact> {
    let mut art = Artifact::new("model");
    art.meta = json!({
        "nx": model.meta.grid.nx(),
        "fom": model.meta.fom,
        "variance": model.meta.variance,
        "feature_map": model.feature_map,
        "state": reducer_meta(&model.state_reducer),
        "control": reducer_meta(&model.control_reducer),
        "policy_dims": model.policy.layer_dims(),
        "policy_slope": model.policy.slope(),
        "forward_dims": model.forward_model.as_ref().map(|f| f.layer_dims().to_vec()),
    });
    push_reducer(&mut art, "state", &model.state_reducer)?;
    push_reducer(&mut art, "control", &model.control_reducer)?;
    art.push(Tensor::from_vector("mu.norm_min", &model.mu_norm.min))?;
    art.push(Tensor::from_vector("mu.norm_range", &model.mu_norm.range))?;
    push_mlp(&mut art, "policy", &model.policy)?;
    if let Some(fwd) = &model.forward_model {
        push_mlp(&mut art, "forward", fwd)?;
    }
    Ok(art)
}

pub fn model_from_artifact(art: &Artifact) -> Result<ControllerModel> {
    if art.kind != "model" {
        return Err(Error::Format(format!("expected a model artifact, found {}", art.kind)));
    }
    let grid = Grid::build(get_usize(&art.meta, "nx")?)?;
    let fom: FomConfig = from_value(&art.meta, "fom")?;
    let variance = get_f64(&art.meta, "variance")?;
    let feature_map: FeatureMap = from_value(&art.meta, "feature_map")?;
    let state_reducer = read_reducer(art, "state", get(&art.meta, "state")?)?;
    let control_reducer = read_reducer(art, "control", get(&art.meta, "control")?)?;
    let mu_norm = Normalization {
        min: art.require("mu.norm_min")?.to_vector()?,
        range: art.require("mu.norm_range")?.to_vector()?,
    };
    let policy_dims: Vec<usize> = from_value(&art.meta, "policy_dims")?;
    let policy_slope = get_f64(&art.meta, "policy_slope")?;
    let policy = read_mlp(art, "policy", &policy_dims, policy_slope)?;
    let forward_dims: Option<Vec<usize>> = from_value(&art.meta, "forward_dims")?;
    let forward_model = forward_dims
        .map(|dims| read_mlp(art, "forward", &dims, LEAKY_SLOPE))
        .transpose()?;
    Ok(ControllerModel {
        state_reducer,
        control_reducer,
        policy,
        forward_model,
        mu_norm,
        feature_map,
        meta: ModelMeta { grid, fom, variance },
    })
}

pub fn save_model(path: &Path, model: &ControllerModel) -> Result<()> {
    model_to_artifact(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<ControllerModel> {
    model_from_artifact(&Artifact::load(path)?)
}

// ---- closed-loop reports ---------------------------------------------------

/// Serializes a loop run. Timings are not stored: the artifact payload is
/// a deterministic function of the run inputs.
pub fn loop_report_to_artifact(
    report: &LoopReport,
    scenario: &Scenario,
    mode: &str,
    sigma: f64,
    seed: u64,
) -> Result<Artifact> {
    let grid = report.states[0].grid;
    let mut art = Artifact::new("report");
    art.meta = json!({
        "nx": grid.nx(),
        "scenario": scenario,
        "mode": mode,
        "sigma": sigma,
        "seed": seed,
        "arrival": report.arrival,
    });
    art.push(Tensor::new(
        "distances",
        vec![report.distances.len()],
        report.distances.clone(),
    )?)?;
    let d = grid.n_cells();
    let states = DMatrix::from_fn(report.states.len(), d, |r, c| report.states[r].values[c]);
    art.push(Tensor::from_matrix("states", &states))?;
    let controls = DMatrix::from_fn(report.controls.len(), 2 * d, |r, c| {
        if c < d {
            report.controls[r].ux[c]
        } else {
            report.controls[r].uy[c - d]
        }
    });
    art.push(Tensor::from_matrix("controls", &controls))?;
    if let Some(latents) = &report.latents {
        let m = DMatrix::from_fn(latents.len(), latents[0].len(), |r, c| latents[r][c]);
        art.push(Tensor::from_matrix("latents", &m))?;
    }
    Ok(art)
}

/// Reads a loop report back; timings come back as zero. Returns the run
/// inputs recorded next to the payload.
pub fn loop_report_from_artifact(
    art: &Artifact,
) -> Result<(LoopReport, Scenario, String, f64, u64)> {
    if art.kind != "report" {
        return Err(Error::Format(format!("expected a report artifact, found {}", art.kind)));
    }
    let grid = Grid::build(get_usize(&art.meta, "nx")?)?;
    let scenario: Scenario = from_value(&art.meta, "scenario")?;
    let mode = get_str(&art.meta, "mode")?.to_string();
    let sigma = get_f64(&art.meta, "sigma")?;
    let seed = get(&art.meta, "seed")?
        .as_u64()
        .ok_or_else(|| Error::Format("seed is not an integer".into()))?;
    let arrival = get_f64(&art.meta, "arrival")?;
    let distances = art.require("distances")?.data.clone();
    let states_m = art.require("states")?.to_matrix()?;
    let controls_m = art.require("controls")?.to_matrix()?;
    let d = grid.n_cells();
    let states = (0..states_m.nrows())
        .map(|r| StateField::new(grid, states_m.row(r).transpose()))
        .collect::<Result<Vec<_>>>()?;
    let controls = (0..controls_m.nrows())
        .map(|r| {
            ControlField::new(
                grid,
                DVector::from_fn(d, |k, _| controls_m[(r, k)]),
                DVector::from_fn(d, |k, _| controls_m[(r, d + k)]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let latents = art
        .tensor("latents")
        .map(|t| -> Result<Vec<DVector<f64>>> {
            let m = t.to_matrix()?;
            Ok((0..m.nrows()).map(|r| m.row(r).transpose()).collect())
        })
        .transpose()?;
    let report = LoopReport {
        distances,
        arrival,
        controls,
        states,
        latents,
        inference_secs: 0.0,
        plant_secs: 0.0,
    };
    Ok((report, scenario, mode, sigma, seed))
}

pub fn save_loop_report(
    path: &Path,
    report: &LoopReport,
    scenario: &Scenario,
    mode: &str,
    sigma: f64,
    seed: u64,
) -> Result<()> {
    loop_report_to_artifact(report, scenario, mode, sigma, seed)?.save(path)
}

pub fn load_loop_report(path: &Path) -> Result<(LoopReport, Scenario, String, f64, u64)> {
    loop_report_from_artifact(&Artifact::load(path)?)
}

// ---- CSV export ------------------------------------------------------------

/// Writes rows of floats with full round-trip precision.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "{}", header.join(","))?;
        for row in rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Dumps every tensor of an artifact to `<prefix>.<tensor>.csv` (first
/// dimension indexes rows) and the header metadata to `<prefix>.meta.json`.
/// Returns the written paths.
pub fn export_csv(artifact_path: &Path, out_prefix: &Path) -> Result<Vec<PathBuf>> {
    let art = Artifact::load(artifact_path)?;
    let prefix = out_prefix.as_os_str().to_owned();
    let mut written = Vec::new();
    for t in art.tensors() {
        let rows = if t.shape.is_empty() { 1 } else { t.shape[0] };
        let cols = if rows == 0 { 0 } else { t.data.len() / rows.max(1) };
        let header: Vec<String> = (0..cols).map(|c| format!("c{c}")).collect();
        let data: Vec<Vec<f64>> =
            (0..rows).map(|r| t.data[r * cols..(r + 1) * cols].to_vec()).collect();
        let mut os = prefix.clone();
        os.push(format!(".{}.csv", t.name));
        let path = PathBuf::from(os);
        write_csv(&path, &header, &data)?;
        written.push(path);
    }
    let mut os = prefix.clone();
    os.push(".meta.json");
    let meta_path = PathBuf::from(os);
    let tmp = tmp_path(&meta_path);
    std::fs::write(&tmp, serde_json::to_vec_pretty(&json!({
        "kind": art.kind,
        "meta": art.meta,
    }))?)?;
    std::fs::rename(&tmp, &meta_path)?;
    written.push(meta_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::gaussian_density;
    use crate::reduction::{compute_pod, ModeSelection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn sample_artifact() -> Artifact {
        let mut art = Artifact::new("dataset");
        art.meta = json!({"alpha": 1.5, "note": "probe"});
        art.push(Tensor::new(
            "a",
            vec![2, 3],
            vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5e-300, 1e300, -7.25],
        )
        .unwrap())
        .unwrap();
        art.push(Tensor::new("b", vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        art
    }

    #[test]
    fn tensors_validate_shape_and_uniqueness() {
        assert!(Tensor::new("x", vec![2, 2], vec![1.0; 3]).is_err());
        let mut art = Artifact::new("model");
        art.push(Tensor::new("x", vec![1], vec![1.0]).unwrap()).unwrap();
        assert!(art.push(Tensor::new("x", vec![1], vec![2.0]).unwrap()).is_err());
    }

    #[test]
    fn artifact_round_trip_is_bitwise() {
        let art = sample_artifact();
        let mut bytes = Vec::new();
        art.write_to(&mut bytes).unwrap();
        let back = Artifact::read_from(&mut Cursor::new(&bytes)).unwrap();
        assert_eq!(back.kind, art.kind);
        assert_eq!(back.meta, art.meta);
        assert_eq!(back.tensors().len(), 2);
        for (a, b) in art.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn writing_twice_gives_identical_bytes() {
        let art = sample_artifact();
        let mut one = Vec::new();
        let mut two = Vec::new();
        art.write_to(&mut one).unwrap();
        art.write_to(&mut two).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let art = sample_artifact();
        let mut bytes = Vec::new();
        art.write_to(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Artifact::read_from(&mut Cursor::new(&bad_magic)),
            Err(Error::Format(_))
        ));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(Artifact::read_from(&mut Cursor::new(truncated)).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            Artifact::read_from(&mut Cursor::new(&trailing)),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn save_and_load_via_files_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.rfb");
        let art = sample_artifact();
        art.save(&path).unwrap();
        assert!(!path.with_extension("rfb.tmp").exists());
        let back = Artifact::load(&path).unwrap();
        assert_eq!(back, art);
        art.save(&path).unwrap();
        let again = Artifact::load(&path).unwrap();
        assert_eq!(again, art);
    }

    fn toy_dataset() -> Dataset {
        let grid = Grid::build(8).unwrap();
        let fom = FomConfig::new(0.001, 0.25, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut trajectories = Vec::new();
        let mut meta = Vec::new();
        for i in 0..2 {
            // Random scenario parameters exercise exact float round-tripping
            // through the JSON header, not just short decimal literals.
            let scenario = if i == 0 {
                Scenario::vacuum(rng.gen_range(0.0..0.5), rng.gen_range(-0.5..0.5))
            } else {
                Scenario::with_flow(
                    rng.gen_range(0.0..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.1..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            };
            let y0 = gaussian_density(grid, (-0.3, 0.1), 0.05).unwrap();
            let controls: Vec<ControlField> = (0..fom.nt)
                .map(|_| {
                    ControlField::new(
                        grid,
                        DVector::from_fn(grid.n_cells(), |_, _| rng.gen_range(-0.3..0.3)),
                        DVector::from_fn(grid.n_cells(), |_, _| rng.gen_range(-0.3..0.3)),
                    )
                    .unwrap()
                })
                .collect();
            let mut traj = crate::grid::simulate(&y0, &controls, &scenario, &fom).unwrap();
            traj.cost = if i == 0 { Some(1.25) } else { None };
            traj.initial_center = if i == 0 { Some((-0.3, 0.1)) } else { None };
            trajectories.push(traj);
            meta.push(TrajMeta { base: i, mirrored: i == 1, train: i == 0 });
        }
        Dataset { grid, fom, trajectories, meta }
    }

    #[test]
    fn dataset_round_trip_preserves_every_bit() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rfb");
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.grid, ds.grid);
        assert_eq!(back.fom, ds.fom);
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.trajectories.len(), ds.trajectories.len());
        for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a.scenario, b.scenario);
            assert_eq!(a.initial_center, b.initial_center);
            assert_eq!(a.cost, b.cost);
            for (x, y) in a.states.iter().zip(&b.states) {
                assert_eq!(x.values, y.values);
            }
            for (x, y) in a.controls.iter().zip(&b.controls) {
                assert_eq!(x.ux, y.ux);
                assert_eq!(x.uy, y.uy);
            }
        }
    }

    fn toy_model(kind: &str) -> ControllerModel {
        let grid = Grid::build(8).unwrap();
        let fom = FomConfig::new(0.001, 0.25, 0.5).unwrap();
        let d = grid.n_cells();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let snaps = DMatrix::from_fn(d, 12, |_, _| rng.gen_range(-1.0..1.0));
        let basis = compute_pod(&snaps, ModeSelection::Count(4), false).unwrap();
        let csnaps = DMatrix::from_fn(2 * d, 12, |_, _| rng.gen_range(-1.0..1.0));
        let cbasis = compute_pod(&csnaps, ModeSelection::Count(4), true).unwrap();
        let (state_reducer, control_reducer) = match kind {
            "pod" => (Reducer::Pod { basis }, Reducer::Pod { basis: cbasis }),
            _ => {
                let coeffs = basis.encode_batch(&snaps.transpose());
                let norm = Normalization::fit(&coeffs).unwrap();
                let enc = Mlp::new(&[4, 6, 3], LEAKY_SLOPE, 1).unwrap();
                let dec = Mlp::new(&[3, 6, 4], LEAKY_SLOPE, 2).unwrap();
                let ccoeffs = cbasis.encode_batch(&csnaps.transpose());
                let cnorm = Normalization::fit(&ccoeffs).unwrap();
                let cenc = Mlp::new(&[4, 6, 2], LEAKY_SLOPE, 3).unwrap();
                let cdec = Mlp::new(&[2, 6, 4], LEAKY_SLOPE, 4).unwrap();
                (
                    Reducer::PodAe { basis, encoder: enc, decoder: dec, norm },
                    Reducer::PodAe { basis: cbasis, encoder: cenc, decoder: cdec, norm: cnorm },
                )
            }
        };
        let n_y = state_reducer.latent_dim();
        let n_u = control_reducer.latent_dim();
        let policy = Mlp::new(&[n_y + 2, 8, n_u], LEAKY_SLOPE, 5).unwrap();
        let forward = Mlp::new(&[n_y + n_u + 2, 8, n_y], LEAKY_SLOPE, 6).unwrap();
        ControllerModel {
            state_reducer,
            control_reducer,
            policy,
            forward_model: if kind == "pod" { None } else { Some(forward) },
            mu_norm: Normalization {
                min: DVector::from_vec(vec![0.0, -0.5]),
                range: DVector::from_vec(vec![0.5, 1.0]),
            },
            feature_map: FeatureMap::Raw,
            meta: ModelMeta { grid, fom, variance: 0.05 },
        }
    }

    #[test]
    fn model_round_trip_reproduces_actions_bitwise() {
        for kind in ["pod", "pod_ae"] {
            let model = toy_model(kind);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.rfb");
            save_model(&path, &model).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.meta, model.meta);
            assert_eq!(back.feature_map, model.feature_map);
            let y = gaussian_density(model.meta.grid, (-0.2, 0.15), 0.05).unwrap();
            let sc = Scenario::vacuum(0.25, -0.1);
            let a = model.act(&y, &sc).unwrap();
            let b = back.act(&y, &sc).unwrap();
            assert_eq!(a.ux, b.ux);
            assert_eq!(a.uy, b.uy);
            if kind == "pod" {
                assert!(back.forward_model.is_none());
            } else {
                let feat = model.features(&sc).unwrap();
                let sy = model.encode_state(&y);
                let su = model.policy_latent(&sy, &feat);
                let fa = model.forward_latent(&sy, &su, &feat).unwrap();
                let fb = back.forward_latent(&sy, &su, &feat).unwrap();
                assert_eq!(fa, fb);
            }
        }
    }

    #[test]
    fn loop_report_round_trip_drops_only_timings() {
        let model = toy_model("pod_ae");
        let y0 = gaussian_density(model.meta.grid, (-0.25, 0.0), 0.05).unwrap();
        let sc = Scenario::vacuum(0.2, 0.1);
        let opts = crate::controller::LoopOptions { sigma: 0.1, seed: 4, shadow_plant: true };
        let report = crate::controller::run_latent_loop(&model, &y0, &sc, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.rfb");
        save_loop_report(&path, &report, &sc, "latent", opts.sigma, opts.seed).unwrap();
        let (back, sc2, mode, sigma, seed) = load_loop_report(&path).unwrap();
        assert_eq!(sc2, sc);
        assert_eq!(mode, "latent");
        assert_eq!(sigma, 0.1);
        assert_eq!(seed, 4);
        assert_eq!(back.distances, report.distances);
        assert_eq!(back.arrival, report.arrival);
        assert_eq!(back.inference_secs, 0.0);
        assert_eq!(back.plant_secs, 0.0);
        for (a, b) in report.states.iter().zip(&back.states) {
            assert_eq!(a.values, b.values);
        }
        let la = report.latents.as_ref().unwrap();
        let lb = back.latents.as_ref().unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn csv_export_round_trips_values_through_text() {
        let art = sample_artifact();
        let dir = tempfile::tempdir().unwrap();
        let apath = dir.path().join("x.rfb");
        art.save(&apath).unwrap();
        let prefix = dir.path().join("out");
        let written = export_csv(&apath, &prefix).unwrap();
        assert_eq!(written.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join("out.a.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "c0,c1,c2");
        let row: Vec<f64> =
            lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(row[0].to_bits(), 1.0f64.to_bits());
        assert_eq!(row[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(row[2].to_bits(), f64::MIN_POSITIVE.to_bits());
        assert!(dir.path().join("out.meta.json").exists());
    }
}
