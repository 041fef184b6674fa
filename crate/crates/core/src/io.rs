// SPDX-License-Identifier: MIT OR Apache-2.0

//! AMX matrix files, JSON sidecar metadata, and factorization bundles.
//!
//! An AMX file is a 24-byte header followed by a row-major little-endian
//! payload:
//!
//! | bytes  | content                                |
//! |--------|----------------------------------------|
//! | 0..4   | ASCII `AMX1`                           |
//! | 4      | format version, `0x01`                 |
//! | 5      | dtype code, `0x00` = f32 little-endian |
//! | 6..8   | reserved, zero                         |
//! | 8..16  | rows, u64 LE                           |
//! | 16..24 | cols, u64 LE                           |
//!
//! Token metadata lives next to the binary in `<path>.meta.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::engine::{FactorizationConfig, LossTrace};
use crate::error::{Result, SnmfError};
use crate::scalar::Scalar;

pub const AMX_MAGIC: [u8; 4] = *b"AMX1";
pub const AMX_VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;
pub const AMX_HEADER_LEN: u64 = 24;

const SIDECAR_SUFFIX: &str = ".meta.json";

/// Exact on-disk size of an f32 AMX file with the given shape.
pub fn amx_file_size(rows: u64, cols: u64) -> Result<u64> {
    rows.checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(AMX_HEADER_LEN))
        .ok_or(SnmfError::DimensionOverflow { rows, cols })
}

/// Path of the metadata sidecar belonging to `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(SIDECAR_SUFFIX);
    PathBuf::from(os)
}

/// One token position (one column of an activation matrix).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenContext {
    pub doc_id: u64,
    pub position: u64,
    pub token_text: String,
    pub window_text: String,
}

/// What a stored matrix holds. Serialized as the sidecar `role` string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    /// `d_a x n` neuron activations.
    Activations,
    /// `W_V`, `d x d_a`.
    MlpOut,
    /// Unembedding, `|V| x d`.
    Unembed,
    /// Feature matrix `Z`, `d_a x k`.
    Features,
    /// Coefficient matrix `Y`, `k x n`.
    Coefficients,
    /// A single steering direction stored as a `1 x dim` row.
    Direction,
    /// Logit vectors, one row each.
    Logits,
}

impl MatrixRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixRole::Activations => "activations",
            MatrixRole::MlpOut => "mlp_out",
            MatrixRole::Unembed => "unembed",
            MatrixRole::Features => "features",
            MatrixRole::Coefficients => "coefficients",
            MatrixRole::Direction => "direction",
            MatrixRole::Logits => "logits",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    #[serde(default)]
    columns: Vec<TokenContext>,
    role: MatrixRole,
}

/// Raw f32 matrix, row-major, exactly as stored in an AMX payload.
#[derive(Debug, Clone, PartialEq)]
pub struct AmxMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl AmxMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or(SnmfError::DimensionOverflow {
                rows: rows as u64,
                cols: cols as u64,
            })?;
        if data.len() != expected {
            return Err(SnmfError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_array<T: Scalar>(a: &Array2<T>) -> Self {
        let (rows, cols) = a.dim();
        let data = a.iter().map(|v| v.to_storage()).collect();
        Self { rows, cols, data }
    }

    pub fn to_array<T: Scalar>(&self) -> Array2<T> {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.data.iter().map(|&v| T::from_storage(v)).collect(),
        )
        .expect("AmxMatrix invariant: data.len() == rows * cols")
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Neuron activations over `n` token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub values: AmxMatrix,
    /// Per-column token metadata; `None` when no sidecar was found.
    pub columns: Option<Vec<TokenContext>>,
}

impl ActivationMatrix {
    pub fn new(values: AmxMatrix, columns: Option<Vec<TokenContext>>) -> Result<Self> {
        if let Some(cols) = &columns {
            validate_columns(cols, values.cols)
                .map_err(|reason| SnmfError::DimensionMismatch(reason))?;
        }
        Ok(Self { values, columns })
    }

    pub fn d_a(&self) -> usize {
        self.values.rows
    }

    pub fn n(&self) -> usize {
        self.values.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRole {
    /// `W_V`: `d x d_a`.
    MlpOut,
    /// Unembedding: `|V| x d`.
    Unembed,
}

impl From<WeightRole> for MatrixRole {
    fn from(r: WeightRole) -> Self {
        match r {
            WeightRole::MlpOut => MatrixRole::MlpOut,
            WeightRole::Unembed => MatrixRole::Unembed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub values: AmxMatrix,
    pub role: WeightRole,
}

/// Anything [`read_matrix`] can return.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredMatrix {
    Activation(ActivationMatrix),
    Weight(WeightMatrix),
    /// A matrix whose sidecar names some other role.
    Other { values: AmxMatrix, role: MatrixRole },
}

impl StoredMatrix {
    pub fn values(&self) -> &AmxMatrix {
        match self {
            StoredMatrix::Activation(a) => &a.values,
            StoredMatrix::Weight(w) => &w.values,
            StoredMatrix::Other { values, .. } => values,
        }
    }

    pub fn into_values(self) -> AmxMatrix {
        match self {
            StoredMatrix::Activation(a) => a.values,
            StoredMatrix::Weight(w) => w.values,
            StoredMatrix::Other { values, .. } => values,
        }
    }
}

fn validate_columns(columns: &[TokenContext], n: usize) -> std::result::Result<(), String> {
    if columns.len() != n {
        return Err(format!("{} metadata columns for {n} matrix columns", columns.len()));
    }
    if let Some(i) = columns.iter().position(|c| c.token_text.is_empty()) {
        return Err(format!("column {i} has empty token_text"));
    }
    Ok(())
}

/// Writes the AMX binary only; no sidecar.
pub fn write_amx(path: &Path, m: &AmxMatrix) -> Result<()> {
    let rows = m.rows as u64;
    let cols = m.cols as u64;
    amx_file_size(rows, cols)?;
    if m.data.len() as u64 != rows * cols {
        return Err(SnmfError::DimensionMismatch(format!(
            "{rows}x{cols} matrix holds {} values",
            m.data.len()
        )));
    }
    let file = File::create(path).map_err(|e| SnmfError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = [0u8; AMX_HEADER_LEN as usize];
    header[0..4].copy_from_slice(&AMX_MAGIC);
    header[4] = AMX_VERSION;
    header[5] = DTYPE_F32;
    header[8..16].copy_from_slice(&rows.to_le_bytes());
    header[16..24].copy_from_slice(&cols.to_le_bytes());
    let io = |e| SnmfError::io(path, e);
    w.write_all(&header).map_err(io)?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads the AMX binary only, validating header and payload length.
pub fn read_amx(path: &Path) -> Result<AmxMatrix> {
    let file = File::open(path).map_err(|e| SnmfError::io(path, e))?;
    let actual_len = file.metadata().map_err(|e| SnmfError::io(path, e))?.len();
    let mut r = BufReader::new(file);

    if actual_len < AMX_HEADER_LEN {
        // Too short to even hold the header; still report bad magic when we can.
        let mut head = Vec::new();
        r.read_to_end(&mut head).map_err(|e| SnmfError::io(path, e))?;
        if head.len() >= 4 && head[0..4] != AMX_MAGIC {
            return Err(SnmfError::BadMagic {
                path: path.to_owned(),
                found: [head[0], head[1], head[2], head[3]],
            });
        }
        return Err(SnmfError::Truncated {
            path: path.to_owned(),
            expected: AMX_HEADER_LEN,
            actual: actual_len,
        });
    }

    let mut header = [0u8; AMX_HEADER_LEN as usize];
    r.read_exact(&mut header).map_err(|e| SnmfError::io(path, e))?;
    let magic = [header[0], header[1], header[2], header[3]];
    if magic != AMX_MAGIC {
        return Err(SnmfError::BadMagic {
            path: path.to_owned(),
            found: magic,
        });
    }
    if header[4] != AMX_VERSION {
        return Err(SnmfError::UnsupportedVersion(header[4]));
    }
    if header[5] != DTYPE_F32 {
        return Err(SnmfError::UnsupportedDtype(header[5]));
    }
    if header[6] != 0 || header[7] != 0 {
        return Err(SnmfError::Metadata {
            path: path.to_owned(),
            reason: "reserved header bytes are not zero".into(),
        });
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
    let expected = amx_file_size(rows, cols)?;
    if expected != actual_len {
        return Err(SnmfError::Truncated {
            path: path.to_owned(),
            expected,
            actual: actual_len,
        });
    }
    let overflow = SnmfError::DimensionOverflow { rows, cols };
    let rows_us = usize::try_from(rows).map_err(|_| overflow)?;
    let cols_us = usize::try_from(cols).map_err(|_| SnmfError::DimensionOverflow { rows, cols })?;
    let count = rows_us * cols_us;

    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| SnmfError::io(path, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(AmxMatrix {
        rows: rows_us,
        cols: cols_us,
        data,
    })
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let sc = sidecar_path(path);
    let json = serde_json::to_string_pretty(sidecar).map_err(|e| SnmfError::Metadata {
        path: sc.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&sc, json).map_err(|e| SnmfError::io(&sc, e))
}

fn read_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let sc = sidecar_path(path);
    if !sc.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&sc).map_err(|e| SnmfError::io(&sc, e))?;
    let parsed: Sidecar = serde_json::from_str(&text).map_err(|e| SnmfError::Metadata {
        path: sc.clone(),
        reason: e.to_string(),
    })?;
    Ok(Some(parsed))
}

/// Writes an AMX file plus its `.meta.json` sidecar.
///
/// Activation matrices without column metadata get no sidecar.
pub fn write_matrix(path: &Path, m: &StoredMatrix) -> Result<()> {
    let sidecar = match m {
        StoredMatrix::Activation(a) => {
            if let Some(cols) = &a.columns {
                validate_columns(cols, a.n()).map_err(SnmfError::DimensionMismatch)?;
            }
            a.columns.as_ref().map(|c| Sidecar {
                columns: c.clone(),
                role: MatrixRole::Activations,
            })
        }
        StoredMatrix::Weight(w) => Some(Sidecar {
            columns: Vec::new(),
            role: w.role.into(),
        }),
        StoredMatrix::Other { role, .. } => Some(Sidecar {
            columns: Vec::new(),
            role: *role,
        }),
    };
    write_amx(path, m.values())?;
    match sidecar {
        Some(sc) => write_sidecar(path, &sc),
        None => {
            let stale = sidecar_path(path);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| SnmfError::io(&stale, e))?;
            }
            Ok(())
        }
    }
}

/// Reads an AMX file and, when present, its sidecar.
///
/// Without a sidecar the matrix is taken to be activations with no metadata.
pub fn read_matrix(path: &Path) -> Result<StoredMatrix> {
    let values = read_amx(path)?;
    let sidecar = read_sidecar(path)?;
    let bad_meta = |reason: String| SnmfError::Metadata {
        path: sidecar_path(path),
        reason,
    };
    Ok(match sidecar {
        None => StoredMatrix::Activation(ActivationMatrix {
            values,
            columns: None,
        }),
        Some(Sidecar {
            columns,
            role: MatrixRole::Activations,
        }) => {
            validate_columns(&columns, values.cols).map_err(bad_meta)?;
            StoredMatrix::Activation(ActivationMatrix {
                values,
                columns: Some(columns),
            })
        }
        Some(Sidecar {
            role: MatrixRole::MlpOut,
            ..
        }) => StoredMatrix::Weight(WeightMatrix {
            values,
            role: WeightRole::MlpOut,
        }),
        Some(Sidecar {
            role: MatrixRole::Unembed,
            ..
        }) => StoredMatrix::Weight(WeightMatrix {
            values,
            role: WeightRole::Unembed,
        }),
        Some(Sidecar { columns, role }) => {
            if role == MatrixRole::Coefficients && !columns.is_empty() {
                validate_columns(&columns, values.cols).map_err(bad_meta)?;
            }
            StoredMatrix::Other { values, role }
        }
    })
}

/// Reads the token metadata attached to a coefficient or activation file, if any.
pub fn read_columns(path: &Path) -> Result<Option<Vec<TokenContext>>> {
    let Some(sc) = read_sidecar(path)? else {
        return Ok(None);
    };
    if sc.columns.is_empty() {
        return Ok(None);
    }
    Ok(Some(sc.columns))
}

/// Convenience: an activation file as a `d_a x n` array plus its columns.
pub fn read_activations<T: Scalar>(path: &Path) -> Result<(Array2<T>, Option<Vec<TokenContext>>)> {
    match read_matrix(path)? {
        StoredMatrix::Activation(a) => Ok((a.values.to_array(), a.columns)),
        other => {
            let role = match &other {
                StoredMatrix::Weight(w) => MatrixRole::from(w.role),
                StoredMatrix::Other { role, .. } => *role,
                StoredMatrix::Activation(_) => unreachable!(),
            };
            Err(SnmfError::Metadata {
                path: sidecar_path(path),
                reason: format!("expected activations, found role {:?}", role.as_str()),
            })
        }
    }
}

/// Convenience: a weight file, checked against the expected role.
pub fn read_weights<T: Scalar>(path: &Path, role: WeightRole) -> Result<Array2<T>> {
    match read_matrix(path)? {
        StoredMatrix::Weight(w) if w.role == role => Ok(w.values.to_array()),
        // A bare AMX with no sidecar is accepted as-is.
        StoredMatrix::Activation(ActivationMatrix {
            values,
            columns: None,
        }) => Ok(values.to_array()),
        _ => Err(SnmfError::Metadata {
            path: sidecar_path(path),
            reason: format!("expected role {:?}", MatrixRole::from(role).as_str()),
        }),
    }
}

/// `Z`, `Y`, the config that produced them and the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationBundle<T> {
    /// `d_a x k` features.
    pub z: Array2<T>,
    /// `k x n` nonnegative coefficients.
    pub y: Array2<T>,
    pub config: FactorizationConfig,
    pub loss_trace: LossTrace,
    /// Token metadata for the columns of `Y`, carried through from the input.
    pub columns: Option<Vec<TokenContext>>,
}

impl<T: Scalar> FactorizationBundle<T> {
    pub fn k(&self) -> usize {
        self.z.ncols()
    }
    pub fn d_a(&self) -> usize {
        self.z.nrows()
    }
    pub fn n(&self) -> usize {
        self.y.ncols()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    k: usize,
    d_a: usize,
    n: usize,
    config: FactorizationConfig,
    loss_trace: LossTrace,
}

pub const BUNDLE_Z: &str = "Z.amx";
pub const BUNDLE_Y: &str = "Y.amx";
pub const BUNDLE_META: &str = "meta.json";

/// Writes `Z.amx`, `Y.amx` (with column metadata in its sidecar) and `meta.json`.
pub fn write_bundle<T: Scalar>(bundle: &FactorizationBundle<T>, dir: &Path) -> Result<()> {
    if bundle.z.ncols() != bundle.y.nrows() {
        return Err(SnmfError::DimensionMismatch(format!(
            "Z has {} columns but Y has {} rows",
            bundle.z.ncols(),
            bundle.y.nrows()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| SnmfError::io(dir, e))?;
    write_matrix(
        &dir.join(BUNDLE_Z),
        &StoredMatrix::Other {
            values: AmxMatrix::from_array(&bundle.z),
            role: MatrixRole::Features,
        },
    )?;
    let y_path = dir.join(BUNDLE_Y);
    write_amx(&y_path, &AmxMatrix::from_array(&bundle.y))?;
    let columns = match &bundle.columns {
        Some(c) => {
            validate_columns(c, bundle.n()).map_err(SnmfError::DimensionMismatch)?;
            c.clone()
        }
        None => Vec::new(),
    };
    write_sidecar(
        &y_path,
        &Sidecar {
            columns,
            role: MatrixRole::Coefficients,
        },
    )?;
    let meta = BundleMeta {
        k: bundle.k(),
        d_a: bundle.d_a(),
        n: bundle.n(),
        config: bundle.config.clone(),
        loss_trace: bundle.loss_trace.clone(),
    };
    let meta_path = dir.join(BUNDLE_META);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| SnmfError::Metadata {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&meta_path, json).map_err(|e| SnmfError::io(&meta_path, e))
}

pub fn read_bundle<T: Scalar>(dir: &Path) -> Result<FactorizationBundle<T>> {
    let z_path = dir.join(BUNDLE_Z);
    let y_path = dir.join(BUNDLE_Y);
    let meta_path = dir.join(BUNDLE_META);
    for p in [&z_path, &y_path, &meta_path] {
        if !p.exists() {
            return Err(SnmfError::MissingComponent(p.clone()));
        }
    }
    let z = read_amx(&z_path)?;
    let y = read_amx(&y_path)?;
    let columns = read_columns(&y_path)?;
    let text = fs::read_to_string(&meta_path).map_err(|e| SnmfError::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| SnmfError::Metadata {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;

    let check = |what: &str, declared: usize, found: usize| {
        if declared == found {
            Ok(())
        } else {
            Err(SnmfError::DimensionMismatch(format!(
                "meta.json declares {what}={declared} but the stored matrices have {found}"
            )))
        }
    };
    check("k", meta.k, z.cols)?;
    check("k", meta.k, y.rows)?;
    check("d_a", meta.d_a, z.rows)?;
    check("n", meta.n, y.cols)?;
    if meta.config.k != meta.k {
        return Err(SnmfError::DimensionMismatch(format!(
            "config k={} but meta k={}",
            meta.config.k, meta.k
        )));
    }
    if let Some(c) = &columns {
        validate_columns(c, y.cols).map_err(|reason| SnmfError::Metadata {
            path: sidecar_path(&y_path),
            reason,
        })?;
    }
    Ok(FactorizationBundle {
        z: z.to_array(),
        y: y.to_array(),
        config: meta.config,
        loss_trace: meta.loss_trace,
        columns,
    })
}
