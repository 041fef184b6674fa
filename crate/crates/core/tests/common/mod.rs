// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared generators for planted and random test instances.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use snmf_core::hierarchy::chain_loss;
use snmf_core::io::{AMX_HEADER_LEN, AMX_MAGIC};
use snmf_core::steering::LinearReadoutOracle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>())
}

pub fn fro(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rel_err(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    fro(&(&a - &b)) / fro(&a.to_owned())
}

/// `A = Z* Y*` with `Z*` standard normal restricted to `support` random rows
/// per column and `Y*` uniform on `[0, 1)`.
pub struct Planted {
    pub a: Array2<f64>,
    pub z: Array2<f64>,
    pub y: Array2<f64>,
}

pub fn planted_sparse(d_a: usize, k: usize, support: usize, n: usize, seed: u64) -> Planted {
    let mut r = rng(seed);
    let mut z = Array2::<f64>::zeros((d_a, k));
    for j in 0..k {
        let rows = rand::seq::index::sample(&mut r, d_a, support);
        for i in rows.iter() {
            z[[i, j]] = r.sample(StandardNormal);
        }
    }
    let y = uniform(&mut r, k, n);
    Planted { a: z.dot(&y), z, y }
}

pub const DAYS: usize = 7;
pub const WEEKDAYS: [usize; 5] = [0, 1, 2, 3, 4];
pub const WEEKEND: [usize; 2] = [5, 6];
pub const CORE: usize = 12;
pub const EXCLUSIVE: usize = 4;
/// Core plus every day's exclusives plus a few neurons that never fire.
pub const DAY_NEURONS: usize = CORE + DAYS * EXCLUSIVE + 8;

/// Neurons owned by day `j` alone.
pub fn day_exclusive(j: usize) -> Vec<usize> {
    (0..EXCLUSIVE).map(|e| CORE + j * EXCLUSIVE + e).collect()
}

/// Seven "day" features sharing a 12-neuron core, each with 4 exclusive
/// neurons. The core pattern differs between weekdays (heavy on the first
/// half of the core) and the weekend (heavy, with opposite sign, on the
/// second half), so the two groups are orthogonal on the core.
pub fn day_features() -> Array2<f64> {
    let mut z = Array2::<f64>::zeros((DAY_NEURONS, DAYS));
    for j in 0..DAYS {
        let weekend = WEEKEND.contains(&j);
        for i in 0..CORE {
            let first_half = i < CORE / 2;
            z[[i, j]] = match (weekend, first_half) {
                (false, true) => 3.0,
                (false, false) => 1.0,
                (true, true) => 1.0,
                (true, false) => -3.0,
            };
        }
        for (e, i) in day_exclusive(j).into_iter().enumerate() {
            z[[i, j]] = 1.5 + 0.1 * e as f64 - 0.05 * j as f64;
        }
    }
    z
}

/// Each token column expresses exactly one day with a weight in `[0.5, 1.5)`.
pub fn day_data(tokens_per_day: usize, seed: u64) -> Planted {
    let mut r = rng(seed);
    let z = day_features();
    let n = DAYS * tokens_per_day;
    let mut y = Array2::<f64>::zeros((DAYS, n));
    for t in 0..n {
        y[[t % DAYS, t]] = 0.5 + r.random::<f64>();
    }
    Planted { a: z.dot(&y), z, y }
}

/// Index of the planted column with the largest absolute cosine to each
/// column of `found`.
pub fn match_columns(planted: &Array2<f64>, found: &Array2<f64>) -> Vec<usize> {
    found
        .columns()
        .into_iter()
        .map(|f| {
            let fnorm = f.dot(&f).sqrt();
            let mut best = (0, f64::NEG_INFINITY);
            for (j, p) in planted.columns().into_iter().enumerate() {
                let c = (f.dot(&p) / (fnorm * p.dot(&p).sqrt())).abs();
                if c > best.1 {
                    best = (j, c);
                }
            }
            best.0
        })
        .collect()
}

/// Day `j`'s exclusive neurons write `e_j` into a 7-dim residual; the readout
/// centers the day logits, so promoting one day suppresses the others.
pub fn day_oracle() -> LinearReadoutOracle<f64> {
    let mut w_v = Array2::<f64>::zeros((DAYS, DAY_NEURONS));
    for j in 0..DAYS {
        for i in day_exclusive(j) {
            w_v[[j, i]] = 1.0;
        }
    }
    let u = Array2::<f64>::eye(DAYS) - Array2::<f64>::from_elem((DAYS, DAYS), 1.0 / DAYS as f64);
    LinearReadoutOracle::new(Array1::zeros(DAYS), u, Some(w_v), 0).unwrap()
}

/// Ways to damage a valid AMX file, each of which a reader must reject.
pub fn corruptions(valid: &[u8]) -> Vec<(&'static str, Vec<u8>)> {
    let header = AMX_HEADER_LEN as usize;
    let with = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = valid.to_vec();
        f(&mut b);
        b
    };
    let dims = |rows: u64, cols: u64| {
        with(&|b: &mut Vec<u8>| {
            b[8..16].copy_from_slice(&rows.to_le_bytes());
            b[16..24].copy_from_slice(&cols.to_le_bytes());
        })
    };
    assert_eq!(&valid[..4], &AMX_MAGIC);
    vec![
        ("bad magic", with(&|b: &mut Vec<u8>| b[0] = b'X')),
        ("lowercase magic", with(&|b: &mut Vec<u8>| b[..4].copy_from_slice(b"amx1"))),
        ("version 0", with(&|b: &mut Vec<u8>| b[4] = 0)),
        ("version 2", with(&|b: &mut Vec<u8>| b[4] = 2)),
        ("dtype f64", with(&|b: &mut Vec<u8>| b[5] = 1)),
        ("dtype 255", with(&|b: &mut Vec<u8>| b[5] = 255)),
        ("reserved byte", with(&|b: &mut Vec<u8>| b[6] = 1)),
        ("reserved byte 2", with(&|b: &mut Vec<u8>| b[7] = 0x80)),
        ("rows too large", dims(u64::from_le_bytes(valid[8..16].try_into().unwrap()) + 1, u64::from_le_bytes(valid[16..24].try_into().unwrap()))),
        ("cols too small", dims(u64::from_le_bytes(valid[8..16].try_into().unwrap()), u64::from_le_bytes(valid[16..24].try_into().unwrap()) - 1)),
        ("dimension overflow", dims(u64::MAX, 2)),
        ("huge dimensions", dims(1 << 40, 1 << 40)),
        ("truncated header", valid[..header - 3].to_vec()),
        ("magic only", valid[..4].to_vec()),
        ("empty file", Vec::new()),
        ("truncated payload", valid[..valid.len() - 1].to_vec()),
        ("trailing bytes", with(&|b: &mut Vec<u8>| b.extend_from_slice(&[0, 0, 0, 0]))),
    ]
}

/// Central differences of `chain_loss`, one parameter at a time.
pub fn numeric_gradients(a: &Array2<f64>, z: &Array2<f64>, ys: &[Array2<f64>], h: f64) -> (Array2<f64>, Vec<Array2<f64>>) {
    let loss = |z: &Array2<f64>, ys: &[Array2<f64>]| chain_loss(a.view(), z.view(), ys).unwrap();
    let mut gz = Array2::zeros(z.raw_dim());
    for idx in ndarray::indices(z.raw_dim()) {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[idx] += h;
        zm[idx] -= h;
        gz[idx] = (loss(&zp, ys) - loss(&zm, ys)) / (2.0 * h);
    }
    let mut gys = Vec::new();
    for i in 0..ys.len() {
        let mut g = Array2::zeros(ys[i].raw_dim());
        for idx in ndarray::indices(ys[i].raw_dim()) {
            let mut yp = ys.to_vec();
            let mut ym = ys.to_vec();
            yp[i][idx] += h;
            ym[i][idx] -= h;
            g[idx] = (loss(z, &yp) - loss(z, &ym)) / (2.0 * h);
        }
        gys.push(g);
    }
    (gz, gys)
}

pub fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-8 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
