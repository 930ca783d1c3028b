//! Timing of the matrix-free operator and of full solves.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cg::{CgConfig, SpdOperator};
use crate::error::Result;
use crate::layer::GcrfLayer;
use crate::synth::{random_embeddings, random_vector};
use crate::tensor::{Dims, Vector};

pub const BENCH_CSV_HEADER: &str = "N,D,apply_ns,solve_ms,cg_iters";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub apply_ns: f64,
    pub solve_ms: f64,
    pub cg_iters: usize,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.1},{:.4},{}",
            self.n, self.d, self.apply_ns, self.solve_ms, self.cg_iters
        )
    }
}

/// Deterministic benchmark problem for `(n, d, seed)`: `N(0, 1/N)`
/// embeddings, standard normal unaries, `lambda = 1`.
pub fn bench_instance(n: usize, d: usize, seed: u64, cg: CgConfig) -> Result<(GcrfLayer, Vector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 20) ^ d as u64);
    let dims = Dims::new(n, 1, d)?;
    let e = random_embeddings(d, n, &mut rng);
    let b = random_vector(n, &mut rng);
    Ok((GcrfLayer::new(e, 1.0, dims, cg)?, b))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Median wall-clock nanoseconds per operator application. Each of the
/// `repeats` samples times a batch of applications long enough to swamp
/// timer resolution.
pub fn time_apply(layer: &GcrfLayer, v: &Vector, repeats: usize) -> f64 {
    let mut out = vec![0.0; v.len()];
    let mut batch = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..batch {
            layer.apply_into(black_box(v.as_slice()), &mut out);
        }
        if t.elapsed() >= Duration::from_micros(500) || batch >= 1 << 20 {
            break;
        }
        batch *= 2;
    }
    let mut samples: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..batch {
                layer.apply_into(black_box(v.as_slice()), &mut out);
            }
            black_box(&out);
            t.elapsed().as_nanos() as f64 / batch as f64
        })
        .collect();
    median(&mut samples)
}

/// Median solve time in milliseconds and the iteration count.
pub fn time_solve(layer: &GcrfLayer, b: &Vector, repeats: usize) -> Result<(f64, usize)> {
    let mut iters = 0;
    let mut samples = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let (x, report) = layer.forward(black_box(b))?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        black_box(x);
        iters = report.iterations;
    }
    Ok((median(&mut samples), iters))
}

pub fn bench_grid(ns: &[usize], ds: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for &d in ds {
            let (layer, b) = bench_instance(n, d, seed, CgConfig::default())?;
            let apply_ns = time_apply(&layer, &b, repeats);
            let (solve_ms, cg_iters) = time_solve(&layer, &b, repeats)?;
            rows.push(BenchRow {
                n,
                d,
                apply_ns,
                solve_ms,
                cg_iters,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn grid_iterations_are_deterministic_and_bounded() {
        let a = bench_grid(&[128, 256], &[2, 4, 8], 1, 3).unwrap();
        let b = bench_grid(&[128, 256], &[2, 4, 8], 1, 3).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.cg_iters, rb.cg_iters);
            assert!(ra.cg_iters <= ra.d + 2, "{}", ra.to_csv());
            assert!(ra.apply_ns > 0.0);
        }
    }
}
