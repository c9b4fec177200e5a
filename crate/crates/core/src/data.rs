//! Seedable synthetic benchmark generators, standardization and splitting.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand_core::RngCore;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::numfmt::g17;

/// Floor applied to per-feature standard deviations before scaling.
pub const STD_FLOOR: f64 = 1e-8;

/// PCG-XSH-RR 64/32 with Box-Muller normals.
#[derive(Debug, Clone)]
pub struct Prng {
    inner: Pcg32,
    seed: u64,
    stream: u64,
    spare_normal: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            inner: Pcg32::new(seed, stream),
            seed,
            stream,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        let hi = (self.next_u32() >> 5) as u64; // 27 bits
        let lo = (self.next_u32() >> 6) as u64; // 26 bits
        ((hi << 26) | lo) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; the second value of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Unbiased integer in [0, n).
    pub fn below(&mut self, n: u32) -> u32 {
        assert!(n > 0, "range must be non-empty");
        let zone = u32::MAX - (u32::MAX - n + 1) % n;
        loop {
            let v = self.next_u32();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Moons,
    Circles,
    Blobs,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Moons => "moons",
            TaskFamily::Circles => "circles",
            TaskFamily::Blobs => "blobs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub family: TaskFamily,
    pub noise: f64,
    pub seed: u64,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.meta.d
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// `x0,...,x{d-1},label` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.meta.d).map(|j| format!("x{j}")).collect();
        let _ = writeln!(out, "{},label", header.join(","));
        for (x, y) in self.features.iter().zip(&self.labels) {
            for v in x {
                out.push_str(&g17(*v));
                out.push(',');
            }
            let _ = writeln!(out, "{y}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

fn check_even(n: usize) -> Result<()> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(invalid(format!("sample count must be even and positive, got {n}")));
    }
    Ok(())
}

fn check_noise(noise: f64) -> Result<()> {
    if !noise.is_finite() || noise < 0.0 {
        return Err(invalid(format!("noise must be a finite non-negative std, got {noise}")));
    }
    Ok(())
}

/// `count` points spanning `[0, end]` inclusive.
fn linspace_inclusive(end: f64, count: usize) -> impl Iterator<Item = f64> {
    let step = if count > 1 { end / (count - 1) as f64 } else { 0.0 };
    (0..count).map(move |k| k as f64 * step)
}

fn add_noise(points: &mut [Vec<f64>], noise: f64, rng: &mut Prng) {
    for p in points.iter_mut() {
        for v in p.iter_mut() {
            *v += noise * rng.normal();
        }
    }
}

/// Two interleaving half circles. Label 0 first, then label 1.
pub fn make_moons(n: usize, noise: f64, rng: &mut Prng) -> Result<Dataset> {
    check_even(n)?;
    check_noise(noise)?;
    let half = n / 2;
    let mut features = Vec::with_capacity(n);
    for t in linspace_inclusive(PI, half) {
        features.push(vec![t.cos(), t.sin()]);
    }
    for t in linspace_inclusive(PI, half) {
        features.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
    }
    add_noise(&mut features, noise, rng);
    Ok(Dataset {
        features,
        labels: [0u8, 1].iter().flat_map(|&l| std::iter::repeat_n(l, half)).collect(),
        meta: DatasetMeta {
            family: TaskFamily::Moons,
            noise,
            seed: rng.seed(),
            d: 2,
        },
    })
}

/// Unit circle (label 0) around a circle of radius `factor` (label 1).
pub fn make_circles(n: usize, noise: f64, factor: f64, rng: &mut Prng) -> Result<Dataset> {
    check_even(n)?;
    check_noise(noise)?;
    if !(factor > 0.0 && factor < 1.0) {
        return Err(invalid(format!("circle factor must lie in (0, 1), got {factor}")));
    }
    let half = n / 2;
    let angles: Vec<f64> = (0..half).map(|k| 2.0 * PI * k as f64 / half as f64).collect();
    let mut features = Vec::with_capacity(n);
    for &a in &angles {
        features.push(vec![a.cos(), a.sin()]);
    }
    for &a in &angles {
        features.push(vec![factor * a.cos(), factor * a.sin()]);
    }
    add_noise(&mut features, noise, rng);
    Ok(Dataset {
        features,
        labels: [0u8, 1].iter().flat_map(|&l| std::iter::repeat_n(l, half)).collect(),
        meta: DatasetMeta {
            family: TaskFamily::Circles,
            noise,
            seed: rng.seed(),
            d: 2,
        },
    })
}

/// Two Gaussian classes centred on random hypercube vertices
/// `{-class_sep, +class_sep}^d`, then mixed by a shared random matrix with
/// Normal(0, 1/d) entries.
pub fn make_blob_classification(n: usize, d: usize, class_sep: f64, rng: &mut Prng) -> Result<Dataset> {
    make_blob_classification_with(n, d, class_sep, true, rng)
}

/// `mix = false` skips the mixing matrix (A = I).
pub fn make_blob_classification_with(
    n: usize,
    d: usize,
    class_sep: f64,
    mix: bool,
    rng: &mut Prng,
) -> Result<Dataset> {
    check_even(n)?;
    if d < 2 {
        return Err(invalid(format!("blob feature dimension must be >= 2, got {d}")));
    }
    if !class_sep.is_finite() || class_sep < 0.0 {
        return Err(invalid(format!("class_sep must be finite and non-negative, got {class_sep}")));
    }
    let draw_vertex = |rng: &mut Prng| -> Vec<bool> { (0..d).map(|_| rng.uniform() < 0.5).collect() };
    let v0 = draw_vertex(rng);
    let mut v1 = draw_vertex(rng);
    while v1 == v0 {
        v1 = draw_vertex(rng);
    }
    let centroid = |v: &[bool]| -> Vec<f64> { v.iter().map(|&s| if s { class_sep } else { -class_sep }).collect() };
    let centroids = [centroid(&v0), centroid(&v1)];

    let half = n / 2;
    let mut features = Vec::with_capacity(n);
    for mu in &centroids {
        for _ in 0..half {
            features.push(mu.iter().map(|m| m + rng.normal()).collect::<Vec<f64>>());
        }
    }
    if mix {
        let scale = 1.0 / (d as f64).sqrt();
        let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| scale * rng.normal()).collect()).collect();
        for x in features.iter_mut() {
            let mixed: Vec<f64> = a.iter().map(|row| row.iter().zip(x.iter()).map(|(r, v)| r * v).sum()).collect();
            *x = mixed;
        }
    }
    Ok(Dataset {
        features,
        labels: [0u8, 1].iter().flat_map(|&l| std::iter::repeat_n(l, half)).collect(),
        meta: DatasetMeta {
            family: TaskFamily::Blobs,
            noise: 1.0,
            seed: rng.seed(),
            d,
        },
    })
}

/// Per-feature affine map fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or_else(|| invalid("cannot fit a scaler on no samples"))?;
        let d = first.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for x in features {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Random permutation, first `n_train` rows train, next `n_test` test, both
/// standardized with statistics of the training rows.
pub fn split_and_standardize(
    ds: &Dataset,
    n_train: usize,
    n_test: usize,
    rng: &mut Prng,
) -> Result<(Dataset, Dataset, Scaler)> {
    if n_train == 0 || n_train + n_test > ds.len() {
        return Err(invalid(format!(
            "cannot split {} samples into {n_train} train + {n_test} test",
            ds.len()
        )));
    }
    let perm = rng.permutation(ds.len());
    let mut train = ds.subset(&perm[..n_train]);
    let mut test = ds.subset(&perm[n_train..n_train + n_test]);
    let scaler = Scaler::fit(&train.features)?;
    for x in train.features.iter_mut().chain(test.features.iter_mut()) {
        *x = scaler.transform(x);
    }
    Ok((train, test, scaler))
}
