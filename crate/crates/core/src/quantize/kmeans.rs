use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

const CODEBOOK_MAGIC: &[u8; 4] = b"SAKM";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
    /// Frames beyond this count are sub-sampled before fitting.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 200,
            max_iters: 100,
            tol: 1e-6,
            max_frames: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansCodebook {
    k: usize,
    dim: usize,
    seed: u64,
    centroids: Vec<f64>,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeansCodebook {
    pub fn from_centroids(centroids: Vec<f64>, k: usize, dim: usize, seed: u64) -> Result<Self> {
        if k < 2 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::Data(format!(
                "codebook needs k >= 2 centroids of dimension {dim}, got {} values for k={k}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("codebook centroids must be finite".into()));
        }
        let mut seen = HashSet::new();
        for c in centroids.chunks_exact(dim) {
            let key: Vec<u64> = c.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::Data("codebook contains identical centroids".into()));
            }
        }
        Ok(Self {
            k,
            dim,
            seed,
            centroids,
            inertia_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, frame: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(frame, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn inertia(&self, frames: &[f64]) -> f64 {
        frames.chunks_exact(self.dim).map(|f| self.nearest(f).1).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.centroids.len() * 8);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {}", word(4))));
        }
        let (k, dim) = (word(8) as usize, word(12) as usize);
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if bytes.len() != 24 + k * dim * 8 {
            return Err(Error::Format("codebook file truncated".into()));
        }
        let centroids = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_centroids(centroids, k, dim, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Lloyd's algorithm with k-means++ seeding over `frames` (`n × dim` row-major).
pub fn fit_codebook(frames: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<KMeansCodebook> {
    let k = cfg.k;
    if k < 2 {
        return Err(Error::Param("k-means needs k >= 2".into()));
    }
    if dim == 0 || frames.len() % dim != 0 {
        return Err(Error::Shape {
            op: "fit_codebook",
            lhs: vec![frames.len()],
            rhs: vec![dim],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_all = frames.len() / dim;
    let data: Vec<f64> = if n_all > cfg.max_frames {
        let mut idx = sample(&mut rng, n_all, cfg.max_frames).into_vec();
        idx.sort_unstable();
        idx.iter()
            .flat_map(|&i| frames[i * dim..(i + 1) * dim].iter().copied())
            .collect()
    } else {
        frames.to_vec()
    };
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    let distinct: HashSet<Vec<u64>> = (0..n)
        .map(|i| row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::Data(format!(
            "k-means with k={k} needs at least {k} distinct frames, have {}",
            distinct.len()
        )));
    }

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if target < d {
                        chosen = Some(i);
                        break;
                    }
                    target -= d;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            unreachable!("fewer distinct frames than k was checked above")
        };
        centroids.extend_from_slice(row(pick));
        let new = &centroids[c * dim..(c + 1) * dim].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist(row(i), new);
            if nd < *d {
                *d = nd;
            }
        }
    }

    let mut cb = KMeansCodebook {
        k,
        dim,
        seed: cfg.seed,
        centroids,
        inertia_history: Vec::new(),
    };
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    for _ in 0..cfg.max_iters {
        for i in 0..n {
            let (a, d) = cb.nearest(row(i));
            assign[i] = a;
            dist[i] = d;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut taken: HashSet<usize> = HashSet::new();
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * dim..(c + 1) * dim].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // Empty cluster: move it to the worst-served frame.
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap();
                taken.insert(far);
                dist[far] = 0.0;
                row(far).to_vec()
            };
            shift = shift.max(sq_dist(&new, cb.centroid(c)).sqrt());
            cb.centroids[c * dim..(c + 1) * dim].copy_from_slice(&new);
        }
        cb.inertia_history.push(cb.inertia(&data));
        if shift < cfg.tol {
            break;
        }
    }
    Ok(cb)
}
