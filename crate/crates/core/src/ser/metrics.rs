use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Emotion;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const N_CLASSES: usize = 4;

/// Counts indexed `[true][predicted]` in the fixed class order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub wa: f64,
    pub ua: f64,
    /// Some class had no test samples; UA averages the present ones.
    pub missing_classes: bool,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape { op: "confusion", lhs: vec![truth.len()], rhs: vec![pred.len()] });
        }
        let mut m = Self::default();
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= N_CLASSES || p >= N_CLASSES {
                return Err(Error::Data(format!("class index out of range: {t}, {p}")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Diagonal over row sum, `None` for absent classes.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let n = self.row_sum(c);
        (n > 0).then(|| self.counts[c][c] as f64 / n as f64)
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for i in 0..N_CLASSES {
            for j in 0..N_CLASSES {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("cannot score an empty split".into()));
        }
        let trace: u64 = (0..N_CLASSES).map(|c| self.counts[c][c]).sum();
        let recalls: Vec<f64> = (0..N_CLASSES).filter_map(|c| self.recall(c)).collect();
        Ok(Scores {
            wa: trace as f64 / total as f64,
            ua: recalls.iter().sum::<f64>() / recalls.len() as f64,
            missing_classes: recalls.len() < N_CLASSES,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for e in Emotion::ALL {
            s.push(',');
            s.push_str(e.as_str());
        }
        s.push('\n');
        for e in Emotion::ALL {
            s.push_str(e.as_str());
            for c in self.counts[e.index()] {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }

    /// Row-normalized heatmap: one square per cell, white for 0 and dark blue
    /// for 1, with a thin grid.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        const CELL: usize = 48;
        const GRID: usize = 2;
        let side = N_CLASSES * CELL + (N_CLASSES + 1) * GRID;
        let mut img = vec![200u8; side * side * 3];
        for (i, row) in self.counts.iter().enumerate() {
            let n = self.row_sum(i).max(1) as f64;
            for (j, &c) in row.iter().enumerate() {
                let v = c as f64 / n;
                let rgb = [(255.0 * (1.0 - 0.85 * v)) as u8, (255.0 * (1.0 - 0.65 * v)) as u8, (255.0 * (1.0 - 0.25 * v)) as u8];
                let (y0, x0) = (GRID + i * (CELL + GRID), GRID + j * (CELL + GRID));
                for y in y0..y0 + CELL {
                    for x in x0..x0 + CELL {
                        img[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, side as u32, side as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
            w.write_image_data(&img).map_err(|e| Error::Format(e.to_string()))?;
        }
        write_atomic(path, &bytes)
    }
}

/// WA and UA straight from per-utterance labels.
pub fn direct_scores(truth: &[usize], pred: &[usize]) -> Result<(f64, f64)> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Data("need equal, non-empty label lists".into()));
    }
    let wa = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
    let mut recalls = Vec::new();
    for c in 0..N_CLASSES {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
        if !idx.is_empty() {
            recalls.push(idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64);
        }
    }
    Ok((wa, recalls.iter().sum::<f64>() / recalls.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let mut truth = vec![0; 10];
        truth.extend(vec![1; 30]);
        let mut pred = vec![0; 8];
        pred.extend(vec![2; 2]);
        pred.extend(vec![1; 15]);
        pred.extend(vec![3; 15]);
        let s = ConfusionMatrix::from_predictions(&truth, &pred).unwrap().scores().unwrap();
        assert!((s.wa - 0.575).abs() < 1e-12);
        assert!((s.ua - 0.65).abs() < 1e-12);
        assert!(s.missing_classes);
    }

    #[test]
    fn diagonal_is_perfect() {
        let t = vec![0, 1, 2, 3, 3, 2];
        let s = ConfusionMatrix::from_predictions(&t, &t).unwrap().scores().unwrap();
        assert_eq!((s.wa, s.ua), (1.0, 1.0));
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(matches!(ConfusionMatrix::default().scores(), Err(Error::Data(_))));
    }

    #[test]
    fn heatmap_and_csv() {
        let m = ConfusionMatrix::from_predictions(&[0, 1, 2, 3], &[0, 1, 3, 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        m.write_png(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(m.to_csv().starts_with("true\\pred,angry,happy,neutral,sad\n"));
    }

    proptest! {
        #[test]
        fn matrix_and_direct_paths_agree(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let s = ConfusionMatrix::from_predictions(&t, &p).unwrap().scores().unwrap();
            let (wa, ua) = direct_scores(&t, &p).unwrap();
            prop_assert_eq!(s.wa, wa);
            prop_assert!((s.ua - ua).abs() < 1e-15);
        }

        #[test]
        fn balanced_classes_give_equal_wa_and_ua(per in 1usize..20, preds in proptest::collection::vec(0usize..4, 80)) {
            let t: Vec<usize> = (0..4 * per).map(|i| i % 4).collect();
            let p: Vec<usize> = (0..4 * per).map(|i| preds[i % 80]).collect();
            let s = ConfusionMatrix::from_predictions(&t, &p).unwrap().scores().unwrap();
            prop_assert!((s.wa - s.ua).abs() < 1e-12);
        }
    }
}
