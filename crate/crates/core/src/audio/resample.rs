use super::Waveform;
use crate::error::{Error, Result};

const ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited interpolation of `x` at positions `n * step`, `n < out_len`.
/// A step above one lowers the cutoff to avoid aliasing.
pub fn resample_to_len(x: &[f32], step: f64, out_len: usize) -> Vec<f32> {
    assert!(step > 0.0);
    if (step - 1.0).abs() < 1e-15 {
        let mut out: Vec<f32> = x.iter().copied().take(out_len).collect();
        out.resize(out_len, 0.0);
        return out;
    }
    let cutoff = (1.0 / step).min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let n_in = x.len() as isize;
    (0..out_len)
        .map(|n| {
            let pos = n as f64 * step;
            let lo = (pos - half_width).ceil().max(0.0) as isize;
            let hi = ((pos + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let t = pos - k as f64;
                let w = 0.5 + 0.5 * (std::f64::consts::PI * t / half_width).cos();
                acc += x[k as usize] as f64 * cutoff * sinc(cutoff * t) * w;
            }
            acc as f32
        })
        .collect()
}

/// Converts `x` to `target_rate`.
pub fn resample(x: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Param("target sample rate must be positive".into()));
    }
    if x.sample_rate() == target_rate {
        return Ok(x.clone());
    }
    let step = x.sample_rate() as f64 / target_rate as f64;
    let out_len = ((x.len() as f64) / step).round().max(1.0) as usize;
    Waveform::new(resample_to_len(x.samples(), step, out_len), target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_preserves_a_low_tone() {
        let sr = 8000.0;
        let x: Vec<f32> = (0..8000)
            .map(|n| (2.0 * std::f64::consts::PI * 300.0 * n as f64 / sr).sin() as f32)
            .collect();
        let w = Waveform::new(x, 8000).unwrap();
        let y = resample(&w, 16000).unwrap();
        assert_eq!(y.sample_rate(), 16000);
        assert_eq!(y.len(), 16000);
        for n in 200..15800 {
            let expect = (2.0 * std::f64::consts::PI * 300.0 * n as f64 / 16000.0).sin();
            assert!((y.samples()[n] as f64 - expect).abs() < 1e-2, "n={n}");
        }
    }

    #[test]
    fn unit_step_is_identity() {
        let x = vec![0.1, -0.2, 0.3, 0.4];
        assert_eq!(resample_to_len(&x, 1.0, 4), x);
    }
}
