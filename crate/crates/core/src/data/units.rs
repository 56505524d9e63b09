use super::EegRecord;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn unit_len(samples: usize, n: usize) -> Result<usize> {
    if n == 0 || samples % n != 0 {
        return Err(Error::invalid("segment", format!("{n} units do not divide {samples} samples")));
    }
    Ok(samples / n)
}

/// Split a `channels × samples` matrix into `n` units of
/// `channels × samples/n`, each row-major.
pub fn segment_units(x: &[f32], channels: usize, samples: usize, n: usize) -> Result<Vec<Vec<f32>>> {
    if x.len() != channels * samples {
        return Err(Error::shape("segment", &[x.len()], &[channels, samples]));
    }
    let u = unit_len(samples, n)?;
    Ok((0..n)
        .map(|i| {
            let mut unit = Vec::with_capacity(channels * u);
            for c in 0..channels {
                unit.extend_from_slice(&x[c * samples + i * u..c * samples + (i + 1) * u]);
            }
            unit
        })
        .collect())
}

pub fn reassemble(units: &[Vec<f32>], channels: usize) -> Result<Vec<f32>> {
    let n = units.len();
    let per = units.first().map_or(0, Vec::len);
    if channels == 0 || per % channels != 0 || units.iter().any(|u| u.len() != per) {
        return Err(Error::invalid("reassemble", "units must share a channels × width shape"));
    }
    let u = per / channels;
    let samples = n * u;
    let mut x = vec![0.0; channels * samples];
    for (i, unit) in units.iter().enumerate() {
        for c in 0..channels {
            x[c * samples + i * u..c * samples + (i + 1) * u].copy_from_slice(&unit[c * u..(c + 1) * u]);
        }
    }
    Ok(x)
}

/// Units of one record flattened channel-major into an `n × (c·l/n)` matrix.
pub fn units_matrix<T: Real>(rec: &EegRecord, n: usize) -> Result<Tensor<T>> {
    let units = segment_units(&rec.data, rec.channels, rec.samples, n)?;
    let width = rec.channels * (rec.samples / n);
    Tensor::new([n, width], units.concat().into_iter().map(|v| T::of(v as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sized_units() {
        let x: Vec<f32> = (0..128 * 440).map(|i| i as f32).collect();
        let units = segment_units(&x, 128, 440, 110).unwrap();
        assert_eq!(units.len(), 110);
        assert!(units.iter().all(|u| u.len() == 512));
        assert_eq!(reassemble(&units, 128).unwrap(), x);
    }

    #[test]
    fn single_unit_is_the_signal() {
        let x: Vec<f32> = (0..12).map(|i| i as f32 * 0.25).collect();
        assert_eq!(segment_units(&x, 3, 4, 1).unwrap(), vec![x.clone()]);
    }

    #[test]
    fn indivisible_rejected() {
        assert!(segment_units(&[0.0; 10], 1, 10, 3).is_err());
    }
}
