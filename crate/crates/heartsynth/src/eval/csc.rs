//! Correlation between conditioned attributes and measured anatomy.
//!
//! For each generated volume we measure LV volume, RV volume, and mean
//! myocardial wall thickness from a segmentation, then correlate each
//! measurement against the attribute it was conditioned on — picking the
//! phase-matching attribute, so a volume conditioned as end-systole is
//! compared against its ES cavity volumes and ES wall thickness. A
//! structure the segmentation missed entirely yields no measurement; that
//! pair is dropped from the affected correlation and the drop is counted
//! rather than silently shrinking the sample.

use crate::context::ContextVector;
use crate::phantom::{oracle_measure, CardiacMeasurements};
use crate::volume::{SegmentationMask, Spacing};

use super::EvalError;

/// Pearson correlation coefficient of two equal-length vectors.
///
/// The denominator is computed as `√(Σdx²·Σdy²)`, so an exact affine
/// relation `y = a + b·x` built from exactly-representable values comes
/// out as exactly `±1.0`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(EvalError::TooFewVolumes { have: x.len(), need: 2 });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(EvalError::ZeroVariance { side: "left" });
    }
    if syy == 0.0 {
        return Err(EvalError::ZeroVariance { side: "right" });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One conditioning-correlation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CscReport {
    pub lv: Option<f64>,
    pub rv: Option<f64>,
    pub myo: Option<f64>,
    pub dropped_lv: usize,
    pub dropped_rv: usize,
    pub dropped_myo: usize,
    /// Volumes examined (before drops).
    pub n: usize,
    /// One line per absent coefficient explaining why.
    pub notes: Vec<String>,
}

fn correlate(
    name: &str,
    pairs: &[(f64, f64)],
    dropped: usize,
    notes: &mut Vec<String>,
) -> Option<f64> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    match pearson(&xs, &ys) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("{name}: {e} ({} usable pairs, {dropped} dropped)", pairs.len()));
            None
        }
    }
}

/// Correlates already-measured anatomy against conditioned attributes.
pub fn csc_from_measurements(
    measurements: &[CardiacMeasurements],
    contexts: &[ContextVector],
) -> Result<CscReport, EvalError> {
    if measurements.len() != contexts.len() {
        return Err(EvalError::LengthMismatch {
            left: measurements.len(),
            right: contexts.len(),
        });
    }
    let mut lv_pairs = Vec::new();
    let mut rv_pairs = Vec::new();
    let mut myo_pairs = Vec::new();
    let (mut dropped_lv, mut dropped_rv, mut dropped_myo) = (0usize, 0, 0);
    for (m, ctx) in measurements.iter().zip(contexts) {
        let (lv_attr, rv_attr) = ctx.phase_volumes()?;
        let myo_attr = ctx.phase_thickness()?;
        match m.lv_vol() {
            Ok(v) => lv_pairs.push((lv_attr, v)),
            Err(_) => dropped_lv += 1,
        }
        match m.rv_vol() {
            Ok(v) => rv_pairs.push((rv_attr, v)),
            Err(_) => dropped_rv += 1,
        }
        match m.myo_thickness() {
            Ok(v) => myo_pairs.push((myo_attr, v)),
            Err(_) => dropped_myo += 1,
        }
    }
    let mut notes = Vec::new();
    Ok(CscReport {
        lv: correlate("lv", &lv_pairs, dropped_lv, &mut notes),
        rv: correlate("rv", &rv_pairs, dropped_rv, &mut notes),
        myo: correlate("myo", &myo_pairs, dropped_myo, &mut notes),
        dropped_lv,
        dropped_rv,
        dropped_myo,
        n: measurements.len(),
        notes,
    })
}

/// Measures each mask with the analytic oracle, then correlates. Each
/// mask uses its own voxel spacing.
pub fn csc_from_masks(
    masks: &[SegmentationMask],
    spacings: &[Spacing],
    contexts: &[ContextVector],
) -> Result<CscReport, EvalError> {
    if masks.len() != spacings.len() {
        return Err(EvalError::LengthMismatch { left: masks.len(), right: spacings.len() });
    }
    let measurements: Vec<CardiacMeasurements> =
        masks.iter().zip(spacings).map(|(m, &sp)| oracle_measure(m, sp)).collect();
    csc_from_measurements(&measurements, contexts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::NUM_ATTRIBUTES;
    use crate::volume::{LABEL_LV, LABEL_MYO, LABEL_RV};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ctx_with(phase: f64, lv: f64, rv: f64, myo: f64) -> ContextVector {
        let mut raw = [0.0; NUM_ATTRIBUTES];
        raw[3] = phase;
        // ES fields sit at raw[7] (LV), raw[10] (RV), raw[12] (MYO);
        // ED at raw[6], raw[9], raw[13].
        if phase == 1.0 {
            raw[7] = lv;
            raw[10] = rv;
            raw[12] = myo;
        } else {
            raw[6] = lv;
            raw[9] = rv;
            raw[13] = myo;
        }
        ContextVector::from_raw(raw)
    }

    #[test]
    fn exact_affine_relations_give_exactly_unit_correlation() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -3.0 * v + 10.0).collect();
        assert_eq!(pearson(&x, &up).unwrap(), 1.0);
        assert_eq!(pearson(&x, &down).unwrap(), -1.0);
    }

    #[test]
    fn ten_percent_noise_attenuates_as_predicted() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let signal = Normal::new(120.0, 30.0).unwrap();
        let x: Vec<f64> = (0..200).map(|_| signal.sample(&mut rng)).collect();
        let noise = Normal::new(0.0, 3.0).unwrap(); // 10% of the signal std
        let y: Vec<f64> = x.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let r = pearson(&x, &y).unwrap();
        assert!((r - 0.995).abs() <= 0.01, "attenuated correlation {r}");
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(
            pearson(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(EvalError::ZeroVariance { side: "left" })
        ));
    }

    #[test]
    fn measurements_equal_to_attributes_correlate_perfectly() {
        let meas: Vec<CardiacMeasurements> = (0..6)
            .map(|i| {
                let f = i as f64;
                CardiacMeasurements {
                    lv_vol_ml: Some(80.0 + 10.0 * f),
                    rv_vol_ml: Some(90.0 + 8.0 * f),
                    myo_vol_ml: Some(100.0),
                    myo_thickness_mm: Some(6.0 + 0.5 * f),
                }
            })
            .collect();
        let contexts: Vec<ContextVector> = (0..6)
            .map(|i| {
                let f = i as f64;
                let phase = if i % 2 == 0 { 0.0 } else { 1.0 };
                ctx_with(phase, 80.0 + 10.0 * f, 90.0 + 8.0 * f, 6.0 + 0.5 * f)
            })
            .collect();
        let rep = csc_from_measurements(&meas, &contexts).unwrap();
        assert_eq!(rep.lv, Some(1.0));
        assert_eq!(rep.rv, Some(1.0));
        assert_eq!(rep.myo, Some(1.0));
        assert_eq!((rep.dropped_lv, rep.dropped_rv, rep.dropped_myo), (0, 0, 0));
        assert!(rep.notes.is_empty());
    }

    #[test]
    fn missing_structures_are_dropped_and_counted() {
        // Three masks with growing LV/MYO regions; the second one has no
        // RV voxels at all.
        let spacing: Spacing = [10.0, 2.0, 2.0];
        let mut masks = Vec::new();
        for i in 0..3usize {
            let mut labels = Array3::zeros((3, 16, 16));
            for y in 2..(4 + 2 * i) {
                for x in 2..6 {
                    labels[[1, y, x]] = LABEL_LV;
                }
                for x in 7..10 {
                    labels[[1, y, x]] = LABEL_MYO;
                }
                if i != 1 {
                    for x in 11..14 {
                        labels[[1, y, x]] = LABEL_RV;
                    }
                }
            }
            masks.push(SegmentationMask::new(labels).unwrap());
        }
        let spacings = vec![spacing; 3];
        // Attribute values equal the oracle's own measurements, so the
        // surviving pairs correlate exactly.
        let contexts: Vec<ContextVector> = masks
            .iter()
            .map(|m| {
                let meas = oracle_measure(m, spacing);
                ctx_with(
                    0.0,
                    meas.lv_vol_ml.unwrap(),
                    meas.rv_vol_ml.unwrap_or(50.0),
                    meas.myo_thickness_mm.unwrap_or(7.0),
                )
            })
            .collect();
        let rep = csc_from_masks(&masks, &spacings, &contexts).unwrap();
        assert_eq!(rep.dropped_rv, 1);
        assert_eq!(rep.dropped_lv, 0);
        assert_eq!(rep.n, 3);
        assert_eq!(rep.lv, Some(1.0));
        let rv = rep.rv.expect("two RV pairs remain");
        assert!((rv - 1.0).abs() < 1e-12, "rv correlation {rv}");
    }

    #[test]
    fn too_many_drops_surface_in_notes() {
        let empty_rv = CardiacMeasurements {
            lv_vol_ml: Some(100.0),
            rv_vol_ml: None,
            myo_vol_ml: Some(80.0),
            myo_thickness_mm: Some(7.0),
        };
        let meas = vec![empty_rv; 3];
        let contexts: Vec<ContextVector> =
            (0..3).map(|i| ctx_with(0.0, 100.0 + i as f64, 60.0, 7.0)).collect();
        let rep = csc_from_measurements(&meas, &contexts).unwrap();
        assert_eq!(rep.rv, None);
        assert_eq!(rep.dropped_rv, 3);
        assert!(rep.notes.iter().any(|n| n.starts_with("rv:")));
        // LV measurements are constant here, so that correlation is also
        // undefined — but for a different reason, which the note records.
        assert_eq!(rep.lv, None);
        assert!(rep.notes.iter().any(|n| n.starts_with("lv:")));
    }
}
