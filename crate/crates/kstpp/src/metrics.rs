//! Intensity-recovery and prediction metrics.
//!
//! Recovery metrics compare a candidate model against a reference (usually
//! the generating process) at a shared set of probe times, teacher-forcing
//! the observed history into both. Errors are pooled over all probes of all
//! sequences before taking the ratio, so sparse sequences do not dominate.

use crate::error::{Error, Result};
use crate::model::{EventSequence, IntensityModel};
use crate::predict::{predict_sequence, MarginalIntensity, Prediction};
use rayon::prelude::*;

/// Probe grid for one sequence: every event time plus three equally spaced
/// interior points per inter-event gap, including the gaps before the first
/// event and after the last.
pub fn time_probes(seq: &EventSequence, t_max: f64) -> Vec<f64> {
    let times = seq.times();
    let mut bounds = Vec::with_capacity(times.len() + 2);
    bounds.push(0.0);
    bounds.extend_from_slice(times);
    bounds.push(t_max);
    let mut probes = Vec::with_capacity(4 * times.len() + 3);
    for pair in bounds.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b > a {
            for k in 1..=3 {
                probes.push(a + (b - a) * k as f64 / 4.0);
            }
        }
        if b < t_max {
            probes.push(b);
        }
    }
    probes
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityErrorReport {
    pub relative_l2: f64,
    pub probes: usize,
}

/// Relative L2 distance sqrt(sum (a-b)^2 / sum b^2), b the reference.
pub fn relative_l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "relative_l2 over {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let num: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    let den: f64 = b.iter().map(|q| q * q).sum();
    if den <= 0.0 {
        return Err(Error::InvalidInput("reference values are identically zero".into()));
    }
    Ok((num / den).sqrt())
}

fn check_domains(candidate: &dyn IntensityModel, reference: &dyn IntensityModel) -> Result<()> {
    if candidate.domain() != reference.domain() {
        return Err(Error::InvalidInput(
            "candidate and reference models must share a domain".into(),
        ));
    }
    Ok(())
}

/// Recovery error of the space-integrated intensity t -> Lambda(t | H_t),
/// pooled over the probe grids of all sequences.
pub fn temporal_intensity_error(
    candidate: &dyn IntensityModel,
    reference: &dyn IntensityModel,
    seqs: &[EventSequence],
) -> Result<IntensityErrorReport> {
    check_domains(candidate, reference)?;
    let t_max = candidate.domain().t_max;
    let parts: Result<Vec<(f64, f64, usize)>> = seqs
        .par_iter()
        .map(|seq| {
            let cand = MarginalIntensity::new(candidate, seq.events())?;
            let refr = MarginalIntensity::new(reference, seq.events())?;
            let mut num = 0.0;
            let mut den = 0.0;
            let probes = time_probes(seq, t_max);
            for &t in &probes {
                let a = cand.at(t)?;
                let b = refr.at(t)?;
                num += (a - b) * (a - b);
                den += b * b;
            }
            Ok((num, den, probes.len()))
        })
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut count = 0;
    for (a, b, n) in parts? {
        num += a;
        den += b;
        count += n;
    }
    if den <= 0.0 {
        return Err(Error::InvalidInput("reference intensity is identically zero".into()));
    }
    Ok(IntensityErrorReport { relative_l2: (num / den).sqrt(), probes: count })
}

/// Recovery error of the full conditional intensity evaluated on the cell
/// centers of an nx-by-ny spatial grid at every time probe.
pub fn spatiotemporal_intensity_error(
    candidate: &dyn IntensityModel,
    reference: &dyn IntensityModel,
    seqs: &[EventSequence],
    grid: (usize, usize),
) -> Result<IntensityErrorReport> {
    check_domains(candidate, reference)?;
    let (nx, ny) = grid;
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidInput("spatial probe grid must be non-empty".into()));
    }
    let d = candidate.domain();
    let centers = |range: (f64, f64), n: usize| -> Vec<f64> {
        let step = (range.1 - range.0) / n as f64;
        (0..n).map(|i| range.0 + (i as f64 + 0.5) * step).collect()
    };
    let xs = centers(d.x_range, nx);
    let ys = centers(d.y_range, ny);
    let t_max = d.t_max;
    let parts: Result<Vec<(f64, f64, usize)>> = seqs
        .par_iter()
        .map(|seq| {
            let mut cand = candidate.profiler(xs.clone(), ys.clone())?;
            let mut refr = reference.profiler(xs.clone(), ys.clone())?;
            for i in 0..seq.len() {
                cand.push_event(seq.times()[i], seq.xs()[i], seq.ys()[i])?;
                refr.push_event(seq.times()[i], seq.xs()[i], seq.ys()[i])?;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            let probes = time_probes(seq, t_max);
            for &t in &probes {
                let a = cand.eval_at(t)?;
                let b = refr.eval_at(t)?;
                for (p, q) in a.data().iter().zip(b.data()) {
                    num += (p - q) * (p - q);
                    den += q * q;
                }
            }
            Ok((num, den, probes.len() * nx * ny))
        })
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut count = 0;
    for (a, b, n) in parts? {
        num += a;
        den += b;
        count += n;
    }
    if den <= 0.0 {
        return Err(Error::InvalidInput("reference intensity is identically zero".into()));
    }
    Ok(IntensityErrorReport { relative_l2: (num / den).sqrt(), probes: count })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionErrorReport {
    pub time_rmse: f64,
    pub mean_distance: f64,
    pub count: usize,
}

/// Accumulate prediction errors over already computed predictions for one
/// sequence. Exposed so callers can reuse prediction lists.
pub fn prediction_errors_for(preds: &[Prediction], seq: &EventSequence) -> Result<(f64, f64, usize)> {
    let times = seq.times();
    let mut sq = 0.0;
    let mut dist = 0.0;
    for p in preds {
        let n = p.event_index;
        if n == 0 || n >= seq.len() {
            return Err(Error::InvalidInput(format!(
                "prediction for event {} outside teacher-forced range",
                n
            )));
        }
        let actual_wait = times[n] - times[n - 1];
        sq += (p.wait - actual_wait) * (p.wait - actual_wait);
        let dx = p.x - seq.xs()[n];
        let dy = p.y - seq.ys()[n];
        dist += (dx * dx + dy * dy).sqrt();
    }
    Ok((sq, dist, preds.len()))
}

/// Teacher-forced next-event prediction errors pooled over sequences:
/// root-mean-square error of the waiting time and mean Euclidean distance of
/// the location. `limit` caps predictions per sequence by striding.
pub fn prediction_errors(
    model: &dyn IntensityModel,
    seqs: &[EventSequence],
    limit: Option<usize>,
) -> Result<PredictionErrorReport> {
    let parts: Result<Vec<(f64, f64, usize)>> = seqs
        .par_iter()
        .map(|seq| {
            let preds = predict_sequence(model, seq, limit)?;
            prediction_errors_for(&preds, seq)
        })
        .collect();
    let mut sq = 0.0;
    let mut dist = 0.0;
    let mut count = 0;
    for (s, d, n) in parts? {
        sq += s;
        dist += d;
        count += n;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    Ok(PredictionErrorReport {
        time_rmse: (sq / count as f64).sqrt(),
        mean_distance: dist / count as f64,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::PoissonModel;
    use crate::model::{Domain, KstppModel, ModelSettings};
    use crate::simulate::{CRule, SynthConfig, SynthTruthModel};

    fn homogeneous(lambda0: f64, domain: Domain) -> SynthTruthModel {
        SynthTruthModel::new(SynthConfig {
            lambda0,
            beta: 1.0,
            sigma: 0.3,
            c_rule: CRule::TemporalSwitch { threshold: 1.0, before: 0.0, after: 0.0 },
            domain,
        })
    }

    fn demo_seq(domain: &Domain) -> EventSequence {
        EventSequence::new(
            vec![1.0, 2.0, 3.5],
            vec![0.5, -0.5, 0.0],
            vec![0.0, 0.5, -0.5],
            domain,
        )
        .unwrap()
    }

    #[test]
    fn probe_grid_covers_all_gaps() {
        let d = Domain::new(4.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let seq = demo_seq(&d);
        let probes = time_probes(&seq, d.t_max);
        assert_eq!(probes.len(), 4 * 3 + 3);
        assert!(probes.windows(2).all(|w| w[0] < w[1]));
        assert!(probes.contains(&1.0) && probes.contains(&2.0) && probes.contains(&3.5));
        assert!((probes[0] - 0.25).abs() < 1e-15);
        assert!((probes.last().unwrap() - 3.875).abs() < 1e-15);
        assert!(!probes.contains(&4.0));
    }

    #[test]
    fn relative_l2_reference_values() {
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let r = relative_l2(&[3.0, 4.0], &[0.0, 5.0]).unwrap();
        assert!((r - (10.0f64 / 25.0).sqrt()).abs() < 1e-15);
        assert!(relative_l2(&[1.0], &[0.0]).is_err());
        assert!(relative_l2(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn identical_models_have_zero_error() {
        let d = Domain::new(4.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let settings = ModelSettings {
            f_grid: (4, 4, 4),
            g_grid: (4, 4),
            quad_orders: (8, 6, 6),
            init_sd: 0.3,
            ..Default::default()
        };
        let model = KstppModel::init(d, &settings, 5).unwrap();
        let seqs = vec![demo_seq(&d)];
        let t = temporal_intensity_error(&model, &model, &seqs).unwrap();
        assert_eq!(t.relative_l2, 0.0);
        assert_eq!(t.probes, 15);
        let s = spatiotemporal_intensity_error(&model, &model, &seqs, (5, 4)).unwrap();
        assert_eq!(s.relative_l2, 0.0);
        assert_eq!(s.probes, 15 * 20);
    }

    #[test]
    fn homogeneous_mismatch_is_exact() {
        // candidate rate 2 lambda vs reference lambda: pointwise relative
        // error is 1 everywhere, so the pooled relative L2 is exactly 1
        let d = Domain::new(4.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let truth = homogeneous(1.5, d);
        let cand = PoissonModel { rate: 3.0, domain: d, quad_orders: (12, 12, 12) };
        let seqs = vec![demo_seq(&d)];
        let t = temporal_intensity_error(&cand, &truth, &seqs).unwrap();
        assert!((t.relative_l2 - 1.0).abs() < 1e-12, "{}", t.relative_l2);
        let s = spatiotemporal_intensity_error(&cand, &truth, &seqs, (16, 16)).unwrap();
        assert!((s.relative_l2 - 1.0).abs() < 1e-12, "{}", s.relative_l2);
        let matched = PoissonModel { rate: 1.5, domain: d, quad_orders: (12, 12, 12) };
        let z = temporal_intensity_error(&matched, &truth, &seqs).unwrap();
        assert!(z.relative_l2 < 1e-12, "{}", z.relative_l2);
    }

    #[test]
    fn domain_mismatch_is_rejected() {
        let d1 = Domain::new(4.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let d2 = Domain::new(5.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let a = PoissonModel { rate: 1.0, domain: d1, quad_orders: (12, 12, 12) };
        let b = PoissonModel { rate: 1.0, domain: d2, quad_orders: (12, 12, 12) };
        let seqs = vec![demo_seq(&d1)];
        assert!(temporal_intensity_error(&a, &b, &seqs).is_err());
    }

    #[test]
    fn prediction_errors_match_manual_recomputation() {
        let d = Domain::new(4.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let model = PoissonModel { rate: 1.0, domain: d, quad_orders: (12, 12, 12) };
        let seq = demo_seq(&d);
        let preds = predict_sequence(&model, &seq, None).unwrap();
        assert_eq!(preds.len(), 2);
        let mut sq = 0.0;
        let mut dist = 0.0;
        for p in &preds {
            let n = p.event_index;
            let actual = seq.times()[n] - seq.times()[n - 1];
            sq += (p.wait - actual) * (p.wait - actual);
            dist += ((p.x - seq.xs()[n]).powi(2) + (p.y - seq.ys()[n]).powi(2)).sqrt();
        }
        let report = prediction_errors(&model, &[seq], None).unwrap();
        assert_eq!(report.count, 2);
        assert!((report.time_rmse - (sq / 2.0).sqrt()).abs() < 1e-12);
        assert!((report.mean_distance - dist / 2.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_limit_caps_count() {
        let d = Domain::new(10.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let times: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let seq = EventSequence::new(times, vec![0.0; 8], vec![0.0; 8], &d).unwrap();
        let model = PoissonModel { rate: 1.0, domain: d, quad_orders: (12, 12, 12) };
        let full = prediction_errors(&model, std::slice::from_ref(&seq), None).unwrap();
        assert_eq!(full.count, 7);
        let capped = prediction_errors(&model, &[seq], Some(3)).unwrap();
        assert!(capped.count <= 3, "{}", capped.count);
        assert!(capped.count >= 2);
    }
}
