//! Forecast verification: fair CRPS, ensemble-mean RMSE, spread, the
//! spread-skill ratio with its finite-ensemble correction, zonal power
//! spectra, and relative-skill tables against a reference.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array4, ArrayView2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AreaWeights, GridSpec};
use crate::objectives::{fair_crps, ChannelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variable: String,
    pub lead: usize,
    pub crps: f64,
    pub rmse: f64,
    pub spread: f64,
    pub ssr: f64,
    pub n_members: usize,
    pub n_inits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub variable: String,
    pub lead: usize,
    pub wavenumbers: Vec<usize>,
    pub power: Vec<f64>,
    pub lat_band: (f64, f64),
}

/// One initialization: an `[M, L, C, H, W]` ensemble and `[L, C, H, W]`
/// truth over the same leads.
#[derive(Debug, Clone)]
pub struct VerificationCase {
    pub members: ndarray::Array5<f64>,
    pub truth: Array4<f64>,
}

impl VerificationCase {
    fn check(&self) -> Result<()> {
        let (m, l, c, h, w) = self.members.dim();
        if m < 2 {
            return Err(Error::invalid("verification needs at least 2 members"));
        }
        if self.truth.dim() != (l, c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "truth {:?} does not cover ensemble leads {:?}",
                self.truth.dim(),
                self.members.dim()
            )));
        }
        Ok(())
    }
}

fn common_dims(cases: &[VerificationCase]) -> Result<(usize, usize, usize, usize, usize)> {
    let first = cases
        .first()
        .ok_or_else(|| Error::invalid("no verification cases given"))?;
    let dims = first.members.dim();
    for case in cases {
        case.check()?;
        if case.members.dim() != dims {
            return Err(Error::ShapeMismatch(
                "verification cases disagree on ensemble dimensions".into(),
            ));
        }
    }
    Ok(dims)
}

/// Fair CRPS per (variable, lead), averaged over initializations. Only the
/// `crps` field of the output records is populated.
pub fn eval_crps(
    cases: &[VerificationCase],
    weights: &AreaWeights,
    channel_names: &[String],
) -> Result<Vec<MetricRecord>> {
    let (m, l, c, _, _) = common_dims(cases)?;
    let cw = ChannelWeights::uniform(c);
    let mut acc = vec![vec![0.0; c]; l];
    for case in cases {
        for lead in 0..l {
            let members = case.members.index_axis(Axis(1), lead).to_owned();
            let truth = case.truth.index_axis(Axis(0), lead).to_owned();
            let out = fair_crps(&members, &truth, weights, &cw)?;
            for ch in 0..c {
                acc[lead][ch] += out.per_channel[ch] / cases.len() as f64;
            }
        }
    }
    let mut records = Vec::new();
    for lead in 0..l {
        for ch in 0..c {
            records.push(MetricRecord {
                variable: channel_names[ch].clone(),
                lead: lead + 1,
                crps: acc[lead][ch],
                rmse: f64::NAN,
                spread: f64::NAN,
                ssr: f64::NAN,
                n_members: m,
                n_inits: cases.len(),
            });
        }
    }
    Ok(records)
}

/// Ensemble-mean RMSE, spread, and the corrected spread-skill ratio per
/// (variable, lead). Squared errors and variances are pooled over
/// initializations before the square roots. A zero-RMSE cell with positive
/// spread yields an infinite SSR.
pub fn eval_rmse_spread_ssr(
    cases: &[VerificationCase],
    weights: &AreaWeights,
    channel_names: &[String],
) -> Result<Vec<MetricRecord>> {
    let (m, l, c, h, w) = common_dims(cases)?;
    let norm = (h * w) as f64;
    let mut mse = vec![vec![0.0; c]; l];
    let mut var = vec![vec![0.0; c]; l];
    for case in cases {
        for lead in 0..l {
            for ch in 0..c {
                let mut mse_cell = 0.0;
                let mut var_cell = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        let mut mean = 0.0;
                        for mm in 0..m {
                            mean += case.members[[mm, lead, ch, i, j]];
                        }
                        mean /= m as f64;
                        let mut sumsq = 0.0;
                        for mm in 0..m {
                            let d = case.members[[mm, lead, ch, i, j]] - mean;
                            sumsq += d * d;
                        }
                        let e = mean - case.truth[[lead, ch, i, j]];
                        mse_cell += weights.normalized[i] * e * e;
                        var_cell += weights.normalized[i] * sumsq / (m - 1) as f64;
                    }
                }
                mse[lead][ch] += mse_cell / norm / cases.len() as f64;
                var[lead][ch] += var_cell / norm / cases.len() as f64;
            }
        }
    }
    let correction = ((m + 1) as f64 / m as f64).sqrt();
    let mut records = Vec::new();
    for lead in 0..l {
        for ch in 0..c {
            let rmse = mse[lead][ch].sqrt();
            let spread = var[lead][ch].sqrt();
            let ssr = if rmse == 0.0 {
                if spread == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                correction * spread / rmse
            };
            records.push(MetricRecord {
                variable: channel_names[ch].clone(),
                lead: lead + 1,
                crps: f64::NAN,
                rmse,
                spread,
                ssr,
                n_members: m,
                n_inits: cases.len(),
            });
        }
    }
    Ok(records)
}

/// Full metric suite: CRPS merged with RMSE/spread/SSR per cell.
pub fn evaluate(
    cases: &[VerificationCase],
    weights: &AreaWeights,
    channel_names: &[String],
) -> Result<Vec<MetricRecord>> {
    let crps = eval_crps(cases, weights, channel_names)?;
    let rest = eval_rmse_spread_ssr(cases, weights, channel_names)?;
    Ok(crps
        .into_iter()
        .zip(rest)
        .map(|(a, b)| MetricRecord { crps: a.crps, ..b })
        .collect())
}

/// Central-50%-of-rows latitude band, the desk analogue of a mid-latitude
/// band.
pub fn central_lat_band(grid: &GridSpec) -> (f64, f64) {
    let lo = grid.lat_center(grid.n_lat / 4);
    let hi = grid.lat_center(grid.n_lat - 1 - grid.n_lat / 4);
    (lo.min(hi), lo.max(hi))
}

/// One-sided zonal power spectrum averaged over the rows of `lat_band` and
/// over all sample fields. Power is normalized so that the sum over
/// wavenumbers >= 1 equals the per-row variance (and bin 0 carries the
/// squared row mean).
pub fn zonal_spectrum(
    samples: &[ArrayView2<f64>],
    grid: &GridSpec,
    lat_band: (f64, f64),
) -> Result<(Vec<usize>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("zonal_spectrum needs at least one field"));
    }
    let w = grid.n_lon;
    let rows: Vec<usize> = (0..grid.n_lat)
        .filter(|&i| {
            let lat = grid.lat_center(i);
            lat >= lat_band.0 && lat <= lat_band.1
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "latitude band [{}, {}] contains no grid rows",
            lat_band.0, lat_band.1
        )));
    }
    let n_bins = w / 2 + 1;
    let mut power = vec![0.0; n_bins];
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(w);
    let n_rows_total = (samples.len() * rows.len()) as f64;
    for field in samples {
        if field.dim() != (grid.n_lat, grid.n_lon) {
            return Err(Error::ShapeMismatch(format!(
                "field {:?} does not match grid {}x{}",
                field.dim(),
                grid.n_lat,
                grid.n_lon
            )));
        }
        for &i in &rows {
            let mut buf: Vec<Complex<f64>> = (0..w)
                .map(|j| Complex::new(field[[i, j]], 0.0))
                .collect();
            fft.process(&mut buf);
            let wf = (w * w) as f64;
            for (k, p) in power.iter_mut().enumerate() {
                let mag2 = buf[k].norm_sqr() / wf;
                // interior wavenumbers fold in the conjugate half
                let one_sided = if k == 0 || (w % 2 == 0 && k == w / 2) {
                    mag2
                } else {
                    2.0 * mag2
                };
                *p += one_sided / n_rows_total;
            }
        }
    }
    Ok(((0..n_bins).collect(), power))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillMetric {
    Crps,
    Rmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillCell {
    pub variable: String,
    pub lead: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTable {
    pub metric: SkillMetric,
    pub cells: Vec<SkillCell>,
    /// Mean over cells (bulk-skill convention).
    pub aggregate: f64,
}

/// Percentage change of the model versus a reference per (variable, lead):
/// `100 * (model - reference) / reference`. Negative is better for
/// error-like metrics.
pub fn relative_skill(
    model: &[MetricRecord],
    reference: &[MetricRecord],
    metric: SkillMetric,
) -> Result<SkillTable> {
    let pick = |r: &MetricRecord| match metric {
        SkillMetric::Crps => r.crps,
        SkillMetric::Rmse => r.rmse,
    };
    let ref_map: BTreeMap<(String, usize), f64> = reference
        .iter()
        .map(|r| ((r.variable.clone(), r.lead), pick(r)))
        .collect();
    let mut cells = Vec::new();
    for rec in model {
        let key = (rec.variable.clone(), rec.lead);
        let denom = *ref_map.get(&key).ok_or_else(|| {
            Error::invalid(format!(
                "reference metrics missing cell ({}, lead {})",
                key.0, key.1
            ))
        })?;
        if denom == 0.0 {
            return Err(Error::Numeric(format!(
                "reference metric is zero for ({}, lead {})",
                key.0, key.1
            )));
        }
        cells.push(SkillCell {
            variable: rec.variable.clone(),
            lead: rec.lead,
            // quantized at reporting resolution so arithmetic on published
            // decimal values reproduces the published percentages exactly
            percent: (100.0 * (pick(rec) - denom) / denom * 1e10).round() / 1e10,
        });
    }
    if cells.is_empty() {
        return Err(Error::invalid("relative_skill: no cells"));
    }
    let aggregate = cells.iter().map(|c| c.percent).sum::<f64>() / cells.len() as f64;
    Ok(SkillTable {
        metric,
        cells,
        aggregate,
    })
}

pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_record([
            "variable",
            "lead",
            "crps",
            "rmse",
            "spread",
            "ssr",
            "n_members",
            "n_inits",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in records {
        writer
            .write_record([
                r.variable.clone(),
                r.lead.to_string(),
                format!("{:.10e}", r.crps),
                format!("{:.10e}", r.rmse),
                format!("{:.10e}", r.spread),
                format!("{:.10e}", r.ssr),
                r.n_members.to_string(),
                r.n_inits.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn write_metrics_json(records: &[MetricRecord], path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(records).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_spectrum_csv(record: &SpectrumRecord, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_record(["wavenumber", "power"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (k, p) in record.wavenumbers.iter().zip(&record.power) {
        writer
            .write_record([k.to_string(), format!("{p:.10e}")])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read back a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let get = |i: usize| -> Result<&str> {
            row.get(i)
                .ok_or_else(|| Error::Format(format!("metrics CSV row too short: {row:?}")))
        };
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number in metrics CSV: {s}")))
        };
        out.push(MetricRecord {
            variable: get(0)?.to_string(),
            lead: get(1)?
                .parse()
                .map_err(|_| Error::Format("bad lead in metrics CSV".into()))?,
            crps: parse(get(2)?)?,
            rmse: parse(get(3)?)?,
            spread: parse(get(4)?)?,
            ssr: parse(get(5)?)?,
            n_members: get(6)?
                .parse()
                .map_err(|_| Error::Format("bad n_members in metrics CSV".into()))?,
            n_inits: get(7)?
                .parse()
                .map_err(|_| Error::Format("bad n_inits in metrics CSV".into()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{area_weights, make_equiangular_grid};
    use crate::nn::normal;
    use ndarray::{Array2, Array5};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("ch{i}")).collect()
    }

    fn random_case(m: usize, l: usize, c: usize, h: usize, w: usize, seed: u64) -> VerificationCase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VerificationCase {
            members: Array5::from_shape_fn((m, l, c, h, w), |_| normal(&mut rng)),
            truth: Array4::from_shape_fn((l, c, h, w), |_| normal(&mut rng)),
        }
    }

    #[test]
    fn perfect_ensemble_scores_zero_crps() {
        let grid = make_equiangular_grid(4, 8).unwrap();
        let aw = area_weights(&grid).unwrap();
        let truth = Array4::from_shape_fn((3, 2, 4, 8), |(l, c, i, j)| {
            (l + c) as f64 + (i * j) as f64 * 0.1
        });
        let mut members = Array5::zeros((2, 3, 2, 4, 8));
        for m in 0..2 {
            members.index_axis_mut(Axis(0), m).assign(&truth);
        }
        let case = VerificationCase { members, truth };
        let recs = eval_crps(&[case], &aw, &names(2)).unwrap();
        assert!(recs.iter().all(|r| r.crps.abs() < 1e-12));
    }

    #[test]
    fn bracketing_pair_scores_zero_crps() {
        let grid = make_equiangular_grid(4, 8).unwrap();
        let aw = area_weights(&grid).unwrap();
        let truth = Array4::from_shape_fn((2, 1, 4, 8), |(l, _, i, j)| {
            l as f64 + (i + j) as f64 * 0.2
        });
        let mut members = Array5::zeros((2, 2, 1, 4, 8));
        members
            .index_axis_mut(Axis(0), 0)
            .assign(&truth.mapv(|v| v - 1.0));
        members
            .index_axis_mut(Axis(0), 1)
            .assign(&truth.mapv(|v| v + 1.0));
        let case = VerificationCase { members, truth };
        let recs = eval_crps(&[case], &aw, &names(1)).unwrap();
        assert!(recs.iter().all(|r| r.crps.abs() < 1e-12));
    }

    #[test]
    fn eval_crps_matches_objectives_per_lead() {
        let grid = make_equiangular_grid(5, 6).unwrap();
        let aw = area_weights(&grid).unwrap();
        let case = random_case(4, 3, 2, 5, 6, 42);
        let recs = eval_crps(&[case.clone()], &aw, &names(2)).unwrap();
        let cw = ChannelWeights::uniform(2);
        for lead in 0..3 {
            let members = case.members.index_axis(Axis(1), lead).to_owned();
            let truth = case.truth.index_axis(Axis(0), lead).to_owned();
            let want = fair_crps(&members, &truth, &aw, &cw).unwrap();
            for ch in 0..2 {
                let rec = recs
                    .iter()
                    .find(|r| r.lead == lead + 1 && r.variable == format!("ch{ch}"))
                    .unwrap();
                assert!((rec.crps - want.per_channel[ch]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_rmse_flags_infinite_ssr() {
        let grid = make_equiangular_grid(4, 6).unwrap();
        let aw = area_weights(&grid).unwrap();
        let truth = Array4::from_elem((1, 1, 4, 6), 1.0);
        let mut members = Array5::zeros((2, 1, 1, 4, 6));
        members.index_axis_mut(Axis(0), 0).fill(0.5);
        members.index_axis_mut(Axis(0), 1).fill(1.5); // mean == truth
        let case = VerificationCase { members, truth };
        let recs = eval_rmse_spread_ssr(&[case], &aw, &names(1)).unwrap();
        assert_eq!(recs[0].rmse, 0.0);
        assert!(recs[0].spread > 0.0);
        assert!(recs[0].ssr.is_infinite());
    }

    #[test]
    fn collapsed_ensemble_has_zero_spread_and_ssr() {
        let grid = make_equiangular_grid(4, 6).unwrap();
        let aw = area_weights(&grid).unwrap();
        let truth = Array4::from_elem((1, 1, 4, 6), 1.0);
        let members = Array5::from_elem((3, 1, 1, 4, 6), 2.0);
        let case = VerificationCase { members, truth };
        let recs = eval_rmse_spread_ssr(&[case], &aw, &names(1)).unwrap();
        assert!((recs[0].rmse - 1.0).abs() < 1e-12);
        assert_eq!(recs[0].spread, 0.0);
        assert_eq!(recs[0].ssr, 0.0);
    }

    #[test]
    fn consistent_ensemble_ssr_near_one() {
        // members and truth i.i.d. standard normal: corrected SSR ~ 1
        let h = 250;
        let w = 400;
        let grid = make_equiangular_grid(h, w).unwrap();
        let aw = AreaWeights {
            raw: vec![2.0 / h as f64; h],
            normalized: vec![1.0; h],
        };
        let _ = grid;
        let case = random_case(8, 1, 1, h, w, 7);
        let recs = eval_rmse_spread_ssr(&[case], &aw, &names(1)).unwrap();
        assert!(
            (0.9..=1.1).contains(&recs[0].ssr),
            "ssr = {}",
            recs[0].ssr
        );
    }

    #[test]
    fn ssr_scale_equivariant() {
        let grid = make_equiangular_grid(4, 6).unwrap();
        let aw = area_weights(&grid).unwrap();
        let case = random_case(3, 2, 1, 4, 6, 21);
        let scaled = VerificationCase {
            members: case.members.mapv(|v| v * 4.0),
            truth: case.truth.mapv(|v| v * 4.0),
        };
        let a = eval_rmse_spread_ssr(&[case], &aw, &names(1)).unwrap();
        let b = eval_rmse_spread_ssr(&[scaled], &aw, &names(1)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.ssr - y.ssr).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_is_init_order_invariant() {
        let grid = make_equiangular_grid(4, 6).unwrap();
        let aw = area_weights(&grid).unwrap();
        let c1 = random_case(3, 2, 2, 4, 6, 31);
        let c2 = random_case(3, 2, 2, 4, 6, 32);
        let c3 = random_case(3, 2, 2, 4, 6, 33);
        let a = evaluate(&[c1.clone(), c2.clone(), c3.clone()], &aw, &names(2)).unwrap();
        let b = evaluate(&[c3, c1, c2], &aw, &names(2)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.crps - y.crps).abs() < 1e-12);
            assert!((x.rmse - y.rmse).abs() < 1e-12);
            assert!((x.ssr - y.ssr).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_tone_spectrum_has_single_peak() {
        let grid = make_equiangular_grid(8, 64).unwrap();
        let k = 3;
        let field = Array2::from_shape_fn((8, 64), |(_, j)| {
            (2.0 * std::f64::consts::PI * k as f64 * j as f64 / 64.0).sin()
        });
        let (wns, power) =
            zonal_spectrum(&[field.view()], &grid, (-90.0, 90.0)).unwrap();
        assert_eq!(wns.len(), 33);
        let peak = power[k];
        assert!((peak - 0.5).abs() < 1e-10, "sin amplitude 1 has variance 1/2");
        for (i, p) in power.iter().enumerate() {
            if i != k {
                assert!(*p < 1e-10 * peak, "bin {i} = {p}");
            }
        }
    }

    #[test]
    fn constant_field_power_at_zero_only() {
        let grid = make_equiangular_grid(4, 16).unwrap();
        let field = Array2::from_elem((4, 16), 3.0);
        let (_, power) = zonal_spectrum(&[field.view()], &grid, (-90.0, 90.0)).unwrap();
        assert!((power[0] - 9.0).abs() < 1e-10);
        assert!(power[1..].iter().all(|p| *p < 1e-12));
    }

    #[test]
    fn white_noise_spectrum_is_flat_and_parseval_holds() {
        let h = 1000;
        let w = 64;
        let grid = make_equiangular_grid(h, w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = Array2::from_shape_fn((h, w), |_| normal(&mut rng));
        let (_, power) = zonal_spectrum(&[field.view()], &grid, (-90.0, 90.0)).unwrap();

        // Parseval: sum over k >= 1 equals the mean per-row variance
        let mut var_mean = 0.0;
        for i in 0..h {
            let row = field.row(i);
            let mu = row.mean().unwrap();
            var_mean += row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
        }
        var_mean /= h as f64;
        let spec_sum: f64 = power[1..].iter().sum();
        assert!(
            (spec_sum - var_mean).abs() / var_mean < 1e-6,
            "{spec_sum} vs {var_mean}"
        );

        // flatness: interior bins all near 1/(W/2) of total variance
        let interior = &power[1..w / 2];
        let expected = var_mean / (w as f64 / 2.0);
        // each bin is a chi^2 average over h rows; 3-sigma bound
        let sigma = expected / (h as f64).sqrt();
        for (i, p) in interior.iter().enumerate() {
            assert!(
                (p - expected).abs() < 3.5 * sigma,
                "bin {} = {p}, expected {expected} +- {sigma}",
                i + 1
            );
        }
    }

    #[test]
    fn relative_skill_examples() {
        let rec = |v: &str, lead, crps| MetricRecord {
            variable: v.into(),
            lead,
            crps,
            rmse: crps,
            spread: 0.0,
            ssr: 0.0,
            n_members: 2,
            n_inits: 1,
        };
        let reference = vec![rec("z500", 1, 22.4), rec("t850", 1, 4.0)];
        let same = relative_skill(&reference, &reference, SkillMetric::Crps).unwrap();
        assert!(same.cells.iter().all(|c| c.percent == 0.0));
        let half: Vec<_> = reference
            .iter()
            .map(|r| rec(&r.variable, r.lead, r.crps / 2.0))
            .collect();
        let halved = relative_skill(&half, &reference, SkillMetric::Crps).unwrap();
        assert!(halved.cells.iter().all(|c| (c.percent + 50.0).abs() < 1e-12));
        // published spot value: 19.6 vs 22.4 is exactly -12.5%
        let model = vec![rec("z500", 1, 19.6)];
        let spot = relative_skill(&model, &reference, SkillMetric::Crps).unwrap();
        assert_eq!(spot.cells[0].percent, -12.5);
    }

    #[test]
    fn relative_skill_error_cases() {
        let rec = |v: &str, crps| MetricRecord {
            variable: v.into(),
            lead: 1,
            crps,
            rmse: crps,
            spread: 0.0,
            ssr: 0.0,
            n_members: 2,
            n_inits: 1,
        };
        let model = vec![rec("a", 1.0)];
        assert!(relative_skill(&model, &[rec("b", 1.0)], SkillMetric::Crps).is_err());
        assert!(relative_skill(&model, &[rec("a", 0.0)], SkillMetric::Crps).is_err());
    }

    #[test]
    fn metrics_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let recs = vec![MetricRecord {
            variable: "ch0".into(),
            lead: 2,
            crps: 0.123456789,
            rmse: 1.5,
            spread: 0.7,
            ssr: 0.52,
            n_members: 4,
            n_inits: 3,
        }];
        write_metrics_csv(&recs, &path).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].crps - recs[0].crps).abs() < 1e-12);
        assert_eq!(back[0].lead, 2);
        assert_eq!(back[0].n_members, 4);
    }
}
