//! Estimators evaluated on particle samples and the per-record diagnostics row.

mod density;
mod entropy;
mod inequalities;
mod kdtree;

pub use density::{
    fisher_frac, fisher_frac_with_band, gagliardo_constant, kde_on_grid, lp_norm_kde,
    seminorm_on_grid, DensityGrid, FisherEstimate, GridSpec,
};
pub use entropy::{entropy_knn, EntropyEstimate};
pub use inequalities::{
    hls_battery, hls_inequality_check, hls_r_window, lp_interpolation_check, pairwise_neg_moment,
    HlsReport, LpInterpolationReport, NegMoment,
};
pub use kdtree::KdTree;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::particles::{InitialSpec, SimConfig, Snapshot};
use crate::transport;
use crate::Vec3;

/// `(1/N) Σ |v_i|^k` for `k ∈ {2, 4, 6, 8}`.
pub fn moment_k(sample: &[Vec3], k: u32) -> Result<f64> {
    if !matches!(k, 2 | 4 | 6 | 8) {
        return Err(domain(format!(
            "moment order {k} must be one of 2, 4, 6, 8"
        )));
    }
    Ok(abs_moment(sample, k as f64))
}

/// `(1/N) Σ |v_i|^s` for any real order `s`.
pub fn abs_moment(sample: &[Vec3], s: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let half = 0.5 * s;
    sample.iter().map(|v| v.norm2().powf(half)).sum::<f64>() / sample.len() as f64
}

pub fn mean_velocity(sample: &[Vec3]) -> Vec3 {
    sample.iter().fold(Vec3::ZERO, |a, v| a + *v) / sample.len().max(1) as f64
}

/// Maxwellian with the sample's mean and temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxwellianReference {
    pub mean: Vec3,
    /// Central second moment divided by three.
    pub temperature: f64,
    /// The sample has (numerically) no spread.
    pub degenerate: bool,
}

impl MaxwellianReference {
    pub fn spec(&self) -> InitialSpec {
        InitialSpec::Maxwellian {
            mean: self.mean.into(),
            temperature: self.temperature,
        }
    }
}

pub fn maxwellian_reference(sample: &[Vec3]) -> Result<MaxwellianReference> {
    if sample.len() < 100 {
        return Err(domain(format!(
            "maxwellian reference needs >= 100 points, got {}",
            sample.len()
        )));
    }
    let mean = mean_velocity(sample);
    let temperature =
        sample.iter().map(|v| (*v - mean).norm2()).sum::<f64>() / (3.0 * sample.len() as f64);
    let scale = mean.norm2().max(1.0);
    Ok(MaxwellianReference {
        mean,
        temperature,
        degenerate: temperature <= 1e-14 * scale,
    })
}

/// Which estimators a record carries; disabled ones are stored as NaN.
///
/// A disabled estimator serializes as `false`, since not every format has a
/// null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsOptions {
    /// Order of the `Mk` column.
    pub moment_order: u32,
    /// Neighbour rank for the entropy estimate.
    #[serde(with = "off_or")]
    pub entropy_k: Option<usize>,
    /// Grid resolution for the Fisher estimate.
    #[serde(with = "off_or")]
    pub fisher_resolution: Option<usize>,
    #[serde(with = "off_or")]
    pub neg_moment_lambda: Option<f64>,
    /// Directions for the sliced distance to the matched Maxwellian.
    #[serde(with = "off_or")]
    pub w2_projections: Option<usize>,
}

mod off_or {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr<T> {
        Flag(bool),
        Value(T),
    }

    pub fn serialize<S: Serializer, T: Serialize + Copy>(
        v: &Option<T>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x).serialize(s),
            None => Repr::<T>::Flag(false).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(
        d: D,
    ) -> Result<Option<T>, D::Error> {
        match Repr::<T>::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Flag(false) => Ok(None),
            Repr::Flag(true) => Err(D::Error::custom(
                "use a number to enable an estimator, or false to disable it",
            )),
        }
    }
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        DiagnosticsOptions {
            moment_order: 6,
            entropy_k: Some(5),
            fisher_resolution: Some(64),
            neg_moment_lambda: Some(0.5),
            w2_projections: Some(64),
        }
    }
}

impl DiagnosticsOptions {
    /// Moments, momentum, gate value and jump rate only.
    pub fn minimal() -> Self {
        DiagnosticsOptions {
            moment_order: 6,
            entropy_k: None,
            fisher_resolution: None,
            neg_moment_lambda: None,
            w2_projections: None,
        }
    }
}

/// One time slice of scalar observables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub moment2: f64,
    pub moment4: f64,
    pub momentk: f64,
    pub mean_momentum: Vec3,
    /// `∫ f ln f`.
    pub entropy: f64,
    /// Standard error of `entropy`.
    pub entropy_se: f64,
    pub fisher_frac: f64,
    pub alpha_value: f64,
    pub pairwise_neg_moment: f64,
    pub w2_to_reference: f64,
    pub jump_rate_obs: f64,
}

/// First line of every diagnostics CSV.
pub const CSV_SCHEMA_LINE: &str = "# nanbu-diagnostics v1";
pub const CSV_HEADER: &str = "t,M2,M4,Mk,px,py,pz,entropy,fisher,alpha,neg_moment,w2_ref,jump_rate";

/// Shortest decimal that reads back to the same double.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl DiagnosticsRecord {
    pub fn compute(
        time: f64,
        sample: &[Vec3],
        alpha: f64,
        jump_count: u64,
        cfg: &SimConfig,
        opts: &DiagnosticsOptions,
    ) -> Result<Self> {
        let n = sample.len();
        let (entropy, entropy_se) = match opts.entropy_k {
            Some(k) if n >= 100 => {
                let e = entropy_knn(sample, k)?;
                (e.value, e.std_err)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let fisher = match opts.fisher_resolution {
            Some(m) => {
                let grid = GridSpec::auto(sample, m)?;
                fisher_frac(sample, &cfg.kernel, &grid)?
            }
            None => f64::NAN,
        };
        let neg = match opts.neg_moment_lambda {
            Some(l) => pairwise_neg_moment(sample, l, cfg.seed)?.value,
            None => f64::NAN,
        };
        let w2 = match opts.w2_projections {
            Some(p) if n >= 100 => {
                let r = maxwellian_reference(sample)?;
                let dirs = transport::random_directions(p, cfg.seed);
                transport::sliced_w2_to_gaussian(sample, r.mean, r.temperature.sqrt(), &dirs)?
            }
            _ => f64::NAN,
        };
        let jump_rate = if time > 0.0 {
            jump_count as f64 / (n as f64 * time)
        } else {
            f64::NAN
        };
        Ok(DiagnosticsRecord {
            time,
            moment2: moment_k(sample, 2)?,
            moment4: moment_k(sample, 4)?,
            momentk: moment_k(sample, opts.moment_order)?,
            mean_momentum: mean_velocity(sample),
            entropy,
            entropy_se,
            fisher_frac: fisher,
            alpha_value: alpha,
            pairwise_neg_moment: neg,
            w2_to_reference: w2,
            jump_rate_obs: jump_rate,
        })
    }

    pub fn from_snapshot(
        snap: &Snapshot<'_>,
        cfg: &SimConfig,
        opts: &DiagnosticsOptions,
    ) -> Result<Self> {
        let alpha = snap.gate.map(|g| g.alpha).unwrap_or(0.0);
        Self::compute(
            snap.time,
            snap.velocities,
            alpha,
            snap.jump_count,
            cfg,
            opts,
        )
    }

    pub fn csv_row(&self) -> String {
        [
            self.time,
            self.moment2,
            self.moment4,
            self.momentk,
            self.mean_momentum.x(),
            self.mean_momentum.y(),
            self.mean_momentum.z(),
            self.entropy,
            self.fisher_frac,
            self.alpha_value,
            self.pairwise_neg_moment,
            self.w2_to_reference,
            self.jump_rate_obs,
        ]
        .iter()
        .map(|x| fmt_f64(*x))
        .collect::<Vec<_>>()
        .join(",")
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[DiagnosticsRecord]) -> Result<()> {
    writeln!(out, "{CSV_SCHEMA_LINE}")?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Parses a diagnostics CSV into rows of the thirteen columns.
pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<[f64; 13]>> {
    let mut lines = input.lines();
    let schema = lines.next().transpose()?.unwrap_or_default();
    if schema != CSV_SCHEMA_LINE {
        return Err(Error::Format(format!("unexpected schema line {schema:?}")));
    }
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != CSV_HEADER {
        let want: Vec<&str> = CSV_HEADER.split(',').collect();
        let got: Vec<&str> = header.split(',').collect();
        let bad = want
            .iter()
            .zip(got.iter().chain(std::iter::repeat(&"")))
            .find(|(w, g)| w != g)
            .map(|(w, _)| *w)
            .unwrap_or("<extra column>");
        return Err(Error::Format(format!("header mismatch at column {bad}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != 13 {
            return Err(Error::Format(format!(
                "row {} has {} fields",
                i + 1,
                vals.len()
            )));
        }
        let mut row = [0.0; 13];
        for (slot, v) in row.iter_mut().zip(vals) {
            *slot = v
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad number {v:?}", i + 1)))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::mollifier_sample;
    use crate::rng::{Purpose, StreamKey};

    fn gaussian(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = StreamKey::new(seed).stream(Purpose::Auxiliary, 0, 0);
        (0..n).map(|_| mollifier_sample(1.0, &mut rng)).collect()
    }

    #[test]
    fn gaussian_moments() {
        let s = gaussian(1_000_000, 1);
        assert!((moment_k(&s, 2).unwrap() - 3.0).abs() < 0.01);
        assert!((moment_k(&s, 4).unwrap() - 15.0).abs() < 0.1);
        assert_eq!(moment_k(&[Vec3::ZERO; 10], 4).unwrap(), 0.0);
        assert!(moment_k(&s[..10], 3).is_err());
    }

    #[test]
    fn reference_maxwellians() {
        let s = gaussian(100_000, 2);
        let r = maxwellian_reference(&s).unwrap();
        assert!(r.mean.norm() < 0.02 && (r.temperature - 1.0).abs() < 0.02);
        assert!(
            maxwellian_reference(&vec![Vec3::new(1.0, 1.0, 1.0); 200])
                .unwrap()
                .degenerate
        );
        // Two temperatures, zero mean: effective temperature is the second moment over three.
        let mut mix = gaussian(50_000, 3);
        mix.extend(gaussian(50_000, 4).into_iter().map(|v| v * 2.0));
        let r = maxwellian_reference(&mix).unwrap();
        let m2 = moment_k(&mix, 2).unwrap();
        let mean = mean_velocity(&mix);
        assert!((r.temperature - (m2 - mean.norm2()) / 3.0).abs() < 1e-12);
        assert!((r.temperature - 2.5).abs() < 0.05);
    }

    #[test]
    fn options_roundtrip_with_disabled_estimators() {
        for opts in [DiagnosticsOptions::default(), DiagnosticsOptions::minimal()] {
            let text = serde_json::to_string(&opts).unwrap();
            assert_eq!(
                serde_json::from_str::<DiagnosticsOptions>(&text).unwrap(),
                opts
            );
        }
        let partial: DiagnosticsOptions = serde_json::from_str(r#"{"entropy_k": false}"#).unwrap();
        assert_eq!(partial.entropy_k, None);
        assert_eq!(partial.fisher_resolution, Some(64));
        assert!(serde_json::from_str::<DiagnosticsOptions>(r#"{"entropy_k": true}"#).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let rec = DiagnosticsRecord {
            time: 0.1,
            moment2: 1.0 / 3.0,
            moment4: 1e-300,
            momentk: 12345.678,
            mean_momentum: Vec3::new(-0.0, 2.5e-17, 1.0),
            entropy: -4.2,
            entropy_se: 0.01,
            fisher_frac: f64::NAN,
            alpha_value: 0.0,
            pairwise_neg_moment: 0.7,
            w2_to_reference: 0.05,
            jump_rate_obs: 314.159,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let rows = read_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0][1].to_bits(), rec.moment2.to_bits());
        assert_eq!(rows[0][3].to_bits(), rec.momentk.to_bits());
        assert_eq!(rows[0][4].to_bits(), (-0.0f64).to_bits());
        assert!(rows[0][8].is_nan());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(CSV_SCHEMA_LINE));
        let bad = text.replace("fisher", "fisher_x");
        let err = read_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("fisher"));
    }
}
