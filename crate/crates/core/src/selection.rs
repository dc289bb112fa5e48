//! Choosing which VM leaves an overloaded host: minimum migration time,
//! random choice, or maximum multiple correlation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::VmId;

pub const MC_WINDOW: usize = 12;

/// Per-VM ring of recent demand fractions (`demand / vm.mips`).
pub type VmHistory = crate::detection::HostHistory;

/// R² values closer than this are treated as tied.
pub const R2_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SelectorKind {
    Mmt,
    Rc,
    Mc,
}

impl SelectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            SelectorKind::Mmt => "mmt",
            SelectorKind::Rc => "rc",
            SelectorKind::Mc => "mc",
        }
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mmt" => Ok(SelectorKind::Mmt),
            "rc" => Ok(SelectorKind::Rc),
            "mc" => Ok(SelectorKind::Mc),
            _ => Err(Error::Policy {
                token: s.to_string(),
                message: "unknown selector (mmt, rc, mc)".into(),
            }),
        }
    }
}

impl Serialize for SelectorKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SelectorKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    /// Seeds the random choice policy; ignored by the others.
    pub rng_seed: u64,
    pub window_len: usize,
}

impl SelectorConfig {
    pub fn new(kind: SelectorKind, rng_seed: u64) -> Self {
        SelectorConfig {
            kind,
            rng_seed,
            window_len: MC_WINDOW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SelectorKind::Mc && self.window_len < 3 {
            return Err(Error::config("MC window must be >= 3"));
        }
        Ok(())
    }
}

/// A VM eligible for eviction, with its recent demand fractions
/// (most recent last).
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: VmId,
    pub ram_mb: u64,
    pub history: &'a [f64],
}

/// Seconds to copy `ram_mb` of memory over `bandwidth_bps` bits per second.
pub fn migration_time_seconds(ram_mb: u64, bandwidth_bps: f64) -> f64 {
    ram_mb as f64 * 8.0 * (1u64 << 20) as f64 / bandwidth_bps
}

fn non_empty(candidates: &[Candidate<'_>]) -> Result<()> {
    if candidates.is_empty() {
        Err(Error::Contract(
            "selection from an empty candidate set".into(),
        ))
    } else {
        Ok(())
    }
}

/// VM with the shortest migration time; ties go to the lowest id.
pub fn select_mmt(candidates: &[Candidate<'_>], bandwidth_bps: f64) -> Result<VmId> {
    non_empty(candidates)?;
    Ok(candidates
        .iter()
        .map(|c| (migration_time_seconds(c.ram_mb, bandwidth_bps), c.id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .unwrap())
}

pub fn select_rc(candidates: &[Candidate<'_>], rng: &mut ChaCha8Rng) -> Result<VmId> {
    non_empty(candidates)?;
    Ok(candidates[rng.random_range(0..candidates.len())].id)
}

/// Squared multiple correlation of `response` on `regressors` from an OLS fit
/// with intercept. Computed as the share of the centered response captured
/// by its projection onto the span of the centered regressors, so collinear
/// regressors are handled; a constant response yields 0.
pub fn multiple_r_squared(response: &[f64], regressors: &[&[f64]]) -> f64 {
    let n = response.len();
    let center = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter().map(|x| x - m).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut resid = center(response);
    let sst = dot(&resid, &resid);
    let scale = response.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if sst <= 1e-24 * (1.0 + scale * scale) * n as f64 {
        return 0.0;
    }

    // Modified Gram-Schmidt, dropping columns that add no new direction.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(regressors.len());
    for col in regressors {
        debug_assert_eq!(col.len(), n);
        let mut v = center(col);
        let norm0 = dot(&v, &v).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for q in &basis {
            let p = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= p * qi);
        }
        let norm = dot(&v, &v).sqrt();
        if norm <= 1e-10 * norm0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let p = dot(&v, &resid);
        resid.iter_mut().zip(&v).for_each(|(r, qi)| *r -= p * qi);
        basis.push(v);
    }
    let ssr = dot(&resid, &resid);
    (1.0 - ssr / sst).clamp(0.0, 1.0)
}

/// Index of the largest value; values within [`R2_TIE_TOLERANCE`] of the
/// maximum tie, and ties go to the lowest id.
fn argmax_with_ties(scored: &[(VmId, f64)]) -> VmId {
    let best = scored.iter().fold(f64::NEG_INFINITY, |m, s| m.max(s.1));
    scored
        .iter()
        .filter(|s| s.1 >= best - R2_TIE_TOLERANCE)
        .map(|s| s.0)
        .min()
        .unwrap()
}

/// VM whose recent demand is best explained by its co-residents' demand.
/// Falls back to [`select_mmt`] with fewer than two candidates or when any
/// candidate lacks `window_len` samples.
pub fn select_mc(
    candidates: &[Candidate<'_>],
    window_len: usize,
    bandwidth_bps: f64,
) -> Result<VmId> {
    non_empty(candidates)?;
    if candidates.len() < 2 || candidates.iter().any(|c| c.history.len() < window_len) {
        return select_mmt(candidates, bandwidth_bps);
    }
    let windows: Vec<&[f64]> = candidates
        .iter()
        .map(|c| &c.history[c.history.len() - window_len..])
        .collect();
    let scored: Vec<(VmId, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let others: Vec<&[f64]> = windows
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .map(|(_, w)| *w)
                .collect();
            (c.id, multiple_r_squared(windows[j], &others))
        })
        .collect();
    Ok(argmax_with_ties(&scored))
}

/// A configured selector with its own random stream.
#[derive(Debug, Clone)]
pub struct VmSelector {
    cfg: SelectorConfig,
    rng: ChaCha8Rng,
}

impl VmSelector {
    pub fn new(cfg: SelectorConfig) -> Self {
        VmSelector {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            cfg,
        }
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.cfg
    }

    pub fn select(&mut self, candidates: &[Candidate<'_>], bandwidth_bps: f64) -> Result<VmId> {
        match self.cfg.kind {
            SelectorKind::Mmt => select_mmt(candidates, bandwidth_bps),
            SelectorKind::Rc => select_rc(candidates, &mut self.rng),
            SelectorKind::Mc => select_mc(candidates, self.cfg.window_len, bandwidth_bps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(id: usize, ram_mb: u64, history: &[f64]) -> Candidate<'_> {
        Candidate {
            id: VmId(id),
            ram_mb,
            history,
        }
    }

    #[test]
    fn migration_time_formula() {
        // 1024 MB over half of 1 Gbit/s
        let t = migration_time_seconds(1024, 0.5e9);
        assert!((t - 17.179869184).abs() < 1e-9);
    }

    #[test]
    fn mmt_examples() {
        let c = [cand(0, 1024, &[]), cand(1, 512, &[])];
        assert_eq!(select_mmt(&c, 1e9).unwrap(), VmId(1));
        let c = [cand(3, 1024, &[]), cand(1, 1024, &[]), cand(2, 1024, &[])];
        assert_eq!(select_mmt(&c, 1e9).unwrap(), VmId(1));
        assert_eq!(select_mmt(&[cand(9, 1, &[])], 1e9).unwrap(), VmId(9));
        assert!(select_mmt(&[], 1e9).is_err());
    }

    #[test]
    fn rc_is_deterministic_and_uniform() {
        let c = [cand(0, 1, &[]), cand(1, 1, &[]), cand(2, 1, &[])];
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            select_rc(&c, &mut a).unwrap(),
            select_rc(&c, &mut b).unwrap()
        );
        assert_eq!(select_rc(&c[..1], &mut a).unwrap(), VmId(0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            counts[select_rc(&c, &mut rng).unwrap().0] += 1;
        }
        for n in counts {
            let f = n as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn r_squared_basics() {
        let x = [0.1, 0.4, 0.2, 0.8, 0.5];
        assert!((multiple_r_squared(&x, &[&x]) - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        assert!((multiple_r_squared(&y, &[&x]) - 1.0).abs() < 1e-12);
        assert_eq!(multiple_r_squared(&[0.3; 5], &[&x]), 0.0);
        assert_eq!(multiple_r_squared(&x, &[&[0.2; 5]]), 0.0);
        // simple regression: R² equals the squared Pearson correlation
        let z = [0.3, 0.1, 0.4, 0.4, 0.9];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, mz) = (mean(&x), mean(&z));
        let sxz: f64 = x.iter().zip(&z).map(|(a, b)| (a - mx) * (b - mz)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let szz: f64 = z.iter().map(|b| (b - mz).powi(2)).sum();
        let r2 = sxz * sxz / (sxx * szz);
        assert!((multiple_r_squared(&z, &[&x]) - r2).abs() < 1e-12);
    }

    #[test]
    fn mc_prefers_correlated_pair() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 / 10.0).collect();
        let z = vec![0.4; 12];
        let c = [cand(2, 1024, &z), cand(0, 1024, &x), cand(1, 1024, &x)];
        assert_eq!(select_mc(&c, 12, 1e9).unwrap(), VmId(0));
    }

    #[test]
    fn mc_constant_histories_pick_lowest_id() {
        let a = vec![0.3; 12];
        let b = vec![0.6; 12];
        let c = [cand(5, 1024, &a), cand(4, 1024, &b)];
        assert_eq!(select_mc(&c, 12, 1e9).unwrap(), VmId(4));
    }

    #[test]
    fn mc_falls_back_to_mmt() {
        let short = vec![0.3; 5];
        let long = vec![0.3; 12];
        let c = [cand(0, 2048, &long), cand(1, 512, &short)];
        assert_eq!(select_mc(&c, 12, 1e9).unwrap(), VmId(1));
        assert_eq!(select_mc(&[cand(7, 1, &long)], 12, 1e9).unwrap(), VmId(7));
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("MMT".parse::<SelectorKind>().unwrap(), SelectorKind::Mmt);
        assert!("xyz".parse::<SelectorKind>().is_err());
    }

    proptest! {
        #[test]
        fn selectors_return_a_candidate_and_drain(
            hist in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..6),
            rams in prop::collection::vec(256u64..4096, 6),
            seed in 0u64..1000,
        ) {
            for kind in [SelectorKind::Mmt, SelectorKind::Rc, SelectorKind::Mc] {
                let mut sel = VmSelector::new(SelectorConfig::new(kind, seed));
                let mut pool: Vec<Candidate> = hist
                    .iter()
                    .enumerate()
                    .map(|(i, h)| cand(i, rams[i], h))
                    .collect();
                let mut rounds = 0;
                while !pool.is_empty() {
                    let pick = sel.select(&pool, 1e9).unwrap();
                    let pos = pool.iter().position(|c| c.id == pick);
                    prop_assert!(pos.is_some());
                    pool.remove(pos.unwrap());
                    rounds += 1;
                }
                prop_assert_eq!(rounds, hist.len());
            }
        }

        #[test]
        fn mmt_ignores_history(
            a in prop::collection::vec(0.0f64..1.0, 12),
            b in prop::collection::vec(0.0f64..1.0, 12),
            rams in prop::collection::vec(256u64..4096, 2),
        ) {
            let one = [cand(0, rams[0], &a), cand(1, rams[1], &b)];
            let two = [cand(0, rams[0], &b), cand(1, rams[1], &a)];
            prop_assert_eq!(select_mmt(&one, 1e9).unwrap(), select_mmt(&two, 1e9).unwrap());
        }

        #[test]
        fn mc_translation_invariant(
            hist in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 2..5),
            shift in -0.5f64..0.5,
        ) {
            let shifted: Vec<Vec<f64>> = hist
                .iter()
                .map(|h| h.iter().map(|v| v + shift).collect())
                .collect();
            let a: Vec<Candidate> = hist.iter().enumerate().map(|(i, h)| cand(i, 1024, h)).collect();
            let b: Vec<Candidate> = shifted.iter().enumerate().map(|(i, h)| cand(i, 1024, h)).collect();
            prop_assert_eq!(select_mc(&a, 12, 1e9).unwrap(), select_mc(&b, 12, 1e9).unwrap());
        }
    }
}
