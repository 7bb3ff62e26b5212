//! Pixel metrics, ROC analysis, the paired Wilcoxon signed-rank test and
//! stratified fold planning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio::{FovMask, Plane};
use crate::scalar::Real;

/// Largest sample size for which the Wilcoxon p-value is enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_dims<T: Real>(a: &Plane<T>, b: &Plane<T>, fov: &FovMask) -> Result<()> {
    if a.width != b.width || a.height != b.height || fov.width != a.width || fov.height != a.height {
        return Err(Error::Dimensions(format!(
            "prediction {}x{}, truth {}x{}, FOV {}x{}",
            a.width, a.height, b.width, b.height, fov.width, fov.height
        )));
    }
    Ok(())
}

fn positive<T: Real>(v: T) -> bool {
    v > T::from_f64_lossy(0.5)
}

/// Counts over FOV pixels; vessel (1) is the positive class.
pub fn confusion<T: Real>(binary: &Plane<T>, truth: &Plane<T>, fov: &FovMask) -> Result<ConfusionCounts> {
    check_dims(binary, truth, fov)?;
    let mut c = ConfusionCounts::default();
    for ((&p, &t), &inside) in binary.values.iter().zip(&truth.values).zip(&fov.bits) {
        if !inside {
            continue;
        }
        match (positive(p), positive(t)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sn: f64,
    pub sp: f64,
    pub acc: f64,
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.tp + c.fn_ == 0 {
        return Err(Error::Degenerate("no vessel pixels in the reference".into()));
    }
    if c.tn + c.fp == 0 {
        return Err(Error::Degenerate("no background pixels in the reference".into()));
    }
    Ok(Metrics {
        sn: c.tp as f64 / (c.tp + c.fn_) as f64,
        sp: c.tn as f64 / (c.tn + c.fp) as f64,
        acc: (c.tp + c.tn) as f64 / c.total() as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// (false-positive rate, true-positive rate), from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over (score, is_positive) samples. Equal scores form one step, so the
/// area equals the Mann–Whitney statistic with half credit for ties.
pub fn roc_from_scores(samples: &[(f64, bool)]) -> Result<RocCurve> {
    if samples.iter().any(|s| s.0.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let pos = samples.iter().filter(|s| s.1).count() as u64;
    let neg = samples.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("ROC needs both classes".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of pos·neg
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let (mut dtp, mut dfp) = (0u64, 0u64);
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp as u128 * (2 * tp + dtp) as u128;
        tp += dtp;
        fp += dfp;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: area2 as f64 / (2 * pos as u128 * neg as u128) as f64,
    })
}

/// ROC of the vessel probabilities against the reference inside the FOV.
pub fn roc_auc<T: Real>(prob: &Plane<T>, truth: &Plane<T>, fov: &FovMask) -> Result<RocCurve> {
    check_dims(prob, truth, fov)?;
    let samples: Vec<(f64, bool)> = prob
        .values
        .iter()
        .zip(&truth.values)
        .zip(&fov.bits)
        .filter(|(_, &inside)| inside)
        .map(|((&p, &t), _)| (p.to_f64_lossy(), positive(t)))
        .collect();
    roc_from_scores(&samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// min(W⁺, W⁻).
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Mid-ranks of `values`, doubled so that they stay integers.
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share (i+1 + j+1)/2
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test on differences `a − b`.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::NonFinite("non-finite value in paired sample".into()));
    }
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks2 = doubled_midranks(&abs);
    let total2: u64 = ranks2.iter().sum();
    let plus2: u64 = d.iter().zip(&ranks2).filter(|(v, _)| **v > 0.0).map(|(_, &r)| r).sum();
    let w_plus = plus2 as f64 / 2.0;
    let w_minus = (total2 - plus2) as f64 / 2.0;

    let (p, exact) = if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign patterns whose doubled W⁺ equals s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        for &r in &ranks2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        // compare |2·W⁺ − T| in doubled units: |2s − total2|
        let obs = (2 * plus2 as i64 - total2 as i64).abs();
        let extreme: u64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (2 * *s as i64 - total2 as i64).abs() >= obs)
            .map(|(_, &c)| c)
            .sum();
        (extreme as f64 / (1u64 << n) as f64, true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
            let t = j as f64;
            ties += t * t * t - t;
            i += j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        (libm::erfc(z / std::f64::consts::SQRT_2).min(1.0), false)
    };
    Ok(WilcoxonResult {
        w: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    /// Fold id of each item.
    pub assignments: Vec<usize>,
    pub strata: Vec<String>,
}

impl FoldSplit {
    pub fn test_items(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_items(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Shuffles each stratum and deals its items round-robin to the folds. The
/// dealing position carries over from one stratum to the next (strata in
/// sorted order), which keeps fold sizes within one of each other as well.
pub fn stratified_kfold<R: Rng + ?Sized>(strata: &[String], k: usize, rng: &mut R) -> Result<FoldSplit> {
    if k == 0 || k > strata.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot make {k} folds from {} items",
            strata.len()
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(s.as_str()).or_default().push(i);
    }
    let mut assignments = vec![0; strata.len()];
    let mut next = 0;
    for items in groups.values_mut() {
        items.shuffle(rng);
        for &i in items.iter() {
            assignments[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldSplit {
        k,
        assignments,
        strata: strata.to_vec(),
    })
}

/// Scores of one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub image: String,
    pub metrics: Metrics,
    pub auc: f64,
}

pub fn score_image<T: Real>(
    image: &str,
    prob: &Plane<T>,
    binary: &Plane<T>,
    truth: &Plane<T>,
    fov: &FovMask,
) -> Result<ImageScores> {
    let m = metrics(&confusion(binary, truth, fov)?)?;
    let roc = roc_auc(prob, truth, fov)?;
    Ok(ImageScores {
        image: image.to_string(),
        metrics: m,
        auc: roc.auc,
    })
}

/// Per-image means of (Sn, Sp, Acc, AUC).
pub fn mean_scores(rows: &[ImageScores]) -> Option<(f64, f64, f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let s = rows.iter().fold((0.0, 0.0, 0.0, 0.0), |a, r| {
        (a.0 + r.metrics.sn, a.1 + r.metrics.sp, a.2 + r.metrics.acc, a.3 + r.auc)
    });
    Some((s.0 / n, s.1 / n, s.2 / n, s.3 / n))
}

/// `image,Sn,Sp,Acc,AUC` rows followed by a `mean` row.
pub fn report_csv(rows: &[ImageScores]) -> String {
    let mut out = String::from("image,Sn,Sp,Acc,AUC\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.image, r.metrics.sn, r.metrics.sp, r.metrics.acc, r.auc
        ));
    }
    if let Some((sn, sp, acc, auc)) = mean_scores(rows) {
        out.push_str(&format!("mean,{sn:.6},{sp:.6},{acc:.6},{auc:.6}\n"));
    }
    out
}

/// `metric,W,p` rows.
pub fn wilcoxon_csv(rows: &[(String, WilcoxonResult)]) -> String {
    let mut out = String::from("metric,W,p\n");
    for (name, r) in rows {
        out.push_str(&format!("{name},{},{:.6e}\n", r.w, r.p));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(w: usize, h: usize, v: Vec<f64>) -> Plane<f64> {
        Plane::new(w, h, v).unwrap()
    }

    #[test]
    fn confusion_extremes_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = plane(8, 8, (0..64).map(|_| f64::from(rng.random_range(0..2u8))).collect());
        let fov = FovMask::new(8, 8, (0..64).map(|i| i % 7 != 0).collect()).unwrap();
        let c = confusion(&truth, &truth, &fov).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = truth.map(|v| 1.0 - v);
        let c = confusion(&inv, &truth, &fov).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));

        let pred = plane(8, 8, (0..64).map(|_| f64::from(rng.random_range(0..2u8))).collect());
        let c = confusion(&pred, &truth, &fov).unwrap();
        let mut naive = [0u64; 4];
        for i in 0..64 {
            if !fov.bits[i] {
                continue;
            }
            let slot = match (pred.values[i] == 1.0, truth.values[i] == 1.0) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => 3,
            };
            naive[slot] += 1;
        }
        assert_eq!([c.tp, c.fp, c.tn, c.fn_], naive);
        assert_eq!(c.total(), fov.count() as u64);
        assert!(confusion(&plane(2, 1, vec![0.0; 2]), &truth, &fov).is_err());
    }

    #[test]
    fn metric_formulas() {
        let m = metrics(&ConfusionCounts {
            tp: 2,
            fn_: 1,
            tn: 3,
            fp: 0,
        })
        .unwrap();
        assert!((m.sn - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.sp, 1.0);
        assert!((m.acc - 5.0 / 6.0).abs() < 1e-15);
        let e = metrics(&ConfusionCounts {
            tp: 0,
            fn_: 0,
            tn: 3,
            fp: 1,
        })
        .unwrap_err();
        assert!(e.to_string().contains("vessel"));
        let e = metrics(&ConfusionCounts {
            tp: 1,
            fn_: 0,
            tn: 0,
            fp: 0,
        })
        .unwrap_err();
        assert!(e.to_string().contains("background"));
    }

    fn mann_whitney(samples: &[(f64, bool)]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for p in samples.iter().filter(|s| s.1) {
            for n in samples.iter().filter(|s| !s.1) {
                pairs += 1.0;
                if p.0 > n.0 {
                    num += 1.0;
                } else if p.0 == n.0 {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_simple_cases() {
        let sep: Vec<(f64, bool)> = (0..10).map(|i| (i as f64, i >= 5)).collect();
        assert_eq!(roc_from_scores(&sep).unwrap().auc, 1.0);
        let flat: Vec<(f64, bool)> = (0..10).map(|i| (0.3, i % 3 == 0)).collect();
        let roc = roc_from_scores(&flat).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(roc_from_scores(&[(0.1, true), (0.2, true)]).is_err());
    }

    proptest! {
        #[test]
        fn auc_is_mann_whitney(scores in proptest::collection::vec((0u8..6, any::<bool>()), 2..30)) {
            let samples: Vec<(f64, bool)> = scores.iter().map(|&(s, c)| (f64::from(s) / 5.0, c)).collect();
            let pos = samples.iter().filter(|s| s.1).count();
            prop_assume!(pos > 0 && pos < samples.len());
            let roc = roc_from_scores(&samples).unwrap();
            prop_assert!((roc.auc - mann_whitney(&samples)).abs() <= 1e-12);
            prop_assert_eq!(roc.points[0], (0.0, 0.0));
            prop_assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
            prop_assert!(roc.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
            let cubed: Vec<(f64, bool)> = samples.iter().map(|&(s, c)| (s * s * s, c)).collect();
            prop_assert!((roc_from_scores(&cubed).unwrap().auc - roc.auc).abs() <= 1e-12);
        }
    }

    #[test]
    fn auc_respects_fov() {
        let prob = plane(4, 1, vec![0.9, 0.1, 0.8, 0.95]);
        let truth = plane(4, 1, vec![1.0, 0.0, 0.0, 0.0]);
        let fov = FovMask::new(4, 1, vec![true, true, true, false]).unwrap();
        assert_eq!(roc_auc(&prob, &truth, &fov).unwrap().auc, 1.0);
    }

    #[test]
    fn wilcoxon_all_negative() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, i as f64 + 1.0)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert!(r.exact);
        assert_eq!((r.w, r.w_plus, r.w_minus), (0.0, 0.0, 15.0));
        assert!((r.p - 0.0625).abs() < 1e-15);
        assert!(wilcoxon_signed_rank(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }

    /// Literal enumeration of every sign pattern over the mid-ranks.
    fn enumerate_p(pairs: &[(f64, f64)]) -> f64 {
        let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
        let n = d.len();
        let ranks: Vec<f64> = d
            .iter()
            .map(|x| {
                let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
                let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect();
        let total: f64 = ranks.iter().sum();
        let obs: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (s - total / 2.0).abs() >= (obs - total / 2.0).abs() - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..60 {
            let n = 1 + trial % 12;
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| (f64::from(rng.random_range(0..6u8)), f64::from(rng.random_range(0..6u8))))
                .collect();
            let Ok(r) = wilcoxon_signed_rank(&pairs) else {
                continue;
            };
            assert!((r.p - enumerate_p(&pairs)).abs() < 1e-12, "{pairs:?}");
            assert!(r.p > 0.0 && r.p <= 1.0);
            let swapped: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
            let s = wilcoxon_signed_rank(&swapped).unwrap();
            assert_eq!(s.p, r.p);
            assert_eq!(s.w, r.w);
        }
    }

    #[test]
    fn wilcoxon_normal_approximation() {
        // 30 positive differences with distinct ranks: z is far in the tail
        let pairs: Vec<(f64, f64)> = (1..=30).map(|i| (i as f64 * 2.0, i as f64)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert!(!r.exact);
        assert_eq!(r.w, 0.0);
        let mean = 30.0 * 31.0 / 4.0;
        let sd = (30.0f64 * 31.0 * 61.0 / 24.0).sqrt();
        let z = (465.0 - mean - 0.5) / sd;
        assert!((r.p - libm::erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-15);
        // balanced signs → p near 1
        let pairs: Vec<(f64, f64)> = (1..=30)
            .map(|i| if i % 2 == 0 { (i as f64, 0.0) } else { (0.0, i as f64) })
            .collect();
        assert!(wilcoxon_signed_rank(&pairs).unwrap().p > 0.8);
    }

    fn labels(counts: &[(&str, usize)]) -> Vec<String> {
        counts
            .iter()
            .flat_map(|&(s, n)| std::iter::repeat_n(s.to_string(), n))
            .collect()
    }

    #[test]
    fn kfold_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = labels(&[("a", 10), ("b", 10)]);
        let f = stratified_kfold(&s, 5, &mut rng).unwrap();
        for fold in 0..5 {
            let t = f.test_items(fold);
            assert_eq!(t.iter().filter(|&&i| s[i] == "a").count(), 2);
            assert_eq!(t.len(), 4);
        }
        let s = labels(&[("left", 14), ("right", 14)]);
        let f = stratified_kfold(&s, 4, &mut rng).unwrap();
        for fold in 0..4 {
            let t = f.test_items(fold);
            assert_eq!(t.len(), 7);
            let left = t.iter().filter(|&&i| s[i] == "left").count();
            assert!(left == 3 || left == 4);
        }
        let f = stratified_kfold(&s, 1, &mut rng).unwrap();
        assert_eq!(f.test_items(0).len(), 28);
        assert!(stratified_kfold(&s, 29, &mut rng).is_err());
        assert!(stratified_kfold(&s, 0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn kfold_partitions_and_balances(a in 1usize..20, b in 0usize..20, k in 1usize..8, seed in any::<u64>()) {
            let s = labels(&[("a", a), ("b", b)]);
            prop_assume!(k <= s.len());
            let f = stratified_kfold(&s, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut seen = vec![0; s.len()];
            for fold in 0..k {
                for i in f.test_items(fold) {
                    seen[i] += 1;
                }
                prop_assert_eq!(f.train_items(fold).len() + f.test_items(fold).len(), s.len());
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            for stratum in ["a", "b"] {
                let per: Vec<usize> = (0..k)
                    .map(|fold| f.test_items(fold).iter().filter(|&&i| s[i] == stratum).count())
                    .collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn report_layout() {
        let rows = vec![
            ImageScores {
                image: "x".into(),
                metrics: Metrics {
                    sn: 0.5,
                    sp: 1.0,
                    acc: 0.9,
                },
                auc: 0.8,
            },
            ImageScores {
                image: "y".into(),
                metrics: Metrics {
                    sn: 1.0,
                    sp: 0.5,
                    acc: 0.7,
                },
                auc: 1.0,
            },
        ];
        let csv = report_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image,Sn,Sp,Acc,AUC");
        assert_eq!(lines[3], "mean,0.750000,0.750000,0.800000,0.900000");
    }
}
