//! Margin campaigns over subspace sequences, percentile summaries and
//! spectral energy profiles.

use ndarray::{s, Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{deepfool, energy_fractions, AttackConfig, PerturbationRecord, Status};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::subspace::{random_rotation, OrthonormalMatrix, Subspace, SubspaceSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Converged,
    Censored,
    /// The subspace is orthogonal to the gradient; margin reported as infinite.
    Uninformative,
}

impl RecordStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Converged => "converged",
            RecordStatus::Censored => "censored",
            RecordStatus::Uninformative => "uninformative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub sample_id: usize,
    pub subspace_label: String,
    pub margin: f64,
    pub status: RecordStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub records: Vec<MarginRecord>,
    /// Samples the model misclassifies (or scores as a tie); not measured.
    pub skipped: Vec<usize>,
    pub n_measured: usize,
}

/// Runs DeepFool for every correctly classified sample in every subspace.
/// Records are ordered by `(sample_id, subspace index)`.
pub fn measure_campaign(
    model: &Model,
    samples: &LabeledDataset,
    sequence: &SubspaceSequence,
    config: &AttackConfig,
) -> Result<Campaign> {
    if sequence.is_empty() {
        return Err(Error::Empty("subspace sequence".into()));
    }
    if samples.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: samples.dim() });
    }
    if let Some(d) = sequence.ambient_dim() {
        if d != samples.dim() {
            return Err(Error::DimensionMismatch { expected: samples.dim(), got: d });
        }
    }
    config.validate()?;
    let logits = model.forward_batch(samples.features.view())?;
    let (measured, skipped): (Vec<usize>, Vec<usize>) = (0..samples.len())
        .partition(|&i| model.decide(logits.row(i)) == Some(model.class_of_label(samples.labels[i])));
    let tasks: Vec<(usize, &Subspace)> = measured
        .iter()
        .flat_map(|&i| sequence.items.iter().map(move |s| (i, s)))
        .collect();
    let records = tasks
        .into_par_iter()
        .map(|(i, s)| {
            let x = samples.features.row(i);
            let (margin, status, iterations) = match deepfool(model, x, Some(s), config) {
                Ok(r) => match r.status {
                    Status::Converged => (r.margin, RecordStatus::Converged, r.iterations),
                    Status::Censored => (r.margin, RecordStatus::Censored, r.iterations),
                },
                Err(Error::SubspaceUninformative) => (f64::INFINITY, RecordStatus::Uninformative, 0),
                Err(e) => return Err(e),
            };
            Ok(MarginRecord { sample_id: i, subspace_label: s.label.clone(), margin, status, iterations })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Campaign { records, n_measured: measured.len(), skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub subspace_label: String,
    pub p05: Option<f64>,
    pub median: Option<f64>,
    pub p95: Option<f64>,
    pub n_converged: usize,
    /// Censored and uninformative records.
    pub n_censored: usize,
}

/// Percentile with linear interpolation between order statistics
/// (`rank = p (n − 1)`). `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of an arbitrary slice (linear interpolation); `None` if empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(percentile(&v, 0.5))
}

/// Per-subspace percentiles over converged records, in first-seen label order.
pub fn summarize(records: &[MarginRecord]) -> Vec<MarginSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.subspace_label.as_str()) {
            order.push(&r.subspace_label);
        }
    }
    order
        .into_iter()
        .map(|label| {
            let group = records.iter().filter(|r| r.subspace_label == label);
            let mut values: Vec<f64> = group
                .clone()
                .filter(|r| r.status == RecordStatus::Converged)
                .map(|r| r.margin)
                .collect();
            let n_censored = group.count() - values.len();
            values.sort_by(f64::total_cmp);
            let pick = |p| (!values.is_empty()).then(|| percentile(&values, p));
            MarginSummary {
                subspace_label: label.to_string(),
                p05: pick(0.05),
                median: pick(0.5),
                p95: pick(0.95),
                n_converged: values.len(),
                n_censored,
            }
        })
        .collect()
}

/// Median converged margin for one subspace label.
pub fn median_for(summaries: &[MarginSummary], label: &str) -> Option<f64> {
    summaries.iter().find(|s| s.subspace_label == label).and_then(|s| s.median)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub epoch: usize,
    pub subspace_label: String,
    pub p95_energy_fraction: f64,
}

/// Energy fractions `‖P_S δ‖²/‖δ‖²` for `(epoch, δ)` pairs, reduced to the
/// 95th percentile per `(epoch, subspace)`. Returns the profiles and the
/// number of zero perturbations skipped.
pub fn spectral_energy(perturbations: &[(usize, ArrayView1<'_, f64>)], sequence: &SubspaceSequence) -> Result<(Vec<EnergyProfile>, usize)> {
    let log = perturbations
        .iter()
        .enumerate()
        .map(|(i, &(epoch, d))| {
            Ok(PerturbationRecord { epoch, sample_id: i, norm: d.dot(&d).sqrt(), energy: energy_fractions(d, sequence)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(energy_profiles(&log, &sequence.labels()))
}

/// Reduces an adversarial-training perturbation log to per-epoch profiles.
pub fn energy_profiles(log: &[PerturbationRecord], labels: &[String]) -> (Vec<EnergyProfile>, usize) {
    let skipped = log.iter().filter(|r| r.norm == 0.0).count();
    let mut epochs: Vec<usize> = log.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let mut out = Vec::new();
    for epoch in epochs {
        let rows: Vec<&PerturbationRecord> = log.iter().filter(|r| r.epoch == epoch && r.norm > 0.0).collect();
        if rows.is_empty() {
            continue;
        }
        for (j, label) in labels.iter().enumerate() {
            let mut v: Vec<f64> = rows.iter().map(|r| r.energy[j]).collect();
            v.sort_by(f64::total_cmp);
            out.push(EnergyProfile { epoch, subspace_label: label.clone(), p95_energy_fraction: percentile(&v, 0.95) });
        }
    }
    (out, skipped)
}

/// The four probe subspaces of a T1 dataset with rotation `U`:
/// `span{u₁}`, its orthogonal complement, a random `s`-dimensional subspace of
/// the complement, and a random `s`-dimensional subspace of the whole space.
pub fn t1_probe_sequence(rotation: &OrthonormalMatrix, s: usize, seed: u64) -> Result<SubspaceSequence> {
    let d = rotation.dim();
    if d < 2 || s == 0 || s > d - 1 {
        return Err(Error::TooManyDimensions { requested: s, ambient: d.saturating_sub(1) });
    }
    let u1 = Subspace::new(rotation.matrix().slice(s![.., ..1]).to_owned(), "u1")?;
    let perp = Subspace::new(rotation.matrix().slice(s![.., 1..]).to_owned(), "u1_perp")?;
    let orth = perp.random_within(s, crate::seeding::child_seed(seed, 1), "s_orth")?;
    let rand_rot = random_rotation(d, crate::seeding::child_seed(seed, 2))?;
    let rand = Subspace::new(rand_rot.matrix().slice(s![.., ..s]).to_owned(), "s_rand")?;
    SubspaceSequence::custom(vec![u1, perp, orth, rand])
}

/// Single-direction subspaces `span{u_k}` for the first `count` columns of `U`,
/// labelled `u1`, `u2`, …
pub fn direction_sequence(rotation: &OrthonormalMatrix, count: usize) -> Result<SubspaceSequence> {
    let items = (0..count.min(rotation.dim()))
        .map(|k| Subspace::new(rotation.matrix().slice(s![.., k..k + 1]).to_owned(), format!("u{}", k + 1)))
        .collect::<Result<Vec<_>>>()?;
    SubspaceSequence::custom(items)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Leading `# config_hash=…` comment line shared by every CSV writer.
pub fn csv_preamble(config_hash: &str) -> String {
    format!("# config_hash={config_hash}\n")
}

pub fn records_csv(records: &[MarginRecord], config_hash: &str) -> String {
    let mut out = csv_preamble(config_hash);
    out.push_str("sample_id,subspace_label,margin,status,iterations\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.sample_id, r.subspace_label, r.margin, r.status.as_str(), r.iterations));
    }
    out
}

pub fn summaries_csv(summaries: &[MarginSummary], config_hash: &str) -> String {
    let mut out = csv_preamble(config_hash);
    out.push_str("subspace_label,p05,median,p95,n_converged,n_censored\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.subspace_label,
            fmt_opt(s.p05),
            fmt_opt(s.median),
            fmt_opt(s.p95),
            s.n_converged,
            s.n_censored
        ));
    }
    out
}

pub fn energy_csv(profiles: &[EnergyProfile], config_hash: &str) -> String {
    let mut out = csv_preamble(config_hash);
    out.push_str("epoch,subspace_label,p95_energy_fraction\n");
    for p in profiles {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.subspace_label, p.p95_energy_fraction));
    }
    out
}

/// 1-D margin of `model` at `x` along `direction` (DeepFool in `span{direction}`).
pub fn directional_margin(model: &Model, x: ArrayView1<'_, f64>, direction: &Array1<f64>, config: &AttackConfig) -> Result<(f64, RecordStatus)> {
    let s = Subspace::from_direction(direction.view(), "dir")?;
    match deepfool(model, x, Some(&s), config) {
        Ok(r) if r.status == Status::Converged => Ok((r.margin, RecordStatus::Converged)),
        Ok(r) => Ok((r.margin, RecordStatus::Censored)),
        Err(Error::SubspaceUninformative) => Ok((f64::INFINITY, RecordStatus::Uninformative)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::linear_margin;
    use crate::datasets::{gen_t1, Source, T1Params};
    use crate::seeding;
    use crate::subspace::{diagonal_subspaces, grid_subspaces, random_subspace_sequence, ImageShape, Spectral};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn rec(label: &str, margin: f64, status: RecordStatus) -> MarginRecord {
        MarginRecord { sample_id: 0, subspace_label: label.into(), margin, status, iterations: 1 }
    }

    #[test]
    fn percentile_examples() {
        let records: Vec<_> = (1..=100).map(|i| rec("a", i as f64, RecordStatus::Converged)).collect();
        let s = &summarize(&records)[0];
        assert_close!(s.p05.unwrap(), 5.95, 1e-12);
        assert_close!(s.median.unwrap(), 50.5, 1e-12);
        assert_close!(s.p95.unwrap(), 95.05, 1e-12);
        let one = summarize(&[rec("b", 2.5, RecordStatus::Converged)]);
        assert_eq!((one[0].p05, one[0].median, one[0].p95), (Some(2.5), Some(2.5), Some(2.5)));
        let none = summarize(&[rec("c", 1.0, RecordStatus::Censored), rec("c", f64::INFINITY, RecordStatus::Uninformative)]);
        assert_eq!(none[0].median, None);
        assert_eq!((none[0].n_converged, none[0].n_censored), (0, 2));
    }

    fn linear_setup() -> (Model, LabeledDataset, Array1<f64>, f64) {
        let mut rng = seeding::rng(1);
        let w: Array1<f64> = (0..20).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b = 0.3;
        let feats = Array2::from_shape_simple_fn((60, 20), || StandardNormal.sample(&mut rng));
        let labels = feats.outer_iter().map(|x| if w.dot(&x) + b > 0.0 { 1 } else { -1 }).collect();
        let ds = LabeledDataset::new(feats, labels, Source::Derived { description: "lin".into() }).unwrap();
        (Model::linear(w.clone(), b), ds, w, b)
    }

    #[test]
    fn campaign_matches_closed_form_on_linear_model() {
        let (m, ds, w, b) = linear_setup();
        let seq = random_subspace_sequence(20, &[2, 5, 13], 4).unwrap();
        let c = measure_campaign(&m, &ds, &seq, &AttackConfig::default()).unwrap();
        assert_eq!(c.n_measured + c.skipped.len(), ds.len());
        let sums = summarize(&c.records);
        for (s, sub) in sums.iter().zip(&seq.items) {
            let exact: Vec<f64> = (0..ds.len()).map(|i| linear_margin(w.view(), b, ds.features.row(i), Some(sub)).unwrap()).collect();
            let want = median(&exact).unwrap();
            assert!((s.median.unwrap() - want).abs() <= 1e-4 * want);
        }
    }

    #[test]
    fn repeated_full_space_columns_agree() {
        let (m, ds, _, _) = linear_setup();
        let mut a = Subspace::full(20);
        a.label = "a".into();
        let mut b = Subspace::full(20);
        b.label = "b".into();
        let seq = SubspaceSequence::custom(vec![a, b]).unwrap();
        let c = measure_campaign(&m, &ds, &seq, &AttackConfig::default()).unwrap();
        for pair in c.records.chunks(2) {
            assert!((pair[0].margin - pair[1].margin).abs() <= 1e-8);
        }
    }

    #[test]
    fn misclassified_samples_are_skipped() {
        let (m, mut ds, _, _) = linear_setup();
        ds.labels[3] = -ds.labels[3];
        ds.labels[7] = -ds.labels[7];
        let seq = SubspaceSequence::custom(vec![Subspace::full(20)]).unwrap();
        let c = measure_campaign(&m, &ds, &seq, &AttackConfig::default()).unwrap();
        assert_eq!(c.skipped, vec![3, 7]);
        assert_eq!(c.n_measured, ds.len() - 2);
        assert!(matches!(
            measure_campaign(&m, &ds, &SubspaceSequence { items: vec![], ..seq }, &AttackConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn campaign_is_deterministic() {
        let ds = gen_t1(T1Params { epsilon: 1.0, sigma: 1.0, n_samples: 40, dim: 10, seed: 1 }).unwrap();
        let m = Model::mlp(&[10, 12, 1], 3).unwrap();
        let seq = t1_probe_sequence(ds.rotation.as_ref().unwrap(), 3, 9).unwrap();
        let a = measure_campaign(&m, &ds, &seq, &AttackConfig::default()).unwrap();
        let b = measure_campaign(&m, &ds, &seq, &AttackConfig::default()).unwrap();
        assert_eq!(records_csv(&a.records, "h"), records_csv(&b.records, "h"));
        assert_eq!(seq.labels(), ["u1", "u1_perp", "s_orth", "s_rand"]);
    }

    #[test]
    fn energy_inside_single_subspace() {
        let seq = random_subspace_sequence(6, &[2, 4], 1).unwrap();
        let d = seq.items[0].basis().column(1).to_owned() * 3.0;
        let (p, skipped) = spectral_energy(&[(0, d.view()), (0, Array1::zeros(6).view())], &seq).unwrap();
        assert_eq!(skipped, 1);
        assert_close!(p[0].p95_energy_fraction, 1.0, 1e-12);
        assert!(p[1].p95_energy_fraction.abs() < 1e-12);
    }

    #[test]
    fn probe_sequence_geometry() {
        let rot = random_rotation(12, 3).unwrap();
        let seq = t1_probe_sequence(&rot, 3, 1).unwrap();
        let u1 = rot.column(0);
        assert!(seq.items[2].coordinates(u1).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(seq.items[1].dim(), 11);
        assert_eq!(direction_sequence(&rot, 2).unwrap().labels(), ["u1", "u2"]);
    }

    /// Non-overlapping `k × k` blocks of DCT atoms tiling the whole spectrum.
    fn block_cover(shape: ImageShape, k: usize) -> SubspaceSequence {
        let sp = Spectral::new(shape);
        let mut items = Vec::new();
        for r in (0..shape.height).step_by(k) {
            for c in (0..shape.width).step_by(k) {
                let mut basis = Array2::zeros((shape.len(), k * k));
                for (col, (i, j)) in (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).enumerate() {
                    basis.column_mut(col).assign(&sp.atom(r + i, c + j, 0));
                }
                items.push(Subspace::new(basis, format!("blk{r}_{c}")).unwrap());
            }
        }
        SubspaceSequence::custom(items).unwrap()
    }

    #[test]
    fn grid_diagonal_matches_diagonal_scheme() {
        let shape = ImageShape::new(1, 6, 6);
        let grid = grid_subspaces(shape, 2, 2).unwrap();
        let diag = diagonal_subspaces(shape, 2, 2).unwrap();
        for (j, d) in diag.items.iter().enumerate() {
            assert_eq!(grid.items[j * 3 + j].basis(), d.basis());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn grid_cover_satisfies_parseval(v in prop::collection::vec(-1.0f64..1.0, 36), scale in 0.1f64..10.0) {
            let seq = block_cover(ImageShape::new(1, 6, 6), 2);
            let d = Array1::from(v);
            let f = energy_fractions(d.view(), &seq).unwrap();
            let g = energy_fractions((&d * scale).view(), &seq).unwrap();
            prop_assume!(d.dot(&d) > 1e-6);
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
            for (a, b) in f.iter().zip(&g) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn diagonal_fractions_obey_bessel(v in prop::collection::vec(-1.0f64..1.0, 36)) {
            let seq = diagonal_subspaces(ImageShape::new(1, 6, 6), 2, 1).unwrap();
            let f = energy_fractions(Array1::from(v).view(), &seq).unwrap();
            prop_assert!(f.iter().sum::<f64>() <= 1.0 + 1e-8);
            prop_assert!(f.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        }
    }

    #[test]
    fn directional_margin_linear() {
        let m = Model::linear(array![3.0, 4.0], 0.0);
        let (d, st) = directional_margin(&m, array![1.0, 1.0].view(), &array![2.0, 0.0], &AttackConfig::default()).unwrap();
        assert_eq!(st, RecordStatus::Converged);
        assert_close!(d, 7.0 / 3.0, 1e-12);
    }
}
