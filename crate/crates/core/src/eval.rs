//! Frame-level accuracy metrics, reports and comparison tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{window_replay, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{MacroModel, Variant, WindowInput};
use crate::tensor::{Scalar, Tensor};

/// Win prediction: `P > 0.5`; a probability of exactly 0.5 predicts a loss.
pub fn predicts_win<F: Scalar>(p: F) -> bool {
    p > F::from_f64_lossy(0.5)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn fraction(correct: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Data("nothing to evaluate: every step is masked".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Fraction of unmasked steps whose thresholded win probability matches the
/// per-step result.
pub fn gsp_accuracy<F: Scalar>(win_prob: &[F], results: &[u8], mask: &[bool]) -> Result<f64> {
    if win_prob.len() != results.len() || mask.len() != results.len() {
        return Err(Error::dim("gsp_accuracy", "probabilities, results and mask differ in length"));
    }
    let (mut hit, mut n) = (0, 0);
    for ((&p, &r), &m) in win_prob.iter().zip(results).zip(mask) {
        if m {
            n += 1;
            hit += usize::from(predicts_win(p) == (r == 1));
        }
    }
    fraction(hit, n)
}

/// Top-1 accuracy of `action_dist: [N, A]`.
pub fn bop_accuracy<F: Scalar>(action_dist: &Tensor<F>, actions: &[usize], mask: &[bool]) -> Result<f64> {
    let a = action_dist.last_dim();
    if action_dist.len() != actions.len() * a || mask.len() != actions.len() {
        return Err(Error::dim("bop_accuracy", "distribution rows, actions and mask differ in length"));
    }
    let (mut hit, mut n) = (0, 0);
    for (i, (&truth, &m)) in actions.iter().zip(mask).enumerate() {
        if m {
            n += 1;
            hit += usize::from(argmax(&action_dist.data()[i * a..(i + 1) * a]) == truth);
        }
    }
    fraction(hit, n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub steps: usize,
    pub gsp_correct: usize,
    pub bop_correct: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.steps += o.steps;
        self.gsp_correct += o.gsp_correct;
        self.bop_correct += o.bop_correct;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub index: usize,
    pub steps: usize,
    pub gsp: f64,
    pub bop: f64,
}

fn curve(counts: &[Counts]) -> Vec<CurvePoint> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.steps > 0)
        .map(|(index, c)| CurvePoint {
            index,
            steps: c.steps,
            gsp: c.gsp_correct as f64 / c.steps as f64,
            bop: c.bop_correct as f64 / c.steps as f64,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matchup: String,
    pub variant: Variant,
    pub split: Split,
    /// Identifies the exact replays evaluated.
    pub fingerprint: String,
    pub gsp_mean_acc: f64,
    pub bop_mean_acc: f64,
    pub steps: usize,
    /// Accuracy by window number within a replay.
    pub by_window_index: Vec<CurvePoint>,
    /// Accuracy by position inside a window.
    pub by_position: Vec<CurvePoint>,
}

/// The dataset's replay `index` cut to window `w`, as model input.
pub fn window_input<F: Scalar>(ds: &Dataset, index: usize, start: usize, len: usize) -> WindowInput<F> {
    let r = &ds.replays[index];
    let g = r.global_dim;
    let mut global = Vec::with_capacity(len * g);
    let mut spatial = Vec::with_capacity(len * r.spatial_len());
    for s in &r.steps[start..start + len] {
        global.extend(s.global.iter().map(|&v| F::from_f32(v).unwrap()));
        spatial.extend(s.spatial_f32().map(|v| F::from_f32(v).unwrap()));
    }
    let mut sshape = vec![len];
    sshape.extend_from_slice(&r.spatial_shape);
    WindowInput {
        global: Tensor::from_vec(vec![len, g], global).expect("window"),
        spatial: Tensor::from_vec(sshape, spatial).expect("window"),
        origin: Some((ds.id(index).to_string(), start)),
    }
}

/// Checks that a model can consume a dataset.
pub fn check_compatible<F: Scalar>(model: &MacroModel<F>, ds: &Dataset) -> Result<()> {
    let c = model.config();
    let m = &ds.manifest;
    if c.global_dim != m.global_dim {
        return Err(Error::config("global_dim", format!("model expects {}, data has {}", c.global_dim, m.global_dim)));
    }
    if c.spatial_shape != m.spatial_shape {
        return Err(Error::config(
            "spatial_shape",
            format!("model expects {:?}, data has {:?}", c.spatial_shape, m.spatial_shape),
        ));
    }
    if c.action_count != m.action_count {
        return Err(Error::config(
            "action_count",
            format!("model predicts {} actions, data has {}", c.action_count, m.action_count),
        ));
    }
    Ok(())
}

/// Inference over every window of every replay in `split`, dropout off.
pub fn evaluate<F: Scalar>(model: &MacroModel<F>, ds: &Dataset, split: Split) -> Result<EvalReport> {
    check_compatible(model, ds)?;
    let t = model.config().window_len;
    let per_replay: Vec<(Vec<Counts>, Vec<Counts>)> = ds
        .split_indices(split)
        .par_iter()
        .map(|&i| {
            let r = &ds.replays[i];
            let mut by_window = Vec::new();
            let mut by_pos = vec![Counts::default(); t];
            for w in window_replay(i, r.len(), t) {
                let out = model.predict(&window_input(ds, i, w.start, w.len))?;
                let a = model.config().action_count;
                let mut c = Counts::default();
                for (k, slot) in by_pos.iter_mut().enumerate().take(w.len) {
                    let g = usize::from(predicts_win(out.win_prob.data()[k]) == (r.result == 1));
                    let b = usize::from(
                        argmax(&out.action_dist.data()[k * a..(k + 1) * a]) == r.steps[w.start + k].action as usize,
                    );
                    let step = Counts { steps: 1, gsp_correct: g, bop_correct: b };
                    c.add(&step);
                    slot.add(&step);
                }
                by_window.push(c);
            }
            Ok((by_window, by_pos))
        })
        .collect::<Result<_>>()?;

    let mut total = Counts::default();
    let mut by_window: Vec<Counts> = Vec::new();
    let mut by_pos = vec![Counts::default(); t];
    for (bw, bp) in &per_replay {
        if by_window.len() < bw.len() {
            by_window.resize(bw.len(), Counts::default());
        }
        for (acc, c) in by_window.iter_mut().zip(bw) {
            acc.add(c);
            total.add(c);
        }
        for (acc, c) in by_pos.iter_mut().zip(bp) {
            acc.add(c);
        }
    }
    Ok(EvalReport {
        matchup: ds.manifest.matchup.to_string(),
        variant: model.config().variant,
        split,
        fingerprint: ds.manifest.fingerprint(split),
        gsp_mean_acc: fraction(total.gsp_correct, total.steps)?,
        bop_mean_acc: fraction(total.bop_correct, total.steps)?,
        steps: total.steps,
        by_window_index: curve(&by_window),
        by_position: curve(&by_pos),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Variant name, or a free label such as a transfer pair.
    pub variant: String,
    pub matchup: String,
    pub gsp: f64,
    pub bop: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub fingerprint: String,
    pub rows: Vec<ComparisonRow>,
}

pub const CSV_HEADER: &str = "variant,matchup,gsp,bop,steps";

/// Tabulates reports from one split, ordered full, no_skip, no_decoder,
/// self_attn_only, gru_baseline.
pub fn compare(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::Contract("a comparison needs at least two reports".into()));
    }
    let fp = &reports[0].fingerprint;
    if let Some(r) = reports.iter().find(|r| &r.fingerprint != fp) {
        return Err(Error::Contract(format!("reports come from different splits: {fp} vs {}", r.fingerprint)));
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.variant);
    Ok(ComparisonTable {
        fingerprint: fp.clone(),
        rows: sorted
            .into_iter()
            .map(|r| ComparisonRow {
                variant: r.variant.to_string(),
                matchup: r.matchup.clone(),
                gsp: r.gsp_mean_acc,
                bop: r.bop_mean_acc,
                steps: r.steps,
            })
            .collect(),
    })
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == label)
    }

    /// `(label, gsp - base.gsp, bop - base.bop)` for every row.
    pub fn deltas(&self, baseline: &str) -> Result<Vec<(String, f64, f64)>> {
        let base = self.row(baseline).ok_or_else(|| Error::Contract(format!("no row labelled {baseline}")))?;
        Ok(self.rows.iter().map(|r| (r.variant.clone(), r.gsp - base.gsp, r.bop - base.bop)).collect())
    }

    /// Accuracies use Rust's shortest round-trip float formatting, so
    /// [`ComparisonTable::from_csv`] recovers them exactly.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s += &format!("{},{},{},{},{}\n", r.variant, r.matchup, r.gsp, r.bop, r.steps);
        }
        s
    }

    pub fn from_csv(text: &str, fingerprint: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format(format!("CSV header must be {CSV_HEADER:?}")));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Format(format!("bad CSV row {l:?}"));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(ComparisonRow {
                    variant: f[0].to_string(),
                    matchup: f[1].to_string(),
                    gsp: f[2].parse().map_err(|_| bad())?,
                    bop: f[3].parse().map_err(|_| bad())?,
                    steps: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ComparisonTable { fingerprint: fingerprint.to_string(), rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{CSV_HEADER}\n{},{},{},{},{}\n",
            self.variant, self.matchup, self.gsp_mean_acc, self.bop_mean_acc, self.steps
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rules() {
        assert!(!predicts_win(0.5f64));
        assert!(predicts_win(0.5000001f64));
        assert_eq!(argmax(&[0.2f64, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.25f64; 4]), 0);
    }

    #[test]
    fn enumerated_toy_cases() {
        assert_eq!(gsp_accuracy(&[0.9f64; 3], &[1; 3], &[true; 3]).unwrap(), 1.0);
        // 0.5 predicts loss: steps 0 and 3 right, 1 and 2 wrong
        let acc = gsp_accuracy(&[0.5f64, 0.5, 0.2, 0.7], &[0, 1, 1, 1], &[true; 4]).unwrap();
        assert_eq!(acc, 0.5);
        assert!(gsp_accuracy(&[0.9f64], &[1], &[false]).is_err());

        let d = Tensor::<f64>::from_f64(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(bop_accuracy(&d, &[1, 0], &[true, true]).unwrap(), 1.0);
        assert_eq!(bop_accuracy(&d, &[1, 2], &[true, true]).unwrap(), 0.5);
    }

    #[test]
    fn csv_round_trip() {
        let t = ComparisonTable {
            fingerprint: "x".into(),
            rows: vec![
                ComparisonRow {
                    variant: "full".into(),
                    matchup: "TvT".into(),
                    gsp: 0.1 + 0.2,
                    bop: 1.0 / 3.0,
                    steps: 7,
                },
                ComparisonRow { variant: "no_skip".into(), matchup: "TvT".into(), gsp: 0.5, bop: 0.25, steps: 7 },
            ],
        };
        assert_eq!(ComparisonTable::from_csv(&t.to_csv(), "x").unwrap(), t);
        assert!(t.deltas("full").unwrap().iter().any(|d| d.1 != 0.0));
        assert!(t.deltas("nope").is_err());
    }
}
