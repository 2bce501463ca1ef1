//! Evaluation protocol: one-vs-all splits, AUROC via rank statistics,
//! benchmark matrices over corruption/domain suites, and score histograms.

use std::collections::BTreeMap;

use crate::error::{GnlError, Result};
use crate::model::ModelBundle;
use crate::scoring::{infer, per_sample_rng, InferenceConfig};
use crate::tensor::ImageTensor;

/// A test sample with its binary label and the suite it belongs to.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: ImageTensor<f32>,
    /// 0 normal, 1 anomaly.
    pub label: u8,
    pub suite: String,
    /// Stable identifier (relative path) used for order-independent output.
    pub id: String,
}

/// Probability that a uniformly random anomaly outscores a uniformly random
/// normal, ties counted one half (Mann-Whitney). O(n log n) via mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GnlError::Shape(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GnlError::UndefinedMetric(format!(
            "auroc needs both classes, got {n_pos} anomalies / {n_neg} normals"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GnlError::Numeric("auroc scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Mid-rank assignment over tie groups (1-indexed ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += mid_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok((u / (np * nn)).clamp(0.0, 1.0))
}

/// One class designated normal; training keeps only that class's train
/// images, the test set keeps every class with derived binary labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A multiclass record prior to one-vs-all relabeling.
#[derive(Debug, Clone)]
pub struct ClassifiedImage {
    pub image: ImageTensor<f32>,
    pub class: String,
    pub split: Split,
    pub id: String,
}

pub fn one_vs_all_split(
    dataset: &[ClassifiedImage],
    normal_class: &str,
) -> Result<(Vec<ImageTensor<f32>>, Vec<LabeledSample>)> {
    if !dataset.iter().any(|s| s.class == normal_class) {
        return Err(GnlError::Config(format!("normal class '{normal_class}' not present in dataset")));
    }
    let train: Vec<ImageTensor<f32>> = dataset
        .iter()
        .filter(|s| s.split == Split::Train && s.class == normal_class)
        .map(|s| s.image.clone())
        .collect();
    let test: Vec<LabeledSample> = dataset
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| LabeledSample {
            image: s.image.clone(),
            label: u8::from(s.class != normal_class),
            suite: "id".into(),
            id: s.id.clone(),
        })
        .collect();
    Ok((train, test))
}

/// Scored sample inside an [`EvalReport`].
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub config_name: String,
    pub suite: String,
    pub n_normal: usize,
    pub n_anomaly: usize,
    pub auroc: f64,
    pub scores: Vec<ScoredSample>,
}

/// Per-(config, suite) AUROC values and score lists.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<SuiteResult>,
    pub seed: u64,
}

impl EvalReport {
    /// CSV columns: config_name, suite, n_normal, n_anomaly, auroc.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "config_name,suite,n_normal,n_anomaly,auroc")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.config_name, r.suite, r.n_normal, r.n_anomaly, r.auroc)?;
        }
        Ok(())
    }
}

/// Scores a suite sample-by-sample with an independent rng stream per sample
/// (keyed by the sample's position), so results do not depend on evaluation
/// order.
pub fn score_suite(
    bundle: &ModelBundle<f32>,
    samples: &[LabeledSample],
    cfg: &InferenceConfig,
    style_pool: &[ImageTensor<f32>],
    master_seed: u64,
) -> Result<Vec<ScoredSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let mut rng = per_sample_rng(master_seed, idx as u64);
        let (score, _) = infer(&sample.image, bundle, cfg, style_pool, &mut rng)?;
        out.push(ScoredSample { id: sample.id.clone(), label: sample.label, score: score as f64 });
    }
    Ok(out)
}

/// Runs every (config, suite) pair and assembles the report. Suites are
/// ordered by name, scores by sample id, so the emitted CSV is deterministic.
pub fn benchmark(
    bundle: &ModelBundle<f32>,
    suites: &BTreeMap<String, Vec<LabeledSample>>,
    configs: &[(String, InferenceConfig)],
    style_pool: &[ImageTensor<f32>],
    master_seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport { rows: Vec::new(), seed: master_seed };
    for (config_name, cfg) in configs {
        for (suite_name, samples) in suites {
            let mut scored = score_suite(bundle, samples, cfg, style_pool, master_seed)?;
            scored.sort_by(|a, b| a.id.cmp(&b.id));
            let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
            let labels: Vec<u8> = scored.iter().map(|s| s.label).collect();
            let value = auroc(&scores, &labels)?;
            report.rows.push(SuiteResult {
                config_name: config_name.clone(),
                suite: suite_name.clone(),
                n_normal: labels.iter().filter(|&&l| l == 0).count(),
                n_anomaly: labels.iter().filter(|&&l| l == 1).count(),
                auroc: value,
                scores: scored,
            });
        }
    }
    Ok(report)
}

/// Shared-bin score histogram, one count vector per label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram {
    /// `n_bins + 1` edges spanning [min, max] of all scores.
    pub edges: Vec<f64>,
    pub count_normal: Vec<u64>,
    pub count_anomaly: Vec<u64>,
}

pub fn score_histogram(scores: &[f64], labels: &[u8], n_bins: usize) -> Result<ScoreHistogram> {
    if scores.is_empty() {
        return Err(GnlError::Config("histogram requires at least one score".into()));
    }
    if scores.len() != labels.len() {
        return Err(GnlError::Shape("histogram: scores and labels differ in length".into()));
    }
    if n_bins < 2 {
        return Err(GnlError::Config("histogram needs at least 2 bins".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + span * i as f64 / n_bins as f64).collect();
    let mut count_normal = vec![0u64; n_bins];
    let mut count_anomaly = vec![0u64; n_bins];
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        let mut bin = ((s - lo) / span * n_bins as f64).floor() as usize;
        bin = bin.min(n_bins - 1);
        if l == 0 {
            count_normal[bin] += 1;
        } else {
            count_anomaly[bin] += 1;
        }
    }
    Ok(ScoreHistogram { edges, count_normal, count_anomaly })
}

impl ScoreHistogram {
    /// CSV columns: bin_left, bin_right, count_normal, count_anomaly.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_left,bin_right,count_normal,count_anomaly")?;
        for i in 0..self.count_normal.len() {
            writeln!(
                w,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.count_normal[i],
                self.count_anomaly[i]
            )?;
        }
        Ok(())
    }

    /// Minimal side-by-side bar chart as a static SVG.
    pub fn write_svg<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let n = self.count_normal.len();
        let (width, height, margin) = (640.0, 360.0, 40.0);
        let max_count = self
            .count_normal
            .iter()
            .chain(self.count_anomaly.iter())
            .copied()
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let plot_w = width - 2.0 * margin;
        let plot_h = height - 2.0 * margin;
        let bar_w = plot_w / n as f64 / 2.0;
        writeln!(
            w,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
        )?;
        writeln!(w, "  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>")?;
        for (i, (&cn, &ca)) in self.count_normal.iter().zip(self.count_anomaly.iter()).enumerate() {
            let x = margin + plot_w * i as f64 / n as f64;
            let hn = plot_h * cn as f64 / max_count;
            let ha = plot_h * ca as f64 / max_count;
            writeln!(
                w,
                "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4878cf\"/>",
                x,
                margin + plot_h - hn,
                bar_w,
                hn
            )?;
            writeln!(
                w,
                "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#d65f5f\"/>",
                x + bar_w,
                margin + plot_h - ha,
                bar_w,
                ha
            )?;
        }
        writeln!(
            w,
            "  <text x=\"{margin}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">normal (blue) vs anomaly (red)</text>"
        )?;
        writeln!(w, "</svg>")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn perfect_separation_is_one() {
        let v = auroc(&[0.1, 0.2, 0.9], &[0, 0, 1]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_is_zero() {
        let v = auroc(&[0.9, 0.1], &[0, 1]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn full_tie_is_half() {
        let v = auroc(&[0.5, 0.5], &[0, 1]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auroc(&[0.5, 0.7], &[0, 0]), Err(GnlError::UndefinedMetric(_))));
    }

    /// O(n^2) pair-counting oracle with ties at one half.
    fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if i == j || li != 1 || lj != 0 {
                    continue;
                }
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn rank_auroc_matches_pair_counting_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n = rng.gen_range(2..64);
            let scores: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..1.0) })
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pairs(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "fast {fast} vs slow {slow}");
        }
    }

    #[test]
    fn invariant_under_strictly_increasing_transforms() {
        let scores = vec![0.1, 0.7, 0.7, 0.3, 0.9, 0.2];
        let labels = vec![0, 1, 0, 0, 1, 1];
        let base = auroc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 11.0).collect();
        assert_eq!(base, auroc(&exp, &labels).unwrap());
        assert_eq!(base, auroc(&affine, &labels).unwrap());
    }

    fn classified(class: &str, split: Split, id: &str) -> ClassifiedImage {
        ClassifiedImage {
            image: ImageTensor::new(Array3::from_elem((1, 16, 16), 0.5)).unwrap(),
            class: class.into(),
            split,
            id: id.into(),
        }
    }

    #[test]
    fn one_vs_all_keeps_only_normal_training_images() {
        let data = vec![
            classified("zero", Split::Train, "a"),
            classified("one", Split::Train, "b"),
            classified("zero", Split::Test, "c"),
            classified("one", Split::Test, "d"),
            classified("two", Split::Test, "e"),
        ];
        let (train, test) = one_vs_all_split(&data, "zero").unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 3);
        let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 1]);
        // Disjointness: no test id appears in train (ids "c","d","e" vs "a").
        assert!(test.iter().all(|t| t.id != "a"));
        assert!(matches!(one_vs_all_split(&data, "seven"), Err(GnlError::Config(_))));
    }

    #[test]
    fn histogram_conserves_counts() {
        let scores = vec![0.1, 0.2, 0.2, 0.9, 0.8, 0.5];
        let labels = vec![0, 0, 0, 1, 1, 0];
        let h = score_histogram(&scores, &labels, 4).unwrap();
        assert_eq!(h.count_normal.iter().sum::<u64>(), 4);
        assert_eq!(h.count_anomaly.iter().sum::<u64>(), 2);
        assert_eq!(h.edges.len(), 5);
    }

    #[test]
    fn identical_scores_fill_one_bin() {
        let scores = vec![0.4; 6];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let h = score_histogram(&scores, &labels, 5).unwrap();
        assert_eq!(h.count_normal.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.count_anomaly.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn disjoint_ranges_have_zero_overlap() {
        let scores = vec![0.1, 0.15, 0.2, 0.8, 0.85, 0.9];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let h = score_histogram(&scores, &labels, 8).unwrap();
        let overlap: u64 = h
            .count_normal
            .iter()
            .zip(h.count_anomaly.iter())
            .map(|(&a, &b)| a.min(b))
            .sum();
        assert_eq!(overlap, 0);
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(matches!(score_histogram(&[], &[], 4), Err(GnlError::Config(_))));
    }
}
