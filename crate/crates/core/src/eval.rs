//! Objective scoring of explanations against annotation masks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::ArrayView3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{top_activated_images, FeatureBank, ThresholdTable};
use crate::data::{resize_mask, AnnotatedImage, ConceptMask, Mask};
use crate::embedding::is_single_token;
use crate::probe::{activated_region, Explanation};
use crate::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.04;
pub const DEFAULT_X_SWEEP: [usize; 3] = [5, 10, 20];

/// |a ∧ b| / |a ∨ b|, with 0 for two empty masks.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "iou of {:?} and {:?} masks",
            a.dim(),
            b.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub filter: usize,
    pub image: String,
    /// Concepts with IoU strictly above the threshold (single-token names only).
    pub concepts: Vec<String>,
    /// Best IoU per annotated concept, including ones that did not qualify.
    pub ious: BTreeMap<String, f64>,
}

/// Compares the activated region of filter `u` with every annotation mask,
/// resized to the feature grid.
pub fn assign_ground_truth(
    features: ArrayView3<f32>,
    image_id: &str,
    u: usize,
    threshold: f32,
    annotations: &[ConceptMask],
    iou_threshold: f64,
) -> Result<GroundTruth> {
    let (_, h, w) = features.dim();
    let region = activated_region(features, u, threshold);
    let mut ious: BTreeMap<String, f64> = BTreeMap::new();
    for ann in annotations {
        let small = resize_mask(&ann.mask, (h, w))?;
        let v = iou(&region, &small)?;
        let e = ious.entry(ann.concept.clone()).or_insert(v);
        *e = e.max(v);
    }
    let concepts = ious
        .iter()
        .filter(|(c, &v)| v > iou_threshold && is_single_token(c))
        .map(|(c, _)| c.clone())
        .collect();
    Ok(GroundTruth {
        filter: u,
        image: image_id.to_string(),
        concepts,
        ious,
    })
}

/// Ground truth for each filter's `p_images` most activating images.
pub fn assign_pairs(
    bank: &FeatureBank,
    images: &[AnnotatedImage],
    thresholds: &ThresholdTable,
    filters: &[usize],
    p_images: usize,
    iou_threshold: f64,
) -> Result<Vec<GroundTruth>> {
    if thresholds.layer != bank.layer() || thresholds.thresholds.len() != bank.n_filters() {
        return Err(Error::InvalidArgument(format!(
            "threshold table (`{}`, {} filters) does not match layer `{}`",
            thresholds.layer,
            thresholds.thresholds.len(),
            bank.layer()
        )));
    }
    let per_filter: Vec<Vec<GroundTruth>> = filters
        .par_iter()
        .map(|&u| {
            top_activated_images(bank, u, p_images.min(bank.len()))?
                .into_iter()
                .map(|i| {
                    assign_ground_truth(
                        bank.map(i).view(),
                        &bank.ids()[i],
                        u,
                        thresholds.thresholds[u],
                        &images[i].annotations,
                        iou_threshold,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_filter.into_iter().flatten().collect())
}

/// |W ∩ G| / |G|; `None` (pair skipped) when G is empty.
pub fn recall_filter_image<S: AsRef<str>>(words: &[S], ground_truth: &[String]) -> Option<f64> {
    if ground_truth.is_empty() {
        return None;
    }
    let w: BTreeSet<&str> = words.iter().map(|s| s.as_ref()).collect();
    let g: BTreeSet<&str> = ground_truth.iter().map(String::as_str).collect();
    Some(w.intersection(&g).count() as f64 / g.len() as f64)
}

/// |W ∩ G| / |W|; `None` when W is empty.
pub fn precision_filter_image<S: AsRef<str>>(words: &[S], ground_truth: &[String]) -> Option<f64> {
    let w: BTreeSet<&str> = words.iter().map(|s| s.as_ref()).collect();
    if w.is_empty() {
        return None;
    }
    let g: BTreeSet<&str> = ground_truth.iter().map(String::as_str).collect();
    Some(w.intersection(&g).count() as f64 / w.len() as f64)
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub filter: usize,
    pub image: String,
    pub ground_truth: Vec<String>,
    /// One entry per x in the sweep.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub filter: usize,
    pub top_words: Vec<String>,
    pub pairs_scored: usize,
    pub pairs_skipped: usize,
    pub recall: Vec<Option<f64>>,
    pub precision: Vec<Option<f64>>,
    pub mean_gt_size: Option<f64>,
    pub max_gt_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub x_sweep: Vec<usize>,
    /// Mean over scored (filter, image) pairs, one per x.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub pairs_scored: usize,
    pub pairs_skipped: usize,
    /// Filters without an explanation; their pairs score 0.
    pub unexplained_filters: Vec<usize>,
    pub per_filter: Vec<FilterScore>,
    pub pairs: Vec<PairScore>,
}

impl ScoreReport {
    pub fn recall_at(&self, x: usize) -> Option<f64> {
        self.x_sweep.iter().position(|&v| v == x).map(|i| self.recall[i])
    }

    pub fn precision_at(&self, x: usize) -> Option<f64> {
        self.x_sweep.iter().position(|&v| v == x).map(|i| self.precision[i])
    }

    /// filter, recall@x…, pairs, mean |G|, max |G|.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filter");
        for x in &self.x_sweep {
            let _ = write!(out, ",recall@{x}");
        }
        out.push_str(",pairs_scored,pairs_skipped,mean_gt_size,max_gt_size\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for f in &self.per_filter {
            let _ = write!(out, "{}", f.filter);
            for r in &f.recall {
                let _ = write!(out, ",{}", opt(*r));
            }
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                f.pairs_scored,
                f.pairs_skipped,
                opt(f.mean_gt_size),
                f.max_gt_size
            );
        }
        out
    }
}

/// Scores explanations against ground truth for every x in `x_sweep`. A filter
/// with no explanation is scored with an empty word list.
pub fn score_model(
    explanations: &[Explanation],
    assignments: &[GroundTruth],
    x_sweep: &[usize],
) -> Result<ScoreReport> {
    if x_sweep.is_empty() || x_sweep.contains(&0) {
        return Err(Error::InvalidArgument("x_sweep needs positive entries".into()));
    }
    let by_filter: BTreeMap<usize, &Explanation> =
        explanations.iter().map(|e| (e.filter, e)).collect();
    let mut grouped: BTreeMap<usize, Vec<&GroundTruth>> = BTreeMap::new();
    for g in assignments {
        grouped.entry(g.filter).or_default().push(g);
    }
    let mut pairs = Vec::new();
    let mut per_filter = Vec::new();
    let mut unexplained = Vec::new();
    let mut skipped_total = 0usize;
    for (&u, gts) in &grouped {
        let expl = by_filter.get(&u);
        if expl.is_none() {
            unexplained.push(u);
        }
        let words_at = |x: usize| -> Vec<&str> { expl.map(|e| e.top_words(x)).unwrap_or_default() };
        let mut fs = FilterScore {
            filter: u,
            top_words: words_at(*x_sweep.iter().max().unwrap())
                .into_iter()
                .map(String::from)
                .collect(),
            pairs_scored: 0,
            pairs_skipped: 0,
            recall: Vec::new(),
            precision: Vec::new(),
            mean_gt_size: None,
            max_gt_size: 0,
        };
        let mut filter_pairs = Vec::new();
        for g in gts {
            if g.concepts.is_empty() {
                fs.pairs_skipped += 1;
                continue;
            }
            let recall = x_sweep
                .iter()
                .map(|&x| recall_filter_image(&words_at(x), &g.concepts).unwrap())
                .collect();
            let precision = x_sweep
                .iter()
                .map(|&x| precision_filter_image(&words_at(x), &g.concepts).unwrap_or(0.0))
                .collect();
            fs.max_gt_size = fs.max_gt_size.max(g.concepts.len());
            filter_pairs.push(PairScore {
                filter: u,
                image: g.image.clone(),
                ground_truth: g.concepts.clone(),
                recall,
                precision,
            });
        }
        fs.pairs_scored = filter_pairs.len();
        fs.recall = (0..x_sweep.len())
            .map(|k| stable_mean(filter_pairs.iter().map(|p| p.recall[k]).collect()))
            .collect();
        fs.precision = (0..x_sweep.len())
            .map(|k| stable_mean(filter_pairs.iter().map(|p| p.precision[k]).collect()))
            .collect();
        fs.mean_gt_size = stable_mean(filter_pairs.iter().map(|p| p.ground_truth.len() as f64).collect());
        skipped_total += fs.pairs_skipped;
        per_filter.push(fs);
        pairs.extend(filter_pairs);
    }
    if pairs.is_empty() {
        return Err(Error::Empty(
            "no (filter, image) pair has a nonempty ground truth".into(),
        ));
    }
    let recall = (0..x_sweep.len())
        .map(|k| stable_mean(pairs.iter().map(|p| p.recall[k]).collect()).unwrap())
        .collect();
    let precision = (0..x_sweep.len())
        .map(|k| stable_mean(pairs.iter().map(|p| p.precision[k]).collect()).unwrap())
        .collect();
    Ok(ScoreReport {
        x_sweep: x_sweep.to_vec(),
        recall,
        precision,
        pairs_scored: pairs.len(),
        pairs_skipped: skipped_total,
        unexplained_filters: unexplained,
        per_filter,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelRecall {
    pub novel_concepts: Vec<String>,
    pub x: usize,
    /// Pairs whose ground truth contains at least one novel concept.
    pub pairs: usize,
    /// Mean of |W ∩ G ∩ N| / |G ∩ N| over those pairs.
    pub recall: Option<f64>,
    /// Novel concepts that appear in some filter's top-x words.
    pub discovered: Vec<String>,
}

/// Recall restricted to concepts the explainer never saw in training.
pub fn novel_concept_recall(
    explanations: &[Explanation],
    assignments: &[GroundTruth],
    novel: &[String],
    x: usize,
) -> NovelRecall {
    let novel_set: BTreeSet<&str> = novel.iter().map(String::as_str).collect();
    let by_filter: BTreeMap<usize, &Explanation> =
        explanations.iter().map(|e| (e.filter, e)).collect();
    let mut values = Vec::new();
    for g in assignments {
        let gn: Vec<String> = g
            .concepts
            .iter()
            .filter(|c| novel_set.contains(c.as_str()))
            .cloned()
            .collect();
        if gn.is_empty() {
            continue;
        }
        let words = by_filter.get(&g.filter).map(|e| e.top_words(x)).unwrap_or_default();
        values.push(recall_filter_image(&words, &gn).unwrap());
    }
    let discovered: BTreeSet<String> = explanations
        .iter()
        .flat_map(|e| e.top_words(x))
        .filter(|w| novel_set.contains(w))
        .map(String::from)
        .collect();
    NovelRecall {
        novel_concepts: novel.to_vec(),
        x,
        pairs: values.len(),
        recall: stable_mean(values),
        discovered: discovered.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceKind;
    use crate::probe::{ExplanationParams, Strategy, WordScore};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(cells: &[(usize, usize)], h: usize, w: usize) -> Mask {
        let mut m = Mask::from_elem((h, w), false);
        for &c in cells {
            m[c] = true;
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = mask(&[(0, 0), (0, 1), (1, 0), (1, 1)], 4, 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(&[(3, 3)], 4, 4);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let c = mask(&[(0, 0), (0, 1), (2, 0), (2, 1)], 4, 4);
        assert!((iou(&a, &c).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        let e = Mask::from_elem((4, 4), false);
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
        assert!(iou(&a, &Mask::from_elem((3, 4), false)).is_err());
    }

    #[test]
    fn iou_matches_brute_force_cell_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let pa: f64 = rng.random();
            let pb: f64 = rng.random();
            let a = Mask::from_shape_simple_fn((8, 8), || rng.random::<f64>() < pa);
            let b = Mask::from_shape_simple_fn((8, 8), || rng.random::<f64>() < pb);
            let (mut i, mut u) = (0, 0);
            for y in 0..8 {
                for x in 0..8 {
                    if a[[y, x]] && b[[y, x]] {
                        i += 1;
                    }
                    if a[[y, x]] || b[[y, x]] {
                        u += 1;
                    }
                }
            }
            let oracle = if u == 0 { 0.0 } else { i as f64 / u as f64 };
            assert_eq!(iou(&a, &b).unwrap(), oracle);
        }
    }

    fn ann(concept: &str, m: Mask) -> ConceptMask {
        ConceptMask {
            concept: concept.into(),
            mask: m,
            source_kind: SourceKind::Segmentation,
        }
    }

    #[test]
    fn ground_truth_uses_strict_threshold() {
        // 5×5 grid, region = 1 cell; a mask of 25 cells containing it has IoU 1/25 = 0.04
        let mut f = Array3::<f32>::zeros((1, 5, 5));
        f[[0, 2, 2]] = 1.0;
        let full = Mask::from_elem((5, 5), true);
        let exact = mask(&[(2, 2)], 5, 5);
        let far = mask(&[(0, 0)], 5, 5);
        let gt = assign_ground_truth(
            f.view(),
            "img",
            0,
            0.5,
            &[ann("whole", full), ann("disc", exact), ann("away", far), ann("two words", mask(&[(2, 2)], 5, 5))],
            0.04,
        )
        .unwrap();
        assert_eq!(gt.ious["whole"], 0.04);
        assert_eq!(gt.ious["disc"], 1.0);
        assert_eq!(gt.ious["away"], 0.0);
        // boundary excluded, multi-token excluded
        assert_eq!(gt.concepts, vec!["disc".to_string()]);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_filter_image(&["disc"], &["disc".to_string()]), Some(1.0));
        assert_eq!(
            recall_filter_image(&["a", "b"], &["b".to_string(), "c".to_string()]),
            Some(0.5)
        );
        assert_eq!(recall_filter_image(&["a"], &[]), None);
    }

    fn expl(filter: usize, words: &[&str]) -> Explanation {
        Explanation {
            filter,
            layer: "conv4".into(),
            strategy: Strategy::FilterAttention,
            params: ExplanationParams { s: 1, p: 1, x: 5 },
            words: words
                .iter()
                .map(|w| WordScore { token: w.to_string(), count: 1, mean_sim: 0.5 })
                .collect(),
            evidence: vec![],
            skipped_images: vec![],
        }
    }

    fn gt(filter: usize, image: &str, concepts: &[&str]) -> GroundTruth {
        GroundTruth {
            filter,
            image: image.into(),
            concepts: concepts.iter().map(|c| c.to_string()).collect(),
            ious: BTreeMap::new(),
        }
    }

    #[test]
    fn score_model_aggregates_and_skips() {
        let e = vec![expl(0, &["disc", "x"]), expl(1, &["y", "z", "square"])];
        let g = vec![
            gt(0, "a", &["disc"]),
            gt(0, "b", &[]),
            gt(1, "a", &["square", "disc"]),
            gt(2, "a", &["disc"]),
        ];
        let r = score_model(&e, &g, &[1, 2, 3]).unwrap();
        assert_eq!(r.pairs_scored, 3);
        assert_eq!(r.pairs_skipped, 1);
        assert_eq!(r.unexplained_filters, vec![2]);
        // x=1: 1, 0, 0 ; x=3: 1, 0.5, 0
        assert!((r.recall[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.recall[2] - 0.5).abs() < 1e-12);
        let single = score_model(&[expl(0, &["disc"])], &[gt(0, "a", &["disc"])], &[5]).unwrap();
        assert_eq!(single.recall, vec![1.0]);
        assert!(score_model(&e, &[gt(0, "b", &[])], &[5]).is_err());
    }

    #[test]
    fn novel_recall_counts_only_novel_concepts() {
        let e = vec![expl(0, &["reddisc", "red"]), expl(1, &["bluesquare"])];
        let g = vec![gt(0, "a", &["reddisc", "redsquare"]), gt(1, "a", &["bluedisc"]), gt(1, "b", &["bluesquare"])];
        let n = novel_concept_recall(&e, &g, &["reddisc".into(), "bluedisc".into()], 5);
        assert_eq!(n.pairs, 2);
        assert_eq!(n.recall, Some(0.5));
        assert_eq!(n.discovered, vec!["reddisc".to_string()]);
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_x(words in prop::collection::vec(0u8..12, 0..25),
                                   truth in prop::collection::btree_set(0u8..12, 1..5)) {
            let mut seen = BTreeSet::new();
            let ranked: Vec<String> = words.iter().filter(|w| seen.insert(**w)).map(|w| format!("w{w}")).collect();
            let g: Vec<String> = truth.iter().map(|w| format!("w{w}")).collect();
            let at = |x: usize| recall_filter_image(&ranked.iter().take(x).collect::<Vec<_>>(), &g).unwrap();
            prop_assert!(at(5) <= at(10) && at(10) <= at(20));
        }

        #[test]
        fn aggregate_ignores_pair_order(recalls in prop::collection::vec((0usize..4, 1usize..4), 1..30), seed in 0u64..1000) {
            let e: Vec<Explanation> = (0..4).map(|u| expl(u, &["w0", "w1", "w2"])).collect();
            let mut g: Vec<GroundTruth> = recalls
                .iter()
                .enumerate()
                .map(|(i, &(u, n))| {
                    let c: Vec<String> = (0..n).map(|k| format!("w{}", (k + i) % 5)).collect();
                    GroundTruth { filter: u, image: format!("i{i}"), concepts: c, ious: BTreeMap::new() }
                })
                .collect();
            let a = score_model(&e, &g, &[1, 2, 3]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            g.shuffle(&mut rng);
            let b = score_model(&e, &g, &[1, 2, 3]).unwrap();
            prop_assert_eq!(a.recall, b.recall);
            prop_assert_eq!(a.precision, b.precision);
        }
    }
}
