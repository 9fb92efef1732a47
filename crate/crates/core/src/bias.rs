//! Unsupervised group-bias audit: qualified images per filter, group
//! disparities, and concept-level group ratios.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureBank, ThresholdTable};
use crate::data::{AnnotatedImage, Group};
use crate::probe::{ExplainOutcome, FilterFailure, Probe, ProbeParams};
use crate::{Error, Result};

/// Image ids partitioned into two groups.
#[derive(Debug, Clone)]
pub struct GroupedDataset {
    group_of: HashMap<String, Group>,
    sizes: [usize; 2],
    /// Ids dropped because they were labelled with both groups.
    pub conflicting: Vec<String>,
}

fn slot(g: Group) -> usize {
    match g {
        Group::A => 0,
        Group::B => 1,
    }
}

impl GroupedDataset {
    /// Builds from `(id, group)` labels. An id labelled with both groups is
    /// excluded; repeated identical labels are harmless.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Group)>,
        S: Into<String>,
    {
        let mut seen: BTreeMap<String, BTreeSet<Group>> = BTreeMap::new();
        for (id, g) in labels {
            seen.entry(id.into()).or_default().insert(g);
        }
        let mut group_of = HashMap::new();
        let mut conflicting = Vec::new();
        let mut sizes = [0usize; 2];
        for (id, gs) in seen {
            if gs.len() > 1 {
                conflicting.push(id);
            } else {
                let g = *gs.iter().next().unwrap();
                sizes[slot(g)] += 1;
                group_of.insert(id, g);
            }
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "both groups must be nonempty (A={}, B={})",
                sizes[0], sizes[1]
            )));
        }
        Ok(Self {
            group_of,
            sizes,
            conflicting,
        })
    }

    /// Uses each image's `group` field; unlabelled images are left out.
    pub fn from_images(images: &[AnnotatedImage]) -> Result<Self> {
        Self::from_labels(
            images
                .iter()
                .filter_map(|im| im.group.map(|g| (im.id.clone(), g))),
        )
    }

    pub fn group(&self, id: &str) -> Option<Group> {
        self.group_of.get(id).copied()
    }

    pub fn size(&self, g: Group) -> usize {
        self.sizes[slot(g)]
    }

    pub fn len(&self) -> usize {
        self.sizes[0] + self.sizes[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same partition with A and B swapped.
    pub fn relabeled(&self) -> Self {
        Self {
            group_of: self
                .group_of
                .iter()
                .map(|(k, g)| (k.clone(), g.other()))
                .collect(),
            sizes: [self.sizes[1], self.sizes[0]],
            conflicting: self.conflicting.clone(),
        }
    }
}

/// Ids of images whose maximum activation of `u` is strictly above `threshold`.
pub fn qualified_images(bank: &FeatureBank, u: usize, threshold: f32) -> Result<Vec<String>> {
    if u >= bank.n_filters() {
        return Err(Error::InvalidArgument(format!(
            "filter {u} out of range for {} filters",
            bank.n_filters()
        )));
    }
    Ok((0..bank.len())
        .filter(|&i| bank.max_activation(i, u) > threshold)
        .map(|i| bank.ids()[i].clone())
        .collect())
}

/// Qualified-image counts per group; ids outside the grouping are ignored.
pub fn group_counts<S: AsRef<str>>(qualified: &[S], groups: &GroupedDataset) -> (usize, usize) {
    let mut n = [0usize; 2];
    for id in qualified {
        if let Some(g) = groups.group(id.as_ref()) {
            n[slot(g)] += 1;
        }
    }
    (n[0], n[1])
}

/// `(pct_A, pct_B, |pct_A − pct_B|)` with `pct_g = 100·|qualified ∩ g| / |g|`.
pub fn filter_disparity<S: AsRef<str>>(qualified: &[S], groups: &GroupedDataset) -> Result<(f64, f64, f64)> {
    let (na, nb) = group_counts(qualified, groups);
    let pct = |n: usize, g: Group| -> Result<f64> {
        let size = groups.size(g);
        if size == 0 {
            return Err(Error::InvalidArgument(format!("group {g:?} is empty")));
        }
        Ok(100.0 * n as f64 / size as f64)
    };
    let (pa, pb) = (pct(na, Group::A)?, pct(nb, Group::B)?);
    Ok((pa, pb, (pa - pb).abs()))
}

/// `N_A / (N_A + N_B)`, exactly.
pub fn group_ratio(n_a: usize, n_b: usize) -> Result<BigRational> {
    if n_a + n_b == 0 {
        return Err(Error::Undefined("group ratio with no qualified images".into()));
    }
    Ok(BigRational::new(BigInt::from(n_a), BigInt::from(n_a + n_b)))
}

/// Mean of the defined ratios; `None` when there are none.
pub fn concept_ratio(ratios: &[Option<BigRational>]) -> Option<BigRational> {
    let defined: Vec<&BigRational> = ratios.iter().flatten().collect();
    if defined.is_empty() {
        return None;
    }
    let sum = defined
        .iter()
        .fold(BigRational::zero(), |acc, r| acc + *r);
    Some(sum / BigRational::from_integer(BigInt::from(defined.len())))
}

pub fn ratio_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Pearson correlation of paired samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} vs {} samples", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBias {
    pub filter: usize,
    pub top1: Option<String>,
    pub qualified_a: usize,
    pub qualified_b: usize,
    pub pct_a: f64,
    pub pct_b: f64,
    pub disparity: f64,
    pub ratio: Option<f64>,
    /// `ratio` as an exact fraction, e.g. `"3/4"`.
    pub ratio_exact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBias {
    pub concept: String,
    pub filters: Vec<usize>,
    pub ratio: f64,
    pub ratio_exact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub concept: String,
    pub discovered: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub pearson: f64,
    pub points: Vec<ScatterPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub layer: String,
    pub group_sizes: [usize; 2],
    /// Filters ranked by disparity (descending, then filter index), truncated to `top_k`.
    pub top: Vec<FilterBias>,
    /// Every filter, in index order.
    pub filters: Vec<FilterBias>,
    pub concepts: Vec<ConceptBias>,
    pub failures: Vec<FilterFailure>,
    pub validation: Option<Validation>,
}

impl BiasReport {
    pub fn concept(&self, name: &str) -> Option<&ConceptBias> {
        self.concepts.iter().find(|c| c.concept == name)
    }

    pub fn filters_csv(&self) -> String {
        let mut out = String::from("filter,top1,qualified_a,qualified_b,pct_a,pct_b,disparity,ratio\n");
        for f in &self.filters {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                f.filter,
                f.top1.as_deref().unwrap_or(""),
                f.qualified_a,
                f.qualified_b,
                f.pct_a,
                f.pct_b,
                f.disparity,
                f.ratio.map(|r| r.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn concepts_csv(&self) -> String {
        let mut out = String::from("concept,ratio,filters\n");
        for c in &self.concepts {
            let fs: Vec<String> = c.filters.iter().map(|f| f.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", c.concept, c.ratio, fs.join(" ")));
        }
        out
    }

    pub fn scatter_csv(&self) -> Option<String> {
        let v = self.validation.as_ref()?;
        let mut out = String::from("concept,discovered,reference\n");
        for p in &v.points {
            out.push_str(&format!("{},{},{}\n", p.concept, p.discovered, p.reference));
        }
        Some(out)
    }

    /// Correlates discovered concept ratios with `reference` over shared concepts
    /// and stores the result.
    pub fn validate_against(&mut self, reference: &BTreeMap<String, f64>) -> Result<f64> {
        let points: Vec<ScatterPoint> = self
            .concepts
            .iter()
            .filter_map(|c| {
                reference.get(&c.concept).map(|&r| ScatterPoint {
                    concept: c.concept.clone(),
                    discovered: c.ratio,
                    reference: r,
                })
            })
            .collect();
        if points.len() < 3 {
            return Err(Error::Undefined(format!(
                "{} concepts shared with the reference, need at least 3",
                points.len()
            )));
        }
        let xs: Vec<f64> = points.iter().map(|p| p.discovered).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.reference).collect();
        let rho = pearson(&xs, &ys)?;
        self.validation = Some(Validation { pearson: rho, points });
        Ok(rho)
    }
}

/// Per-concept A-ratio over annotated images containing the concept.
pub fn annotation_ratios(images: &[AnnotatedImage], groups: &GroupedDataset) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for im in images {
        let Some(g) = groups.group(&im.id) else { continue };
        let present: BTreeSet<&str> = im.annotations.iter().map(|a| a.concept.as_str()).collect();
        for c in present {
            let e = counts.entry(c).or_default();
            match g {
                Group::A => e.0 += 1,
                Group::B => e.1 += 1,
            }
        }
    }
    counts
        .into_iter()
        .filter_map(|(c, (a, b))| group_ratio(a, b).ok().map(|r| (c.to_string(), ratio_to_f64(&r))))
        .collect()
}

/// Disparities and concept ratios from precomputed explanations.
pub fn build_report(
    bank: &FeatureBank,
    thresholds: &ThresholdTable,
    explained: &ExplainOutcome,
    groups: &GroupedDataset,
    top_k: usize,
) -> Result<BiasReport> {
    if thresholds.thresholds.len() != bank.n_filters() {
        return Err(Error::Shape(format!(
            "{} thresholds for {} filters",
            thresholds.thresholds.len(),
            bank.n_filters()
        )));
    }
    let mut filters = Vec::with_capacity(bank.n_filters());
    let mut by_concept: BTreeMap<String, (Vec<usize>, Vec<Option<BigRational>>)> = BTreeMap::new();
    for u in 0..bank.n_filters() {
        let q = qualified_images(bank, u, thresholds.thresholds[u])?;
        let (na, nb) = group_counts(&q, groups);
        let (pct_a, pct_b, disparity) = filter_disparity(&q, groups)?;
        let ratio = group_ratio(na, nb).ok();
        let top1 = explained.get(u).and_then(|e| e.top1()).map(str::to_string);
        if let Some(t) = &top1 {
            let e = by_concept.entry(t.clone()).or_default();
            e.0.push(u);
            e.1.push(ratio.clone());
        }
        filters.push(FilterBias {
            filter: u,
            top1,
            qualified_a: na,
            qualified_b: nb,
            pct_a,
            pct_b,
            disparity,
            ratio: ratio.as_ref().map(ratio_to_f64),
            ratio_exact: ratio.as_ref().map(|r| r.to_string()),
        });
    }
    let concepts = by_concept
        .into_iter()
        .filter_map(|(concept, (fs, rs))| {
            concept_ratio(&rs).map(|r| ConceptBias {
                concept,
                filters: fs,
                ratio: ratio_to_f64(&r),
                ratio_exact: r.to_string(),
            })
        })
        .collect();
    let mut top = filters.clone();
    top.sort_by(|a, b| b.disparity.total_cmp(&a.disparity).then(a.filter.cmp(&b.filter)));
    top.truncate(top_k);
    Ok(BiasReport {
        layer: bank.layer().to_string(),
        group_sizes: [groups.size(Group::A), groups.size(Group::B)],
        top,
        filters,
        concepts,
        failures: explained.failures.clone(),
        validation: None,
    })
}

/// Explains every filter with `params` and builds the report.
pub fn audit(probe: &Probe, groups: &GroupedDataset, params: &ProbeParams, top_k: usize) -> Result<BiasReport> {
    let thresholds = probe
        .thresholds
        .ok_or_else(|| Error::InvalidArgument("bias audit needs a threshold table".into()))?;
    let explained = probe.explain_model(None, params);
    build_report(probe.bank, thresholds, &explained, groups, top_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn groups(a: usize, b: usize) -> GroupedDataset {
        GroupedDataset::from_labels(
            (0..a)
                .map(|i| (format!("a{i}"), Group::A))
                .chain((0..b).map(|i| (format!("b{i}"), Group::B))),
        )
        .unwrap()
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn disparity_examples() {
        let g = groups(100, 100);
        assert_eq!(filter_disparity(&ids("a", 100), &g).unwrap(), (100.0, 0.0, 100.0));
        assert_eq!(filter_disparity::<String>(&[], &g).unwrap(), (0.0, 0.0, 0.0));
        let g = groups(200, 100);
        let mut q = ids("a", 50);
        q.extend(ids("b", 25));
        assert_eq!(filter_disparity(&q, &g).unwrap(), (25.0, 25.0, 0.0));
    }

    #[test]
    fn empty_group_is_rejected() {
        assert!(GroupedDataset::from_labels([("x", Group::A)]).is_err());
    }

    #[test]
    fn conflicting_labels_are_excluded() {
        let g = GroupedDataset::from_labels([
            ("x", Group::A),
            ("x", Group::B),
            ("y", Group::A),
            ("y", Group::A),
            ("z", Group::B),
        ])
        .unwrap();
        assert_eq!(g.conflicting, ["x"]);
        assert_eq!((g.size(Group::A), g.size(Group::B)), (1, 1));
        assert_eq!(g.group("x"), None);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ratio_to_f64(&group_ratio(3, 1).unwrap()), 0.75);
        assert_eq!(ratio_to_f64(&group_ratio(7, 7).unwrap()), 0.5);
        assert!(matches!(group_ratio(0, 0), Err(Error::Undefined(_))));
        let one = BigRational::from_integer(1.into());
        assert_eq!(group_ratio(1, 3).unwrap(), one - group_ratio(3, 1).unwrap());
    }

    #[test]
    fn concept_ratio_examples() {
        let r = |a, b| Some(group_ratio(a, b).unwrap());
        assert_eq!(ratio_to_f64(&concept_ratio(&[r(3, 1)]).unwrap()), 0.75);
        let mean = concept_ratio(&[r(3, 2), r(4, 1)]).unwrap();
        assert_eq!(mean, BigRational::new(7.into(), 10.into()));
        assert_eq!(concept_ratio(&[None, None]), None);
    }

    #[test]
    fn pearson_examples() {
        let x = [0.9, 0.7, 0.5, 0.3];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[0.5; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn qualified_images_follow_strict_threshold() {
        let maps = vec![
            Array3::from_elem((2, 2, 2), 1.0f32),
            Array3::from_elem((2, 2, 2), 3.0f32),
        ];
        let bank = FeatureBank::from_maps("l", vec!["p".into(), "q".into()], maps).unwrap();
        assert_eq!(qualified_images(&bank, 0, 1.0).unwrap(), ["q"]);
        assert!(qualified_images(&bank, 0, 5.0).unwrap().is_empty());
        assert_eq!(qualified_images(&bank, 1, f32::NEG_INFINITY).unwrap().len(), 2);
        assert!(qualified_images(&bank, 2, 0.0).is_err());
    }

    #[test]
    fn report_validation_needs_three_concepts() {
        let mut rep = BiasReport {
            layer: "l".into(),
            group_sizes: [1, 1],
            top: vec![],
            filters: vec![],
            concepts: ["p", "q"]
                .iter()
                .map(|c| ConceptBias {
                    concept: c.to_string(),
                    filters: vec![0],
                    ratio: 0.5,
                    ratio_exact: "1/2".into(),
                })
                .collect(),
            failures: vec![],
            validation: None,
        };
        let reference: BTreeMap<String, f64> = [("p".to_string(), 0.1), ("q".to_string(), 0.9)].into();
        assert!(matches!(rep.validate_against(&reference), Err(Error::Undefined(_))));
    }

    proptest! {
        #[test]
        fn relabeling_maps_ratio_to_complement(
            a in 1usize..40, b in 1usize..40, qa in 0usize..40, qb in 0usize..40,
        ) {
            let (qa, qb) = (qa.min(a), qb.min(b));
            let g = groups(a, b);
            let mut q = ids("a", qa);
            q.extend(ids("b", qb));
            let swapped = g.relabeled();
            let (na, nb) = group_counts(&q, &g);
            let (sa, sb) = group_counts(&q, &swapped);
            prop_assert_eq!((sa, sb), (nb, na));
            if na + nb > 0 {
                let one = BigRational::from_integer(1.into());
                prop_assert_eq!(group_ratio(sa, sb).unwrap(), one - group_ratio(na, nb).unwrap());
            }
            let d = filter_disparity(&q, &g).unwrap().2;
            prop_assert_eq!(filter_disparity(&q, &swapped).unwrap().2, d);
        }

        #[test]
        fn disparity_is_invariant_to_duplication(
            a in 1usize..40, b in 1usize..40, qa in 0usize..40, qb in 0usize..40,
        ) {
            let (qa, qb) = (qa.min(a), qb.min(b));
            let g = groups(a, b);
            let mut q = ids("a", qa);
            q.extend(ids("b", qb));
            // every image appears twice, under a second id
            let g2 = GroupedDataset::from_labels(
                (0..a).flat_map(|i| [(format!("a{i}"), Group::A), (format!("a{i}'"), Group::A)])
                    .chain((0..b).flat_map(|i| [(format!("b{i}"), Group::B), (format!("b{i}'"), Group::B)])),
            ).unwrap();
            let q2: Vec<String> = q.iter().flat_map(|s| [s.clone(), format!("{s}'")]).collect();
            prop_assert_eq!(filter_disparity(&q2, &g2).unwrap(), filter_disparity(&q, &g).unwrap());
        }

        #[test]
        fn concept_ratio_lies_in_hull(counts in prop::collection::vec((0usize..30, 0usize..30), 1..8)) {
            let rs: Vec<Option<BigRational>> = counts.iter().map(|&(a, b)| group_ratio(a, b).ok()).collect();
            if let Some(mean) = concept_ratio(&rs) {
                let defined: Vec<&BigRational> = rs.iter().flatten().collect();
                let lo = defined.iter().min().unwrap();
                let hi = defined.iter().max().unwrap();
                prop_assert!(*lo <= &mean && &mean <= *hi);
            } else {
                prop_assert!(rs.iter().all(Option::is_none));
            }
        }
    }
}
