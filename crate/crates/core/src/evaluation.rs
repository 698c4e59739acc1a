//! Ranking metrics, the transform-sensitivity protocol and placement metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{restore_background, PairRecord};
use crate::embedding::{cosine_similarity, sensitivity_distance, Embedding};
use crate::encoder::{embed_background, embed_foreground, ImageEncoder};
use crate::error::{GalaError, Result};
use crate::image::BoundingBox;
use crate::instance::ForegroundInstance;
use crate::placement::{grid_search, scale_select, HoleScorer, PlacementConfig, WindowScorer};
use crate::retrieval::RetrievalResult;
use crate::transforms::{apply_record, draw_record, DonorPool, TransformConfig, TransformKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub relevant_ids: BTreeSet<String>,
    pub category: String,
}

impl RelevanceJudgment {
    /// The single-ground-truth case: only the query's own object is relevant.
    pub fn own_object(query_id: &str, object_id: &str, category: &str) -> Self {
        Self {
            query_id: query_id.to_string(),
            relevant_ids: BTreeSet::from([object_id.to_string()]),
            category: category.to_string(),
        }
    }
}

/// Mean precision at the ranks of the relevant items; relevant items that
/// never appear contribute zero. `None` for an empty relevant set.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut seen = BTreeSet::new();
    for (r, id) in ranked.iter().enumerate() {
        let id = id.as_ref();
        if relevant.contains(id) && seen.insert(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub per_category: BTreeMap<String, f64>,
    pub evaluated: usize,
    /// Queries without a usable judgment.
    pub skipped: Vec<String>,
}

/// mAP over rankings truncated to `n` items (`None` keeps the full ranking).
pub fn map_at_n(results: &[RetrievalResult], judgments: &[RelevanceJudgment], n: Option<usize>) -> MapReport {
    let by_query: BTreeMap<&str, &RelevanceJudgment> = judgments.iter().map(|j| (j.query_id.as_str(), j)).collect();
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut skipped = Vec::new();
    let mut cats: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in results {
        let Some(j) = by_query.get(r.query_id.as_str()) else {
            skipped.push(r.query_id.clone());
            continue;
        };
        let ids = r.ids();
        let cut = n.map_or(ids.len(), |n| n.min(ids.len()));
        let Some(ap) = average_precision(&ids[..cut], &j.relevant_ids) else {
            skipped.push(r.query_id.clone());
            continue;
        };
        total += ap;
        evaluated += 1;
        let e = cats.entry(j.category.clone()).or_default();
        e.0 += ap;
        e.1 += 1;
    }
    MapReport {
        map: if evaluated > 0 { total / evaluated as f64 } else { 0.0 },
        per_category: cats.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
        evaluated,
        skipped,
    }
}

/// Fraction of queries whose ground truth appears within the first `k`.
pub fn recall_at_k(results: &[RetrievalResult], ground_truth: &BTreeMap<String, String>, k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .filter(|r| {
            ground_truth
                .get(&r.query_id)
                .and_then(|gt| r.rank_of(gt))
                .is_some_and(|rank| rank <= k)
        })
        .count();
    hits as f64 / results.len() as f64
}

/// `k` for a recall cutoff given as a fraction of the gallery (`R@1%`).
pub fn k_for_fraction(gallery_size: usize, fraction: f64) -> usize {
    ((fraction * gallery_size as f64).ceil() as usize).max(1)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b) as f64;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSimilarity {
    pub value: f64,
    pub degenerate: bool,
}

/// `(s_gt - min) / (max - min)` over the grid, unclamped. A flat grid gives
/// 1.0 and is flagged.
pub fn normalized_similarity(grid: &[f32], s_gt: f32) -> NormalizedSimilarity {
    let (lo, hi) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v as f64), hi.max(*v as f64)));
    if !(hi > lo) {
        return NormalizedSimilarity { value: 1.0, degenerate: true };
    }
    NormalizedSimilarity {
        value: (s_gt as f64 - lo) / (hi - lo),
        degenerate: false,
    }
}

// ---------------------------------------------------------------------------
// Sensitivity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub m_transforms: usize,
    pub recall_ks: Vec<usize>,
    pub transforms: TransformConfig,
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            m_transforms: 50,
            recall_ks: vec![5, 10, 15],
            transforms: TransformConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub kind: TransformKind,
    pub mean_sensitivity: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub samples: usize,
    /// Transformed copies that came out pixel-identical to the original.
    pub identical_transforms: usize,
    pub degenerate: bool,
}

/// 1-based rank of the original among `[original] + others`; ties are
/// broken uniformly at random.
pub fn rank_with_random_ties(original: f32, others: &[f32], rng: &mut impl Rng) -> usize {
    let greater = others.iter().filter(|s| **s > original).count();
    let ties = others.iter().filter(|s| **s == original).count();
    1 + greater + rng.random_range(0..=ties)
}

/// Sensitivity protocol with a caller-supplied transform: `transform(fg, i)`
/// yields the `i`-th transformed copy.
pub fn sensitivity_eval_with<F>(
    pairs: &[&PairRecord],
    background: &dyn ImageEncoder,
    foreground: &dyn ImageEncoder,
    kind: TransformKind,
    cfg: &SensitivityConfig,
    mut transform: F,
) -> Result<SensitivityReport>
where
    F: FnMut(&ForegroundInstance, usize) -> Result<ForegroundInstance>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7135);
    let mut sens_sum = 0.0;
    let mut sens_n = 0usize;
    let mut hits: BTreeMap<usize, usize> = cfg.recall_ks.iter().map(|k| (*k, 0)).collect();
    let mut identical = 0;
    for pair in pairs {
        let q = embed_background(&pair.background, background)?;
        let e0 = embed_foreground(&pair.foreground, foreground)?;
        let s0 = cosine_similarity(&q, &e0)?;
        let mut others = Vec::with_capacity(cfg.m_transforms);
        for i in 0..cfg.m_transforms {
            let t = transform(&pair.foreground, i)?;
            if t.image == pair.foreground.image {
                identical += 1;
            }
            let et: Embedding = foreground.encode(&t.image)?;
            sens_sum += sensitivity_distance(&e0, &et)? as f64;
            sens_n += 1;
            others.push(cosine_similarity(&q, &et)?);
        }
        let rank = rank_with_random_ties(s0, &others, &mut rng);
        for (k, h) in hits.iter_mut() {
            if rank <= *k {
                *h += 1;
            }
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok(SensitivityReport {
        kind,
        mean_sensitivity: if sens_n > 0 { sens_sum / sens_n as f64 } else { 0.0 },
        recall_at: hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect(),
        samples: pairs.len(),
        identical_transforms: identical,
        degenerate: identical > 0,
    })
}

/// Sensitivity protocol with freshly drawn transforms of one kind.
pub fn sensitivity_eval(
    pairs: &[&PairRecord],
    background: &dyn ImageEncoder,
    foreground: &dyn ImageEncoder,
    pool: &DonorPool,
    kind: TransformKind,
    cfg: &SensitivityConfig,
) -> Result<SensitivityReport> {
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    sensitivity_eval_with(pairs, background, foreground, kind, cfg, |fg, _| {
        let record = draw_record(seeds.random(), pool, Some(kind), &cfg.transforms)?;
        apply_record(fg, pool, &record)
    })
}

// ---------------------------------------------------------------------------
// Placement

pub const NS_THRESHOLDS: [f64; 3] = [0.99, 0.95, 0.9];
pub const IOU_THRESHOLDS: [f64; 3] = [0.9, 0.75, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSample {
    pub pair_id: String,
    pub ns: f64,
    pub ns_degenerate: bool,
    pub iou: f64,
    pub predicted: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub mean_ns: f64,
    pub mean_iou: f64,
    /// Fraction of samples with NS above each threshold, keyed `ns>t`.
    pub ns_above: BTreeMap<String, f64>,
    /// Fraction of samples with IOU above each threshold, keyed `iou>t`.
    pub iou_above: BTreeMap<String, f64>,
    pub degenerate_grids: usize,
    pub samples: Vec<PlacementSample>,
}

/// Location and scale metrics for one scorer against a ground-truth box.
/// The grid uses the ground-truth window size; the scale sweep is centered
/// on the ground-truth box.
pub fn placement_sample(scorer: &dyn WindowScorer, truth: &BoundingBox, aspect: f32, cfg: &PlacementConfig) -> Result<(NormalizedSimilarity, f64, BoundingBox)> {
    let grid = grid_search(scorer, (truth.width, truth.height), cfg.grid_k)?;
    let s_gt = scorer.score(truth)?;
    let ns = normalized_similarity(&grid.scores, s_gt);
    let scale = scale_select(scorer, truth.center(), aspect, cfg)?;
    Ok((ns, iou(&scale.window, truth), scale.window))
}

/// Placement evaluation over pairs: the intact scene is restored from the
/// pair and scored against the pair's own foreground.
pub fn placement_eval(
    pairs: &[&PairRecord],
    background: &dyn ImageEncoder,
    foreground: &dyn ImageEncoder,
    cfg: &PlacementConfig,
) -> Result<PlacementReport> {
    let mut samples = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let truth = pair.background.bbox.ok_or(GalaError::PlacementRequired)?;
        let scene = restore_background(&pair.background, &pair.foreground)?;
        let target = embed_foreground(&pair.foreground, foreground)?;
        let scorer = HoleScorer::new(&scene, &target, background);
        let (ns, iou, predicted) = placement_sample(&scorer, &truth, pair.foreground.aspect_ratio(), cfg)?;
        samples.push(PlacementSample {
            pair_id: pair.pair_id.clone(),
            ns: ns.value,
            ns_degenerate: ns.degenerate,
            iou,
            predicted,
        });
    }
    Ok(summarize_placement(samples))
}

pub fn summarize_placement(samples: Vec<PlacementSample>) -> PlacementReport {
    let n = samples.len().max(1) as f64;
    let frac = |pred: &dyn Fn(&PlacementSample) -> bool| samples.iter().filter(|s| pred(s)).count() as f64 / n;
    PlacementReport {
        mean_ns: samples.iter().map(|s| s.ns).sum::<f64>() / n,
        mean_iou: samples.iter().map(|s| s.iou).sum::<f64>() / n,
        ns_above: NS_THRESHOLDS
            .iter()
            .map(|t| (format!("ns>{t}"), frac(&|s| s.ns > *t)))
            .collect(),
        iou_above: IOU_THRESHOLDS
            .iter()
            .map(|t| (format!("iou>{t}"), frac(&|s| s.iou > *t)))
            .collect(),
        degenerate_grids: samples.iter().filter(|s| s.ns_degenerate).count(),
        samples,
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: BTreeMap<String, f64>,
    pub per_category: BTreeMap<String, BTreeMap<String, f64>>,
    pub per_threshold: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn add_map(&mut self, name: &str, report: &MapReport) {
        self.overall.insert(name.to_string(), report.map);
        for (cat, v) in &report.per_category {
            self.per_category.entry(cat.clone()).or_default().insert(name.to_string(), *v);
        }
        if !report.skipped.is_empty() {
            self.flags.push(format!("{name}: {} queries skipped", report.skipped.len()));
        }
    }

    pub fn add_sensitivity(&mut self, report: &SensitivityReport) {
        let kind = match report.kind {
            TransformKind::Geometry => "geometry",
            TransformKind::Lighting => "lighting",
        };
        self.overall.insert(format!("{kind}_sensitivity"), report.mean_sensitivity);
        for (k, v) in &report.recall_at {
            self.overall.insert(format!("{kind}_R@{k}"), *v);
        }
        if report.degenerate {
            self.flags.push(format!("{kind}: {} identical transforms", report.identical_transforms));
        }
    }

    pub fn add_placement(&mut self, report: &PlacementReport) {
        self.overall.insert("mean_ns".into(), report.mean_ns);
        self.overall.insert("mean_iou".into(), report.mean_iou);
        self.per_threshold.extend(report.ns_above.clone());
        self.per_threshold.extend(report.iou_above.clone());
        if report.degenerate_grids > 0 {
            self.flags.push(format!("placement: {} degenerate grids", report.degenerate_grids));
        }
    }

    /// `section,key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,value\n");
        for (k, v) in &self.overall {
            out.push_str(&format!("overall,{k},{v}\n"));
        }
        for (cat, m) in &self.per_category {
            for (k, v) in m {
                out.push_str(&format!("category:{cat},{k},{v}\n"));
            }
        }
        for (k, v) in &self.per_threshold {
            out.push_str(&format!("threshold,{k},{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ScoredId;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::seq::SliceRandom;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn result(q: &str, ids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            query_id: q.into(),
            ranked: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ScoredId {
                    id: id.to_string(),
                    score: 1.0 - i as f32 * 0.01,
                })
                .collect(),
        }
    }

    #[test]
    fn ap_examples() {
        let ranked = ["a", "x", "b", "y", "z"];
        assert!((average_precision(&ranked, &set(&["a", "b"])).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&ranked, &set(&["a", "x"])), Some(1.0));
        assert_eq!(average_precision(&ranked, &set(&["y"])), Some(0.25));
        assert_eq!(average_precision(&ranked, &set(&[])), None);
    }

    #[test]
    fn map_truncation_and_categories() {
        let results = vec![result("q1", &["a", "x", "b", "y", "z"]), result("q2", &["x", "c"])];
        let judgments = vec![
            RelevanceJudgment {
                query_id: "q1".into(),
                relevant_ids: set(&["a", "b"]),
                category: "cat".into(),
            },
            RelevanceJudgment::own_object("q2", "c", "dog"),
        ];
        let full = map_at_n(&results, &judgments, None);
        assert!((full.per_category["cat"] - 0.833333333).abs() < 1e-6);
        assert_eq!(full.per_category["dog"], 0.5);
        let top1 = map_at_n(&results, &judgments, Some(1));
        assert_eq!(top1.per_category["dog"], 0.0);
        let missing = map_at_n(&[result("q3", &["a"])], &judgments, None);
        assert_eq!(missing.skipped, vec!["q3".to_string()]);
    }

    #[test]
    fn recall_examples() {
        let gt: BTreeMap<String, String> = [("q1".into(), "a".into()), ("q2".into(), "b".into())].into();
        let results = vec![result("q1", &["a", "b", "c"]), result("q2", &["a", "c", "b"])];
        assert_eq!(recall_at_k(&results, &gt, 1), 0.5);
        assert_eq!(recall_at_k(&results, &gt, 2), 0.5);
        assert_eq!(recall_at_k(&results, &gt, 3), 1.0);
        assert_eq!(k_for_fraction(250, 0.01), 3);
        assert_eq!(k_for_fraction(50, 0.01), 1);
    }

    #[test]
    fn random_rankings_recall_matches_k_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let ids: Vec<String> = (0..n).map(|i| format!("o{i}")).collect();
        let mut results = Vec::new();
        let mut gt = BTreeMap::new();
        for q in 0..5000 {
            let mut perm = ids.clone();
            perm.shuffle(&mut rng);
            let refs: Vec<&str> = perm.iter().map(String::as_str).collect();
            results.push(result(&format!("q{q}"), &refs));
            gt.insert(format!("q{q}"), "o0".to_string());
        }
        for k in [1, 5, 10, 20] {
            assert!((recall_at_k(&results, &gt, k) - k as f64 / n as f64).abs() < 0.02);
        }
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(20, 20, 5, 5)), 0.0);
        assert!((iou(&a, &BoundingBox::new(5, 0, 10, 10)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ns_examples() {
        assert_eq!(normalized_similarity(&[0.2, 0.6], 0.6).value, 1.0);
        assert_eq!(normalized_similarity(&[0.2, 0.6], 0.2).value, 0.0);
        assert!((normalized_similarity(&[0.2, 0.6], 0.5).value - 0.75).abs() < 1e-6);
        assert!(normalized_similarity(&[0.2, 0.6], 0.7).value > 1.0);
        let flat = normalized_similarity(&[0.3, 0.3], 0.1);
        assert!(flat.degenerate && flat.value == 1.0);
    }

    #[test]
    fn tie_ranks_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let others = vec![0.5f32; 50];
        let trials = 20000;
        let within5 = (0..trials).filter(|_| rank_with_random_ties(0.5, &others, &mut rng) <= 5).count();
        assert!((within5 as f64 / trials as f64 - 5.0 / 51.0).abs() < 0.01);
        assert_eq!(rank_with_random_ties(0.9, &[0.1, 0.2], &mut rng), 1);
        assert_eq!(rank_with_random_ties(0.0, &[0.1, 0.2], &mut rng), 3);
    }

    #[test]
    fn report_json_and_csv() {
        let mut r = EvalReport::default();
        r.add_map("mAP", &map_at_n(&[result("q", &["a"])], &[RelevanceJudgment::own_object("q", "a", "c")], None));
        r.add_placement(&summarize_placement(vec![PlacementSample {
            pair_id: "p".into(),
            ns: 0.96,
            ns_degenerate: false,
            iou: 0.8,
            predicted: BoundingBox::new(0, 0, 1, 1),
        }]));
        assert_eq!(r.per_threshold["ns>0.99"], 0.0);
        assert_eq!(r.per_threshold["ns>0.95"], 1.0);
        assert_eq!(r.per_threshold["iou>0.75"], 1.0);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert!(v.get("overall").is_some() && v.get("per_category").is_some() && v.get("per_threshold").is_some());
        assert!(r.to_csv().starts_with("section,key,value\n"));
    }

    fn brute_ap(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
        let mut points = Vec::new();
        for r in 1..=ranked.len() {
            if relevant.contains(&ranked[r - 1]) {
                let hits = ranked[..r].iter().filter(|x| relevant.contains(*x)).count();
                points.push(hits as f64 / r as f64);
            }
        }
        points.iter().sum::<f64>() / relevant.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ap_matches_enumeration_and_map_is_monotone(seed in any::<u64>(), len in 1usize..300, rel in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids: Vec<String> = (0..len).map(|i| format!("i{i}")).collect();
            ids.shuffle(&mut rng);
            let relevant: BTreeSet<String> = (0..rel.min(len)).map(|_| format!("i{}", rng.random_range(0..len))).collect();
            let ap = average_precision(&ids, &relevant).unwrap();
            prop_assert!((ap - brute_ap(&ids, &relevant)).abs() < 1e-9);
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let results = vec![result("q", &refs)];
            let j = vec![RelevanceJudgment { query_id: "q".into(), relevant_ids: relevant, category: "c".into() }];
            let mut prev = 0.0;
            for n in [1, 5, 10, 100, len] {
                let m = map_at_n(&results, &j, Some(n)).map;
                prop_assert!(m + 1e-12 >= prev);
                prev = m;
            }
        }

        #[test]
        fn iou_is_symmetric_and_one_only_for_equal(l1 in 0u32..50, t1 in 0u32..50, w1 in 1u32..30, h1 in 1u32..30,
                                                    l2 in 0u32..50, t2 in 0u32..50, w2 in 1u32..30, h2 in 1u32..30) {
            let a = BoundingBox::new(l1, t1, w1, h1);
            let b = BoundingBox::new(l2, t2, w2, h2);
            prop_assert!(iou(&a, &b) == iou(&b, &a));
            prop_assert!((iou(&a, &b) == 1.0) == (a == b));
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        }
    }
}
