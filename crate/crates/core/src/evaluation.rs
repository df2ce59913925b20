//! Single-shot CMC evaluation and the threshold-vs-ranking case study.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::network::{ForwardMode, NetConfig, Network};
use crate::sampling::LabeledImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `scores[q][g]`: similarity of query `q` to gallery item `g`.
    pub scores: Vec<Vec<f64>>,
    /// Gallery index of each query's true match.
    pub matches: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<Vec<f64>>, matches: Vec<usize>) -> Result<Self> {
        if scores.is_empty() || scores.len() != matches.len() {
            return Err(Error::InvalidArgument(format!(
                "{} score rows for {} matches",
                scores.len(),
                matches.len()
            )));
        }
        let g = scores[0].len();
        for (q, (row, &m)) in scores.iter().zip(&matches).enumerate() {
            if row.len() != g || m >= g {
                return Err(Error::InvalidArgument(format!("query {q}: row length {} / match {m}, gallery {g}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("query {q} has a non-finite score")));
            }
        }
        Ok(ScoreMatrix { scores, matches })
    }

    pub fn n_queries(&self) -> usize {
        self.scores.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.scores[0].len()
    }

    /// 1-based rank of each query's match; ties count against the match.
    pub fn ranks(&self) -> Vec<usize> {
        self.scores
            .iter()
            .zip(&self.matches)
            .map(|(row, &m)| 1 + row.iter().enumerate().filter(|&(g, &s)| g != m && s >= row[m]).count())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    /// `accuracies[r - 1]` is the rank-r accuracy.
    pub accuracies: Vec<f64>,
    pub n_queries: usize,
    pub gallery_size: usize,
}

pub const CMC_HEADER: &str = "rank,accuracy";

impl CmcCurve {
    pub fn rank(&self, r: usize) -> f64 {
        assert!(r >= 1, "ranks are 1-based");
        self.accuracies[(r - 1).min(self.accuracies.len() - 1)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CMC_HEADER);
        s.push('\n');
        for (i, a) in self.accuracies.iter().enumerate() {
            writeln!(s, "{},{a:.6}", i + 1).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        format!(
            "rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  ({} queries, gallery {})",
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.n_queries,
            self.gallery_size
        )
    }
}

pub fn cmc(scores: &ScoreMatrix) -> CmcCurve {
    let g = scores.gallery_size();
    let mut hist = vec![0usize; g + 1];
    for r in scores.ranks() {
        hist[r] += 1;
    }
    let n = scores.n_queries() as f64;
    let mut acc = Vec::with_capacity(g);
    let mut cum = 0;
    for h in &hist[1..] {
        cum += h;
        acc.push(cum as f64 / n);
    }
    CmcCurve {
        accuracies: acc,
        n_queries: scores.n_queries(),
        gallery_size: g,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    /// Pair-classification similarity probability.
    ClsProb,
    /// Negative Euclidean distance between embeddings.
    NegEuclid,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::ClsProb => "cls_prob",
            Scorer::NegEuclid => "neg_euclid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cls_prob" | "cls-prob" => Ok(Scorer::ClsProb),
            "neg_euclid" | "neg-euclid" => Ok(Scorer::NegEuclid),
            _ => Err(Error::Config(format!("unknown scorer '{s}' (expected cls_prob or neg_euclid)"))),
        }
    }

    /// The scorer a variant is evaluated with.
    pub fn for_config(net: &NetConfig) -> Self {
        if net.variant.has_cls_head() {
            Scorer::ClsProb
        } else {
            Scorer::NegEuclid
        }
    }
}

/// Queries and gallery of a single-shot protocol; gallery entries
/// `0..queries.len()` are the matches in query order.
pub struct SingleShot<'a> {
    pub queries: Vec<&'a LabeledImage>,
    pub gallery: Vec<&'a LabeledImage>,
}

pub fn single_shot_selection<'a>(test: &'a [LabeledImage], distractors: &'a [LabeledImage], seed: u64) -> Result<SingleShot<'a>> {
    let mut by_id: BTreeMap<u32, [Vec<&LabeledImage>; 2]> = BTreeMap::new();
    for d in test {
        by_id.entry(d.person_id).or_default()[d.camera_id as usize - 1].push(d);
    }
    if by_id.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |v: &[&'a LabeledImage]| v[if v.len() > 1 { rng.random_range(0..v.len()) } else { 0 }];
    let mut out = SingleShot {
        queries: Vec::new(),
        gallery: Vec::new(),
    };
    for (id, [c1, c2]) in &by_id {
        if c1.is_empty() || c2.is_empty() {
            return Err(Error::Data(format!("test identity {id} is missing camera {}", if c1.is_empty() { 1 } else { 2 })));
        }
        out.queries.push(pick(c1));
        out.gallery.push(pick(c2));
    }
    let test_ids: Vec<u32> = by_id.keys().copied().collect();
    for d in distractors {
        if test_ids.contains(&d.person_id) {
            return Err(Error::Data(format!("distractor identity {} also has queries", d.person_id)));
        }
        out.gallery.push(d);
    }
    Ok(out)
}

fn neg_dist(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    -a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Scores every query against the single-shot gallery.
pub fn build_single_shot_eval(
    test: &[LabeledImage],
    distractors: &[LabeledImage],
    net_cfg: &NetConfig,
    params: &ParamStore<f32>,
    scorer: Scorer,
    seed: u64,
) -> Result<ScoreMatrix> {
    let sel = single_shot_selection(test, distractors, seed)?;
    let scores = match scorer {
        Scorer::ClsProb => {
            let score_rows = |queries: &[&LabeledImage]| -> Result<Vec<Vec<f64>>> {
                let mut net = Network::build(net_cfg, ForwardMode::TestPair, params.clone())?;
                queries
                    .iter()
                    .map(|q| {
                        sel.gallery
                            .iter()
                            .map(|g| net.forward_similarity(&q.image, &g.image))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect()
            };
            let threads = crate::max_threads().min(sel.queries.len()).max(1);
            if threads == 1 {
                score_rows(&sel.queries)?
            } else {
                // One graph per thread; rows are independent, so the result
                // does not depend on the thread count.
                let chunk = sel.queries.len().div_ceil(threads);
                let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
                    let handles: Vec<_> = sel.queries.chunks(chunk).map(|c| s.spawn(|| score_rows(c))).collect();
                    handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
                });
                let mut rows = Vec::with_capacity(sel.queries.len());
                for p in parts {
                    rows.extend(p?);
                }
                rows
            }
        }
        Scorer::NegEuclid => {
            let mut net = Network::build(net_cfg, ForwardMode::EmbedOnly, params.clone())?;
            let mut embed = |imgs: &[&LabeledImage]| -> Result<Vec<Tensor<f32>>> {
                imgs.iter().map(|d| net.forward_embedding(&d.image)).collect()
            };
            let qe = embed(&sel.queries)?;
            let ge = embed(&sel.gallery)?;
            qe.iter().map(|q| ge.iter().map(|g| neg_dist(q, g)).collect()).collect()
        }
    };
    if let Some(q) = scores.iter().position(|r: &Vec<f64>| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            node: 0,
            label: format!("score row of query {q}"),
        });
    }
    ScoreMatrix::new(scores, (0..sel.queries.len()).collect())
}

/// Mean CMC over several gallery-selection seeds.
pub fn evaluate(
    test: &[LabeledImage],
    distractors: &[LabeledImage],
    net_cfg: &NetConfig,
    params: &ParamStore<f32>,
    scorer: Scorer,
    seeds: &[u64],
) -> Result<CmcCurve> {
    let mut curves = Vec::with_capacity(seeds.len());
    for &s in seeds {
        curves.push(cmc(&build_single_shot_eval(test, distractors, net_cfg, params, scorer, s)?));
    }
    mean_curve(&curves)
}

pub fn mean_curve(curves: &[CmcCurve]) -> Result<CmcCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArgument("no curves to average".into()))?;
    if curves.iter().any(|c| c.accuracies.len() != first.accuracies.len()) {
        return Err(Error::InvalidArgument("curves have different gallery sizes".into()));
    }
    let n = curves.len() as f64;
    Ok(CmcCurve {
        accuracies: (0..first.accuracies.len())
            .map(|i| curves.iter().map(|c| c.accuracies[i]).sum::<f64>() / n)
            .collect(),
        n_queries: first.n_queries,
        gallery_size: first.gallery_size,
    })
}

/// Slope of the logistic classifier `σ(κ(s − t))` in the case study.
pub const CASE_STUDY_KAPPA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    /// Per query: positive-pair score first, then negative-pair scores.
    pub scores: Vec<Vec<f64>>,
    pub rank1: f64,
    pub best_threshold: f64,
    pub min_loss: f64,
    /// Fewest errors any single threshold achieves.
    pub misclassified: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudy {
    pub case1: CaseResult,
    pub case2: CaseResult,
}

impl CaseStudy {
    pub fn holds(&self) -> bool {
        self.case1.rank1 == 1.0 && self.case2.rank1 < 1.0 && self.case2.min_loss < self.case1.min_loss
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in [&self.case1, &self.case2] {
            writeln!(
                s,
                "{}: rank-1 {:.4}  threshold {:.4}  cross-entropy {:.6}  min misclassified {}",
                c.name, c.rank1, c.best_threshold, c.min_loss, c.misclassified
            )
            .expect("string write");
        }
        writeln!(s, "rank-1(case 1) = 1: {}", self.case1.rank1 == 1.0).expect("string write");
        writeln!(s, "rank-1(case 2) < 1: {}", self.case2.rank1 < 1.0).expect("string write");
        writeln!(s, "loss(case 2) < loss(case 1): {}", self.case2.min_loss < self.case1.min_loss).expect("string write");
        s
    }
}

/// Binary cross-entropy of `σ(κ(s − t))` over labelled scores.
pub fn threshold_bce(scores: &[(f64, bool)], t: f64, kappa: f64) -> f64 {
    // -log σ(z) = softplus(-z), computed stably.
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    scores
        .iter()
        .map(|&(s, pos)| {
            let z = kappa * (s - t);
            if pos {
                softplus(-z)
            } else {
                softplus(z)
            }
        })
        .sum()
}

/// Minimises the (convex) threshold loss by ternary search on `[lo, hi]`.
fn best_threshold(scores: &[(f64, bool)], kappa: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (-1.0, 2.0);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if threshold_bce(scores, m1, kappa) <= threshold_bce(scores, m2, kappa) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let t = 0.5 * (lo + hi);
    (t, threshold_bce(scores, t, kappa))
}

fn case(name: &'static str, layout: &[[f64; 3]]) -> Result<CaseResult> {
    // Each query sits at the origin of its own line; similarity = 1 - distance.
    let scores: Vec<Vec<f64>> = layout.iter().map(|d| d.iter().map(|x| 1.0 - x).collect()).collect();
    let sm = ScoreMatrix::new(scores.clone(), vec![0; scores.len()])?;
    let labelled: Vec<(f64, bool)> = scores
        .iter()
        .flat_map(|r| r.iter().enumerate().map(|(i, &s)| (s, i == 0)))
        .collect();
    let (t, loss) = best_threshold(&labelled, CASE_STUDY_KAPPA);
    let errors = |t: f64| labelled.iter().filter(|&&(s, pos)| (s > t) != pos).count();
    let misclassified = labelled
        .iter()
        .map(|&(s, _)| errors(s))
        .chain([errors(f64::NEG_INFINITY)])
        .min()
        .expect("non-empty");
    Ok(CaseResult {
        name,
        scores,
        rank1: cmc(&sm).rank(1),
        best_threshold: t,
        min_loss: loss,
        misclassified,
    })
}

/// Two score layouts over queries A, B, C. In case 1 every positive pair
/// outranks its query's negatives but the classes overlap globally; in case 2
/// one threshold separates all but one pair, and that pair steals query C's
/// rank-1.
pub fn threshold_ranking_case_study() -> Result<CaseStudy> {
    // Distances of (positive, negative, negative) from each query.
    let case1 = [[0.55, 0.70, 0.80], [0.35, 0.40, 0.45], [0.15, 0.20, 0.25]];
    let case2 = [[0.30, 0.70, 0.80], [0.25, 0.60, 0.65], [0.40, 0.38, 0.75]];
    Ok(CaseStudy {
        case1: case("case 1", &case1)?,
        case2: case("case 2", &case2)?,
    })
}
