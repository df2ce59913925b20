//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, multiplied by
    /// `max(1, |loss|)`. Entries below it are effectively compared in
    /// absolute terms. Central-difference roundoff grows like
    /// `eps * |loss| / h`, so smaller gradients cannot be resolved to `tol`
    /// relative accuracy anyway.
    pub rel_floor: f64,
    /// Coordinates checked per parameter tensor; `None` checks every entry.
    pub max_coords: Option<usize>,
    /// Random whole-parameter-vector directions checked in addition.
    pub directions: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: 1e-5,
            tol: 1e-4,
            rel_floor: 1e-5,
            max_coords: Some(24),
            directions: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±h probe crossed a ReLU/pool/hinge boundary.
    pub kink_skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub non_finite: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.flagged).map(|p| p.name.as_str()).collect()
    }

    pub fn passed(&self) -> bool {
        self.loss.is_finite() && self.params.iter().all(|p| !p.flagged)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            s.push_str(&format!(
                "{:<28} checked {:>4}  kinks {:>3}  max rel err {:.3e}  max abs err {:.3e}  {}\n",
                p.name,
                p.checked,
                p.kink_skipped,
                p.max_rel_err,
                p.max_abs_err,
                if p.flagged { "FAIL" } else { "ok" }
            ));
        }
        s
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Runs `backward` and compares it against central differences.
pub fn finite_diff_check(graph: &mut Graph<f64>, loss: NodeId, opts: &CheckOptions) -> Result<GradCheckReport> {
    graph.forward()?;
    let analytic = graph.backward(loss)?;
    check_against(graph, loss, &analytic, opts)
}

fn probe(graph: &mut Graph<f64>, loss: NodeId) -> Result<(f64, u64)> {
    graph.forward()?;
    Ok((graph.scalar(loss), graph.kink_signature()))
}

/// Compares a supplied gradient against central differences of `loss`.
pub fn check_against(
    graph: &mut Graph<f64>,
    loss: NodeId,
    analytic: &Gradients<f64>,
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {}", opts.h)));
    }
    let (base_loss, base_sig) = probe(graph, loss)?;
    let scaled = CheckOptions {
        rel_floor: opts.rel_floor * base_loss.abs().max(1.0),
        ..opts.clone()
    };
    let opts = &scaled;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<String> = graph.params().names().map(str::to_string).collect();
    let mut reports = Vec::with_capacity(names.len() + opts.directions);

    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Graph(format!("no analytic gradient for '{name}'")))?
            .data()
            .to_vec();
        let coords = choose_coords(&grad, opts.max_coords, &mut rng);
        let mut rep = ParamReport {
            name: name.clone(),
            checked: 0,
            kink_skipped: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            non_finite: grad.iter().any(|v| !v.is_finite()),
            flagged: false,
        };
        for idx in coords {
            let orig = graph.params().get(name).expect("param").data()[idx];
            set_coord(graph, name, idx, orig + opts.h);
            let (lp, sp) = probe(graph, loss)?;
            set_coord(graph, name, idx, orig - opts.h);
            let (lm, sm) = probe(graph, loss)?;
            set_coord(graph, name, idx, orig);
            if sp != base_sig || sm != base_sig {
                rep.kink_skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.h);
            if !numeric.is_finite() {
                rep.non_finite = true;
                continue;
            }
            rep.checked += 1;
            rep.max_abs_err = rep.max_abs_err.max((grad[idx] - numeric).abs());
            rep.max_rel_err = rep.max_rel_err.max(rel_err(grad[idx], numeric, opts.rel_floor));
        }
        rep.flagged = rep.non_finite || rep.max_rel_err >= opts.tol || (rep.checked == 0 && !grad.is_empty());
        reports.push(rep);
    }

    for d in 0..opts.directions {
        reports.push(direction_check(graph, loss, analytic, &names, base_sig, d, opts, &mut rng)?);
    }
    graph.forward()?;
    Ok(GradCheckReport {
        loss: base_loss,
        tol: opts.tol,
        params: reports,
    })
}

fn set_coord(graph: &mut Graph<f64>, name: &str, idx: usize, v: f64) {
    graph.params_mut().get_mut(name).expect("param").data_mut()[idx] = v;
}

fn choose_coords(grad: &[f64], max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grad.len();
    let Some(max) = max.filter(|&m| m < n) else {
        return (0..n).collect();
    };
    // Largest-magnitude entries first, then a uniform sample of the rest.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let top = (max / 4).max(1);
    let mut picked: Vec<usize> = order[..top].to_vec();
    let rest = &order[top..];
    for i in sample(rng, rest.len(), (max - top).min(rest.len())) {
        picked.push(rest[i]);
    }
    picked.sort_unstable();
    picked
}

#[allow(clippy::too_many_arguments)]
fn direction_check(
    graph: &mut Graph<f64>,
    loss: NodeId,
    analytic: &Gradients<f64>,
    names: &[String],
    base_sig: u64,
    index: usize,
    opts: &CheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ParamReport> {
    let mut dirs: Vec<Vec<f64>> = names
        .iter()
        .map(|n| {
            let len = graph.params().get(n).expect("param").len();
            (0..len).map(|_| StandardNormal.sample(rng)).collect()
        })
        .collect();
    let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    dirs.iter_mut().flatten().for_each(|v| *v /= norm);
    let predicted: f64 = names
        .iter()
        .zip(&dirs)
        .map(|(n, d)| analytic.get(n).expect("grad").data().iter().zip(d).map(|(g, v)| g * v).sum::<f64>())
        .sum();

    let originals: Vec<Vec<f64>> = names
        .iter()
        .map(|n| graph.params().get(n).expect("param").data().to_vec())
        .collect();
    let shift = |graph: &mut Graph<f64>, step: f64| {
        for ((n, d), o) in names.iter().zip(&dirs).zip(&originals) {
            let t = graph.params_mut().get_mut(n).expect("param").data_mut();
            for ((t, d), o) in t.iter_mut().zip(d).zip(o) {
                *t = o + step * d;
            }
        }
    };
    shift(graph, opts.h);
    let (lp, sp) = probe(graph, loss)?;
    shift(graph, -opts.h);
    let (lm, sm) = probe(graph, loss)?;
    shift(graph, 0.0);

    let mut rep = ParamReport {
        name: format!("<direction {index}>"),
        checked: 0,
        kink_skipped: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        non_finite: !predicted.is_finite(),
        flagged: false,
    };
    if sp != base_sig || sm != base_sig {
        rep.kink_skipped = 1;
    } else {
        let numeric = (lp - lm) / (2.0 * opts.h);
        rep.checked = 1;
        rep.non_finite |= !numeric.is_finite();
        rep.max_abs_err = (predicted - numeric).abs();
        rep.max_rel_err = rel_err(predicted, numeric, opts.rel_floor);
    }
    rep.flagged = rep.non_finite || rep.max_rel_err >= opts.tol;
    Ok(rep)
}
