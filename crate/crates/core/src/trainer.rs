//! Optimisation loops: single-domain multi-task training, coupled
//! cross-domain training, and the merged-data baseline.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{self, PairLabel};
use crate::network::{ForwardMode, NetConfig, Network, TripletLosses};
use crate::sampling::{self, LabeledImage, Triplet};
use crate::synth;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Single,
    Cross,
    Aug,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Single => "single",
            TrainMode::Cross => "cross",
            TrainMode::Aug => "aug",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TrainMode::Single),
            "cross" => Ok(TrainMode::Cross),
            "aug" => Ok(TrainMode::Aug),
            _ => Err(Error::Config(format!("unknown train mode '{s}' (expected single, cross or aug)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Epoch callback period; 0 disables it.
    pub eval_every: usize,
    pub triplets_per_pair: usize,
    /// Add a mirrored twin of every training image.
    pub mirror: bool,
    /// Draw fresh negatives every epoch instead of once per run.
    pub regenerate_triplets: bool,
    /// Cross-domain only: keep the source network fixed.
    pub freeze_source: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            mode: TrainMode::Single,
            eval_every: 0,
            triplets_per_pair: 10,
            mirror: false,
            regenerate_triplets: false,
            freeze_source: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.triplets_per_pair == 0 {
            return Err(Error::Config("epochs, batch_size and triplets_per_pair must be >= 1".into()));
        }
        Ok(())
    }
}

/// Epoch means of the per-triplet losses; absent terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_trp: Option<f64>,
    pub l_cls: Option<f64>,
    pub l_cts: Option<f64>,
    pub combined: f64,
}

pub const HISTORY_HEADER: &str = "epoch,l_trp,l_cls,l_cts,combined";

pub fn history_csv(history: &[EpochLoss]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for h in history {
        writeln!(s, "{},{},{},{},{:.9}", h.epoch, f(h.l_trp), f(h.l_cls), f(h.l_cts), h.combined).expect("string write");
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochLoss]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// `v ← μv − lr·g; θ ← θ + v`.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    lr: f64,
    momentum: f64,
    velocity: &mut Gradients<f32>,
) -> Result<()> {
    let (lr, mu) = (lr as f32, momentum as f32);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::shape("sgd_step", format!("no gradient for '{name}'")))?;
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| Error::shape("sgd_step", format!("no velocity for '{name}'")))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("'{name}': param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = mu * *v - lr * *g;
            *p += *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub history: Vec<EpochLoss>,
}

/// Called after every `eval_every`-th epoch with the current parameters.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &ParamStore<f32>) -> Result<()>;

#[derive(Default)]
struct Running {
    trp: f64,
    cls: f64,
    cts: f64,
    combined: f64,
    n: usize,
}

impl Running {
    fn finish(&self, epoch: usize, net: &NetConfig, with_cts: bool) -> EpochLoss {
        let n = self.n.max(1) as f64;
        EpochLoss {
            epoch,
            l_trp: net.variant.has_triplet_head().then_some(self.trp / n),
            l_cls: net.variant.has_cls_head().then_some(self.cls / n),
            l_cts: with_cts.then_some(self.cts / n),
            combined: self.combined / n,
        }
    }
}

struct TripletSource {
    data: Vec<LabeledImage>,
    pairs: Vec<(usize, usize)>,
    triplets: Vec<Triplet>,
    k: usize,
    seed: u64,
    regenerate: bool,
}

impl TripletSource {
    fn new(data: &[LabeledImage], cfg: &TrainConfig) -> Result<Self> {
        let data = if cfg.mirror { sampling::mirror_augment(data) } else { data.to_vec() };
        if synth::identities(&data).len() < 2 {
            return Err(Error::Data("training data needs at least 2 identities".into()));
        }
        let pairs = sampling::enumerate_positive_pairs(&data);
        if pairs.is_empty() {
            return Err(Error::Data("training data has no cross-camera positive pairs".into()));
        }
        let triplets = sampling::make_triplets(&pairs, &data, cfg.triplets_per_pair, cfg.seed)?.triplets;
        Ok(TripletSource {
            data,
            pairs,
            triplets,
            k: cfg.triplets_per_pair,
            seed: cfg.seed,
            regenerate: cfg.regenerate_triplets,
        })
    }

    fn refresh(&mut self, epoch: usize) -> Result<()> {
        if self.regenerate && epoch > 0 {
            let seed = self.seed.wrapping_add(epoch as u64);
            self.triplets = sampling::make_triplets(&self.pairs, &self.data, self.k, seed)?.triplets;
        }
        Ok(())
    }

    fn images(&self, t: &Triplet) -> [&Tensor<f32>; 3] {
        [&self.data[t.anchor].image, &self.data[t.positive].image, &self.data[t.negative].image]
    }
}

fn non_finite(net: &Network<f32>, what: &str) -> Error {
    match net.graph().first_non_finite() {
        Some((node, label)) => Error::NonFinite {
            node,
            label: label.to_string(),
        },
        None => Error::Graph(format!("{what} is not finite")),
    }
}

fn check_grads(g: &Gradients<f32>) -> Result<()> {
    for (name, t) in g.iter() {
        if !t.is_finite() {
            return Err(Error::NonFinite {
                node: 0,
                label: format!("gradient of {name}"),
            });
        }
    }
    Ok(())
}

/// One forward/backward of a training triplet; returns the losses.
fn triplet_grads(net: &mut Network<f32>, imgs: [&Tensor<f32>; 3]) -> Result<(TripletLosses, Gradients<f32>)> {
    let l = net.forward_triplet(imgs[0], imgs[1], imgs[2])?;
    if !l.combined.is_finite() {
        return Err(non_finite(net, "training loss"));
    }
    let g = net.graph().backward(net.loss_node().expect("training graph"))?;
    Ok((l, g))
}

fn accumulate(r: &mut Running, l: &TripletLosses) {
    r.trp += l.triplet.unwrap_or(0.0);
    r.cls += l.classification.unwrap_or(0.0);
    r.combined += l.combined;
    r.n += 1;
}

fn hook_due(cfg: &TrainConfig, epoch: usize) -> bool {
    cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0
}

/// Multi-task training on one dataset.
pub fn train_single(
    net_cfg: &NetConfig,
    params: ParamStore<f32>,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    mut hook: Option<EpochHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut src = TripletSource::new(data, cfg)?;
    let mut net = Network::build(net_cfg, ForwardMode::TrainTriplet, params)?;
    let mut velocity = Gradients::zeros_like(net.params());
    let weight_of = |n: usize| net_cfg.loss.reduction.weight(n) as f32;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        src.refresh(epoch)?;
        let mut run = Running::default();
        for batch in sampling::batch_iter(&src.triplets, cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut acc = Gradients::zeros_like(net.params());
            let w = weight_of(batch.len());
            for t in &batch {
                let (l, g) = triplet_grads(&mut net, src.images(t))?;
                accumulate(&mut run, &l);
                acc.add_scaled(&g, w)?;
            }
            check_grads(&acc)?;
            sgd_step(net.params_mut(), &acc, cfg.learning_rate, cfg.momentum, &mut velocity)?;
        }
        let rec = run.finish(epoch, net_cfg, false);
        log::info!("epoch {epoch}: combined {:.5}", rec.combined);
        history.push(rec);
        if let Some(h) = hook.as_mut().filter(|_| hook_due(cfg, epoch)) {
            h(epoch, net.params())?;
        }
    }
    Ok(TrainOutcome {
        params: net.params().clone(),
        history,
    })
}

/// Two networks with independent parameters, both starting from one
/// source-trained parameter set.
#[derive(Debug, Clone)]
pub struct CrossDomainState {
    pub net: NetConfig,
    pub source: ParamStore<f32>,
    pub target: ParamStore<f32>,
}

impl CrossDomainState {
    pub fn from_source(net: &NetConfig, params: ParamStore<f32>) -> Self {
        CrossDomainState {
            net: net.clone(),
            source: params.clone(),
            target: params,
        }
    }
}

/// Contrastive loss between two FC2 responses and its gradients on each.
pub fn contrastive_with_grads(
    fa: &Tensor<f32>,
    fb: &Tensor<f32>,
    y: PairLabel,
    margin: f64,
) -> Result<(f64, Vec<f32>, Vec<f32>)> {
    if fa.shape() != fb.shape() {
        return Err(Error::shape("contrastive", format!("{:?} vs {:?}", fa.shape(), fb.shape())));
    }
    let mut store = ParamStore::new();
    store.insert("a", fa.clone())?;
    store.insert("b", fb.clone())?;
    let mut g = Graph::new(store);
    let (a, b) = (g.param("a")?, g.param("b")?);
    let loss = losses::contrastive_node(&mut g, a, b, y, margin)?;
    g.forward()?;
    let grads = g.backward(loss)?;
    let take = |n: &str| grads.get(n).expect("param gradient").data().to_vec();
    Ok((g.scalar(loss) as f64, take("a"), take("b")))
}

/// Mean per-triplet ReID loss of the target net and mean contrastive loss,
/// both at the initial parameters, over up to `n` coupled draws made the
/// way `train_cross` makes them. Nothing is updated.
///
/// The ratio is a data-driven choice for `lambda_cts`: raw FC2 responses of
/// a trained network can put the contrastive term orders of magnitude
/// above the ReID losses.
pub fn initial_loss_scales(
    state: &CrossDomainState,
    source_data: &[LabeledImage],
    target_data: &[LabeledImage],
    cfg: &TrainConfig,
    n: usize,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let net_cfg = &state.net;
    if !net_cfg.variant.has_cls_head() {
        return Err(Error::Config(format!(
            "contrastive scale needs the classification path; variant {} has none",
            net_cfg.variant.name()
        )));
    }
    let tgt_src = TripletSource::new(target_data, cfg)?;
    let source_cfg = TrainConfig {
        seed: cfg.seed ^ 0x5eed_50c5,
        regenerate_triplets: false,
        ..cfg.clone()
    };
    let src_src = TripletSource::new(source_data, &source_cfg)?;
    let mut tnet = Network::build(net_cfg, ForwardMode::TrainTriplet, state.target.clone())?;
    let mut snet = Network::build(net_cfg, ForwardMode::TrainTriplet, state.source.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(source_cfg.seed.wrapping_add(1));
    let n = n.min(tgt_src.triplets.len()).max(1);
    let (mut reid, mut cts) = (0.0, 0.0);
    for t in tgt_src.triplets.iter().take(n) {
        let s = src_src.triplets[rng.random_range(0..src_src.triplets.len())];
        let label_a = if rng.random_bool(0.5) { PairLabel::Positive } else { PairLabel::Negative };
        let label_b = if rng.random_bool(0.5) { PairLabel::Positive } else { PairLabel::Negative };
        let [a, p, n] = tgt_src.images(t);
        let tl = tnet.forward_triplet(a, p, n)?;
        let [a, p, n] = src_src.images(&s);
        snet.forward_triplet(a, p, n)?;
        let fa = snet.graph().value(snet.handles().fc2[1 - label_a.index()]);
        let fb = tnet.graph().value(tnet.handles().fc2[1 - label_b.index()]);
        let y = losses::xnor_label(label_a, label_b);
        reid += tl.combined;
        cts += losses::contrastive_loss(fa, fb, y, net_cfg.loss.margin)?;
    }
    Ok((reid / n as f64, cts / n as f64))
}

/// Coupled training; returns the target network only.
///
/// Target triplets are visited in exactly the order `train_single` would use
/// on the target data. Each target triplet is paired with a uniformly drawn
/// source triplet, and each side contributes its positive or negative joint
/// pair at random.
pub fn train_cross(
    state: CrossDomainState,
    source_data: &[LabeledImage],
    target_data: &[LabeledImage],
    cfg: &TrainConfig,
    mut hook: Option<EpochHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net_cfg = &state.net;
    if !net_cfg.variant.has_cls_head() {
        return Err(Error::Config(format!(
            "cross-domain training needs the classification path; variant {} has none",
            net_cfg.variant.name()
        )));
    }
    let mut tgt_src = TripletSource::new(target_data, cfg)?;
    let source_cfg = TrainConfig {
        seed: cfg.seed ^ 0x5eed_50c5,
        regenerate_triplets: false,
        ..cfg.clone()
    };
    let src_src = TripletSource::new(source_data, &source_cfg)?;
    let mut tnet = Network::build(net_cfg, ForwardMode::TrainTriplet, state.target)?;
    let mut snet = Network::build(net_cfg, ForwardMode::TrainTriplet, state.source)?;
    let mut tvel = Gradients::zeros_like(tnet.params());
    let mut svel = Gradients::zeros_like(snet.params());
    let lam = net_cfg.loss.lambda_cts;
    let mut pair_rng = ChaCha8Rng::seed_from_u64(source_cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        tgt_src.refresh(epoch)?;
        let mut run = Running::default();
        for batch in sampling::batch_iter(&tgt_src.triplets, cfg.batch_size, cfg.seed, epoch as u64)? {
            let w = net_cfg.loss.reduction.weight(batch.len()) as f32;
            let mut tacc = Gradients::zeros_like(tnet.params());
            let mut sacc = Gradients::zeros_like(snet.params());
            for t in &batch {
                let s = src_src.triplets[pair_rng.random_range(0..src_src.triplets.len())];
                let label_a = if pair_rng.random_bool(0.5) { PairLabel::Positive } else { PairLabel::Negative };
                let label_b = if pair_rng.random_bool(0.5) { PairLabel::Positive } else { PairLabel::Negative };

                let [a, p, n] = tgt_src.images(t);
                let tl = tnet.forward_triplet(a, p, n)?;
                let [a, p, n] = src_src.images(&s);
                let sl = snet.forward_triplet(a, p, n)?;
                if !tl.combined.is_finite() {
                    return Err(non_finite(&tnet, "target loss"));
                }
                if !sl.combined.is_finite() {
                    return Err(non_finite(&snet, "source loss"));
                }
                accumulate(&mut run, &tl);

                let (tloss, sloss) = (tnet.loss_node().expect("loss"), snet.loss_node().expect("loss"));
                if lam == 0.0 {
                    tacc.add_scaled(&tnet.graph().backward(tloss)?, w)?;
                    if !cfg.freeze_source {
                        sacc.add_scaled(&snet.graph().backward(sloss)?, w)?;
                    }
                    continue;
                }
                // Positive joint pair is index 0, negative index 1.
                let fa_node = snet.handles().fc2[1 - label_a.index()];
                let fb_node = tnet.handles().fc2[1 - label_b.index()];
                let y = losses::xnor_label(label_a, label_b);
                let (lc, ga, gb) = contrastive_with_grads(
                    snet.graph().value(fa_node),
                    tnet.graph().value(fb_node),
                    y,
                    net_cfg.loss.margin,
                )?;
                if !lc.is_finite() {
                    return Err(Error::NonFinite {
                        node: fb_node,
                        label: "contrastive loss".into(),
                    });
                }
                run.cts += lc;
                run.combined += lam * lc;
                let scale = |g: Vec<f32>| g.into_iter().map(|v| v * lam as f32).collect::<Vec<_>>();
                let tg = tnet.graph().backward_seeded(&[(tloss, vec![1.0]), (fb_node, scale(gb))])?;
                tacc.add_scaled(&tg, w)?;
                if !cfg.freeze_source {
                    let sg = snet.graph().backward_seeded(&[(sloss, vec![1.0]), (fa_node, scale(ga))])?;
                    sacc.add_scaled(&sg, w)?;
                }
            }
            check_grads(&tacc)?;
            sgd_step(tnet.params_mut(), &tacc, cfg.learning_rate, cfg.momentum, &mut tvel)?;
            if !cfg.freeze_source {
                check_grads(&sacc)?;
                sgd_step(snet.params_mut(), &sacc, cfg.learning_rate, cfg.momentum, &mut svel)?;
            }
        }
        let rec = run.finish(epoch, net_cfg, lam != 0.0);
        log::info!("epoch {epoch}: combined {:.5}", rec.combined);
        history.push(rec);
        if let Some(h) = hook.as_mut().filter(|_| hook_due(cfg, epoch)) {
            h(epoch, tnet.params())?;
        }
    }
    Ok(TrainOutcome {
        params: tnet.params().clone(),
        history,
    })
}

/// Source images (ids offset past the target's) merged into the target set.
pub fn merge_for_aug(source: &[LabeledImage], target: &[LabeledImage]) -> Vec<LabeledImage> {
    let offset = target.iter().map(|d| d.person_id + 1).max().unwrap_or(0);
    let mut merged = target.to_vec();
    merged.extend(synth::offset_ids(source, offset));
    merged
}

/// `train_single` on the merged source + target set.
pub fn train_aug(
    net_cfg: &NetConfig,
    params: ParamStore<f32>,
    source: &[LabeledImage],
    target: &[LabeledImage],
    cfg: &TrainConfig,
    hook: Option<EpochHook>,
) -> Result<TrainOutcome> {
    train_single(net_cfg, params, &merge_for_aug(source, target), cfg, hook)
}

#[cfg(test)]
mod tests;
