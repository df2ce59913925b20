//! Seeded multi-run experiments: the three-variant ablation and the
//! cross-domain comparison.

use std::fmt::Write as _;

use crate::error::Result;
use crate::evaluation::{self, CmcCurve, Scorer};
use crate::network::{init_params, NetConfig, Variant};
use crate::synth::{self, Split, SplitProtocol, SynthSpec};
use crate::trainer::{self, CrossDomainState, TrainConfig};

#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    pub n_test_identities: usize,
    pub seeds: Vec<u64>,
}

impl AblationSetup {
    /// 64 training and 16 test identities at `domain_shift` 0.3.
    pub fn desk(seeds: usize, epochs: usize) -> Self {
        AblationSetup {
            net: NetConfig::desk(),
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            data: SynthSpec {
                n_identities: 80,
                domain_shift: 0.3,
                ..SynthSpec::default()
            },
            n_test_identities: 16,
            seeds: (0..seeds as u64).collect(),
        }
    }

    fn split_for(&self, seed: u64) -> Result<Split> {
        let data = synth::generate(&SynthSpec { seed, ..self.data.clone() })?;
        synth::split(
            &data,
            &SplitProtocol {
                n_test_identities: self.n_test_identities,
                n_val_identities: 0,
                gallery_distractors: 0,
                seed,
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub per_seed_rank1: Vec<f64>,
    pub mean: CmcCurve,
}

impl VariantResult {
    pub fn mean_rank1(&self) -> f64 {
        self.mean.rank(1)
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<VariantResult>,
    pub gallery_size: usize,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("variant    rank-1  rank-5  rank-10\n");
        for r in &self.rows {
            writeln!(
                s,
                "{:<10} {:>6.4}  {:>6.4}  {:>7.4}",
                r.variant.name(),
                r.mean.rank(1),
                r.mean.rank(5),
                r.mean.rank(10)
            )
            .expect("string write");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,rank1,rank5,rank10\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6},{:.6}", r.variant.name(), r.mean.rank(1), r.mean.rank(5), r.mean.rank(10))
                .expect("string write");
        }
        s
    }
}

/// Trains and evaluates one variant for one seed; returns its CMC.
pub fn run_variant(setup: &AblationSetup, variant: Variant, seed: u64) -> Result<CmcCurve> {
    let split = setup.split_for(seed)?;
    let net = setup.net.clone().with_variant(variant);
    let net = if variant == Variant::ClsOnly {
        let mut n = net;
        n.loss.lambda_rnk = 0.0;
        n
    } else {
        net
    };
    let cfg = TrainConfig { seed, ..setup.train.clone() };
    let out = trainer::train_single(&net, init_params(&net, seed)?, &split.train, &cfg, None)?;
    let scores = evaluation::build_single_shot_eval(&split.test, &split.distractors, &net, &out.params, Scorer::for_config(&net), seed)?;
    Ok(evaluation::cmc(&scores))
}

pub fn run_ablation(setup: &AblationSetup, variants: &[Variant]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut curves = Vec::with_capacity(setup.seeds.len());
        for &s in &setup.seeds {
            let c = run_variant(setup, v, s)?;
            log::info!("{} seed {s}: rank-1 {:.4}", v.name(), c.rank(1));
            curves.push(c);
        }
        rows.push(VariantResult {
            variant: v,
            per_seed_rank1: curves.iter().map(|c| c.rank(1)).collect(),
            mean: evaluation::mean_curve(&curves)?,
        });
    }
    Ok(AblationTable {
        gallery_size: rows.first().map_or(0, |r| r.mean.gallery_size),
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct CrossSetup {
    pub net: NetConfig,
    /// Source pre-training.
    pub source_train: TrainConfig,
    /// Target fine-tuning / coupled training.
    pub target_train: TrainConfig,
    pub source: SynthSpec,
    pub target: SynthSpec,
    pub n_target_test: usize,
    pub seeds: Vec<u64>,
    /// Per seed, replace `net.loss.lambda_cts` by the initial ReID to
    /// contrastive loss ratio on the training data.
    pub balance_cts: bool,
}

impl CrossSetup {
    /// 64 source identities; 8 + 8 target identities with shifted cameras.
    pub fn desk(seeds: usize, source_epochs: usize, target_epochs: usize) -> Self {
        let target_cameras = {
            let mut c = SynthSpec::default().cameras;
            c[0].brightness_shift = 0.06;
            c[0].hue_rotation = -0.5;
            c[1].brightness_shift = -0.1;
            c[1].hue_rotation = 0.4;
            c
        };
        CrossSetup {
            net: NetConfig::desk(),
            source_train: TrainConfig {
                epochs: source_epochs,
                ..TrainConfig::default()
            },
            target_train: TrainConfig {
                epochs: target_epochs,
                ..TrainConfig::default()
            },
            source: SynthSpec {
                n_identities: 64,
                domain_shift: 0.0,
                ..SynthSpec::default()
            },
            target: SynthSpec {
                n_identities: 16,
                cameras: target_cameras,
                // Raw-pixel cross-camera rank-1 about 0.36 on 8 identities,
                // the same difficulty band as the ablation data.
                domain_shift: 0.1,
                ..SynthSpec::default()
            },
            n_target_test: 8,
            seeds: (0..seeds as u64).collect(),
            // At weight 1 the contrastive term on trained FC2 responses
            // starts 20x to 5000x above the ReID losses and coupled
            // training collapses.
            balance_cts: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossSeedResult {
    pub seed: u64,
    pub fine_tune_rank1: f64,
    pub cross_rank1: f64,
    pub lambda_cts: f64,
    pub aug_rank1: Option<f64>,
    /// Coupled training with zero contrastive weight reproduced fine-tuning bit for bit.
    pub zero_weight_matches: bool,
}

#[derive(Debug, Clone)]
pub struct CrossReport {
    pub seeds: Vec<CrossSeedResult>,
}

impl CrossReport {
    fn mean(&self, f: impl Fn(&CrossSeedResult) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.seeds.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_fine_tune(&self) -> f64 {
        self.mean(|s| Some(s.fine_tune_rank1)).unwrap_or(0.0)
    }

    pub fn mean_cross(&self) -> f64 {
        self.mean(|s| Some(s.cross_rank1)).unwrap_or(0.0)
    }

    pub fn mean_aug(&self) -> Option<f64> {
        self.mean(|s| s.aug_rank1)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("seed  fine-tune  cross   aug     lambda_cts  zero-weight==fine-tune\n");
        for r in &self.seeds {
            let aug = r.aug_rank1.map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                s,
                "{:<5} {:<10.4} {:<7.4} {:<7} {:<11.3e} {}",
                r.seed, r.fine_tune_rank1, r.cross_rank1, aug, r.lambda_cts, r.zero_weight_matches
            )
            .expect("string write");
        }
        let aug = self.mean_aug().map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(s, "mean  {:<10.4} {:<7.4} {aug}", self.mean_fine_tune(), self.mean_cross()).expect("string write");
        s
    }
}

fn bits(p: &crate::autodiff::ParamStore<f32>) -> Vec<u32> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Per seed: pre-train on the source, then fine-tune, coupled-train (with
/// and without the contrastive term) and optionally merged-data train on
/// the target; every model is scored on the held-out target identities.
pub fn run_cross(setup: &CrossSetup, with_aug: bool) -> Result<CrossReport> {
    let mut out = Vec::with_capacity(setup.seeds.len());
    let net = &setup.net;
    for &seed in &setup.seeds {
        let source = synth::generate(&SynthSpec { seed, ..setup.source.clone() })?;
        let target = synth::generate(&SynthSpec {
            seed: seed.wrapping_add(1000),
            ..setup.target.clone()
        })?;
        let tsplit = synth::split(
            &target,
            &SplitProtocol {
                n_test_identities: setup.n_target_test,
                n_val_identities: 0,
                gallery_distractors: 0,
                seed,
            },
        )?;
        let scfg = TrainConfig { seed, ..setup.source_train.clone() };
        let pre = trainer::train_single(net, init_params(net, seed)?, &source, &scfg, None)?.params;
        let tcfg = TrainConfig { seed, ..setup.target_train.clone() };
        let score = |p: &crate::autodiff::ParamStore<f32>| -> Result<f64> {
            let sm = evaluation::build_single_shot_eval(&tsplit.test, &[], net, p, Scorer::ClsProb, seed)?;
            Ok(evaluation::cmc(&sm).rank(1))
        };

        let fine = trainer::train_single(net, pre.clone(), &tsplit.train, &tcfg, None)?;
        let mut cross_net = net.clone();
        if setup.balance_cts {
            let state = CrossDomainState::from_source(net, pre.clone());
            let (reid, cts) = trainer::initial_loss_scales(&state, &source, &tsplit.train, &tcfg, 64)?;
            if cts > 0.0 {
                cross_net.loss.lambda_cts = reid / cts;
            }
        }
        let cross = trainer::train_cross(
            CrossDomainState::from_source(&cross_net, pre.clone()),
            &source,
            &tsplit.train,
            &tcfg,
            None,
        )?;
        let mut zero = net.clone();
        zero.loss.lambda_cts = 0.0;
        let zero_run = trainer::train_cross(CrossDomainState::from_source(&zero, pre.clone()), &source, &tsplit.train, &tcfg, None)?;
        let aug_rank1 = if with_aug {
            Some(score(&trainer::train_aug(net, pre.clone(), &source, &tsplit.train, &tcfg, None)?.params)?)
        } else {
            None
        };
        let r = CrossSeedResult {
            seed,
            fine_tune_rank1: score(&fine.params)?,
            cross_rank1: score(&cross.params)?,
            lambda_cts: cross_net.loss.lambda_cts,
            aug_rank1,
            zero_weight_matches: bits(&zero_run.params) == bits(&fine.params) && zero_run.history == fine.history,
        };
        log::info!("cross seed {seed}: fine-tune {:.4}, cross {:.4}", r.fine_tune_rank1, r.cross_rank1);
        out.push(r);
    }
    Ok(CrossReport { seeds: out })
}
