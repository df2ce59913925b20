//! Flat dotted `key = value` configuration files.
//!
//! ```text
//! preset = "desk"
//! net.variant = "full"
//! net.trunk.conv1.channels = 16
//! loss.alpha = 1.0
//! train.epochs = 30
//! ```
//!
//! `preset` selects the base configuration; every other key overrides one
//! field. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use toml::Value;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Reduction};
use crate::network::{ConvStage, NetConfig, PoolSpec, Preset, Variant};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        RunConfig {
            net: NetConfig::preset(p),
            train: TrainConfig::default(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = net_config_to_text(&self.net);
        let t = &self.train;
        let mut w = |k: &str, v: String| writeln!(s, "train.{k} = {v}").expect("string write");
        w("learning_rate", fmt_f64(t.learning_rate));
        w("momentum", fmt_f64(t.momentum));
        w("epochs", t.epochs.to_string());
        w("batch_size", t.batch_size.to_string());
        w("seed", t.seed.to_string());
        w("mode", format!("\"{}\"", t.mode.name()));
        w("eval_every", t.eval_every.to_string());
        w("triplets_per_pair", t.triplets_per_pair.to_string());
        w("mirror", t.mirror.to_string());
        w("regenerate_triplets", t.regenerate_triplets.to_string());
        w("freeze_source", t.freeze_source.to_string());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let preset = match f.take("preset") {
            Some(v) => Preset::parse(as_str("preset", &v)?)?,
            None => Preset::Desk,
        };
        let mut cfg = RunConfig::preset(preset);
        apply_net(&mut f, &mut cfg.net)?;
        apply_train(&mut f, &mut cfg.train)?;
        f.finish()?;
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

/// Network and loss keys only; used as the checkpoint header.
pub fn net_config_to_text(net: &NetConfig) -> String {
    let mut s = String::new();
    let mut w = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
    w("preset", format!("\"{}\"", net.preset.name()));
    w("net.variant", format!("\"{}\"", net.variant.name()));
    w("net.input.channels", net.input_shape[0].to_string());
    w("net.input.height", net.input_shape[1].to_string());
    w("net.input.width", net.input_shape[2].to_string());
    let stages = net
        .trunk
        .iter()
        .zip(["net.trunk.conv1", "net.trunk.conv2"])
        .chain(net.cls_convs.iter().zip(["net.cls.conv3", "net.cls.conv4", "net.cls.conv5"]));
    for (st, prefix) in stages {
        w(&format!("{prefix}.channels"), st.out_channels.to_string());
        w(&format!("{prefix}.kernel"), st.kernel.to_string());
        w(&format!("{prefix}.stride"), st.stride.to_string());
        w(&format!("{prefix}.pad"), st.pad.to_string());
        let (k, ps) = st.pool.map_or((0, 0), |p| (p.k, p.stride));
        w(&format!("{prefix}.pool_k"), k.to_string());
        w(&format!("{prefix}.pool_stride"), ps.to_string());
    }
    w("net.embed_dim", net.embed_dim.to_string());
    w("net.fc.d6", net.fc_dims[0].to_string());
    w("net.fc.d7", net.fc_dims[1].to_string());
    w("net.fc.d8", net.fc_dims[2].to_string());
    let l = &net.loss;
    w("loss.alpha", fmt_f64(l.alpha));
    w("loss.margin", fmt_f64(l.margin));
    w(
        "loss.reduction",
        format!(
            "\"{}\"",
            match l.reduction {
                Reduction::Mean => "mean",
                Reduction::Sum => "sum",
            }
        ),
    );
    w("loss.lambda_rnk", fmt_f64(l.lambda_rnk));
    w("loss.lambda_cls", fmt_f64(l.lambda_cls));
    w("loss.lambda_cts", fmt_f64(l.lambda_cts));
    w("loss.normalize_embeddings", l.normalize_embeddings.to_string());
    s
}

pub fn net_config_from_text(text: &str) -> Result<NetConfig> {
    let mut f = Fields::parse(text)?;
    let preset = match f.take("preset") {
        Some(v) => Preset::parse(as_str("preset", &v)?)?,
        None => Preset::Desk,
    };
    let mut net = NetConfig::preset(preset);
    apply_net(&mut f, &mut net)?;
    f.finish()?;
    net.validate()?;
    Ok(net)
}

/// Debug formatting of f64 is the shortest exact round-trip form; a
/// trailing `.0` keeps integral values typed as floats.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E', 'n', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

struct Fields(IndexMap<String, Value>);

fn flatten(prefix: &str, table: &toml::Table, out: &mut IndexMap<String, Value>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            v => {
                out.insert(key, v.clone());
            }
        }
    }
    Ok(())
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Config(format!("{key}: expected a string, got {v}")))
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut map = IndexMap::new();
        flatten("", &table, &mut map)?;
        Ok(Fields(map))
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.0.shift_remove(key)
    }

    fn usize(&mut self, key: &str, dst: &mut usize) -> Result<()> {
        if let Some(v) = self.take(key) {
            *dst = v
                .as_integer()
                .and_then(|i| usize::try_from(i).ok())
                .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer, got {v}")))?;
        }
        Ok(())
    }

    fn u64(&mut self, key: &str, dst: &mut u64) -> Result<()> {
        let mut tmp = *dst as usize;
        self.usize(key, &mut tmp)?;
        *dst = tmp as u64;
        Ok(())
    }

    fn f64(&mut self, key: &str, dst: &mut f64) -> Result<()> {
        if let Some(v) = self.take(key) {
            *dst = match v {
                Value::Float(f) => f,
                Value::Integer(i) => i as f64,
                v => return Err(Error::Config(format!("{key}: expected a number, got {v}"))),
            };
        }
        Ok(())
    }

    fn bool(&mut self, key: &str, dst: &mut bool) -> Result<()> {
        if let Some(v) = self.take(key) {
            *dst = v
                .as_bool()
                .ok_or_else(|| Error::Config(format!("{key}: expected true or false, got {v}")))?;
        }
        Ok(())
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        self.take(key).map(|v| as_str(key, &v).map(str::to_string)).transpose()
    }

    fn stage(&mut self, prefix: &str, st: &mut ConvStage) -> Result<()> {
        self.usize(&format!("{prefix}.channels"), &mut st.out_channels)?;
        self.usize(&format!("{prefix}.kernel"), &mut st.kernel)?;
        self.usize(&format!("{prefix}.stride"), &mut st.stride)?;
        self.usize(&format!("{prefix}.pad"), &mut st.pad)?;
        let (mut k, mut s) = st.pool.map_or((0, 0), |p| (p.k, p.stride));
        self.usize(&format!("{prefix}.pool_k"), &mut k)?;
        self.usize(&format!("{prefix}.pool_stride"), &mut s)?;
        st.pool = (k > 0).then_some(PoolSpec { k, stride: s.max(1) });
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }
}

fn apply_net(f: &mut Fields, net: &mut NetConfig) -> Result<()> {
    if let Some(v) = f.string("net.variant")? {
        net.variant = Variant::parse(&v)?;
    }
    f.usize("net.input.channels", &mut net.input_shape[0])?;
    f.usize("net.input.height", &mut net.input_shape[1])?;
    f.usize("net.input.width", &mut net.input_shape[2])?;
    f.stage("net.trunk.conv1", &mut net.trunk[0])?;
    f.stage("net.trunk.conv2", &mut net.trunk[1])?;
    f.stage("net.cls.conv3", &mut net.cls_convs[0])?;
    f.stage("net.cls.conv4", &mut net.cls_convs[1])?;
    f.stage("net.cls.conv5", &mut net.cls_convs[2])?;
    f.usize("net.embed_dim", &mut net.embed_dim)?;
    f.usize("net.fc.d6", &mut net.fc_dims[0])?;
    f.usize("net.fc.d7", &mut net.fc_dims[1])?;
    f.usize("net.fc.d8", &mut net.fc_dims[2])?;
    apply_loss(f, &mut net.loss)
}

fn apply_loss(f: &mut Fields, l: &mut LossConfig) -> Result<()> {
    f.f64("loss.alpha", &mut l.alpha)?;
    f.f64("loss.margin", &mut l.margin)?;
    if let Some(r) = f.string("loss.reduction")? {
        l.reduction = match r.as_str() {
            "mean" => Reduction::Mean,
            "sum" => Reduction::Sum,
            _ => return Err(Error::Config(format!("loss.reduction: expected mean or sum, got '{r}'"))),
        };
    }
    f.f64("loss.lambda_rnk", &mut l.lambda_rnk)?;
    f.f64("loss.lambda_cls", &mut l.lambda_cls)?;
    f.f64("loss.lambda_cts", &mut l.lambda_cts)?;
    f.bool("loss.normalize_embeddings", &mut l.normalize_embeddings)
}

fn apply_train(f: &mut Fields, t: &mut TrainConfig) -> Result<()> {
    f.f64("train.learning_rate", &mut t.learning_rate)?;
    f.f64("train.momentum", &mut t.momentum)?;
    f.usize("train.epochs", &mut t.epochs)?;
    f.usize("train.batch_size", &mut t.batch_size)?;
    f.u64("train.seed", &mut t.seed)?;
    if let Some(m) = f.string("train.mode")? {
        t.mode = TrainMode::parse(&m)?;
    }
    f.usize("train.eval_every", &mut t.eval_every)?;
    f.usize("train.triplets_per_pair", &mut t.triplets_per_pair)?;
    f.bool("train.mirror", &mut t.mirror)?;
    f.bool("train.regenerate_triplets", &mut t.regenerate_triplets)?;
    f.bool("train.freeze_source", &mut t.freeze_source)
}
