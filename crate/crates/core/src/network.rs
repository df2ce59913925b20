//! The multi-task network: a shared convolutional trunk feeding a triplet
//! embedding head and a pair-classification head on joint feature maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::gradcheck::{finite_diff_check, CheckOptions, GradCheckReport};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, PairLabel, Reduction};
use crate::tensor::{numel, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub k: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: Option<PoolSpec>,
}

impl ConvStage {
    fn output_shape(&self, name: &str, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        let _ = c;
        if self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("{name}: channels, kernel and stride must be >= 1")));
        }
        if self.kernel > h + 2 * self.pad || self.kernel > w + 2 * self.pad {
            return Err(Error::Config(format!("{name}: kernel {} larger than padded input {h}x{w}", self.kernel)));
        }
        let mut oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let mut ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        if let Some(p) = self.pool {
            if p.k == 0 || p.stride == 0 || p.k > oh || p.k > ow {
                return Err(Error::Config(format!("{name}: pool window {} does not fit {oh}x{ow}", p.k)));
            }
            oh = (oh - p.k) / p.stride + 1;
            ow = (ow - p.k) / p.stride + 1;
        }
        Ok([self.out_channels, oh, ow])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset '{s}' (expected paper or desk)"))),
        }
    }
}

/// Which heads a network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Triplet head on the trunk plus the pair-classification head.
    Full,
    /// Pair-classification head only.
    ClsOnly,
    /// Ranking-only network deepened to the classification path's depth:
    /// five convolutions and three fully connected layers per image.
    RnkOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ClsOnly => "cls-only",
            Variant::RnkOnly => "rnk-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "cls-only" | "cls" => Ok(Variant::ClsOnly),
            "rnk-only" | "rnk" => Ok(Variant::RnkOnly),
            _ => Err(Error::Config(format!("unknown variant '{s}' (expected full, cls-only or rnk-only)"))),
        }
    }

    pub fn has_cls_head(self) -> bool {
        self != Variant::RnkOnly
    }

    pub fn has_triplet_head(self) -> bool {
        self != Variant::ClsOnly
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub input_shape: [usize; 3],
    pub trunk: [ConvStage; 2],
    pub embed_dim: usize,
    /// The first stage consumes the concatenation of two trunk outputs.
    pub cls_convs: [ConvStage; 3],
    /// fc6, fc7 and the 2-way output layer.
    pub fc_dims: [usize; 3],
    pub loss: LossConfig,
}

fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize, pool: Option<(usize, usize)>) -> ConvStage {
    ConvStage {
        out_channels,
        kernel,
        stride,
        pad,
        pool: pool.map(|(k, stride)| PoolSpec { k, stride }),
    }
}

impl NetConfig {
    /// AlexNet-derived geometry: 224×224 input, 256×13×13 trunk output,
    /// 512-dim embedding, 512×3×3 kernels in the first classification conv.
    pub fn paper() -> Self {
        NetConfig {
            preset: Preset::Paper,
            variant: Variant::Full,
            input_shape: [3, 224, 224],
            trunk: [conv(96, 11, 4, 2, Some((3, 2))), conv(256, 5, 1, 2, Some((3, 2)))],
            embed_dim: 512,
            cls_convs: [conv(384, 3, 1, 1, None), conv(384, 3, 1, 1, None), conv(256, 3, 1, 1, Some((3, 2)))],
            fc_dims: [4096, 4096, 2],
            loss: LossConfig::default(),
        }
    }

    /// CPU-scale geometry: 32×32 input, 32×6×6 trunk output, 64-dim embedding.
    pub fn desk() -> Self {
        NetConfig {
            preset: Preset::Desk,
            variant: Variant::Full,
            input_shape: [3, 32, 32],
            trunk: [conv(16, 5, 1, 0, Some((2, 2))), conv(32, 3, 1, 0, Some((2, 2)))],
            embed_dim: 64,
            cls_convs: [conv(48, 3, 1, 1, None), conv(48, 3, 1, 1, None), conv(32, 3, 1, 1, None)],
            fc_dims: [128, 64, 2],
            loss: LossConfig::default(),
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn trunk_output_shape(&self) -> Result<[usize; 3]> {
        let s1 = self.trunk[0].output_shape("trunk.conv1", self.input_shape)?;
        self.trunk[1].output_shape("trunk.conv2", s1)
    }

    pub fn joint_shape(&self) -> Result<[usize; 3]> {
        let t = self.trunk_output_shape()?;
        Ok([2 * t[0], t[1], t[2]])
    }

    /// Input channel count of classification conv `i` (0-based).
    pub fn cls_in_channels(&self, i: usize) -> Result<usize> {
        Ok(if i == 0 { self.joint_shape()?[0] } else { self.cls_convs[i - 1].out_channels })
    }

    fn head_conv_output(&self, first_in: [usize; 3]) -> Result<[usize; 3]> {
        let mut s = first_in;
        for (i, st) in self.cls_convs.iter().enumerate() {
            s = st.output_shape(&format!("conv{}", i + 3), s)?;
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        if self.embed_dim == 0 || self.fc_dims[0] == 0 || self.fc_dims[1] == 0 {
            return Err(Error::Config("embed_dim and fc dims must be >= 1".into()));
        }
        if self.fc_dims[2] != 2 {
            return Err(Error::Config(format!("final fc output must be 2, got {}", self.fc_dims[2])));
        }
        let joint = self.joint_shape()?;
        self.head_conv_output(joint)?;
        self.head_conv_output(self.trunk_output_shape()?)?;
        Ok(())
    }

    /// Every parameter the configured variant owns, in canonical order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut out = Vec::new();
        let push_conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, st: &ConvStage, in_c: usize| {
            out.push((format!("{name}.weight"), vec![st.out_channels, in_c, st.kernel, st.kernel]));
            out.push((format!("{name}.bias"), vec![st.out_channels]));
        };
        let fc = |out: &mut Vec<(String, Vec<usize>)>, name: &str, d_out: usize, d_in: usize| {
            out.push((format!("{name}.weight"), vec![d_out, d_in]));
            out.push((format!("{name}.bias"), vec![d_out]));
        };
        push_conv(&mut out, "trunk.conv1", &self.trunk[0], self.input_shape[0]);
        push_conv(&mut out, "trunk.conv2", &self.trunk[1], self.trunk[0].out_channels);
        let trunk = self.trunk_output_shape()?;
        match self.variant {
            Variant::Full | Variant::ClsOnly => {
                if self.variant == Variant::Full {
                    fc(&mut out, "embed", self.embed_dim, numel(&trunk));
                }
                for i in 0..3 {
                    push_conv(&mut out, &format!("cls.conv{}", i + 3), &self.cls_convs[i], self.cls_in_channels(i)?);
                }
                let flat = numel(&self.head_conv_output(self.joint_shape()?)?);
                fc(&mut out, "cls.fc6", self.fc_dims[0], flat);
                fc(&mut out, "cls.fc7", self.fc_dims[1], self.fc_dims[0]);
                fc(&mut out, "cls.fc8", self.fc_dims[2], self.fc_dims[1]);
            }
            Variant::RnkOnly => {
                for i in 0..3 {
                    let in_c = if i == 0 { trunk[0] } else { self.cls_convs[i - 1].out_channels };
                    push_conv(&mut out, &format!("rnk.conv{}", i + 3), &self.cls_convs[i], in_c);
                }
                let flat = numel(&self.head_conv_output(trunk)?);
                fc(&mut out, "rnk.fc6", self.fc_dims[0], flat);
                fc(&mut out, "rnk.fc7", self.fc_dims[1], self.fc_dims[0]);
                fc(&mut out, "rnk.fc8", self.embed_dim, self.fc_dims[1]);
            }
        }
        Ok(out)
    }
}

/// He-normal weights (std `sqrt(2/fan_in)`), zero biases.
pub fn init_params<T: Real>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in cfg.param_shapes()? {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let data = (0..numel(&shape)).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
            Tensor::new(shape, data)?
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Zeroes the 2-way output layer so every pair scores exactly 0.5.
pub fn zero_final_layer<T: Real>(params: &mut ParamStore<T>) {
    for name in ["cls.fc8.weight", "cls.fc8.bias"] {
        if let Some(t) = params.get_mut(name) {
            t.data_mut().fill(T::zero());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Inputs (A1, A2, B2): triplet + positive/negative pair losses.
    TrainTriplet,
    /// Inputs (I1, I2): classification path only, ending in the similarity probability.
    TestPair,
    /// Input I: the embedding used for Euclidean ranking.
    EmbedOnly,
}

/// Node ids of the interesting points of a built network.
#[derive(Debug, Clone, Default)]
pub struct Handles {
    pub inputs: Vec<NodeId>,
    pub trunk: Vec<NodeId>,
    pub embeddings: Vec<NodeId>,
    /// Joint feature maps: `[positive, negative]` in training, `[pair]` at test.
    pub joint: Vec<NodeId>,
    /// Second fully connected layer responses, parallel to `joint`.
    pub fc2: Vec<NodeId>,
    pub probs: Vec<NodeId>,
    pub triplet: Option<NodeId>,
    /// Classification loss terms, parallel to `joint`.
    pub cls: Vec<NodeId>,
    /// Mean (or sum, per reduction) of the pair classification terms.
    pub cls_total: Option<NodeId>,
    pub loss: Option<NodeId>,
}

/// Loss values of one forward pass in training mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLosses {
    pub triplet: Option<f64>,
    pub classification: Option<f64>,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    cfg: NetConfig,
    mode: ForwardMode,
    graph: Graph<T>,
    handles: Handles,
}

impl<T: Real> Network<T> {
    /// Builds the graph for `mode`. `params` must hold exactly the config's
    /// parameter set (extra parameters from other heads are dropped).
    pub fn build(cfg: &NetConfig, mode: ForwardMode, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        match (cfg.variant, mode) {
            (Variant::RnkOnly, ForwardMode::TestPair) => {
                return Err(Error::Config("rnk-only network has no pair-classification path".into()))
            }
            (Variant::ClsOnly, ForwardMode::EmbedOnly) => {
                return Err(Error::Config("cls-only network has no embedding head".into()))
            }
            _ => {}
        }
        let expected = cfg.param_shapes()?;
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "network",
                    format!("parameter '{name}' has shape {:?}, config expects {shape:?}", t.shape()),
                ));
            }
        }
        let store = if params.len() == expected.len() {
            params
        } else {
            let mut s = ParamStore::new();
            for (name, _) in &expected {
                s.insert(name.clone(), params.get(name).expect("checked above").clone())?;
            }
            s
        };
        let mut b = Builder {
            cfg,
            g: Graph::new(store),
            h: Handles::default(),
        };
        match mode {
            ForwardMode::TrainTriplet => b.train_triplet()?,
            ForwardMode::TestPair => b.test_pair()?,
            ForwardMode::EmbedOnly => b.embed_only()?,
        }
        Ok(Network {
            cfg: cfg.clone(),
            mode,
            graph: b.g,
            handles: b.h,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn handles(&self) -> &Handles {
        &self.handles
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.graph.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.graph.params_mut()
    }

    fn expect_mode(&self, mode: ForwardMode, op: &str) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Graph(format!("{op} needs a {mode:?} network, this one is {:?}", self.mode)));
        }
        Ok(())
    }

    fn run(&mut self, images: &[&Tensor<T>]) -> Result<()> {
        if images.len() != self.handles.inputs.len() {
            return Err(Error::Graph(format!(
                "expected {} images, got {}",
                self.handles.inputs.len(),
                images.len()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            self.graph.set_input(self.handles.inputs[i], img)?;
        }
        self.graph.forward()
    }

    /// Probability that the two images show the same person.
    pub fn forward_similarity(&mut self, img1: &Tensor<T>, img2: &Tensor<T>) -> Result<f64> {
        self.expect_mode(ForwardMode::TestPair, "forward_similarity")?;
        self.run(&[img1, img2])?;
        Ok(self.graph.value(self.handles.probs[0]).data()[PairLabel::Positive.index()].as_f64())
    }

    pub fn forward_embedding(&mut self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_mode(ForwardMode::EmbedOnly, "forward_embedding")?;
        self.run(&[img])?;
        Ok(self.graph.value(self.handles.embeddings[0]).clone())
    }

    /// Second fully connected layer response of the classification path.
    pub fn joint_feature_fc2(&mut self, img1: &Tensor<T>, img2: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_mode(ForwardMode::TestPair, "joint_feature_fc2")?;
        self.run(&[img1, img2])?;
        Ok(self.graph.value(self.handles.fc2[0]).clone())
    }

    /// Forward pass over (A1, A2, B2); returns the per-triplet losses.
    pub fn forward_triplet(&mut self, anchor: &Tensor<T>, positive: &Tensor<T>, negative: &Tensor<T>) -> Result<TripletLosses> {
        self.expect_mode(ForwardMode::TrainTriplet, "forward_triplet")?;
        self.run(&[anchor, positive, negative])?;
        let h = &self.handles;
        let get = |id: Option<NodeId>| id.map(|i| self.graph.scalar(i).as_f64());
        Ok(TripletLosses {
            triplet: get(h.triplet),
            classification: get(h.cls_total),
            combined: self.graph.scalar(h.loss.expect("training graph has a loss")).as_f64(),
        })
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.handles.loss
    }
}

/// Training-mode network for one ablation variant, freshly initialised.
/// `cls-only` also zeroes the ranking weight.
pub fn ablation_build<T: Real>(cfg: &NetConfig, variant: Variant, seed: u64) -> Result<Network<T>> {
    let mut cfg = cfg.clone().with_variant(variant);
    if variant == Variant::ClsOnly {
        cfg.loss.lambda_rnk = 0.0;
    }
    let params = init_params(&cfg, seed)?;
    Network::build(&cfg, ForwardMode::TrainTriplet, params)
}

/// Finite-difference check of the training loss on one random triplet, in
/// f64. Inputs are uniform in [-1, 1). Also returns the loss terms so the
/// caller can confirm the triplet hinge was open.
pub fn gradcheck_network(cfg: &NetConfig, seed: u64, opts: &CheckOptions) -> Result<(GradCheckReport, TripletLosses)> {
    let mut net = Network::<f64>::build(cfg, ForwardMode::TrainTriplet, init_params(cfg, seed)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    let n = numel(&cfg.input_shape);
    let mut image = || Tensor::new(cfg.input_shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (a, p, q) = (image()?, image()?, image()?);
    let terms = net.forward_triplet(&a, &p, &q)?;
    let loss = net.loss_node().ok_or_else(|| Error::Graph("network has no loss node".into()))?;
    Ok((finite_diff_check(net.graph_mut(), loss, opts)?, terms))
}

struct Builder<'a, T> {
    cfg: &'a NetConfig,
    g: Graph<T>,
    h: Handles,
}

impl<T: Real> Builder<'_, T> {
    fn conv_stage(&mut self, x: NodeId, name: &str, st: &ConvStage, tag: &str) -> Result<NodeId> {
        let w = self.g.param(&format!("{name}.weight"))?;
        let b = self.g.param(&format!("{name}.bias"))?;
        let c = self.g.conv2d(x, w, b, st.stride, st.pad, &format!("{name}({tag})"))?;
        let mut y = self.g.relu(c, &format!("{name}.relu({tag})"))?;
        if let Some(p) = st.pool {
            y = self.g.maxpool2d(y, p.k, p.stride, &format!("{name}.pool({tag})"))?;
        }
        Ok(y)
    }

    fn fc(&mut self, x: NodeId, name: &str, relu: bool, tag: &str) -> Result<NodeId> {
        let w = self.g.param(&format!("{name}.weight"))?;
        let b = self.g.param(&format!("{name}.bias"))?;
        let y = self.g.linear(x, w, b, &format!("{name}({tag})"))?;
        if relu {
            self.g.relu(y, &format!("{name}.relu({tag})"))
        } else {
            Ok(y)
        }
    }

    fn image(&mut self, tag: &str) -> Result<NodeId> {
        let id = self.g.input(tag, &self.cfg.input_shape)?;
        self.h.inputs.push(id);
        Ok(id)
    }

    fn trunk(&mut self, x: NodeId, tag: &str) -> Result<NodeId> {
        let t1 = self.conv_stage(x, "trunk.conv1", &self.cfg.trunk[0], tag)?;
        let t2 = self.conv_stage(t1, "trunk.conv2", &self.cfg.trunk[1], tag)?;
        self.h.trunk.push(t2);
        Ok(t2)
    }

    fn maybe_normalize(&mut self, f: NodeId, tag: &str) -> Result<NodeId> {
        if self.cfg.loss.normalize_embeddings {
            self.g.l2_normalize(f, &format!("embed.norm({tag})"))
        } else {
            Ok(f)
        }
    }

    /// Image → embedding along the variant's ranking path.
    fn embedding(&mut self, x: NodeId, tag: &str) -> Result<NodeId> {
        let t = self.trunk(x, tag)?;
        let f = match self.cfg.variant {
            Variant::Full => self.fc(t, "embed", false, tag)?,
            Variant::RnkOnly => {
                let mut y = t;
                for i in 0..3 {
                    let st = self.cfg.cls_convs[i];
                    y = self.conv_stage(y, &format!("rnk.conv{}", i + 3), &st, tag)?;
                }
                let y = self.fc(y, "rnk.fc6", true, tag)?;
                let y = self.fc(y, "rnk.fc7", true, tag)?;
                self.fc(y, "rnk.fc8", false, tag)?
            }
            Variant::ClsOnly => return Err(Error::Config("cls-only network has no embedding head".into())),
        };
        let f = self.maybe_normalize(f, tag)?;
        self.h.embeddings.push(f);
        Ok(f)
    }

    /// Joint feature maps → two-way probabilities; records joint/fc2/probs.
    fn cls_head(&mut self, a: NodeId, b: NodeId, tag: &str) -> Result<NodeId> {
        let mut y = self.g.concat_channels(a, b, &format!("joint({tag})"))?;
        self.h.joint.push(y);
        for i in 0..3 {
            let st = self.cfg.cls_convs[i];
            y = self.conv_stage(y, &format!("cls.conv{}", i + 3), &st, tag)?;
        }
        let y = self.fc(y, "cls.fc6", true, tag)?;
        let fc2 = self.fc(y, "cls.fc7", true, tag)?;
        self.h.fc2.push(fc2);
        let logits = self.fc(fc2, "cls.fc8", false, tag)?;
        let p = self.g.softmax2(logits, &format!("softmax({tag})"))?;
        self.h.probs.push(p);
        Ok(p)
    }

    fn train_triplet(&mut self) -> Result<()> {
        let loss_cfg = self.cfg.loss.clone();
        let xs = [self.image("A1")?, self.image("A2")?, self.image("B2")?];
        let tags = ["A1", "A2", "B2"];
        let mut terms = Vec::new();
        let trunks: Vec<NodeId> = if self.cfg.variant.has_triplet_head() {
            let mut f = Vec::with_capacity(3);
            for (x, tag) in xs.iter().zip(tags) {
                f.push(self.embedding(*x, tag)?);
            }
            let trp = losses::triplet_node(&mut self.g, f[0], f[1], f[2], loss_cfg.alpha)?;
            self.h.triplet = Some(trp);
            terms.push((trp, loss_cfg.lambda_rnk));
            self.h.trunk.clone()
        } else {
            let mut t = Vec::with_capacity(3);
            for (x, tag) in xs.iter().zip(tags) {
                t.push(self.trunk(*x, tag)?);
            }
            t
        };
        if self.cfg.variant.has_cls_head() {
            let p_pos = self.cls_head(trunks[0], trunks[1], "A1,A2")?;
            let p_neg = self.cls_head(trunks[0], trunks[2], "A1,B2")?;
            let l_pos = losses::classification_node(&mut self.g, p_pos, PairLabel::Positive, "cls.loss(A1,A2)")?;
            let l_neg = losses::classification_node(&mut self.g, p_neg, PairLabel::Negative, "cls.loss(A1,B2)")?;
            self.h.cls = vec![l_pos, l_neg];
            let w = match loss_cfg.reduction {
                Reduction::Mean => 0.5,
                Reduction::Sum => 1.0,
            };
            let total = self.g.weighted_sum(&[(l_pos, w), (l_neg, w)], "cls.total")?;
            self.h.cls_total = Some(total);
            terms.push((total, loss_cfg.lambda_cls));
        }
        self.h.loss = Some(self.g.weighted_sum(&terms, "loss")?);
        Ok(())
    }

    fn test_pair(&mut self) -> Result<()> {
        let a = self.image("I1")?;
        let b = self.image("I2")?;
        let ta = self.trunk(a, "I1")?;
        let tb = self.trunk(b, "I2")?;
        self.cls_head(ta, tb, "I1,I2")?;
        Ok(())
    }

    fn embed_only(&mut self) -> Result<()> {
        let x = self.image("I")?;
        self.embedding(x, "I")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
