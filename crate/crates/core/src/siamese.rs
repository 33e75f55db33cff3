//! Two-branch model: online encoder `f1`, projector `g1`, predictor `p` and
//! classifier `fc`, plus a target encoder `f2` and projector `g2` that only
//! move by the momentum rule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::archive::Archive;
use crate::config::parse_key_values;
use crate::data::{Normalization, Preprocess};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, softmax, BatchNorm, BnCache, Buffer, Conv2d,
    Linear, Mode, Param, Parameterized,
};
use crate::rng::{domain, stream};
use crate::tensor::Tensor;

/// Width of the hidden layer in projector and predictor heads.
pub const HEAD_HIDDEN: usize = 512;
pub const DEFAULT_PROJECTION: usize = 128;

/// Registered representation extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// Four stride-2 conv blocks, 16/32/64/128 channels, 128-D output.
    Cnn4,
    /// Four stride-2 conv blocks, 8/16/32/32 channels, for fast smoke runs.
    Tiny,
}

impl Backbone {
    pub const ALL: [Backbone; 2] = [Backbone::Cnn4, Backbone::Tiny];

    pub fn channels(self) -> [usize; 4] {
        match self {
            Backbone::Cnn4 => [16, 32, 64, 128],
            Backbone::Tiny => [8, 16, 32, 32],
        }
    }

    pub fn out_dim(self) -> usize {
        self.channels()[3]
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Cnn4 => "cnn4",
            Backbone::Tiny => "tiny",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone {s:?} (registered: cnn4, tiny)")))
    }
}

/// Strided conv → batch norm → ReLU blocks followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    backbone: Backbone,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Tensor,
    norms: Vec<BnCache>,
    acts: Vec<Tensor>,
}

impl Encoder {
    pub fn new(backbone: Backbone, name: &str, rng: &mut crate::rng::Rng) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in backbone.channels().iter().enumerate() {
            convs.push(Conv2d::new(&format!("{name}.conv{i}"), in_ch, ch, 2, rng));
            norms.push(BatchNorm::new(&format!("{name}.bn{i}"), ch));
            in_ch = ch;
        }
        Encoder { backbone, convs, norms }
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn out_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, EncoderCache)> {
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.convs.len());
        let mut caches = Vec::with_capacity(self.convs.len());
        for (conv, norm) in self.convs.iter().zip(self.norms.iter_mut()) {
            let y = conv.forward(acts.last().unwrap_or(x))?;
            let (z, c) = norm.forward(&y, mode)?;
            caches.push(c);
            acts.push(relu(&z));
        }
        let h = global_avg_pool(acts.last().expect("encoder has blocks"));
        Ok((
            h,
            EncoderCache {
                input: x.clone(),
                norms: caches,
                acts,
            },
        ))
    }

    /// Evaluation-mode forward pass without caches.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            a = relu(&norm.infer(&conv.forward(&a)?)?);
        }
        Ok(global_avg_pool(&a))
    }

    /// Accumulates parameter gradients for `dL/dh`.
    pub fn backward(&mut self, cache: &EncoderCache, dh: &Tensor) {
        let last = cache.acts.last().expect("encoder has blocks").shape();
        let mut d = global_avg_pool_backward(dh, last[2], last[3]);
        for i in (0..self.convs.len()).rev() {
            let dz = relu_backward(&cache.acts[i], &d);
            let dy = self.norms[i].backward(&cache.norms[i], &dz);
            let input = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
            if let Some(dx) = self.convs[i].backward(input, &dy, i > 0) {
                d = dx;
            }
        }
    }
}

impl Parameterized for Encoder {
    fn params(&self) -> Vec<&Param> {
        self.convs
            .iter()
            .zip(&self.norms)
            .flat_map(|(c, n)| c.params().into_iter().chain(n.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs
            .iter_mut()
            .zip(self.norms.iter_mut())
            .flat_map(|(c, n)| c.params_mut().into_iter().chain(n.params_mut()))
            .collect()
    }

    fn buffers(&self) -> Vec<&Buffer> {
        self.norms.iter().flat_map(|n| n.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.norms.iter_mut().flat_map(|n| n.buffers_mut()).collect()
    }
}

/// Linear → batch norm → ReLU → linear.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    l1: Linear,
    bn: BatchNorm,
    l2: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    x: Tensor,
    bn: BnCache,
    a: Tensor,
}

impl ProjectionHead {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut crate::rng::Rng) -> Self {
        ProjectionHead {
            l1: Linear::new(&format!("{name}.l1"), d_in, HEAD_HIDDEN, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), HEAD_HIDDEN),
            l2: Linear::new(&format!("{name}.l2"), HEAD_HIDDEN, d_out, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, HeadCache)> {
        let (z, bn) = self.bn.forward(&self.l1.forward(x)?, mode)?;
        let a = relu(&z);
        let y = self.l2.forward(&a)?;
        Ok((y, HeadCache { x: x.clone(), bn, a }))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&relu(&self.bn.infer(&self.l1.forward(x)?)?))
    }

    pub fn backward(&mut self, cache: &HeadCache, dy: &Tensor) -> Tensor {
        let da = self.l2.backward(&cache.a, dy);
        let dz = relu_backward(&cache.a, &da);
        let dh = self.bn.backward(&cache.bn, &dz);
        self.l1.backward(&cache.x, &dh)
    }
}

impl Parameterized for ProjectionHead {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.l1.params();
        v.extend(self.bn.params());
        v.extend(self.l2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.bn.params_mut());
        v.extend(self.l2.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Buffer> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.bn.buffers_mut()
    }
}

/// The online predictor. `Identity` is a test hook that makes the online and
/// target paths directly comparable.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Mlp(ProjectionHead),
    Identity,
}

impl Predictor {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<HeadCache>)> {
        match self {
            Predictor::Mlp(h) => h.forward(x, mode).map(|(y, c)| (y, Some(c))),
            Predictor::Identity => Ok((x.clone(), None)),
        }
    }

    fn backward(&mut self, cache: Option<&HeadCache>, dy: &Tensor) -> Tensor {
        match (self, cache) {
            (Predictor::Mlp(h), Some(c)) => h.backward(c, dy),
            _ => dy.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Predictor::Mlp(_) => "mlp",
            Predictor::Identity => "identity",
        }
    }
}

impl Parameterized for Predictor {
    fn params(&self) -> Vec<&Param> {
        match self {
            Predictor::Mlp(h) => h.params(),
            Predictor::Identity => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Predictor::Mlp(h) => h.params_mut(),
            Predictor::Identity => Vec::new(),
        }
    }

    fn buffers(&self) -> Vec<&Buffer> {
        match self {
            Predictor::Mlp(h) => h.buffers(),
            Predictor::Identity => Vec::new(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        match self {
            Predictor::Mlp(h) => h.buffers_mut(),
            Predictor::Identity => Vec::new(),
        }
    }
}

/// Bounds that keep a decoded spec from requesting absurd allocations.
pub const MAX_CLASSES: usize = 1 << 16;
pub const MAX_PROJECTION: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub classes: usize,
    pub projection_size: usize,
}

impl ModelSpec {
    pub fn new(backbone: Backbone, classes: usize) -> Self {
        ModelSpec {
            backbone,
            classes,
            projection_size: DEFAULT_PROJECTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "at most {MAX_CLASSES} classes, got {}",
                self.classes
            )));
        }
        if self.projection_size == 0 || self.projection_size > MAX_PROJECTION {
            return Err(Error::Config(format!(
                "projection size must lie in 1..={MAX_PROJECTION}, got {}",
                self.projection_size
            )));
        }
        Ok(())
    }

    fn to_text(self, predictor: &str) -> String {
        format!(
            "backbone={}\nclasses={}\nprojection_size={}\npredictor={predictor}\n",
            self.backbone, self.classes, self.projection_size
        )
    }

    fn from_text(text: &str) -> Result<(Self, String)> {
        let kv = parse_key_values(text).map_err(|e| Error::Format(format!("model spec: {e}")))?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("model spec is missing {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("model spec {k:?} is not an integer")))
        };
        let spec = ModelSpec {
            backbone: get("backbone")?
                .parse()
                .map_err(|e: Error| Error::Format(e.to_string()))?,
            classes: num("classes")?,
            projection_size: num("projection_size")?,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok((spec, kv.get("predictor").cloned().unwrap_or_else(|| "mlp".into())))
    }
}

/// Per-view activations of the online path, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ViewPass {
    enc: EncoderCache,
    h: Tensor,
    logits: Tensor,
    sr: Option<SrPass>,
}

#[derive(Debug, Clone)]
struct SrPass {
    g: HeadCache,
    p: Option<HeadCache>,
    pz1: Tensor,
    z2: Tensor,
}

impl ViewPass {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Online prediction `p(g1(f1(v)))`, if the similarity path ran.
    pub fn pz1(&self) -> Option<&Tensor> {
        self.sr.as_ref().map(|s| &s.pz1)
    }

    /// Target projection of the other view; carries no gradient link.
    pub fn z2(&self) -> Option<&Tensor> {
        self.sr.as_ref().map(|s| &s.z2)
    }
}

/// Upstream gradients for one view. `None` skips that branch entirely.
#[derive(Debug, Clone, Default)]
pub struct ViewGrad {
    pub logits: Option<Tensor>,
    pub pz1: Option<Tensor>,
}

/// Named outputs of one two-view training forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub ce_view1: Tensor,
    pub ce_view2: Tensor,
    pub pz1_1: Tensor,
    pub z2_1: Tensor,
    pub pz1_2: Tensor,
    pub z2_2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrModel {
    pub spec: ModelSpec,
    pub f1: Encoder,
    pub f2: Encoder,
    pub g1: ProjectionHead,
    pub g2: ProjectionHead,
    pub p: Predictor,
    pub fc: Linear,
}

/// Copies parameter values and buffers between identically shaped modules.
pub fn copy_state(dst: &mut impl Parameterized, src: &impl Parameterized) {
    for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
        d.value.copy_from_slice(&s.value);
    }
    for (d, s) in dst.buffers_mut().into_iter().zip(src.buffers()) {
        d.value.copy_from_slice(&s.value);
    }
}

/// `target := (1 − beta)·online + beta·target` per parameter; buffers copied.
pub fn ema_update(target: &mut impl Parameterized, online: &impl Parameterized, beta: f64) {
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        for (tv, &ov) in t.value.iter_mut().zip(&o.value) {
            *tv = (1.0 - beta) * ov + beta * *tv;
        }
    }
    for (t, o) in target.buffers_mut().into_iter().zip(online.buffers()) {
        t.value.copy_from_slice(&o.value);
    }
}

/// Builds a model with target branches copied from the online ones. Each
/// component draws from its own seeded stream, so `f1` and `fc` do not depend
/// on the projection size.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<SrModel> {
    spec.validate()?;
    let d = spec.backbone.out_dim();
    let q = spec.projection_size;
    let f1 = Encoder::new(spec.backbone, "f1", &mut stream(seed, domain::INIT, 0, 0));
    let g1 = ProjectionHead::new("g1", d, q, &mut stream(seed, domain::INIT, 1, 0));
    let p = Predictor::Mlp(ProjectionHead::new("p", q, q, &mut stream(seed, domain::INIT, 2, 0)));
    let fc = Linear::new("fc", d, spec.classes, &mut stream(seed, domain::INIT, 3, 0));
    let mut f2 = Encoder::new(spec.backbone, "f2", &mut stream(seed, domain::INIT, 4, 0));
    let mut g2 = ProjectionHead::new("g2", d, q, &mut stream(seed, domain::INIT, 5, 0));
    copy_state(&mut f2, &f1);
    copy_state(&mut g2, &g1);
    Ok(SrModel {
        spec,
        f1,
        f2,
        g1,
        g2,
        p,
        fc,
    })
}

fn write_component(ar: &mut Archive, c: &impl Parameterized) {
    for p in c.params() {
        ar.insert_array(p.name.clone(), &p.shape, &p.value);
    }
    for b in c.buffers() {
        ar.insert_array(b.name.clone(), &b.shape, &b.value);
    }
}

fn read_component(ar: &Archive, c: &mut impl Parameterized) -> Result<()> {
    let check = |name: &str, shape: &[usize]| -> Result<&[f64]> {
        let (s, data) = ar.array(name)?;
        if s != shape {
            return Err(Error::Format(format!(
                "entry {name:?} has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(data)
    };
    for p in c.params_mut() {
        let data = check(&p.name, &p.shape)?;
        p.value.copy_from_slice(data);
    }
    for b in c.buffers_mut() {
        let data = check(&b.name, &b.shape)?;
        b.value.copy_from_slice(data);
    }
    Ok(())
}

impl SrModel {
    pub fn with_identity_predictor(mut self) -> Self {
        self.p = Predictor::Identity;
        self
    }

    pub fn zero_grad(&mut self) {
        self.f1.zero_grad();
        self.f2.zero_grad();
        self.g1.zero_grad();
        self.g2.zero_grad();
        self.p.zero_grad();
        self.fc.zero_grad();
    }

    /// Runs the online path on each view. With `with_sr` (exactly two views),
    /// also runs `g1`, `p` and the target branch on the opposite view.
    pub fn forward_views(&mut self, views: &[&Tensor], with_sr: bool) -> Result<Vec<ViewPass>> {
        self.forward_views_in(views, with_sr, Mode::Train)
    }

    /// As [`SrModel::forward_views`] with an explicit online normalization
    /// mode. The target branch never updates running statistics.
    pub fn forward_views_in(&mut self, views: &[&Tensor], with_sr: bool, mode: Mode) -> Result<Vec<ViewPass>> {
        let target_mode = if mode == Mode::Eval {
            Mode::Eval
        } else {
            Mode::TrainFrozenStats
        };
        if with_sr && views.len() != 2 {
            return Err(Error::Domain(format!(
                "similarity pass needs two views, got {}",
                views.len()
            )));
        }
        if with_sr && views[0].shape() != views[1].shape() {
            return Err(Error::Domain(format!(
                "view shapes differ: {:?} vs {:?}",
                views[0].shape(),
                views[1].shape()
            )));
        }
        let mut out = Vec::with_capacity(views.len());
        for v in views {
            let (h, enc) = self.f1.forward(v, mode)?;
            let logits = self.fc.forward(&h)?;
            out.push(ViewPass {
                enc,
                h,
                logits,
                sr: None,
            });
        }
        if with_sr {
            for k in 0..2 {
                let (z1, g) = self.g1.forward(&out[k].h, mode)?;
                let (pz1, p) = self.p.forward(&z1, mode)?;
                let (h2, _) = self.f2.forward(views[1 - k], target_mode)?;
                let (z2, _) = self.g2.forward(&h2, target_mode)?;
                out[k].sr = Some(SrPass { g, p, pz1, z2 });
            }
        }
        Ok(out)
    }

    /// The full two-view training forward pass.
    pub fn forward_train(&mut self, v1: &Tensor, v2: &Tensor) -> Result<(BranchOutputs, Vec<ViewPass>)> {
        let pass = self.forward_views(&[v1, v2], true)?;
        let sr = |k: usize| pass[k].sr.as_ref().expect("similarity pass ran");
        let outputs = BranchOutputs {
            ce_view1: softmax(&pass[0].logits),
            ce_view2: softmax(&pass[1].logits),
            pz1_1: sr(0).pz1.clone(),
            z2_1: sr(0).z2.clone(),
            pz1_2: sr(1).pz1.clone(),
            z2_2: sr(1).z2.clone(),
        };
        Ok((outputs, pass))
    }

    /// Accumulates gradients into the online parameters. Target parameters
    /// are never touched.
    pub fn backward(&mut self, pass: &[ViewPass], grads: &[ViewGrad]) {
        for (v, g) in pass.iter().zip(grads) {
            let mut dh = g.logits.as_ref().map(|dl| self.fc.backward(&v.h, dl));
            if let (Some(sr), Some(dpz)) = (&v.sr, &g.pz1) {
                let dz1 = self.p.backward(sr.p.as_ref(), dpz);
                let dhs = self.g1.backward(&sr.g, &dz1);
                dh = Some(match dh {
                    Some(mut d) => {
                        d.add_assign(&dhs);
                        d
                    }
                    None => dhs,
                });
            }
            if let Some(dh) = dh {
                self.f1.backward(&v.enc, &dh);
            }
        }
    }

    pub fn momentum_update(&mut self, beta: f64) {
        ema_update(&mut self.f2, &self.f1, beta);
        ema_update(&mut self.g2, &self.g1, beta);
    }

    /// Online classification path `softmax(fc(f1(x)))` in evaluation mode.
    pub fn eval_probs(&mut self, x: &Tensor) -> Result<Tensor> {
        let (h, _) = self.f1.forward(x, Mode::Eval)?;
        Ok(softmax(&self.fc.forward(&h)?))
    }

    /// Similarity-path embeddings `(p(g1(f1(x))), g2(f2(x)))` in evaluation mode.
    pub fn eval_embeddings(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let z1 = self.g1.infer(&self.f1.infer(x)?)?;
        let pz1 = match &self.p {
            Predictor::Mlp(h) => h.infer(&z1)?,
            Predictor::Identity => z1,
        };
        let z2 = self.g2.infer(&self.f2.infer(x)?)?;
        Ok((pz1, z2))
    }

    pub fn export_inference(&self, preprocess: Preprocess) -> InferenceModel {
        InferenceModel {
            spec: self.spec,
            f1: self.f1.clone(),
            fc: self.fc.clone(),
            preprocess,
        }
    }

    pub fn param_count(&self) -> usize {
        self.f1.param_count()
            + self.f2.param_count()
            + self.g1.param_count()
            + self.g2.param_count()
            + self.p.param_count()
            + self.fc.param_count()
    }

    pub fn write_to(&self, ar: &mut Archive) {
        ar.insert_text("model.spec", self.spec.to_text(self.p.name()));
        write_component(ar, &self.f1);
        write_component(ar, &self.f2);
        write_component(ar, &self.g1);
        write_component(ar, &self.g2);
        write_component(ar, &self.p);
        write_component(ar, &self.fc);
    }

    pub fn read_from(ar: &Archive) -> Result<SrModel> {
        let (spec, predictor) = ModelSpec::from_text(ar.text("model.spec")?)?;
        let mut m = init_model(spec, 0)?;
        match predictor.as_str() {
            "mlp" => {}
            "identity" => m.p = Predictor::Identity,
            other => return Err(Error::Format(format!("unknown predictor {other:?}"))),
        }
        read_component(ar, &mut m.f1)?;
        read_component(ar, &mut m.f2)?;
        read_component(ar, &mut m.g1)?;
        read_component(ar, &mut m.g2)?;
        read_component(ar, &mut m.p)?;
        read_component(ar, &mut m.fc)?;
        Ok(m)
    }
}

/// The deployable classifier: `fc(f1(x))` plus test-path preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub spec: ModelSpec,
    pub f1: Encoder,
    pub fc: Linear,
    pub preprocess: Preprocess,
}

impl InferenceModel {
    pub fn param_count(&self) -> usize {
        self.f1.param_count() + self.fc.param_count()
    }

    /// Class probabilities for a preprocessed `[n, 3, h, w]` batch.
    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.fc.forward(&self.f1.infer(x)?)?))
    }

    /// Preprocesses raw `[0, 1]` images with the test path and returns argmax classes.
    pub fn predict(&self, images: &[&Image], batch: usize) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let pre: Vec<Image> = chunk.iter().map(|i| self.preprocess.test(i)).collect();
            let probs = self.forward_infer(&stack_images(&pre)?)?;
            preds.extend((0..probs.batch()).map(|i| argmax(probs.row(i))));
        }
        Ok(preds)
    }

    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        ar.insert_text("model.spec", self.spec.to_text("none"));
        let n = &self.preprocess.norm;
        ar.insert_text(
            "preprocess",
            format!(
                "size={}\ntest_resize={}\nmean={},{},{}\nstd={},{},{}\n",
                self.preprocess.size,
                self.preprocess.test_resize,
                n.mean[0],
                n.mean[1],
                n.mean[2],
                n.std[0],
                n.std[1],
                n.std[2]
            ),
        );
        write_component(&mut ar, &self.f1);
        write_component(&mut ar, &self.fc);
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let (spec, _) = ModelSpec::from_text(ar.text("model.spec")?)?;
        let full = init_model(spec, 0)?;
        let mut m = full.export_inference(Preprocess::new(1));
        m.preprocess = parse_preprocess(ar.text("preprocess")?)?;
        read_component(ar, &mut m.f1)?;
        read_component(ar, &mut m.fc)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        InferenceModel::from_archive(&Archive::load(path)?)
    }
}

fn parse_preprocess(text: &str) -> Result<Preprocess> {
    let kv = parse_key_values(text).map_err(|e| Error::Format(format!("preprocess metadata: {e}")))?;
    let bad = |k: &str| Error::Format(format!("preprocess metadata has a missing or invalid {k:?}"));
    let size: usize = kv.get("size").and_then(|v| v.parse().ok()).ok_or_else(|| bad("size"))?;
    let test_resize: usize = kv
        .get("test_resize")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("test_resize"))?;
    let triple = |k: &str| -> Result<[f64; 3]> {
        let v: Vec<f64> = kv
            .get(k)
            .ok_or_else(|| bad(k))?
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(k))?;
        v.try_into().map_err(|_| bad(k))
    };
    if size == 0 || test_resize < size {
        return Err(bad("size"));
    }
    let norm = Normalization::new(triple("mean")?, triple("std")?).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Preprocess {
        size,
        test_resize,
        norm,
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stacks equally sized images into a `[n, c, h, w]` tensor.
pub fn stack_images(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Domain("cannot stack an empty image batch".into()))?;
    let rows: Vec<&[f64]> = images.iter().map(|i| i.data()).collect();
    Tensor::stack(&rows, &first.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn spec_sizes_are_bounded() {
        let mut spec = ModelSpec::new(Backbone::Tiny, MAX_CLASSES);
        assert!(spec.validate().is_ok());
        spec.classes += 1;
        assert!(spec.validate().is_err());
        let text = ModelSpec {
            projection_size: MAX_PROJECTION + 1,
            ..ModelSpec::new(Backbone::Tiny, 3)
        }
        .to_text("mlp");
        assert!(ModelSpec::from_text(&text).is_err());
    }

    fn batch(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let data = (0..n * 3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, 3, size, size], data).unwrap()
    }

    fn tiny() -> SrModel {
        init_model(ModelSpec::new(Backbone::Tiny, 3), 7).unwrap()
    }

    #[test]
    fn targets_start_as_copies() {
        let m = tiny();
        let vals = |c: &dyn Fn() -> Vec<Vec<f64>>| c();
        let f1: Vec<_> = vals(&|| m.f1.params().iter().map(|p| p.value.clone()).collect());
        let f2: Vec<_> = vals(&|| m.f2.params().iter().map(|p| p.value.clone()).collect());
        assert_eq!(f1, f2);
        assert_eq!(m.f1.shapes(), m.f2.shapes());
        assert_eq!(m.g1.shapes(), m.g2.shapes());
        assert_eq!(m.g1.out_dim(), DEFAULT_PROJECTION);
        assert!(matches!("resnet50".parse::<Backbone>(), Err(Error::Config(_))));
    }

    #[test]
    fn cnn4_is_about_a_hundred_thousand_parameters() {
        let m = init_model(ModelSpec::new(Backbone::Cnn4, 3), 0).unwrap();
        let n = m.f1.param_count();
        assert!((80_000..130_000).contains(&n), "{n}");
        assert_eq!(m.f1.out_dim(), 128);
    }

    #[test]
    fn infer_matches_eval_forward() {
        let mut m = tiny();
        let x = batch(4, 16, 1);
        // Give the running statistics non-trivial values first.
        m.f1.forward(&x, Mode::Train).unwrap();
        let a = m.eval_probs(&x).unwrap();
        let b = m.export_inference(Preprocess::new(16)).forward_infer(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut enc = Encoder::new(Backbone::Tiny, "e", &mut seeded(3));
        let x = batch(3, 8, 2);
        let w: Vec<f64> = (0..3 * 32).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let loss = |enc: &mut Encoder| -> f64 {
            let (h, _) = enc.forward(&x, Mode::TrainFrozenStats).unwrap();
            h.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = enc.forward(&x, Mode::TrainFrozenStats).unwrap();
        let dh = Tensor::from_vec(&[3, 32], w.clone()).unwrap();
        enc.backward(&cache, &dh);
        for idx in [0usize, 5, 17] {
            for pi in [0usize, 2, 6] {
                let idx = idx % enc.params()[pi].len();
                let analytic = enc.params()[pi].grad[idx];
                let eps = 1e-5;
                let orig = enc.params()[pi].value[idx];
                enc.params_mut()[pi].value[idx] = orig + eps;
                let fp = loss(&mut enc);
                enc.params_mut()[pi].value[idx] = orig - eps;
                let fm = loss(&mut enc);
                enc.params_mut()[pi].value[idx] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-4,
                    "param {pi}[{idx}]: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn backward_leaves_target_gradients_zero() {
        let mut m = tiny();
        let (v1, v2) = (batch(4, 16, 1), batch(4, 16, 2));
        let (out, pass) = m.forward_train(&v1, &v2).unwrap();
        let grads: Vec<ViewGrad> = [&out.pz1_1, &out.pz1_2]
            .iter()
            .zip(&pass)
            .map(|(pz, v)| ViewGrad {
                logits: Some(v.logits().clone()),
                pz1: Some((*pz).clone()),
            })
            .collect();
        m.backward(&pass, &grads);
        assert!(m
            .f2
            .params()
            .iter()
            .chain(m.g2.params().iter())
            .all(|p| p.grad.iter().all(|&g| g == 0.0)));
        assert!(m.f1.params().iter().any(|p| p.grad.iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn swapping_views_swaps_outputs() {
        let (v1, v2) = (batch(4, 16, 1), batch(4, 16, 2));
        let (a, _) = tiny().forward_train(&v1, &v2).unwrap();
        let (b, _) = tiny().forward_train(&v2, &v1).unwrap();
        assert_eq!(a.ce_view1, b.ce_view2);
        assert_eq!(a.pz1_1, b.pz1_2);
        assert_eq!(a.z2_1, b.z2_2);
    }

    #[test]
    fn momentum_rule() {
        let mut m = tiny();
        for p in m.f1.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 1.0);
        }
        for p in m.f2.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        m.momentum_update(0.99);
        assert!(m
            .f2
            .params()
            .iter()
            .all(|p| p.value.iter().all(|&v| (v - 0.01).abs() < 1e-15)));
    }

    #[test]
    fn archives_round_trip() {
        let mut m = tiny();
        m.f1.forward(&batch(2, 16, 4), Mode::Train).unwrap();
        let mut ar = Archive::new();
        m.write_to(&mut ar);
        let back = SrModel::read_from(&Archive::from_bytes(&ar.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        let inf = m.export_inference(Preprocess::new(16));
        let bytes = inf.to_archive().to_bytes();
        assert_eq!(bytes, m.export_inference(Preprocess::new(16)).to_archive().to_bytes());
        assert_eq!(
            InferenceModel::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap(),
            inf
        );
    }
}
