//! Joint training of the segmenter against the positive and negative
//! discriminators, plus inference.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, Dataset, Point, TileId};
use crate::error::{Error, Result};
use crate::grid_context::{sample_context, ContextMap, DEFAULT_K};
use crate::losses::{self, LossReport, LossVariant};
use crate::nn::{Adam, Checkpoint, DiscNet, Graph, Network, ParamTensor, Scalar, SegNet, Tensor, Var};
use crate::pseudolabel::{make_pseudo_label, LabelConfig};
use crate::raster::{BinaryMask, PseudoMask, Raster, SoftMask};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "losses.csv";
const IMAGE_CHANNELS: usize = 3;

/// What replaces the context tile before it is composited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    #[default]
    Original,
    Blank,
    Red,
    Noise,
}

impl ContextMode {
    pub const ALL: [ContextMode; 4] = [ContextMode::Original, ContextMode::Blank, ContextMode::Red, ContextMode::Noise];

    pub fn name(self) -> &'static str {
        match self {
            ContextMode::Original => "original",
            ContextMode::Blank => "blank",
            ContextMode::Red => "red",
            ContextMode::Noise => "noise",
        }
    }
}

/// Training signal for the segmenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Adversarial losses plus the capped pseudo-label term.
    #[default]
    Adversarial,
    /// Plain cross entropy against ground-truth masks; a fully supervised reference.
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub label: LabelConfig,
    pub k_contexts: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub context_mode: ContextMode,
    pub loss_variant: LossVariant,
    pub use_d2: bool,
    pub objective: Objective,
    /// First-level width of the segmenter.
    pub seg_width: usize,
    /// First-block width of each discriminator.
    pub disc_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            label: LabelConfig::default(),
            k_contexts: DEFAULT_K,
            batch_size: 8,
            epochs: 30,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            context_mode: ContextMode::Original,
            loss_variant: LossVariant::Nonsaturating,
            use_d2: true,
            objective: Objective::Adversarial,
            seg_width: 16,
            disc_width: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.label.validate()?;
        let positive = [
            ("k_contexts", self.k_contexts),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("seg_width", self.seg_width),
            ("disc_width", self.disc_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T = f32> {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub seg: SegNet<T>,
    pub d1: DiscNet<T>,
    pub d2: DiscNet<T>,
    pub opt_seg: Adam<T>,
    pub opt_d1: Adam<T>,
    pub opt_d2: Adam<T>,
    pub history: Vec<LossReport>,
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = epoch_rng(cfg.seed, 0);
        let seg = SegNet::new(IMAGE_CHANNELS + 1, cfg.seg_width, true, &mut rng);
        let d1 = DiscNet::new(IMAGE_CHANNELS, cfg.disc_width, false, &mut rng);
        let d2 = DiscNet::new(IMAGE_CHANNELS, cfg.disc_width, false, &mut rng);
        let adam = |p: &[ParamTensor<T>]| Adam::new(cfg.lr, cfg.beta1, cfg.beta2, p);
        Self {
            step: 0,
            epoch: 0,
            opt_seg: adam(seg.params()),
            opt_d1: adam(d1.params()),
            opt_d2: adam(d2.params()),
            seg,
            d1,
            d2,
            history: Vec::new(),
        }
    }
}

/// One batch laid out as network tensors (`N x C x H x W`).
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// Image plus pseudo-label channel.
    pub seg_input: Tensor<T>,
    pub image: Tensor<T>,
    pub context: Tensor<T>,
    pub pseudo: Vec<T>,
    pub gt: Option<Vec<T>>,
}

/// One chip ready for batching.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub image: &'a Raster,
    pub pseudo: &'a PseudoMask,
    pub context: &'a Raster,
    pub gt: Option<&'a BinaryMask>,
}

fn mask_values<T: Scalar>(m: &BinaryMask) -> impl Iterator<Item = T> + '_ {
    m.values().iter().map(|&b| if b { T::one() } else { T::zero() })
}

fn planar<T: Scalar>(r: &Raster) -> impl Iterator<Item = T> {
    r.to_planar().into_iter().map(|v| T::from_f32(v).unwrap())
}

impl<T: Scalar> Batch<T> {
    pub fn assemble(items: &[BatchItem<'_>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Contract("empty batch".into()));
        };
        let (h, w) = (first.image.height(), first.image.width());
        let n = items.len();
        let mut seg_input = Vec::with_capacity(n * (IMAGE_CHANNELS + 1) * h * w);
        let mut image = Vec::with_capacity(n * IMAGE_CHANNELS * h * w);
        let mut context = Vec::with_capacity(n * IMAGE_CHANNELS * h * w);
        let mut pseudo = Vec::with_capacity(n * h * w);
        let mut gt = items.iter().all(|it| it.gt.is_some()).then(|| Vec::with_capacity(n * h * w));
        for it in items {
            let ok = |r: &Raster| r.height() == h && r.width() == w && r.channels() == IMAGE_CHANNELS;
            if !ok(it.image) || !ok(it.context) || it.pseudo.height() != h || it.pseudo.width() != w {
                return Err(Error::Contract(format!("batch items must all be {h}x{w}x{IMAGE_CHANNELS} with matching masks")));
            }
            let before = image.len();
            image.extend(planar::<T>(it.image));
            seg_input.extend_from_slice(&image[before..]);
            seg_input.extend(mask_values::<T>(it.pseudo));
            context.extend(planar::<T>(it.context));
            pseudo.extend(mask_values::<T>(it.pseudo));
            if let (Some(g), Some(m)) = (gt.as_mut(), it.gt) {
                g.extend(mask_values::<T>(m));
            }
        }
        Ok(Self {
            seg_input: Tensor::new(vec![n, IMAGE_CHANNELS + 1, h, w], seg_input),
            image: Tensor::new(vec![n, IMAGE_CHANNELS, h, w], image),
            context: Tensor::new(vec![n, IMAGE_CHANNELS, h, w], context),
            pseudo,
            gt,
        })
    }

    pub fn len(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn apply_context_mode<R: Rng + ?Sized>(i_ctx: &Raster, mode: ContextMode, rng: &mut R) -> Raster {
    let (h, w, c) = (i_ctx.height(), i_ctx.width(), i_ctx.channels());
    match mode {
        ContextMode::Original => i_ctx.clone(),
        ContextMode::Blank => Raster::zeros(h, w, c),
        ContextMode::Red => {
            let mut r = Raster::zeros(h, w, c);
            for row in 0..h {
                for col in 0..w {
                    r.set(row, col, 0, 1.0);
                }
            }
            r
        }
        ContextMode::Noise => {
            let normal = Normal::new(0.5f32, 0.25).expect("positive std");
            let data = (0..h * w * c).map(|_| normal.sample(rng).clamp(0.0, 1.0)).collect();
            Raster::new(h, w, c, data).expect("clamped values")
        }
    }
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}

fn probs<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.value(v).data().iter().map(|p| p.to_f64_lossy()).collect()
}

/// One optimizer step of a discriminator on `real` against `fg`/`bg` blended under a fixed mask.
fn disc_phase<T: Scalar>(
    net: &mut DiscNet<T>,
    opt: &mut Adam<T>,
    real: &Tensor<T>,
    fg: &Tensor<T>,
    bg: &Tensor<T>,
    mask: &Tensor<T>,
    step: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let real_v = g.constant(real.clone());
    let fg_v = g.constant(fg.clone());
    let bg_v = g.constant(bg.clone());
    let m = g.constant(mask.clone());
    let fake = g.blend(fg_v, bg_v, m)?;
    let p_real = net.forward(&mut g, &bound, real_v)?;
    let p_fake = net.forward(&mut g, &bound, fake)?;
    let loss = losses::disc_loss_node(&mut g, p_real, p_fake)?;
    let value = losses::loss_disc(&probs(&g, p_real), &probs(&g, p_fake))?;
    let grads = g.backward(loss)?;
    net.accumulate(&grads, &bound);
    opt.step(net.params_mut(), step)?;
    Ok(value)
}

/// Nodes of the segmenter objective built on top of an existing forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegObjective {
    pub total: Var,
    pub adversarial: Option<Var>,
    pub loc: Var,
}

/// Extends `g` (which already holds `y_hat = S(batch)`) with the segmenter
/// loss. Discriminator weights enter as constants.
pub fn seg_objective<T: Scalar>(
    g: &mut Graph<T>,
    y_hat: Var,
    batch: &Batch<T>,
    d1: &DiscNet<T>,
    d2: &DiscNet<T>,
    cfg: &TrainConfig,
) -> Result<SegObjective> {
    if cfg.objective == Objective::Supervised {
        let gt = batch.gt.clone().ok_or_else(|| Error::Config("supervised objective needs ground truth masks".into()))?;
        let bce = g.bce_mean(y_hat, gt, T::from_f64_lossy(losses::PROB_EPS))?;
        return Ok(SegObjective { total: bce, adversarial: None, loc: bce });
    }
    let image = g.constant(batch.image.clone());
    let context = g.constant(batch.context.clone());
    let b1 = d1.bind(g, false);
    let fake_pos = g.blend(image, context, y_hat)?;
    let p1 = d1.forward(g, &b1, fake_pos)?;
    let p2 = if cfg.use_d2 {
        let b2 = d2.bind(g, false);
        let fake_neg = g.blend(context, image, y_hat)?;
        Some(d2.forward(g, &b2, fake_neg)?)
    } else {
        None
    };
    let adv = losses::gen_adv_node(g, p1, p2, cfg.loss_variant)?;
    let loc = losses::loc_loss_node(g, y_hat, batch.pseudo.clone(), cfg.label.rho)?;
    let total = g.add(adv, loc)?;
    Ok(SegObjective { total, adversarial: Some(adv), loc })
}

/// Segmenter loss under the current weights and its gradient for every
/// segmenter parameter, without updating anything.
pub fn seg_loss_and_grads<T: Scalar>(state: &TrainState<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = state.seg.bind(&mut g, true);
    let x = g.constant(batch.seg_input.clone());
    let y = state.seg.forward(&mut g, &bound, x)?;
    let obj = seg_objective(&mut g, y, batch, &state.d1, &state.d2, cfg)?;
    let grads = g.backward(obj.total)?;
    let gs = bound
        .iter()
        .zip(state.seg.params())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
        .collect();
    Ok((scalar_of(&g, obj.total), gs))
}

/// Discriminator updates, then the segmenter update, on one batch.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<LossReport> {
    let step = state.step + 1;
    let mut g = Graph::new();
    let bound = state.seg.bind(&mut g, true);
    let x = g.constant(batch.seg_input.clone());
    let y = state.seg.forward(&mut g, &bound, x)?;

    let (mut l_d1, mut l_d2) = (0.0, 0.0);
    if cfg.objective == Objective::Adversarial {
        let y_fixed = g.value(y).clone();
        l_d1 = disc_phase(&mut state.d1, &mut state.opt_d1, &batch.image, &batch.image, &batch.context, &y_fixed, step)?;
        if cfg.use_d2 {
            l_d2 = disc_phase(&mut state.d2, &mut state.opt_d2, &batch.context, &batch.context, &batch.image, &y_fixed, step)?;
        }
    }

    let obj = seg_objective(&mut g, y, batch, &state.d1, &state.d2, cfg)?;
    let l_g_adv = obj.adversarial.map_or(0.0, |v| scalar_of(&g, v));
    let report = LossReport::new(l_d1, l_d2, l_g_adv, scalar_of(&g, obj.loc));
    if !report.is_finite() {
        return Err(Error::Training { step, msg: format!("non-finite loss {report:?}") });
    }
    let grads = g.backward(obj.total)?;
    state.seg.accumulate(&grads, &bound);
    state.opt_seg.step(state.seg.params_mut(), step)?;
    state.step = step;
    state.history.push(report);
    Ok(report)
}

/// Pseudo labels (and ground truth, when needed) for every positive chip.
struct Prepared<'a> {
    tiles: Vec<TileId>,
    images: Vec<&'a Raster>,
    pseudo: Vec<PseudoMask>,
    gt: Vec<Option<&'a BinaryMask>>,
}

fn prepare<'a>(data: &'a Dataset, map: &ContextMap, cfg: &TrainConfig) -> Result<Prepared<'a>> {
    cfg.validate()?;
    let size = data.index.tile_size;
    let mut p = Prepared { tiles: Vec::new(), images: Vec::new(), pseudo: Vec::new(), gt: Vec::new() };
    for chip in data.index.positives() {
        if !map.entries.contains_key(&chip.tile_id) {
            return Err(Error::Lookup(format!("tile {} has no context entry", chip.tile_id)));
        }
        let gt = data.gt.get(&chip.tile_id);
        if cfg.objective == Objective::Supervised && gt.is_none() {
            return Err(Error::Config(format!("supervised objective needs a ground truth mask for {}", chip.tile_id)));
        }
        p.tiles.push(chip.tile_id);
        p.images.push(data.image(chip.tile_id)?);
        p.pseudo.push(make_pseudo_label(&chip.points, &cfg.label, size, size)?);
        p.gt.push(gt);
    }
    if p.tiles.is_empty() {
        return Err(Error::Config("dataset has no positive chips to train on".into()));
    }
    Ok(p)
}

fn run_epoch(state: &mut TrainState, data: &Dataset, map: &ContextMap, prep: &Prepared<'_>, cfg: &TrainConfig) -> Result<()> {
    let mut rng = epoch_rng(cfg.seed, state.epoch as u64 + 1);
    let mut order: Vec<usize> = (0..prep.tiles.len()).collect();
    order.shuffle(&mut rng);
    for chunk in order.chunks(cfg.batch_size) {
        let mut contexts = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let ctx = data.image(sample_context(map, prep.tiles[i], &mut rng)?)?;
            contexts.push(apply_context_mode(ctx, cfg.context_mode, &mut rng));
        }
        let items: Vec<BatchItem<'_>> = chunk
            .iter()
            .zip(&contexts)
            .map(|(&i, ctx)| BatchItem { image: prep.images[i], pseudo: &prep.pseudo[i], context: ctx, gt: prep.gt[i] })
            .collect();
        let batch = Batch::assemble(&items)?;
        train_step(state, &batch, cfg)?;
    }
    state.epoch += 1;
    Ok(())
}

/// Trains from freshly initialized weights. With `out_dir`, a checkpoint and
/// the loss log are rewritten after every epoch.
pub fn train(data: &Dataset, map: &ContextMap, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainState> {
    continue_training(TrainState::new(cfg), data, map, cfg, out_dir)
}

/// Runs the remaining epochs of `state` up to `cfg.epochs`.
pub fn continue_training(
    mut state: TrainState,
    data: &Dataset,
    map: &ContextMap,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    let prep = prepare(data, map, cfg)?;
    while state.epoch < cfg.epochs {
        let first = state.history.len();
        run_epoch(&mut state, data, map, &prep, cfg)?;
        let recent = &state.history[first..];
        let mean = |f: fn(&LossReport) -> f64| recent.iter().map(f).sum::<f64>() / recent.len().max(1) as f64;
        log::info!(
            "epoch {}/{}: l_d1 {:.4} l_d2 {:.4} l_g_adv {:.4} l_loc {:.4}",
            state.epoch,
            cfg.epochs,
            mean(|r| r.l_d1),
            mean(|r| r.l_d2),
            mean(|r| r.l_g_adv),
            mean(|r| r.l_loc)
        );
        if let Some(dir) = out_dir {
            save_checkpoint(&state, cfg, &dir.join(CHECKPOINT_FILE))?;
            write_loss_log(&state.history, &dir.join(LOSS_LOG_FILE))?;
        }
    }
    Ok(state)
}

/// Loads a checkpoint and trains on to `cfg.epochs`. Architecture and
/// optimizer settings come from the checkpoint.
pub fn resume(data: &Dataset, map: &ContextMap, cfg: &TrainConfig, checkpoint: &Path, out_dir: Option<&Path>) -> Result<TrainState> {
    let (state, saved) = load_checkpoint(checkpoint)?;
    let cfg = TrainConfig { epochs: cfg.epochs, ..saved };
    continue_training(state, data, map, &cfg, out_dir)
}

pub fn write_loss_log(history: &[LossReport], path: &Path) -> Result<()> {
    let mut s = String::from("step,l_d1,l_d2,l_g_adv,l_loc,total_g\n");
    for (i, r) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{},{}", i + 1, r.l_d1, r.l_d2, r.l_g_adv, r.l_loc, r.total_g);
    }
    write_file(path, s.as_bytes())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    step: u64,
    epoch: usize,
    config: TrainConfig,
    adam_steps: [u64; 3],
    history: Vec<LossReport>,
}

const NETS: [&str; 3] = ["s", "d1", "d2"];

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        step: state.step,
        epoch: state.epoch,
        config: cfg.clone(),
        adam_steps: [state.opt_seg.t, state.opt_d1.t, state.opt_d2.t],
        history: state.history.clone(),
    };
    let mut tensors = Vec::new();
    let parts: [(&[ParamTensor<f32>], &Adam<f32>); 3] =
        [(state.seg.params(), &state.opt_seg), (state.d1.params(), &state.opt_d1), (state.d2.params(), &state.opt_d2)];
    for (net, (params, opt)) in NETS.iter().zip(parts) {
        for (i, p) in params.iter().enumerate() {
            tensors.push((format!("{net}/{}", p.name), p.value.clone()));
            tensors.push((format!("{net}.m/{}", p.name), opt.m[i].clone()));
            tensors.push((format!("{net}.v/{}", p.name), opt.v[i].clone()));
        }
    }
    let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    Checkpoint { meta, tensors }.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("{}: metadata: {e}", path.display())))?;
    let cfg = meta.config;
    let mut nets = Vec::new();
    for net in NETS {
        let values = ck.take_prefixed(&format!("{net}/"));
        let m = ck.take_prefixed(&format!("{net}.m/"));
        let v = ck.take_prefixed(&format!("{net}.v/"));
        if m.len() != values.len() || v.len() != values.len() {
            return Err(Error::Checkpoint(format!("optimizer moments for {net} do not match its weights")));
        }
        let params = values.into_iter().map(|(n, t)| ParamTensor::new(n, t)).collect::<Vec<_>>();
        nets.push((params, m.into_iter().map(|x| x.1).collect::<Vec<_>>(), v.into_iter().map(|x| x.1).collect::<Vec<_>>()));
    }
    if !ck.tensors.is_empty() {
        return Err(Error::Checkpoint(format!("unexpected tensor {}", ck.tensors[0].0)));
    }
    let mut it = nets.into_iter();
    let (sp, sm, sv) = it.next().unwrap();
    let (d1p, d1m, d1v) = it.next().unwrap();
    let (d2p, d2m, d2v) = it.next().unwrap();
    let adam = |t: u64, m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>>| Adam { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, t, m, v };
    let state = TrainState {
        step: meta.step,
        epoch: meta.epoch,
        seg: SegNet::from_params(IMAGE_CHANNELS + 1, cfg.seg_width, sp)?,
        d1: DiscNet::from_params(IMAGE_CHANNELS, cfg.disc_width, d1p)?,
        d2: DiscNet::from_params(IMAGE_CHANNELS, cfg.disc_width, d2p)?,
        opt_seg: adam(meta.adam_steps[0], sm, sv),
        opt_d1: adam(meta.adam_steps[1], d1m, d1v),
        opt_d2: adam(meta.adam_steps[2], d2m, d2v),
        history: meta.history,
    };
    Ok((state, cfg))
}

/// Raw segmenter output for one chip; no thresholding.
pub fn predict(seg: &SegNet, image: &Raster, points: &[Point], label: &LabelConfig) -> Result<SoftMask> {
    let (h, w) = (image.height(), image.width());
    if image.channels() != IMAGE_CHANNELS {
        return Err(Error::Contract(format!("expected {IMAGE_CHANNELS}-channel image, got {}", image.channels())));
    }
    let pseudo = make_pseudo_label(points, label, h, w)?;
    let mut x: Vec<f32> = image.to_planar();
    x.extend(mask_values::<f32>(&pseudo));
    let y = seg.predict(Tensor::new(vec![1, IMAGE_CHANNELS + 1, h, w], x))?;
    SoftMask::new(h, w, y.into_data())
}
