//! Two-stage training orchestration.
//!
//! Stage one fits the coarse generator with the pose-masked L1 loss. Stage
//! two freezes it and alternates discriminator and refinement-generator
//! updates (one D step then one G step per iteration by default). The
//! one-stage baseline trains the coarse generator adversarially instead.
//!
//! Everything random is a pure function of `(seed, iteration)`: weight
//! init, epoch shuffles and flip decisions derive named sub-seeds, so a
//! resumed run replays exactly and prefetching cannot change batches.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{AdamState, Checkpoint, NetSection};
use crate::config::{derive_seed, EmbeddingMode, RunConfig, Stage};
use crate::data::{Dataset, PairRef, PairSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::img::ImageTensor;
use crate::losses::{batch_images, batch_l1_weights, bce_node, masked_l1_node};
use crate::nets::{
    batch_coords, batch_heatmaps, bind_frozen, bind_trainable, check_params, collect_grads,
    DNet, ForwardOpts, G1Net, G2Net, ParamStore, PoseSource,
};
use crate::optim::Adam;
use crate::pose::{encode_heatmaps, KeypointSet};

pub const LOSS_LOG: &str = "loss_log.tsv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const ABORT_DUMP: &str = "abort_dump.ckpt";

/// One loss-log row.
#[derive(Debug, Clone, PartialEq)]
pub enum LogRow {
    Stage1 { iteration: u64, masked_l1: f64 },
    Adversarial { iteration: u64, d_loss: f64, g_adv: f64, masked_l1: f64 },
}

impl LogRow {
    pub fn iteration(&self) -> u64 {
        match self {
            LogRow::Stage1 { iteration, .. } | LogRow::Adversarial { iteration, .. } => *iteration,
        }
    }

    pub fn masked_l1(&self) -> f64 {
        match self {
            LogRow::Stage1 { masked_l1, .. } | LogRow::Adversarial { masked_l1, .. } => *masked_l1,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            LogRow::Stage1 { masked_l1, .. } => masked_l1.is_finite(),
            LogRow::Adversarial { d_loss, g_adv, masked_l1, .. } => {
                d_loss.is_finite() && g_adv.is_finite() && masked_l1.is_finite()
            }
        }
    }

    fn tsv(&self) -> String {
        match self {
            LogRow::Stage1 { iteration, masked_l1 } => format!("{iteration}\t{masked_l1:.9}"),
            LogRow::Adversarial { iteration, d_loss, g_adv, masked_l1 } => {
                format!("{iteration}\t{d_loss:.9}\t{g_adv:.9}\t{masked_l1:.9}")
            }
        }
    }
}

/// Result of a training run: the final checkpoint plus the in-memory log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Mean discriminator outputs on (real, fake) pairs of the last logged
    /// batch; adversarial stages only.
    pub final_d_real: Option<f64>,
    pub final_d_fake: Option<f64>,
}

/// Deterministic batch composition: global sample counter walks seeded
/// epoch permutations of the pair list.
pub fn batch_indices(seed: u64, iteration: u64, batch_size: usize, n_pairs: usize) -> Vec<usize> {
    assert!(n_pairs > 0 && iteration >= 1);
    let start = (iteration - 1) * batch_size as u64;
    let mut cache: HashMap<u64, Vec<usize>> = HashMap::new();
    (0..batch_size as u64)
        .map(|slot| {
            let s = start + slot;
            let epoch = s / n_pairs as u64;
            let pos = (s % n_pairs as u64) as usize;
            let perm = cache.entry(epoch).or_insert_with(|| epoch_permutation(seed, epoch, n_pairs));
            perm[pos]
        })
        .collect()
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch.{epoch}")));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Flip decision for global sample counter `s`, independent of everything
/// else consumed from the seed.
pub fn flip_decision(seed: u64, s: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("aug.{s}")));
    rng.random_bool(0.5)
}

/// Caches loaded pairs per (pair index, flip) so repeated epochs do not
/// re-decode images. Loading stays a pure function of its key.
struct SampleCache<'a> {
    dataset: &'a Dataset,
    pairs: &'a [PairRef],
    cfg: &'a RunConfig,
    cache: HashMap<(usize, bool), PairSample>,
}

impl<'a> SampleCache<'a> {
    fn new(dataset: &'a Dataset, pairs: &'a [PairRef], cfg: &'a RunConfig) -> Self {
        Self { dataset, pairs, cfg, cache: HashMap::new() }
    }

    fn get(&mut self, pair_idx: usize, flip: bool) -> Result<&PairSample> {
        if !self.cache.contains_key(&(pair_idx, flip)) {
            let sample = self.dataset.load_pair(
                self.pairs[pair_idx],
                flip,
                &self.cfg.data,
                &self.cfg.morphology,
            )?;
            self.cache.insert((pair_idx, flip), sample);
        }
        Ok(&self.cache[&(pair_idx, flip)])
    }
}

/// Batched tensors for one iteration.
struct Batch {
    condition: ArrayD<f64>,
    target: ArrayD<f64>,
    weights: ArrayD<f64>,
    heatmaps: ArrayD<f64>,
    coords: ArrayD<f64>,
}

fn assemble_batch(
    cache: &mut SampleCache<'_>,
    cfg: &RunConfig,
    iteration: u64,
    n_pairs: usize,
) -> Result<Batch> {
    let seed = cfg.train.seed;
    let batch_size = cfg.train.batch_size;
    let idxs = batch_indices(seed, iteration, batch_size, n_pairs);
    let start = (iteration - 1) * batch_size as u64;
    let mut samples = Vec::with_capacity(batch_size);
    for (slot, &pair_idx) in idxs.iter().enumerate() {
        let flip = cfg.train.augment_flip && flip_decision(seed, start + slot as u64);
        samples.push(cache.get(pair_idx, flip)?.clone());
    }
    let conds: Vec<_> = samples.iter().map(|s| &s.condition_image).collect();
    let tgts: Vec<_> = samples.iter().map(|s| &s.target_image).collect();
    let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    let poses: Vec<_> = samples.iter().map(|s| &s.pose).collect();
    let kps: Vec<_> = samples.iter().map(|s| &s.target_keypoints).collect();
    Ok(Batch {
        condition: batch_images(&conds),
        target: batch_images(&tgts),
        weights: batch_l1_weights(&masks),
        heatmaps: batch_heatmaps(&poses),
        coords: batch_coords(&kps),
    })
}

fn pose_input_node(g: &mut Graph, cfg: &RunConfig, batch: &Batch) -> crate::graph::NodeId {
    match cfg.g1.embedding {
        EmbeddingMode::Ce => g.constant(batch.coords.clone()),
        _ => g.constant(batch.heatmaps.clone()),
    }
}

struct LogWriter {
    file: Option<std::fs::File>,
}

impl LogWriter {
    fn new(out_dir: Option<&Path>, header: &str, append: bool) -> Result<Self> {
        let file = match out_dir {
            None => None,
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(LOSS_LOG);
                if append && path.exists() {
                    Some(std::fs::OpenOptions::new().append(true).open(&path)?)
                } else {
                    let mut f = std::fs::File::create(&path)?;
                    writeln!(f, "{header}")?;
                    Some(f)
                }
            }
        };
        Ok(Self { file })
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.tsv())?;
        }
        Ok(())
    }
}

fn non_finite_abort(
    out_dir: Option<&Path>,
    ckpt: &Checkpoint,
    iteration: u64,
    detail: String,
) -> Error {
    if let Some(dir) = out_dir {
        // best-effort diagnostic dump; the original numeric error wins
        let _ = ckpt.save(&dir.join(ABORT_DUMP));
    }
    Error::NonFinite { iteration, detail }
}

fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:07}.ckpt"))
}

/// Train the coarse generator with the pose-masked L1 objective.
pub fn train_stage1(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.train.stage != Stage::Stage1 {
        return Err(Error::Config("train_stage1 requires train.stage = stage1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    let g1 = G1Net::new(&cfg.g1, h, w)?;
    let t = &cfg.train;

    let (mut params, mut adam, start_iter) = match resume {
        None => {
            let params = g1.init(derive_seed(t.seed, "init.g1"));
            let adam = Adam::new(&params, t.learning_rate, t.beta1, t.beta2);
            (params, adam, 1u64)
        }
        Some(ckpt) => {
            ckpt.check_resume_compatible(cfg)?;
            let sec = ckpt.section("g1")?;
            check_params(&g1.param_specs(), &sec.params)?;
            let adam_state = sec
                .adam
                .clone()
                .ok_or_else(|| Error::Checkpoint("g1 section lacks optimizer state".into()))?;
            (
                sec.params.clone(),
                adam_state.into_adam(t.learning_rate, t.beta1, t.beta2),
                ckpt.iteration + 1,
            )
        }
    };

    let pairs = dataset.build_pairs(cfg.data.pair_cap_per_identity);
    if pairs.is_empty() {
        return Err(Error::Data("no trainable pairs (every identity has < 2 images)".into()));
    }
    let mut cache = SampleCache::new(dataset, &pairs, cfg);
    let mut log_file = LogWriter::new(out_dir, "iteration\tmasked_l1", resume.is_some())?;
    let mut log = Vec::new();

    let snapshot = |params: &ParamStore, adam: &Adam, iter: u64| -> Checkpoint {
        let mut ckpt = Checkpoint::new(cfg, "stage1", iter, t.seed);
        ckpt.sections.insert(
            "g1".into(),
            NetSection { params: params.clone(), adam: Some(AdamState::from_adam(adam)) },
        );
        ckpt
    };

    for iteration in start_iter..=t.max_iterations {
        let batch = assemble_batch(&mut cache, cfg, iteration, pairs.len())?;
        let mut g = Graph::new();
        let bound = bind_trainable(&mut g, &params);
        let cond = g.constant(batch.condition.clone());
        let pose = pose_input_node(&mut g, cfg, &batch);
        let out = g1.forward(&mut g, &bound, cond, pose, &ForwardOpts::default(), None);
        let loss = masked_l1_node(&mut g, out, batch.target, batch.weights, cfg.loss.reduction);
        let loss_v = g.scalar(loss);
        if !loss_v.is_finite() {
            let ckpt = snapshot(&params, &adam, iteration);
            return Err(non_finite_abort(out_dir, &ckpt, iteration, format!("masked_l1 = {loss_v}")));
        }
        g.backward(loss);
        let grads = collect_grads(&g, &bound);
        adam.step(&mut params, &grads);

        if iteration % t.log_every == 0 || iteration == t.max_iterations {
            let row = LogRow::Stage1 { iteration, masked_l1: loss_v };
            log_file.write(&row)?;
            log.push(row);
        }
        if let Some(dir) = out_dir {
            if iteration % t.checkpoint_every == 0 && iteration != t.max_iterations {
                snapshot(&params, &adam, iteration).save(&checkpoint_path(dir, iteration))?;
            }
        }
    }

    let checkpoint = snapshot(&params, &adam, t.max_iterations);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(FINAL_CKPT))?;
    }
    Ok(TrainOutcome { checkpoint, log, final_d_real: None, final_d_fake: None })
}

/// Shared adversarial loop for stage two and the one-stage baseline.
///
/// `refine` decides the generator role: stage two trains the difference-map
/// generator on top of a frozen coarse generator; the one-stage baseline
/// trains the coarse generator directly against the discriminator.
fn train_adversarial(
    cfg: &RunConfig,
    dataset: &Dataset,
    g1_ckpt: Option<&Checkpoint>,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
    stage_tag: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let refine = cfg.train.stage == Stage::Stage2;
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    let g1 = G1Net::new(&cfg.g1, h, w)?;
    let g2 = if refine { Some(G2Net::new(&cfg.g2, cfg.g2_num_blocks(), h, w)?) } else { None };
    let d = DNet::new(&cfg.d, h, w)?;
    let t = &cfg.train;

    // stage two starts from a finished coarse-stage checkpoint
    let g1_params_init: ParamStore = if refine {
        let ckpt = g1_ckpt.ok_or_else(|| {
            Error::Incompatible("stage2 requires a stage-one checkpoint".into())
        })?;
        ckpt.check_geometry_compatible(cfg)?;
        let sec = ckpt.section("g1")?;
        check_params(&g1.param_specs(), &sec.params)?;
        sec.params.clone()
    } else {
        g1.init(derive_seed(t.seed, "init.g1"))
    };

    struct AdvState {
        g1_params: ParamStore,
        g2_params: Option<ParamStore>,
        d_params: ParamStore,
        gen_adam: Adam,
        d_adam: Adam,
    }

    let (mut st, start_iter) = match resume {
        None => {
            let g2_params = g2.as_ref().map(|net| net.init(derive_seed(t.seed, "init.g2")));
            let d_params = d.init(derive_seed(t.seed, "init.d"));
            let gen_adam = Adam::new(
                if refine { g2_params.as_ref().unwrap() } else { &g1_params_init },
                t.learning_rate,
                t.beta1,
                t.beta2,
            );
            let d_adam = Adam::new(&d_params, t.learning_rate, t.beta1, t.beta2);
            (
                AdvState { g1_params: g1_params_init, g2_params, d_params, gen_adam, d_adam },
                1u64,
            )
        }
        Some(ckpt) => {
            ckpt.check_resume_compatible(cfg)?;
            let g1_sec = ckpt.section("g1")?;
            check_params(&g1.param_specs(), &g1_sec.params)?;
            let d_sec = ckpt.section("d")?;
            let d_adam_state = d_sec
                .adam
                .clone()
                .ok_or_else(|| Error::Checkpoint("d section lacks optimizer state".into()))?;
            let (g2_params, gen_adam_state) = if refine {
                let g2_sec = ckpt.section("g2")?;
                let a = g2_sec
                    .adam
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("g2 section lacks optimizer state".into()))?;
                (Some(g2_sec.params.clone()), a)
            } else {
                let a = g1_sec
                    .adam
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("g1 section lacks optimizer state".into()))?;
                (None, a)
            };
            (
                AdvState {
                    g1_params: g1_sec.params.clone(),
                    g2_params,
                    d_params: d_sec.params.clone(),
                    gen_adam: gen_adam_state.into_adam(t.learning_rate, t.beta1, t.beta2),
                    d_adam: d_adam_state.into_adam(t.learning_rate, t.beta1, t.beta2),
                },
                ckpt.iteration + 1,
            )
        }
    };

    let pairs = dataset.build_pairs(cfg.data.pair_cap_per_identity);
    if pairs.is_empty() {
        return Err(Error::Data("no trainable pairs (every identity has < 2 images)".into()));
    }
    let mut cache = SampleCache::new(dataset, &pairs, cfg);
    let mut log_file =
        LogWriter::new(out_dir, "iteration\td_loss\tg_adv\tmasked_l1", resume.is_some())?;
    let mut log = Vec::new();
    let mut final_d_real = None;
    let mut final_d_fake = None;

    let snapshot = |st: &AdvState, iter: u64| -> Checkpoint {
        let mut ckpt = Checkpoint::new(cfg, stage_tag, iter, t.seed);
        let g1_adam =
            if refine { None } else { Some(AdamState::from_adam(&st.gen_adam)) };
        ckpt.sections
            .insert("g1".into(), NetSection { params: st.g1_params.clone(), adam: g1_adam });
        if let Some(g2p) = &st.g2_params {
            ckpt.sections.insert(
                "g2".into(),
                NetSection {
                    params: g2p.clone(),
                    adam: Some(AdamState::from_adam(&st.gen_adam)),
                },
            );
        }
        ckpt.sections.insert(
            "d".into(),
            NetSection {
                params: st.d_params.clone(),
                adam: Some(AdamState::from_adam(&st.d_adam)),
            },
        );
        ckpt
    };

    struct GenForward {
        /// candidate image fed to the discriminator
        fake: crate::graph::NodeId,
        /// (coarse, diff) nodes in the refinement stage
        coarse_diff: Option<(crate::graph::NodeId, crate::graph::NodeId)>,
        /// bindings of the trainable generator parameters (empty when the
        /// generator was built frozen)
        gen_bound: crate::nets::BoundParams,
    }

    // builds the generator output for the current batch inside `g`
    let build_generator =
        |g: &mut Graph, st: &AdvState, batch: &Batch, cfg: &RunConfig, trainable: bool| -> GenForward {
            let cond = g.constant(batch.condition.clone());
            if refine {
                // coarse result from the frozen stage-one generator
                let g1_bound = bind_frozen(g, &st.g1_params);
                let pose = pose_input_node(g, cfg, batch);
                let coarse = g1.forward(g, &g1_bound, cond, pose, &ForwardOpts::default(), None);
                let g2_net = g2.as_ref().unwrap();
                let g2_bound = if trainable {
                    bind_trainable(g, st.g2_params.as_ref().unwrap())
                } else {
                    bind_frozen(g, st.g2_params.as_ref().unwrap())
                };
                let (diff, refined) =
                    g2_net.forward(g, &g2_bound, cond, coarse, &ForwardOpts::default());
                GenForward {
                    fake: refined,
                    coarse_diff: Some((coarse, diff)),
                    gen_bound: if trainable { g2_bound } else { Default::default() },
                }
            } else {
                let g1_bound = if trainable {
                    bind_trainable(g, &st.g1_params)
                } else {
                    bind_frozen(g, &st.g1_params)
                };
                let pose = pose_input_node(g, cfg, batch);
                let out = g1.forward(g, &g1_bound, cond, pose, &ForwardOpts::default(), None);
                GenForward {
                    fake: out,
                    coarse_diff: None,
                    gen_bound: if trainable { g1_bound } else { Default::default() },
                }
            }
        };

    for iteration in start_iter..=t.max_iterations {
        let batch = assemble_batch(&mut cache, cfg, iteration, pairs.len())?;

        // --- discriminator step(s): real pairs toward 1, fakes toward 0
        let mut d_loss_v = f64::NAN;
        let mut d_real_mean = 0.0;
        let mut d_fake_mean = 0.0;
        for _ in 0..t.d_steps_per_g {
            let mut g = Graph::new();
            let d_bound = bind_trainable(&mut g, &st.d_params);
            let cond = g.constant(batch.condition.clone());
            let target = g.constant(batch.target.clone());
            let d_real = d.forward(&mut g, &d_bound, cond, target);
            let fwd = build_generator(&mut g, &st, &batch, cfg, false);
            let cond2 = g.constant(batch.condition.clone());
            let d_fake = d.forward(&mut g, &d_bound, cond2, fwd.fake);
            let l_real = bce_node(&mut g, d_real, 1.0);
            let l_fake = bce_node(&mut g, d_fake, 0.0);
            let loss = g.add(l_real, l_fake);
            d_loss_v = g.scalar(loss);
            d_real_mean = g.value(d_real).mean().unwrap();
            d_fake_mean = g.value(d_fake).mean().unwrap();
            if !d_loss_v.is_finite() {
                let ckpt = snapshot(&st, iteration);
                return Err(non_finite_abort(out_dir, &ckpt, iteration, format!("d_loss = {d_loss_v}")));
            }
            g.backward(loss);
            let grads = collect_grads(&g, &d_bound);
            st.d_adam.step(&mut st.d_params, &grads);
        }

        // --- generator step: fool the (just-updated) discriminator + L1
        let (g_adv_v, l1_v) = {
            let mut g = Graph::new();
            let fwd = build_generator(&mut g, &st, &batch, cfg, true);
            let d_bound = bind_frozen(&mut g, &st.d_params);
            let cond = g.constant(batch.condition.clone());
            let d_fake = d.forward(&mut g, &d_bound, cond, fwd.fake);
            let adv = bce_node(&mut g, d_fake, 1.0);
            let l1 = masked_l1_node(
                &mut g,
                fwd.fake,
                batch.target.clone(),
                batch.weights.clone(),
                cfg.loss.reduction,
            );
            let weighted = g.scale(l1, cfg.loss.lambda);
            let total = g.add(adv, weighted);
            let (g_adv_v, l1_v, total_v) = (g.scalar(adv), g.scalar(l1), g.scalar(total));
            if !total_v.is_finite() {
                let ckpt = snapshot(&st, iteration);
                return Err(non_finite_abort(
                    out_dir,
                    &ckpt,
                    iteration,
                    format!("generator loss = {total_v} (adv {g_adv_v}, l1 {l1_v})"),
                ));
            }
            // refined-output identity: refined == clamp(coarse + diff)
            if let Some((coarse, diff)) = fwd.coarse_diff {
                let coarse_v = g.value(coarse);
                let diff_v = g.value(diff);
                let refined_v = g.value(fwd.fake);
                let max_err = ndarray::Zip::from(coarse_v)
                    .and(diff_v)
                    .and(refined_v)
                    .fold(0.0f64, |acc, &c, &d, &r| acc.max((r - (c + d).clamp(-1.0, 1.0)).abs()));
                debug_assert_eq!(max_err, 0.0, "difference-map identity violated");
            }
            g.backward(total);
            let grads = collect_grads(&g, &fwd.gen_bound);
            let gen_params =
                if refine { st.g2_params.as_mut().unwrap() } else { &mut st.g1_params };
            st.gen_adam.step(gen_params, &grads);
            (g_adv_v, l1_v)
        };

        if iteration % t.log_every == 0 || iteration == t.max_iterations {
            let row = LogRow::Adversarial { iteration, d_loss: d_loss_v, g_adv: g_adv_v, masked_l1: l1_v };
            log_file.write(&row)?;
            log.push(row);
            final_d_real = Some(d_real_mean);
            final_d_fake = Some(d_fake_mean);
        }
        if let Some(dir) = out_dir {
            if iteration % t.checkpoint_every == 0 && iteration != t.max_iterations {
                snapshot(&st, iteration).save(&checkpoint_path(dir, iteration))?;
            }
        }
    }

    let checkpoint = snapshot(&st, t.max_iterations);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(FINAL_CKPT))?;
    }
    Ok(TrainOutcome { checkpoint, log, final_d_real, final_d_fake })
}

/// Stage two: freeze the coarse generator, alternate D and refinement
/// generator updates.
pub fn train_stage2(
    cfg: &RunConfig,
    dataset: &Dataset,
    g1_ckpt: &Checkpoint,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if cfg.train.stage != Stage::Stage2 {
        return Err(Error::Config("train_stage2 requires train.stage = stage2".into()));
    }
    if !cfg.train.freeze_g1_in_stage2 {
        return Err(Error::Config(
            "joint fine-tuning of the coarse generator is not implemented; keep freeze_g1_in_stage2 = true"
                .into(),
        ));
    }
    train_adversarial(cfg, dataset, Some(g1_ckpt), out_dir, resume, "stage2")
}

/// One-stage baseline: the coarse generator trained adversarially.
pub fn train_one_stage(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if cfg.train.stage != Stage::OneStage {
        return Err(Error::Config("train_one_stage requires train.stage = one-stage".into()));
    }
    train_adversarial(cfg, dataset, None, out_dir, resume, "one-stage")
}

/// Inference: coarse output from a stage-one state, plus the refined
/// output when a stage-two state is supplied. Deterministic.
pub fn generate(
    g1_ckpt: &Checkpoint,
    g2_ckpt: Option<&Checkpoint>,
    condition: &ImageTensor,
    kp: &KeypointSet,
) -> Result<(ImageTensor, Option<ImageTensor>)> {
    let cfg = &g1_ckpt.config;
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    if condition.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "condition image {:?} does not match model geometry {h}x{w}",
            condition.dims()
        )));
    }
    let g1 = G1Net::new(&cfg.g1, h, w)?;
    let g1_params = &g1_ckpt.section("g1")?.params;

    let coarse = match cfg.g1.embedding {
        EmbeddingMode::Ce => g1.run(g1_params, condition, PoseSource::Coords(kp))?,
        _ => {
            let pose = encode_heatmaps(kp, h, w, cfg.data.heatmap_radius)?;
            g1.run(g1_params, condition, PoseSource::Heatmaps(&pose))?
        }
    };

    let refined = match g2_ckpt {
        None => None,
        Some(ckpt) => {
            ckpt.check_geometry_compatible(cfg)?;
            let g2 = G2Net::new(&ckpt.config.g2, ckpt.config.g2_num_blocks(), h, w)?;
            let g2_params = &ckpt.section("g2")?.params;
            let (_, refined) = g2.run(g2_params, condition, &coarse)?;
            Some(refined)
        }
    };
    Ok((coarse, refined))
}
