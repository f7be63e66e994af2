//! The three networks: the stage-one generator (pose-integrating U-Net
//! with residual blocks and a fully-connected bottleneck), the stage-two
//! difference-map generator (same lineage, no bottleneck), and the paired
//! discriminator.
//!
//! Encoder block `b` runs at width `b * base_filters` ("increased linearly
//! with each block") and is two 3x3 stride-1 conv-relu layers wrapped in a
//! residual add, followed by a stride-2 downsampling conv except in the
//! last block. Decoders mirror their encoders, consuming skip connections
//! by channel concatenation and upsampling with nearest-neighbour + conv.
//! No batch normalization, no dropout; relu everywhere except the
//! fully-connected layers and the output conv (tanh).
//!
//! The two ablation pose embeddings are variants of the stage-one
//! generator: CE pushes raw keypoint coordinates through two FC layers and
//! fuses at the bottleneck; HME runs the heatmaps through an independent
//! encoder and fuses its FC feature the same way.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DConfig, EmbeddingMode, G1Config, G2Config, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::img::ImageTensor;
use crate::pose::{KeypointSet, PoseTensor};

/// Named parameter tensors, sorted by name (deterministic iteration).
pub type ParamStore = BTreeMap<String, ArrayD<f64>>;

/// Graph bindings of a parameter store.
pub type BoundParams = BTreeMap<String, NodeId>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Gaussian(f64),
    Zero,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_spec(name: &str, co: usize, ci: usize, k: usize, std: f64) -> [ParamSpec; 2] {
    [
        ParamSpec { name: format!("{name}.w"), shape: vec![co, ci, k, k], init: Init::Gaussian(std) },
        ParamSpec { name: format!("{name}.b"), shape: vec![co], init: Init::Zero },
    ]
}

fn fc_spec(name: &str, din: usize, dout: usize, std: f64) -> [ParamSpec; 2] {
    [
        ParamSpec { name: format!("{name}.w"), shape: vec![din, dout], init: Init::Gaussian(std) },
        ParamSpec { name: format!("{name}.b"), shape: vec![dout], init: Init::Zero },
    ]
}

/// Materialize a store from specs with seeded Gaussian init.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Zero => vec![0.0; n],
            Init::Gaussian(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect(),
        };
        store.insert(spec.name.clone(), ArrayD::from_shape_vec(IxDyn(&spec.shape), data).unwrap());
    }
    store
}

/// All-zero store with the spec shapes.
pub fn zero_params(specs: &[ParamSpec]) -> ParamStore {
    specs
        .iter()
        .map(|s| (s.name.clone(), ArrayD::zeros(IxDyn(&s.shape))))
        .collect()
}

/// Verify a store matches the expected specs exactly.
pub fn check_params(specs: &[ParamSpec], store: &ParamStore) -> Result<()> {
    if specs.len() != store.len() {
        return Err(Error::Incompatible(format!(
            "parameter count mismatch: expected {}, got {}",
            specs.len(),
            store.len()
        )));
    }
    for spec in specs {
        match store.get(&spec.name) {
            None => return Err(Error::Incompatible(format!("missing parameter {}", spec.name))),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::Incompatible(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn param_count(store: &ParamStore) -> usize {
    store.values().map(|t| t.len()).sum()
}

/// Insert every tensor of a store into the graph as a differentiable leaf.
pub fn bind_trainable(g: &mut Graph, store: &ParamStore) -> BoundParams {
    store.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone()))).collect()
}

/// Insert every tensor as a constant (frozen networks).
pub fn bind_frozen(g: &mut Graph, store: &ParamStore) -> BoundParams {
    store.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect()
}

/// Collect gradients for every bound parameter after a backward pass.
/// Parameters untouched by the loss get zero gradients.
pub fn collect_grads(g: &Graph, bound: &BoundParams) -> BTreeMap<String, ArrayD<f64>> {
    bound
        .iter()
        .map(|(k, &id)| {
            let grad = g
                .grad(id)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(g.shape(id))));
            (k.clone(), grad)
        })
        .collect()
}

fn p(bound: &BoundParams, name: &str) -> NodeId {
    *bound.get(name).unwrap_or_else(|| panic!("missing bound parameter {name}"))
}

/// Shape trace recorded during a forward pass, for architecture audits.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl Trace {
    fn record(&mut self, name: &str, shape: &[usize]) {
        self.entries.push((name.to_string(), shape.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

#[derive(Default)]
pub struct ForwardOpts {
    /// Zero the skip-connection paths (liveness testing only).
    pub ablate_skips: bool,
}

/// Two conv-relu layers wrapped in a residual add, constant width.
fn residual_block(g: &mut Graph, bound: &BoundParams, prefix: &str, x: NodeId) -> NodeId {
    let c1 = g.conv2d(x, p(bound, &format!("{prefix}.conv1.w")), p(bound, &format!("{prefix}.conv1.b")), 1, 1);
    let r1 = g.relu(c1);
    let c2 = g.conv2d(r1, p(bound, &format!("{prefix}.conv2.w")), p(bound, &format!("{prefix}.conv2.b")), 1, 1);
    let r2 = g.relu(c2);
    g.add(x, r2)
}

// ---------------------------------------------------------------------------
// Stage-one generator
// ---------------------------------------------------------------------------

pub struct G1Net {
    cfg: G1Config,
    height: usize,
    width: usize,
}

impl G1Net {
    pub fn new(cfg: &G1Config, height: usize, width: usize) -> Result<Self> {
        if cfg.num_blocks < 2 {
            return Err(Error::Config("g1.num_blocks must be at least 2".into()));
        }
        if cfg.base_filters == 0 || cfg.bottleneck_dim == 0 {
            return Err(Error::Config("g1 widths must be positive".into()));
        }
        let down = 1usize << (cfg.num_blocks - 1);
        if height % down != 0 || width % down != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} not divisible by 2^(N-1) = {down}"
            )));
        }
        Ok(Self { cfg: cfg.clone(), height, width })
    }

    pub fn cfg(&self) -> &G1Config {
        &self.cfg
    }

    /// Channels consumed by the image stem: pose heatmaps are concatenated
    /// at the input only in heatmap-concat mode.
    fn stem_channels(&self) -> usize {
        match self.cfg.embedding {
            EmbeddingMode::HeatmapConcat => 3 + NUM_JOINTS,
            EmbeddingMode::Ce | EmbeddingMode::Hme => 3,
        }
    }

    fn bottom_hw(&self) -> (usize, usize) {
        let down = 1usize << (self.cfg.num_blocks - 1);
        (self.height / down, self.width / down)
    }

    fn flat_dim(&self) -> usize {
        let (bh, bw) = self.bottom_hw();
        self.cfg.num_blocks * self.cfg.base_filters * bh * bw
    }

    /// Width of the feature vector entering the decoder FC.
    fn bottleneck_in(&self) -> usize {
        match self.cfg.embedding {
            EmbeddingMode::HeatmapConcat => self.cfg.bottleneck_dim,
            EmbeddingMode::Ce | EmbeddingMode::Hme => {
                self.cfg.bottleneck_dim + self.cfg.pose_embed_dim
            }
        }
    }

    fn encoder_specs(&self, prefix: &str, in_ch: usize, out: &mut Vec<ParamSpec>) {
        let (cfg, std) = (&self.cfg, self.cfg.init_std);
        let f = cfg.base_filters;
        out.extend(conv_spec(&format!("{prefix}.stem"), f, in_ch, 3, std));
        for b in 1..=cfg.num_blocks {
            let w = b * f;
            out.extend(conv_spec(&format!("{prefix}.enc.b{b}.conv1"), w, w, 3, std));
            out.extend(conv_spec(&format!("{prefix}.enc.b{b}.conv2"), w, w, 3, std));
            if b < cfg.num_blocks {
                out.extend(conv_spec(&format!("{prefix}.enc.b{b}.down"), (b + 1) * f, w, 3, std));
            }
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (cfg, std) = (&self.cfg, self.cfg.init_std);
        let f = cfg.base_filters;
        let n = cfg.num_blocks;
        let mut specs = Vec::new();

        self.encoder_specs("g1", self.stem_channels(), &mut specs);
        specs.extend(fc_spec("g1.fc.enc", self.flat_dim(), cfg.bottleneck_dim, std));

        match cfg.embedding {
            EmbeddingMode::HeatmapConcat => {}
            EmbeddingMode::Ce => {
                specs.extend(fc_spec("g1.pose_fc1", 2 * NUM_JOINTS, cfg.ce_hidden_dim, std));
                specs.extend(fc_spec("g1.pose_fc2", cfg.ce_hidden_dim, cfg.pose_embed_dim, std));
            }
            EmbeddingMode::Hme => {
                self.encoder_specs("g1.pose_enc", NUM_JOINTS, &mut specs);
                specs.extend(fc_spec("g1.pose_enc.fc", self.flat_dim(), cfg.pose_embed_dim, std));
            }
        }

        specs.extend(fc_spec("g1.fc.dec", self.bottleneck_in(), self.flat_dim(), std));
        // decoder level N works on concat(fc features, skip) = 2NF channels
        for b in (1..=n).rev() {
            let w = 2 * b * f;
            if b < n {
                let prev = 2 * (b + 1) * f;
                specs.extend(conv_spec(&format!("g1.dec.b{b}.up"), b * f, prev, 3, std));
            }
            specs.extend(conv_spec(&format!("g1.dec.b{b}.conv1"), w, w, 3, std));
            specs.extend(conv_spec(&format!("g1.dec.b{b}.conv2"), w, w, 3, std));
        }
        specs.extend(conv_spec("g1.out", 3, 2 * f, 3, std));
        specs
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        init_params(&self.param_specs(), seed)
    }

    /// Run the shared residual encoder, returning per-block skip tensors
    /// (pre-downsampling) and the final feature map.
    fn encode(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        prefix: &str,
        input: NodeId,
        trace: Option<&mut Trace>,
    ) -> (Vec<NodeId>, NodeId) {
        let n = self.cfg.num_blocks;
        let stem = g.conv2d(
            input,
            p(bound, &format!("{prefix}.stem.w")),
            p(bound, &format!("{prefix}.stem.b")),
            1,
            1,
        );
        let mut x = g.relu(stem);
        let mut skips = Vec::with_capacity(n);
        let mut tracer = trace;
        for b in 1..=n {
            if let Some(t) = tracer.as_deref_mut() {
                t.record(&format!("{prefix}.enc.b{b}.in"), g.shape(x));
            }
            let block = residual_block(g, bound, &format!("{prefix}.enc.b{b}"), x);
            skips.push(block);
            x = block;
            if b < n {
                let down = g.conv2d(
                    x,
                    p(bound, &format!("{prefix}.enc.b{b}.down.w")),
                    p(bound, &format!("{prefix}.enc.b{b}.down.b")),
                    2,
                    1,
                );
                x = g.relu(down);
            }
        }
        (skips, x)
    }

    /// Build the forward pass. `image` is `[n, 3, h, w]`; `pose` carries
    /// heatmaps `[n, 18, h, w]` or raw coordinates `[n, 36]` depending on
    /// the embedding mode. Returns the `[n, 3, h, w]` output in `[-1, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        image: NodeId,
        pose: NodeId,
        opts: &ForwardOpts,
        mut trace: Option<&mut Trace>,
    ) -> NodeId {
        let n = self.cfg.num_blocks;
        let f = self.cfg.base_filters;

        let input = match self.cfg.embedding {
            EmbeddingMode::HeatmapConcat => g.concat_channels(&[image, pose]),
            _ => image,
        };
        let (skips, enc_out) = self.encode(g, bound, "g1", input, trace.as_deref_mut());

        // bottleneck
        let flat = g.flatten(enc_out);
        let z_img = g.linear(flat, p(bound, "g1.fc.enc.w"), p(bound, "g1.fc.enc.b"));
        let z = match self.cfg.embedding {
            EmbeddingMode::HeatmapConcat => z_img,
            EmbeddingMode::Ce => {
                let h1 = g.linear(pose, p(bound, "g1.pose_fc1.w"), p(bound, "g1.pose_fc1.b"));
                let r1 = g.relu(h1);
                let z_pose = g.linear(r1, p(bound, "g1.pose_fc2.w"), p(bound, "g1.pose_fc2.b"));
                concat_features(g, z_img, z_pose)
            }
            EmbeddingMode::Hme => {
                let (_, pose_out) = self.encode(g, bound, "g1.pose_enc", pose, None);
                let pose_flat = g.flatten(pose_out);
                let z_pose =
                    g.linear(pose_flat, p(bound, "g1.pose_enc.fc.w"), p(bound, "g1.pose_enc.fc.b"));
                concat_features(g, z_img, z_pose)
            }
        };
        let dec_flat = g.linear(z, p(bound, "g1.fc.dec.w"), p(bound, "g1.fc.dec.b"));
        let (bh, bw) = self.bottom_hw();
        let batch = g.shape(image)[0];
        let mut x = g.reshape(dec_flat, &[batch, n * f, bh, bw]);

        // decoder, level N down to 1
        for b in (1..=n).rev() {
            if b < n {
                let up = g.upsample_nearest2(x);
                let conv = g.conv2d(
                    up,
                    p(bound, &format!("g1.dec.b{b}.up.w")),
                    p(bound, &format!("g1.dec.b{b}.up.b")),
                    1,
                    1,
                );
                x = g.relu(conv);
            }
            let mut skip = skips[b - 1];
            if opts.ablate_skips {
                skip = g.scale(skip, 0.0);
            }
            x = g.concat_channels(&[x, skip]);
            x = residual_block(g, bound, &format!("g1.dec.b{b}"), x);
            if let Some(t) = trace.as_deref_mut() {
                t.record(&format!("g1.dec.b{b}.out"), g.shape(x));
            }
        }
        let out = g.conv2d(x, p(bound, "g1.out.w"), p(bound, "g1.out.b"), 1, 1);
        g.tanh(out)
    }

    /// Convenience single-image forward with shape validation.
    pub fn run(
        &self,
        params: &ParamStore,
        image: &ImageTensor,
        pose: PoseSource<'_>,
    ) -> Result<ImageTensor> {
        check_params(&self.param_specs(), params)?;
        if image.dims() != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "image {:?} does not match network geometry {}x{}",
                image.dims(),
                self.height,
                self.width
            )));
        }
        let pose_data: ArrayD<f64> = match (self.cfg.embedding, &pose) {
            (EmbeddingMode::HeatmapConcat | EmbeddingMode::Hme, PoseSource::Heatmaps(pt)) => {
                if pt.dims() != (self.height, self.width) {
                    return Err(Error::Shape("pose tensor does not match image size".into()));
                }
                let (c, h, w) = pt.channels().dim();
                pt.channels()
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, c, h, w]))
                    .unwrap()
            }
            (EmbeddingMode::Ce, PoseSource::Coords(kp)) => {
                ArrayD::from_shape_vec(IxDyn(&[1, 2 * NUM_JOINTS]), kp.flat_coords()).unwrap()
            }
            (mode, _) => {
                return Err(Error::Config(format!(
                    "pose input does not match embedding mode {mode:?}"
                )))
            }
        };
        let mut g = Graph::new();
        let bound = bind_frozen(&mut g, params);
        let img_node = g.constant(batch_of_one(image));
        let pose_node = g.constant(pose_data);
        let out = self.forward(&mut g, &bound, img_node, pose_node, &ForwardOpts::default(), None);
        single_image(g.value(out))
    }
}

/// Pose input for the convenience forward.
pub enum PoseSource<'a> {
    Heatmaps(&'a PoseTensor),
    Coords(&'a KeypointSet),
}

fn concat_features(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    // feature vectors are [n, d]; reuse the channel concat by viewing them
    // as [n, d, 1, 1]
    let (na, da) = (g.shape(a)[0], g.shape(a)[1]);
    let (nb, db) = (g.shape(b)[0], g.shape(b)[1]);
    assert_eq!(na, nb);
    let a4 = g.reshape(a, &[na, da, 1, 1]);
    let b4 = g.reshape(b, &[nb, db, 1, 1]);
    let cat = g.concat_channels(&[a4, b4]);
    g.reshape(cat, &[na, da + db])
}

fn batch_of_one(image: &ImageTensor) -> ArrayD<f64> {
    let (c, h, w) = image.data().dim();
    image
        .data()
        .clone()
        .into_shape_with_order(IxDyn(&[1, c, h, w]))
        .unwrap()
}

fn single_image(batch: &ArrayD<f64>) -> Result<ImageTensor> {
    let s = batch.shape().to_vec();
    let a3: Array3<f64> = batch
        .clone()
        .into_shape_with_order(IxDyn(&[s[1], s[2], s[3]]))
        .unwrap()
        .into_dimensionality()
        .unwrap();
    ImageTensor::from_raw_clamped(a3)
}

// ---------------------------------------------------------------------------
// Stage-two generator
// ---------------------------------------------------------------------------

pub struct G2Net {
    num_blocks: usize,
    base_filters: usize,
    init_std: f64,
    height: usize,
    width: usize,
}

impl G2Net {
    pub fn new(cfg: &G2Config, num_blocks: usize, height: usize, width: usize) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::Config("g2 needs at least one block".into()));
        }
        if cfg.base_filters == 0 {
            return Err(Error::Config("g2.base_filters must be positive".into()));
        }
        let down = 1usize << (num_blocks - 1);
        if height % down != 0 || width % down != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} not divisible by {down} required by g2"
            )));
        }
        Ok(Self {
            num_blocks,
            base_filters: cfg.base_filters,
            init_std: cfg.init_std,
            height,
            width,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (m, f, std) = (self.num_blocks, self.base_filters, self.init_std);
        let mut specs = Vec::new();
        // encoder over concat(condition, coarse) = 6 channels
        specs.extend(conv_spec("g2.stem", f, 6, 3, std));
        for b in 1..=m {
            let w = b * f;
            specs.extend(conv_spec(&format!("g2.enc.b{b}.conv1"), w, w, 3, std));
            specs.extend(conv_spec(&format!("g2.enc.b{b}.conv2"), w, w, 3, std));
            if b < m {
                specs.extend(conv_spec(&format!("g2.enc.b{b}.down"), (b + 1) * f, w, 3, std));
            }
        }
        // fully convolutional: no bottleneck. Bottom decoder level works on
        // the encoder output itself; lower levels concat skips.
        for b in (1..=m).rev() {
            let w = if b == m { m * f } else { 2 * b * f };
            if b < m {
                let prev = if b + 1 == m { m * f } else { 2 * (b + 1) * f };
                specs.extend(conv_spec(&format!("g2.dec.b{b}.up"), b * f, prev, 3, std));
            }
            specs.extend(conv_spec(&format!("g2.dec.b{b}.conv1"), w, w, 3, std));
            specs.extend(conv_spec(&format!("g2.dec.b{b}.conv2"), w, w, 3, std));
        }
        let out_in = if m == 1 { f } else { 2 * f };
        specs.extend(conv_spec("g2.out", 3, out_in, 3, std));
        specs
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        init_params(&self.param_specs(), seed)
    }

    /// Difference-map forward: returns `(diff, refined)` nodes where
    /// `refined = clamp(coarse + diff)` into `[-1, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        condition: NodeId,
        coarse: NodeId,
        opts: &ForwardOpts,
    ) -> (NodeId, NodeId) {
        let m = self.num_blocks;
        let input = g.concat_channels(&[condition, coarse]);
        let stem = g.conv2d(input, p(bound, "g2.stem.w"), p(bound, "g2.stem.b"), 1, 1);
        let mut x = g.relu(stem);
        let mut skips = Vec::with_capacity(m);
        for b in 1..=m {
            let block = residual_block(g, bound, &format!("g2.enc.b{b}"), x);
            skips.push(block);
            x = block;
            if b < m {
                let down = g.conv2d(
                    x,
                    p(bound, &format!("g2.enc.b{b}.down.w")),
                    p(bound, &format!("g2.enc.b{b}.down.b")),
                    2,
                    1,
                );
                x = g.relu(down);
            }
        }
        for b in (1..=m).rev() {
            if b < m {
                let up = g.upsample_nearest2(x);
                let conv = g.conv2d(
                    up,
                    p(bound, &format!("g2.dec.b{b}.up.w")),
                    p(bound, &format!("g2.dec.b{b}.up.b")),
                    1,
                    1,
                );
                x = g.relu(conv);
                let mut skip = skips[b - 1];
                if opts.ablate_skips {
                    skip = g.scale(skip, 0.0);
                }
                x = g.concat_channels(&[x, skip]);
            }
            x = residual_block(g, bound, &format!("g2.dec.b{b}"), x);
        }
        let out = g.conv2d(x, p(bound, "g2.out.w"), p(bound, "g2.out.b"), 1, 1);
        let diff = g.tanh(out);
        let sum = g.add(coarse, diff);
        let refined = g.clamp(sum, -1.0, 1.0);
        (diff, refined)
    }

    /// Convenience single-image forward with validation.
    pub fn run(
        &self,
        params: &ParamStore,
        condition: &ImageTensor,
        coarse: &ImageTensor,
    ) -> Result<(ImageTensor, ImageTensor)> {
        check_params(&self.param_specs(), params)?;
        if condition.dims() != coarse.dims() {
            return Err(Error::Shape(format!(
                "condition {:?} vs coarse {:?}",
                condition.dims(),
                coarse.dims()
            )));
        }
        if condition.dims() != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "image {:?} does not match network geometry {}x{}",
                condition.dims(),
                self.height,
                self.width
            )));
        }
        let mut g = Graph::new();
        let bound = bind_frozen(&mut g, params);
        let cond = g.constant(batch_of_one(condition));
        let crs = g.constant(batch_of_one(coarse));
        let (diff, refined) = self.forward(&mut g, &bound, cond, crs, &ForwardOpts::default());
        Ok((single_image(g.value(diff))?, single_image(g.value(refined))?))
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

pub struct DNet {
    cfg: DConfig,
    height: usize,
    width: usize,
}

impl DNet {
    pub fn new(cfg: &DConfig, height: usize, width: usize) -> Result<Self> {
        if cfg.base_filters == 0 || cfg.num_layers == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let down = 1usize << cfg.num_layers;
        if height % down != 0 || width % down != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} not divisible by 2^num_layers = {down}"
            )));
        }
        Ok(Self { cfg: cfg.clone(), height, width })
    }

    fn widths(&self) -> Vec<usize> {
        (0..self.cfg.num_layers).map(|l| self.cfg.base_filters << l).collect()
    }

    fn flat_dim(&self) -> usize {
        let down = 1usize << self.cfg.num_layers;
        let last = self.cfg.base_filters << (self.cfg.num_layers - 1);
        last * (self.height / down) * (self.width / down)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let std = self.cfg.init_std;
        let mut specs = Vec::new();
        let mut cin = 6; // paired input: condition + candidate
        for (l, w) in self.widths().into_iter().enumerate() {
            specs.extend(conv_spec(&format!("d.conv{l}"), w, cin, 4, std));
            cin = w;
        }
        specs.extend(fc_spec("d.fc", self.flat_dim(), 1, std));
        specs
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        init_params(&self.param_specs(), seed)
    }

    /// Probability node `[n, 1]` that the (condition, candidate) pair is
    /// a real pair.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        condition: NodeId,
        candidate: NodeId,
    ) -> NodeId {
        let mut x = g.concat_channels(&[condition, candidate]);
        for l in 0..self.cfg.num_layers {
            let conv = g.conv2d(
                x,
                p(bound, &format!("d.conv{l}.w")),
                p(bound, &format!("d.conv{l}.b")),
                2,
                1,
            );
            x = g.leaky_relu(conv, self.cfg.leaky_slope);
        }
        let flat = g.flatten(x);
        let logit = g.linear(flat, p(bound, "d.fc.w"), p(bound, "d.fc.b"));
        g.sigmoid(logit)
    }

    /// Convenience single-pair forward.
    pub fn run(
        &self,
        params: &ParamStore,
        condition: &ImageTensor,
        candidate: &ImageTensor,
    ) -> Result<f64> {
        check_params(&self.param_specs(), params)?;
        if condition.dims() != candidate.dims() {
            return Err(Error::Shape(format!(
                "condition {:?} vs candidate {:?}",
                condition.dims(),
                candidate.dims()
            )));
        }
        if condition.dims() != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "image {:?} does not match discriminator geometry {}x{}",
                condition.dims(),
                self.height,
                self.width
            )));
        }
        let mut g = Graph::new();
        let bound = bind_frozen(&mut g, params);
        let cond = g.constant(batch_of_one(condition));
        let cand = g.constant(batch_of_one(candidate));
        let prob = self.forward(&mut g, &bound, cond, cand);
        Ok(g.scalar(prob))
    }
}

/// Stack keypoint coordinate rows into a `[n, 36]` tensor for CE input.
pub fn batch_coords(kps: &[&KeypointSet]) -> ArrayD<f64> {
    let n = kps.len();
    let mut data = Vec::with_capacity(n * 2 * NUM_JOINTS);
    for kp in kps {
        data.extend(kp.flat_coords());
    }
    ArrayD::from_shape_vec(IxDyn(&[n, 2 * NUM_JOINTS]), data).unwrap()
}

/// Stack pose tensors into `[n, 18, h, w]`.
pub fn batch_heatmaps(poses: &[&PoseTensor]) -> ArrayD<f64> {
    let n = poses.len();
    let (h, w) = poses[0].dims();
    let mut out = Array4::<f64>::zeros((n, NUM_JOINTS, h, w));
    for (i, pt) in poses.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(pt.channels());
    }
    out.into_dyn()
}

/// Helper for tests and analytics: a deterministic pseudo-random image.
pub fn test_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Array3::zeros((3, height, width));
    for v in a.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (z * 0.4).clamp(-1.0, 1.0);
    }
    ImageTensor::new(a).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{encode_heatmaps, Keypoint};

    fn lone_pose(h: usize, w: usize) -> PoseTensor {
        let mut pts = [Keypoint::invisible(); NUM_JOINTS];
        pts[0] = Keypoint::visible((w / 2) as i32, (h / 2) as i32);
        pts[1] = Keypoint::visible((w / 3) as i32, (h / 3) as i32);
        encode_heatmaps(&KeypointSet::new(pts), h, w, 4).unwrap()
    }

    fn small_g1(h: usize, w: usize, mode: EmbeddingMode) -> (G1Net, ParamStore) {
        let cfg = G1Config {
            num_blocks: 3,
            base_filters: 4,
            bottleneck_dim: 8,
            embedding: mode,
            pose_embed_dim: 6,
            ce_hidden_dim: 10,
            init_std: 0.02,
        };
        let net = G1Net::new(&cfg, h, w).unwrap();
        let params = net.init(1);
        (net, params)
    }

    #[test]
    fn g1_output_shape_matches_input_at_paper_settings() {
        // N=5 at 128x64 and N=6 at 256x256, small widths to stay fast
        for (n, h, w) in [(5usize, 128usize, 64usize), (6, 256, 256)] {
            let cfg = G1Config {
                num_blocks: n,
                base_filters: 2,
                bottleneck_dim: 4,
                ..Default::default()
            };
            let net = G1Net::new(&cfg, h, w).unwrap();
            let params = net.init(3);
            let img = test_image(h, w, 5);
            let pose = lone_pose(h, w);
            let out = net.run(&params, &img, PoseSource::Heatmaps(&pose)).unwrap();
            assert_eq!(out.dims(), (h, w));
        }
    }

    #[test]
    fn g1_forward_is_deterministic() {
        let (net, params) = small_g1(16, 16, EmbeddingMode::HeatmapConcat);
        let img = test_image(16, 16, 2);
        let pose = lone_pose(16, 16);
        let a = net.run(&params, &img, PoseSource::Heatmaps(&pose)).unwrap();
        let b = net.run(&params, &img, PoseSource::Heatmaps(&pose)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn g1_rejects_mismatched_image() {
        let (net, params) = small_g1(16, 16, EmbeddingMode::HeatmapConcat);
        let img = test_image(32, 32, 2);
        let pose = lone_pose(16, 16);
        assert!(net.run(&params, &img, PoseSource::Heatmaps(&pose)).is_err());
    }

    #[test]
    fn ce_accepts_all_invisible_sentinels() {
        let (net, params) = small_g1(16, 16, EmbeddingMode::Ce);
        let img = test_image(16, 16, 8);
        let kp = KeypointSet::new([Keypoint::invisible(); NUM_JOINTS]);
        let out = net.run(&params, &img, PoseSource::Coords(&kp)).unwrap();
        assert_eq!(out.dims(), (16, 16));
    }

    #[test]
    fn hme_output_shape_matches_heatmap_concat() {
        let (hc, hc_params) = small_g1(16, 16, EmbeddingMode::HeatmapConcat);
        let (hme, hme_params) = small_g1(16, 16, EmbeddingMode::Hme);
        let img = test_image(16, 16, 4);
        let pose = lone_pose(16, 16);
        let a = hc.run(&hc_params, &img, PoseSource::Heatmaps(&pose)).unwrap();
        let b = hme.run(&hme_params, &img, PoseSource::Heatmaps(&pose)).unwrap();
        assert_eq!(a.dims(), b.dims());
    }

    /// Independent parameter-count formula from layer dimensions.
    fn expected_g1_param_count(cfg: &G1Config, h: usize, w: usize) -> usize {
        let f = cfg.base_filters;
        let n = cfg.num_blocks;
        let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
        let fc = |i: usize, o: usize| i * o + o;
        let bh = h / (1 << (n - 1));
        let bw = w / (1 << (n - 1));
        let flat = n * f * bh * bw;

        let stem_in = match cfg.embedding {
            EmbeddingMode::HeatmapConcat => 21,
            _ => 3,
        };
        let encoder = |cin: usize| -> usize {
            let mut total = conv(f, cin, 3);
            for b in 1..=n {
                total += 2 * conv(b * f, b * f, 3);
                if b < n {
                    total += conv((b + 1) * f, b * f, 3);
                }
            }
            total
        };
        let mut total = encoder(stem_in) + fc(flat, cfg.bottleneck_dim);
        let dec_in = match cfg.embedding {
            EmbeddingMode::HeatmapConcat => cfg.bottleneck_dim,
            _ => cfg.bottleneck_dim + cfg.pose_embed_dim,
        };
        match cfg.embedding {
            EmbeddingMode::HeatmapConcat => {}
            EmbeddingMode::Ce => {
                total += fc(36, cfg.ce_hidden_dim) + fc(cfg.ce_hidden_dim, cfg.pose_embed_dim);
            }
            EmbeddingMode::Hme => {
                total += encoder(18) + fc(flat, cfg.pose_embed_dim);
            }
        }
        total += fc(dec_in, flat);
        for b in (1..=n).rev() {
            if b < n {
                total += conv(b * f, 2 * (b + 1) * f, 3);
            }
            total += 2 * conv(2 * b * f, 2 * b * f, 3);
        }
        total + conv(3, 2 * f, 3)
    }

    #[test]
    fn param_counts_match_analytic_formula_and_ce_exceeds_heatmap_concat() {
        let (h, w) = (16usize, 16usize);
        let mut counts = std::collections::BTreeMap::new();
        for mode in [EmbeddingMode::HeatmapConcat, EmbeddingMode::Ce, EmbeddingMode::Hme] {
            let (net, params) = small_g1(h, w, mode);
            let got = param_count(&params);
            let want = expected_g1_param_count(net.cfg(), h, w);
            assert_eq!(got, want, "param count mismatch for {mode:?}");
            counts.insert(format!("{mode:?}"), got);
        }
        assert!(
            counts["Ce"] > counts["HeatmapConcat"],
            "CE must add parameters: {counts:?}"
        );
    }

    #[test]
    fn conv_kernels_are_3x3_and_widths_increase_linearly() {
        let (g1, _) = small_g1(16, 16, EmbeddingMode::HeatmapConcat);
        for spec in g1.param_specs() {
            if spec.name.ends_with(".w") && spec.shape.len() == 4 {
                assert_eq!(&spec.shape[2..], &[3, 3], "{} is not 3x3", spec.name);
            }
        }
        let f = g1.cfg().base_filters;
        for b in 1..=g1.cfg().num_blocks {
            let spec = g1
                .param_specs()
                .into_iter()
                .find(|s| s.name == format!("g1.enc.b{b}.conv1.w"))
                .unwrap();
            assert_eq!(spec.shape[0], b * f, "block {b} width not linear");
        }

        let g2 = G2Net::new(&G2Config { base_filters: 4, ..Default::default() }, 1, 16, 16).unwrap();
        for spec in g2.param_specs() {
            if spec.name.ends_with(".w") && spec.shape.len() == 4 {
                assert_eq!(&spec.shape[2..], &[3, 3], "{} is not 3x3", spec.name);
            }
        }
    }

    #[test]
    fn encoder_decoder_resolutions_mirror() {
        let (net, params) = small_g1(32, 16, EmbeddingMode::HeatmapConcat);
        let mut g = Graph::new();
        let bound = bind_frozen(&mut g, &params);
        let img = g.constant(batch_of_one(&test_image(32, 16, 1)));
        let pose = g.constant({
            let pt = lone_pose(32, 16);
            let (c, h, w) = pt.channels().dim();
            pt.channels().clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap()
        });
        let mut trace = Trace::default();
        net.forward(&mut g, &bound, img, pose, &ForwardOpts::default(), Some(&mut trace));
        let n = net.cfg().num_blocks;
        // decoder block at level l matches encoder block l's input resolution:
        // in decoder order b = N+1-l, i.e. decoder block b mirrors encoder
        // block N+1-b.
        for level in 1..=n {
            let enc = trace.get(&format!("g1.enc.b{level}.in")).unwrap();
            let dec = trace.get(&format!("g1.dec.b{level}.out")).unwrap();
            assert_eq!(&enc[2..], &dec[2..], "level {level} resolution mismatch");
        }
    }

    #[test]
    fn ablating_skips_changes_g1_output() {
        let (net, params) = small_g1(16, 16, EmbeddingMode::HeatmapConcat);
        let img = test_image(16, 16, 6);
        let pose = lone_pose(16, 16);

        let forward = |ablate: bool| {
            let mut g = Graph::new();
            let bound = bind_frozen(&mut g, &params);
            let i = g.constant(batch_of_one(&img));
            let pt = g.constant({
                let (c, h, w) = pose.channels().dim();
                pose.channels().clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap()
            });
            let out = net.forward(
                &mut g,
                &bound,
                i,
                pt,
                &ForwardOpts { ablate_skips: ablate },
                None,
            );
            g.value(out).clone()
        };
        let with = forward(false);
        let without = forward(true);
        let diff = (&with - &without).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "skip connections appear to be dead wires");
    }

    #[test]
    fn g2_zero_params_give_zero_diff_and_identity_refinement() {
        let net = G2Net::new(&G2Config { base_filters: 4, ..Default::default() }, 2, 16, 16).unwrap();
        let zeros = zero_params(&net.param_specs());
        let cond = test_image(16, 16, 9);
        let coarse = test_image(16, 16, 10);
        let (diff, refined) = net.run(&zeros, &cond, &coarse).unwrap();
        assert_eq!(diff.data().sum(), 0.0);
        assert_eq!(&refined, &coarse);
    }

    #[test]
    fn g2_has_no_fc_and_n_minus_2_blocks() {
        let cfg = crate::config::RunConfig::default(); // N=5
        let g2 = G2Net::new(&cfg.g2, cfg.g2_num_blocks(), 128, 64).unwrap();
        assert_eq!(g2.num_blocks(), 3);
        for spec in g2.param_specs() {
            assert!(
                !spec.name.contains("fc"),
                "stage-two generator must be fully convolutional, found {}",
                spec.name
            );
            // every weight is a conv weight
            if spec.name.ends_with(".w") {
                assert_eq!(spec.shape.len(), 4, "{} is not a conv weight", spec.name);
            }
        }
    }

    #[test]
    fn g2_refined_minus_coarse_equals_diff_without_clamping() {
        let net = G2Net::new(&G2Config { base_filters: 4, ..Default::default() }, 2, 16, 16).unwrap();
        let params = net.init(12);
        // coarse well inside the range: nothing clamps at init-scale diffs
        let coarse = ImageTensor::new(test_image(16, 16, 11).data().mapv(|v| v * 0.2)).unwrap();
        let cond = test_image(16, 16, 13);
        let (diff, refined) = net.run(&params, &cond, &coarse).unwrap();
        let recon = refined.data() - coarse.data();
        let err = (&recon - diff.data()).mapv(f64::abs).sum();
        assert!(err < 1e-12, "identity violated: {err}");
    }

    #[test]
    fn g2_output_shapes() {
        for m in [1usize, 2, 3] {
            let net =
                G2Net::new(&G2Config { base_filters: 4, ..Default::default() }, m, 16, 16).unwrap();
            let params = net.init(7);
            let cond = test_image(16, 16, 1);
            let coarse = test_image(16, 16, 2);
            let (diff, refined) = net.run(&params, &cond, &coarse).unwrap();
            assert_eq!(diff.dims(), (16, 16));
            assert_eq!(refined.dims(), (16, 16));
        }
    }

    #[test]
    fn d_outputs_probability_and_is_order_sensitive() {
        let cfg = DConfig { base_filters: 8, num_layers: 2, ..Default::default() };
        let net = DNet::new(&cfg, 16, 16).unwrap();
        let params = net.init(21);
        let a = test_image(16, 16, 31);
        let b = test_image(16, 16, 32);
        let p_ab = net.run(&params, &a, &b).unwrap();
        let p_ba = net.run(&params, &b, &a).unwrap();
        assert!(p_ab.is_finite() && p_ab > 0.0 && p_ab < 1.0);
        assert!(p_ba.is_finite() && p_ba > 0.0 && p_ba < 1.0);
        // identical copies give identical output
        assert_eq!(p_ab, net.run(&params, &a, &b).unwrap());
        // the two orderings are independent evaluations; with random
        // weights they almost surely differ
        assert_ne!(p_ab, p_ba);
    }

    #[test]
    fn networks_are_differentiable_end_to_end() {
        // finite-difference probe on sum-of-outputs for each net
        let (g1, g1_params) = small_g1(16, 16, EmbeddingMode::HeatmapConcat);
        let img = test_image(16, 16, 41);
        let pose = lone_pose(16, 16);
        let pose_arr = {
            let (c, h, w) = pose.channels().dim();
            pose.channels().clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap()
        };

        let probe = |params: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let bound = bind_frozen(&mut g, params);
            let i = g.constant(batch_of_one(&img));
            let pt = g.constant(pose_arr.clone());
            let out = g1.forward(&mut g, &bound, i, pt, &ForwardOpts::default(), None);
            let s = g.sum_all(out);
            g.scalar(s)
        };

        let mut g = Graph::new();
        let bound = bind_trainable(&mut g, &g1_params);
        let i = g.constant(batch_of_one(&img));
        let pt = g.constant(pose_arr.clone());
        let out = g1.forward(&mut g, &bound, i, pt, &ForwardOpts::default(), None);
        let s = g.sum_all(out);
        g.backward(s);
        let grads = collect_grads(&g, &bound);

        let name = "g1.enc.b2.conv1.w";
        let h = 1e-6;
        let mut checked = 0;
        for idx in [0usize, 7, 23, 49, 101] {
            let mut plus = g1_params.clone();
            let mut minus = g1_params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
            let num = (probe(&plus) - probe(&minus)) / (2.0 * h);
            let ana = grads[name].as_slice().unwrap()[idx];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                ((num - ana) / denom).abs() < 1e-3,
                "probe gradient mismatch at {idx}: {num} vs {ana}"
            );
            checked += 1;
        }
        assert_eq!(checked, 5);
    }
}
