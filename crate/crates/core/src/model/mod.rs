//! The hybrid encoder/graph-decoder model: a residual convolutional encoder
//! feeding a variational latent space, decoded by Chebyshev graph
//! convolutions with image-to-graph skip connections (IGSC) into landmark
//! coordinates. Also houses the PCA- and FC-decoder baselines.

pub mod pca;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::graph::{cheb_conv, Hierarchy, Topology};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-5;
/// Negative slope of the graph-decoder activation.
const DECODER_LEAK: f64 = 0.2;
/// Hidden width of the fully-connected baseline decoder.
pub const FC_HIDDEN: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridGNetConfig {
    /// Square input side; must be divisible by 2^6 for the six pool stages.
    pub image_size: usize,
    pub encoder_channels: Vec<usize>,
    /// Node count of the coarse graph (the latent is reshaped to n x f).
    pub latent_nodes: usize,
    pub latent_features: usize,
    pub cheb_order: usize,
    /// Encoder levels (1-based, post-pool) sampled by the skip connections.
    pub igsc_levels: Vec<usize>,
    pub ds_enabled: bool,
}

pub const ENCODER_BLOCKS: usize = 6;

impl HybridGNetConfig {
    /// CPU-trainable defaults: 128x128 input, 480-dim latent over the
    /// 60-node coarse chest graph, K=6, skips from encoder levels 6 and 5.
    pub fn desk() -> Self {
        HybridGNetConfig {
            image_size: 128,
            encoder_channels: vec![8, 16, 32, 64, 128, 128],
            latent_nodes: 60,
            latent_features: 8,
            cheb_order: 6,
            igsc_levels: vec![6, 5],
            ds_enabled: true,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_nodes * self.latent_features
    }

    /// Spatial side of the feature map after `level` pools (1-based).
    pub fn map_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    /// Flattened size of the deepest encoder map.
    pub fn encoder_flat(&self) -> usize {
        let side = self.map_size(ENCODER_BLOCKS);
        self.encoder_channels[ENCODER_BLOCKS - 1] * side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != ENCODER_BLOCKS {
            return Err(Error::invalid(format!(
                "config: expected {ENCODER_BLOCKS} encoder channels, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.image_size == 0 || self.image_size % (1 << ENCODER_BLOCKS) != 0 {
            return Err(Error::invalid(format!(
                "config: image_size {} not divisible by {}",
                self.image_size,
                1 << ENCODER_BLOCKS
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0)
            || self.latent_nodes == 0
            || self.latent_features == 0
        {
            return Err(Error::invalid("config: zero-sized dimension"));
        }
        if self.cheb_order == 0 {
            return Err(Error::invalid("config: cheb_order must be >= 1"));
        }
        if self.igsc_levels.len() > 2 {
            return Err(Error::invalid(format!(
                "config: at most two skip levels, got {}",
                self.igsc_levels.len()
            )));
        }
        if self
            .igsc_levels
            .iter()
            .any(|&l| l == 0 || l > ENCODER_BLOCKS)
        {
            return Err(Error::invalid(format!(
                "config: igsc levels {:?} outside 1..={ENCODER_BLOCKS}",
                self.igsc_levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "hybrid")]
    Hybrid,
    #[serde(rename = "hybrid-noigsc")]
    HybridNoIgsc,
    #[serde(rename = "hybrid-1igsc")]
    Hybrid1Igsc,
    #[serde(rename = "pca")]
    Pca,
    #[serde(rename = "fc")]
    Fc,
}

impl ModelKind {
    pub fn is_hybrid(self) -> bool {
        matches!(
            self,
            ModelKind::Hybrid | ModelKind::HybridNoIgsc | ModelKind::Hybrid1Igsc
        )
    }

    /// Variational kinds sample z during training and carry a KL term.
    pub fn is_variational(self) -> bool {
        self.is_hybrid() || self == ModelKind::Fc
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Hybrid => "hybrid",
            ModelKind::HybridNoIgsc => "hybrid-noigsc",
            ModelKind::Hybrid1Igsc => "hybrid-1igsc",
            ModelKind::Pca => "pca",
            ModelKind::Fc => "fc",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(ModelKind::Hybrid),
            "hybrid-noigsc" => Ok(ModelKind::HybridNoIgsc),
            "hybrid-1igsc" => Ok(ModelKind::Hybrid1Igsc),
            "pca" => Ok(ModelKind::Pca),
            "fc" => Ok(ModelKind::Fc),
            other => Err(Error::invalid(format!(
                "model kind must be hybrid|hybrid-noigsc|hybrid-1igsc|pca|fc, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter store; iteration and serialization order is lexicographic.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Param>,
}

impl ModelParams {
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        let prev = self.map.insert(name.to_string(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if param.value.shape != value.shape {
            return Err(Error::invalid(format!(
                "parameter {name:?}: shape {:?} cannot replace {:?}",
                value.shape, param.value.shape
            )));
        }
        param.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter on a tape: trainable ones as leaves, frozen
    /// ones as constants. The returned binding maps names to tape ids.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, param) in &self.map {
            let id = if param.trainable {
                tape.leaf(param.value.clone())
            } else {
                tape.constant(param.value.clone())
            };
            ids.insert(name.clone(), id);
        }
        Bound { ids }
    }
}

/// Tape ids of one model's parameters for a single forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Everything a forward pass produces. Coordinates are normalized to the
/// unit square; deep-supervision and latent slots are present only for the
/// kinds that compute them.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub mu: Option<TensorId>,
    pub logvar: Option<TensorId>,
    /// [M, 2] final positions.
    pub pos_final: TensorId,
    /// [coarse nodes, 2] intermediate positions from the coarse head.
    pub pos_ds_coarse: Option<TensorId>,
    /// [M, 2] intermediate positions from the fine head.
    pub pos_ds_fine: Option<TensorId>,
}

pub struct ForwardPass {
    pub outputs: ForwardOutputs,
    pub bound: Bound,
}

pub struct Encoded {
    /// [N, flattened deepest map].
    pub flat: TensorId,
    /// Post-pool feature maps, index 0 = level 1.
    pub maps: Vec<TensorId>,
}

pub struct DecodeOutputs {
    pub pos_final: TensorId,
    pub pos_ds_coarse: TensorId,
    pub pos_ds_fine: TensorId,
}

pub struct Model {
    pub kind: ModelKind,
    pub config: HybridGNetConfig,
    pub hierarchy: Hierarchy,
    pub params: ModelParams,
    /// Number of PCA coefficients regressed by the pca baseline.
    pub pca_components: Option<usize>,
}

impl Model {
    /// Build a model with freshly initialized parameters: Kaiming-uniform
    /// fan-in weights, zero biases, unit norm gains. `pca_components` is
    /// required by (and only read for) the pca kind.
    pub fn new(
        kind: ModelKind,
        mut config: HybridGNetConfig,
        topology: &Topology,
        pca_components: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        match kind {
            ModelKind::Hybrid => {}
            ModelKind::Hybrid1Igsc => config.igsc_levels.truncate(1),
            ModelKind::HybridNoIgsc | ModelKind::Pca | ModelKind::Fc => {
                config.igsc_levels.clear()
            }
        }
        config.validate()?;
        let hierarchy = Hierarchy::build(topology, 2)?;
        let coarse_nodes = hierarchy.coarsest().topology.total_nodes();
        if config.latent_nodes != coarse_nodes {
            return Err(Error::invalid(format!(
                "config: latent_nodes {} != coarse graph size {coarse_nodes}",
                config.latent_nodes
            )));
        }
        let components = match kind {
            ModelKind::Pca => {
                let nc = pca_components
                    .ok_or_else(|| Error::invalid("pca kind needs a component count"))?;
                if nc == 0 {
                    return Err(Error::invalid("pca: need at least one component"));
                }
                Some(nc)
            }
            _ => None,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::default();
        let out_dim = 2 * topology.total_nodes();
        build_encoder_params(&mut params, &config, &mut rng);
        match kind {
            ModelKind::Hybrid | ModelKind::HybridNoIgsc | ModelKind::Hybrid1Igsc => {
                build_latent_heads(&mut params, &config, &mut rng);
                build_graph_decoder_params(&mut params, &config, &mut rng);
            }
            ModelKind::Fc => {
                build_latent_heads(&mut params, &config, &mut rng);
                build_fc_decoder_params(&mut params, &config, out_dim, &mut rng);
            }
            ModelKind::Pca => {
                let nc = components.unwrap();
                let flat = config.encoder_flat();
                params.insert("enc.coeff.weight", kaiming(&mut rng, vec![flat, nc], flat), true);
                params.insert("enc.coeff.bias", Tensor::zeros(vec![nc]), true);
                params.insert("pca.mean", Tensor::zeros(vec![out_dim]), false);
                params.insert("pca.components", Tensor::zeros(vec![nc, out_dim]), false);
            }
        }

        Ok(Model {
            kind,
            config,
            hierarchy,
            params,
            pca_components: components,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.hierarchy.finest().topology
    }

    /// Load a fitted PCA basis into the frozen baseline parameters.
    pub fn install_pca_basis(&mut self, basis: &pca::PcaBasis) -> Result<()> {
        let nc = self
            .pca_components
            .ok_or_else(|| Error::invalid("not a pca model"))?;
        let d = 2 * self.topology().total_nodes();
        if basis.components.len() != nc * d || basis.mean.len() != d {
            return Err(Error::invalid(format!(
                "pca basis {}x{} does not fit model ({nc} components, dim {d})",
                basis.explained_variance.len(),
                basis.mean.len()
            )));
        }
        self.params
            .set_value("pca.mean", Tensor::new(vec![d], basis.mean.clone())?)?;
        self.params.set_value(
            "pca.components",
            Tensor::new(vec![nc, d], basis.components.clone())?,
        )
    }

    /// Register an image on the tape as the [1, 1, H, W] network input.
    pub fn image_input(&self, tape: &mut Tape, image: &Image) -> Result<TensorId> {
        let s = self.config.image_size;
        if image.width != s || image.height != s {
            return Err(Error::invalid(format!(
                "input image {}x{} does not match configured size {s}",
                image.width, image.height
            )));
        }
        let t = Tensor::new(vec![1, 1, s, s], image.data.clone())?;
        Ok(tape.constant(t))
    }

    /// Residual conv blocks with 2x2 pooling after each; returns the
    /// flattened deepest map and every post-pool map. Accepts any batch size.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, input: TensorId) -> Result<Encoded> {
        let batch = self.batch_of(tape.shape(input))?;
        let mut cur = input;
        let mut maps = Vec::with_capacity(ENCODER_BLOCKS);
        for block in 1..=ENCODER_BLOCKS {
            cur = self.residual_block(tape, bound, block, cur)?;
            cur = tape.maxpool2d(cur, 2)?;
            maps.push(cur);
        }
        let flat = tape.reshape(cur, vec![batch, self.config.encoder_flat()])?;
        Ok(Encoded { flat, maps })
    }

    fn batch_of(&self, shape: &[usize]) -> Result<usize> {
        let s = self.config.image_size;
        match shape {
            [n, 1, h, w] if *h == s && *w == s => Ok(*n),
            other => Err(Error::invalid(format!(
                "encoder input must be [N, 1, {s}, {s}], got {other:?}"
            ))),
        }
    }

    fn residual_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        block: usize,
        x: TensorId,
    ) -> Result<TensorId> {
        let p = |suffix: &str| bound.id(&format!("enc.block{block}.{suffix}"));
        let c1 = tape.conv2d(x, p("conv1.weight"), p("conv1.bias"), 1, 1)?;
        let n1 = tape.layer_norm(c1, p("ln1.gamma"), p("ln1.beta"), LN_EPS)?;
        let a1 = tape.relu(n1);
        let c2 = tape.conv2d(a1, p("conv2.weight"), p("conv2.bias"), 1, 1)?;
        let in_ch = block_in_channels(&self.config, block);
        let out_ch = self.config.encoder_channels[block - 1];
        let skip = if in_ch != out_ch {
            tape.conv2d(x, p("proj.weight"), p("proj.bias"), 1, 0)?
        } else {
            x
        };
        // Normalizing after the addition keeps activation scale flat across
        // blocks; with the skip outside the norm the running sum compounds.
        let sum = tape.add(c2, skip)?;
        let n2 = tape.layer_norm(sum, p("ln2.gamma"), p("ln2.beta"), LN_EPS)?;
        Ok(tape.relu(n2))
    }

    /// Graph decoder: three coarse Chebyshev layers, unpooling, three fine
    /// layers, with coordinate heads after layers 2 and 5 feeding the skip
    /// connections, and a final Chebyshev layer emitting [M, 2] positions.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: TensorId,
        maps: &[TensorId],
    ) -> Result<DecodeOutputs> {
        if !self.kind.is_hybrid() {
            return Err(Error::invalid(format!(
                "decode: {} has no graph decoder",
                self.kind
            )));
        }
        let cfg = &self.config;
        if tape.value(z).numel() != cfg.latent_dim() {
            return Err(Error::invalid(format!(
                "decode: z has {} elements, expected {}",
                tape.value(z).numel(),
                cfg.latent_dim()
            )));
        }
        let skips = &cfg.igsc_levels;
        let lc = tape.constant(self.hierarchy.coarsest().l_scaled.clone());
        let lf = tape.constant(self.hierarchy.finest().l_scaled.clone());

        let mut x = tape.reshape(z, vec![cfg.latent_nodes, cfg.latent_features])?;
        x = self.gcnn_layer(tape, bound, 1, lc, x)?;
        x = self.gcnn_layer(tape, bound, 2, lc, x)?;
        let pos_ds_coarse = self.coord_head(tape, bound, "dec.ds_coarse", lc, x)?;
        if !skips.is_empty() {
            x = self.igsc(tape, bound, 1, maps[skips[0] - 1], x, pos_ds_coarse)?;
        }
        x = self.gcnn_layer(tape, bound, 3, lc, x)?;

        let unpool = tape.constant(self.hierarchy.plans[0].unpool_matrix());
        x = tape.matmul(unpool, x)?;
        x = self.gcnn_layer(tape, bound, 4, lf, x)?;
        x = self.gcnn_layer(tape, bound, 5, lf, x)?;
        let pos_ds_fine = self.coord_head(tape, bound, "dec.ds_fine", lf, x)?;
        if skips.len() > 1 {
            x = self.igsc(tape, bound, 2, maps[skips[1] - 1], x, pos_ds_fine)?;
        }
        x = self.gcnn_layer(tape, bound, 6, lf, x)?;
        let pos_final = self.coord_head(tape, bound, "dec.final", lf, x)?;
        Ok(DecodeOutputs {
            pos_final,
            pos_ds_coarse,
            pos_ds_fine,
        })
    }

    fn gcnn_layer(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        laplacian: TensorId,
        x: TensorId,
    ) -> Result<TensorId> {
        let prefix = format!("dec.layer{layer}");
        let thetas: Vec<TensorId> = (0..self.config.cheb_order)
            .map(|k| bound.id(&format!("{prefix}.theta{k}")))
            .collect();
        let conv = cheb_conv(tape, laplacian, x, &thetas, bound.id(&format!("{prefix}.bias")))?;
        // Leaky so a bad draw can't silence a whole resolution level: zero
        // biases plus a run of negative pre-activations would otherwise cut
        // both the forward features and every upstream gradient.
        Ok(tape.leaky_relu(conv, DECODER_LEAK))
    }

    /// Linear Chebyshev head mapping node features to (x, y); no activation.
    fn coord_head(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        laplacian: TensorId,
        x: TensorId,
    ) -> Result<TensorId> {
        let thetas: Vec<TensorId> = (0..self.config.cheb_order)
            .map(|k| bound.id(&format!("{prefix}.theta{k}")))
            .collect();
        cheb_conv(tape, laplacian, x, &thetas, bound.id(&format!("{prefix}.bias")))
    }

    /// Sample the encoder map at the current position estimates, concatenate
    /// to the node features and project back to the decoder width.
    fn igsc(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        index: usize,
        map: TensorId,
        x: TensorId,
        centers: TensorId,
    ) -> Result<TensorId> {
        let feats = tape.roi_pool(map, centers)?;
        let cat = tape.concat_cols(x, feats)?;
        tape.affine(
            cat,
            bound.id(&format!("dec.igsc{index}.weight")),
            bound.id(&format!("dec.igsc{index}.bias")),
        )
    }

    /// Two affine+relu layers then an affine map to [M, 2] coordinates.
    pub fn fc_decode(&self, tape: &mut Tape, bound: &Bound, z: TensorId) -> Result<TensorId> {
        if self.kind != ModelKind::Fc {
            return Err(Error::invalid(format!(
                "fc_decode: {} has no fc decoder",
                self.kind
            )));
        }
        if tape.value(z).numel() != self.config.latent_dim() {
            return Err(Error::invalid(format!(
                "fc_decode: z has {} elements, expected {}",
                tape.value(z).numel(),
                self.config.latent_dim()
            )));
        }
        let h1 = tape.affine(z, bound.id("dec.fc1.weight"), bound.id("dec.fc1.bias"))?;
        let a1 = tape.relu(h1);
        let h2 = tape.affine(a1, bound.id("dec.fc2.weight"), bound.id("dec.fc2.bias"))?;
        let a2 = tape.relu(h2);
        let out = tape.affine(a2, bound.id("dec.fc3.weight"), bound.id("dec.fc3.bias"))?;
        tape.reshape(out, vec![self.topology().total_nodes(), 2])
    }

    /// Full pass: encode, sample (train) or take the mean (infer), decode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Image,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let bound = self.params.bind(tape);
        let input = self.image_input(tape, image)?;
        let encoded = self.encode(tape, &bound, input)?;

        let outputs = match self.kind {
            ModelKind::Pca => {
                let coeffs = tape.affine(
                    encoded.flat,
                    bound.id("enc.coeff.weight"),
                    bound.id("enc.coeff.bias"),
                )?;
                let recon = tape.affine(
                    coeffs,
                    bound.id("pca.components"),
                    bound.id("pca.mean"),
                )?;
                let pos = tape.reshape(recon, vec![self.topology().total_nodes(), 2])?;
                ForwardOutputs {
                    mu: None,
                    logvar: None,
                    pos_final: pos,
                    pos_ds_coarse: None,
                    pos_ds_fine: None,
                }
            }
            _ => {
                let mu = tape.affine(
                    encoded.flat,
                    bound.id("enc.mu.weight"),
                    bound.id("enc.mu.bias"),
                )?;
                let logvar = tape.affine(
                    encoded.flat,
                    bound.id("enc.logvar.weight"),
                    bound.id("enc.logvar.bias"),
                )?;
                let z = match mode {
                    Mode::Infer => mu,
                    Mode::Train => {
                        let dim = self.config.latent_dim();
                        let eps: Vec<f64> =
                            (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                        let eps = tape.constant(Tensor::new(vec![1, dim], eps)?);
                        tape.reparameterize(mu, logvar, eps)?
                    }
                };
                if self.kind == ModelKind::Fc {
                    let pos = self.fc_decode(tape, &bound, z)?;
                    ForwardOutputs {
                        mu: Some(mu),
                        logvar: Some(logvar),
                        pos_final: pos,
                        pos_ds_coarse: None,
                        pos_ds_fine: None,
                    }
                } else {
                    let dec = self.decode(tape, &bound, z, &encoded.maps)?;
                    ForwardOutputs {
                        mu: Some(mu),
                        logvar: Some(logvar),
                        pos_final: dec.pos_final,
                        pos_ds_coarse: Some(dec.pos_ds_coarse),
                        pos_ds_fine: Some(dec.pos_ds_fine),
                    }
                }
            }
        };
        Ok(ForwardPass { outputs, bound })
    }

    /// Scalar count of the graph decoder's parameters (the `dec.` group).
    pub fn graph_decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with("dec."))
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

fn block_in_channels(config: &HybridGNetConfig, block: usize) -> usize {
    if block == 1 {
        1
    } else {
        config.encoder_channels[block - 2]
    }
}

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("kaiming: shape/data agree")
}

fn build_encoder_params(params: &mut ModelParams, cfg: &HybridGNetConfig, rng: &mut ChaCha8Rng) {
    for block in 1..=ENCODER_BLOCKS {
        let cin = block_in_channels(cfg, block);
        let cout = cfg.encoder_channels[block - 1];
        let name = |s: &str| format!("enc.block{block}.{s}");
        params.insert(
            &name("conv1.weight"),
            kaiming(rng, vec![cout, cin, 3, 3], cin * 9),
            true,
        );
        params.insert(&name("conv1.bias"), Tensor::zeros(vec![cout]), true);
        params.insert(&name("ln1.gamma"), ones(cout), true);
        params.insert(&name("ln1.beta"), Tensor::zeros(vec![cout]), true);
        params.insert(
            &name("conv2.weight"),
            kaiming(rng, vec![cout, cout, 3, 3], cout * 9),
            true,
        );
        params.insert(&name("conv2.bias"), Tensor::zeros(vec![cout]), true);
        params.insert(&name("ln2.gamma"), ones(cout), true);
        params.insert(&name("ln2.beta"), Tensor::zeros(vec![cout]), true);
        if cin != cout {
            params.insert(
                &name("proj.weight"),
                kaiming(rng, vec![cout, cin, 1, 1], cin),
                true,
            );
            params.insert(&name("proj.bias"), Tensor::zeros(vec![cout]), true);
        }
    }
}

fn build_latent_heads(params: &mut ModelParams, cfg: &HybridGNetConfig, rng: &mut ChaCha8Rng) {
    let flat = cfg.encoder_flat();
    let latent = cfg.latent_dim();
    for head in ["mu", "logvar"] {
        params.insert(
            &format!("enc.{head}.weight"),
            kaiming(rng, vec![flat, latent], flat),
            true,
        );
        params.insert(&format!("enc.{head}.bias"), Tensor::zeros(vec![latent]), true);
    }
}

fn build_graph_decoder_params(
    params: &mut ModelParams,
    cfg: &HybridGNetConfig,
    rng: &mut ChaCha8Rng,
) {
    let f = cfg.latent_features;
    let k = cfg.cheb_order;
    for layer in 1..=6 {
        let name = |s: &str| format!("dec.layer{layer}.{s}");
        for t in 0..k {
            params.insert(&name(&format!("theta{t}")), kaiming(rng, vec![f, f], f * k), true);
        }
        params.insert(&name("bias"), Tensor::zeros(vec![f]), true);
    }
    for head in ["dec.ds_coarse", "dec.ds_fine", "dec.final"] {
        for t in 0..k {
            params.insert(
                &format!("{head}.theta{t}"),
                kaiming(rng, vec![f, 2], f * k),
                true,
            );
        }
        params.insert(&format!("{head}.bias"), Tensor::zeros(vec![2]), true);
    }
    for (index, &level) in cfg.igsc_levels.iter().enumerate() {
        let cin = f + cfg.encoder_channels[level - 1];
        params.insert(
            &format!("dec.igsc{}.weight", index + 1),
            kaiming(rng, vec![cin, f], cin),
            true,
        );
        params.insert(&format!("dec.igsc{}.bias", index + 1), Tensor::zeros(vec![f]), true);
    }
}

fn build_fc_decoder_params(
    params: &mut ModelParams,
    cfg: &HybridGNetConfig,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    let latent = cfg.latent_dim();
    let dims = [(latent, FC_HIDDEN), (FC_HIDDEN, FC_HIDDEN), (FC_HIDDEN, out_dim)];
    for (i, (cin, cout)) in dims.into_iter().enumerate() {
        params.insert(
            &format!("dec.fc{}.weight", i + 1),
            kaiming(rng, vec![cin, cout], cin),
            true,
        );
        params.insert(&format!("dec.fc{}.bias", i + 1), Tensor::zeros(vec![cout]), true);
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap()
}

/// Parameter count of a dense convolutional decoder mirroring the encoder
/// (affine from the latent to the deepest map, six two-conv upsample blocks
/// with the channel sequence reversed, 1x1 output conv). The graph decoder
/// replaces all of this; the comparison backs the efficiency claim.
pub fn mirrored_conv_decoder_param_count(cfg: &HybridGNetConfig) -> usize {
    let mut total = cfg.latent_dim() * cfg.encoder_flat() + cfg.encoder_flat();
    let mut chans: Vec<usize> = cfg.encoder_channels.clone();
    chans.reverse();
    for i in 0..ENCODER_BLOCKS {
        let cin = chans[i];
        let cout = if i + 1 < ENCODER_BLOCKS { chans[i + 1] } else { chans[i] };
        total += cin * cout * 9 + cout; // conv1
        total += 2 * cout; // ln1
        total += cout * cout * 9 + cout; // conv2
        total += 2 * cout; // ln2
        if cin != cout {
            total += cin * cout + cout; // 1x1 projection
        }
    }
    total += chans[ENCODER_BLOCKS - 1] + 1; // 1x1 conv to one channel
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn tiny_config() -> HybridGNetConfig {
        HybridGNetConfig {
            image_size: 64,
            encoder_channels: vec![4, 4, 4, 4, 4, 4],
            latent_nodes: 60,
            latent_features: 2,
            cheb_order: 2,
            igsc_levels: vec![6, 5],
            ds_enabled: true,
        }
    }

    fn flat_image(size: usize, value: f64) -> Image {
        Image::new(size, size, vec![value; size * size]).unwrap()
    }

    fn ramp_image(size: usize) -> Image {
        let data: Vec<f64> = (0..size * size)
            .map(|i| 0.5 + 0.4 * ((i as f64) * 0.37).sin())
            .collect();
        Image::new(size, size, data).unwrap()
    }

    #[test]
    fn desk_encode_shapes() {
        let model = Model::new(
            ModelKind::Hybrid,
            HybridGNetConfig::desk(),
            &Topology::chest(),
            None,
            7,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let input = model.image_input(&mut tape, &flat_image(128, 0.3)).unwrap();
        let enc = model.encode(&mut tape, &bound, input).unwrap();
        assert_eq!(tape.shape(enc.flat), &[1, 512]);
        assert_eq!(tape.shape(enc.maps[4]), &[1, 128, 4, 4]);
        assert_eq!(tape.shape(enc.maps[5]), &[1, 128, 2, 2]);

        let mu = tape
            .affine(enc.flat, bound.id("enc.mu.weight"), bound.id("enc.mu.bias"))
            .unwrap();
        assert_eq!(tape.value(mu).numel(), 480);
    }

    #[test]
    fn zero_image_stays_finite() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            3,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model
            .forward(&mut tape, &flat_image(64, 0.0), Mode::Infer, &mut rng)
            .unwrap();
        assert!(tape.value(pass.outputs.mu.unwrap()).is_finite());
        assert!(tape.value(pass.outputs.logvar.unwrap()).is_finite());
        assert!(tape.value(pass.outputs.pos_final).is_finite());
    }

    #[test]
    fn forward_output_shapes_match_topology() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            1,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model
            .forward(&mut tape, &ramp_image(64), Mode::Train, &mut rng)
            .unwrap();
        assert_eq!(tape.shape(pass.outputs.pos_final), &[120, 2]);
        assert_eq!(tape.shape(pass.outputs.pos_ds_coarse.unwrap()), &[60, 2]);
        assert_eq!(tape.shape(pass.outputs.pos_ds_fine.unwrap()), &[120, 2]);
    }

    #[test]
    fn infer_and_seeded_train_are_deterministic() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            9,
        )
        .unwrap();
        let image = ramp_image(64);
        let run = |mode: Mode, seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pass = model.forward(&mut tape, &image, mode, &mut rng).unwrap();
            tape.value(pass.outputs.pos_final).data.clone()
        };
        assert_eq!(run(Mode::Infer, 0), run(Mode::Infer, 99));
        assert_eq!(run(Mode::Train, 5), run(Mode::Train, 5));
        assert_ne!(run(Mode::Train, 5), run(Mode::Train, 6));
    }

    #[test]
    fn zeroed_skips_sever_image_dependence() {
        let mut model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            13,
        )
        .unwrap();
        let zero_group = |m: &mut Model, prefix: &str| {
            let names: Vec<String> = m
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, _)| n.to_string())
                .collect();
            for n in names {
                let shape = m.params.get(&n).unwrap().value.shape.clone();
                m.params.set_value(&n, Tensor::zeros(shape)).unwrap();
            }
        };
        zero_group(&mut model, "dec.igsc");
        zero_group(&mut model, "dec.ds_");

        let z_data: Vec<f64> = (0..120).map(|i| (i as f64 * 0.11).cos()).collect();
        let decode_with = |image: &Image| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let input = model.image_input(&mut tape, image).unwrap();
            let enc = model.encode(&mut tape, &bound, input).unwrap();
            let z = tape.constant(Tensor::new(vec![1, 120], z_data.clone()).unwrap());
            let dec = model.decode(&mut tape, &bound, z, &enc.maps).unwrap();
            tape.value(dec.pos_final).data.clone()
        };
        let a = decode_with(&ramp_image(64));
        let b = decode_with(&flat_image(64, 0.9));
        assert_eq!(a, b);
    }

    #[test]
    fn igsc_routes_image_gradient_into_encoder() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            21,
        )
        .unwrap();
        let image = ramp_image(64);
        let target: Vec<f64> = (0..240).map(|i| 0.5 + 0.3 * (i as f64 * 0.2).sin()).collect();

        let loss_and_grad = |m: &Model, pick: &str| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let pass = m.forward(&mut tape, &image, Mode::Infer, &mut rng).unwrap();
            let t = tape.constant(Tensor::new(vec![120, 2], target.clone()).unwrap());
            let loss = tape.mse(pass.outputs.pos_final, t).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = grads.get(pass.bound.id(pick)).unwrap().to_vec();
            (tape.value(loss).data[0], g)
        };

        let name = "enc.block1.conv1.weight";
        let (_, grad) = loss_and_grad(&model, name);
        assert!(grad.iter().any(|g| g.abs() > 1e-12));

        // Spot-check two elements against central differences.
        let h = 1e-5;
        for &elem in &[0, grad.len() - 1] {
            let mut plus = model.params.get(name).unwrap().value.clone();
            plus.data[elem] += h;
            let mut minus = model.params.get(name).unwrap().value.clone();
            minus.data[elem] -= h;
            let mut m_plus = Model::new(
                ModelKind::Hybrid,
                tiny_config(),
                &Topology::chest(),
                None,
                21,
            )
            .unwrap();
            m_plus.params.set_value(name, plus).unwrap();
            let mut m_minus = Model::new(
                ModelKind::Hybrid,
                tiny_config(),
                &Topology::chest(),
                None,
                21,
            )
            .unwrap();
            m_minus.params.set_value(name, minus).unwrap();
            let (lp, _) = loss_and_grad(&m_plus, name);
            let (lm, _) = loss_and_grad(&m_minus, name);
            let fd = (lp - lm) / (2.0 * h);
            let err = gradcheck::rel_err(fd, grad[elem]);
            assert!(err < 1e-4, "element {elem}: fd {fd} vs {}", grad[elem]);
        }
    }

    #[test]
    fn hybrid_loss_reaches_every_trainable_parameter() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            33,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pass = model
            .forward(&mut tape, &ramp_image(64), Mode::Train, &mut rng)
            .unwrap();
        let target: Vec<f64> = (0..240).map(|i| (i as f64 * 0.31).sin() * 0.4 + 0.5).collect();
        let t_fine = tape.constant(Tensor::new(vec![120, 2], target.clone()).unwrap());
        let t_coarse = tape.constant(Tensor::new(vec![60, 2], target[..120].to_vec()).unwrap());

        let l_final = tape.mse(pass.outputs.pos_final, t_fine).unwrap();
        let l_dsc = tape.mse(pass.outputs.pos_ds_coarse.unwrap(), t_coarse).unwrap();
        let l_dsf = tape.mse(pass.outputs.pos_ds_fine.unwrap(), t_fine).unwrap();
        let l_kl = tape
            .kl_unit_gaussian(pass.outputs.mu.unwrap(), pass.outputs.logvar.unwrap())
            .unwrap();
        let s1 = tape.add(l_final, l_dsc).unwrap();
        let s2 = tape.add(s1, l_dsf).unwrap();
        let kl_w = tape.scale(l_kl, 1e-5);
        let total = tape.add(s2, kl_w).unwrap();
        let grads = tape.backward(total).unwrap();

        for (name, id) in pass.bound.iter() {
            let g = grads.get(id).expect("trainable parameter has gradient");
            assert!(
                g.iter().any(|v| v.abs() > 0.0),
                "dead branch: {name} received an all-zero gradient"
            );
        }
    }

    #[test]
    fn variant_param_sets_differ_only_in_skips() {
        let chest = Topology::chest();
        let full = Model::new(ModelKind::Hybrid, tiny_config(), &chest, None, 0).unwrap();
        let one = Model::new(ModelKind::Hybrid1Igsc, tiny_config(), &chest, None, 0).unwrap();
        let none = Model::new(ModelKind::HybridNoIgsc, tiny_config(), &chest, None, 0).unwrap();
        assert!(full.params.get("dec.igsc2.weight").is_some());
        assert!(one.params.get("dec.igsc1.weight").is_some());
        assert!(one.params.get("dec.igsc2.weight").is_none());
        assert!(none.params.get("dec.igsc1.weight").is_none());
        assert_eq!(one.config.igsc_levels, vec![6]);
        assert!(none.config.igsc_levels.is_empty());

        let names = |m: &Model| -> Vec<String> {
            m.params
                .iter()
                .filter(|(n, _)| !n.starts_with("dec.igsc"))
                .map(|(n, _)| n.to_string())
                .collect()
        };
        assert_eq!(names(&full), names(&none));
    }

    #[test]
    fn graph_decoder_is_smaller_than_mirrored_conv_decoder() {
        let model = Model::new(
            ModelKind::Hybrid,
            HybridGNetConfig::desk(),
            &Topology::chest(),
            None,
            0,
        )
        .unwrap();
        let graph = model.graph_decoder_param_count();
        let conv = mirrored_conv_decoder_param_count(&model.config);
        assert!(
            graph < conv,
            "graph decoder {graph} params vs mirrored conv {conv}"
        );
        // An order of magnitude, not a rounding artifact.
        assert!(graph * 10 < conv);
    }

    #[test]
    fn random_parameter_forwards_stay_finite() {
        let chest = Topology::chest();
        let image = ramp_image(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut model = Model::new(ModelKind::Hybrid, tiny_config(), &chest, None, 0).unwrap();
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for trial in 0..1000 {
            // Unit-scale re-draw of every trainable tensor.
            for name in &names {
                let p = model.params.get(name).unwrap();
                if !p.trainable {
                    continue;
                }
                let shape = p.value.shape.clone();
                let numel = p.value.numel();
                let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
                model
                    .params
                    .set_value(name, Tensor::new(shape, data).unwrap())
                    .unwrap();
            }
            let mut tape = Tape::new();
            let mut fw_rng = ChaCha8Rng::seed_from_u64(trial);
            let pass = model
                .forward(&mut tape, &image, Mode::Train, &mut fw_rng)
                .unwrap();
            assert!(
                tape.value(pass.outputs.pos_final).is_finite(),
                "trial {trial} produced non-finite positions"
            );
        }
    }

    #[test]
    fn batched_encode_equals_independent_encodes() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            17,
        )
        .unwrap();
        let a = ramp_image(64);
        let b = flat_image(64, 0.35);

        let single = |img: &Image| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let input = model.image_input(&mut tape, img).unwrap();
            let enc = model.encode(&mut tape, &bound, input).unwrap();
            tape.value(enc.flat).data.clone()
        };

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let mut stacked = a.data.clone();
        stacked.extend_from_slice(&b.data);
        let input = tape.constant(Tensor::new(vec![2, 1, 64, 64], stacked).unwrap());
        let enc = model.encode(&mut tape, &bound, input).unwrap();
        let flat = &tape.value(enc.flat).data;
        let half = flat.len() / 2;
        assert_eq!(flat[..half], single(&a)[..]);
        assert_eq!(flat[half..], single(&b)[..]);
    }

    #[test]
    fn fc_decoder_zero_weights_give_bias() {
        let chest = Topology::chest();
        let mut model = Model::new(ModelKind::Fc, tiny_config(), &chest, None, 2).unwrap();
        let bias: Vec<f64> = (0..240).map(|i| i as f64 * 0.01).collect();
        model
            .params
            .set_value("dec.fc3.weight", Tensor::zeros(vec![FC_HIDDEN, 240]))
            .unwrap();
        model
            .params
            .set_value("dec.fc3.bias", Tensor::new(vec![240], bias.clone()).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let z = tape.constant(Tensor::zeros(vec![1, 120]));
        let out = model.fc_decode(&mut tape, &bound, z).unwrap();
        assert_eq!(tape.shape(out), &[120, 2]);
        assert_eq!(tape.value(out).data, bias);
    }

    #[test]
    fn fc_head_gradient_check() {
        let chest = Topology::chest();
        let model = Model::new(ModelKind::Fc, tiny_config(), &chest, None, 8).unwrap();
        let z0 = gradcheck::fill(&[1, 120], 5);
        let w = model.params.get("dec.fc1.weight").unwrap().value.clone();
        let result = gradcheck::check(
            &[z0, w],
            gradcheck::DEFAULT_STEP,
            |tape, ids| {
                let bound = model.params.bind(tape);
                let h1 = tape.affine(ids[0], ids[1], bound.id("dec.fc1.bias"))?;
                let a1 = tape.relu(h1);
                let h2 = tape.affine(a1, bound.id("dec.fc2.weight"), bound.id("dec.fc2.bias"))?;
                let a2 = tape.relu(h2);
                let out = tape.affine(a2, bound.id("dec.fc3.weight"), bound.id("dec.fc3.bias"))?;
                Ok(tape.mean(out))
            },
        )
        .unwrap();
        assert!(
            result.passes(gradcheck::DEFAULT_TOL),
            "max rel err {}",
            result.max_rel_err
        );
    }

    #[test]
    fn pca_model_wiring() {
        let chest = Topology::chest();
        let err = Model::new(ModelKind::Pca, tiny_config(), &chest, None, 0);
        assert!(err.is_err(), "pca kind requires a component count");

        let mut model = Model::new(ModelKind::Pca, tiny_config(), &chest, Some(3), 0).unwrap();
        assert!(!model.params.get("pca.components").unwrap().trainable);
        assert!(model.params.get("enc.mu.weight").is_none());

        // Basis rows: constant mean plus three axis-aligned directions.
        let d = 240;
        let mean = vec![0.5; d];
        let mut components = vec![0.0; 3 * d];
        for c in 0..3 {
            components[c * d + c] = 1.0;
        }
        model
            .install_pca_basis(&pca::PcaBasis {
                mean: mean.clone(),
                components,
                explained_variance: vec![3.0, 2.0, 1.0],
            })
            .unwrap();

        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model
            .forward(&mut tape, &ramp_image(64), Mode::Infer, &mut rng)
            .unwrap();
        assert!(pass.outputs.mu.is_none());
        assert_eq!(tape.shape(pass.outputs.pos_final), &[120, 2]);
        // Only the first three outputs can deviate from the mean.
        let out = &tape.value(pass.outputs.pos_final).data;
        assert!(out[3..].iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            0,
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = flat_image(32, 0.1);
        assert!(model.forward(&mut tape, &img, Mode::Infer, &mut rng).is_err());
    }

    #[test]
    fn decode_rejects_wrong_latent_length() {
        let model = Model::new(
            ModelKind::Hybrid,
            tiny_config(),
            &Topology::chest(),
            None,
            0,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let input = model.image_input(&mut tape, &flat_image(64, 0.2)).unwrap();
        let enc = model.encode(&mut tape, &bound, input).unwrap();
        let z = tape.constant(Tensor::zeros(vec![1, 100]));
        assert!(model.decode(&mut tape, &bound, z, &enc.maps).is_err());
    }

}
