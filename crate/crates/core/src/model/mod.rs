//! FiLM generator and FiLMed U-Net.
//!
//! A one-hot metadata vector goes through a small shared MLP (the FiLM
//! generator) whose sigmoid output is split into one `(gamma, beta)` pair per
//! channel of every modulated layer. Each conv+ReLU unit of the U-Net is
//! followed by a per-channel affine modulation with its slice of those values.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Kernel size of every U-Net convolution except the 1x1 head.
pub const CONV_KERNEL: usize = 3;
/// Initial generator output-layer bias for the gamma half: sigmoid(2) ~ 0.88.
pub const GAMMA_BIAS_INIT: f64 = 3.0;
/// Initial generator output-layer bias for the beta half: sigmoid(-2) ~ 0.12.
pub const BETA_BIAS_INIT: f64 = -3.0;
/// Kernel size and stride of the decoder up-convolutions.
pub const UP_KERNEL: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of poolings (and of up-convolutions).
    pub depth: usize,
    pub in_channels: usize,
    pub base_filters: usize,
    pub n_metadata_classes: usize,
    pub film_enabled: bool,
    pub generator_hidden: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            in_channels: 1,
            base_filters: 8,
            n_metadata_classes: 3,
            film_enabled: true,
            generator_hidden: (64, 16),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.depth < 1 {
            return bad("depth must be at least 1");
        }
        if self.in_channels < 1 {
            return bad("in_channels must be at least 1");
        }
        if self.base_filters < 1 {
            return bad("base_filters must be at least 1");
        }
        if self.n_metadata_classes < 1 {
            return bad("n_metadata_classes must be at least 1");
        }
        if self.generator_hidden.0 < 1 || self.generator_hidden.1 < 1 {
            return bad("generator hidden layers must be non-empty");
        }
        Ok(())
    }

    /// Channel count at resolution level `level` (0 = full resolution,
    /// `depth` = bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Total number of modulated channels across all FiLM layers.
    pub fn film_channels(&self) -> usize {
        channel_plan(self)
            .iter()
            .filter(|e| e.has_film)
            .map(|e| e.channels)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
}

/// One convolutional unit of the U-Net in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    pub block: Block,
    /// 0 or 1: position of the conv inside its block.
    pub unit: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub has_film: bool,
}

/// Convolutional units in forward order: encoder levels, bottleneck, then
/// decoder levels from deepest to shallowest. The 1x1 head is not listed.
pub fn channel_plan(config: &ModelConfig) -> Vec<PlanEntry> {
    let mut plan = Vec::with_capacity(4 * config.depth + 2);
    let unit = |block, in_channels, channels| {
        let first = PlanEntry {
            block,
            unit: 0,
            in_channels,
            channels,
            has_film: true,
        };
        let second = PlanEntry {
            unit: 1,
            in_channels: channels,
            ..first
        };
        [first, second]
    };
    let mut prev = config.in_channels;
    for level in 0..config.depth {
        let c = config.channels_at(level);
        plan.extend(unit(Block::Encoder(level), prev, c));
        prev = c;
    }
    plan.extend(unit(Block::Bottleneck, prev, config.channels_at(config.depth)));
    for level in (0..config.depth).rev() {
        let c = config.channels_at(level);
        // up-conv output concatenated with the skip connection
        plan.extend(unit(Block::Decoder(level), 2 * c, c));
    }
    plan
}

fn block_prefix(block: Block) -> String {
    match block {
        Block::Encoder(l) => format!("enc{l}"),
        Block::Bottleneck => "bottleneck".to_string(),
        Block::Decoder(l) => format!("dec{l}"),
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Bound of the uniform initialisation, `None` for zero-initialised biases.
    pub init_bound: Option<f64>,
}

/// Modulation applied at every FiLM insertion point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Modulation {
    /// `(gamma, beta)` from the generator (ignored when FiLM is disabled).
    Generated,
    /// Every gamma and beta replaced by the given constants.
    Fixed { gamma: f64, beta: f64 },
}

/// Per-sample FiLM parameters for every modulated channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    /// `[n, film_channels]`
    pub gamma: Tensor,
    /// `[n, film_channels]`
    pub beta: Tensor,
    /// `(offset, channels)` of each FiLM layer within the columns.
    pub slices: Vec<(usize, usize)>,
}

/// Graph handles produced by [`FilmUNet::build`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub output: Var,
    pub params: Vec<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

/// FiLMed U-Net: convolution weights plus (when enabled) the single shared
/// generator weight set.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmUNet {
    config: ModelConfig,
    params: Vec<Parameter>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> (Tensor, f64) {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    (Tensor::new(shape.to_vec(), data).expect("shape/data agree"), bound)
}

/// One-hot row vector of length `n_classes` with a 1 at `class_id`.
pub fn one_hot_encode(class_id: usize, n_classes: usize) -> Result<Tensor> {
    if class_id >= n_classes {
        return Err(Error::InvalidArgument(format!(
            "class id {class_id} out of range for {n_classes} classes"
        )));
    }
    let mut data = vec![0.0; n_classes];
    data[class_id] = 1.0;
    Tensor::new(vec![n_classes], data)
}

/// Stacks one-hot rows for a batch of class ids into `[n, n_classes]`.
pub fn one_hot_batch(class_ids: &[usize], n_classes: usize) -> Result<Tensor> {
    let rows = class_ids
        .iter()
        .map(|&c| one_hot_encode(c, n_classes))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows.iter().collect::<Vec<_>>())
}

impl FilmUNet {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases, except
    /// the generator output bias, which starts every FiLM layer close to the
    /// identity ([`GAMMA_BIAS_INIT`], [`BETA_BIAS_INIT`]).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let push_weight = |params: &mut Vec<Parameter>, rng: &mut ChaCha8Rng, name: String, shape: &[usize], fan_in| {
            let (value, bound) = he_uniform(rng, shape, fan_in);
            params.push(Parameter {
                name,
                value,
                init_bound: Some(bound),
            });
        };
        let push_bias = |params: &mut Vec<Parameter>, name: String, len: usize| {
            params.push(Parameter {
                name,
                value: Tensor::zeros(&[len]),
                init_bound: None,
            });
        };
        let k = CONV_KERNEL;
        for entry in channel_plan(&config) {
            let prefix = format!("{}.conv{}", block_prefix(entry.block), entry.unit + 1);
            if let (Block::Decoder(level), 0) = (entry.block, entry.unit) {
                let (cin, cout) = (config.channels_at(level + 1), config.channels_at(level));
                let name = format!("dec{level}.up");
                push_weight(
                    &mut params,
                    &mut rng,
                    format!("{name}.weight"),
                    &[cin, cout, UP_KERNEL, UP_KERNEL],
                    cin * UP_KERNEL * UP_KERNEL,
                );
                push_bias(&mut params, format!("{name}.bias"), cout);
            }
            push_weight(
                &mut params,
                &mut rng,
                format!("{prefix}.weight"),
                &[entry.channels, entry.in_channels, k, k],
                entry.in_channels * k * k,
            );
            push_bias(&mut params, format!("{prefix}.bias"), entry.channels);
        }
        let c0 = config.channels_at(0);
        push_weight(&mut params, &mut rng, "head.weight".into(), &[1, c0, 1, 1], c0);
        push_bias(&mut params, "head.bias".into(), 1);

        if config.film_enabled {
            let (h1, h2) = config.generator_hidden;
            let widths = [
                config.n_metadata_classes,
                h1,
                h2,
                2 * config.film_channels(),
            ];
            for (i, pair) in widths.windows(2).enumerate() {
                let name = format!("film_gen.fc{}", i + 1);
                push_weight(
                    &mut params,
                    &mut rng,
                    format!("{name}.weight"),
                    &[pair[1], pair[0]],
                    pair[0],
                );
                push_bias(&mut params, format!("{name}.bias"), pair[1]);
            }
            let total = config.film_channels();
            let head = params.last_mut().expect("generator output bias");
            for (i, v) in head.value.data_mut().iter_mut().enumerate() {
                *v = if i < total { GAMMA_BIAS_INIT } else { BETA_BIAS_INIT };
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from a config and a full named parameter list.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        let mut out = reference;
        for (slot, p) in out.params.iter_mut().zip(params) {
            if slot.name != p.name {
                return Err(Error::InvalidArgument(format!(
                    "expected parameter `{}`, found `{}`",
                    slot.name, p.name
                )));
            }
            if slot.value.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    left: slot.value.shape().to_vec(),
                    right: p.value.shape().to_vec(),
                });
            }
            slot.value = p.value;
        }
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same convolution weights with the FiLM layers and generator removed.
    pub fn to_plain(&self) -> Self {
        let mut config = self.config.clone();
        config.film_enabled = false;
        let params = self
            .params
            .iter()
            .filter(|p| !p.name.starts_with("film_gen."))
            .cloned()
            .collect();
        Self { config, params }
    }

    fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"))
    }

    fn check_inputs(&self, image: &Tensor, metadata: &Tensor) -> Result<()> {
        let cfg = &self.config;
        let [n, c, h, w] = match image.shape() {
            &[n, c, h, w] => [n, c, h, w],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "image batch must be [n, c, h, w], got {other:?}"
                )))
            }
        };
        if c != cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "unet_forward channels",
                left: image.shape().to_vec(),
                right: vec![n, cfg.in_channels, h, w],
            });
        }
        let multiple = cfg.size_multiple();
        if h % multiple != 0 {
            return Err(Error::NotDivisible {
                what: "image height",
                value: h,
                multiple,
            });
        }
        if w % multiple != 0 {
            return Err(Error::NotDivisible {
                what: "image width",
                value: w,
                multiple,
            });
        }
        if metadata.shape() != [n, cfg.n_metadata_classes] {
            return Err(Error::ShapeMismatch {
                op: "unet_forward metadata",
                left: metadata.shape().to_vec(),
                right: vec![n, cfg.n_metadata_classes],
            });
        }
        Ok(())
    }

    /// Adds every parameter to `graph` as a leaf, in parameter order.
    pub fn add_params(&self, graph: &mut Graph, track_grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), track_grads))
            .collect()
    }

    /// FiLM generator on existing graph nodes: returns `(gamma, beta)` of
    /// shape `[n, film_channels]`.
    pub fn build_generator(
        &self,
        graph: &mut Graph,
        params: &[Var],
        metadata: Var,
    ) -> Result<(Var, Var)> {
        if !self.config.film_enabled {
            return Err(Error::InvalidArgument(
                "model has no FiLM generator (film disabled)".into(),
            ));
        }
        let width = graph.value(metadata).shape().get(1).copied();
        if width != Some(self.config.n_metadata_classes) {
            return Err(Error::ShapeMismatch {
                op: "film_generator metadata",
                left: graph.value(metadata).shape().to_vec(),
                right: vec![0, self.config.n_metadata_classes],
            });
        }
        let p = |name: &str| params[self.index_of(name)];
        let h = graph.linear(metadata, p("film_gen.fc1.weight"), p("film_gen.fc1.bias"))?;
        let h = graph.relu(h);
        let h = graph.linear(h, p("film_gen.fc2.weight"), p("film_gen.fc2.bias"))?;
        let h = graph.relu(h);
        let h = graph.linear(h, p("film_gen.fc3.weight"), p("film_gen.fc3.bias"))?;
        let out = graph.sigmoid(h);
        let total = self.config.film_channels();
        let gamma = graph.slice_columns(out, 0, total)?;
        let beta = graph.slice_columns(out, total, total)?;
        Ok((gamma, beta))
    }

    /// Runs the generator alone.
    pub fn film_generator_forward(&self, metadata: &Tensor) -> Result<FilmParams> {
        let mut graph = Graph::new();
        let params = self.add_params(&mut graph, false);
        let meta = graph.constant(metadata.clone());
        let (gamma, beta) = self.build_generator(&mut graph, &params, meta)?;
        let mut slices = Vec::new();
        let mut offset = 0;
        for entry in channel_plan(&self.config).iter().filter(|e| e.has_film) {
            slices.push((offset, entry.channels));
            offset += entry.channels;
        }
        Ok(FilmParams {
            gamma: graph.value(gamma).clone(),
            beta: graph.value(beta).clone(),
            slices,
        })
    }

    /// Builds the full forward pass on `graph` from parameter leaves
    /// `params` (as returned by [`FilmUNet::add_params`]).
    pub fn build_with_params(
        &self,
        graph: &mut Graph,
        params: &[Var],
        image: Var,
        metadata: Var,
        modulation: Modulation,
    ) -> Result<ForwardVars> {
        self.check_inputs(graph.value(image), graph.value(metadata))?;
        let cfg = &self.config;
        let batch = graph.value(image).shape()[0];
        let p = |name: &str| params[self.index_of(name)];

        let film = match (cfg.film_enabled, modulation) {
            (true, Modulation::Generated) => Some(self.build_generator(graph, params, metadata)?),
            _ => None,
        };
        let mut film_offset = 0;
        let mut modulate = |graph: &mut Graph, x: Var, channels: usize| -> Result<Var> {
            let out = match (film, modulation) {
                (Some((gamma, beta)), _) => {
                    let g = graph.slice_columns(gamma, film_offset, channels)?;
                    let b = graph.slice_columns(beta, film_offset, channels)?;
                    graph.per_channel_affine(x, g, b)?
                }
                (None, Modulation::Fixed { gamma, beta }) => {
                    let g = graph.constant(Tensor::filled(&[batch, channels], gamma));
                    let b = graph.constant(Tensor::filled(&[batch, channels], beta));
                    graph.per_channel_affine(x, g, b)?
                }
                (None, Modulation::Generated) => x,
            };
            film_offset += channels;
            Ok(out)
        };

        let mut unit = |graph: &mut Graph, x: Var, entry: &PlanEntry| -> Result<Var> {
            let prefix = format!("{}.conv{}", block_prefix(entry.block), entry.unit + 1);
            let y = graph.conv2d(
                x,
                p(&format!("{prefix}.weight")),
                p(&format!("{prefix}.bias")),
                CONV_KERNEL / 2,
                1,
            )?;
            let y = graph.relu(y);
            if entry.has_film {
                modulate(graph, y, entry.channels)
            } else {
                Ok(y)
            }
        };

        let plan = channel_plan(cfg);
        let mut x = image;
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut entries = plan.iter();
        for _ in 0..cfg.depth {
            x = unit(graph, x, entries.next().expect("plan"))?;
            x = unit(graph, x, entries.next().expect("plan"))?;
            skips.push(x);
            x = graph.maxpool2d(x, 2)?;
        }
        x = unit(graph, x, entries.next().expect("plan"))?;
        x = unit(graph, x, entries.next().expect("plan"))?;
        for level in (0..cfg.depth).rev() {
            let up = graph.conv_transpose2d(
                x,
                p(&format!("dec{level}.up.weight")),
                Some(p(&format!("dec{level}.up.bias"))),
                UP_KERNEL,
            )?;
            x = graph.concat_channels(up, skips[level])?;
            x = unit(graph, x, entries.next().expect("plan"))?;
            x = unit(graph, x, entries.next().expect("plan"))?;
        }
        let logits = graph.conv2d(x, p("head.weight"), p("head.bias"), 0, 1)?;
        let output = graph.sigmoid(logits);
        Ok(ForwardVars {
            output,
            params: params.to_vec(),
            gamma: film.map(|f| f.0),
            beta: film.map(|f| f.1),
        })
    }

    /// Adds parameters, image and metadata to `graph` and builds the forward pass.
    pub fn build(
        &self,
        graph: &mut Graph,
        image: &Tensor,
        metadata: &Tensor,
        modulation: Modulation,
        track_grads: bool,
    ) -> Result<ForwardVars> {
        self.check_inputs(image, metadata)?;
        let params = self.add_params(graph, track_grads);
        let image = graph.constant(image.clone());
        let metadata = graph.constant(metadata.clone());
        self.build_with_params(graph, &params, image, metadata, modulation)
    }

    /// Forward pass with generated modulation; returns `[n, 1, h, w]`
    /// probabilities.
    pub fn forward(&self, image: &Tensor, metadata: &Tensor) -> Result<Tensor> {
        self.forward_with(image, metadata, Modulation::Generated)
    }

    pub fn forward_with(
        &self,
        image: &Tensor,
        metadata: &Tensor,
        modulation: Modulation,
    ) -> Result<Tensor> {
        let mut graph = Graph::new();
        let vars = self.build(&mut graph, image, metadata, modulation, false)?;
        Ok(graph.value(vars.output).clone())
    }
}

/// Free-function form of [`FilmUNet::forward`].
pub fn unet_forward(model: &FilmUNet, image: &Tensor, metadata: &Tensor) -> Result<Tensor> {
    model.forward(image, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(film: bool) -> ModelConfig {
        ModelConfig {
            depth: 1,
            in_channels: 1,
            base_filters: 2,
            n_metadata_classes: 3,
            film_enabled: film,
            generator_hidden: (64, 16),
        }
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot_encode(0, 3).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(one_hot_encode(2, 3).unwrap().data(), &[0.0, 0.0, 1.0]);
        for c in 0..5 {
            let v = one_hot_encode(c, 5).unwrap();
            assert_eq!(v.data().iter().sum::<f64>(), 1.0);
        }
        assert!(one_hot_encode(3, 3).is_err());
    }

    #[test]
    fn plan_doubles_channels() {
        let cfg = ModelConfig::default();
        let plan = channel_plan(&cfg);
        let enc: Vec<_> = plan
            .iter()
            .filter(|e| matches!(e.block, Block::Encoder(_)) && e.unit == 0)
            .map(|e| e.channels)
            .collect();
        assert_eq!(enc, vec![8, 16, 32]);
        let bottleneck: Vec<_> = plan
            .iter()
            .filter(|e| e.block == Block::Bottleneck)
            .map(|e| e.channels)
            .collect();
        assert_eq!(bottleneck, vec![64, 64]);
    }

    #[test]
    fn film_channel_total_matches_closed_form() {
        let cfg = ModelConfig::default();
        // encoder and decoder each modulate 2 * base * (2^depth - 1) channels,
        // the bottleneck 2 * base * 2^depth
        let b = cfg.base_filters;
        let closed = 4 * b * ((1 << cfg.depth) - 1) + 2 * b * (1 << cfg.depth);
        assert_eq!(cfg.film_channels(), closed);
        assert_eq!(closed, 352);
        let model = FilmUNet::init(cfg.clone(), 1).unwrap();
        let fc3 = model.param("film_gen.fc3.weight").unwrap();
        assert_eq!(fc3.value.shape()[0] / 2, cfg.film_channels());
    }

    #[test]
    fn depth_one_plan_has_six_film_points() {
        let plan = channel_plan(&tiny(true));
        let count = |f: fn(&Block) -> bool| plan.iter().filter(|e| e.has_film && f(&e.block)).count();
        assert_eq!(count(|b| matches!(b, Block::Encoder(_))), 2);
        assert_eq!(count(|b| matches!(b, Block::Bottleneck)), 2);
        assert_eq!(count(|b| matches!(b, Block::Decoder(_))), 2);
        assert_eq!(plan.len(), 6);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = FilmUNet::init(ModelConfig::default(), 7).unwrap();
        let b = FilmUNet::init(ModelConfig::default(), 7).unwrap();
        let c = FilmUNet::init(ModelConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a.params() {
            match p.init_bound {
                Some(bound) => {
                    let fan_in = if p.name.starts_with("film_gen") {
                        p.value.shape()[1]
                    } else if p.name.contains(".up.") {
                        p.value.shape()[0] * 4
                    } else {
                        p.value.shape()[1..].iter().product()
                    };
                    let expected = (6.0 / fan_in as f64).sqrt();
                    assert!((bound - expected).abs() < 1e-15, "{}", p.name);
                    assert!(p.value.data().iter().all(|v| v.abs() <= bound), "{}", p.name);
                }
                None if p.name == "film_gen.fc3.bias" => {
                    let total = a.config().film_channels();
                    assert!(p.value.data()[..total].iter().all(|&v| v == GAMMA_BIAS_INIT));
                    assert!(p.value.data()[total..].iter().all(|&v| v == BETA_BIAS_INIT));
                }
                None => assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name),
            }
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for (depth, base, classes) in [(1, 2, 3), (3, 8, 3), (2, 4, 2)] {
            let cfg = ModelConfig {
                depth,
                base_filters: base,
                n_metadata_classes: classes,
                ..ModelConfig::default()
            };
            let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
            let mut expected = 0;
            let mut prev = cfg.in_channels;
            for l in 0..depth {
                let c = base << l;
                expected += conv(prev, c, 3) + conv(c, c, 3);
                prev = c;
            }
            let cb = base << depth;
            expected += conv(prev, cb, 3) + conv(cb, cb, 3);
            for l in 0..depth {
                let c = base << l;
                expected += (2 * c) * c * 4 + c; // up-conv
                expected += conv(2 * c, c, 3) + conv(c, c, 3);
            }
            expected += conv(base, 1, 1);
            let plain = FilmUNet::init(ModelConfig { film_enabled: false, ..cfg.clone() }, 0).unwrap();
            assert_eq!(plain.parameter_count(), expected);

            let total = cfg.film_channels();
            let generator = classes * 64 + 64 + 64 * 16 + 16 + 16 * 2 * total + 2 * total;
            let filmed = FilmUNet::init(cfg, 0).unwrap();
            assert_eq!(filmed.parameter_count(), expected + generator);
            // one generator, never per-layer copies
            assert_eq!(filmed.params().iter().filter(|p| p.name.starts_with("film_gen")).count(), 6);
        }
    }

    #[test]
    fn generator_outputs_are_open_unit_interval_and_deterministic() {
        let model = FilmUNet::init(ModelConfig::default(), 3).unwrap();
        let meta = one_hot_batch(&[1, 1, 0], 3).unwrap();
        let film = model.film_generator_forward(&meta).unwrap();
        let total = model.config().film_channels();
        assert_eq!(film.gamma.shape(), &[3, total]);
        for v in film.gamma.data().iter().chain(film.beta.data()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        assert_eq!(film.gamma.data()[..total], film.gamma.data()[total..2 * total]);
        assert_eq!(film.beta.data()[..total], film.beta.data()[total..2 * total]);
        let covered: usize = film.slices.iter().map(|s| s.1).sum();
        assert_eq!(covered, total);
        for pair in film.slices.windows(2) {
            assert_eq!(pair[0].0 + pair[0].1, pair[1].0);
        }
    }

    #[test]
    fn zeroed_generator_head_emits_one_half() {
        let mut model = FilmUNet::init(ModelConfig::default(), 3).unwrap();
        model.param_mut("film_gen.fc3.weight").unwrap().value.data_mut().fill(0.0);
        model.param_mut("film_gen.fc3.bias").unwrap().value.data_mut().fill(0.0);
        let film = model.film_generator_forward(&one_hot_batch(&[2], 3).unwrap()).unwrap();
        assert!(film.gamma.data().iter().chain(film.beta.data()).all(|&v| v == 0.5));
    }

    #[test]
    fn generator_weights_are_shared_by_all_layers() {
        let model = FilmUNet::init(ModelConfig::default(), 5).unwrap();
        let meta = one_hot_batch(&[0], 3).unwrap();
        let before = model.film_generator_forward(&meta).unwrap();
        let mut perturbed = model.clone();
        for v in perturbed.param_mut("film_gen.fc1.weight").unwrap().value.data_mut() {
            *v += 0.05;
        }
        let after = perturbed.film_generator_forward(&meta).unwrap();
        for &(offset, len) in &before.slices {
            let changed = (offset..offset + len)
                .any(|i| before.gamma.data()[i] != after.gamma.data()[i]);
            assert!(changed, "layer at offset {offset} unaffected");
        }
    }

    #[test]
    fn forward_shape_and_range() {
        let model = FilmUNet::init(ModelConfig::default(), 11).unwrap();
        let image = Tensor::new(
            vec![1, 1, 32, 32],
            (0..1024).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        )
        .unwrap();
        let out = model.forward(&image, &one_hot_batch(&[0], 3).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 1, 32, 32]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_size_names_the_multiple() {
        let model = FilmUNet::init(ModelConfig::default(), 0).unwrap();
        let err = model
            .forward(&Tensor::zeros(&[1, 1, 20, 32]), &one_hot_batch(&[0], 3).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("divisible by 8"), "{err}");
    }

    #[test]
    fn wrong_metadata_width_rejected() {
        let model = FilmUNet::init(tiny(true), 0).unwrap();
        let err = model.film_generator_forward(&Tensor::zeros(&[1, 2]));
        assert!(err.is_err());
    }

    #[test]
    fn identity_modulation_equals_plain_unet() {
        let model = FilmUNet::init(ModelConfig::default(), 21).unwrap();
        let plain = model.to_plain();
        let image = Tensor::new(
            vec![2, 1, 32, 32],
            (0..2048).map(|i| ((i * 13) % 17) as f64 / 17.0).collect(),
        )
        .unwrap();
        let meta = one_hot_batch(&[0, 2], 3).unwrap();
        let a = model
            .forward_with(&image, &meta, Modulation::Fixed { gamma: 1.0, beta: 0.0 })
            .unwrap();
        let b = plain.forward(&image, &meta).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let model = FilmUNet::init(tiny(true), 4).unwrap();
        let imgs: Vec<Tensor> = (0..3)
            .map(|s| {
                Tensor::new(
                    vec![1, 8, 8],
                    (0..64).map(|i| ((i * (s + 3)) % 11) as f64 / 11.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let classes = [0, 1, 2];
        let batch = Tensor::stack(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let out = model.forward(&batch, &one_hot_batch(&classes, 3).unwrap()).unwrap();
        let order = [2, 0, 1];
        let permuted = Tensor::stack(&order.iter().map(|&i| &imgs[i]).collect::<Vec<_>>()).unwrap();
        let pclasses: Vec<usize> = order.iter().map(|&i| classes[i]).collect();
        let pout = model.forward(&permuted, &one_hot_batch(&pclasses, 3).unwrap()).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(pout.index_batch(k), out.index_batch(i));
        }
    }
}
