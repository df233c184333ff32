use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub tile_size: usize,
    /// Output channels of conv layers 1..=n (3×3, stride 1, padding 1).
    pub conv_widths: Vec<usize>,
    /// 1-based conv layer indices followed by a 2×2 max-pool.
    pub pool_after: Vec<usize>,
    /// Widths of the two hidden fully-connected layers.
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            tile_size: 64,
            conv_widths: vec![8, 8, 16, 16, 32, 32, 32, 32],
            pool_after: vec![2, 4, 6, 8],
            hidden: [64, 32],
            seed: 17,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config("classifier needs at least one conv layer of positive width".into()));
        }
        if self.pool_after.iter().any(|&l| l == 0 || l > self.conv_widths.len()) {
            return Err(Error::Config("pool_after refers to a missing conv layer".into()));
        }
        let pools = self.pool_after.len() as u32;
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(2usize.pow(pools)) {
            return Err(Error::Config(format!(
                "tile size {} not divisible by 2^{pools}",
                self.tile_size
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side `k_l` of conv layer `layer`'s output.
    pub fn layer_extent(&self, layer: usize) -> usize {
        let pools_before = self.pool_after.iter().filter(|&&l| l < layer).count() as u32;
        self.tile_size / 2usize.pow(pools_before)
    }

    pub fn feature_len(&self) -> usize {
        let side = self.tile_size / 2usize.pow(self.pool_after.len() as u32);
        side * side * self.conv_widths.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// 1-based position in the backbone; the layer index used by taps.
    pub index: usize,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub pool_after: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// He-normal initialisation with the given fan-in, scaled by `gain`.
pub(crate) fn he_tensor(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape/len agree")
}

impl Dense {
    pub(crate) fn init(n_in: usize, n_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            weight: he_tensor(&[n_in, n_out], n_in, gain, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }
}

/// Which parts of a classifier graph carry gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GraphOptions {
    pub train_backbone: bool,
    pub train_head: bool,
    /// Track the gradient with respect to the (standardised) input tile.
    pub input_grad: bool,
    /// Register a tap on every conv layer output.
    pub taps: bool,
}

#[derive(Clone, Debug)]
pub struct ClassifierNodes {
    pub input: NodeId,
    /// `(layer index, conv output node)` before the non-linearity.
    pub conv_outputs: Vec<(usize, NodeId)>,
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    /// Positive-class probability `s`.
    pub score: NodeId,
    /// Kernel/bias leaves in backbone order.
    pub backbone_params: Vec<NodeId>,
    /// Weight/bias leaves in head order.
    pub head_params: Vec<NodeId>,
}

/// Flattened features, `(layer index, conv output)` pairs and parameter leaves.
pub type BackboneNodes = (NodeId, Vec<(usize, NodeId)>, Vec<NodeId>);

/// Conv backbone followed by a two-hidden-layer fully connected head with a
/// two-way softmax output. The tile score is the second softmax component.
#[derive(Clone, Debug, PartialEq)]
pub struct TileClassifier {
    pub config: ClassifierConfig,
    pub backbone: Vec<ConvLayer>,
    pub head: Vec<Dense>,
    pub frozen_backbone: bool,
}

/// Maps RGB values in `[0,255]` to roughly zero-centred inputs.
pub fn standardize_tile(tile: &Tensor) -> Tensor {
    tile.map(|v| v / 127.5 - 1.0)
}

impl TileClassifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut backbone = Vec::with_capacity(config.conv_widths.len());
        let mut cin = 3;
        for (i, &cout) in config.conv_widths.iter().enumerate() {
            let index = i + 1;
            backbone.push(ConvLayer {
                index,
                kernel: he_tensor(&[3, 3, cin, cout], 9 * cin, 1.0, &mut rng),
                bias: Tensor::zeros(&[cout]),
                pool_after: config.pool_after.contains(&index),
            });
            cin = cout;
        }
        let head = Self::fresh_head(&config, &mut rng);
        Ok(TileClassifier {
            config,
            backbone,
            head,
            frozen_backbone: false,
        })
    }

    fn fresh_head(config: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Vec<Dense> {
        let [h1, h2] = config.hidden;
        vec![
            Dense::init(config.feature_len(), h1, 1.0, rng),
            Dense::init(h1, h2, 1.0, rng),
            Dense::init(h2, 2, 0.5, rng),
        ]
    }

    /// Replaces the head with freshly initialised layers drawn from `seed`.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = Self::fresh_head(&self.config, &mut rng);
    }

    pub fn tile_size(&self) -> usize {
        self.config.tile_size
    }

    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.backbone.iter().map(|l| l.index).collect()
    }

    pub fn check_tile(&self, tile: &Tensor) -> Result<()> {
        let l = self.config.tile_size;
        if tile.shape() != [l, l, 3] {
            return Err(Error::Shape(format!(
                "tile of shape {:?}, classifier expects {l}×{l}×3",
                tile.shape()
            )));
        }
        Ok(())
    }

    fn leaf(g: &mut Graph, t: &Tensor, trainable: bool) -> Result<NodeId> {
        if trainable {
            g.param(t.clone())
        } else {
            g.input(t.clone())
        }
    }

    /// Builds the backbone on `input` and returns `(flattened features, conv outputs, params)`.
    pub fn build_backbone(&self, g: &mut Graph, input: NodeId, opts: GraphOptions) -> Result<BackboneNodes> {
        let mut h = input;
        let mut outputs = Vec::with_capacity(self.backbone.len());
        let mut params = Vec::with_capacity(2 * self.backbone.len());
        for layer in &self.backbone {
            let k = Self::leaf(g, &layer.kernel, opts.train_backbone)?;
            let b = Self::leaf(g, &layer.bias, opts.train_backbone)?;
            params.extend([k, b]);
            let z = g.conv2d(h, k, 1, 1)?;
            let z = g.add_bias(z, b)?;
            if opts.taps {
                g.register_tap(layer.index, z)?;
            }
            outputs.push((layer.index, z));
            h = g.relu(z)?;
            if layer.pool_after {
                h = g.max_pool2(h)?;
            }
        }
        let n = g.value(h).len();
        let features = g.reshape(h, &[n])?;
        Ok((features, outputs, params))
    }

    /// Builds the head on a flat feature node and returns `(logits, params)`.
    pub fn build_head(&self, g: &mut Graph, features: NodeId, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let mut h = features;
        let mut params = Vec::with_capacity(2 * self.head.len());
        for (i, layer) in self.head.iter().enumerate() {
            let w = Self::leaf(g, &layer.weight, trainable)?;
            let b = Self::leaf(g, &layer.bias, trainable)?;
            params.extend([w, b]);
            h = g.linear(h, w, b)?;
            if i + 1 < self.head.len() {
                h = g.relu(h)?;
            }
        }
        Ok((h, params))
    }

    pub fn build_graph(&self, g: &mut Graph, tile: &Tensor, opts: GraphOptions) -> Result<ClassifierNodes> {
        self.check_tile(tile)?;
        let x = standardize_tile(tile);
        let input = if opts.input_grad { g.param(x)? } else { g.input(x)? };
        let (features, conv_outputs, backbone_params) = self.build_backbone(g, input, opts)?;
        let (logits, head_params) = self.build_head(g, features, opts.train_head)?;
        let probs = g.softmax(logits)?;
        let score = g.select(probs, 1)?;
        Ok(ClassifierNodes {
            input,
            conv_outputs,
            features,
            logits,
            probs,
            score,
            backbone_params,
            head_params,
        })
    }

    /// Positive-class probability `s ∈ [0,1]` for one `L×L×3` tile.
    pub fn classify_tile(&self, tile: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let nodes = self.build_graph(&mut g, tile, GraphOptions::default())?;
        g.value(nodes.score).item()
    }

    /// Flattened backbone output for one tile (no gradients).
    pub fn backbone_features(&self, tile: &Tensor) -> Result<Tensor> {
        self.check_tile(tile)?;
        let mut g = Graph::new();
        let input = g.input(standardize_tile(tile))?;
        let (features, _, _) = self.build_backbone(&mut g, input, GraphOptions::default())?;
        Ok(g.value(features).clone())
    }

    /// Score from precomputed backbone features; bit-identical to [`Self::classify_tile`].
    pub fn head_score(&self, features: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let f = g.input(features.clone())?;
        let (logits, _) = self.build_head(&mut g, f, false)?;
        let probs = g.softmax(logits)?;
        Ok(g.value(probs).data()[1])
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.backbone {
            out.push((format!("backbone.{}.kernel", l.index), &l.kernel));
            out.push((format!("backbone.{}.bias", l.index), &l.bias));
        }
        for (i, d) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &d.weight));
            out.push((format!("head.{i}.bias"), &d.bias));
        }
        out
    }

    pub fn backbone_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.head.iter_mut().flat_map(|d| [&mut d.weight, &mut d.bias]).collect()
    }

    /// Backbone parameters followed by head parameters.
    pub fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let head = self.head.iter_mut().flat_map(|d| [&mut d.weight, &mut d.bias]);
        self.backbone
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .chain(head)
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "tile-classifier",
            "config": self.config,
            "frozen_backbone": self.frozen_backbone,
        });
        crate::tensor::checkpoint::save(path, meta, &self.named_params())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = crate::tensor::checkpoint::load(path)?;
        if ck.meta["kind"] != "tile-classifier" {
            return Err(Error::Checkpoint("not a tile-classifier checkpoint".into()));
        }
        let config: ClassifierConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = TileClassifier::new(config)?;
        model.frozen_backbone = ck.meta["frozen_backbone"].as_bool().unwrap_or(false);
        for l in &mut model.backbone {
            l.kernel = ck.get(&format!("backbone.{}.kernel", l.index))?.clone();
            l.bias = ck.get(&format!("backbone.{}.bias", l.index))?.clone();
        }
        for (i, d) in model.head.iter_mut().enumerate() {
            d.weight = ck.get(&format!("head.{i}.weight"))?.clone();
            d.bias = ck.get(&format!("head.{i}.bias"))?.clone();
        }
        Ok(model)
    }
}
