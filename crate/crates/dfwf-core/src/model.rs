//! LCNN-style binary classifier.
//!
//! Repeated conv → max-feature-map → max-pool blocks, global statistics
//! pooling over time-frequency, a full connection to the embedding, and a
//! final embedding→2 layer. The embedding (the network output with the last
//! full connection removed) is what the alignment loss constrains; a frozen
//! deep copy of a trained model serves as the distillation teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::tensor::{Graph, NodeId, ParamSet, Tensor};

/// One conv → MFM → max-pool block. `out_channels` counts pre-MFM channels
/// and must be even; `pool = (1, 1)` disables pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: (usize, usize),
    pub pool: (usize, usize),
}

/// How the final feature maps collapse to a fixed-length vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatPooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LcnnConfig {
    pub conv_blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub init_seed: u64,
    /// Whether the final embedding→classes layer carries a bias.
    pub final_bias: bool,
    pub stat_pooling: StatPooling,
}

impl Default for LcnnConfig {
    fn default() -> Self {
        LcnnConfig {
            conv_blocks: vec![
                ConvBlock { out_channels: 16, kernel: 5, stride: (2, 2), pool: (2, 2) },
                ConvBlock { out_channels: 24, kernel: 3, stride: (1, 1), pool: (2, 2) },
                ConvBlock { out_channels: 32, kernel: 3, stride: (1, 1), pool: (2, 2) },
            ],
            embedding_dim: 80,
            num_classes: 2,
            init_seed: 0,
            final_bias: true,
            stat_pooling: StatPooling::Mean,
        }
    }
}

impl LcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidConfig("at least one conv block required".into()));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.out_channels % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: out_channels must be a positive even number for MFM, got {}",
                    b.out_channels
                )));
            }
            if b.kernel == 0 || b.stride.0 == 0 || b.stride.1 == 0 || b.pool.0 == 0 || b.pool.1 == 0
            {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: kernel, stride and pool must be positive"
                )));
            }
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be > 0".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidConfig(format!(
                "this classifier is binary; num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Channel count entering the embedding layer (post-MFM of the last block).
    fn pooled_dim(&self) -> usize {
        self.conv_blocks.last().map(|b| b.out_channels / 2).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    kernel: usize,
    bias: usize,
}

/// The classifier: parameters plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: LcnnConfig,
    params: ParamSet,
    blocks: Vec<BlockSlots>,
    emb_w: usize,
    emb_b: usize,
    out_w: usize,
    out_b: Option<usize>,
}

/// Node handles for one forward pass.
pub struct ForwardNodes {
    pub embedding: NodeId,
    pub logits: NodeId,
}

impl Classifier {
    pub fn new(config: LcnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut in_channels = 1usize;
        for (i, b) in config.conv_blocks.iter().enumerate() {
            let kshape = [b.out_channels, in_channels, b.kernel, b.kernel];
            let fan_in = in_channels * b.kernel * b.kernel;
            let kernel = params.add(format!("conv{i}.weight"), he_uniform(&kshape, fan_in, &mut rng));
            let bias = params.add(format!("conv{i}.bias"), Tensor::zeros(&[b.out_channels]));
            blocks.push(BlockSlots { kernel, bias });
            in_channels = b.out_channels / 2;
        }
        let pooled = config.pooled_dim();
        let emb_w = params.add(
            "embedding.weight",
            he_uniform(&[pooled, config.embedding_dim], pooled, &mut rng),
        );
        let emb_b = params.add("embedding.bias", Tensor::zeros(&[config.embedding_dim]));
        let out_w = params.add(
            "output.weight",
            he_uniform(&[config.embedding_dim, config.num_classes], config.embedding_dim, &mut rng),
        );
        let out_b = if config.final_bias {
            Some(params.add("output.bias", Tensor::zeros(&[config.num_classes])))
        } else {
            None
        };
        Ok(Classifier { config, params, blocks, emb_w, emb_b, out_w, out_b })
    }

    pub fn config(&self) -> &LcnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Build the forward pass on `g` from an input node of shape
    /// `[n, 1, freq, time]`, registering parameters for gradient routing.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<ForwardNodes> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::ShapeMismatch {
                context: "Classifier::forward_graph",
                expected: "[n, 1, freq, time]".into(),
                got: format!("{shape:?}"),
            });
        }
        let mut h = x;
        for (cfg, slots) in self.config.conv_blocks.iter().zip(&self.blocks) {
            let k = g.param(&self.params, slots.kernel);
            let b = g.param(&self.params, slots.bias);
            let pad = cfg.kernel / 2;
            h = g.conv2d(h, k, Some(b), cfg.stride, (pad, pad))?;
            h = g.max_feature_map(h)?;
            if cfg.pool != (1, 1) {
                h = g.max_pool2d(h, cfg.pool, cfg.pool)?;
            }
        }
        let pooled = match self.config.stat_pooling {
            StatPooling::Mean => g.global_mean_pool(h)?,
            StatPooling::Max => g.global_max_pool(h)?,
        };
        let ew = g.param(&self.params, self.emb_w);
        let eb = g.param(&self.params, self.emb_b);
        let embedding = g.linear(pooled, ew, Some(eb))?;
        let ow = g.param(&self.params, self.out_w);
        let ob = match self.out_b {
            Some(slot) => Some(g.param(&self.params, slot)),
            None => None,
        };
        let logits = g.linear(embedding, ow, ob)?;
        Ok(ForwardNodes { embedding, logits })
    }

    /// Inference-only forward: returns `(embeddings [n, emb], logits [n, 2])`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let input = g.leaf(x.clone());
        let nodes = self.forward_graph(&mut g, input)?;
        Ok((g.value(nodes.embedding).clone(), g.value(nodes.logits).clone()))
    }

    pub fn forward_embedding(&self, batch: &[&FeatureMatrix]) -> Result<Tensor> {
        let x = batch_tensor(batch)?;
        Ok(self.forward_batch(&x)?.0)
    }

    pub fn forward_logits(&self, batch: &[&FeatureMatrix]) -> Result<Tensor> {
        let x = batch_tensor(batch)?;
        Ok(self.forward_batch(&x)?.1)
    }

    /// Deep, frozen copy of the current parameters. Training the live model
    /// never changes what a snapshot computes.
    pub fn snapshot_teacher(&self) -> Classifier {
        self.clone()
    }
}

/// Stack feature matrices into an input tensor `[n, 1, rows, cols]`.
pub fn batch_tensor(batch: &[&FeatureMatrix]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("feature batch"));
    }
    let rows = batch[0].rows();
    let cols = batch[0].cols();
    let mut data = Vec::with_capacity(batch.len() * rows * cols);
    for f in batch {
        if f.rows() != rows || f.cols() != cols {
            return Err(Error::ShapeMismatch {
                context: "batch_tensor",
                expected: format!("{rows}x{cols}"),
                got: format!("{}x{}", f.rows(), f.cols()),
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[batch.len(), 1, rows, cols], data)
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * limit) as f32 as f64)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> LcnnConfig {
        LcnnConfig {
            conv_blocks: vec![
                ConvBlock { out_channels: 4, kernel: 3, stride: (2, 2), pool: (2, 2) },
                ConvBlock { out_channels: 8, kernel: 3, stride: (1, 1), pool: (2, 2) },
            ],
            embedding_dim: 80,
            num_classes: 2,
            init_seed: 0,
            final_bias: true,
            stat_pooling: StatPooling::Mean,
        }
    }

    fn feature(seed: u64) -> FeatureMatrix {
        let mut v = seed.wrapping_mul(0x9e3779b97f4a7c15);
        let data: Vec<f64> = (0..60 * 320)
            .map(|_| {
                v = v.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (v >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        FeatureMatrix::new(60, 320, data).unwrap()
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let m = Classifier::new(small_config()).unwrap();
        let f = feature(1);
        let emb = m.forward_embedding(&[&f, &f]).unwrap();
        assert_eq!(emb.shape(), &[2, 80]);
        let (a, b) = emb.data().split_at(80);
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_shape_follows_batch() {
        let m = Classifier::new(small_config()).unwrap();
        let fs: Vec<FeatureMatrix> = (0..3).map(feature).collect();
        let refs: Vec<&FeatureMatrix> = fs.iter().collect();
        let emb = m.forward_embedding(&refs).unwrap();
        assert_eq!(emb.shape(), &[3, 80]);
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let m = Classifier::new(small_config()).unwrap();
        let f = feature(2);
        let logits = m.forward_logits(&[&f]).unwrap();
        let p = crate::losses::softmax(logits.data());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_final_layer_gives_even_odds() {
        let mut m = Classifier::new(small_config()).unwrap();
        let out_w = m.out_w;
        let out_b = m.out_b.unwrap();
        m.params_mut().get_mut(out_w).value.fill(0.0);
        m.params_mut().get_mut(out_b).value.fill(0.0);
        let f = feature(3);
        let logits = m.forward_logits(&[&f]).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
        let p = crate::losses::softmax(logits.data());
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logits_equal_affine_map_of_embedding() {
        let m = Classifier::new(small_config()).unwrap();
        let f = feature(4);
        let emb = m.forward_embedding(&[&f]).unwrap();
        let logits = m.forward_logits(&[&f]).unwrap();
        let w = &m.params().get(m.out_w).value;
        let b = &m.params().get(m.out_b.unwrap()).value;
        for j in 0..2 {
            let expect: f64 = (0..80).map(|k| emb.data()[k] * w.data()[k * 2 + j]).sum::<f64>()
                + b.data()[j];
            assert!((logits.data()[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn snapshot_matches_and_then_freezes() {
        let mut m = Classifier::new(small_config()).unwrap();
        let f = feature(5);
        let teacher = m.snapshot_teacher();
        let before_student = m.forward_logits(&[&f]).unwrap();
        let before_teacher = teacher.forward_logits(&[&f]).unwrap();
        assert_eq!(before_student, before_teacher);

        // mutate the student; teacher output must not move
        for p in m.params_mut().iter_mut() {
            for v in p.value.data_mut().iter_mut() {
                *v += 0.125;
            }
        }
        let after_teacher = teacher.forward_logits(&[&f]).unwrap();
        assert_eq!(before_teacher, after_teacher);
        let after_student = m.forward_logits(&[&f]).unwrap();
        assert_ne!(after_student, before_student);
    }

    #[test]
    fn snapshot_of_snapshot_is_identical() {
        let m = Classifier::new(small_config()).unwrap();
        let s1 = m.snapshot_teacher();
        let s2 = s1.snapshot_teacher();
        let f = feature(6);
        assert_eq!(
            s1.forward_logits(&[&f]).unwrap(),
            s2.forward_logits(&[&f]).unwrap()
        );
    }

    #[test]
    fn rejects_odd_channels_and_bad_class_count() {
        let mut cfg = small_config();
        cfg.conv_blocks[0].out_channels = 5;
        assert!(Classifier::new(cfg).is_err());
        let mut cfg = small_config();
        cfg.num_classes = 3;
        assert!(Classifier::new(cfg).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = Classifier::new(small_config()).unwrap();
        let f = FeatureMatrix::new(59, 320, vec![0.0; 59 * 320]).unwrap();
        let g = FeatureMatrix::new(60, 320, vec![0.0; 60 * 320]).unwrap();
        // mismatched pair is rejected at batching
        assert!(batch_tensor(&[&g, &f]).is_err());
    }
}
