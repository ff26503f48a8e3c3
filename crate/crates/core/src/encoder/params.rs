use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Architecture of the encoder. Serialized into every checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_len: 128,
            vocab_size: 9,
            num_labels: 2,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn == 0 || self.max_len < 7 || self.vocab_size < 9 || self.num_labels == 0 {
            return Err(Error::Config("encoder dimensions out of range".into()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Same encoder body (everything except the classification head).
    pub fn body_matches(&self, other: &EncoderConfig) -> bool {
        EncoderConfig {
            num_labels: 0,
            ..*self
        } == EncoderConfig {
            num_labels: 0,
            ..*other
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl LayerParams {
    fn zeros(d: usize, ffn: usize) -> Self {
        let z = |r, c| Array2::zeros((r, c));
        LayerParams {
            ln1_g: z(1, d),
            ln1_b: z(1, d),
            wq: z(d, d),
            bq: z(1, d),
            wk: z(d, d),
            bk: z(1, d),
            wv: z(d, d),
            bv: z(1, d),
            wo: z(d, d),
            bo: z(1, d),
            ln2_g: z(1, d),
            ln2_b: z(1, d),
            w1: z(d, ffn),
            b1: z(1, ffn),
            w2: z(ffn, d),
            b2: z(1, d),
        }
    }

    fn tensors(&self) -> [&Array2<f64>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Every trainable tensor: embeddings, transformer blocks, final layer
/// norm, MLM projection and classification head. Biases and layer-norm
/// parameters are stored as `1 x n` matrices. The same type doubles as the
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParameters {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
    pub mlm_w: Array2<f64>,
    pub mlm_b: Array2<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array2<f64>,
}

pub const INIT_STD: f64 = 0.02;

impl EncoderParameters {
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.d_model;
        EncoderParameters {
            config,
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(d, config.ffn))
                .collect(),
            lnf_g: Array2::zeros((1, d)),
            lnf_b: Array2::zeros((1, d)),
            mlm_w: Array2::zeros((d, config.vocab_size)),
            mlm_b: Array2::zeros((1, config.vocab_size)),
            cls_w: Array2::zeros((2 * d, config.num_labels)),
            cls_b: Array2::zeros((1, config.num_labels)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: EncoderConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = seed::rng(seed_value, &[seed::stream::INIT]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let names = p.tensor_names();
        for (name, t) in names.iter().zip(p.tensors_mut()) {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if leaf.ends_with("_g") {
                t.fill(1.0);
            } else if is_bias(leaf) {
                t.fill(0.0);
            } else {
                t.mapv_inplace(|_| normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    /// Fresh classification head for `num_labels` classes; the encoder body
    /// is kept.
    pub fn with_new_head(&self, num_labels: usize, seed_value: u64) -> Self {
        let mut p = self.clone();
        p.config.num_labels = num_labels;
        let mut rng = seed::rng(seed_value, &[seed::stream::HEAD_INIT]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        p.cls_w = Array2::from_shape_simple_fn((2 * p.config.d_model, num_labels), || {
            normal.sample(&mut rng)
        });
        p.cls_b = Array2::zeros((1, num_labels));
        p
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.layers.len() {
            names.extend(LAYER_TENSORS.iter().map(|n| format!("layer{l}.{n}")));
        }
        names.extend(
            ["lnf_g", "lnf_b", "mlm_w", "mlm_b", "cls_w", "cls_b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    /// All tensors in declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([
            &self.lnf_g, &self.lnf_b, &self.mlm_w, &self.mlm_b, &self.cls_w, &self.cls_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.mlm_w,
            &mut self.mlm_b,
            &mut self.cls_w,
            &mut self.cls_b,
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &EncoderParameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Rebuilds parameters from tensors in declared order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        let mut p = Self::zeros(config);
        let n = p.tensors().len();
        if tensors.len() != n {
            return Err(Error::Checkpoint(format!("expected {n} tensors, found {}", tensors.len())));
        }
        let names = p.tensor_names();
        for ((slot, t), name) in p.tensors_mut().into_iter().zip(tensors).zip(names) {
            if slot.dim() != t.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    slot.dim(),
                    t.dim()
                )));
            }
            *slot = t;
        }
        Ok(p)
    }
}

fn is_bias(leaf: &str) -> bool {
    leaf.starts_with('b') || leaf.ends_with("_b")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_conventional() {
        let cfg = EncoderConfig {
            vocab_size: 20,
            ..Default::default()
        };
        let a = EncoderParameters::init(cfg, 5).unwrap();
        let b = EncoderParameters::init(cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, EncoderParameters::init(cfg, 6).unwrap());
        assert!(a.layers[0].ln1_g.iter().all(|&x| x == 1.0));
        assert!(a.layers[1].bq.iter().all(|&x| x == 0.0));
        assert!(a.cls_b.iter().all(|&x| x == 0.0));
        let std = (a.layers[0].wq.iter().map(|x| x * x).sum::<f64>() / a.layers[0].wq.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
        assert_eq!(a.tensor_names().len(), a.tensors().len());
    }

    #[test]
    fn rejects_bad_head_count() {
        let cfg = EncoderConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(EncoderParameters::init(cfg, 0).is_err());
    }
}
