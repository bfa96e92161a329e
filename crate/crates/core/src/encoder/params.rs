use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;

/// Weights of one pre-LN transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Every trainable tensor of the encoder. The entity block of `tok` doubles
/// as the MEM head.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tok: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl Block {
    fn zeros(dim: usize, ffn: usize) -> Self {
        let v = |n| Array1::zeros(n);
        let m = |r, c| Array2::zeros((r, c));
        Block {
            ln1_g: v(dim),
            ln1_b: v(dim),
            wq: m(dim, dim),
            bq: v(dim),
            wk: m(dim, dim),
            bk: v(dim),
            wv: m(dim, dim),
            bv: v(dim),
            wo: m(dim, dim),
            bo: v(dim),
            ln2_g: v(dim),
            ln2_b: v(dim),
            w1: m(dim, ffn),
            b1: v(ffn),
            w2: m(ffn, dim),
            b2: v(dim),
        }
    }

    fn random(rng: &mut impl Rng, dim: usize, ffn: usize) -> Self {
        let mut b = Block::zeros(dim, ffn);
        b.ln1_g.fill(1.0);
        b.ln2_g.fill(1.0);
        let s = 1.0 / (dim as f64).sqrt();
        b.wq = gaussian(rng, dim, dim, s);
        b.wk = gaussian(rng, dim, dim, s);
        b.wv = gaussian(rng, dim, dim, s);
        b.wo = gaussian(rng, dim, dim, s);
        b.w1 = gaussian(rng, dim, ffn, s);
        b.w2 = gaussian(rng, ffn, dim, 1.0 / (ffn as f64).sqrt());
        b
    }

    fn tensors(&self) -> [(&'static str, &[f64]); 16] {
        [
            ("ln1_g", self.ln1_g.as_slice().unwrap()),
            ("ln1_b", self.ln1_b.as_slice().unwrap()),
            ("wq", self.wq.as_slice().unwrap()),
            ("bq", self.bq.as_slice().unwrap()),
            ("wk", self.wk.as_slice().unwrap()),
            ("bk", self.bk.as_slice().unwrap()),
            ("wv", self.wv.as_slice().unwrap()),
            ("bv", self.bv.as_slice().unwrap()),
            ("wo", self.wo.as_slice().unwrap()),
            ("bo", self.bo.as_slice().unwrap()),
            ("ln2_g", self.ln2_g.as_slice().unwrap()),
            ("ln2_b", self.ln2_b.as_slice().unwrap()),
            ("w1", self.w1.as_slice().unwrap()),
            ("b1", self.b1.as_slice().unwrap()),
            ("w2", self.w2.as_slice().unwrap()),
            ("b2", self.b2.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 16] {
        [
            ("ln1_g", self.ln1_g.as_slice_mut().unwrap()),
            ("ln1_b", self.ln1_b.as_slice_mut().unwrap()),
            ("wq", self.wq.as_slice_mut().unwrap()),
            ("bq", self.bq.as_slice_mut().unwrap()),
            ("wk", self.wk.as_slice_mut().unwrap()),
            ("bk", self.bk.as_slice_mut().unwrap()),
            ("wv", self.wv.as_slice_mut().unwrap()),
            ("bv", self.bv.as_slice_mut().unwrap()),
            ("wo", self.wo.as_slice_mut().unwrap()),
            ("bo", self.bo.as_slice_mut().unwrap()),
            ("ln2_g", self.ln2_g.as_slice_mut().unwrap()),
            ("ln2_b", self.ln2_b.as_slice_mut().unwrap()),
            ("w1", self.w1.as_slice_mut().unwrap()),
            ("b1", self.b1.as_slice_mut().unwrap()),
            ("w2", self.w2.as_slice_mut().unwrap()),
            ("b2", self.b2.as_slice_mut().unwrap()),
        ]
    }
}

impl Params {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Params {
            tok: Array2::zeros((cfg.vocab_size, cfg.dim)),
            pos: Array2::zeros((cfg.max_len, cfg.dim)),
            blocks: (0..cfg.layers)
                .map(|_| Block::zeros(cfg.dim, cfg.ffn_dim))
                .collect(),
            lnf_g: Array1::zeros(cfg.dim),
            lnf_b: Array1::zeros(cfg.dim),
        }
    }

    /// Embeddings (entity rows included) ~ N(0, 0.02); projections scaled by
    /// `1/sqrt(fan_in)`; layer-norm gains 1 and biases 0.
    pub fn random(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let tok = gaussian(rng, cfg.vocab_size, cfg.dim, 0.02);
        let pos = gaussian(rng, cfg.max_len, cfg.dim, 0.02);
        let blocks = (0..cfg.layers)
            .map(|_| Block::random(rng, cfg.dim, cfg.ffn_dim))
            .collect();
        Params {
            tok,
            pos,
            blocks,
            lnf_g: Array1::ones(cfg.dim),
            lnf_b: Array1::zeros(cfg.dim),
        }
    }

    /// Tensors in checkpoint order: `tok`, `pos`, each block's sixteen
    /// tensors, then `lnf_g`, `lnf_b`. All arrays are row-major.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![
            ("tok".to_string(), self.tok.as_slice().unwrap()),
            ("pos".to_string(), self.pos.as_slice().unwrap()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, s)| (format!("block{i}.{n}"), s)));
        }
        out.push(("lnf_g".to_string(), self.lnf_g.as_slice().unwrap()));
        out.push(("lnf_b".to_string(), self.lnf_b.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![
            ("tok".to_string(), self.tok.as_slice_mut().unwrap()),
            ("pos".to_string(), self.pos.as_slice_mut().unwrap()),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.tensors_mut()
                    .into_iter()
                    .map(|(n, s)| (format!("block{i}.{n}"), s)),
            );
        }
        out.push(("lnf_g".to_string(), self.lnf_g.as_slice_mut().unwrap()));
        out.push(("lnf_b".to_string(), self.lnf_b.as_slice_mut().unwrap()));
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for (_, s) in self.tensors_mut() {
            s.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Flattened copy of all values in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, s) in self.tensors() {
            out.extend_from_slice(s);
        }
        out
    }
}
