//! Two modality encoders into a shared latent space and one shared decoder.
//!
//! Encoders are residual stacks over feature frames (`features×T` in,
//! `F×T` out, stride 1). Each block computes
//! `f(x) = W_out · gelu(conv3(x) + b1) + b2` and updates `x ← f(x)·(1/√2)^ℓ + x`.
//! The decoder normalises each latent frame, applies an affine gain/bias and a
//! one-hidden-layer MLP to produce letter logits (`T×K`).

pub mod checkpoint;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Modality;
use crate::numerics::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use train::{
    batch_loss, train_step, OptimizerConfig, OptimizerState, StepMetrics, TrainConfig, TrainItem,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub emg_features: usize,
    pub audio_features: usize,
    /// Latent size `F`, shared by both encoders.
    pub latent_features: usize,
    pub num_blocks: usize,
}

impl EncoderConfig {
    pub fn input_features(&self, m: Modality) -> usize {
        match m {
            Modality::Emg => self.emg_features,
            Modality::Audio => self.audio_features,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_hidden: usize,
    /// Output classes including blank.
    pub num_classes: usize,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                emg_features: 8,
                audio_features: 8,
                latent_features: 16,
                num_blocks: 2,
            },
            decoder_hidden: 32,
            num_classes: 10,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.latent_features == 0 || e.num_blocks == 0 {
            return Err(Error::config("latent_features and num_blocks must be >= 1"));
        }
        if e.emg_features == 0 || e.audio_features == 0 || self.decoder_hidden == 0 {
            return Err(Error::config("feature sizes must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least blank plus one symbol"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Residual scale `(1/√2)^ℓ` of block `ℓ` (1-based).
pub fn residual_scale(block: usize) -> f64 {
    std::f64::consts::FRAC_1_SQRT_2.powi(block as i32)
}

const BLOCK_SLOTS: usize = 6;
const BLOCK_NAMES: [&str; BLOCK_SLOTS] = ["prev", "mid", "next", "b1", "out", "b2"];
const DECODER_NAMES: [&str; 6] = ["norm.gain", "norm.bias", "hidden.w", "hidden.b", "out.w", "out.b"];

/// All trainable tensors, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Emg => "emg",
        Modality::Audio => "audio",
    }
}

/// Names and shapes of every tensor, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let e = &cfg.encoder;
    let f = e.latent_features;
    let mut out = Vec::new();
    for m in [Modality::Emg, Modality::Audio] {
        let n = modality_name(m);
        out.push((format!("{n}.in.w"), f, e.input_features(m)));
        out.push((format!("{n}.in.b"), f, 1));
        for l in 1..=e.num_blocks {
            for s in BLOCK_NAMES {
                let (r, c) = if s.starts_with('b') { (f, 1) } else { (f, f) };
                out.push((format!("{n}.block{l}.{s}"), r, c));
            }
        }
    }
    let (h, k) = (cfg.decoder_hidden, cfg.num_classes);
    for (s, r, c) in [
        (DECODER_NAMES[0], f, 1),
        (DECODER_NAMES[1], f, 1),
        (DECODER_NAMES[2], h, f),
        (DECODER_NAMES[3], h, 1),
        (DECODER_NAMES[4], k, h),
        (DECODER_NAMES[5], k, 1),
    ] {
        out.push((format!("decoder.{s}"), r, c));
    }
    out
}

fn encoder_base(cfg: &ModelConfig, m: Modality) -> usize {
    let per = 2 + BLOCK_SLOTS * cfg.encoder.num_blocks;
    match m {
        Modality::Emg => 0,
        Modality::Audio => per,
    }
}

fn decoder_base(cfg: &ModelConfig) -> usize {
    2 * (2 + BLOCK_SLOTS * cfg.encoder.num_blocks)
}

impl ModelParams {
    /// Seeded initialisation: weights uniform in `±1/√fan_in`, biases zero, norm gain one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c) in layout(config) {
            let t = if name.ends_with("norm.gain") {
                Tensor::full(r, c, 1.0)
            } else if c == 1 {
                Tensor::zeros(r, c)
            } else {
                let fan_in = if name.contains(".block") && !name.ends_with(".out") { 3 * c } else { c };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::matrix(r, c, data)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Builds parameters from named tensors; names and shapes must match the config.
    pub fn from_tensors(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if named.len() != expected.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, t), (en, r, c)) in named.into_iter().zip(expected) {
            if name != en || t.rows() != r || t.cols() != c {
                return Err(Error::contract(format!(
                    "tensor {name} {}x{} does not match {en} {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Order-sensitive checksum of every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Places every tensor on the tape; trainable when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            config: self.config.clone(),
            vars,
        }
    }

    /// Latent sequence `F×T` for a `features×T` signal.
    pub fn encode(&self, m: Modality, signal: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(signal.clone());
        let z = b.encode(&mut tape, m, x)?;
        Ok(tape.value(z).clone())
    }

    /// Letter logits `T×K` for a latent `F×T`; the same decoder serves both modalities.
    pub fn decode_logits(&self, latent: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let z = tape.constant(latent.clone());
        let y = b.decode(&mut tape, z)?;
        Ok(tape.value(y).clone())
    }

    /// `decode_logits ∘ encode`.
    pub fn logits(&self, m: Modality, signal: &Tensor) -> Result<Tensor> {
        self.decode_logits(&self.encode(m, signal)?)
    }
}

/// Parameters placed on a tape.
pub struct Bound {
    config: ModelConfig,
    vars: Vec<Var>,
}

/// What each residual block computes; `Identity` exists for closed-form checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BlockFn {
    Learned,
    #[cfg_attr(not(test), allow(dead_code))]
    Identity,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn encode(&self, tape: &mut Tape, m: Modality, x: Var) -> Result<Var> {
        self.encode_with(tape, m, x, BlockFn::Learned)
    }

    pub(crate) fn encode_with(&self, tape: &mut Tape, m: Modality, x: Var, block_fn: BlockFn) -> Result<Var> {
        let want = self.config.encoder.input_features(m);
        let xv = tape.value(x);
        if xv.rows() != want {
            return Err(Error::dim(format!(
                "{} signal has {} features, encoder expects {want}",
                modality_name(m),
                xv.rows()
            )));
        }
        if xv.cols() == 0 {
            return Err(Error::pre("signal has no frames"));
        }
        if !xv.is_finite() {
            return Err(Error::Numeric(format!("{} signal", modality_name(m))));
        }
        let base = encoder_base(&self.config, m);
        let p = |i: usize| self.vars[base + i];
        let proj = tape.matmul(p(0), x)?;
        let mut h = tape.add_col_bias(proj, p(1))?;
        for l in 1..=self.config.encoder.num_blocks {
            let o = 2 + BLOCK_SLOTS * (l - 1);
            let f = match block_fn {
                BlockFn::Identity => h,
                BlockFn::Learned => {
                    let prev = tape.shift_cols(h, 1);
                    let next = tape.shift_cols(h, -1);
                    let a = tape.matmul(p(o), prev)?;
                    let b = tape.matmul(p(o + 1), h)?;
                    let c = tape.matmul(p(o + 2), next)?;
                    let ab = tape.add(a, b)?;
                    let conv = tape.add(ab, c)?;
                    let pre = tape.add_col_bias(conv, p(o + 3))?;
                    let act = tape.gelu(pre);
                    let out = tape.matmul(p(o + 4), act)?;
                    tape.add_col_bias(out, p(o + 5))?
                }
            };
            let scaled = tape.scale(f, residual_scale(l));
            h = tape.add(scaled, h)?;
        }
        Ok(h)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let zv = tape.value(z);
        if zv.rows() != self.config.encoder.latent_features {
            return Err(Error::dim(format!(
                "latent has {} features, decoder expects {}",
                zv.rows(),
                self.config.encoder.latent_features
            )));
        }
        if !zv.is_finite() {
            return Err(Error::Numeric("latent".into()));
        }
        let base = decoder_base(&self.config);
        let p = |i: usize| self.vars[base + i];
        let n = tape.layer_norm_cols(z, self.config.layer_norm_eps);
        let n = tape.scale_rows(n, p(0))?;
        let n = tape.add_col_bias(n, p(1))?;
        let h = tape.matmul(p(2), n)?;
        let h = tape.add_col_bias(h, p(3))?;
        let h = tape.gelu(h);
        let o = tape.matmul(p(4), h)?;
        let o = tape.add_col_bias(o, p(5))?;
        Ok(tape.transpose(o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ctc_on_tape;
    use crate::numerics::Tape;
    use rand::Rng;

    fn cfg(blocks: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                emg_features: 3,
                audio_features: 4,
                latent_features: 5,
                num_blocks: blocks,
            },
            decoder_hidden: 6,
            num_classes: 4,
            layer_norm_eps: 1e-5,
            seed: 7,
        }
    }

    fn random_signal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn residual_scales() {
        assert!((residual_scale(2) - 0.5).abs() < 1e-15);
        assert!((residual_scale(1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn identity_blocks_multiply_by_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for blocks in 1..=3 {
            let p = ModelParams::init(&cfg(blocks)).unwrap();
            let x = random_signal(&mut rng, 3, 7);
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let z = b.encode_with(&mut tape, Modality::Emg, xv, BlockFn::Identity).unwrap();
            let factor: f64 = (1..=blocks).map(|l| 1.0 + residual_scale(l)).product();
            let proj = crate::numerics::matmul(p.get("emg.in.w").unwrap(), &x).unwrap();
            let expect = proj.map(|v| v * factor);
            assert!(tape.value(z).max_abs_diff(&expect) < 1e-12, "blocks {blocks}");
        }
    }

    #[test]
    fn zero_block_weights_leave_the_projection() {
        let mut p = ModelParams::init(&cfg(2)).unwrap();
        let names: Vec<String> = p.names().iter().filter(|n| n.starts_with("audio.block")).cloned().collect();
        for n in names {
            let t = p.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_signal(&mut rng, 4, 5);
        let z = p.encode(Modality::Audio, &x).unwrap();
        let proj = crate::numerics::matmul(p.get("audio.in.w").unwrap(), &x).unwrap();
        assert!(z.max_abs_diff(&proj) < 1e-15);
    }

    #[test]
    fn shapes_and_dimension_errors() {
        let p = ModelParams::init(&cfg(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 7, 32] {
            let z = p.encode(Modality::Emg, &random_signal(&mut rng, 3, t)).unwrap();
            assert_eq!((z.rows(), z.cols()), (5, t));
            let y = p.decode_logits(&z).unwrap();
            assert_eq!((y.rows(), y.cols()), (t, 4));
        }
        assert!(matches!(
            p.encode(Modality::Emg, &random_signal(&mut rng, 4, 3)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(p.decode_logits(&Tensor::zeros(3, 2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn decoder_is_shared_between_modalities() {
        let p = ModelParams::init(&cfg(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ze = p.encode(Modality::Emg, &random_signal(&mut rng, 3, 6)).unwrap();
        let za = p.encode(Modality::Audio, &random_signal(&mut rng, 4, 6)).unwrap();
        let ye = p.decode_logits(&ze).unwrap();
        let ya = p.decode_logits(&za).unwrap();
        // interleave frames from both encoders: each row depends only on its own latent
        let cols: Vec<Vec<f64>> = (0..6)
            .map(|t| if t % 2 == 0 { ze.column_vec(t) } else { za.column_vec(t) })
            .collect();
        let mixed = p.decode_logits(&Tensor::from_columns(&cols).unwrap()).unwrap();
        for t in 0..6 {
            let src = if t % 2 == 0 { &ye } else { &ya };
            for k in 0..4 {
                assert!((mixed.get(t, k) - src.get(t, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_reaches_every_encoder_parameter() {
        let p = ModelParams::init(&cfg(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let x = tape.constant(random_signal(&mut rng, 3, 6));
        let z = b.encode(&mut tape, Modality::Emg, x).unwrap();
        let y = b.decode(&mut tape, z).unwrap();
        let loss = ctc_on_tape(&mut tape, y, &[1, 2], 0).unwrap();
        let g = tape.backward(loss).unwrap();
        for (name, &v) in p.names().iter().zip(b.vars()) {
            let norm: f64 = g.get(&tape, v).data().iter().map(|x| x * x).sum();
            if name.starts_with("emg.") || name.starts_with("decoder.") {
                assert!(norm > 0.0, "{name}");
            } else {
                assert_eq!(norm, 0.0, "{name}");
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&cfg(2)).unwrap();
        let b = ModelParams::init(&cfg(2)).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&ModelConfig { seed: 8, ..cfg(2) }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        assert!(ModelParams::init(&ModelConfig { num_classes: 1, ..cfg(2) }).is_err());
    }
}
