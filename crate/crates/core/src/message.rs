//! Secret messages, expression labels and the mapping networks that turn them into
//! the latent vectors driving the generator's style layers.

use std::fmt;

use cisnet_autograd::{Graph, Linear, Module, Param, Tensor, Var};
use rand::Rng;

use crate::error::{check_dim, CisError, Result};

pub const N_EXPRESSIONS: usize = 7;
pub const EXPRESSION_NAMES: [&str; N_EXPRESSIONS] =
    ["surprise", "sadness", "neutral", "joy", "anger", "fear", "disgust"];

/// Slope of the leaky rectifier used between hidden layers throughout the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SecretMessage {
    bits: Vec<u8>,
}

impl SecretMessage {
    pub const MAX_BITS: usize = 64;

    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.len() > Self::MAX_BITS {
            return Err(CisError::Invalid(format!(
                "message length {} outside 1..={}",
                bits.len(),
                Self::MAX_BITS
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(CisError::Invalid(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    /// Parse a literal string of '0'/'1' characters, first character first.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(CisError::Invalid(format!("bad bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }

    pub fn random<R: Rng + ?Sized>(n_bits: usize, rng: &mut R) -> Self {
        assert!((1..=Self::MAX_BITS).contains(&n_bits));
        Self {
            bits: (0..n_bits).map(|_| rng.random_range(0..=1u8)).collect(),
        }
    }

    /// The `n_bits`-bit message whose binary value is `value` (most significant bit first).
    pub fn from_index(value: u64, n_bits: usize) -> Result<Self> {
        Self::new((0..n_bits).rev().map(|i| ((value >> i) & 1) as u8).collect())
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }
}

impl fmt::Display for SecretMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// One of the seven expression classes, carried as a one-hot vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExpressionLabel(usize);

impl ExpressionLabel {
    pub fn new(index: usize) -> Result<Self> {
        if index < N_EXPRESSIONS {
            Ok(Self(index))
        } else {
            Err(CisError::Invalid(format!("expression index {index} outside 0..7")))
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        EXPRESSION_NAMES
            .iter()
            .position(|&n| n == lower)
            .map(Self)
            .ok_or_else(|| CisError::Invalid(format!("unknown expression `{name}`")))
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn name(self) -> &'static str {
        EXPRESSION_NAMES[self.0]
    }

    pub fn onehot(self) -> [f64; N_EXPRESSIONS] {
        let mut v = [0.0; N_EXPRESSIONS];
        v[self.0] = 1.0;
        v
    }
}

/// Stack labels into an `[N, 7]` one-hot matrix.
pub fn onehot_batch(labels: &[ExpressionLabel]) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), N_EXPRESSIONS]);
    for (i, l) in labels.iter().enumerate() {
        t.data_mut()[i * N_EXPRESSIONS + l.0] = 1.0;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(CisError::Invalid("latent vector has non-finite values".into()))
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    fn as_row(&self) -> Tensor {
        Tensor::new(&[1, self.0.len()], self.0.clone())
    }
}

/// Bits to the symmetric `{-1, +1}` input domain.
pub fn encode_bits(msg: &SecretMessage) -> Vec<f64> {
    msg.bits
        .iter()
        .map(|&b| if b == 0 { -1.0 } else { 1.0 })
        .collect()
}

/// Encode a batch of equal-length messages into an `[N, n_bits]` matrix.
pub fn encode_batch(msgs: &[SecretMessage]) -> Tensor {
    let n = msgs[0].len();
    let mut data = Vec::with_capacity(msgs.len() * n);
    for m in msgs {
        assert_eq!(m.len(), n, "mixed message lengths in one batch");
        data.extend(encode_bits(m));
    }
    Tensor::new(&[msgs.len(), n], data)
}

/// Fully connected stack: leaky rectifier between layers, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        width: usize,
        output: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        assert!(depth >= 1);
        let layers = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { input } else { width };
                let fan_out = if i + 1 == depth { output } else { width };
                Linear::new(fan_in, fan_out, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        assert!(!layers.is_empty());
        for pair in layers.windows(2) {
            assert_eq!(pair[0].output_dim(), pair[1].input_dim(), "layer chain mismatch");
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Var) -> Var {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        h
    }
}

impl Module for Mlp {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.layers.collect_params(prefix, out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.layers.collect_params_mut(prefix, out);
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MappingConfig {
    pub n_bits: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub width: usize,
    pub fusion_layers: usize,
    pub expression: bool,
}

/// Bit-mapping network, plus the expression-mapping and fusion networks when the
/// model is expression-conditioned.
#[derive(Clone, Debug)]
pub struct MappingParams {
    pub bits: Mlp,
    pub expression: Option<Mlp>,
    pub fusion: Option<Mlp>,
}

impl MappingParams {
    pub fn new<R: Rng + ?Sized>(cfg: &MappingConfig, rng: &mut R) -> Self {
        let bits = Mlp::new(cfg.n_bits, cfg.width, cfg.latent_dim, cfg.layers, rng);
        let (expression, fusion) = if cfg.expression {
            (
                Some(Mlp::new(N_EXPRESSIONS, cfg.width, cfg.latent_dim, cfg.layers, rng)),
                Some(Mlp::new(
                    2 * cfg.latent_dim,
                    cfg.width,
                    cfg.latent_dim,
                    cfg.fusion_layers,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        Self {
            bits,
            expression,
            fusion,
        }
    }

    pub fn n_bits(&self) -> usize {
        self.bits.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        match &self.fusion {
            Some(f) => f.output_dim(),
            None => self.bits.output_dim(),
        }
    }

    pub fn has_expression(&self) -> bool {
        self.expression.is_some()
    }

    /// `[N, n_bits]` signals to `[N, latent]` bit latents.
    pub fn map_message_var(&self, signal: &Var) -> Result<Var> {
        check_dim("message signal length", self.n_bits(), signal.shape()[1])?;
        Ok(self.bits.forward(signal))
    }

    /// `[N, 7]` one-hot labels to `[N, latent]` expression latents.
    pub fn map_expression_var(&self, onehot: &Var) -> Result<Var> {
        let net = self
            .expression
            .as_ref()
            .ok_or_else(|| CisError::Invalid("model has no expression mapping".into()))?;
        check_dim("expression label length", N_EXPRESSIONS, onehot.shape()[1])?;
        Ok(net.forward(onehot))
    }

    /// Concatenate `[z_b; z_l]` and apply the fusion network.
    pub fn fuse_var(&self, z_b: &Var, z_l: &Var) -> Result<Var> {
        let net = self
            .fusion
            .as_ref()
            .ok_or_else(|| CisError::Invalid("model has no fusion network".into()))?;
        let (db, dl) = (z_b.shape()[1], z_l.shape()[1]);
        check_dim("fusion input", net.input_dim(), db + dl)?;
        Ok(net.forward(&z_b.graph().concat(&[z_b, z_l], 1)))
    }

    /// The full path from message signal (and label, in expression mode) to the final latent.
    pub fn latent_var(&self, signal: &Var, onehot: Option<&Var>) -> Result<Var> {
        let z_b = self.map_message_var(signal)?;
        match (self.has_expression(), onehot) {
            (false, None) => Ok(z_b),
            (true, Some(l)) => {
                let z_l = self.map_expression_var(l)?;
                self.fuse_var(&z_b, &z_l)
            }
            (true, None) => Err(CisError::Invalid("expression model needs a label".into())),
            (false, Some(_)) => Err(CisError::Invalid(
                "label given to a model without expression control".into(),
            )),
        }
    }
}

impl Module for MappingParams {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        use cisnet_autograd::param::join;
        self.bits.collect_params(&join(prefix, "bits"), out);
        self.expression.collect_params(&join(prefix, "expression"), out);
        self.fusion.collect_params(&join(prefix, "fusion"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        use cisnet_autograd::param::join;
        self.bits.collect_params_mut(&join(prefix, "bits"), out);
        self.expression.collect_params_mut(&join(prefix, "expression"), out);
        self.fusion.collect_params_mut(&join(prefix, "fusion"), out);
    }
}

fn single_row(f: impl FnOnce(&Graph) -> Result<Var>) -> Result<LatentVector> {
    let g = Graph::inference();
    let out = f(&g)?;
    LatentVector::new(out.value().data().to_vec())
}

pub fn map_message(signal: &[f64], p: &MappingParams) -> Result<LatentVector> {
    check_dim("message signal length", p.n_bits(), signal.len())?;
    single_row(|g| {
        let s = g.constant(Tensor::new(&[1, signal.len()], signal.to_vec()));
        p.map_message_var(&s)
    })
}

pub fn map_expression(label: ExpressionLabel, p: &MappingParams) -> Result<LatentVector> {
    single_row(|g| {
        let l = g.constant(Tensor::new(&[1, N_EXPRESSIONS], label.onehot().to_vec()));
        p.map_expression_var(&l)
    })
}

pub fn fuse(z_b: &LatentVector, z_l: &LatentVector, p: &MappingParams) -> Result<LatentVector> {
    single_row(|g| p.fuse_var(&g.constant(z_b.as_row()), &g.constant(z_l.as_row())))
}

/// `t` independent copies of `z`, one per style injection point.
pub fn broadcast_latent(z: &LatentVector, t: usize) -> Result<Vec<LatentVector>> {
    if t < 1 {
        return Err(CisError::Invalid("need at least one injection point".into()));
    }
    Ok(vec![z.clone(); t])
}
