//! Attention-based intensity model for marked event sequences.
//!
//! Pipeline per sequence: type embedding plus fixed sinusoidal encoding of
//! (position, time); a stack of causal attention layers whose weights come
//! from a Gaussian kernel on learned query/key projections, averaged across
//! heads, with residual connection and layer normalization; per-position
//! intensity parameters `(mu, alpha, gamma)`; and two MLP heads reading the
//! intensity curve's endpoints — one for next-event-type logits, one for the
//! normalized next-gap estimate.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EventSequence;
use crate::error::{Error, Result};
use crate::tensor::{concat, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub num_types: usize,
    pub embed_dim: usize,
    pub attention_heads: usize,
    pub attention_layers: usize,
    pub mlp_layers: usize,
    pub hidden_size: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_types: 4,
            embed_dim: 32,
            attention_heads: 8,
            attention_layers: 4,
            mlp_layers: 3,
            hidden_size: 32,
            dropout_rate: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0
            || self.embed_dim == 0
            || self.attention_heads == 0
            || self.attention_layers == 0
            || self.mlp_layers == 0
            || self.hidden_size == 0
        {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.embed_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by attention_heads {}",
                self.embed_dim, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of (position index, event time): entry `k` of row `i`
/// is `sin(w_k * (i + t_i))` on even dims and `cos` on odd dims, with the
/// transformer frequency schedule `w_k = 10000^(-2*floor(k/2)/d)`. Fixed,
/// not trainable. Every entry lies in `[-1, 1]`.
pub fn temporal_encoding(times: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len() * d);
    for (i, &t) in times.iter().enumerate() {
        for k in 0..d {
            let freq = 10000f64.powf(-(2.0 * (k / 2) as f64) / d as f64);
            let arg = freq * (i as f64 + t);
            out.push(if k % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    out
}

struct AttnHead {
    w_q: Tensor,
    w_k: Tensor,
    w_g: Tensor,
}

struct AttnLayer {
    heads: Vec<AttnHead>,
    ln_gain: Tensor,
    ln_bias: Tensor,
}

struct Mlp {
    /// (weight, bias) pairs; gelu + dropout between layers, linear output.
    layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let std = 1.0 / (w[0] as f64).sqrt();
            let weight = Tensor::randn(vec![w[0], w[1]], std, rng);
            let bias = Tensor::param_from_vec(vec![1, w[1]], vec![0.0; w[1]]).unwrap();
            layers.push((weight, bias));
        }
        Mlp { layers }
    }

    fn forward(&self, x: &Tensor, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Tensor> {
        let mut cur = x.clone();
        let mut dropout = dropout;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            cur = cur.matmul(w)?.add(b)?;
            if i < last {
                cur = cur.gelu();
                if let Some((rate, rng)) = dropout.as_mut() {
                    cur = apply_dropout(&cur, *rate, rng)?;
                }
            }
        }
        Ok(cur)
    }

    fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [
                    (format!("{prefix}.{i}.w"), w.clone()),
                    (format!("{prefix}.{i}.b"), b.clone()),
                ]
            })
            .collect()
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1/(1-rate)`. Identity when rate is 0.
fn apply_dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    use rand::Rng;
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect();
    let m = Tensor::from_vec(x.shape().to_vec(), mask)?;
    x.mul(&m)
}

/// Per-position outputs of one forward pass over a sequence.
pub struct Forward {
    /// (L, d) hidden states; row i encodes events 0..=i.
    pub hidden: Tensor,
    /// (L, K) each: intensity parameterization per position.
    pub mu: Tensor,
    pub alpha: Tensor,
    pub gamma: Tensor,
    /// (L, K) next-event-type logits.
    pub logits: Tensor,
    /// (L, 1) normalized next-gap estimates.
    pub time_pred: Tensor,
}

/// The deep Hawkes network: encoder, intensity parameterization, and the
/// two prediction heads.
pub struct HawkesNet {
    pub config: ModelConfig,
    w_embed: Tensor,
    attn: Vec<AttnLayer>,
    w_mu: Tensor,
    b_mu: Tensor,
    w_alpha: Tensor,
    b_alpha: Tensor,
    w_gamma: Tensor,
    b_gamma: Tensor,
    event_head: Mlp,
    time_head: Mlp,
}

const LN_EPS: f64 = 1e-5;

impl HawkesNet {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<HawkesNet> {
        config.validate()?;
        let k = config.num_types;
        let d = config.embed_dim;
        let dh = d / config.attention_heads;
        let std = 1.0 / (d as f64).sqrt();

        let w_embed = Tensor::randn(vec![k, d], std, rng);
        let mut attn = Vec::with_capacity(config.attention_layers);
        for _ in 0..config.attention_layers {
            let heads = (0..config.attention_heads)
                .map(|_| AttnHead {
                    w_q: Tensor::randn(vec![d, dh], std, rng),
                    w_k: Tensor::randn(vec![d, dh], std, rng),
                    w_g: Tensor::randn(vec![d, d], std, rng),
                })
                .collect();
            attn.push(AttnLayer {
                heads,
                ln_gain: Tensor::param_from_vec(vec![1, d], vec![1.0; d])?,
                ln_bias: Tensor::param_from_vec(vec![1, d], vec![0.0; d])?,
            });
        }

        let head_dims = |out: usize| -> Vec<usize> {
            let mut dims = vec![3 * k];
            for _ in 0..config.mlp_layers.saturating_sub(1) {
                dims.push(config.hidden_size);
            }
            dims.push(out);
            dims
        };

        Ok(HawkesNet {
            config: config.clone(),
            w_embed,
            attn,
            w_mu: Tensor::randn(vec![d, k], std, rng),
            b_mu: Tensor::param_from_vec(vec![1, k], vec![0.0; k])?,
            w_alpha: Tensor::randn(vec![d, k], std, rng),
            b_alpha: Tensor::param_from_vec(vec![1, k], vec![0.0; k])?,
            w_gamma: Tensor::randn(vec![d, k], std, rng),
            b_gamma: Tensor::param_from_vec(vec![1, k], vec![0.0; k])?,
            event_head: Mlp::new(&head_dims(k), rng),
            time_head: Mlp::new(&head_dims(1), rng),
        })
    }

    /// Type embedding: one-hot(marks) times the embedding matrix.
    fn type_embedding(&self, seq: &EventSequence) -> Result<Tensor> {
        let k = self.config.num_types;
        let l = seq.len();
        let mut onehot = vec![0.0; l * k];
        for (i, ev) in seq.events.iter().enumerate() {
            if ev.mark >= k {
                return Err(Error::Domain(format!(
                    "mark {} >= num_types {k} in sequence {}",
                    ev.mark, seq.id
                )));
            }
            onehot[i * k + ev.mark] = 1.0;
        }
        Tensor::from_vec(vec![l, k], onehot)?.matmul(&self.w_embed)
    }

    /// Event embeddings x_i = type embedding + temporal encoding, shape (L, d).
    pub fn embed(&self, seq: &EventSequence) -> Result<Tensor> {
        let d = self.config.embed_dim;
        let times: Vec<f64> = seq.events.iter().map(|e| e.time).collect();
        let temporal = Tensor::from_vec(vec![seq.len(), d], temporal_encoding(&times, d))?;
        self.type_embedding(seq)?.add(&temporal)
    }

    /// One causal attention layer without the residual/normalization wrapper:
    /// row i is the kernel-weighted average of g(x_j) over j <= i, averaged
    /// across heads.
    fn attention_average(
        &self,
        layer: &AttnLayer,
        x: &Tensor,
        dropout: &mut Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Tensor> {
        let l = x.shape()[0];
        let d = self.config.embed_dim;
        let scale = 1.0 / (d as f64).sqrt();

        // Causal mask: 0 on j <= i, -1e30 on j > i. Combined with softmax
        // this reproduces the normalized Gaussian kernel over the prefix,
        // and masked positions underflow to exactly zero weight.
        let mut mask = vec![0.0; l * l];
        for i in 0..l {
            for j in (i + 1)..l {
                mask[i * l + j] = -1e30;
            }
        }
        let mask = Tensor::from_vec(vec![l, l], mask)?;

        let mut head_sum: Option<Tensor> = None;
        for head in &layer.heads {
            let q = x.matmul(&head.w_q)?;
            let k = x.matmul(&head.w_k)?;
            // -|q_i - k_j|^2 = 2 q.k - |q_i|^2 - |k_j|^2
            let qk = q.matmul(&k.transpose()?)?.scale(2.0);
            let qn = q.mul(&q)?.sum_axis(1)?; // (L,1)
            let kn = k.mul(&k)?.sum_axis(1)?.transpose()?; // (1,L)
            let scores = qk.sub(&qn)?.sub(&kn)?.scale(scale);
            let mut weights = scores.add(&mask)?.softmax_axis(1)?;
            if let Some((rate, rng)) = dropout.as_mut() {
                weights = apply_dropout(&weights, *rate, rng)?;
            }
            let g = x.matmul(&head.w_g)?;
            let out = weights.matmul(&g)?;
            head_sum = Some(match head_sum {
                None => out,
                Some(acc) => acc.add(&out)?,
            });
        }
        Ok(head_sum.expect("at least one head").scale(1.0 / layer.heads.len() as f64))
    }

    fn layer_norm(&self, layer: &AttnLayer, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_axis(1)?;
        let centered = x.sub(&mean)?;
        let var = centered.mul(&centered)?.mean_axis(1)?;
        let inv_std = var.add_scalar(LN_EPS).powf(-0.5);
        centered.mul(&inv_std)?.mul(&layer.ln_gain)?.add(&layer.ln_bias)
    }

    /// Encode embeddings into hidden states: stacked causal attention with
    /// residual connection and layer normalization.
    pub fn encode(
        &self,
        embeddings: &Tensor,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Tensor> {
        let mut cur = embeddings.clone();
        for layer in &self.attn {
            let avg = self.attention_average(layer, &cur, &mut dropout)?;
            cur = self.layer_norm(layer, &cur.add(&avg)?)?;
        }
        Ok(cur)
    }

    /// Per-position intensity parameterization from hidden states.
    pub fn intensity_params(&self, hidden: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mu = hidden.matmul(&self.w_mu)?.add(&self.b_mu)?.gelu();
        let alpha = hidden.matmul(&self.w_alpha)?.add(&self.b_alpha)?.gelu();
        let gamma = hidden.matmul(&self.w_gamma)?.add(&self.b_gamma)?.softplus();
        Ok((mu, alpha, gamma))
    }

    /// Full forward pass. `dropout_rng` enables training mode.
    pub fn forward(
        &self,
        seq: &EventSequence,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        if seq.is_empty() {
            return Err(Error::Domain("forward on empty sequence".into()));
        }
        let x = self.embed(seq)?;
        let rate = self.config.dropout_rate;
        let hidden = {
            let dropout = dropout_rng.as_deref_mut().map(|r| (rate, r));
            self.encode(&x, dropout)?
        };
        let (mu, alpha, gamma) = self.intensity_params(&hidden)?;

        // Head feature: the intensity curve's endpoints. At dt = 0 the curve
        // is softplus(alpha); as dt grows it approaches softplus(mu); gamma
        // sets the decay between them.
        let feat = concat(&[&alpha.softplus(), &mu.softplus(), &gamma], 1)?;
        let logits = {
            let dropout = dropout_rng.as_deref_mut().map(|r| (rate, r));
            self.event_head.forward(&feat, dropout)?
        };
        let time_pred = {
            let dropout = dropout_rng.as_deref_mut().map(|r| (rate, r));
            self.time_head.forward(&feat, dropout)?
        };

        Ok(Forward {
            hidden,
            mu,
            alpha,
            gamma,
            logits,
            time_pred,
        })
    }

    /// Encoder parameters (embedding, attention stack, intensity layer).
    pub fn encoder_params(&self) -> Vec<Tensor> {
        let mut out = vec![self.w_embed.clone()];
        for layer in &self.attn {
            for head in &layer.heads {
                out.extend([head.w_q.clone(), head.w_k.clone(), head.w_g.clone()]);
            }
            out.extend([layer.ln_gain.clone(), layer.ln_bias.clone()]);
        }
        out.extend([
            self.w_mu.clone(),
            self.b_mu.clone(),
            self.w_alpha.clone(),
            self.b_alpha.clone(),
            self.w_gamma.clone(),
            self.b_gamma.clone(),
        ]);
        out
    }

    pub fn event_head_params(&self) -> Vec<Tensor> {
        self.event_head.params()
    }

    pub fn time_head_params(&self) -> Vec<Tensor> {
        self.time_head.params()
    }

    pub fn all_params(&self) -> Vec<Tensor> {
        let mut out = self.encoder_params();
        out.extend(self.event_head_params());
        out.extend(self.time_head_params());
        out
    }

    /// Stable name -> tensor map, the checkpoint surface.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed.w".to_string(), self.w_embed.clone())];
        for (li, layer) in self.attn.iter().enumerate() {
            for (hi, head) in layer.heads.iter().enumerate() {
                out.push((format!("attn.{li}.head.{hi}.q"), head.w_q.clone()));
                out.push((format!("attn.{li}.head.{hi}.k"), head.w_k.clone()));
                out.push((format!("attn.{li}.head.{hi}.g"), head.w_g.clone()));
            }
            out.push((format!("attn.{li}.ln.gain"), layer.ln_gain.clone()));
            out.push((format!("attn.{li}.ln.bias"), layer.ln_bias.clone()));
        }
        out.push(("intensity.mu.w".to_string(), self.w_mu.clone()));
        out.push(("intensity.mu.b".to_string(), self.b_mu.clone()));
        out.push(("intensity.alpha.w".to_string(), self.w_alpha.clone()));
        out.push(("intensity.alpha.b".to_string(), self.b_alpha.clone()));
        out.push(("intensity.gamma.w".to_string(), self.w_gamma.clone()));
        out.push(("intensity.gamma.b".to_string(), self.b_gamma.clone()));
        out.extend(self.event_head.named_params("event_head"));
        out.extend(self.time_head.named_params("time_head"));
        out
    }
}

/// The intensity curve at lag `dt` for one (mu, alpha, gamma) triple:
/// `softplus(mu + (alpha - mu) * exp(-gamma * dt))`.
pub fn intensity_curve(mu: f64, alpha: f64, gamma: f64, dt: f64) -> Result<f64> {
    if dt < 0.0 {
        return Err(Error::Domain(format!("intensity curve lag {dt} < 0")));
    }
    let x = mu + (alpha - mu) * (-gamma * dt).exp();
    Ok(x.max(0.0) + (-x.abs()).exp().ln_1p())
}
