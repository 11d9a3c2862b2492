use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BlockKind, FfnKind, GateKind, ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const DYT_ALPHA_INIT: f64 = 0.5;

/// One normalization site.
#[derive(Debug, Clone, PartialEq)]
pub enum Norm<T> {
    Rms { scale: T },
    DynTanh { alpha: T, gamma: T, beta: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub in_norm: Option<Norm<T>>,
    pub out_norm: Option<Norm<T>>,
    /// Per-head query/key RMSNorm scales (`[d_head]`), sandwich_qk only.
    pub q_norm: Option<T>,
    pub k_norm: Option<T>,
    /// `[d_model × heads·d_head]`
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// `[heads·d_head × d_model]`
    pub w_o: T,
    /// Gate weights; shape depends on the gate kind.
    pub gate: Option<T>,
}

/// Feed-forward weights in `W·h` orientation (`W_up: [d_ffn × d_model]`).
#[derive(Debug, Clone, PartialEq)]
pub enum FfnWeights<T> {
    Swiglu { w_gate: T, w_up: T, w_down: T },
    Gelu2 { w_up: T, w_down: T },
    /// `[d_model × d_model]`, applied as `W·h`.
    Linear { w: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams<T> {
    pub in_norm: Option<Norm<T>>,
    pub out_norm: Option<Norm<T>>,
    pub weights: FfnWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams<T> {
    Attention(AttentionParams<T>),
    FeedForward(FfnParams<T>),
}

/// Every learnable weight of a model. `T` is [`Tensor`] for stored weights
/// and [`Var`](crate::tensor::Var) once bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = Tensor> {
    /// `[vocab × d_model]`
    pub embedding: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Norm<T>,
    /// `[d_model × vocab]`
    pub head: T,
}

impl<T> Norm<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Norm<U> {
        match self {
            Norm::Rms { scale } => Norm::Rms {
                scale: f(&format!("{prefix}.scale"), scale),
            },
            Norm::DynTanh { alpha, gamma, beta } => Norm::DynTanh {
                alpha: f(&format!("{prefix}.alpha"), alpha),
                gamma: f(&format!("{prefix}.gamma"), gamma),
                beta: f(&format!("{prefix}.beta"), beta),
            },
        }
    }

    fn fields_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        match self {
            Norm::Rms { scale } => out.push((format!("{prefix}.scale"), scale)),
            Norm::DynTanh { alpha, gamma, beta } => {
                out.push((format!("{prefix}.alpha"), alpha));
                out.push((format!("{prefix}.gamma"), gamma));
                out.push((format!("{prefix}.beta"), beta));
            }
        }
    }
}

impl<T> Parameters<T> {
    /// Build a parallel structure by visiting every tensor in canonical
    /// order with its dotted name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Parameters<U> {
        let f = &mut f;
        let embedding = f("embedding", &self.embedding);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("blocks.{}", i + 1);
                match b {
                    BlockParams::Attention(a) => BlockParams::Attention(AttentionParams {
                        in_norm: a.in_norm.as_ref().map(|n| n.map(&format!("{p}.in_norm"), f)),
                        out_norm: a.out_norm.as_ref().map(|n| n.map(&format!("{p}.out_norm"), f)),
                        q_norm: a.q_norm.as_ref().map(|t| f(&format!("{p}.q_norm.scale"), t)),
                        k_norm: a.k_norm.as_ref().map(|t| f(&format!("{p}.k_norm.scale"), t)),
                        w_q: f(&format!("{p}.w_q"), &a.w_q),
                        w_k: f(&format!("{p}.w_k"), &a.w_k),
                        w_v: f(&format!("{p}.w_v"), &a.w_v),
                        w_o: f(&format!("{p}.w_o"), &a.w_o),
                        gate: a.gate.as_ref().map(|t| f(&format!("{p}.gate"), t)),
                    }),
                    BlockParams::FeedForward(m) => BlockParams::FeedForward(FfnParams {
                        in_norm: m.in_norm.as_ref().map(|n| n.map(&format!("{p}.in_norm"), f)),
                        out_norm: m.out_norm.as_ref().map(|n| n.map(&format!("{p}.out_norm"), f)),
                        weights: match &m.weights {
                            FfnWeights::Swiglu { w_gate, w_up, w_down } => FfnWeights::Swiglu {
                                w_gate: f(&format!("{p}.w_gate"), w_gate),
                                w_up: f(&format!("{p}.w_up"), w_up),
                                w_down: f(&format!("{p}.w_down"), w_down),
                            },
                            FfnWeights::Gelu2 { w_up, w_down } => FfnWeights::Gelu2 {
                                w_up: f(&format!("{p}.w_up"), w_up),
                                w_down: f(&format!("{p}.w_down"), w_down),
                            },
                            FfnWeights::Linear { w } => FfnWeights::Linear {
                                w: f(&format!("{p}.w"), w),
                            },
                        },
                    }),
                }
            })
            .collect();
        let final_norm = self.final_norm.map("final_norm", f);
        let head = f("head", &self.head);
        Parameters {
            embedding,
            blocks,
            final_norm,
            head,
        }
    }

    /// Mutable references in the same canonical order as [`Parameters::map`].
    pub fn fields_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &mut self.embedding));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{}", i + 1);
            match b {
                BlockParams::Attention(a) => {
                    if let Some(n) = a.in_norm.as_mut() {
                        n.fields_mut(&format!("{p}.in_norm"), &mut out);
                    }
                    if let Some(n) = a.out_norm.as_mut() {
                        n.fields_mut(&format!("{p}.out_norm"), &mut out);
                    }
                    if let Some(t) = a.q_norm.as_mut() {
                        out.push((format!("{p}.q_norm.scale"), t));
                    }
                    if let Some(t) = a.k_norm.as_mut() {
                        out.push((format!("{p}.k_norm.scale"), t));
                    }
                    out.push((format!("{p}.w_q"), &mut a.w_q));
                    out.push((format!("{p}.w_k"), &mut a.w_k));
                    out.push((format!("{p}.w_v"), &mut a.w_v));
                    out.push((format!("{p}.w_o"), &mut a.w_o));
                    if let Some(t) = a.gate.as_mut() {
                        out.push((format!("{p}.gate"), t));
                    }
                }
                BlockParams::FeedForward(m) => {
                    if let Some(n) = m.in_norm.as_mut() {
                        n.fields_mut(&format!("{p}.in_norm"), &mut out);
                    }
                    if let Some(n) = m.out_norm.as_mut() {
                        n.fields_mut(&format!("{p}.out_norm"), &mut out);
                    }
                    match &mut m.weights {
                        FfnWeights::Swiglu { w_gate, w_up, w_down } => {
                            out.push((format!("{p}.w_gate"), w_gate));
                            out.push((format!("{p}.w_up"), w_up));
                            out.push((format!("{p}.w_down"), w_down));
                        }
                        FfnWeights::Gelu2 { w_up, w_down } => {
                            out.push((format!("{p}.w_up"), w_up));
                            out.push((format!("{p}.w_down"), w_down));
                        }
                        FfnWeights::Linear { w } => out.push((format!("{p}.w"), w)),
                    }
                }
            }
        }
        self.final_norm.fields_mut("final_norm", &mut out);
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Dotted names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|name, _| names.push(name.to_string()));
        names
    }

    /// 1-based block lookup.
    pub fn block(&self, i: usize) -> Option<&BlockParams<T>> {
        i.checked_sub(1).and_then(|j| self.blocks.get(j))
    }
}

impl Parameters<Tensor> {
    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.map(|_, t| n += t.numel());
        n
    }

    /// Every tensor shape must match what `cfg` dictates.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let template = Parameters::<Vec<usize>>::shapes(cfg);
        let expected: Vec<(String, Vec<usize>)> = {
            let mut v = Vec::new();
            template.map(|n, s| v.push((n.to_string(), s.clone())));
            v
        };
        let mut actual = Vec::new();
        self.map(|n, t| actual.push((n.to_string(), t.shape().to_vec())));
        if expected != actual {
            let diff = expected
                .iter()
                .zip(&actual)
                .find(|(e, a)| e != a)
                .map(|(e, a)| format!("{} {:?} vs {} {:?}", e.0, e.1, a.0, a.1))
                .unwrap_or_else(|| format!("{} vs {} tensors", expected.len(), actual.len()));
            return Err(Error::Container(format!(
                "parameters do not match the model config: {diff}"
            )));
        }
        Ok(())
    }

    /// Deterministic initialization: normals with std 0.02, with `W_O` and
    /// the last feed-forward projection further scaled by `1/√(2L)`; norm
    /// scales 1; DynamicTanh `α = 0.5, γ = 1, β = 0`; unconditional gate
    /// logits 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let out_scale = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
        let shapes = Parameters::<Vec<usize>>::shapes(cfg);
        let mut kinds = Vec::new();
        shapes.map(|name, _| kinds.push(InitKind::for_name(name, cfg.gate_kind)));
        let mut kinds = kinds.into_iter();
        Ok(shapes.map(|_, shape| {
            let numel: usize = shape.iter().product();
            let data = match kinds.next().expect("one init kind per tensor") {
                InitKind::Normal => (0..numel).map(|_| normal.sample(&mut rng)).collect(),
                InitKind::OutputProjection => (0..numel)
                    .map(|_| normal.sample(&mut rng) * out_scale)
                    .collect(),
                InitKind::Const(c) => vec![c; numel],
            };
            Tensor::new(shape.clone(), data).expect("shape and data agree")
        }))
    }
}

enum InitKind {
    Normal,
    OutputProjection,
    Const(f64),
}

impl InitKind {
    fn for_name(name: &str, gate: GateKind) -> Self {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match leaf {
            "scale" | "gamma" => InitKind::Const(1.0),
            "beta" => InitKind::Const(0.0),
            "alpha" => InitKind::Const(DYT_ALPHA_INIT),
            "w_o" | "w_down" => InitKind::OutputProjection,
            "w" if name.starts_with("blocks.") => InitKind::OutputProjection,
            "gate"
                if matches!(
                    gate,
                    GateKind::UncondChannel | GateKind::UncondHead | GateKind::UncondSingle
                ) =>
            {
                InitKind::Const(0.0)
            }
            _ => InitKind::Normal,
        }
    }
}

impl Parameters<Vec<usize>> {
    /// The shape of every tensor dictated by `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let a = cfg.attn_width();
        let norm = || match cfg.norm_kind {
            NormKind::DynamicTanh => Norm::DynTanh {
                alpha: vec![1],
                gamma: vec![d],
                beta: vec![d],
            },
            _ => Norm::Rms { scale: vec![d] },
        };
        let out_norm = || (cfg.norm_kind == NormKind::Sandwich).then(norm);
        let gate = match cfg.gate_kind {
            GateKind::None => None,
            GateKind::CondChannel | GateKind::CondHead | GateKind::CondSingle => {
                Some(vec![d, cfg.gate_cols()])
            }
            GateKind::UncondChannel | GateKind::UncondHead | GateKind::UncondSingle => {
                Some(vec![1, cfg.gate_cols()])
            }
            GateKind::StaticPositional => Some(vec![cfg.max_seq, a]),
            GateKind::StaticToken => Some(vec![d, a]),
        };
        let qk = cfg.norm_kind == NormKind::SandwichQk;
        let blocks = (1..=cfg.n_blocks())
            .map(|i| match cfg.block_kind(i) {
                BlockKind::Attention => BlockParams::Attention(AttentionParams {
                    in_norm: (!qk).then(norm),
                    out_norm: out_norm(),
                    q_norm: qk.then(|| vec![cfg.d_head]),
                    k_norm: qk.then(|| vec![cfg.d_head]),
                    w_q: vec![d, a],
                    w_k: vec![d, a],
                    w_v: vec![d, a],
                    w_o: vec![a, d],
                    gate: gate.clone(),
                }),
                BlockKind::FeedForward => BlockParams::FeedForward(FfnParams {
                    in_norm: Some(norm()),
                    out_norm: out_norm(),
                    weights: match cfg.ffn_kind {
                        FfnKind::Swiglu => FfnWeights::Swiglu {
                            w_gate: vec![cfg.d_ffn, d],
                            w_up: vec![cfg.d_ffn, d],
                            w_down: vec![d, cfg.d_ffn],
                        },
                        FfnKind::Gelu2 => FfnWeights::Gelu2 {
                            w_up: vec![cfg.d_ffn, d],
                            w_down: vec![d, cfg.d_ffn],
                        },
                        FfnKind::Linear => FfnWeights::Linear { w: vec![d, d] },
                        FfnKind::AttentionOnly => unreachable!("attention_only has no FFN blocks"),
                    },
                }),
            })
            .collect();
        Parameters {
            embedding: vec![cfg.vocab_size, d],
            blocks,
            final_norm: norm(),
            head: vec![d, cfg.vocab_size],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ffn: 32,
            n_heads: 2,
            d_head: 8,
            ..ModelConfig::default()
        };
        let a = Parameters::init(&cfg, 7).unwrap();
        let b = Parameters::init(&cfg, 7).unwrap();
        let c = Parameters::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check_shapes(&cfg).unwrap();
    }

    #[test]
    fn norm_scales_start_at_one() {
        for norm_kind in [NormKind::PreNorm, NormKind::Sandwich, NormKind::SandwichQk] {
            let cfg = ModelConfig {
                n_layers: 1,
                d_model: 8,
                d_ffn: 8,
                n_heads: 2,
                d_head: 4,
                norm_kind,
                ..ModelConfig::default()
            };
            let p = Parameters::init(&cfg, 1).unwrap();
            p.map(|name, t| {
                if name.ends_with(".scale") {
                    assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
                }
            });
        }
    }

    #[test]
    fn dynamic_tanh_init_values() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ffn: 8,
            n_heads: 2,
            d_head: 4,
            norm_kind: NormKind::DynamicTanh,
            ..ModelConfig::default()
        };
        let p = Parameters::init(&cfg, 1).unwrap();
        let Norm::DynTanh { alpha, gamma, beta } = &p.final_norm else {
            panic!("expected DynamicTanh final norm")
        };
        assert_eq!(alpha.data(), &[0.5]);
        assert!(gamma.data().iter().all(|&v| v == 1.0));
        assert!(beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_std_matches_init() {
        // |V|·d_model = 256·512 ≥ 1e5
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 512,
            d_ffn: 8,
            n_heads: 2,
            d_head: 4,
            ..ModelConfig::default()
        };
        let p = Parameters::init(&cfg, 3).unwrap();
        let e = p.embedding.data();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64;
        assert!((var.sqrt() - INIT_STD).abs() < 0.1 * INIT_STD);
    }

    #[test]
    fn attention_only_has_no_ffn_weights() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            ffn_kind: FfnKind::AttentionOnly,
            ..ModelConfig::default()
        };
        let p = Parameters::init(&cfg, 0).unwrap();
        assert!(p.blocks.iter().all(|b| matches!(b, BlockParams::Attention(_))));
        assert!(!p.names().iter().any(|n| n.contains("w_up") || n.contains("w_down")));
    }
}
