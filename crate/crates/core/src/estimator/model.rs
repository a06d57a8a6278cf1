//! Bilingual convolutional reward regressor.
//!
//! Source and translation are each padded to `t_max` with a zero padding
//! embedding, joined per time step along the feature axis, and convolved with
//! one filter bank per width. Max-over-time pooled ReLU features feed a
//! linear output unit squashed by a sigmoid.

use diffcore::{Graph, ParamId, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{Dropout, Policy, TokenId, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub embed_size: usize,
    /// Filters per width.
    pub filters: usize,
    pub min_width: usize,
    pub max_width: usize,
    /// Length both sides are padded to.
    pub t_max: usize,
    /// Truncate longer sequences instead of failing.
    pub truncate: bool,
    /// Drop probability on pooled features during training.
    pub dropout: f64,
    pub init_scale: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            embed_size: 32,
            filters: 20,
            min_width: 2,
            max_width: 15,
            t_max: 20,
            truncate: true,
            dropout: 0.0,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Bank {
    width: usize,
    w: ParamId,
    b: ParamId,
}

/// The reward estimator: configuration plus parameters φ.
#[derive(Clone, Debug)]
pub struct RewardEstimator {
    config: EstimatorConfig,
    params: ParamSet,
    src_embed: ParamId,
    trg_embed: ParamId,
    banks: Vec<Bank>,
    out_w: ParamId,
    out_b: ParamId,
}

impl RewardEstimator {
    pub fn new(config: EstimatorConfig, src_vocab: usize, trg_vocab: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config, src_vocab, trg_vocab)? {
            let n: usize = shape.iter().product();
            let mut data: Vec<f64> = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| rng.gen_range(-config.init_scale..=config.init_scale))
                    .collect()
            };
            if name.ends_with("_embed") {
                data[PAD * shape[1]..(PAD + 1) * shape[1]].fill(0.0);
            }
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_parts(config, params, src_vocab, trg_vocab)
    }

    pub fn from_parts(
        config: EstimatorConfig,
        params: ParamSet,
        src_vocab: usize,
        trg_vocab: usize,
    ) -> Result<Self> {
        let expected = param_shapes(&config, src_vocab, trg_vocab)?;
        if expected.len() != params.len() {
            return Err(invalid("estimator parameter count mismatch"));
        }
        for (name, shape) in &expected {
            match params.by_name(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(invalid(format!("estimator parameter {name} missing or misshapen"))),
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("estimator parameters".into()));
        }
        let id = |n: &str| params.id(n).expect("validated above");
        let banks = (config.min_width..=config.max_width)
            .map(|w| Bank {
                width: w,
                w: id(&format!("conv{w}.w")),
                b: id(&format!("conv{w}.b")),
            })
            .collect();
        Ok(RewardEstimator {
            src_embed: id("src_embed"),
            trg_embed: id("trg_embed"),
            out_w: id("out.w"),
            out_b: id("out.b"),
            banks,
            config,
            params,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn src_embed_id(&self) -> ParamId {
        self.src_embed
    }

    pub fn trg_embed_id(&self) -> ParamId {
        self.trg_embed
    }

    /// Copies the policy's source and target embeddings.
    pub fn init_embeddings_from(&mut self, policy: &Policy) -> Result<()> {
        for (mine, theirs) in [
            (self.src_embed, policy.src_embed_id()),
            (self.trg_embed, policy.trg_embed_id()),
        ] {
            let src = policy.params().get(theirs);
            if src.shape() != self.params.get(mine).shape() {
                return Err(invalid(format!(
                    "embedding shapes differ: policy {:?}, estimator {:?}",
                    src.shape(),
                    self.params.get(mine).shape()
                )));
            }
            *self.params.get_mut(mine) = src.clone();
        }
        Ok(())
    }

    fn prepare(&self, ids: &[TokenId]) -> Result<Vec<TokenId>> {
        let ids = match ids.last() {
            Some(&EOS) => &ids[..ids.len() - 1],
            _ => ids,
        };
        if ids.len() > self.config.t_max && !self.config.truncate {
            return Err(invalid(format!(
                "sequence of length {} exceeds t_max {}",
                ids.len(),
                self.config.t_max
            )));
        }
        let mut out: Vec<TokenId> = ids.iter().copied().take(self.config.t_max).collect();
        out.resize(self.config.t_max, PAD);
        Ok(out)
    }

    /// Differentiable prediction in [0, 1]; a trailing end-of-sequence marker
    /// on either side is ignored.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: &[TokenId],
        y: &[TokenId],
        drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        let (x, y) = (self.prepare(x)?, self.prepare(y)?);
        let se = g.param(self.src_embed);
        let te = g.param(self.trg_embed);
        let xs = g.embedding(se, &x)?;
        let ys = g.embedding(te, &y)?;
        let joined = g.concat(&[xs, ys], 1)?;
        let mut pooled = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            let windows = g.unfold(joined, bank.width)?;
            let w = g.param(bank.w);
            let b = g.param(bank.b);
            let h = g.matmul(windows, w)?;
            let h = g.add(h, b)?;
            let h = g.relu(h)?;
            pooled.push(g.max(h, 0)?);
        }
        let mut features = g.concat(&pooled, 1)?;
        if let Some(d) = drop {
            features = d.apply(g, features)?;
        }
        let ow = g.param(self.out_w);
        let ob = g.param(self.out_b);
        let z = g.matmul(features, ow)?;
        let z = g.add(z, ob)?;
        Ok(g.sigmoid(z)?)
    }

    pub fn predict(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, x, y, None)?;
        Ok(g.scalar(out))
    }
}

fn param_shapes(
    config: &EstimatorConfig,
    src_vocab: usize,
    trg_vocab: usize,
) -> Result<Vec<(String, Vec<usize>)>> {
    if config.min_width == 0
        || config.min_width > config.max_width
        || config.max_width > config.t_max
        || config.filters == 0
        || config.embed_size == 0
    {
        return Err(Error::Config(
            "estimator needs 1 <= min_width <= max_width <= t_max and positive sizes".into(),
        ));
    }
    let e = config.embed_size;
    let mut shapes = vec![
        ("src_embed".to_string(), vec![src_vocab, e]),
        ("trg_embed".to_string(), vec![trg_vocab, e]),
    ];
    for w in config.min_width..=config.max_width {
        shapes.push((format!("conv{w}.w"), vec![w * 2 * e, config.filters]));
        shapes.push((format!("conv{w}.b"), vec![1, config.filters]));
    }
    let n_banks = config.max_width - config.min_width + 1;
    shapes.push(("out.w".into(), vec![n_banks * config.filters, 1]));
    shapes.push(("out.b".into(), vec![1, 1]));
    Ok(shapes)
}
