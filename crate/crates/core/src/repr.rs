//! Contrastive state / state-action encoders and the ensemble-disagreement
//! uncertainty estimate.
//!
//! A model has a state encoder `Es` and an action encoder `Ea`; a state embeds
//! as `Es(s)`, a state-action pair as `Es(s) + Ea(a)`. Each model maximizes
//!
//! ```text
//! L = log σ(v·v⁺) + log(1 − σ(v·v⁻)) − λ ‖v̂⁺ − v⁺‖²
//! ```
//!
//! with `v = Es(s)`, `v⁺ = Es(s')`, `v⁻ = Es(s'')` for an independently drawn
//! `s''`, and `v̂⁺ = Es(s) + Ea(a)`. Gradients flow through all three state
//! embeddings. Uncertainty is an aggregate of the pairwise squared distances
//! between the K members' embeddings.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, TransitionTable};
use crate::error::{Error, Result};
use crate::nn::{adam_step, Activation, AdamState, Mlp, MlpSpec};
use crate::rng::{self, Rng};

const ENSEMBLE_MAGIC: &[u8; 4] = b"AORE";
const ENSEMBLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Max,
    Mean,
    Min,
    Var,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::Var,
        Aggregator::Mean,
        Aggregator::Min,
        Aggregator::Max,
    ];

    fn code(self) -> u8 {
        match self {
            Aggregator::Max => 0,
            Aggregator::Mean => 1,
            Aggregator::Min => 2,
            Aggregator::Var => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Aggregator::Max,
            1 => Aggregator::Mean,
            2 => Aggregator::Min,
            3 => Aggregator::Var,
            other => return Err(Error::Checkpoint(format!("unknown aggregator {other}"))),
        })
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Max => "max",
            Aggregator::Mean => "mean",
            Aggregator::Min => "min",
            Aggregator::Var => "var",
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregator::Max),
            "mean" => Ok(Aggregator::Mean),
            "min" => Ok(Aggregator::Min),
            "var" => Ok(Aggregator::Var),
            other => Err(Error::invalid(format!(
                "unknown aggregator `{other}` (expected max, mean, min or var)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationModel {
    pub state_encoder: Mlp,
    pub action_encoder: Mlp,
    pub embed_dim: usize,
}

impl RepresentationModel {
    /// Two affine layers per encoder: `in -> hidden (relu) -> embed`.
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        hidden: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let enc = |input, label| {
            MlpSpec::feedforward(
                input,
                &[hidden],
                embed_dim,
                Activation::Relu,
                Activation::Identity,
                rng::derive_seed(seed, label),
            )
            .and_then(Mlp::new)
        };
        RepresentationModel::from_encoders(enc(obs_dim, "state")?, enc(act_dim, "action")?)
    }

    pub fn from_encoders(state_encoder: Mlp, action_encoder: Mlp) -> Result<Self> {
        let embed_dim = state_encoder.output_dim();
        if action_encoder.output_dim() != embed_dim {
            return Err(Error::DimensionMismatch {
                context: "action encoder output",
                expected: embed_dim,
                actual: action_encoder.output_dim(),
            });
        }
        Ok(RepresentationModel {
            state_encoder,
            action_encoder,
            embed_dim,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.state_encoder.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.action_encoder.input_dim()
    }

    pub fn encode_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.state_encoder.forward(s)
    }

    pub fn encode_state_action(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let mut v = self.state_encoder.forward(s)?;
        let w = self.action_encoder.forward(a)?;
        v.iter_mut().zip(&w).for_each(|(x, y)| *x += y);
        Ok(v)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    /// The batch-mean objective `L` (to be maximized).
    pub objective: f64,
    /// Gradient of `-L` with respect to the state-encoder parameters.
    pub state_grad: Vec<f64>,
    /// Gradient of `-L` with respect to the action-encoder parameters.
    pub action_grad: Vec<f64>,
}

/// Augmented noise-contrastive objective on `(s, a, s', s'')` from `batch`.
pub fn contrastive_loss(
    model: &RepresentationModel,
    batch: &Batch,
    lambda: f64,
) -> Result<ContrastiveOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("contrastive loss needs a non-empty batch"));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    let d = model.obs_dim();
    let e = model.embed_dim;
    if batch.neg_obs.len() != n * d {
        return Err(Error::DimensionMismatch {
            context: "negative samples",
            expected: n * d,
            actual: batch.neg_obs.len(),
        });
    }
    let mut states = Vec::with_capacity(3 * n * d);
    states.extend_from_slice(&batch.obs);
    states.extend_from_slice(&batch.next_obs);
    states.extend_from_slice(&batch.neg_obs);
    let s_cache = model.state_encoder.forward_cached(&states, 3 * n)?;
    let a_cache = model.action_encoder.forward_cached(&batch.act, n)?;
    let emb = s_cache.output();
    let act_emb = a_cache.output();

    let mut s_out_grad = vec![0.0; 3 * n * e];
    let mut a_out_grad = vec![0.0; n * e];
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut diff = vec![0.0; e];
    for i in 0..n {
        let v = &emb[i * e..(i + 1) * e];
        let p = &emb[(n + i) * e..(n + i + 1) * e];
        let q = &emb[(2 * n + i) * e..(2 * n + i + 1) * e];
        let ae = &act_emb[i * e..(i + 1) * e];
        let dp = dot(v, p);
        let dn = dot(v, q);
        let mut dist2 = 0.0;
        for k in 0..e {
            diff[k] = v[k] + ae[k] - p[k];
            dist2 += diff[k] * diff[k];
        }
        total += -softplus(-dp) - softplus(dn) - lambda * dist2;

        let cp = 1.0 - sigmoid(dp);
        let cn = sigmoid(dn);
        for k in 0..e {
            let t = 2.0 * lambda * diff[k];
            s_out_grad[i * e + k] = scale * (-cp * p[k] + cn * q[k] + t);
            s_out_grad[(n + i) * e + k] = scale * (-cp * v[k] - t);
            s_out_grad[(2 * n + i) * e + k] = scale * (cn * v[k]);
            a_out_grad[i * e + k] = scale * t;
        }
    }
    let objective = total * scale;
    if !objective.is_finite() {
        return Err(Error::NonFinite {
            context: "contrastive objective",
            step: 0,
        });
    }
    let mut state_grad = vec![0.0; model.state_encoder.params().len()];
    model
        .state_encoder
        .backward_cached(&s_cache, &s_out_grad, &mut state_grad, false)?;
    let mut action_grad = vec![0.0; model.action_encoder.params().len()];
    model
        .action_encoder
        .backward_cached(&a_cache, &a_out_grad, &mut action_grad, false)?;
    Ok(ContrastiveOutput {
        objective,
        state_grad,
        action_grad,
    })
}

/// `S[i][j] = ‖v_i − v_j‖²`.
pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = embeddings.len();
    if let Some(first) = embeddings.first() {
        if let Some(bad) = embeddings.iter().find(|v| v.len() != first.len()) {
            return Err(Error::DimensionMismatch {
                context: "similarity matrix embedding",
                expected: first.len(),
                actual: bad.len(),
            });
        }
    }
    let mut s = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = sq_dist(&embeddings[i], &embeddings[j]);
            s[i][j] = d;
            s[j][i] = d;
        }
    }
    Ok(s)
}

/// Aggregates the strict upper triangle; 0 for fewer than two members.
pub fn aggregate(entries: &[f64], agg: Aggregator) -> f64 {
    if entries.is_empty() {
        return 0.0;
    }
    let n = entries.len() as f64;
    match agg {
        Aggregator::Max => entries.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Min => entries.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregator::Mean => entries.iter().sum::<f64>() / n,
        Aggregator::Var => {
            let mean = entries.iter().sum::<f64>() / n;
            entries.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
        }
    }
}

pub fn upper_triangle(sim: &[Vec<f64>]) -> Vec<f64> {
    let k = sim.len();
    (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .map(|(i, j)| sim[i][j])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyEstimate {
    pub similarity: Vec<Vec<f64>>,
    pub value: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    State(&'a [f64]),
    StateAction(&'a [f64], &'a [f64]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprConfig {
    pub k: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Gradient steps for the initial fit on the offline dataset.
    pub train_steps: usize,
    /// Gradient steps per collection epoch when continuing training.
    pub update_steps: usize,
}

impl Default for ReprConfig {
    fn default() -> Self {
        ReprConfig {
            k: 5,
            hidden: 64,
            embed_dim: 32,
            lambda: 1.0,
            lr: 1e-3,
            batch_size: 256,
            train_steps: 16_000,
            update_steps: 300,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RepresentationEnsemble {
    pub models: Vec<RepresentationModel>,
    pub lambda: f64,
    pub aggregator: Aggregator,
    pub lr: f64,
    optim: Vec<(AdamState, AdamState)>,
}

impl PartialEq for RepresentationEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.models == other.models
            && self.lambda == other.lambda
            && self.aggregator == other.aggregator
    }
}

impl RepresentationEnsemble {
    /// `cfg.k` models with seeds derived from `seed`; no weight sharing.
    pub fn new(obs_dim: usize, act_dim: usize, cfg: &ReprConfig, seed: u64) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::invalid("ensemble needs at least one model"));
        }
        let models = (0..cfg.k)
            .map(|k| {
                RepresentationModel::new(
                    obs_dim,
                    act_dim,
                    cfg.hidden,
                    cfg.embed_dim,
                    rng::derive_seed(seed, &format!("repr/{k}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        RepresentationEnsemble::from_models(models, cfg.lambda, cfg.lr)
    }

    pub fn from_models(models: Vec<RepresentationModel>, lambda: f64, lr: f64) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::invalid("ensemble needs at least one model"))?;
        let dims = (first.obs_dim(), first.act_dim(), first.embed_dim);
        if models
            .iter()
            .any(|m| (m.obs_dim(), m.act_dim(), m.embed_dim) != dims)
        {
            return Err(Error::invalid("ensemble members disagree on dimensions"));
        }
        let optim = models
            .iter()
            .map(|m| {
                (
                    AdamState::new(m.state_encoder.params().len(), lr),
                    AdamState::new(m.action_encoder.params().len(), lr),
                )
            })
            .collect();
        Ok(RepresentationEnsemble {
            models,
            lambda,
            aggregator: Aggregator::Max,
            lr,
            optim,
        })
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.models[0].obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.models[0].act_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.models[0].embed_dim
    }

    pub fn embeddings(&self, query: Query<'_>) -> Result<Vec<Vec<f64>>> {
        self.models
            .iter()
            .map(|m| match query {
                Query::State(s) => m.encode_state(s),
                Query::StateAction(s, a) => m.encode_state_action(s, a),
            })
            .collect()
    }

    pub fn uncertainty(&self, query: Query<'_>, agg: Aggregator) -> Result<UncertaintyEstimate> {
        let similarity = similarity_matrix(&self.embeddings(query)?)?;
        let value = aggregate(&upper_triangle(&similarity), agg);
        Ok(UncertaintyEstimate { similarity, value })
    }

    /// Aggregated uncertainty for each of `n` row-major states.
    pub fn state_uncertainties(&self, states: &[f64], n: usize, agg: Aggregator) -> Result<Vec<f64>> {
        let embs = self
            .models
            .iter()
            .map(|m| m.state_encoder.forward_batch(states, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(pairwise_aggregate(&embs, n, self.embed_dim(), agg))
    }

    /// Aggregated uncertainty of `(s, a_m)` for each of `m` row-major actions.
    pub fn state_action_uncertainties(
        &self,
        s: &[f64],
        actions: &[f64],
        m: usize,
        agg: Aggregator,
    ) -> Result<Vec<f64>> {
        let e = self.embed_dim();
        let embs = self
            .models
            .iter()
            .map(|model| {
                let base = model.encode_state(s)?;
                let mut out = model.action_encoder.forward_batch(actions, m)?;
                for row in out.chunks_exact_mut(e) {
                    row.iter_mut().zip(&base).for_each(|(x, b)| *x += b);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(pairwise_aggregate(&embs, m, e, agg))
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&ENSEMBLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        w.write_all(&self.lambda.to_le_bytes())?;
        w.write_all(&(self.embed_dim() as u32).to_le_bytes())?;
        w.write_all(&[self.aggregator.code()])?;
        w.write_all(&self.lr.to_le_bytes())?;
        for m in &self.models {
            m.state_encoder.write_checkpoint(w)?;
            m.action_encoder.write_checkpoint(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated ensemble header: {e}")))?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Checkpoint("bad ensemble magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut b1 = [0u8; 1];
        let read = |buf: &mut [u8], r: &mut R| {
            r.read_exact(buf)
                .map_err(|e| Error::Checkpoint(format!("truncated ensemble header: {e}")))
        };
        read(&mut b4, r)?;
        if u32::from_le_bytes(b4) != ENSEMBLE_VERSION {
            return Err(Error::Checkpoint("unsupported ensemble version".into()));
        }
        read(&mut b4, r)?;
        let k = u32::from_le_bytes(b4) as usize;
        read(&mut b8, r)?;
        let lambda = f64::from_le_bytes(b8);
        read(&mut b4, r)?;
        let embed_dim = u32::from_le_bytes(b4) as usize;
        read(&mut b1, r)?;
        let aggregator = Aggregator::from_code(b1[0])?;
        read(&mut b8, r)?;
        let lr = f64::from_le_bytes(b8);
        let mut models = Vec::with_capacity(k);
        for _ in 0..k {
            let s = Mlp::read_checkpoint(r)?;
            let a = Mlp::read_checkpoint(r)?;
            models.push(RepresentationModel::from_encoders(s, a)?);
        }
        let mut ens = RepresentationEnsemble::from_models(models, lambda, lr)?;
        if ens.embed_dim() != embed_dim {
            return Err(Error::Checkpoint("embed_dim metadata mismatch".into()));
        }
        ens.aggregator = aggregator;
        Ok(ens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        RepresentationEnsemble::read_checkpoint(&mut BufReader::new(file))
    }
}

fn pairwise_aggregate(embs: &[Vec<f64>], n: usize, e: usize, agg: Aggregator) -> Vec<f64> {
    let k = embs.len();
    let mut entries = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    (0..n)
        .map(|row| {
            entries.clear();
            for i in 0..k {
                for j in i + 1..k {
                    entries.push(sq_dist(
                        &embs[i][row * e..(row + 1) * e],
                        &embs[j][row * e..(row + 1) * e],
                    ));
                }
            }
            aggregate(&entries, agg)
        })
        .collect()
}

/// Trains every member for `steps` Adam updates, each on its own batch
/// stream seeded from `rng`.
pub fn train_ensemble(
    e: &mut RepresentationEnsemble,
    d: &Dataset,
    steps: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    train_ensemble_on_table(e, &d.to_table(), steps, batch_size, rng)
}

pub fn train_ensemble_on_table(
    e: &mut RepresentationEnsemble,
    table: &TransitionTable,
    steps: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    let seeds: Vec<u64> = (0..e.k()).map(|_| rng.gen()).collect();
    train_ensemble_with_streams(e, table, steps, batch_size, &seeds)
}

pub fn train_ensemble_with_streams(
    e: &mut RepresentationEnsemble,
    table: &TransitionTable,
    steps: usize,
    batch_size: usize,
    stream_seeds: &[u64],
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if table.is_empty() {
        return Err(Error::EmptyDataset("representation training"));
    }
    if stream_seeds.len() != e.k() {
        return Err(Error::DimensionMismatch {
            context: "ensemble stream seeds",
            expected: e.k(),
            actual: stream_seeds.len(),
        });
    }
    let lambda = e.lambda;
    for ((model, (s_opt, a_opt)), &seed) in e
        .models
        .iter_mut()
        .zip(e.optim.iter_mut())
        .zip(stream_seeds)
    {
        let mut stream = rng::from_seed(seed);
        for step in 0..steps {
            let batch = table.sample_batch(batch_size, &mut stream)?;
            let out = contrastive_loss(model, &batch, lambda).map_err(|err| match err {
                Error::NonFinite { context, .. } => Error::NonFinite { context, step },
                other => other,
            })?;
            adam_step(&mut model.state_encoder, &out.state_grad, s_opt)?;
            adam_step(&mut model.action_encoder, &out.action_grad, a_opt)?;
        }
    }
    Ok(())
}
