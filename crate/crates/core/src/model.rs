//! The full forecaster: input embedding, multi-scale encoder, cross-attention
//! decoder and a decoder-conditioned flow stack.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::attention::{
    encoder_forward, sinusoidal, AttentionOptions, CrossAttentionLayer, MultiScaleLayer, RelPosTable, ScaleSet,
};
use crate::data::{unscale, Window, WindowBatch};
use crate::error::{ManfError, Result};
use crate::flow::{BnStats, Conditioning, FlowConfig, FlowMode, FlowStack};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManfConfig {
    /// Number of series `D`.
    pub dims: usize,
    pub horizon: usize,
    /// Defaults to `4 · horizon`.
    pub context_len: Option<usize>,
    /// Calendar features per step.
    pub covariates: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    /// Also the number of flow couplings: one per decoder state.
    pub dec_layers: usize,
    /// Defaults to `⌈L/(l+1−i)⌉`, i.e. `[⌈L/3⌉, ⌈L/2⌉, L]` at depth 3.
    pub scales: Option<Vec<usize>>,
    /// Defaults to `4 · hidden_dim`.
    pub ffn_dim: Option<usize>,
    pub dropout: f64,
    pub conditioning: Conditioning,
    /// Defaults to `hidden_dim`.
    pub cond_dim: Option<usize>,
    pub flow_hidden: usize,
    pub scale_clamp: Option<f64>,
    pub batch_norm: bool,
    pub scaled_scores: bool,
    pub raw_scores: bool,
    /// Width of the optional learned per-series embedding.
    pub static_embedding: Option<usize>,
    pub seed: u64,
}

impl Default for ManfConfig {
    fn default() -> Self {
        ManfConfig {
            dims: 8,
            horizon: 24,
            context_len: None,
            covariates: 3,
            hidden_dim: 32,
            heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            scales: None,
            ffn_dim: None,
            dropout: 0.1,
            conditioning: Conditioning::Coupling,
            cond_dim: None,
            flow_hidden: 100,
            scale_clamp: Some(2.0),
            batch_norm: true,
            scaled_scores: true,
            raw_scores: false,
            static_embedding: None,
            seed: 0,
        }
    }
}

impl ManfConfig {
    pub fn context(&self) -> usize {
        self.context_len.unwrap_or(4 * self.horizon)
    }

    pub fn scale_set(&self) -> Result<ScaleSet> {
        match &self.scales {
            Some(s) => ScaleSet::new(s.clone()),
            None => Ok(ScaleSet::for_context(self.context(), self.enc_layers)),
        }
    }

    pub fn cond(&self) -> usize {
        self.cond_dim.unwrap_or(self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ManfError::Contract(msg));
        if self.dims == 0 || self.horizon == 0 || self.context() == 0 {
            return bad("dims, horizon and context must be positive".into());
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.scale_set()?.len() != self.enc_layers {
            return bad(format!("scale set length differs from {} encoder layers", self.enc_layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.scale_clamp.is_some_and(|c| c <= 0.0) {
            return bad("scale clamp must be positive".into());
        }
        if self.cond() == 0 || self.flow_hidden == 0 || self.static_embedding == Some(0) {
            return bad("widths must be positive".into());
        }
        Ok(())
    }
}

/// Pass counters, for checking the non-autoregressive call structure.
#[derive(Debug, Default)]
struct Counters {
    encoder: AtomicUsize,
    decoder: AtomicUsize,
    flow_samples: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallCounts {
    pub encoder: usize,
    pub decoder: usize,
    /// Sample paths pushed through the flow.
    pub flow_samples: usize,
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, prefix: &str, rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Linear {
            w: store.add_xavier(format!("{prefix}.w"), rows, cols, rng),
            b: store.add_zeros(format!("{prefix}.b"), &[cols]),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w])?;
        tape.add(h, p[self.b])
    }
}

/// `n × k × D` forecast paths in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSamples {
    pub n: usize,
    pub horizon: usize,
    pub dims: usize,
    pub samples: Vec<f64>,
    /// Scaling means that were multiplied back in.
    pub means: Vec<f64>,
    /// Frame index of the first forecast step.
    pub start: usize,
}

impl ForecastSamples {
    pub fn new(n: usize, horizon: usize, dims: usize, samples: Vec<f64>, means: Vec<f64>, start: usize) -> Result<Self> {
        if samples.len() != n * horizon * dims {
            return Err(ManfError::shape("forecast_samples", &[n, horizon, dims], &[samples.len()]));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(ManfError::non_finite("forecast samples"));
        }
        Ok(ForecastSamples { n, horizon, dims, samples, means, start })
    }

    pub fn get(&self, s: usize, t: usize, d: usize) -> f64 {
        self.samples[(s * self.horizon + t) * self.dims + d]
    }

    /// The `n` draws for step `t` of series `d`.
    pub fn marginal(&self, t: usize, d: usize) -> Vec<f64> {
        (0..self.n).map(|s| self.get(s, t, d)).collect()
    }

    /// The `n` draws of `Σ_d x_d` at step `t`.
    pub fn summed(&self, t: usize) -> Vec<f64> {
        (0..self.n)
            .map(|s| (0..self.dims).map(|d| self.get(s, t, d)).sum())
            .collect()
    }

    /// Sample mean, `k × D`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.horizon * self.dims];
        for chunk in self.samples.chunks(out.len()) {
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= self.n as f64);
        out
    }

    /// Linearly interpolated empirical quantile, `k × D`.
    pub fn quantile(&self, q: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.horizon * self.dims);
        for t in 0..self.horizon {
            for d in 0..self.dims {
                let mut m = self.marginal(t, d);
                m.sort_by(f64::total_cmp);
                out.push(quantile_sorted(&m, q));
            }
        }
        out
    }
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Loss on a tape together with the BN batch statistics it used.
#[derive(Debug, Clone)]
pub struct NllOutput {
    pub loss: Var,
    pub bn_stats: Vec<BnStats>,
}

#[derive(Debug)]
pub struct ManfModel {
    pub config: ManfConfig,
    pub store: ParamStore,
    pub flow: FlowStack,
    embed: Linear,
    static_embed: Option<(ParamId, ParamId)>,
    query_embed: Linear,
    encoder: Vec<MultiScaleLayer>,
    decoder: Vec<CrossAttentionLayer>,
    cond_heads: Vec<Linear>,
    scales: ScaleSet,
    table: RelPosTable,
    counters: Counters,
}

impl Clone for ManfModel {
    fn clone(&self) -> Self {
        ManfModel {
            config: self.config.clone(),
            store: self.store.clone(),
            flow: self.flow.clone(),
            embed: self.embed.clone(),
            static_embed: self.static_embed,
            query_embed: self.query_embed.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            cond_heads: self.cond_heads.clone(),
            scales: self.scales.clone(),
            table: self.table.clone(),
            counters: Counters::default(),
        }
    }
}

impl ManfModel {
    pub fn new(config: ManfConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut store = ParamStore::new();
        let (d, h, c) = (config.dims, config.hidden_dim, config.covariates);
        let ffn = config.ffn_dim.unwrap_or(4 * h);
        let embed = Linear::new(&mut store, "embed", 2 * d + c, h, &mut rng);
        let static_embed = config.static_embedding.map(|e| {
            let table = store.add(
                "static.table",
                crate::tensor::Tensor::randn(&[d, e], 0.1, &mut rng),
            );
            let proj = store.add_xavier("static.proj", d * e, h, &mut rng);
            (table, proj)
        });
        let query_embed = Linear::new(&mut store, "query", c, h, &mut rng);
        let encoder = (0..config.enc_layers)
            .map(|i| MultiScaleLayer::new(&mut store, &format!("enc{i}"), h, config.heads, ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.dec_layers)
            .map(|i| CrossAttentionLayer::new(&mut store, &format!("dec{i}"), h, config.heads, ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cond_heads = (0..config.dec_layers)
            .map(|i| Linear::new(&mut store, &format!("cond{i}"), h, config.cond(), &mut rng))
            .collect();
        let flow = FlowStack::new(
            &mut store,
            "flow",
            &FlowConfig {
                dim: d,
                cond_dim: config.cond(),
                couplings: config.dec_layers,
                hidden: config.flow_hidden,
                conditioning: config.conditioning,
                scale_clamp: config.scale_clamp,
                batch_norm: config.batch_norm,
            },
            &mut rng,
        )?;
        let scales = config.scale_set()?;
        let max_scale = *scales.half_windows().last().expect("nonempty scale set");
        let table = RelPosTable::new(max_scale, h);
        Ok(ManfModel {
            config,
            store,
            flow,
            embed,
            static_embed,
            query_embed,
            encoder,
            decoder,
            cond_heads,
            scales,
            table,
            counters: Counters::default(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    pub fn calls(&self) -> CallCounts {
        CallCounts {
            encoder: self.counters.encoder.load(Ordering::Relaxed),
            decoder: self.counters.decoder.load(Ordering::Relaxed),
            flow_samples: self.counters.flow_samples.load(Ordering::Relaxed),
        }
    }

    pub fn reset_calls(&self) {
        self.counters.encoder.store(0, Ordering::Relaxed);
        self.counters.decoder.store(0, Ordering::Relaxed);
        self.counters.flow_samples.store(0, Ordering::Relaxed);
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            scaled: self.config.scaled_scores,
            raw_scores: self.config.raw_scores,
            dropout: self.config.dropout,
        }
    }

    /// Linear embedding of `[values; observed; covariates]` per step.
    /// Inputs are `[B, L, D]`, `[B, L, D]`, `[B, L, C]`; output `[B, L, hidden]`.
    pub fn embed_inputs(&self, tape: &mut Tape, p: &Bound, values: Var, observed: Var, covs: Var) -> Result<Var> {
        let x = tape.concat(&[values, observed, covs], 2)?;
        let h = self.embed.forward(tape, p, x)?;
        match self.static_embed {
            Some((table, proj)) => {
                let flat = tape.reshape(p[table], &[1, self.store.get(table).numel()])?;
                let bias = tape.matmul(flat, p[proj])?;
                tape.add(h, bias)
            }
            None => Ok(h),
        }
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, embedded: Var) -> Result<Var> {
        self.counters.encoder.fetch_add(1, Ordering::Relaxed);
        let opts = self.attention_options();
        encoder_forward(tape, p, embedded, &self.scales, &self.encoder, &self.table, &opts)
    }

    /// All decoder states `H_1..H_l`, each `[B, k, hidden]`. Positional
    /// encoding enters at the first layer only.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, future_covs: Var, memory: Var) -> Result<Vec<Var>> {
        let k = tape.shape(future_covs)[1];
        let h = self.config.hidden_dim;
        let positions: Vec<f64> = (0..k).map(|t| t as f64).collect();
        let pe = tape.constant(&[k, h], sinusoidal(&positions, h))?;
        self.decode_with_pe(tape, p, future_covs, memory, pe)
    }

    /// [`decode`](Self::decode) with a caller-supplied `[k, hidden]` encoding.
    pub fn decode_with_pe(&self, tape: &mut Tape, p: &Bound, future_covs: Var, memory: Var, pe: Var) -> Result<Vec<Var>> {
        self.counters.decoder.fetch_add(1, Ordering::Relaxed);
        let opts = self.attention_options();
        let mut state = self.query_embed.forward(tape, p, future_covs)?;
        let mut states = Vec::with_capacity(self.decoder.len());
        for (i, layer) in self.decoder.iter().enumerate() {
            state = layer.forward(tape, p, state, memory, (i == 0).then_some(pe), &opts)?;
            states.push(state);
        }
        Ok(states)
    }

    /// Per-coupling conditions `[B·k, cond_dim]` from the decoder states.
    pub fn conditions(&self, tape: &mut Tape, p: &Bound, states: &[Var]) -> Result<Vec<Option<Var>>> {
        states
            .iter()
            .zip(&self.cond_heads)
            .map(|(&s, head)| {
                let shape = tape.shape(s).to_vec();
                let flat = tape.reshape(s, &[shape[0] * shape[1], shape[2]])?;
                Ok(Some(head.forward(tape, p, flat)?))
            })
            .collect()
    }

    fn check_batch(&self, b: &WindowBatch) -> Result<()> {
        if b.dims != self.config.dims || b.covariates != self.config.covariates {
            return Err(ManfError::DataMismatch(format!(
                "model expects {} series and {} covariates, batch has {} and {}",
                self.config.dims, self.config.covariates, b.dims, b.covariates
            )));
        }
        Ok(())
    }

    /// Encoder and decoder passes for a batch; returns the flow conditions.
    fn condition_batch(&self, tape: &mut Tape, p: &Bound, b: &WindowBatch) -> Result<Vec<Option<Var>>> {
        self.check_batch(b)?;
        let (n, l, k, d, c) = (b.size, b.context_len, b.horizon, b.dims, b.covariates);
        let values = tape.constant(&[n, l, d], b.context.clone())?;
        let observed = tape.constant(&[n, l, d], b.observed.clone())?;
        let covs = tape.constant(&[n, l, c], b.context_covs.clone())?;
        let fcovs = tape.constant(&[n, k, c], b.future_covs.clone())?;
        let emb = self.embed_inputs(tape, p, values, observed, covs)?;
        let memory = self.encode(tape, p, emb)?;
        let states = self.decode(tape, p, fcovs, memory)?;
        self.conditions(tape, p, &states)
    }

    /// Negative log-likelihood summed over horizon steps and averaged over
    /// windows.
    pub fn nll_on_tape(&self, tape: &mut Tape, p: &Bound, batch: &WindowBatch, mode: FlowMode) -> Result<NllOutput> {
        let conds = self.condition_batch(tape, p, batch)?;
        let rows = batch.size * batch.horizon;
        let x = tape.constant(&[rows, batch.dims], batch.future.clone())?;
        let trace = self.flow.log_prob(tape, p, x, &conds, mode)?;
        let total = tape.sum(trace.log_prob);
        let loss = tape.scale(total, -1.0 / batch.size as f64);
        if !tape.item(loss).is_finite() {
            return Err(ManfError::non_finite("negative log-likelihood"));
        }
        Ok(NllOutput {
            loss,
            bn_stats: trace.bn_stats,
        })
    }

    /// NLL value without dropout.
    pub fn nll(&self, batch: &WindowBatch, mode: FlowMode) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let out = self.nll_on_tape(&mut tape, &p, batch, mode)?;
        Ok(tape.item(out.loss))
    }

    pub fn forecast(&self, window: &Window, n: usize, rng: &mut Rng) -> Result<ForecastSamples> {
        Ok(self.forecast_batch(std::slice::from_ref(window), n, rng)?.remove(0))
    }

    /// `n` joint sample paths per window from a single encoder and a single
    /// decoder pass over the whole batch.
    pub fn forecast_batch(&self, windows: &[Window], n: usize, rng: &mut Rng) -> Result<Vec<ForecastSamples>> {
        if n == 0 {
            return Err(ManfError::Contract("sample count must be positive".into()));
        }
        let batch = WindowBatch::from_windows(windows)?;
        let (b, k, d) = (batch.size, batch.horizon, batch.dims);
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let conds = self.condition_batch(&mut tape, &p, &batch)?;
        // replicate each window's k condition rows for its n paths
        let mut tiled = Vec::with_capacity(conds.len());
        for c in conds.iter().flatten() {
            let width = tape.shape(*c)[1];
            let vals = tape.value(*c);
            let mut rep = Vec::with_capacity(b * n * k * width);
            for w in 0..b {
                let block = &vals[w * k * width..(w + 1) * k * width];
                for _ in 0..n {
                    rep.extend_from_slice(block);
                }
            }
            tiled.push(Some(tape.constant(&[b * n * k, width], rep)?));
        }
        self.counters.flow_samples.fetch_add(b * n, Ordering::Relaxed);
        let z = self.flow.sample(&mut tape, &p, rng, &tiled, b * n * k)?;
        let z = tape.value(z);
        windows
            .iter()
            .enumerate()
            .map(|(w, win)| {
                let means = &batch.means[w * d..(w + 1) * d];
                let scaled = &z[w * n * k * d..(w + 1) * n * k * d];
                ForecastSamples::new(n, k, d, unscale(scaled, means), means.to_vec(), win.start + win.context_len)
            })
            .collect()
    }
}
