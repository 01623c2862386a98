//! Noise predictor with three stage-switched branches and shared
//! condition encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groupfinder::UPPER_LEN;

use super::params::ParamStore;
use super::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub samples: usize,
    pub leads: usize,
    pub channels: usize,
    pub d_k: usize,
    /// Width of the first layer of the local PPG branch.
    pub ppg_hidden: usize,
    pub affinity_dim: usize,
    /// Diffusion steps covered by the timestep table.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { samples: 250, leads: 12, channels: 32, d_k: 32, ppg_hidden: 8, affinity_dim: UPPER_LEN, steps: 1000 }
    }
}

impl DenoiserConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Dilated 9-tap stack, high noise.
    Coarse,
    /// 7-tap conv with self-attention.
    Structural,
    /// 5-tap residual stack, low noise.
    Detail,
}

impl Stage {
    /// `t/T` in (2/3, 1] is coarse, (1/3, 2/3] structural, [0, 1/3] detail.
    pub fn for_step(t: usize, steps: usize) -> Stage {
        if 3 * t > 2 * steps {
            Stage::Coarse
        } else if 3 * t > steps {
            Stage::Structural
        } else {
            Stage::Detail
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageRule {
    #[default]
    Switched,
    Fixed(Stage),
}

impl StageRule {
    pub fn stage(self, t: usize, steps: usize) -> Stage {
        match self {
            StageRule::Switched => Stage::for_step(t, steps),
            StageRule::Fixed(s) => s,
        }
    }
}

/// Conditioning inputs: one PPG window and an upper-triangle affinity.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    pub ppg: &'a [f64],
    pub affinity: &'a [f64],
}

const PPG_LOCAL_TAPS: usize = 17;
const PPG_WIDE_TAPS: usize = 9;
const PPG_WIDE_DILATION: usize = 8;

/// Parameter layout: `(name, rows, cols, fan_in)` given a config.
fn layout(c: &DenoiserConfig) -> Vec<(String, usize, usize, usize)> {
    let (n, l, ch, dk) = (c.samples, c.leads, c.channels, c.d_k);
    let mut v = vec![
        ("ppg.dense.w", n, ch, n),
        ("ppg.dense.b", 1, ch, 0),
        ("ppg.local1.w", PPG_LOCAL_TAPS, c.ppg_hidden, PPG_LOCAL_TAPS),
        ("ppg.local1.b", 1, c.ppg_hidden, 0),
        ("ppg.local2.w", PPG_WIDE_TAPS * c.ppg_hidden, ch, PPG_WIDE_TAPS * c.ppg_hidden),
        ("ppg.local2.b", 1, ch, 0),
        ("affinity.w", c.affinity_dim, ch, c.affinity_dim),
        ("affinity.b", 1, ch, 0),
    ];
    v.extend([
        ("coarse.conv1.w", 9 * l, ch, 9 * l),
        ("coarse.conv1.b", 1, ch, 0),
        ("coarse.conv2.w", 9 * ch, ch, 9 * ch),
        ("coarse.conv2.b", 1, ch, 0),
        ("coarse.conv3.w", 9 * ch, l, 9 * ch),
        ("coarse.conv3.b", 1, l, 0),
        ("structural.conv_in.w", 7 * l, ch, 7 * l),
        ("structural.conv_in.b", 1, ch, 0),
        ("structural.wq", ch, dk, ch),
        ("structural.wk", ch, dk, ch),
        ("structural.wv", ch, ch, ch),
        ("structural.conv_out.w", 7 * ch, l, 7 * ch),
        ("structural.conv_out.b", 1, l, 0),
        ("detail.conv1.w", 5 * l, ch, 5 * l),
        ("detail.conv1.b", 1, ch, 0),
        ("detail.conv2.w", 5 * ch, ch, 5 * ch),
        ("detail.conv2.b", 1, ch, 0),
        ("detail.conv3.w", 5 * ch, l, 5 * ch),
        ("detail.conv3.b", 1, l, 0),
        ("deblur.gamma", 1, 1, 0),
    ]);
    v.into_iter().map(|(s, r, c, f)| (s.to_string(), r, c, f)).collect()
}

/// Frozen sinusoidal embedding; row `t - 1` belongs to step `t`.
pub fn timestep_table(steps: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; steps * dim];
    for t in 1..=steps {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = t as f64 * freq;
            out[(t - 1) * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

pub const TIME_TABLE: &str = "time.table";
pub const GAMMA: &str = "deblur.gamma";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
}

impl Denoiser {
    fn build(cfg: &DenoiserConfig, mut init: impl FnMut(usize, usize, usize) -> Vec<f64>) -> Self {
        let mut store = ParamStore::new();
        for (name, r, c, fan_in) in layout(cfg) {
            store.add(&name, r, c, init(r, c, fan_in), true);
        }
        store.add(TIME_TABLE, cfg.steps, cfg.channels, timestep_table(cfg.steps, cfg.channels), false);
        Self { cfg: cfg.clone(), store }
    }

    /// Uniform `±sqrt(3 / fan_in)` weights; biases and γ start at zero.
    pub fn new(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(cfg, |r, c, fan_in| {
            if fan_in == 0 {
                return vec![0.0; r * c];
            }
            let a = (3.0 / fan_in as f64).sqrt();
            (0..r * c).map(|_| rng.random_range(-a..a)).collect()
        }))
    }

    /// Every trainable tensor zero.
    pub fn zeros(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, |r, c, _| vec![0.0; r * c]))
    }

    /// Rebuilds from a stored layout, checking it against `cfg`.
    pub fn from_store(cfg: DenoiserConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::zeros(&cfg)?;
        let same = expected.store.entries().len() == store.entries().len()
            && expected.store.entries().iter().zip(store.entries()).all(|(a, b)| {
                a.name == b.name && a.rows == b.rows && a.cols == b.cols && a.offset == b.offset
            });
        if !same {
            return Err(Error::format("parameter layout does not match the denoiser config"));
        }
        Ok(Self { cfg, store })
    }

    pub fn gamma(&self) -> f64 {
        self.store.slice(self.id(GAMMA))[0]
    }

    fn id(&self, name: &str) -> usize {
        self.store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(&self.store, self.id(name))
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, kernel: usize, dilation: usize) -> Var {
        let w = self.p(tape, &format!("{name}.w"));
        let b = self.p(tape, &format!("{name}.b"));
        let y = tape.conv1d(x, w, kernel, dilation);
        tape.add_row(y, b)
    }

    /// `[N × C]` condition: global PPG and affinity embeddings plus the
    /// timestep row broadcast over time, and the local PPG branch.
    fn condition(&self, tape: &mut Tape, t: usize, cond: &Condition) -> Var {
        let (n, ch) = (self.cfg.samples, self.cfg.channels);
        let ppg_row = tape.leaf(1, n, cond.ppg.to_vec());
        let w = self.p(tape, "ppg.dense.w");
        let b = self.p(tape, "ppg.dense.b");
        let g_ppg = tape.matmul(ppg_row, w);
        let g_ppg = tape.add(g_ppg, b);

        let aff = tape.leaf(1, self.cfg.affinity_dim, cond.affinity.to_vec());
        let w = self.p(tape, "affinity.w");
        let b = self.p(tape, "affinity.b");
        let g_aff = tape.matmul(aff, w);
        let g_aff = tape.add(g_aff, b);

        let table = self.store.slice(self.id(TIME_TABLE));
        let time = tape.leaf(1, ch, table[(t - 1) * ch..t * ch].to_vec());
        let g = tape.add(g_ppg, g_aff);
        let g = tape.add(g, time);

        let ppg_col = tape.leaf(n, 1, cond.ppg.to_vec());
        let h = self.conv(tape, ppg_col, "ppg.local1", PPG_LOCAL_TAPS, 1);
        let h = tape.silu(h);
        let local = self.conv(tape, h, "ppg.local2", PPG_WIDE_TAPS, PPG_WIDE_DILATION);
        tape.add_row(local, g)
    }

    fn check_inputs(&self, x_len: usize, t: usize, cond: &Condition) -> Result<()> {
        let c = &self.cfg;
        let checks = [
            (x_len, c.samples * c.leads, "x_t"),
            (cond.ppg.len(), c.samples, "ppg"),
            (cond.affinity.len(), c.affinity_dim, "affinity"),
        ];
        for (got, want, what) in checks {
            if got != want {
                return Err(Error::ShapeMismatch { expected: format!("{want} values for {what}"), got: got.to_string() });
            }
        }
        if t == 0 || t > c.steps {
            return Err(Error::invalid(format!("t={t} outside [1, {}]", c.steps)));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `x` is `[samples × leads]`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, t: usize, cond: &Condition, rule: StageRule) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        if cols != self.cfg.leads {
            return Err(Error::ShapeMismatch { expected: format!("{} leads", self.cfg.leads), got: cols.to_string() });
        }
        self.check_inputs(rows * cols, t, cond)?;
        let c = self.condition(tape, t, cond);
        Ok(match rule.stage(t, self.cfg.steps) {
            Stage::Coarse => {
                let h = self.conv(tape, x, "coarse.conv1", 9, 1);
                let h = tape.add(h, c);
                let h = tape.silu(h);
                let h = self.conv(tape, h, "coarse.conv2", 9, 2);
                let h = tape.silu(h);
                self.conv(tape, h, "coarse.conv3", 9, 4)
            }
            Stage::Structural => {
                let h = self.conv(tape, x, "structural.conv_in", 7, 1);
                let h = tape.add(h, c);
                let h = tape.silu(h);
                let wq = self.p(tape, "structural.wq");
                let wk = self.p(tape, "structural.wk");
                let wv = self.p(tape, "structural.wv");
                let q = tape.matmul(h, wq);
                let k = tape.matmul(h, wk);
                let v = tape.matmul(h, wv);
                let a = attention_tape(tape, q, k, v);
                let h = tape.add(h, a);
                let h = tape.silu(h);
                self.conv(tape, h, "structural.conv_out", 7, 1)
            }
            Stage::Detail => {
                let h1 = self.conv(tape, x, "detail.conv1", 5, 1);
                let h1 = tape.add(h1, c);
                let h1 = tape.silu(h1);
                let h2 = self.conv(tape, h1, "detail.conv2", 5, 1);
                let h2 = tape.silu(h2);
                let h = tape.add(h1, h2);
                self.conv(tape, h, "detail.conv3", 5, 1)
            }
        })
    }

    /// ε̂ for a row-major `[samples × leads]` input.
    pub fn predict(&self, x_rows: &[f64], t: usize, cond: &Condition, rule: StageRule) -> Result<Vec<f64>> {
        self.check_inputs(x_rows.len(), t, cond)?;
        let mut tape = Tape::new();
        let x = tape.leaf(self.cfg.samples, self.cfg.leads, x_rows.to_vec());
        let out = self.forward_tape(&mut tape, x, t, cond, rule)?;
        Ok(tape.value(out).to_vec())
    }

    /// Number of stored blocks whose name starts with `prefix`.
    pub fn block_count(&self, prefix: &str) -> usize {
        self.store.entries().iter().filter(|e| e.name.starts_with(prefix) && e.name.ends_with(".w")).count()
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.leads < 2 || self.channels == 0 || self.d_k == 0 || self.ppg_hidden == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive (and at least two leads)"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("denoiser needs at least one diffusion step"));
        }
        Ok(())
    }
}

/// `softmax(Q Kᵀ / √d_k) V` on the tape.
pub fn attention_tape(tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    let dk = tape.shape(q).1;
    let kt = tape.transpose(k);
    let s = tape.matmul(q, kt);
    let s = tape.scale(s, 1.0 / (dk as f64).sqrt());
    let p = tape.softmax_rows(s);
    tape.matmul(p, v)
}

/// Scaled dot-product attention on row-major `[n × d]` arrays.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d_k: usize, d_v: usize) -> Result<Vec<f64>> {
    if q.len() != n * d_k || k.len() != n * d_k || v.len() != n * d_v {
        return Err(Error::invalid("attention: inconsistent shapes"));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(n, d_k, q.to_vec()), tape.leaf(n, d_k, k.to_vec()), tape.leaf(n, d_v, v.to_vec()));
    let out = attention_tape(&mut tape, qv, kv, vv);
    Ok(tape.value(out).to_vec())
}

/// Channel-major to row-major `[n × c]`.
pub fn to_rows(channels: &[Vec<f64>]) -> Vec<f64> {
    let n = channels.first().map_or(0, Vec::len);
    let c = channels.len();
    let mut out = vec![0.0; n * c];
    for (j, ch) in channels.iter().enumerate() {
        for (i, &v) in ch.iter().enumerate() {
            out[i * c + j] = v;
        }
    }
    out
}

/// Row-major `[n × c]` to channel-major.
pub fn from_rows(rows: &[f64], c: usize) -> Vec<Vec<f64>> {
    (0..c).map(|j| rows.iter().skip(j).step_by(c).copied().collect()).collect()
}
