//! LSTM policies that emit architecture tokens slot by slot.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{check, run_cases, GradCheck};
use crate::rng::Rng;
use crate::space::{reduce_with_marginals, Architecture, JointSpace, ReducedSpace, StreamSearchSpace};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};

/// Default LSTM width.
pub const DEFAULT_HIDDEN: usize = 64;
/// Half-width of the uniform initialization.
pub const INIT_SCALE: f64 = 0.1;
/// Samples used to estimate marginal choice probabilities.
pub const MARGINAL_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyRole {
    Stream(String),
    /// Conditioned on the final states of this many stream controllers.
    Fusion {
        streams: usize,
    },
}

/// A single-layer LSTM policy over a fixed sequence of slots.
#[derive(Debug, Clone)]
pub struct ControllerPolicy {
    pub role: PolicyRole,
    pub hidden: usize,
    pub arities: Vec<usize>,
    params: ParamSet,
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    start: Option<ParamId>,
    emb: Vec<ParamId>,
    proj: Vec<(ParamId, ParamId)>,
    cond_cell: Option<(ParamId, ParamId)>,
    cond_input: Option<(ParamId, ParamId)>,
}

/// Everything recorded while sampling one token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub total_log_prob: f64,
    /// Final hidden state; doubles as the stream embedding.
    pub final_h: Vec<f64>,
    pub final_c: Vec<f64>,
    /// For fusion traces, the fingerprint of the stream traces they were
    /// conditioned on.
    #[serde(default)]
    pub conditioned_on: Option<u64>,
}

/// FNV-1a over the tokens and final states of `traces`.
pub fn trace_fingerprint(traces: &[&SampleTrace]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for t in traces {
        feed(t.tokens.len() as u64);
        t.tokens.iter().for_each(|&k| feed(k as u64));
        t.final_h.iter().chain(&t.final_c).for_each(|v| feed(v.to_bits()));
    }
    h
}

/// How the first LSTM step is fed.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Learned start embedding, zero state.
    Start,
    /// Fusion conditioning: `[n, M*H]` concatenated stream final cells and
    /// hidden states.
    Conditioned { cells: Var, embeds: Var },
}

/// Tape handles produced by [`ControllerPolicy::unroll`] for `n` sequences.
#[derive(Debug, Clone)]
pub struct Unroll {
    /// `[n]` total log-probability per sequence.
    pub log_prob: Var,
    /// `[n]` summed per-slot entropy.
    pub entropy: Var,
    /// `[n]` log-probability of each slot's token.
    pub slot_log_probs: Vec<Var>,
    pub h: Var,
    pub c: Var,
    pub tokens: Vec<Vec<usize>>,
}

/// Token choice at one slot: given the slot index and the row-major
/// `[n, arity]` probabilities, return one token per row.
pub type Chooser<'a> = dyn FnMut(usize, &[f64], usize) -> Result<Vec<usize>> + 'a;

struct Init2<'a> {
    params: ParamSet,
    rng: &'a mut Rng,
}

impl Init2<'_> {
    fn uniform(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = Tensor::uniform(shape.to_vec(), INIT_SCALE, self.rng);
        self.params.add(name, t)
    }
}

impl ControllerPolicy {
    pub fn new(role: PolicyRole, arities: Vec<usize>, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || arities.contains(&0) {
            return Err(Error::Contract(
                "controller needs a positive width and non-empty slots".into(),
            ));
        }
        let h = hidden;
        let mut rng = Rng::new(seed);
        let mut b = Init2 {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let wx = b.uniform("lstm.wx".into(), &[h, 4 * h]);
        let wh = b.uniform("lstm.wh".into(), &[h, 4 * h]);
        let bias = b.uniform("lstm.b".into(), &[4 * h]);
        let (start, cond_cell, cond_input) = match role {
            PolicyRole::Stream(_) => (Some(b.uniform("start".into(), &[1, h])), None, None),
            PolicyRole::Fusion { streams } => {
                if streams == 0 {
                    return Err(Error::Contract("fusion controller needs at least one stream".into()));
                }
                let cc = (
                    b.uniform("cond.cell.w".into(), &[streams * h, h]),
                    b.uniform("cond.cell.b".into(), &[h]),
                );
                let ci = (
                    b.uniform("cond.input.w".into(), &[streams * h, h]),
                    b.uniform("cond.input.b".into(), &[h]),
                );
                (None, Some(cc), Some(ci))
            }
        };
        let mut emb = Vec::with_capacity(arities.len());
        let mut proj = Vec::with_capacity(arities.len());
        for (t, &a) in arities.iter().enumerate() {
            emb.push(b.uniform(format!("emb{t}"), &[a, h]));
            proj.push((
                b.uniform(format!("proj{t}.w"), &[h, a]),
                b.uniform(format!("proj{t}.b"), &[a]),
            ));
        }
        Ok(ControllerPolicy {
            role,
            hidden,
            arities,
            params: b.params,
            wx,
            wh,
            bias,
            start,
            emb,
            proj,
            cond_cell,
            cond_input,
        })
    }

    pub fn for_stream(space: &StreamSearchSpace, hidden: usize, seed: u64) -> Result<Self> {
        Self::new(
            PolicyRole::Stream(space.stream_id.clone()),
            space.arities(),
            hidden,
            seed,
        )
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes every output projection so each slot is exactly uniform.
    pub fn make_uniform(&mut self) {
        for &(w, b) in &self.proj {
            self.params.get_mut(w).value.fill(0.0);
            self.params.get_mut(b).value.fill(0.0);
        }
    }

    pub fn param_vars(&self, g: &mut Graph) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| g.param(&self.params, ParamId(i)))
            .collect()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.arities.len() {
            return Err(Error::Token(format!(
                "{} tokens for a controller with {} slots",
                tokens.len(),
                self.arities.len()
            )));
        }
        if let Some((t, (&tok, &a))) = tokens
            .iter()
            .zip(&self.arities)
            .enumerate()
            .find(|(_, (&x, &a))| x >= a)
        {
            return Err(Error::Token(format!("token {tok} at slot {t} exceeds arity {a}")));
        }
        Ok(())
    }

    fn linear(g: &mut Graph, pv: &[Var], (w, b): (ParamId, ParamId), x: Var) -> Result<Var> {
        let y = g.matmul(x, pv[w.0])?;
        g.add_bias(y, pv[b.0], 1)
    }

    /// Runs the LSTM over all slots for `n` sequences at once. Tokens are
    /// picked by `choose`; log-probabilities and entropies stay on the tape.
    pub fn unroll(&self, g: &mut Graph, pv: &[Var], n: usize, init: Init, choose: &mut Chooser<'_>) -> Result<Unroll> {
        let hd = self.hidden;
        let zeros = g.constant(Tensor::zeros([n, hd]));
        let (mut x, mut h, mut c) = match (init, &self.role) {
            (Init::Start, PolicyRole::Stream(_)) => {
                let s = pv[self.start.expect("stream controller has a start embedding").0];
                (g.index_rows(s, &vec![0; n])?, zeros, zeros)
            }
            (Init::Conditioned { cells, embeds }, PolicyRole::Fusion { .. }) => {
                let c0 = Self::linear(g, pv, self.cond_cell.expect("fusion conditioning"), cells)?;
                let x0 = Self::linear(g, pv, self.cond_input.expect("fusion conditioning"), embeds)?;
                (x0, zeros, c0)
            }
            _ => {
                return Err(Error::Conditioning(format!(
                    "initial input does not match controller role {:?}",
                    self.role
                )))
            }
        };
        let mut slot_log_probs = Vec::with_capacity(self.arities.len());
        let mut entropies = Vec::with_capacity(self.arities.len());
        let mut tokens = vec![Vec::with_capacity(self.arities.len()); n];
        for (t, &a) in self.arities.iter().enumerate() {
            let gx = g.matmul(x, pv[self.wx.0])?;
            let gh = g.matmul(h, pv[self.wh.0])?;
            let gates = g.add(gx, gh)?;
            let gates = g.add_bias(gates, pv[self.bias.0], 1)?;
            let i = g.narrow(gates, 1, 0, hd)?;
            let i = g.sigmoid(i);
            let f = g.narrow(gates, 1, hd, hd)?;
            let f = g.sigmoid(f);
            let cand = g.narrow(gates, 1, 2 * hd, hd)?;
            let cand = g.tanh(cand);
            let o = g.narrow(gates, 1, 3 * hd, hd)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;

            let logits = Self::linear(g, pv, self.proj[t], h)?;
            let lsm = g.log_softmax(logits)?;
            let probs: Vec<f64> = g.value(lsm).data().iter().map(|v| v.exp()).collect();
            let picked = choose(t, &probs, a)?;
            if picked.len() != n || picked.iter().any(|&k| k >= a) {
                return Err(Error::Token(format!("invalid token choice at slot {t}")));
            }
            for (row, &k) in tokens.iter_mut().zip(&picked) {
                row.push(k);
            }
            slot_log_probs.push(g.gather(lsm, &picked)?);
            let p = g.exp(lsm);
            let plogp = g.mul(p, lsm)?;
            let s = g.sum_axis(plogp, 1)?;
            entropies.push(g.neg(s));
            x = g.index_rows(pv[self.emb[t].0], &picked)?;
        }
        let log_prob = sum_vars(g, &slot_log_probs, n)?;
        let entropy = sum_vars(g, &entropies, n)?;
        Ok(Unroll {
            log_prob,
            entropy,
            slot_log_probs,
            h,
            c,
            tokens,
        })
    }

    fn trace(g: &Graph, u: &Unroll) -> SampleTrace {
        SampleTrace {
            tokens: u.tokens[0].clone(),
            log_probs: u.slot_log_probs.iter().map(|&v| g.value(v).data()[0]).collect(),
            total_log_prob: g.value(u.log_prob).data()[0],
            final_h: g.value(u.h).data().to_vec(),
            final_c: g.value(u.c).data().to_vec(),
            conditioned_on: None,
        }
    }

    fn sample_with(&self, init: impl FnOnce(&mut Graph) -> Result<Init>, seed: u64) -> Result<SampleTrace> {
        let mut g = Graph::eval();
        let pv = self.param_vars(&mut g);
        let init = init(&mut g)?;
        let mut rng = Rng::new(seed);
        let u = self.unroll(&mut g, &pv, 1, init, &mut |_, probs, _| {
            Ok(vec![rng.categorical(probs)])
        })?;
        Ok(Self::trace(&g, &u))
    }

    fn score_with(&self, init: impl FnOnce(&mut Graph) -> Result<Init>, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let mut g = Graph::eval();
        let pv = self.param_vars(&mut g);
        let init = init(&mut g)?;
        let u = self.unroll(&mut g, &pv, 1, init, &mut |t, _, _| Ok(vec![tokens[t]]))?;
        g.value(u.log_prob).item()
    }

    /// Samples a stream architecture.
    pub fn sample(&self, seed: u64) -> Result<SampleTrace> {
        self.sample_with(|_| Ok(Init::Start), seed)
    }

    /// `log pi(tokens)` for a stream controller.
    pub fn score(&self, tokens: &[usize]) -> Result<f64> {
        self.score_with(|_| Ok(Init::Start), tokens)
    }

    fn conditioning(&self, g: &mut Graph, traces: &[&SampleTrace]) -> Result<Init> {
        let PolicyRole::Fusion { streams } = self.role else {
            return Err(Error::Conditioning("stream controllers take no conditioning".into()));
        };
        if traces.len() != streams {
            return Err(Error::Conditioning(format!(
                "fusion controller expects {streams} stream traces, got {}",
                traces.len()
            )));
        }
        let mut cells = Vec::with_capacity(streams * self.hidden);
        let mut embeds = Vec::with_capacity(streams * self.hidden);
        for t in traces {
            if t.final_c.len() != self.hidden || t.final_h.len() != self.hidden {
                return Err(Error::Conditioning(
                    "stream trace width differs from the fusion controller".into(),
                ));
            }
            cells.extend_from_slice(&t.final_c);
            embeds.extend_from_slice(&t.final_h);
        }
        let w = streams * self.hidden;
        Ok(Init::Conditioned {
            cells: g.constant(Tensor::new([1, w], cells)?),
            embeds: g.constant(Tensor::new([1, w], embeds)?),
        })
    }

    /// Samples fusion tokens conditioned on the stream traces.
    pub fn sample_fusion(&self, stream_traces: &[&SampleTrace], seed: u64) -> Result<SampleTrace> {
        let mut t = self.sample_with(|g| self.conditioning(g, stream_traces), seed)?;
        t.conditioned_on = Some(trace_fingerprint(stream_traces));
        Ok(t)
    }

    /// `log pi_f(tokens | streams)`.
    pub fn score_fusion(&self, stream_traces: &[&SampleTrace], tokens: &[usize]) -> Result<f64> {
        self.score_with(|g| self.conditioning(g, stream_traces), tokens)
    }

    /// Per-slot marginal choice probabilities, estimated by averaging the
    /// policy's softmax along `samples` sampled paths.
    pub fn marginals(&self, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if !matches!(self.role, PolicyRole::Stream(_)) {
            return Err(Error::Contract("marginals are defined for stream controllers".into()));
        }
        let n = samples.max(1);
        let mut g = Graph::eval();
        let pv = self.param_vars(&mut g);
        let mut rng = Rng::new(seed);
        let mut sums: Vec<Vec<f64>> = self.arities.iter().map(|&a| vec![0.0; a]).collect();
        self.unroll(&mut g, &pv, n, Init::Start, &mut |t, probs, a| {
            let mut picks = Vec::with_capacity(n);
            for row in probs.chunks_exact(a) {
                for (s, p) in sums[t].iter_mut().zip(row) {
                    *s += p;
                }
                picks.push(rng.categorical(row));
            }
            Ok(picks)
        })?;
        for s in &mut sums {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(sums)
    }

    /// Copy of this policy restricted to the kept choices of every slot.
    pub fn restrict(&self, kept: &[Vec<usize>]) -> Result<ControllerPolicy> {
        if kept.len() != self.arities.len() {
            return Err(Error::Contract("one kept list per slot is required".into()));
        }
        let mut out = self.clone();
        out.arities = kept.iter().map(Vec::len).collect();
        let mut params = ParamSet::new();
        for (i, p) in self.params.iter().enumerate() {
            let mut value = p.value.clone();
            if let Some(t) = self.emb.iter().position(|id| id.0 == i) {
                value = select_rows(&p.value, &kept[t])?;
            } else if let Some(t) = self.proj.iter().position(|(w, _)| w.0 == i) {
                value = select_cols(&p.value, &kept[t])?;
            } else if let Some(t) = self.proj.iter().position(|(_, b)| b.0 == i) {
                value = Tensor::vector(kept[t].iter().map(|&k| p.value.data()[k]).collect());
            }
            params.add(p.name.clone(), value);
        }
        out.params = params;
        out.check_tokens(&vec![0; out.arities.len()])?;
        Ok(out)
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let cols = t.dims()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new([rows.len(), cols], data)
}

fn select_cols(t: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let (r, c) = (t.dims()[0], t.dims()[1]);
    let mut data = Vec::with_capacity(r * cols.len());
    for i in 0..r {
        data.extend(cols.iter().map(|&j| t.data()[i * c + j]));
    }
    Tensor::new([r, cols.len()], data)
}

fn sum_vars(g: &mut Graph, vars: &[Var], n: usize) -> Result<Var> {
    let mut acc = g.constant(Tensor::zeros([n]));
    for &v in vars {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Keeps the most probable choices of every slot under `policy`.
pub fn reduce_space(
    space: &StreamSearchSpace,
    policy: &ControllerPolicy,
    keep_per_slot: usize,
    seed: u64,
) -> Result<ReducedSpace> {
    if policy.arities != space.arities() {
        return Err(Error::Contract(format!(
            "policy slots {:?} do not match space `{}`",
            policy.arities, space.stream_id
        )));
    }
    let m = policy.marginals(MARGINAL_SAMPLES, seed)?;
    let provenance = format!(
        "marginals of the `{}` warm-up policy from {MARGINAL_SAMPLES} samples (seed {seed})",
        space.stream_id
    );
    reduce_with_marginals(space, &m, keep_per_slot, provenance)
}

/// Stream controllers plus the conditioned fusion controller.
#[derive(Debug, Clone)]
pub struct JointPolicy {
    pub streams: Vec<ControllerPolicy>,
    pub fusion: ControllerPolicy,
}

/// One sampled joint architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrace {
    pub streams: Vec<SampleTrace>,
    pub fusion: SampleTrace,
}

impl JointTrace {
    pub fn architecture(&self, space: &JointSpace) -> Architecture {
        Architecture {
            streams: space
                .streams
                .iter()
                .zip(&self.streams)
                .map(|(s, t)| (s.stream_id.clone(), t.tokens.clone()))
                .collect(),
            fusion: self.fusion.tokens.clone(),
        }
    }
}

/// Tape handles of a batched joint unroll.
#[derive(Debug, Clone)]
pub struct JointUnroll {
    pub log_prob: Var,
    pub entropy: Var,
    pub stream_log_probs: Vec<Var>,
    pub fusion_log_prob: Var,
}

impl JointPolicy {
    pub fn new(space: &JointSpace, hidden: usize, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let streams = space
            .streams
            .iter()
            .enumerate()
            .map(|(i, s)| ControllerPolicy::for_stream(s, hidden, root.split(i as u64).seed()))
            .collect::<Result<Vec<_>>>()?;
        let fusion = ControllerPolicy::new(
            PolicyRole::Fusion {
                streams: space.streams.len(),
            },
            space.fusion.arities(),
            hidden,
            root.split(u64::MAX).seed(),
        )?;
        Ok(JointPolicy { streams, fusion })
    }

    pub fn sample(&self, seed: u64) -> Result<JointTrace> {
        let root = Rng::new(seed);
        let streams = self
            .streams
            .iter()
            .enumerate()
            .map(|(i, p)| p.sample(root.split(i as u64).seed()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&SampleTrace> = streams.iter().collect();
        let fusion = self.fusion.sample_fusion(&refs, root.split(u64::MAX).seed())?;
        Ok(JointTrace { streams, fusion })
    }

    pub fn param_vars(&self, g: &mut Graph) -> Vec<Vec<Var>> {
        let mut out: Vec<Vec<Var>> = self.streams.iter().map(|p| p.param_vars(g)).collect();
        out.push(self.fusion.param_vars(g));
        out
    }

    /// Scores `n` joint token sequences on one tape: every stream unroll
    /// feeds its final states into the fusion conditioning, so gradients of
    /// the fusion term reach the stream controllers.
    pub fn unroll(&self, g: &mut Graph, pvs: &[Vec<Var>], archs: &[Architecture]) -> Result<JointUnroll> {
        let n = archs.len();
        if pvs.len() != self.streams.len() + 1 {
            return Err(Error::Contract("one parameter list per controller is required".into()));
        }
        let mut hs = Vec::with_capacity(self.streams.len());
        let mut cs = Vec::with_capacity(self.streams.len());
        let mut stream_log_probs = Vec::with_capacity(self.streams.len());
        let mut entropy = g.constant(Tensor::zeros([n]));
        for (m, policy) in self.streams.iter().enumerate() {
            let seqs: Vec<&[usize]> = archs
                .iter()
                .map(|a| {
                    a.streams
                        .get(m)
                        .map(|s| s.1.as_slice())
                        .ok_or_else(|| Error::Factorization(format!("architecture lacks stream {m}")))
                })
                .collect::<Result<_>>()?;
            for s in &seqs {
                policy.check_tokens(s)?;
            }
            let u = policy.unroll(g, &pvs[m], n, Init::Start, &mut |t, _, _| {
                Ok(seqs.iter().map(|s| s[t]).collect())
            })?;
            hs.push(u.h);
            cs.push(u.c);
            stream_log_probs.push(u.log_prob);
            entropy = g.add(entropy, u.entropy)?;
        }
        for a in archs {
            self.fusion.check_tokens(&a.fusion)?;
        }
        let cells = g.concat(&cs, 1)?;
        let embeds = g.concat(&hs, 1)?;
        let fu = self.fusion.unroll(
            g,
            &pvs[self.streams.len()],
            n,
            Init::Conditioned { cells, embeds },
            &mut |t, _, _| Ok(archs.iter().map(|a| a.fusion[t]).collect()),
        )?;
        entropy = g.add(entropy, fu.entropy)?;
        let mut log_prob = fu.log_prob;
        for &lp in &stream_log_probs {
            log_prob = g.add(log_prob, lp)?;
        }
        Ok(JointUnroll {
            log_prob,
            entropy,
            stream_log_probs,
            fusion_log_prob: fu.log_prob,
        })
    }

    /// Adds the gradients in `grads` (from [`Graph::backward_full`]) to each
    /// controller's parameters.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>], pvs: &[Vec<Var>]) {
        let policies = self.streams.iter_mut().chain(core::iter::once(&mut self.fusion));
        for (policy, vars) in policies.zip(pvs) {
            accumulate_into(policy.params_mut(), grads, vars);
        }
    }
}

pub(crate) fn accumulate_into(params: &mut ParamSet, grads: &[Option<Vec<f64>>], vars: &[Var]) {
    for (i, v) in vars.iter().enumerate() {
        if let Some(gr) = &grads[v.index()] {
            let p = params.get_mut(ParamId(i));
            for (a, b) in p.grad.data_mut().iter_mut().zip(gr) {
                *a += b;
            }
        }
    }
}

/// Unit-scale random parameter values. The initial policy is nearly uniform,
/// where the entropy gradient vanishes and relative errors are meaningless.
fn random_point(params: &ParamSet, r: &mut Rng) -> Vec<Tensor> {
    params
        .iter()
        .map(|q| Tensor::uniform(q.value.shape().clone(), 1.0, r))
        .collect()
}

/// Finite-difference checks of controller log-probabilities (stream and
/// conditioned joint) with respect to every controller parameter.
pub fn controller_gradient_suite(cases: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    fn stream_case(r: &mut Rng, s: u64) -> Result<GradCheck> {
        let arities: Vec<usize> = (0..1 + r.below(3)).map(|_| 1 + r.below(3)).collect();
        let hidden = 1 + r.below(3);
        let p = ControllerPolicy::new(PolicyRole::Stream("s".into()), arities.clone(), hidden, r.next_u64())?;
        let toks: Vec<Vec<usize>> = (0..2).map(|_| arities.iter().map(|&a| r.below(a)).collect()).collect();
        let values = random_point(p.params(), r);
        check(&values, s, |g, v| {
            let u = p.unroll(g, v, toks.len(), Init::Start, &mut |t, _, _| {
                Ok(toks.iter().map(|x| x[t]).collect())
            })?;
            let both = [u.log_prob, u.entropy];
            g.concat(&both, 0)
        })
    }
    fn joint_case(r: &mut Rng, s: u64) -> Result<GradCheck> {
        let hidden = 1 + r.below(2);
        let m = 1 + r.below(2);
        let streams: Vec<ControllerPolicy> = (0..m)
            .map(|i| {
                let ar: Vec<usize> = (0..1 + r.below(2)).map(|_| 1 + r.below(3)).collect();
                ControllerPolicy::new(PolicyRole::Stream(format!("s{i}")), ar, hidden, r.next_u64())
            })
            .collect::<Result<_>>()?;
        let far: Vec<usize> = (0..1 + r.below(2)).map(|_| 1 + r.below(3)).collect();
        let fusion = ControllerPolicy::new(PolicyRole::Fusion { streams: m }, far.clone(), hidden, r.next_u64())?;
        let jp = JointPolicy { streams, fusion };
        let arch = Architecture {
            streams: jp
                .streams
                .iter()
                .map(|p| (String::new(), p.arities.iter().map(|&a| r.below(a)).collect()))
                .collect(),
            fusion: far.iter().map(|&a| r.below(a)).collect(),
        };
        let mut values = Vec::new();
        let mut counts = Vec::new();
        for p in jp.streams.iter().chain(core::iter::once(&jp.fusion)) {
            counts.push(p.params().len());
            values.extend(random_point(p.params(), r));
        }
        check(&values, s, |g, v| {
            let mut pvs = Vec::new();
            let mut off = 0;
            for &c in &counts {
                pvs.push(v[off..off + c].to_vec());
                off += c;
            }
            let u = jp.unroll(g, &pvs, core::slice::from_ref(&arch))?;
            g.concat(&[u.log_prob, u.entropy], 0)
        })
    }
    let mut rng = Rng::new(seed);
    let a = run_cases(cases, &mut rng, seed, stream_case)?;
    let b = run_cases(cases, &mut rng, seed, joint_case)?;
    Ok(vec![
        (String::from("controller_stream"), a.worst),
        (String::from("controller_joint"), b.worst),
    ])
}
