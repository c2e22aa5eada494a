use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenSequence, Vocab, PAD};
use super::Seq2SeqError;
use crate::autodiff::{ParamSet, Tape, Tensor, Var};

/// Which direction a model maps: triples to text, or text to triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    SemanticLm,
    SemanticParser,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::SemanticLm => "semantic-lm",
            Role::SemanticParser => "semantic-parser",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semantic-lm" | "lm" => Ok(Role::SemanticLm),
            "semantic-parser" | "parser" => Ok(Role::SemanticParser),
            _ => Err(format!("unknown role {s:?} (expected semantic-lm or semantic-parser)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 128,
            heads: 4,
            d_ff: 256,
            max_source_len: 64,
            max_target_len: 64,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), Seq2SeqError> {
        let positive = [self.layers, self.d_model, self.heads, self.d_ff];
        if positive.contains(&0) || self.max_source_len < 1 || self.max_target_len < 2 {
            return Err(Seq2SeqError::Config(format!("invalid architecture {self:?}")));
        }
        if self.d_model % self.heads != 0 || self.d_model % 2 != 0 {
            return Err(Seq2SeqError::Config(format!(
                "d_model {} must be even and divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer encoder-decoder with a shared token embedding and a
/// separate output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub role: Role,
    pub arch: Architecture,
    pub vocab: Vocab,
    pub params: ParamSet,
    pub trainable: bool,
}

/// Parameters of a model placed on a tape, in [`ParamSet`] order, plus
/// the dropout state of a training pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    dropout: Option<RefCell<Dropout>>,
}

#[derive(Debug, Clone)]
struct Dropout {
    rate: f32,
    rng: ChaCha8Rng,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Enables inverted dropout on embeddings and sublayer outputs.
    pub fn with_dropout(mut self, rate: f32, seed: u64) -> Self {
        self.dropout = (rate > 0.0).then(|| {
            RefCell::new(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })
        });
        self
    }
}

/// Encoder input for one example.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Ids(&'a [usize]),
    /// `(len, v)` rows of token probabilities, multiplied into the embedding.
    Dist(Var),
}

/// Rows `[q_start, q_start + q_len)` attend to rows `[k_start, k_start + k_len)`.
/// With `causal`, query `i` sees key `j` only when `j <= offset + i`.
#[derive(Debug, Clone, Copy)]
struct Seg {
    q_start: usize,
    q_len: usize,
    k_start: usize,
    k_len: usize,
    causal: bool,
    offset: usize,
}

const MASKED: f32 = -1e9;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

fn positional(pos: usize, d: usize, out: &mut Vec<f32>) {
    for i in 0..d / 2 {
        let rate = (10000f32).powf(-((2 * i) as f32) / d as f32);
        let angle = pos as f32 * rate;
        out.push(angle.sin());
        out.push(angle.cos());
    }
}

impl Seq2SeqModel {
    /// Fresh model with seeded initialization.
    pub fn new(role: Role, arch: Architecture, vocab: Vocab, seed: u64) -> Result<Self, Seq2SeqError> {
        arch.validate()?;
        let (d, ff, v) = (arch.d_model, arch.d_ff, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let xavier = |a: usize, b: usize| (6.0 / (a + b) as f32).sqrt();

        params.insert("embed", uniform(&mut rng, vec![v, d], (3.0 / d as f32).sqrt()))?;
        let norm = |params: &mut ParamSet, name: String| -> Result<(), Seq2SeqError> {
            params.insert(format!("{name}.g"), Tensor::from_fn(vec![d], |_| 1.0))?;
            params.insert(format!("{name}.b"), Tensor::zeros(vec![d]))?;
            Ok(())
        };
        for stack in ["enc", "dec"] {
            for l in 0..arch.layers {
                let blocks: &[&str] = if stack == "enc" { &["self"] } else { &["self", "cross"] };
                for (i, block) in blocks.iter().enumerate() {
                    norm(&mut params, format!("{stack}.{l}.ln{}", i + 1))?;
                    for m in ["q", "k", "v", "o"] {
                        params.insert(format!("{stack}.{l}.{block}.{m}"), uniform(&mut rng, vec![d, d], xavier(d, d)))?;
                    }
                }
                norm(&mut params, format!("{stack}.{l}.ln{}", blocks.len() + 1))?;
                params.insert(format!("{stack}.{l}.ff.w1"), uniform(&mut rng, vec![d, ff], xavier(d, ff)))?;
                params.insert(format!("{stack}.{l}.ff.b1"), Tensor::zeros(vec![ff]))?;
                params.insert(format!("{stack}.{l}.ff.w2"), uniform(&mut rng, vec![ff, d], xavier(ff, d)))?;
                params.insert(format!("{stack}.{l}.ff.b2"), Tensor::zeros(vec![d]))?;
            }
            norm(&mut params, format!("{stack}.ln"))?;
        }
        // Small output weights keep the initial next-token distribution
        // close to uniform.
        params.insert("out.w", uniform(&mut rng, vec![d, v], 0.01 * 3f32.sqrt()))?;
        params.insert("out.b", Tensor::zeros(vec![v]))?;

        Ok(Self {
            role,
            arch,
            vocab,
            params,
            trainable: true,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Puts every parameter on `tape` without copying.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.borrowed(t, requires_grad && self.trainable))
            .collect();
        Bound { vars, dropout: None }
    }

    fn dropout(&self, tape: &mut Tape<'_>, b: &Bound, x: Var) -> Result<Var, Seq2SeqError> {
        let Some(cell) = &b.dropout else { return Ok(x) };
        let mut d = cell.borrow_mut();
        let keep = 1.0 - d.rate;
        let shape = tape.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| if d.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 });
        let mask = tape.constant(mask);
        Ok(tape.mul(x, mask)?)
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"));
        b.vars[i]
    }

    fn check_len(&self, what: &'static str, len: usize, min: usize, max: usize) -> Result<(), Seq2SeqError> {
        if len < min || len > max {
            return Err(Seq2SeqError::Length { what, len, min, max });
        }
        Ok(())
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, b: &Bound, x: Var, name: &str) -> Result<Var, Seq2SeqError> {
        let g = self.p(b, &format!("{name}.g"));
        let bias = self.p(b, &format!("{name}.b"));
        Ok(tape.layer_norm(x, g, bias)?)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, b: &Bound, x: Var, prefix: &str) -> Result<Var, Seq2SeqError> {
        let h = tape.matmul(x, self.p(b, &format!("{prefix}.ff.w1")))?;
        let h = tape.add(h, self.p(b, &format!("{prefix}.ff.b1")))?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, self.p(b, &format!("{prefix}.ff.w2")))?;
        Ok(tape.add(h, self.p(b, &format!("{prefix}.ff.b2")))?)
    }

    /// Multi-head attention over already projected queries, keys and values.
    fn attend(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var, segs: &[Seg]) -> Result<Var, Seq2SeqError> {
        let d = self.arch.d_model;
        let heads = self.arch.heads;
        let dh = d / heads;
        let q = tape.scale(q, 1.0 / (dh as f32).sqrt())?;
        let mut outs = Vec::with_capacity(segs.len());
        for s in segs {
            let qs = tape.slice(q, 0, s.q_start, s.q_start + s.q_len)?;
            let ks = tape.slice(k, 0, s.k_start, s.k_start + s.k_len)?;
            let kt = tape.transpose(ks)?;
            let vs = tape.slice(v, 0, s.k_start, s.k_start + s.k_len)?;
            let mask = if s.causal && s.k_len > s.offset + 1 {
                let mask = Tensor::from_fn(vec![s.q_len, s.k_len], |idx| {
                    let (i, j) = (idx / s.k_len, idx % s.k_len);
                    if j > s.offset + i {
                        MASKED
                    } else {
                        0.0
                    }
                });
                Some(tape.constant(mask))
            } else {
                None
            };
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice(qs, 1, h * dh, (h + 1) * dh)?;
                let kh = tape.slice(kt, 0, h * dh, (h + 1) * dh)?;
                let vh = tape.slice(vs, 1, h * dh, (h + 1) * dh)?;
                let mut scores = tape.matmul(qh, kh)?;
                if let Some(m) = mask {
                    scores = tape.add(scores, m)?;
                }
                let probs = tape.softmax(scores)?;
                head_outs.push(tape.matmul(probs, vh)?);
            }
            outs.push(if heads == 1 { head_outs[0] } else { tape.concat(&head_outs, 1)? });
        }
        Ok(if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? })
    }

    /// Scaled token embeddings plus sinusoidal positions, rows of all
    /// segments stacked.
    fn embed(&self, tape: &mut Tape<'_>, b: &Bound, sources: &[Source<'_>]) -> Result<(Var, Vec<usize>), Seq2SeqError> {
        let d = self.arch.d_model;
        let table = self.p(b, "embed");
        let mut lens = Vec::with_capacity(sources.len());
        let mut pieces = Vec::new();
        let mut ids_run: Vec<usize> = Vec::new();
        for s in sources {
            match *s {
                Source::Ids(ids) => {
                    lens.push(ids.len());
                    ids_run.extend_from_slice(ids);
                }
                Source::Dist(dist) => {
                    if !ids_run.is_empty() {
                        pieces.push(tape.embedding(table, &ids_run)?);
                        ids_run.clear();
                    }
                    lens.push(tape.shape(dist)[0]);
                    pieces.push(tape.matmul(dist, table)?);
                }
            }
        }
        if !ids_run.is_empty() {
            pieces.push(tape.embedding(table, &ids_run)?);
        }
        let x = if pieces.len() == 1 { pieces[0] } else { tape.concat(&pieces, 0)? };
        let x = tape.scale(x, (d as f32).sqrt())?;
        let mut pe = Vec::with_capacity(lens.iter().sum::<usize>() * d);
        for &n in &lens {
            (0..n).for_each(|pos| positional(pos, d, &mut pe));
        }
        let rows = pe.len() / d;
        let pe = tape.constant(Tensor::new(vec![rows, d], pe)?);
        let x = tape.add(x, pe)?;
        Ok((self.dropout(tape, b, x)?, lens))
    }

    fn encode(&self, tape: &mut Tape<'_>, b: &Bound, mut x: Var, lens: &[usize]) -> Result<Var, Seq2SeqError> {
        let mut segs = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &n in lens {
            segs.push(Seg { q_start: start, q_len: n, k_start: start, k_len: n, causal: false, offset: 0 });
            start += n;
        }
        for l in 0..self.arch.layers {
            let pre = format!("enc.{l}");
            let h = self.layer_norm(tape, b, x, &format!("{pre}.ln1"))?;
            let q = tape.matmul(h, self.p(b, &format!("{pre}.self.q")))?;
            let k = tape.matmul(h, self.p(b, &format!("{pre}.self.k")))?;
            let v = tape.matmul(h, self.p(b, &format!("{pre}.self.v")))?;
            let a = self.attend(tape, q, k, v, &segs)?;
            let a = tape.matmul(a, self.p(b, &format!("{pre}.self.o")))?;
            let a = self.dropout(tape, b, a)?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, b, x, &format!("{pre}.ln2"))?;
            let f = self.feed_forward(tape, b, h, &pre)?;
            let f = self.dropout(tape, b, f)?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, b, x, "enc.ln")
    }

    /// Cross-attention keys and values of every decoder layer.
    fn cross_kv(&self, tape: &mut Tape<'_>, b: &Bound, memory: Var) -> Result<Vec<(Var, Var)>, Seq2SeqError> {
        (0..self.arch.layers)
            .map(|l| {
                let k = tape.matmul(memory, self.p(b, &format!("dec.{l}.cross.k")))?;
                let v = tape.matmul(memory, self.p(b, &format!("dec.{l}.cross.v")))?;
                Ok((k, v))
            })
            .collect()
    }

    /// Decoder stack up to the output logits. `prefix` holds self-attention
    /// keys and values of earlier positions (single-segment decoding only).
    /// Returns the logits and this call's self-attention keys and values.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        mut y: Var,
        self_segs: &[Seg],
        cross: &[(Var, Var)],
        cross_segs: &[Seg],
        prefix: Option<&[(Var, Var)]>,
    ) -> Result<(Var, Vec<(Var, Var)>), Seq2SeqError> {
        let mut fresh = Vec::with_capacity(self.arch.layers);
        for l in 0..self.arch.layers {
            let pre = format!("dec.{l}");
            let h = self.layer_norm(tape, b, y, &format!("{pre}.ln1"))?;
            let q = tape.matmul(h, self.p(b, &format!("{pre}.self.q")))?;
            let k_new = tape.matmul(h, self.p(b, &format!("{pre}.self.k")))?;
            let v_new = tape.matmul(h, self.p(b, &format!("{pre}.self.v")))?;
            fresh.push((k_new, v_new));
            let (k, v) = match prefix {
                Some(p) => (tape.concat(&[p[l].0, k_new], 0)?, tape.concat(&[p[l].1, v_new], 0)?),
                None => (k_new, v_new),
            };
            let a = self.attend(tape, q, k, v, self_segs)?;
            let a = tape.matmul(a, self.p(b, &format!("{pre}.self.o")))?;
            let a = self.dropout(tape, b, a)?;
            y = tape.add(y, a)?;

            let h = self.layer_norm(tape, b, y, &format!("{pre}.ln2"))?;
            let q = tape.matmul(h, self.p(b, &format!("{pre}.cross.q")))?;
            let a = self.attend(tape, q, cross[l].0, cross[l].1, cross_segs)?;
            let a = tape.matmul(a, self.p(b, &format!("{pre}.cross.o")))?;
            let a = self.dropout(tape, b, a)?;
            y = tape.add(y, a)?;

            let h = self.layer_norm(tape, b, y, &format!("{pre}.ln3"))?;
            let f = self.feed_forward(tape, b, h, &pre)?;
            let f = self.dropout(tape, b, f)?;
            y = tape.add(y, f)?;
        }
        let y = self.layer_norm(tape, b, y, "dec.ln")?;
        let logits = tape.matmul(y, self.p(b, "out.w"))?;
        Ok((tape.add(logits, self.p(b, "out.b"))?, fresh))
    }

    /// Teacher-forced logits for a batch of examples, rows stacked. Target
    /// `i` contributes `len - 1` rows; row `r` predicts token `r + 1`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        sources: &[Source<'_>],
        targets: &[&TokenSequence],
    ) -> Result<Var, Seq2SeqError> {
        if sources.len() != targets.len() || sources.is_empty() {
            return Err(Seq2SeqError::Config(format!(
                "{} sources for {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let v = self.vocab_size();
        for s in sources {
            match *s {
                Source::Ids(ids) => {
                    self.check_len("source", ids.len(), 1, self.arch.max_source_len)?;
                    if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
                        return Err(Seq2SeqError::Token { id: bad, vocab: v });
                    }
                }
                Source::Dist(dist) => {
                    let shape = tape.shape(dist);
                    if shape.len() != 2 || shape[1] != v {
                        return Err(Seq2SeqError::Config(format!("source distribution shape {shape:?}, vocab {v}")));
                    }
                    self.check_len("source", shape[0], 1, self.arch.max_source_len)?;
                }
            }
        }
        for t in targets {
            self.check_len("target", t.len(), 2, self.arch.max_target_len)?;
            if let Some(&bad) = t.ids.iter().find(|&&id| id >= v) {
                return Err(Seq2SeqError::Token { id: bad, vocab: v });
            }
        }

        let (x, src_lens) = self.embed(tape, b, sources)?;
        let memory = self.encode(tape, b, x, &src_lens)?;
        let cross = self.cross_kv(tape, b, memory)?;

        let (y, tgt_lens) = {
            let ids: Vec<&[usize]> = targets.iter().map(|t| &t.ids[..t.len() - 1]).collect();
            let srcs: Vec<Source<'_>> = ids.into_iter().map(Source::Ids).collect();
            self.embed(tape, b, &srcs)?
        };
        let (mut self_segs, mut cross_segs) = (Vec::new(), Vec::new());
        let (mut ts, mut ss) = (0, 0);
        for (&n, &m) in tgt_lens.iter().zip(&src_lens) {
            self_segs.push(Seg { q_start: ts, q_len: n, k_start: ts, k_len: n, causal: true, offset: 0 });
            cross_segs.push(Seg { q_start: ts, q_len: n, k_start: ss, k_len: m, causal: false, offset: 0 });
            ts += n;
            ss += m;
        }
        let (logits, _) = self.decode(tape, b, y, &self_segs, &cross, &cross_segs, None)?;
        Ok(logits)
    }

    /// Mean cross-entropy over every non-PAD target position of the batch.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        sources: &[Source<'_>],
        targets: &[&TokenSequence],
    ) -> Result<Var, Seq2SeqError> {
        let logits = self.forward_batch(tape, b, sources, targets)?;
        let gold: Vec<usize> = targets.iter().flat_map(|t| t.ids[1..].iter().copied()).collect();
        let mask: Vec<bool> = gold.iter().map(|&id| id != PAD).collect();
        Ok(tape.masked_cross_entropy(logits, &gold, &mask)?)
    }

    /// `(target.len() - 1, v)` logits; row `r` conditions on the source and
    /// `target[..=r]` and scores `target[r + 1]`.
    pub fn teacher_forced_logits(&self, source: &TokenSequence, target: &TokenSequence) -> Result<Tensor, Seq2SeqError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let logits = self.forward_batch(&mut tape, &b, &[Source::Ids(&source.ids)], &[target])?;
        Ok(tape.to_tensor(logits))
    }

    /// Σ log p(target[t] | ·) over non-PAD target positions.
    pub fn sequence_log_prob(&self, source: &TokenSequence, target: &TokenSequence) -> Result<f64, Seq2SeqError> {
        let logits = self.teacher_forced_logits(source, target)?;
        let mut total = 0.0f64;
        for (r, &gold) in target.ids[1..].iter().enumerate() {
            if gold == PAD {
                continue;
            }
            let lp = crate::autodiff::log_softmax(logits.row(r));
            total += lp[gold] as f64;
        }
        Ok(total)
    }

    /// Log-likelihood of `target` when the encoder reads the `(len, v)`
    /// distribution `source_dist` instead of token ids. Returns a scalar on
    /// the tape so gradients reach whatever produced `source_dist`.
    pub fn soft_loglik_on_tape(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        source_dist: Var,
        target: &TokenSequence,
    ) -> Result<Var, Seq2SeqError> {
        self.soft_batch_loglik(tape, b, &[source_dist], &[target])
    }

    /// Sum over examples of the soft-path log-likelihood.
    pub fn soft_batch_loglik(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        dists: &[Var],
        targets: &[&TokenSequence],
    ) -> Result<Var, Seq2SeqError> {
        if self.role != Role::SemanticParser {
            return Err(Seq2SeqError::RoleMismatch { expected: Role::SemanticParser, found: self.role });
        }
        let v = self.vocab_size();
        for &dist in dists {
            let shape = tape.shape(dist).to_vec();
            if shape.len() != 2 || shape[1] != v {
                return Err(Seq2SeqError::Config(format!("source distribution shape {shape:?}, vocab {v}")));
            }
            for (row, r) in tape.value(dist).chunks(v).enumerate() {
                let sum: f32 = r.iter().sum();
                if (sum - 1.0).abs() > 1e-5 || r.iter().any(|&p| p < 0.0) {
                    return Err(Seq2SeqError::RowSum { row, sum });
                }
            }
        }
        let sources: Vec<Source<'_>> = dists.iter().map(|&d| Source::Dist(d)).collect();
        let logits = self.forward_batch(tape, b, &sources, targets)?;
        let gold: Vec<usize> = targets.iter().flat_map(|t| t.ids[1..].iter().copied()).collect();
        let mask: Vec<bool> = gold.iter().map(|&id| id != PAD).collect();
        let count = mask.iter().filter(|&&m| m).count();
        let mean_nll = tape.masked_cross_entropy(logits, &gold, &mask)?;
        Ok(tape.scale(mean_nll, -(count as f32))?)
    }

    /// Value-only form of [`Self::soft_loglik_on_tape`].
    pub fn soft_teacher_forced_loglik(&self, source_dist: &Tensor, target: &TokenSequence) -> Result<f32, Seq2SeqError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let dist = tape.borrowed(source_dist, false);
        let ll = self.soft_loglik_on_tape(&mut tape, &b, dist, target)?;
        Ok(tape.value(ll)[0])
    }

    /// Starts incremental decoding: encodes `source` once and caches the
    /// cross-attention keys and values.
    pub fn decoder(&self, source: &TokenSequence) -> Result<IncrementalDecoder<'_>, Seq2SeqError> {
        self.check_len("source", source.len(), 1, self.arch.max_source_len)?;
        let v = self.vocab_size();
        if let Some(&bad) = source.ids.iter().find(|&&id| id >= v) {
            return Err(Seq2SeqError::Token { id: bad, vocab: v });
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (x, lens) = self.embed(&mut tape, &b, &[Source::Ids(&source.ids)])?;
        let memory = self.encode(&mut tape, &b, x, &lens)?;
        let cross = self
            .cross_kv(&mut tape, &b, memory)?
            .into_iter()
            .map(|(k, v)| (tape.to_tensor(k), tape.to_tensor(v)))
            .collect();
        Ok(IncrementalDecoder {
            model: self,
            source_len: source.len(),
            cross,
            cache: vec![(Vec::new(), Vec::new()); self.arch.layers],
            pos: 0,
        })
    }
}

/// Decoder state for one example: cached cross-attention projections and
/// self-attention keys/values of the tokens fed so far.
#[derive(Debug, Clone)]
pub struct IncrementalDecoder<'m> {
    model: &'m Seq2SeqModel,
    source_len: usize,
    cross: Vec<(Tensor, Tensor)>,
    cache: Vec<(Vec<f32>, Vec<f32>)>,
    pos: usize,
}

impl IncrementalDecoder<'_> {
    /// Number of tokens fed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds `token` at the next position and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f32>, Seq2SeqError> {
        let model = self.model;
        let d = model.arch.d_model;
        if self.pos + 1 >= model.arch.max_target_len {
            return Err(Seq2SeqError::Length {
                what: "target",
                len: self.pos + 2,
                min: 2,
                max: model.arch.max_target_len,
            });
        }
        if token >= model.vocab_size() {
            return Err(Seq2SeqError::Token { id: token, vocab: model.vocab_size() });
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let table = model.p(&b, "embed");
        let x = tape.embedding(table, &[token])?;
        let x = tape.scale(x, (d as f32).sqrt())?;
        let mut pe = Vec::with_capacity(d);
        positional(self.pos, d, &mut pe);
        let pe = tape.constant(Tensor::new(vec![1, d], pe)?);
        let y = tape.add(x, pe)?;

        let cross: Vec<(Var, Var)> = self
            .cross
            .iter()
            .map(|(k, v)| (tape.borrowed(k, false), tape.borrowed(v, false)))
            .collect();
        let prefix: Option<Vec<(Var, Var)>> = (self.pos > 0).then(|| {
            self.cache
                .iter()
                .map(|(k, v)| {
                    let k = tape.constant(Tensor::new(vec![self.pos, d], k.clone()).expect("cache rows"));
                    let v = tape.constant(Tensor::new(vec![self.pos, d], v.clone()).expect("cache rows"));
                    (k, v)
                })
                .collect()
        });
        let self_seg = Seg { q_start: 0, q_len: 1, k_start: 0, k_len: self.pos + 1, causal: true, offset: self.pos };
        let cross_seg = Seg { q_start: 0, q_len: 1, k_start: 0, k_len: self.source_len, causal: false, offset: 0 };
        let (logits, fresh) = model.decode(&mut tape, &b, y, &[self_seg], &cross, &[cross_seg], prefix.as_deref())?;

        for ((ck, cv), (k, v)) in self.cache.iter_mut().zip(fresh) {
            ck.extend_from_slice(tape.value(k));
            cv.extend_from_slice(tape.value(v));
        }
        self.pos += 1;
        Ok(tape.value(logits).to_vec())
    }
}
