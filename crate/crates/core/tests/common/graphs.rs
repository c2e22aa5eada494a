//! Random computation graphs checked against central finite differences.
//!
//! Every graph is built twice: once on the crate's `f32` tape and once as a
//! tiny instruction list evaluated by a separate `f64` interpreter below.
//! Finite differences run on the interpreter only, so the reference never
//! touches the code path it checks.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semantic_autoencoder::autodiff::{Tape, Tensor, Var};

const MAX_DIM: usize = 8;
const FD_STEP: f64 = 1e-3;
const RELU_MARGIN: f64 = 2e-2;

#[derive(Debug, Clone)]
enum Instr {
    Input(usize),
    Const(Vec<f64>),
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(usize, usize, usize),
    Slice(usize, usize, usize, usize),
    Embedding(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm(usize, usize, usize),
    Relu(usize),
    Reshape(usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy(usize, Vec<usize>, Vec<bool>),
    StopGradient(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Kind {
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale,
    Concat,
    Slice,
    Embedding,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Relu,
    Reshape,
    Transpose,
    Sum,
    Mean,
    OneHot,
    CrossEntropy,
    StopGradient,
}

const KINDS: [Kind; 19] = [
    Kind::MatMul,
    Kind::Add,
    Kind::AddRow,
    Kind::Mul,
    Kind::Scale,
    Kind::Concat,
    Kind::Slice,
    Kind::Embedding,
    Kind::Softmax,
    Kind::LogSoftmax,
    Kind::LayerNorm,
    Kind::Relu,
    Kind::Reshape,
    Kind::Transpose,
    Kind::Sum,
    Kind::Mean,
    Kind::OneHot,
    Kind::CrossEntropy,
    Kind::StopGradient,
];

/// Graph under construction: tape vars and reference instructions in lockstep.
struct Builder {
    tape: Tape<'static>,
    vars: Vec<Var>,
    shapes: Vec<Vec<usize>>,
    prog: Vec<Instr>,
    inputs: Vec<Vec<f64>>,
    input_vars: Vec<Var>,
    pool: Vec<usize>,
    scalars: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            vars: vec![],
            shapes: vec![],
            prog: vec![],
            inputs: vec![],
            input_vars: vec![],
            pool: vec![],
            scalars: vec![],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn record(&mut self, var: Var, instr: Instr) -> usize {
        self.shapes.push(self.tape.shape(var).to_vec());
        self.vars.push(var);
        self.prog.push(instr);
        self.vars.len() - 1
    }

    fn input(&mut self, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(shape, data.iter().map(|&x| x as f32).collect()).unwrap();
        let var = self.tape.leaf(t, true);
        // Inputs are evaluated from the f32-rounded values.
        self.inputs.push(data.iter().map(|&x| x as f32 as f64).collect());
        self.input_vars.push(var);
        self.record(var, Instr::Input(self.inputs.len() - 1))
    }

    fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> usize {
        let t = Tensor::new(shape, data.iter().map(|&x| x as f32).collect()).unwrap();
        let var = self.tape.constant(t);
        self.record(var, Instr::Const(data.iter().map(|&x| x as f32 as f64).collect()))
    }

    fn dim(&mut self) -> usize {
        self.rng.random_range(1..=6)
    }

    fn pick(&mut self) -> usize {
        self.pool[self.rng.random_range(0..self.pool.len())]
    }

    fn pick_where(&mut self, pred: impl Fn(&[usize]) -> bool) -> Option<usize> {
        let cands: Vec<usize> = self.pool.iter().copied().filter(|&i| pred(&self.shapes[i])).collect();
        if cands.is_empty() {
            None
        } else {
            Some(cands[self.rng.random_range(0..cands.len())])
        }
    }

    fn apply(&mut self, kind: Kind) {
        let a = self.pick();
        let sa = self.shapes[a].clone();
        let (r, c) = (sa[0], sa[1]);
        let va = self.vars[a];
        let out = match kind {
            Kind::MatMul => {
                let b = match self.pick_where(|s| s[0] == c) {
                    Some(b) => b,
                    None => {
                        let k = self.dim();
                        self.input(vec![c, k])
                    }
                };
                let v = self.tape.matmul(va, self.vars[b]).unwrap();
                self.record(v, Instr::MatMul(a, b))
            }
            Kind::Add | Kind::Mul => {
                let b = match self.pick_where(|s| s == sa.as_slice()) {
                    Some(b) => b,
                    None => self.input(sa.clone()),
                };
                if kind == Kind::Add {
                    let v = self.tape.add(va, self.vars[b]).unwrap();
                    self.record(v, Instr::Add(a, b))
                } else {
                    let v = self.tape.mul(va, self.vars[b]).unwrap();
                    self.record(v, Instr::Mul(a, b))
                }
            }
            Kind::AddRow => {
                let b = self.input(vec![c]);
                let v = self.tape.add(va, self.vars[b]).unwrap();
                self.record(v, Instr::Add(a, b))
            }
            Kind::Scale => {
                let k: f64 = self.rng.random_range(-2.0..2.0);
                let k = k as f32 as f64;
                let v = self.tape.scale(va, k as f32).unwrap();
                self.record(v, Instr::Scale(a, k))
            }
            Kind::Concat => {
                let mut axis = self.rng.random_range(0..2);
                if sa[axis] >= MAX_DIM {
                    axis = 1 - axis;
                }
                if sa[axis] >= MAX_DIM {
                    return self.apply(Kind::Slice);
                }
                let other = 1 - axis;
                let b = match self.pick_where(|s| s[other] == sa[other] && s[axis] + sa[axis] <= MAX_DIM) {
                    Some(b) => b,
                    None => {
                        let mut s = sa.clone();
                        s[axis] = 1;
                        self.input(s)
                    }
                };
                let v = self.tape.concat(&[va, self.vars[b]], axis).unwrap();
                self.record(v, Instr::Concat(a, b, axis))
            }
            Kind::Slice => {
                let axis = self.rng.random_range(0..2);
                let n = sa[axis];
                let start = self.rng.random_range(0..n);
                let end = self.rng.random_range(start + 1..=n);
                let v = self.tape.slice(va, axis, start, end).unwrap();
                self.record(v, Instr::Slice(a, axis, start, end))
            }
            Kind::Embedding => {
                let n = self.dim();
                let ids: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..r)).collect();
                let v = self.tape.embedding(va, &ids).unwrap();
                self.record(v, Instr::Embedding(a, ids))
            }
            Kind::Softmax => {
                let v = self.tape.softmax(va).unwrap();
                self.record(v, Instr::Softmax(a))
            }
            Kind::LogSoftmax => {
                let v = self.tape.log_softmax(va).unwrap();
                self.record(v, Instr::LogSoftmax(a))
            }
            Kind::LayerNorm => {
                let g = self.input(vec![c]);
                let b = self.input(vec![c]);
                let v = self.tape.layer_norm(va, self.vars[g], self.vars[b]).unwrap();
                self.record(v, Instr::LayerNorm(a, g, b))
            }
            Kind::Relu => {
                let v = self.tape.relu(va).unwrap();
                self.record(v, Instr::Relu(a))
            }
            Kind::Reshape => {
                let v = self.tape.reshape(va, vec![c, r]).unwrap();
                self.record(v, Instr::Reshape(a))
            }
            Kind::Transpose => {
                let v = self.tape.transpose(va).unwrap();
                self.record(v, Instr::Transpose(a))
            }
            Kind::Sum | Kind::Mean => {
                let s = if kind == Kind::Sum {
                    let v = self.tape.sum(va).unwrap();
                    self.record(v, Instr::Sum(a))
                } else {
                    let v = self.tape.mean(va).unwrap();
                    self.record(v, Instr::Mean(a))
                };
                self.scalars.push(s);
                return;
            }
            Kind::OneHot => {
                let n = self.dim();
                let ids: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..r)).collect();
                let oh = self.tape.one_hot(&ids, r).unwrap();
                let mut data = vec![0.0; n * r];
                for (i, &id) in ids.iter().enumerate() {
                    data[i * r + id] = 1.0;
                }
                let oh_id = self.record(oh, Instr::Const(data));
                let v = self.tape.matmul(oh, va).unwrap();
                self.record(v, Instr::MatMul(oh_id, a))
            }
            Kind::CrossEntropy => {
                let targets: Vec<usize> = (0..r).map(|_| self.rng.random_range(0..c)).collect();
                let mut mask: Vec<bool> = (0..r).map(|_| self.rng.random_bool(0.7)).collect();
                mask[self.rng.random_range(0..r)] = true;
                let v = self.tape.masked_cross_entropy(va, &targets, &mask).unwrap();
                let s = self.record(v, Instr::CrossEntropy(a, targets, mask));
                self.scalars.push(s);
                return;
            }
            Kind::StopGradient => {
                let v = self.tape.stop_gradient(va);
                let sg = self.record(v, Instr::StopGradient(a));
                // Mix the stopped copy with a live path so the edge matters.
                let v = self.tape.mul(va, self.vars[sg]).unwrap();
                self.record(v, Instr::Mul(a, sg))
            }
        };
        self.pool.push(out);
    }

    fn finish(&mut self) -> usize {
        let last = *self.pool.last().unwrap();
        let shape = self.shapes[last].clone();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let wc = self.constant(shape, w);
        let prod = self.tape.mul(self.vars[last], self.vars[wc]).unwrap();
        let prod = self.record(prod, Instr::Mul(last, wc));
        let s = self.tape.sum(self.vars[prod]).unwrap();
        let mut root = self.record(s, Instr::Sum(prod));
        for k in 0..self.scalars.len() {
            let other = self.scalars[k];
            let v = self.tape.add(self.vars[root], self.vars[other]).unwrap();
            root = self.record(v, Instr::Add(root, other));
        }
        root
    }
}

/// Reference semantics in f64. `frozen` holds node values to substitute
/// for stop-gradient outputs (the values at the unperturbed point).
fn evaluate(
    prog: &[Instr],
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    frozen: Option<&[Vec<f64>]>,
    relu_margin: &mut f64,
) -> Vec<Vec<f64>> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(prog.len());
    for (i, ins) in prog.iter().enumerate() {
        let out = match ins {
            Instr::Input(k) => inputs[*k].clone(),
            Instr::Const(d) => d.clone(),
            Instr::MatMul(a, b) => {
                let (m, k) = (shapes[*a][0], shapes[*a][1]);
                let n = shapes[*b][1];
                let mut o = vec![0.0; m * n];
                for x in 0..m {
                    for y in 0..n {
                        o[x * n + y] = (0..k).map(|z| vals[*a][x * k + z] * vals[*b][z * n + y]).sum();
                    }
                }
                o
            }
            Instr::Add(a, b) => {
                let p = vals[*b].len();
                vals[*a].iter().enumerate().map(|(j, x)| x + vals[*b][j % p]).collect()
            }
            Instr::Mul(a, b) => {
                let p = vals[*b].len();
                vals[*a].iter().enumerate().map(|(j, x)| x * vals[*b][j % p]).collect()
            }
            Instr::Scale(a, k) => vals[*a].iter().map(|x| x * k).collect(),
            Instr::Concat(a, b, axis) => {
                let (sa, sb) = (&shapes[*a], &shapes[*b]);
                let mut o = vec![];
                if *axis == 0 {
                    o.extend_from_slice(&vals[*a]);
                    o.extend_from_slice(&vals[*b]);
                } else {
                    for row in 0..sa[0] {
                        o.extend_from_slice(&vals[*a][row * sa[1]..(row + 1) * sa[1]]);
                        o.extend_from_slice(&vals[*b][row * sb[1]..(row + 1) * sb[1]]);
                    }
                }
                o
            }
            Instr::Slice(a, axis, s, e) => {
                let sa = &shapes[*a];
                let mut o = vec![];
                for row in 0..sa[0] {
                    for col in 0..sa[1] {
                        let idx = if *axis == 0 { row } else { col };
                        if idx >= *s && idx < *e {
                            o.push(vals[*a][row * sa[1] + col]);
                        }
                    }
                }
                o
            }
            Instr::Embedding(t, ids) => {
                let d = shapes[*t][1];
                ids.iter().flat_map(|&id| vals[*t][id * d..(id + 1) * d].to_vec()).collect()
            }
            Instr::Softmax(a) | Instr::LogSoftmax(a) => {
                let c = shapes[*a][1];
                let log = matches!(ins, Instr::LogSoftmax(_));
                vals[*a]
                    .chunks(c)
                    .flat_map(|row| {
                        let m = row.iter().cloned().fold(f64::MIN, f64::max);
                        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        row.iter()
                            .map(|x| if log { x - m - z.ln() } else { (x - m).exp() / z })
                            .collect::<Vec<_>>()
                    })
                    .collect()
            }
            Instr::LayerNorm(a, g, b) => {
                let c = shapes[*a][1];
                vals[*a]
                    .chunks(c)
                    .flat_map(|row| {
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
                        let rs = 1.0 / (var + 1e-5).sqrt();
                        row.iter()
                            .enumerate()
                            .map(|(j, x)| (x - mean) * rs * vals[*g][j] + vals[*b][j])
                            .collect::<Vec<_>>()
                    })
                    .collect()
            }
            Instr::Relu(a) => {
                for x in &vals[*a] {
                    *relu_margin = relu_margin.min(x.abs());
                }
                vals[*a].iter().map(|x| x.max(0.0)).collect()
            }
            Instr::Reshape(a) => vals[*a].clone(),
            Instr::Transpose(a) => {
                let (r, c) = (shapes[*a][0], shapes[*a][1]);
                let mut o = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        o[y * r + x] = vals[*a][x * c + y];
                    }
                }
                o
            }
            Instr::Sum(a) => vec![vals[*a].iter().sum()],
            Instr::Mean(a) => vec![vals[*a].iter().sum::<f64>() / vals[*a].len() as f64],
            Instr::CrossEntropy(a, targets, mask) => {
                let c = shapes[*a][1];
                let mut total = 0.0;
                let mut n = 0.0;
                for (r, row) in vals[*a].chunks(c).enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    let m = row.iter().cloned().fold(f64::MIN, f64::max);
                    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    total += lse - row[targets[r]];
                    n += 1.0;
                }
                vec![total / n]
            }
            Instr::StopGradient(a) => match frozen {
                Some(f) => f[i].clone(),
                None => vals[*a].clone(),
            },
        };
        vals.push(out);
    }
    vals
}

pub struct TrialResult {
    pub max_rel_err: f64,
    pub kinds: BTreeSet<Kind>,
}

/// Relative error with a 0.1 floor on the denominator: near-zero gradients
/// are compared absolutely, since their relative error is dominated by f32
/// rounding noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(0.1)
}

pub fn run_trial(seed: u64, featured: Kind) -> Option<TrialResult> {
    let mut b = Builder::new(seed);
    let (r, c) = (b.dim(), b.dim());
    b.input(vec![r, c]);
    let (r2, c2) = (b.dim(), b.dim());
    b.input(vec![r2, c2]);
    b.pool = vec![0, 1];
    let mut kinds = BTreeSet::new();
    let n_ops = b.rng.random_range(4..=7);
    for step in 0..n_ops {
        let kind = if step == 0 { featured } else { KINDS[b.rng.random_range(0..KINDS.len())] };
        b.apply(kind);
        kinds.insert(kind);
    }
    let root = b.finish();

    let mut margin = f64::INFINITY;
    let base = evaluate(&b.prog, &b.shapes, &b.inputs, None, &mut margin);
    if margin < RELU_MARGIN {
        return None;
    }
    // Autodiff agrees with the reference in the forward direction too.
    let fwd = b.tape.value(b.vars[root])[0] as f64;
    assert!(
        (fwd - base[root][0]).abs() <= 1e-3 * base[root][0].abs().max(1.0),
        "seed {seed}: forward {fwd} vs reference {}",
        base[root][0]
    );

    let grads = b.tape.backward(b.vars[root]).unwrap();
    let mut max_rel_err: f64 = 0.0;
    for (k, &var) in b.input_vars.iter().enumerate() {
        let analytic = grads.get(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; b.inputs[k].len()]);
        for j in 0..b.inputs[k].len() {
            let mut plus = b.inputs.clone();
            plus[k][j] += FD_STEP;
            let mut minus = b.inputs.clone();
            minus[k][j] -= FD_STEP;
            let mut m = f64::INFINITY;
            let fp = evaluate(&b.prog, &b.shapes, &plus, Some(&base), &mut m)[root][0];
            let fm = evaluate(&b.prog, &b.shapes, &minus, Some(&base), &mut m)[root][0];
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_rel_err = max_rel_err.max(rel_err(analytic[j] as f64, numeric));
        }
    }
    Some(TrialResult { max_rel_err, kinds })
}

/// Outcome of [`sweep`].
pub struct Sweep {
    pub trials: usize,
    pub worst: f64,
    /// First failing seed and its error, if any.
    pub failure: Option<(u64, f64)>,
    pub all_kinds_covered: bool,
}

/// Runs `trials` accepted graphs, cycling the featured primitive.
pub fn sweep(trials: usize) -> Sweep {
    let mut covered = BTreeSet::new();
    let mut worst: f64 = 0.0;
    let mut failure = None;
    let mut done = 0;
    let mut seed = 0u64;
    while done < trials {
        let featured = KINDS[done % KINDS.len()];
        seed += 1;
        let Some(res) = run_trial(seed, featured) else { continue };
        if res.max_rel_err >= 1e-4 && failure.is_none() {
            failure = Some((seed, res.max_rel_err));
        }
        worst = worst.max(res.max_rel_err);
        covered.extend(res.kinds);
        done += 1;
    }
    Sweep { trials: done, worst, failure, all_kinds_covered: covered.len() == KINDS.len() }
}
