//! Pre-norm transformer over `[condition ++ target]` with exact backprop.
//!
//! Condition tokens act as a fixed memory: at every layer they are layer-
//! normed from their input embedding and projected to keys and values, but
//! their own rows are never updated. Target tokens carry the residual stream
//! and attend to the whole sequence, bidirectionally or causally within the
//! target. Positions enter only through rotary rotation of queries and keys.
//! Semantic condition keys are left unrotated, i.e. pinned at the origin.

use rand::Rng as _;

use super::tensor::{gemm, matmul, Scalar, View, ViewMut};
use super::weights::{ModelConfig, Param, Weights};
use crate::codec::SemanticVector;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::rng::{Rng, Streams};
use crate::rotary::RotaryParams;
use crate::sphere_grid::TokenCoord;

const LN_EPS: f64 = 1e-5;
/// Semantic features are raw intensities; bring them to unit-ish scale.
pub const SEMANTIC_SCALE: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Pass1,
    Pass2,
}

impl Phase {
    fn index(self) -> usize {
        match self {
            Phase::Pass1 => 0,
            Phase::Pass2 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Bidirectional,
    /// Target position `i` sees all condition tokens and targets `0..=i`.
    Causal,
}

/// Condition sequence: semantic vectors first, then neighbor-patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub semantic: Vec<SemanticVector>,
    pub tokens: Vec<u16>,
    pub coords: Vec<TokenCoord>,
    pub phase: Phase,
}

impl ConditionSet {
    pub fn empty(phase: Phase) -> Self {
        Self {
            semantic: Vec::new(),
            tokens: Vec::new(),
            coords: Vec::new(),
            phase,
        }
    }

    pub fn len(&self) -> usize {
        self.semantic.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One supervised sequence. `labels[i]` is `Some` where the loss applies.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub ids: Vec<u16>,
    pub coords: Vec<TokenCoord>,
    pub cond: ConditionSet,
    pub labels: Vec<Option<u16>>,
    pub mode: AttnMode,
}

/// Row-major `rows x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Logits<F> {
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }

    /// Softmax of one row at temperature `temp`, in f64.
    pub fn probs(&self, r: usize, temp: f64) -> Vec<f64> {
        softmax_f64(self.row(r), temp)
    }
}

pub fn softmax_f64<F: Scalar>(row: &[F], temp: f64) -> Vec<f64> {
    let t = temp.max(1e-6);
    let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|v| ((v.f64() - m) / t).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

#[derive(Debug, Clone)]
pub struct Transformer<F> {
    pub config: ModelConfig,
    pub weights: Weights<F>,
    rotary: [RotaryParams; 2],
}

/// Per-layer keys and values of a condition sequence. Condition rows are
/// never updated by the trunk, so one memory serves every decode step of a
/// patch.
#[derive(Debug, Clone)]
pub struct CondMemory<F> {
    cond: ConditionSet,
    layers: Vec<CondLayer<F>>,
    sem_in: Vec<Vec<F>>,
}

impl<F> CondMemory<F> {
    pub fn cond(&self) -> &ConditionSet {
        &self.cond
    }
}

#[derive(Debug, Clone)]
struct CondLayer<F> {
    hc: Vec<F>,
    ln1c: LnCache<F>,
    k: Vec<F>,
    v: Vec<F>,
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    ln1x: LnCache<F>,
    ln1c: LnCache<F>,
    hx: Vec<F>,
    hall: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    attn_keep: Option<Vec<F>>,
    o: Vec<F>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    a: Vec<F>,
    g: Vec<F>,
    ffn_keep: Option<Vec<F>>,
}

struct Cache<F> {
    nt: usize,
    nc: usize,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    hf: Vec<F>,
    sem_in: Vec<Vec<F>>,
}

type Table<F> = Option<Vec<(F, F)>>;

fn layer_norm<F: Scalar>(x: &[F], d: usize, g: &Param<F>, b: &Param<F>) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g.data[c] + b.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates gain/bias gradients.
fn layer_norm_back<F: Scalar>(
    dy: &[F],
    d: usize,
    cache: &LnCache<F>,
    g: &Param<F>,
    dg: &mut Param<F>,
    db: &mut Param<F>,
) -> Vec<F> {
    let rows = dy.len() / d;
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::of(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let o = r * d;
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for c in 0..d {
            let dyv = dy[o + c];
            let xh = cache.xhat[o + c];
            dg.data[c] += dyv * xh;
            db.data[c] += dyv;
            let v = dyv * g.data[c];
            dxhat[c] = v;
            m1 += v;
            m2 += v * xh;
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[o + c] = rs * (dxhat[c] - m1 - cache.xhat[o + c] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu<F: Scalar>(a: F) -> F {
    let c = F::of(GELU_C);
    let u = c * (a + F::of(0.044715) * a * a * a);
    F::of(0.5) * a * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(a: F) -> F {
    let c = F::of(GELU_C);
    let u = c * (a + F::of(0.044715) * a * a * a);
    let t = u.tanh();
    F::of(0.5) * (F::one() + t)
        + F::of(0.5) * a * (F::one() - t * t) * c * (F::one() + F::of(3.0 * 0.044715) * a * a)
}

fn rotate_rows<F: Scalar>(buf: &mut [F], d: usize, heads: usize, tables: &[Table<F>], inverse: bool) {
    let dh = d / heads;
    for (r, table) in tables.iter().enumerate() {
        let Some(table) = table else { continue };
        let row = &mut buf[r * d..(r + 1) * d];
        for h in 0..heads {
            for (pair, &(c, s)) in row[h * dh..(h + 1) * dh].chunks_exact_mut(2).zip(table) {
                let s = if inverse { -s } else { s };
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}

fn add_bias<F: Scalar>(x: &mut [F], b: &Param<F>) {
    let n = b.data.len();
    for row in x.chunks_exact_mut(n) {
        for (v, &bv) in row.iter_mut().zip(&b.data) {
            *v += bv;
        }
    }
}

fn col_sums_into<F: Scalar>(x: &[F], cols: usize, out: &mut Param<F>) {
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn dropout_mask<F: Scalar>(n: usize, p: f64, rng: &mut Rng) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
        .collect()
}

/// `grad += A^T B` for dense `A (m x r)` and `B (m x c)`.
fn acc_at_b<F: Scalar>(a: &[F], a_cols: usize, b: &[F], b_cols: usize, grad: &mut Param<F>) {
    let m = a.len() / a_cols;
    gemm(
        F::one(),
        View::dense(a, m, a_cols).t(),
        View::dense(b, m, b_cols),
        F::one(),
        ViewMut::dense(&mut grad.data, a_cols, b_cols),
    );
}

/// `A B^T` for dense `A (m x c)` and `B (r x c)`.
fn a_bt<F: Scalar>(a: &[F], cols: usize, b: &Param<F>) -> Vec<F> {
    let m = a.len() / cols;
    matmul(View::dense(a, m, cols), View::dense(&b.data, b.rows, b.cols).t())
}

fn proj<F: Scalar>(x: &[F], cols: usize, w: &Param<F>) -> Vec<F> {
    let m = x.len() / cols;
    matmul(View::dense(x, m, cols), View::dense(&w.data, w.rows, w.cols))
}

impl<F: Scalar> Transformer<F> {
    pub fn new(config: ModelConfig, weights: Weights<F>) -> Result<Self> {
        config.validate()?;
        let expect = Weights::<F>::zeros(&config);
        for ((name, a), (_, b)) in expect.named().iter().zip(weights.named()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(Error::Shape(format!(
                    "{name}: expected {}x{}, got {}x{}",
                    a.rows, a.cols, b.rows, b.cols
                )));
            }
        }
        if expect.blocks.len() != weights.blocks.len() {
            return Err(Error::Shape("layer count".into()));
        }
        let dh = config.head_dim();
        let rotary = [
            RotaryParams::new(config.pass1_rotary, dh, config.width, config.height)?,
            RotaryParams::new(config.rotary, dh, config.width, config.height)?,
        ];
        Ok(Self {
            config,
            weights,
            rotary,
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = Weights::init(&config, &mut Streams::new(seed).rng("init", &[]));
        Self::new(config, w)
    }

    pub fn rotary(&self, phase: Phase) -> &RotaryParams {
        &self.rotary[phase.index()]
    }

    fn tables(&self, coords: &[TokenCoord], phase: Phase) -> Vec<Table<F>> {
        let rp = self.rotary(phase);
        coords
            .iter()
            .map(|&c| Some(rp.table(c).into_iter().map(|(a, b)| (F::of(a), F::of(b))).collect()))
            .collect()
    }

    fn check_inputs(&self, ids: &[u16], coords: &[TokenCoord], cond: &ConditionSet) -> Result<()> {
        let cfg = &self.config;
        if ids.len() != coords.len() || ids.is_empty() {
            return Err(Error::Shape(format!(
                "{} target ids vs {} coords",
                ids.len(),
                coords.len()
            )));
        }
        if cond.tokens.len() != cond.coords.len() {
            return Err(Error::Shape("condition tokens vs coords".into()));
        }
        if cond.len() > cfg.max_cond {
            return Err(Error::Shape(format!(
                "{} condition tokens exceed max {}",
                cond.len(),
                cfg.max_cond
            )));
        }
        if let Some(&bad) = ids.iter().chain(&cond.tokens).find(|&&t| t as usize > cfg.vocab) {
            return Err(Error::VocabMismatch {
                id: bad as u32,
                vocab: cfg.vocab as u32,
            });
        }
        for s in &cond.semantic {
            if s.values.len() != cfg.sem_dim {
                return Err(Error::Shape(format!(
                    "semantic vector dim {} != {}",
                    s.values.len(),
                    cfg.sem_dim
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("semantic vector".into()));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        ids: &[u16],
        coords: &[TokenCoord],
        cond: &ConditionSet,
        mode: AttnMode,
        mem: Option<&CondMemory<F>>,
        train: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<F>, Cache<F>)> {
        self.check_inputs(ids, coords, cond)?;
        let cfg = &self.config;
        let w = &self.weights;
        let d = cfg.model_dim;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let nt = ids.len();
        let nc = cond.len();
        let s = nc + nt;
        let p_drop = if rng.is_some() { cfg.dropout } else { 0.0 };
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let mut x = vec![F::zero(); nt * d];
        for (r, &id) in ids.iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(w.tok_emb.row(id as usize));
        }
        let owned;
        let mem = match mem {
            Some(m) => m,
            None => {
                owned = self.prepare_unchecked(cond);
                &owned
            }
        };
        let target_tables = self.tables(coords, cond.phase);

        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, blk) in w.blocks.iter().enumerate() {
            let (hx, ln1x) = layer_norm(&x, d, &blk.ln1_g, &blk.ln1_b);
            let mut q = proj(&hx, d, &blk.wq);
            let mut kx = proj(&hx, d, &blk.wk);
            let vx = proj(&hx, d, &blk.wv);
            rotate_rows(&mut q, d, heads, &target_tables, false);
            rotate_rows(&mut kx, d, heads, &target_tables, false);
            let ml = &mem.layers[l];
            let mut k = ml.k.clone();
            k.extend_from_slice(&kx);
            let mut v = ml.v.clone();
            v.extend_from_slice(&vx);

            let mut probs = vec![F::zero(); heads * nt * s];
            let attn_keep = (p_drop > 0.0)
                .then(|| dropout_mask::<F>(heads * nt * s, p_drop, rng.as_deref_mut().unwrap()));
            let mut o = vec![F::zero(); nt * d];
            for h in 0..heads {
                let ph = &mut probs[h * nt * s..(h + 1) * nt * s];
                gemm(
                    scale,
                    View::block(&q, nt, d, h * dh, dh),
                    View::block(&k, s, d, h * dh, dh).t(),
                    F::zero(),
                    ViewMut::dense(ph, nt, s),
                );
                for i in 0..nt {
                    let row = &mut ph[i * s..(i + 1) * s];
                    let limit = match mode {
                        AttnMode::Bidirectional => s,
                        AttnMode::Causal => nc + i + 1,
                    };
                    let m = row[..limit].iter().copied().fold(F::neg_infinity(), F::max);
                    let mut z = F::zero();
                    for val in &mut row[..limit] {
                        *val = (*val - m).exp();
                        z += *val;
                    }
                    let inv = F::one() / z;
                    for val in &mut row[..limit] {
                        *val *= inv;
                    }
                    for val in &mut row[limit..] {
                        *val = F::zero();
                    }
                }
                let dropped;
                let pv: &[F] = match &attn_keep {
                    Some(keep) => {
                        dropped = ph
                            .iter()
                            .zip(&keep[h * nt * s..(h + 1) * nt * s])
                            .map(|(&a, &b)| a * b)
                            .collect::<Vec<F>>();
                        &dropped
                    }
                    None => ph,
                };
                gemm(
                    F::one(),
                    View::dense(pv, nt, s),
                    View::block(&v, s, d, h * dh, dh),
                    F::zero(),
                    ViewMut::block(&mut o, nt, d, h * dh, dh),
                );
            }
            let attn_out = proj(&o, d, &blk.wo);
            for (xv, a) in x.iter_mut().zip(&attn_out) {
                *xv += *a;
            }
            let (h2, ln2) = layer_norm(&x, d, &blk.ln2_g, &blk.ln2_b);
            let mut a = proj(&h2, d, &blk.w1);
            add_bias(&mut a, &blk.b1);
            let g: Vec<F> = a.iter().map(|&v| gelu(v)).collect();
            let mut f = proj(&g, cfg.ffn_dim(), &blk.w2);
            add_bias(&mut f, &blk.b2);
            let ffn_keep = (p_drop > 0.0)
                .then(|| dropout_mask::<F>(nt * d, p_drop, rng.as_deref_mut().unwrap()));
            match &ffn_keep {
                Some(keep) => {
                    for ((xv, fv), kv) in x.iter_mut().zip(&f).zip(keep) {
                        *xv += *fv * *kv;
                    }
                }
                None => {
                    for (xv, fv) in x.iter_mut().zip(&f) {
                        *xv += *fv;
                    }
                }
            }
            let hall = if train {
                let mut h = ml.hc.clone();
                h.extend_from_slice(&hx);
                h
            } else {
                Vec::new()
            };
            layers.push(LayerCache {
                ln1x,
                ln1c: if train {
                    ml.ln1c.clone()
                } else {
                    LnCache {
                        xhat: Vec::new(),
                        rstd: Vec::new(),
                    }
                },
                hx,
                hall,
                q,
                k,
                v,
                probs,
                attn_keep,
                o,
                ln2,
                h2,
                a,
                g,
                ffn_keep,
            });
        }
        let (hf, lnf) = layer_norm(&x, d, &w.lnf_g, &w.lnf_b);
        let mut logits = proj(&hf, d, &w.out_w);
        add_bias(&mut logits, &w.out_b);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((
            logits,
            Cache {
                nt,
                nc,
                layers,
                lnf,
                hf,
                sem_in: if train { mem.sem_in.clone() } else { Vec::new() },
            },
        ))
    }

    fn backward(
        &self,
        ids: &[u16],
        coords: &[TokenCoord],
        cond: &ConditionSet,
        cache: &Cache<F>,
        dlogits: &[F],
    ) -> Weights<F> {
        let cfg = &self.config;
        let w = &self.weights;
        let d = cfg.model_dim;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let ff = cfg.ffn_dim();
        let (nt, nc) = (cache.nt, cache.nc);
        let s = nt + nc;
        let ns = cond.semantic.len();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut grad = Weights::<F>::zeros(cfg);

        let mut tables: Vec<Table<F>> = vec![None; ns];
        tables.extend(self.tables(&cond.coords, cond.phase));
        tables.extend(self.tables(coords, cond.phase));
        let target_tables = &tables[nc..];

        col_sums_into(dlogits, cfg.vocab, &mut grad.out_b);
        acc_at_b(&cache.hf, d, dlogits, cfg.vocab, &mut grad.out_w);
        let dhf = a_bt(dlogits, cfg.vocab, &w.out_w);
        let mut dx = layer_norm_back(&dhf, d, &cache.lnf, &w.lnf_g, &mut grad.lnf_g, &mut grad.lnf_b);
        let mut de = vec![F::zero(); nc * d];

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let blk = &w.blocks[l];
            let gb = &mut grad.blocks[l];

            // Feed-forward branch.
            let df: Vec<F> = match &lc.ffn_keep {
                Some(keep) => dx.iter().zip(keep).map(|(&a, &b)| a * b).collect(),
                None => dx.clone(),
            };
            col_sums_into(&df, d, &mut gb.b2);
            acc_at_b(&lc.g, ff, &df, d, &mut gb.w2);
            let dg = a_bt(&df, d, &blk.w2);
            let da: Vec<F> = dg.iter().zip(&lc.a).map(|(&g, &a)| g * gelu_grad(a)).collect();
            col_sums_into(&da, ff, &mut gb.b1);
            acc_at_b(&lc.h2, d, &da, ff, &mut gb.w1);
            let dh2 = a_bt(&da, ff, &blk.w1);
            let dxm = layer_norm_back(&dh2, d, &lc.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
            for (a, b) in dx.iter_mut().zip(&dxm) {
                *a += *b;
            }

            // Attention branch.
            acc_at_b(&lc.o, d, &dx, d, &mut gb.wo);
            let d_o = a_bt(&dx, d, &blk.wo);
            let mut dq = vec![F::zero(); nt * d];
            let mut dk = vec![F::zero(); s * d];
            let mut dv = vec![F::zero(); s * d];
            let mut dp = vec![F::zero(); nt * s];
            for h in 0..heads {
                let ph = &lc.probs[h * nt * s..(h + 1) * nt * s];
                let keep = lc.attn_keep.as_ref().map(|k| &k[h * nt * s..(h + 1) * nt * s]);
                let dropped: Vec<F>;
                let pd: &[F] = match keep {
                    Some(kp) => {
                        dropped = ph.iter().zip(kp).map(|(&a, &b)| a * b).collect();
                        &dropped
                    }
                    None => ph,
                };
                gemm(
                    F::one(),
                    View::dense(pd, nt, s).t(),
                    View::block(&d_o, nt, d, h * dh, dh),
                    F::zero(),
                    ViewMut::block(&mut dv, s, d, h * dh, dh),
                );
                gemm(
                    F::one(),
                    View::block(&d_o, nt, d, h * dh, dh),
                    View::block(&lc.v, s, d, h * dh, dh).t(),
                    F::zero(),
                    ViewMut::dense(&mut dp, nt, s),
                );
                if let Some(kp) = keep {
                    for (a, &b) in dp.iter_mut().zip(kp) {
                        *a *= b;
                    }
                }
                for i in 0..nt {
                    let pr = &ph[i * s..(i + 1) * s];
                    let dr = &mut dp[i * s..(i + 1) * s];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in dr.iter_mut().zip(pr) {
                        *dv_ = pv * (*dv_ - dot);
                    }
                }
                gemm(
                    scale,
                    View::dense(&dp, nt, s),
                    View::block(&lc.k, s, d, h * dh, dh),
                    F::zero(),
                    ViewMut::block(&mut dq, nt, d, h * dh, dh),
                );
                gemm(
                    scale,
                    View::dense(&dp, nt, s).t(),
                    View::block(&lc.q, nt, d, h * dh, dh),
                    F::zero(),
                    ViewMut::block(&mut dk, s, d, h * dh, dh),
                );
            }
            rotate_rows(&mut dq, d, heads, target_tables, true);
            rotate_rows(&mut dk, d, heads, &tables, true);
            acc_at_b(&lc.hx, d, &dq, d, &mut gb.wq);
            acc_at_b(&lc.hall, d, &dk, d, &mut gb.wk);
            acc_at_b(&lc.hall, d, &dv, d, &mut gb.wv);
            let mut dhall = a_bt(&dk, d, &blk.wk);
            let dhv = a_bt(&dv, d, &blk.wv);
            for (a, b) in dhall.iter_mut().zip(&dhv) {
                *a += *b;
            }
            let dhq = a_bt(&dq, d, &blk.wq);
            let (dhc, dhx_kv) = dhall.split_at(nc * d);
            let dhx: Vec<F> = dhq.iter().zip(dhx_kv).map(|(&a, &b)| a + b).collect();
            let dxa = layer_norm_back(&dhx, d, &lc.ln1x, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
            for (a, b) in dx.iter_mut().zip(&dxa) {
                *a += *b;
            }
            if nc > 0 {
                let dec = layer_norm_back(dhc, d, &lc.ln1c, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
                for (a, b) in de.iter_mut().zip(&dec) {
                    *a += *b;
                }
            }
        }

        for (r, &id) in ids.iter().enumerate() {
            for (g, &v) in grad.tok_emb.row_mut(id as usize).iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *g += v;
            }
        }
        let phase = cond.phase.index();
        for r in 0..nc {
            let der = &de[r * d..(r + 1) * d];
            for (g, &v) in grad.phase_emb.row_mut(phase).iter_mut().zip(der) {
                *g += v;
            }
            if r < ns {
                let view = cond.semantic[r].view.quarter();
                for (g, &v) in grad.view_emb.row_mut(view).iter_mut().zip(der) {
                    *g += v;
                }
                for (g, &v) in grad.sem_bias.data.iter_mut().zip(der) {
                    *g += v;
                }
                acc_at_b(&cache.sem_in[r], cfg.sem_dim, der, d, &mut grad.sem_proj);
            } else {
                let id = cond.tokens[r - ns] as usize;
                for (g, &v) in grad.tok_emb.row_mut(id).iter_mut().zip(der) {
                    *g += v;
                }
            }
        }
        grad
    }

    fn prepare_unchecked(&self, cond: &ConditionSet) -> CondMemory<F> {
        let cfg = &self.config;
        let w = &self.weights;
        let d = cfg.model_dim;
        let nc = cond.len();
        let ns = cond.semantic.len();
        let phase = cond.phase.index();
        let mut e = vec![F::zero(); nc * d];
        let mut sem_in = Vec::with_capacity(ns);
        for (r, sv) in cond.semantic.iter().enumerate() {
            let input: Vec<F> = sv.values.iter().map(|&v| F::of(v * SEMANTIC_SCALE)).collect();
            let projected = matmul(
                View::dense(&input, 1, cfg.sem_dim),
                View::dense(&w.sem_proj.data, cfg.sem_dim, d),
            );
            let row = &mut e[r * d..(r + 1) * d];
            for c in 0..d {
                row[c] = projected[c]
                    + w.sem_bias.data[c]
                    + w.view_emb.row(sv.view.quarter())[c]
                    + w.phase_emb.row(phase)[c];
            }
            sem_in.push(input);
        }
        for (k, &id) in cond.tokens.iter().enumerate() {
            let row = &mut e[(ns + k) * d..(ns + k + 1) * d];
            for c in 0..d {
                row[c] = w.tok_emb.row(id as usize)[c] + w.phase_emb.row(phase)[c];
            }
        }
        let mut tables: Vec<Table<F>> = vec![None; ns];
        tables.extend(self.tables(&cond.coords, cond.phase));
        let layers = w
            .blocks
            .iter()
            .map(|blk| {
                let (hc, ln1c) = layer_norm(&e, d, &blk.ln1_g, &blk.ln1_b);
                let mut k = proj(&hc, d, &blk.wk);
                let v = proj(&hc, d, &blk.wv);
                rotate_rows(&mut k, d, cfg.heads, &tables, false);
                CondLayer { hc, ln1c, k, v }
            })
            .collect();
        CondMemory {
            cond: cond.clone(),
            layers,
            sem_in,
        }
    }

    /// Precompute condition keys and values for repeated decoding.
    pub fn prepare(&self, cond: &ConditionSet) -> Result<CondMemory<F>> {
        self.check_inputs(&[0], &[TokenCoord::default()], cond)?;
        Ok(self.prepare_unchecked(cond))
    }

    /// Same result as [`Self::forward`] on `mem.cond()`, without recomputing
    /// the condition projections.
    pub fn forward_prepared(
        &self,
        ids: &[u16],
        coords: &[TokenCoord],
        mem: &CondMemory<F>,
        mode: AttnMode,
    ) -> Result<Logits<F>> {
        let (data, _) = self.run(ids, coords, &mem.cond, mode, Some(mem), false, None)?;
        Ok(Logits {
            rows: ids.len(),
            vocab: self.config.vocab,
            data,
        })
    }

    /// Generic trunk call: logits for every target position.
    pub fn forward(
        &self,
        ids: &[u16],
        coords: &[TokenCoord],
        cond: &ConditionSet,
        mode: AttnMode,
    ) -> Result<Logits<F>> {
        let (data, _) = self.run(ids, coords, cond, mode, None, false, None)?;
        Ok(Logits {
            rows: ids.len(),
            vocab: self.config.vocab,
            data,
        })
    }

    /// Bidirectional prediction; masked positions carry the `[MASK]` id.
    pub fn forward_masked(&self, ids: &[u16], coords: &[TokenCoord], cond: &ConditionSet) -> Result<Logits<F>> {
        self.forward(ids, coords, cond, AttnMode::Bidirectional)
    }

    /// Next-token logits after `prefix`. `coords` holds the prefix positions
    /// followed by the position being predicted (`prefix.len() + 1` entries).
    /// Inputs are shifted: position `j` reads token `j - 1`, with `[MASK]`
    /// as the start symbol.
    pub fn forward_ar(&self, prefix: &[u16], coords: &[TokenCoord], cond: &ConditionSet) -> Result<Vec<F>> {
        if coords.len() != prefix.len() + 1 {
            return Err(Error::Shape(format!(
                "forward_ar needs {} coords, got {}",
                prefix.len() + 1,
                coords.len()
            )));
        }
        let ids = Self::shifted_inputs(self.config.vocab as u16, prefix);
        let logits = self.forward(&ids, coords, cond, AttnMode::Causal)?;
        Ok(logits.row(prefix.len()).to_vec())
    }

    pub fn shifted_inputs(mask_id: u16, tokens: &[u16]) -> Vec<u16> {
        std::iter::once(mask_id).chain(tokens.iter().copied()).collect()
    }

    fn example_loss(&self, ex: &TrainExample, logits: &[F], weight: f64) -> Result<(f64, Vec<F>)> {
        let v = self.config.vocab;
        let count = ex.labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("example without supervised positions".into()));
        }
        let mut dlogits = vec![F::zero(); logits.len()];
        let mut loss = 0.0;
        let k = weight / count as f64;
        for (r, label) in ex.labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            let row = &logits[r * v..(r + 1) * v];
            let p = softmax_f64(row, 1.0);
            loss -= p[y as usize].max(f64::MIN_POSITIVE).ln();
            let dr = &mut dlogits[r * v..(r + 1) * v];
            for (c, dv) in dr.iter_mut().enumerate() {
                let t = if c == y as usize { 1.0 } else { 0.0 };
                *dv = F::of(k * (p[c] - t));
            }
        }
        Ok((loss / count as f64, dlogits))
    }

    /// Mean over examples of the per-example mean cross-entropy; no dropout.
    pub fn loss(&self, batch: &[TrainExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let mut total = 0.0;
        for ex in batch {
            let (logits, _) = self.run(&ex.ids, &ex.coords, &ex.cond, ex.mode, None, false, None)?;
            total += self.example_loss(ex, &logits, 1.0)?.0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss and exact gradient of [`Self::loss`]. With `dropout` set, each
    /// example `i` draws its masks from `dropout.rng("dropout", [i])`.
    pub fn gradients(
        &self,
        batch: &[TrainExample],
        dropout: Option<Streams>,
        par: Parallelism,
    ) -> Result<(f64, Weights<F>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let weight = 1.0 / batch.len() as f64;
        let per: Vec<Result<(f64, Weights<F>)>> = par.map(batch, |i, ex| {
            let mut rng = dropout.map(|s| s.rng("dropout", &[i as u64]));
            let (logits, cache) = self.run(&ex.ids, &ex.coords, &ex.cond, ex.mode, None, true, rng.as_mut())?;
            let (loss, dlogits) = self.example_loss(ex, &logits, weight)?;
            Ok((loss, self.backward(&ex.ids, &ex.coords, &ex.cond, &cache, &dlogits)))
        });
        let mut total = Weights::<F>::zeros(&self.config);
        let mut loss = 0.0;
        for r in per {
            let (l, g) = r?;
            loss += l * weight;
            total.add_assign(&g);
        }
        if let Some(name) = total.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok((loss, total))
    }
}
