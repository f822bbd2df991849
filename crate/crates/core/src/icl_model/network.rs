//! Parameters and forward pass: cell tokens → table encoder → graph encoder →
//! cross-sample attention → head.

use rand_chacha::ChaCha8Rng;

use super::tokens::{Episode, Kind, NODE_TIME_FEATS, NUM_FEATS, N_KINDS, N_TYPES};
use super::{ModelConfig, ModelError};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::util::rng_for;

type R<T> = Result<T, ModelError>;

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub(crate) struct Lin {
    w: ParamId,
    b: Option<ParamId>,
}

impl Lin {
    fn new(ps: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool, gain: f64, rng: &mut ChaCha8Rng) -> Lin {
        let w = ps.add_init(&format!("{name}.w"), &[i, o], i, gain, rng);
        let b = bias.then(|| ps.add(&format!("{name}.b"), Tensor::zeros(&[o])));
        Lin { w, b }
    }

    fn fwd(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> R<Var> {
        let w = t.param(ps, self.w);
        let y = t.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = t.param(ps, b);
                t.add_bias(y, b)?
            }
            None => y,
        })
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn new(ps: &mut ParamStore, name: &str, d: usize) -> Norm {
        Norm {
            g: ps.add(&format!("{name}.g"), Tensor::full(&[d], 1.0)),
            b: ps.add(&format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    fn fwd(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> R<Var> {
        let n = t.layer_norm(x);
        let g = t.param(ps, self.g);
        let b = t.param(ps, self.b);
        let y = t.mul_bias(n, g)?;
        Ok(t.add_bias(y, b)?)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    norm: Norm,
    up: Lin,
    down: Lin,
}

impl Mlp {
    fn new(ps: &mut ParamStore, name: &str, d: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Mlp {
        Mlp {
            norm: Norm::new(ps, &format!("{name}.norm"), d),
            up: Lin::new(ps, &format!("{name}.up"), d, d * ratio, true, 1.0, rng),
            down: Lin::new(ps, &format!("{name}.down"), d * ratio, d, true, 0.5, rng),
        }
    }

    /// Residual update `x + down(gelu(up(norm(x))))`.
    fn fwd(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> R<Var> {
        let h = self.norm.fwd(t, ps, x)?;
        let h = self.up.fwd(t, ps, h)?;
        let h = t.gelu(h);
        let h = self.down.fwd(t, ps, h)?;
        Ok(t.add(x, h)?)
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone)]
struct Proj {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

impl Proj {
    fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Proj {
        Proj {
            q: Lin::new(ps, &format!("{name}.q"), d, d, false, 1.0, rng),
            k: Lin::new(ps, &format!("{name}.k"), d, d, false, 1.0, rng),
            v: Lin::new(ps, &format!("{name}.v"), d, d, false, 1.0, rng),
            o: Lin::new(ps, &format!("{name}.o"), d, d, true, 0.5, rng),
        }
    }
}

#[derive(Debug, Clone)]
struct TableBlock {
    col_norm: Norm,
    col: Proj,
    row_norm: Norm,
    inducing: ParamId,
    sum_k: Lin,
    sum_v: Lin,
    row: Proj,
    own_class: ParamId,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct GraphBlock {
    norm: Norm,
    glob_q: ParamId,
    glob_k: Lin,
    glob_v: Lin,
    attn: Proj,
    direction: ParamId,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct CrossBlock {
    pred_norm: Norm,
    ctx_norm: Norm,
    attn: Proj,
    pred_mlp: Mlp,
    ctx_mlp: Mlp,
}

#[derive(Debug, Clone)]
pub(crate) struct Net {
    d: usize,
    heads: usize,
    inducing: usize,
    max_flat: usize,
    embed: [Option<Lin>; N_KINDS],
    embed_const: [Option<ParamId>; N_KINDS],
    types: ParamId,
    table: Vec<TableBlock>,
    pool_norm: Norm,
    pool_q: ParamId,
    pool_k: Lin,
    pool_v: Lin,
    empty_row: ParamId,
    hop: ParamId,
    node_time: Lin,
    node_static: ParamId,
    degree: Lin,
    graph: Vec<GraphBlock>,
    entity_norm: Norm,
    target_num: Lin,
    labeled: ParamId,
    masked: ParamId,
    cross: Vec<CrossBlock>,
    out_pred: Norm,
    out_ctx: Norm,
    cls_q: Lin,
    cls_k: Lin,
    sub_q: Lin,
    sub_k: Lin,
    reg_q: Lin,
    reg_k: Lin,
    reg_lin: Lin,
}

/// Largest hop index with its own embedding; deeper hops share the last row.
pub(crate) const MAX_HOPS: usize = 8;
/// Graph attention edge directions: to primary key, to foreign key, self, global.
const N_DIRECTIONS: usize = 4;

impl Net {
    /// Registers every parameter in `ps` with a seeded initialization.
    pub(crate) fn new(cfg: &ModelConfig, ps: &mut ParamStore, seed: u64) -> Net {
        let d = cfg.d;
        let rng = &mut rng_for(&[seed, 0x1217]);
        let small = |ps: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            ps.add_init(name, shape, shape[shape.len() - 1], 0.3, rng)
        };
        let embed_lin = |ps: &mut ParamStore, k: Kind, name: &str, rng: &mut ChaCha8Rng| {
            Some(Lin::new(ps, name, k.width(), d, true, 1.0, rng))
        };
        let embed = [
            embed_lin(ps, Kind::Num, "embed.num", rng),
            embed_lin(ps, Kind::Cat, "embed.cat", rng),
            embed_lin(ps, Kind::Text, "embed.text", rng),
            embed_lin(ps, Kind::Time, "embed.time", rng),
            None,
            embed_lin(ps, Kind::TargetNum, "embed.target", rng),
            None,
            None,
        ];
        let embed_const = [
            None,
            None,
            None,
            None,
            Some(small(ps, "embed.null", &[1, d], rng)),
            None,
            Some(small(ps, "embed.labeled", &[1, d], rng)),
            Some(small(ps, "embed.mask", &[1, d], rng)),
        ];
        let types = small(ps, "embed.types", &[N_TYPES, d], rng);
        let table = (0..cfg.table_blocks)
            .map(|i| {
                let n = format!("table{i}");
                TableBlock {
                    col_norm: Norm::new(ps, &format!("{n}.col_norm"), d),
                    col: Proj::new(ps, &format!("{n}.col"), d, rng),
                    row_norm: Norm::new(ps, &format!("{n}.row_norm"), d),
                    inducing: ps.add_init(&format!("{n}.inducing"), &[cfg.inducing, d], d, 1.0, rng),
                    sum_k: Lin::new(ps, &format!("{n}.sum_k"), d, d, false, 1.0, rng),
                    sum_v: Lin::new(ps, &format!("{n}.sum_v"), d, d, false, 1.0, rng),
                    row: Proj::new(ps, &format!("{n}.row"), d, rng),
                    own_class: ps.add(&format!("{n}.own_class"), Tensor::full(&[cfg.heads], 1.0)),
                    mlp: Mlp::new(ps, &format!("{n}.mlp"), d, cfg.mlp_ratio, rng),
                }
            })
            .collect();
        let pool_norm = Norm::new(ps, "pool.norm", d);
        let pool_q = ps.add_init("pool.q", &[1, d], d, 1.0, rng);
        let pool_k = Lin::new(ps, "pool.k", d, d, false, 1.0, rng);
        let pool_v = Lin::new(ps, "pool.v", d, d, false, 1.0, rng);
        let empty_row = small(ps, "pool.empty", &[1, d], rng);
        let hop = small(ps, "node.hop", &[MAX_HOPS, d], rng);
        let node_time = Lin::new(ps, "node.time", NODE_TIME_FEATS, d, false, 0.5, rng);
        let node_static = small(ps, "node.static", &[1, d], rng);
        let degree = Lin::new(ps, "node.degree", 1, d, false, 0.5, rng);
        let graph = (0..cfg.graph_blocks)
            .map(|i| {
                let n = format!("graph{i}");
                GraphBlock {
                    norm: Norm::new(ps, &format!("{n}.norm"), d),
                    glob_q: ps.add_init(&format!("{n}.glob_q"), &[1, d], d, 1.0, rng),
                    glob_k: Lin::new(ps, &format!("{n}.glob_k"), d, d, false, 1.0, rng),
                    glob_v: Lin::new(ps, &format!("{n}.glob_v"), d, d, false, 1.0, rng),
                    attn: Proj::new(ps, &format!("{n}.attn"), d, rng),
                    direction: small(ps, &format!("{n}.direction"), &[N_DIRECTIONS, d], rng),
                    mlp: Mlp::new(ps, &format!("{n}.mlp"), d, cfg.mlp_ratio, rng),
                }
            })
            .collect();
        let entity_norm = Norm::new(ps, "entity.norm", d);
        let target_num = Lin::new(ps, "cross.target", NUM_FEATS, d, true, 1.0, rng);
        let labeled = small(ps, "cross.labeled", &[1, d], rng);
        let masked = small(ps, "cross.mask", &[1, d], rng);
        let cross = (0..cfg.cross_blocks)
            .map(|i| {
                let n = format!("cross{i}");
                CrossBlock {
                    pred_norm: Norm::new(ps, &format!("{n}.pred_norm"), d),
                    ctx_norm: Norm::new(ps, &format!("{n}.ctx_norm"), d),
                    attn: Proj::new(ps, &format!("{n}.attn"), d, rng),
                    pred_mlp: Mlp::new(ps, &format!("{n}.pred_mlp"), d, cfg.mlp_ratio, rng),
                    ctx_mlp: Mlp::new(ps, &format!("{n}.ctx_mlp"), d, cfg.mlp_ratio, rng),
                }
            })
            .collect();
        Net {
            d,
            heads: cfg.heads,
            inducing: cfg.inducing,
            max_flat: cfg.max_flat_classes,
            embed,
            embed_const,
            types,
            table,
            pool_norm,
            pool_q,
            pool_k,
            pool_v,
            empty_row,
            hop,
            node_time,
            node_static,
            degree,
            graph,
            entity_norm,
            target_num,
            labeled,
            masked,
            cross,
            out_pred: Norm::new(ps, "head.pred_norm", d),
            out_ctx: Norm::new(ps, "head.ctx_norm", d),
            cls_q: Lin::new(ps, "head.cls_q", d, d, false, 1.0, rng),
            cls_k: Lin::new(ps, "head.cls_k", d, d, false, 1.0, rng),
            sub_q: Lin::new(ps, "head.sub_q", d, d, false, 1.0, rng),
            sub_k: Lin::new(ps, "head.sub_k", d, d, false, 1.0, rng),
            reg_q: Lin::new(ps, "head.reg_q", d, d, false, 1.0, rng),
            reg_k: Lin::new(ps, "head.reg_k", d, d, false, 1.0, rng),
            reg_lin: Lin::new(ps, "head.reg_lin", d, 1, true, 0.5, rng),
        }
    }
}

/// Outputs of one forward pass.
pub(crate) struct Output {
    /// Classification: log-probabilities over the context's present classes, `[P, C]`.
    pub logp: Option<Var>,
    /// Regression: normalized predictions, `[P, 1]`.
    pub z: Option<Var>,
    /// Entity embeddings of all examples after the graph stage, `[X, d]`.
    pub entities: Var,
}

/// Compressed key lists: query `i` attends to `keys[offsets[i]..offsets[i + 1]]`.
#[derive(Default)]
struct Csr {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl Csr {
    fn from_lists<I: IntoIterator<Item = Vec<usize>>>(lists: I) -> Csr {
        let mut c = Csr {
            offsets: vec![0],
            keys: Vec::new(),
        };
        for l in lists {
            c.keys.extend(l);
            c.offsets.push(c.keys.len());
        }
        c
    }
}

fn constant_rows(t: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
    t.constant(Tensor::matrix(rows, cols, data))
}

/// Row `0` of a `[1, d]` parameter repeated `n` times.
fn repeat_param(t: &mut Tape, ps: &ParamStore, p: ParamId, n: usize) -> R<Var> {
    let v = t.param(ps, p);
    Ok(t.gather_rows(v, &vec![0; n])?)
}

/// Ragged attention with separate key and value sources gathered by index lists.
#[allow(clippy::too_many_arguments)]
fn attend(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    csr: &Csr,
    heads: usize,
    key_extra: Option<Var>,
    bias: Option<Var>,
) -> R<Var> {
    let ke = t.gather_rows(k, &csr.keys)?;
    let ke = match key_extra {
        Some(x) => t.add(ke, x)?,
        None => ke,
    };
    let ve = t.gather_rows(v, &csr.keys)?;
    Ok(t.ragged_attention(q, ke, ve, &csr.offsets, heads, bias)?)
}

impl Net {
    pub(crate) fn forward(&self, t: &mut Tape, ps: &ParamStore, ep: &Episode) -> R<Output> {
        let d = self.d;
        let toks = &ep.tokens;
        let n_tok = toks.len();
        let n_inst = ep.n_instances();
        let n_ex = ep.n_examples();
        let classification = ep.is_classification();

        // Token embeddings, concatenated in kind order.
        let mut parts = Vec::new();
        for k in 0..N_KINDS {
            let n = toks.counts[k];
            if n == 0 {
                continue;
            }
            let part = match (&self.embed[k], self.embed_const[k]) {
                (Some(lin), _) => {
                    let w = toks.feats[k].len() / n;
                    let x = constant_rows(t, n, w, toks.feats[k].clone());
                    lin.fwd(t, ps, x)?
                }
                (None, Some(p)) => repeat_param(t, ps, p, n)?,
                (None, None) => unreachable!("every kind has an embedding"),
            };
            parts.push(part);
        }
        let x = t.concat_rows(&parts)?;
        let types = t.param(ps, self.types);
        let types = t.gather_rows(types, &toks.type_id)?;
        let mut x = t.add(x, types)?;

        // Layouts for the table encoder.
        let mut inst_tokens: Vec<Vec<usize>> = vec![Vec::new(); n_inst];
        for (i, &inst) in toks.instance.iter().enumerate() {
            inst_tokens[inst].push(i);
        }
        let col_csr = Csr::from_lists(toks.instance.iter().map(|&i| inst_tokens[i].clone()));
        let n_cls = if classification && ep.present.len() <= self.max_flat {
            ep.present.len()
        } else {
            1
        };
        let token_class = |i: usize| -> Option<usize> {
            let ex = ep.inst_example[toks.instance[i]];
            (ex < ep.n_ctx).then(|| if n_cls > 1 { ep.ctx_class[ex] } else { 0 })
        };
        // Summary slots per (group, class): context tokens of that group and class.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); ep.n_groups * n_cls];
        for i in 0..n_tok {
            if let Some(c) = token_class(i) {
                members[toks.group[i] * n_cls + c].push(i);
            }
        }
        let group_has_ctx: Vec<bool> = (0..ep.n_groups)
            .map(|g| (0..n_cls).any(|c| !members[g * n_cls + c].is_empty()))
            .collect();
        let m = self.inducing;
        let mut sum_lists = Vec::new();
        let mut sum_query = Vec::new();
        let mut sum_base = vec![usize::MAX; ep.n_groups];
        for g in 0..ep.n_groups {
            if !group_has_ctx[g] {
                continue;
            }
            sum_base[g] = sum_query.len();
            for c in 0..n_cls {
                for j in 0..m {
                    sum_lists.push(members[g * n_cls + c].clone());
                    sum_query.push(j);
                }
            }
        }
        let sum_csr = Csr::from_lists(sum_lists);
        let mut bcast_lists = Vec::with_capacity(n_tok);
        let mut own = Vec::new();
        for i in 0..n_tok {
            let g = toks.group[i];
            if sum_base[g] == usize::MAX {
                bcast_lists.push(Vec::new());
                continue;
            }
            let mine = token_class(i).filter(|_| n_cls > 1);
            let mut l = Vec::with_capacity(n_cls * m);
            for c in 0..n_cls {
                for j in 0..m {
                    l.push(sum_base[g] + c * m + j);
                    let flag = if mine == Some(c) { 1.0 } else { 0.0 };
                    own.extend(std::iter::repeat_n(flag, self.heads));
                }
            }
            bcast_lists.push(l);
        }
        let bcast_csr = Csr::from_lists(bcast_lists);
        let own_const = (n_cls > 1).then(|| constant_rows(t, bcast_csr.keys.len(), self.heads, own));

        for blk in &self.table {
            // Column attention: tokens of one row attend to each other.
            let h = blk.col_norm.fwd(t, ps, x)?;
            let q = blk.col.q.fwd(t, ps, h)?;
            let k = blk.col.k.fwd(t, ps, h)?;
            let v = blk.col.v.fwd(t, ps, h)?;
            let a = attend(t, q, k, v, &col_csr, self.heads, None, None)?;
            let a = blk.col.o.fwd(t, ps, a)?;
            x = t.add(x, a)?;
            // Row attention through per-(column, class) summaries of context rows.
            let h = blk.row_norm.fwd(t, ps, x)?;
            if !sum_query.is_empty() {
                let iq = t.param(ps, blk.inducing);
                let sq = t.gather_rows(iq, &sum_query)?;
                let sk = blk.sum_k.fwd(t, ps, h)?;
                let sv = blk.sum_v.fwd(t, ps, h)?;
                let summaries = attend(t, sq, sk, sv, &sum_csr, self.heads, None, None)?;
                let q = blk.row.q.fwd(t, ps, h)?;
                let k = blk.row.k.fwd(t, ps, summaries)?;
                let v = blk.row.v.fwd(t, ps, summaries)?;
                let bias = match own_const {
                    Some(o) => {
                        let beta = t.param(ps, blk.own_class);
                        Some(t.mul_bias(o, beta)?)
                    }
                    None => None,
                };
                let a = attend(t, q, k, v, &bcast_csr, self.heads, None, bias)?;
                let a = blk.row.o.fwd(t, ps, a)?;
                x = t.add(x, a)?;
            }
            x = blk.mlp.fwd(t, ps, x)?;
        }

        // Attention pooling of each row's tokens into a row embedding.
        let h = self.pool_norm.fwd(t, ps, x)?;
        let pq = repeat_param(t, ps, self.pool_q, n_inst)?;
        let pk = self.pool_k.fwd(t, ps, h)?;
        let pv = self.pool_v.fwd(t, ps, h)?;
        let pool_csr = Csr::from_lists(inst_tokens.iter().cloned());
        let rows = attend(t, pq, pk, pv, &pool_csr, self.heads, None, None)?;
        let empty: Vec<f64> = inst_tokens.iter().map(|l| f64::from(u8::from(l.is_empty()))).collect();
        let empty = constant_rows(t, n_inst, 1, empty);
        let empty_p = t.param(ps, self.empty_row);
        let empty = t.matmul(empty, empty_p)?;
        let rows = t.add(rows, empty)?;

        // Node states.
        let hops: Vec<usize> = ep.inst_hop.iter().map(|&h| h.min(MAX_HOPS - 1)).collect();
        let hop_p = t.param(ps, self.hop);
        let hop = t.gather_rows(hop_p, &hops)?;
        let tf: Vec<f64> = ep.inst_time.iter().flat_map(|&x| [x, x * x]).collect();
        let tf = constant_rows(t, n_inst, NODE_TIME_FEATS, tf);
        let tf = self.node_time.fwd(t, ps, tf)?;
        let st = constant_rows(t, n_inst, 1, ep.inst_static.clone());
        let st_p = t.param(ps, self.node_static);
        let st = t.matmul(st, st_p)?;
        let dg = constant_rows(t, n_inst, 1, ep.inst_degree.clone());
        let dg = self.degree.fwd(t, ps, dg)?;
        let mut h = rows;
        for extra in [hop, tf, st, dg] {
            h = t.add(h, extra)?;
        }

        // Graph attention over subgraph edges, self and a per-example global token.
        let mut ex_nodes: Vec<Vec<usize>> = vec![Vec::new(); n_ex];
        for (i, &e) in ep.inst_example.iter().enumerate() {
            ex_nodes[e].push(i);
        }
        let glob_csr = Csr::from_lists(ex_nodes.iter().cloned());
        let mut dirs = Vec::new();
        let graph_csr = Csr::from_lists((0..n_inst).map(|i| {
            let mut l = vec![i];
            dirs.push(2);
            for &(j, dir) in &ep.inst_nbrs[i] {
                l.push(j);
                dirs.push(dir);
            }
            l.push(n_inst + ep.inst_example[i]);
            dirs.push(3);
            l
        }));
        let graph_blocks: &[GraphBlock] = if ep.graph_stage { &self.graph } else { &[] };
        for blk in graph_blocks {
            let g = blk.norm.fwd(t, ps, h)?;
            let gq = repeat_param(t, ps, blk.glob_q, n_ex)?;
            let gk = blk.glob_k.fwd(t, ps, g)?;
            let gv = blk.glob_v.fwd(t, ps, g)?;
            let glob = attend(t, gq, gk, gv, &glob_csr, self.heads, None, None)?;
            let all = t.concat_rows(&[g, glob])?;
            let q = blk.attn.q.fwd(t, ps, g)?;
            let k = blk.attn.k.fwd(t, ps, all)?;
            let v = blk.attn.v.fwd(t, ps, all)?;
            let dir_p = t.param(ps, blk.direction);
            let dir = t.gather_rows(dir_p, &dirs)?;
            let a = attend(t, q, k, v, &graph_csr, self.heads, Some(dir), None)?;
            let a = blk.attn.o.fwd(t, ps, a)?;
            h = t.add(h, a)?;
            h = blk.mlp.fwd(t, ps, h)?;
        }
        let roots = t.gather_rows(h, &ep.roots)?;
        let entities = self.entity_norm.fwd(t, ps, roots)?;

        // Cross-sample attention: prediction rows read the labeled context.
        let ctx_idx: Vec<usize> = (0..ep.n_ctx).collect();
        let pred_idx: Vec<usize> = (ep.n_ctx..n_ex).collect();
        let ctx = t.gather_rows(entities, &ctx_idx)?;
        let pred = t.gather_rows(entities, &pred_idx)?;
        let target = if classification {
            repeat_param(t, ps, self.labeled, ep.n_ctx)?
        } else {
            let f: Vec<f64> = ep.ctx_z.iter().flat_map(|&z| super::tokens::number_feats(z)).collect();
            let f = constant_rows(t, ep.n_ctx, NUM_FEATS, f);
            self.target_num.fwd(t, ps, f)?
        };
        let mut c = t.add(ctx, target)?;
        let mask = repeat_param(t, ps, self.masked, ep.n_pred)?;
        let mut p = t.add(pred, mask)?;
        let cross_csr = Csr::from_lists((0..ep.n_pred).map(|_| ctx_idx.clone()));
        for blk in &self.cross {
            let pn = blk.pred_norm.fwd(t, ps, p)?;
            let cn = blk.ctx_norm.fwd(t, ps, c)?;
            let q = blk.attn.q.fwd(t, ps, pn)?;
            let k = blk.attn.k.fwd(t, ps, cn)?;
            let v = blk.attn.v.fwd(t, ps, cn)?;
            let a = attend(t, q, k, v, &cross_csr, self.heads, None, None)?;
            let a = blk.attn.o.fwd(t, ps, a)?;
            p = t.add(p, a)?;
            p = blk.pred_mlp.fwd(t, ps, p)?;
            c = blk.ctx_mlp.fwd(t, ps, c)?;
        }
        let pf = self.out_pred.fwd(t, ps, p)?;
        let cf = self.out_ctx.fwd(t, ps, c)?;

        let inv = 1.0 / (d as f64).sqrt();
        if classification {
            let logp = if ep.present.len() <= self.max_flat {
                let s = self.kernel_scores(t, ps, &self.cls_q, &self.cls_k, pf, cf)?;
                let groups = class_members(ep);
                let logits = t.segment_logsumexp(s, &groups)?;
                t.log_softmax(logits)
            } else {
                self.hierarchical(t, ps, ep, pf, cf)?
            };
            Ok(Output {
                logp: Some(logp),
                z: None,
                entities,
            })
        } else {
            let q = self.reg_q.fwd(t, ps, pf)?;
            let k = self.reg_k.fwd(t, ps, cf)?;
            let s = t.matmul_nt(q, k)?;
            let s = t.scale(s, inv);
            let w = t.softmax(s);
            let zc = constant_rows(t, ep.n_ctx, 1, ep.ctx_z.clone());
            let kernel = t.matmul(w, zc)?;
            let lin = self.reg_lin.fwd(t, ps, pf)?;
            let z = t.add(kernel, lin)?;
            Ok(Output {
                logp: None,
                z: Some(z),
                entities,
            })
        }
    }

    /// `s_i = (2 q·k_i - |k_i|²) / sqrt(d)`: negative squared distance up to a
    /// per-query constant, `[P, N]`.
    fn kernel_scores(&self, t: &mut Tape, ps: &ParamStore, ql: &Lin, kl: &Lin, pf: Var, cf: Var) -> R<Var> {
        let q = ql.fwd(t, ps, pf)?;
        let k = kl.fwd(t, ps, cf)?;
        let qk = t.matmul_nt(q, k)?;
        let qk = t.scale(qk, 2.0);
        let kk = t.mul(k, k)?;
        let kk = t.sum_last(kk);
        let kk = t.scale(kk, -1.0);
        let s = t.add_bias(qk, kk)?;
        Ok(t.scale(s, 1.0 / (self.d as f64).sqrt()))
    }

    /// Bucket-then-class head: `log p(k) = log p(bucket(k)) + s_k - LSE_{k' in bucket} s_k'`.
    fn hierarchical(&self, t: &mut Tape, ps: &ParamStore, ep: &Episode, pf: Var, cf: Var) -> R<Var> {
        let buckets = frequency_buckets(ep);
        let n_present = ep.present.len();
        let mut bucket_of = vec![0; n_present];
        for (b, members) in buckets.iter().enumerate() {
            for &c in members {
                bucket_of[c] = b;
            }
        }
        let classes = class_members(ep);
        let ctx_by_bucket: Vec<Vec<usize>> = buckets
            .iter()
            .map(|members| {
                let mut l: Vec<usize> = members.iter().flat_map(|&c| classes[c].iter().copied()).collect();
                l.sort_unstable();
                l
            })
            .collect();
        let s1 = self.kernel_scores(t, ps, &self.cls_q, &self.cls_k, pf, cf)?;
        let b_logits = t.segment_logsumexp(s1, &ctx_by_bucket)?;
        let b_logp = t.log_softmax(b_logits);
        let s2 = self.kernel_scores(t, ps, &self.sub_q, &self.sub_k, pf, cf)?;
        let c_logits = t.segment_logsumexp(s2, &classes)?;
        let within = t.segment_logsumexp(c_logits, &buckets)?;
        let lb = t.gather_cols(b_logp, &bucket_of)?;
        let lw = t.gather_cols(within, &bucket_of)?;
        let out = t.add(lb, c_logits)?;
        Ok(t.sub(out, lw)?)
    }
}

/// Context rows of each present class.
fn class_members(ep: &Episode) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); ep.present.len()];
    for (i, &c) in ep.ctx_class.iter().enumerate() {
        groups[c].push(i);
    }
    groups
}

/// Present classes split into `ceil(sqrt(C))` buckets of consecutive classes in order
/// of decreasing context frequency, ties by class index.
pub(crate) fn frequency_buckets(ep: &Episode) -> Vec<Vec<usize>> {
    let n = ep.present.len();
    let mut freq = vec![0usize; n];
    for &c in &ep.ctx_class {
        freq[c] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(freq[c]), ep.present[c]));
    let n_buckets = (n as f64).sqrt().ceil() as usize;
    let size = n.div_ceil(n_buckets);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}
