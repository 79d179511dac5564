//! Heterogeneous graph affordance network.
//!
//! Target and obstacle clouds are coarsened by set abstraction, robot key
//! points become one node each, and typed GATv2 layers pass messages along
//! every ordered pair of node types. Edge features are relative
//! translations, so the network never sees an absolute position. A gated
//! sum readout feeds a scalar head whose output is the success logit.
//!
//! Evaluation is split in two stages. [`AffordanceModel::encode_scenes`]
//! handles everything that depends only on the observation (coarsening,
//! node encoders, and the first-layer relations between scene nodes);
//! [`AffordanceModel::forward_samples`] adds the robot for each start
//! configuration. Training batches several starts per scene through one
//! encoding and the optimizer reuses a cached encoding across iterations.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arm::ArmModel;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::scene::LabeledPointCloud;
use crate::seed;
use crate::tensor::{BoundParams, CustomOp, ParamSet, Tape, Tensor, Var};

/// Slope of the attention nonlinearity.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeType {
    Target,
    Obstacle,
    Robot,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Target, NodeType::Obstacle, NodeType::Robot];

    pub fn tag(self) -> &'static str {
        match self {
            NodeType::Target => "t",
            NodeType::Obstacle => "o",
            NodeType::Robot => "r",
        }
    }
}

/// Which robot key points become graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotNodes {
    All,
    EefOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HGraphConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Fraction of cloud points kept as set-abstraction centers.
    pub sa_ratio: f64,
    pub sa_radius: f64,
    pub sa_max_neighbors: usize,
    pub sa_widths: Vec<usize>,
    pub same_type_edges: bool,
    pub robot_nodes: RobotNodes,
}

impl Default for HGraphConfig {
    fn default() -> Self {
        HGraphConfig {
            hidden: 64,
            layers: 2,
            sa_ratio: 1.0 / 16.0,
            sa_radius: 0.1,
            sa_max_neighbors: 16,
            sa_widths: vec![16, 32],
            same_type_edges: true,
            robot_nodes: RobotNodes::All,
        }
    }
}

impl HGraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.sa_widths.is_empty() {
            return Err(Error::InvalidParameter(
                "hidden width, layer count and set-abstraction widths must be positive".into(),
            ));
        }
        if !(self.sa_ratio > 0.0 && self.sa_ratio <= 1.0) {
            return Err(Error::InvalidParameter("sa_ratio must lie in (0, 1]".into()));
        }
        if !(self.sa_radius > 0.0) || self.sa_max_neighbors == 0 {
            return Err(Error::InvalidParameter("set-abstraction radius and cap must be positive".into()));
        }
        Ok(())
    }

    pub fn relations(&self) -> Vec<(NodeType, NodeType)> {
        relations(self.same_type_edges)
    }

    /// The arm whose key points form the robot node set.
    pub fn robot_arm(&self, arm: &ArmModel) -> ArmModel {
        match self.robot_nodes {
            RobotNodes::All => arm.with_base(Vec2::ZERO),
            RobotNodes::EefOnly => arm.eef_only().with_base(Vec2::ZERO),
        }
    }
}

/// Ordered (source, destination) type pairs.
pub fn relations(same_type: bool) -> Vec<(NodeType, NodeType)> {
    let mut out = Vec::new();
    for s in NodeType::ALL {
        for d in NodeType::ALL {
            if s != d || same_type {
                out.push((s, d));
            }
        }
    }
    out
}

fn lex(a: Vec2, b: Vec2) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Sum in sorted order, independent of input order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Farthest-point sampling of `m` indices. The first pick is the point
/// nearest the centroid; ties are broken by coordinates so the selected
/// positions do not depend on input order.
pub fn farthest_point_sampling(points: &[Vec2], m: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let inv = 1.0 / n as f64;
    let c = Vec2::new(
        sorted_sum(points.iter().map(|p| p.x).collect()) * inv,
        sorted_sum(points.iter().map(|p| p.y).collect()) * inv,
    );
    let better = |i: usize, j: usize, di: f64, dj: f64, far: bool| -> bool {
        let o = if far { dj.total_cmp(&di) } else { di.total_cmp(&dj) };
        match o {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => lex(points[i], points[j]) == Ordering::Less,
        }
    };
    let dc: Vec<f64> = points.iter().map(|&p| (p - c).norm_sq()).collect();
    let mut first = 0;
    for i in 1..n {
        if better(i, first, dc[i], dc[first], false) {
            first = i;
        }
    }
    let mut picked = vec![first];
    let mut dmin: Vec<f64> = points.iter().map(|&p| (p - points[first]).norm_sq()).collect();
    while picked.len() < m.min(n) {
        let mut best = 0;
        for i in 1..n {
            if better(i, best, dmin[i], dmin[best], true) {
                best = i;
            }
        }
        picked.push(best);
        for (d, &p) in dmin.iter_mut().zip(points) {
            *d = d.min((p - points[best]).norm_sq());
        }
    }
    picked
}

/// Neighborhoods of the set-abstraction centers: offsets to the center in
/// units of the radius, and for each offset the index of its center.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub centers: Vec<Vec2>,
    pub offsets: Vec<Vec2>,
    pub center_of: Vec<usize>,
}

impl Grouping {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

pub fn num_centers(n: usize, ratio: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((ratio * n as f64).round() as usize).clamp(1, n)
    }
}

/// Center selection and radius grouping (nearest first, capped).
pub fn group_points(points: &[Vec2], cfg: &HGraphConfig) -> Grouping {
    let m = num_centers(points.len(), cfg.sa_ratio);
    let centers: Vec<Vec2> = farthest_point_sampling(points, m)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let r2 = cfg.sa_radius * cfg.sa_radius;
    let inv = 1.0 / cfg.sa_radius;
    let mut offsets = Vec::new();
    let mut center_of = Vec::new();
    for (ci, &c) in centers.iter().enumerate() {
        let mut near: Vec<(f64, Vec2)> = points
            .iter()
            .map(|&p| ((p - c).norm_sq(), p))
            .filter(|&(d, _)| d <= r2)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(lex(a.1, b.1)));
        near.truncate(cfg.sa_max_neighbors);
        for (_, p) in near {
            offsets.push((p - c) * inv);
            center_of.push(ci);
        }
    }
    Grouping {
        centers,
        offsets,
        center_of,
    }
}

/// Observation preprocessed into base-frame groupings. Parameter-free, so it
/// can be cached per scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedObservation {
    pub target: Grouping,
    pub obstacles: Grouping,
}

pub fn prepare_observation(
    obs: &LabeledPointCloud,
    base: Vec2,
    cfg: &HGraphConfig,
) -> Result<PreparedObservation> {
    if obs.target_points.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let t: Vec<Vec2> = obs.target_points.iter().map(|&p| p - base).collect();
    let o: Vec<Vec2> = obs.obstacle_points.iter().map(|&(p, _)| p - base).collect();
    Ok(PreparedObservation {
        target: group_points(&t, cfg),
        obstacles: group_points(&o, cfg),
    })
}

/// Coarsened cloud: centers plus their local features.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsePoints {
    pub centers: Vec<Vec2>,
    pub features: Tensor,
}

/// Typed graph in explicit form.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub positions: [Vec<Vec2>; 3],
    pub features: [Tensor; 3],
    pub edges: Vec<RelationEdges>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationEdges {
    pub src_type: NodeType,
    pub dst_type: NodeType,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub delta: Vec<Vec2>,
}

/// All pairs `(s, d)` with `s` in `0..ns` and `d` in `0..nd`, without self
/// pairs when both sides are the same node set.
fn complete_pairs(ns: usize, nd: usize, same: bool) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(ns * nd);
    let mut dst = Vec::with_capacity(ns * nd);
    for d in 0..nd {
        for s in 0..ns {
            if !(same && s == d) {
                src.push(s);
                dst.push(d);
            }
        }
    }
    (src, dst)
}

pub fn build_graph(
    target: &CoarsePoints,
    obstacles: &CoarsePoints,
    robot: &crate::arm::KeyPointSet,
    same_type_edges: bool,
) -> Result<HeteroGraph> {
    if target.centers.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let positions = [
        target.centers.clone(),
        obstacles.centers.clone(),
        robot.positions.clone(),
    ];
    let k = robot.positions.len();
    let ids: Vec<f64> = robot.ids.iter().flatten().copied().collect();
    let features = [
        target.features.clone(),
        obstacles.features.clone(),
        Tensor::from_vec(k, if k == 0 { 0 } else { ids.len() / k }, ids)?,
    ];
    let edges = relations(same_type_edges)
        .into_iter()
        .map(|(s, d)| {
            let (ps, pd) = (&positions[s as usize], &positions[d as usize]);
            let (src, dst) = complete_pairs(ps.len(), pd.len(), s == d);
            let delta = src.iter().zip(&dst).map(|(&i, &j)| ps[i] - pd[j]).collect();
            RelationEdges {
                src_type: s,
                dst_type: d,
                src,
                dst,
                delta,
            }
        })
        .collect();
    Ok(HeteroGraph {
        positions,
        features,
        edges,
    })
}

/// Inputs to one typed attention relation. Edge `e` runs from row
/// `src_rows[e]` of `hs`/`ps` to row `dst_rows[e]` of `hd`/`pd` and is
/// aggregated into output row `dst_seg[e]` of `n_dst` rows.
pub struct RelationInput<'a> {
    pub hs: Var,
    pub ps: Var,
    pub src_rows: &'a [usize],
    pub hd: Var,
    pub pd: Var,
    pub dst_rows: &'a [usize],
    pub dst_seg: &'a [usize],
    pub n_dst: usize,
}

/// Fused GATv2 aggregation over one relation. Inputs, in order: projected
/// sources `sw`, projected destinations `dw`, source values `sv`, source and
/// destination positions, edge weights `we`, `ve`, bias `b`, score vector `a`.
struct GatAggregate {
    src_rows: Vec<usize>,
    dst_rows: Vec<usize>,
    dst_seg: Vec<usize>,
    n_dst: usize,
    alpha: Vec<f64>,
}

impl GatAggregate {
    fn delta(&self, e: usize, ps: &Tensor, pd: &Tensor) -> [f64; 2] {
        let (s, d) = (self.src_rows[e], self.dst_rows[e]);
        [ps.get(s, 0) - pd.get(d, 0), ps.get(s, 1) - pd.get(d, 1)]
    }

    /// Pre-activation `z` of edge `e` into `out`.
    fn pre(&self, e: usize, x: &[&Tensor], dl: [f64; 2], out: &mut [f64]) {
        let (sw, dw, we, b) = (x[0].row(self.src_rows[e]), x[1].row(self.dst_rows[e]), x[5], x[7].data());
        let (w0, w1) = (we.row(0), we.row(1));
        for h in 0..out.len() {
            out[h] = sw[h] + dw[h] + dl[0] * w0[h] + dl[1] * w1[h] + b[h];
        }
    }

    fn message(&self, e: usize, x: &[&Tensor], dl: [f64; 2], out: &mut [f64]) {
        let sv = x[2].row(self.src_rows[e]);
        let (v0, v1) = (x[6].row(0), x[6].row(1));
        for h in 0..out.len() {
            out[h] = sv[h] + dl[0] * v0[h] + dl[1] * v1[h];
        }
    }
}

impl CustomOp for GatAggregate {
    fn name(&self) -> &'static str {
        "gat_aggregate"
    }

    fn forward(&mut self, x: &[&Tensor]) -> Result<Tensor> {
        let h = x[0].cols();
        let ok = x.len() == 9
            && x[1].cols() == h
            && x[2].cols() == h
            && x[2].rows() == x[0].rows()
            && x[3].cols() == 2
            && x[4].cols() == 2
            && x[5].shape() == [2, h]
            && x[6].shape() == [2, h]
            && x[7].shape() == [1, h]
            && x[8].shape() == [h, 1]
            && self.src_rows.iter().all(|&r| r < x[0].rows() && r < x[3].rows())
            && self.dst_rows.iter().all(|&r| r < x[1].rows() && r < x[4].rows())
            && self.dst_seg.iter().all(|&r| r < self.n_dst);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "gat_aggregate",
                lhs: x[0].shape().to_vec(),
                rhs: x[1].shape().to_vec(),
            });
        }
        let ne = self.src_rows.len();
        let a = x[8].data();
        let mut z = vec![0.0; h];
        let mut score = vec![0.0; ne];
        for (e, sc) in score.iter_mut().enumerate() {
            let dl = self.delta(e, x[3], x[4]);
            self.pre(e, x, dl, &mut z);
            *sc = z
                .iter()
                .zip(a)
                .map(|(&v, &ah)| ah * if v > 0.0 { v } else { ATTENTION_SLOPE * v })
                .sum();
        }
        let mut max = vec![f64::NEG_INFINITY; self.n_dst];
        for (&v, &d) in score.iter().zip(&self.dst_seg) {
            max[d] = max[d].max(v);
        }
        let mut alpha: Vec<f64> = score
            .iter()
            .zip(&self.dst_seg)
            .map(|(&v, &d)| (v - max[d]).exp())
            .collect();
        let mut zsum = vec![0.0; self.n_dst];
        for (&v, &d) in alpha.iter().zip(&self.dst_seg) {
            zsum[d] += v;
        }
        for (v, &d) in alpha.iter_mut().zip(&self.dst_seg) {
            *v /= zsum[d];
        }
        let mut out = Tensor::zeros(self.n_dst, h);
        let mut m = vec![0.0; h];
        for e in 0..ne {
            let dl = self.delta(e, x[3], x[4]);
            self.message(e, x, dl, &mut m);
            let d = self.dst_seg[e];
            let row = &mut out.data_mut()[d * h..(d + 1) * h];
            for (o, &v) in row.iter_mut().zip(&m) {
                *o += alpha[e] * v;
            }
        }
        self.alpha = alpha;
        Ok(out)
    }

    fn backward(
        &self,
        x: &[&Tensor],
        _output: &Tensor,
        g: &Tensor,
        _wants: &[bool],
    ) -> Vec<Option<Tensor>> {
        let h = x[0].cols();
        let ne = self.src_rows.len();
        let mut gs: Vec<Tensor> = x.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        let a = x[8].data();
        let (v0, v1) = (x[6].row(0).to_vec(), x[6].row(1).to_vec());
        let (w0, w1) = (x[5].row(0).to_vec(), x[5].row(1).to_vec());
        let mut m = vec![0.0; h];
        let mut z = vec![0.0; h];
        // Message path and attention-weight gradients.
        let mut dalpha = vec![0.0; ne];
        let mut ddelta = vec![[0.0; 2]; ne];
        for e in 0..ne {
            let dl = self.delta(e, x[3], x[4]);
            self.message(e, x, dl, &mut m);
            let d = self.dst_seg[e];
            let gr = g.row(d);
            let al = self.alpha[e];
            dalpha[e] = gr.iter().zip(&m).map(|(p, q)| p * q).sum();
            let s = self.src_rows[e];
            let (mut dd0, mut dd1) = (0.0, 0.0);
            {
                let dsv = &mut gs[2].data_mut()[s * h..(s + 1) * h];
                for hh in 0..h {
                    let dm = al * gr[hh];
                    dsv[hh] += dm;
                    dd0 += dm * v0[hh];
                    dd1 += dm * v1[hh];
                }
            }
            {
                let dve = gs[6].data_mut();
                for hh in 0..h {
                    let dm = al * gr[hh];
                    dve[hh] += dl[0] * dm;
                    dve[h + hh] += dl[1] * dm;
                }
            }
            ddelta[e] = [dd0, dd1];
        }
        let mut dot = vec![0.0; self.n_dst];
        for ((&al, &da), &d) in self.alpha.iter().zip(&dalpha).zip(&self.dst_seg) {
            dot[d] += al * da;
        }
        // Score path.
        for e in 0..ne {
            let d = self.dst_seg[e];
            let ds = self.alpha[e] * (dalpha[e] - dot[d]);
            if ds == 0.0 {
                continue;
            }
            let dl = self.delta(e, x[3], x[4]);
            self.pre(e, x, dl, &mut z);
            let (s, dr) = (self.src_rows[e], self.dst_rows[e]);
            let (mut dd0, mut dd1) = (0.0, 0.0);
            for hh in 0..h {
                let v = z[hh];
                let (act, slope) = if v > 0.0 { (v, 1.0) } else { (ATTENTION_SLOPE * v, ATTENTION_SLOPE) };
                gs[8].data_mut()[hh] += ds * act;
                let dz = ds * a[hh] * slope;
                gs[0].data_mut()[s * h + hh] += dz;
                gs[1].data_mut()[dr * h + hh] += dz;
                gs[7].data_mut()[hh] += dz;
                gs[5].data_mut()[hh] += dl[0] * dz;
                gs[5].data_mut()[h + hh] += dl[1] * dz;
                dd0 += dz * w0[hh];
                dd1 += dz * w1[hh];
            }
            ddelta[e][0] += dd0;
            ddelta[e][1] += dd1;
        }
        for (e, dd) in ddelta.iter().enumerate() {
            let (s, dr) = (self.src_rows[e], self.dst_rows[e]);
            let p = gs[3].data_mut();
            p[2 * s] += dd[0];
            p[2 * s + 1] += dd[1];
            let q = gs[4].data_mut();
            q[2 * dr] -= dd[0];
            q[2 * dr + 1] -= dd[1];
        }
        gs.into_iter().map(Some).collect()
    }
}

/// One GATv2 relation: aggregated messages (`n_dst x H`).
pub fn relation_forward(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: &RelationInput<'_>,
) -> Result<Var> {
    let w = |n: &str| p.get(&format!("{prefix}.{n}"));
    let sw = tape.matmul(x.hs, w("ws")?)?;
    let dw = tape.matmul(x.hd, w("wd")?)?;
    let sv = tape.matmul(x.hs, w("vs")?)?;
    let op = GatAggregate {
        src_rows: x.src_rows.to_vec(),
        dst_rows: x.dst_rows.to_vec(),
        dst_seg: x.dst_seg.to_vec(),
        n_dst: x.n_dst,
        alpha: Vec::new(),
    };
    tape.custom(
        Box::new(op),
        &[sw, dw, sv, x.ps, x.pd, w("we")?, w("ve")?, w("b")?, w("a")?],
    )
}

/// Unfused composition of tape primitives computing the same relation as
/// [`relation_forward`]; also returns the attention weights (`E x 1`).
pub fn relation_forward_unfused(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: &RelationInput<'_>,
) -> Result<(Var, Var)> {
    let w = |n: &str| p.get(&format!("{prefix}.{n}"));
    let ws = tape.matmul(x.hs, w("ws")?)?;
    let wd = tape.matmul(x.hd, w("wd")?)?;
    let es = tape.gather_rows(ws, x.src_rows)?;
    let ed = tape.gather_rows(wd, x.dst_rows)?;
    let qs = tape.gather_rows(x.ps, x.src_rows)?;
    let qd = tape.gather_rows(x.pd, x.dst_rows)?;
    let delta = tape.sub(qs, qd)?;
    let ee = tape.matmul(delta, w("we")?)?;
    let z = tape.add(es, ed)?;
    let z = tape.add(z, ee)?;
    let z = tape.add_row(z, w("b")?)?;
    let z = tape.leaky_relu(z, ATTENTION_SLOPE);
    let score = tape.matmul(z, w("a")?)?;
    let alpha = tape.segment_softmax(score, x.dst_seg, x.n_dst)?;
    let vs = tape.matmul(x.hs, w("vs")?)?;
    let ms = tape.gather_rows(vs, x.src_rows)?;
    let me = tape.matmul(delta, w("ve")?)?;
    let m = tape.add(ms, me)?;
    let m = tape.mul_col(m, alpha)?;
    let agg = tape.segment_sum(m, x.dst_seg, x.n_dst)?;
    Ok((agg, alpha))
}

/// Gated sum readout per segment: `sum_v sigmoid(gate(h_v)) * value(h_v)`.
pub fn global_attention_pool(
    tape: &mut Tape,
    p: &BoundParams,
    h: Var,
    seg: &[usize],
    n: usize,
) -> Result<Var> {
    let g = tape.matmul(h, p.get("pool.gate.w")?)?;
    let g = tape.add_row(g, p.get("pool.gate.b")?)?;
    let g = tape.sigmoid(g);
    let v = tape.matmul(h, p.get("pool.value.w")?)?;
    let v = tape.add_row(v, p.get("pool.value.b")?)?;
    let gv = tape.mul_col(v, g)?;
    tape.segment_sum_sorted(gv, seg, n)
}

fn dense(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    tape.add_row(y, p.get(&format!("{prefix}.b"))?)
}

/// Per-point network over grouped offsets, max-pooled per center.
fn sa_forward(
    tape: &mut Tape,
    p: &BoundParams,
    ty: NodeType,
    n_layers: usize,
    offsets: Var,
    center_of: &[usize],
    m: usize,
) -> Result<Var> {
    let mut h = offsets;
    for l in 0..n_layers {
        h = dense(tape, p, &format!("sa.{}.{l}", ty.tag()), h)?;
        h = tape.relu(h);
    }
    tape.segment_max(h, center_of, m)
}

fn offsets_tensor(v: &[Vec2]) -> Tensor {
    Tensor::from_vec(v.len(), 2, v.iter().flat_map(|p| [p.x, p.y]).collect())
        .expect("two columns")
}

fn positions_tensor(v: &[Vec2]) -> Tensor {
    offsets_tensor(v)
}

/// Scene-only quantities for a batch of observations, on a tape.
#[derive(Debug, Clone)]
pub struct SceneEncoding {
    pos: [Vec<Vec2>; 2],
    off: [Vec<usize>; 2],
    h0: [Var; 2],
    /// First-layer messages into scene nodes from scene nodes.
    msg1: [Var; 2],
}

/// A [`SceneEncoding`] detached from its tape for reuse.
#[derive(Debug, Clone)]
pub struct SceneCache {
    pos: [Vec<Vec2>; 2],
    off: [Vec<usize>; 2],
    h0: [Arc<Tensor>; 2],
    msg1: [Arc<Tensor>; 2],
}

impl SceneEncoding {
    pub fn detach(&self, tape: &Tape) -> SceneCache {
        SceneCache {
            pos: self.pos.clone(),
            off: self.off.clone(),
            h0: [tape.value_shared(self.h0[0]), tape.value_shared(self.h0[1])],
            msg1: [tape.value_shared(self.msg1[0]), tape.value_shared(self.msg1[1])],
        }
    }

    pub fn num_scenes(&self) -> usize {
        self.off[0].len() - 1
    }
}

impl SceneCache {
    pub fn attach(&self, tape: &mut Tape) -> SceneEncoding {
        SceneEncoding {
            pos: self.pos.clone(),
            off: self.off.clone(),
            h0: [
                tape.constant_shared(Arc::clone(&self.h0[0])),
                tape.constant_shared(Arc::clone(&self.h0[1])),
            ],
            msg1: [
                tape.constant_shared(Arc::clone(&self.msg1[0])),
                tape.constant_shared(Arc::clone(&self.msg1[1])),
            ],
        }
    }
}

/// One start configuration in a batch: its scene (index into the encoding)
/// and its robot node positions in the base frame.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef {
    pub scene: usize,
}

/// Edges of one relation grouped by sample or by scene.
fn grouped_pairs(
    src_off: &[usize],
    dst_off: &[usize],
    same: bool,
) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for g in 0..src_off.len() - 1 {
        let (s0, s1) = (src_off[g], src_off[g + 1]);
        let (d0, d1) = (dst_off[g], dst_off[g + 1]);
        for d in d0..d1 {
            for s in s0..s1 {
                if !(same && s - s0 == d - d0) {
                    src.push(s);
                    dst.push(d);
                }
            }
        }
    }
    (src, dst)
}

fn offsets_of(counts: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut off = vec![0];
    for c in counts {
        off.push(off.last().copied().unwrap_or(0) + c);
    }
    off
}

/// Affordance network: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceModel {
    pub config: HGraphConfig,
    pub params: ParamSet,
}

/// Model parameters; the trained classifier is an [`AffordanceModel`].
pub type AffordanceParams = AffordanceModel;

impl AffordanceModel {
    /// Fresh parameters for an arm with `num_key_points` key points.
    pub fn init(config: HGraphConfig, num_key_points: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = match config.robot_nodes {
            RobotNodes::All => num_key_points,
            RobotNodes::EefOnly => 1,
        };
        let h = config.hidden;
        let mut rng = seed::rng(seed);
        let mut ps = ParamSet::new();
        fn lin(ps: &mut ParamSet, rng: &mut impl rand::Rng, name: &str, i: usize, o: usize) {
            ps.insert(format!("{name}.w"), Tensor::glorot(i, o, rng));
            ps.insert(format!("{name}.b"), Tensor::zeros(1, o));
        }
        let d_local = *config.sa_widths.last().expect("validated");
        for ty in [NodeType::Target, NodeType::Obstacle] {
            let mut i = 2;
            for (l, &o) in config.sa_widths.iter().enumerate() {
                lin(&mut ps, &mut rng, &format!("sa.{}.{l}", ty.tag()), i, o);
                i = o;
            }
            lin(&mut ps, &mut rng, &format!("enc.{}", ty.tag()), d_local, h);
        }
        lin(&mut ps, &mut rng, "enc.r", k, h);
        for l in 0..config.layers {
            for (s, d) in config.relations() {
                let pre = format!("gat{l}.{}{}", s.tag(), d.tag());
                for (n, r, c) in [("ws", h, h), ("wd", h, h), ("we", 2, h), ("vs", h, h), ("ve", 2, h)] {
                    ps.insert(format!("{pre}.{n}"), Tensor::glorot(r, c, &mut rng));
                }
                ps.insert(format!("{pre}.b"), Tensor::zeros(1, h));
                ps.insert(format!("{pre}.a"), Tensor::glorot(h, 1, &mut rng));
            }
            for ty in NodeType::ALL {
                lin(&mut ps, &mut rng, &format!("upd{l}.{}", ty.tag()), 2 * h, h);
            }
        }
        lin(&mut ps, &mut rng, "pool.gate", h, 1);
        lin(&mut ps, &mut rng, "pool.value", h, h);
        lin(&mut ps, &mut rng, "head.0", h, h);
        lin(&mut ps, &mut rng, "head.1", h, 1);
        Ok(AffordanceModel { config, params: ps })
    }

    pub fn num_robot_nodes(&self) -> usize {
        self.params.get("enc.r.w").map_or(0, Tensor::rows)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut ps = self.params.clone();
        ps.meta = Some(serde_json::json!({
            "model": "hgraph",
            "config": serde_json::to_value(&self.config)?,
        }));
        ps.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ps = ParamSet::load(path)?;
        Self::from_params(ps)
    }

    pub fn from_params(mut ps: ParamSet) -> Result<Self> {
        let meta = ps
            .meta
            .take()
            .ok_or_else(|| Error::MissingParameter("meta".into()))?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("hgraph") {
            return Err(Error::InvalidParameter("weight file is not an hgraph model".into()));
        }
        let config: HGraphConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::MissingParameter("config".into()))?,
        )?;
        config.validate()?;
        Ok(AffordanceModel { config, params: ps })
    }

    /// Parameter count per group (encoders, each relation, updates, readout).
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
        for (name, t) in &self.params.tensors {
            let parts: Vec<&str> = name.split('.').collect();
            let key = if parts[0].starts_with("gat") {
                format!("relation {}->{}", &parts[1][..1], &parts[1][1..])
            } else {
                parts[0].to_string()
            };
            *groups.entry(key).or_default() += t.len();
        }
        groups.into_iter().collect()
    }

    pub fn prepare(&self, obs: &LabeledPointCloud, arm: &ArmModel) -> Result<PreparedObservation> {
        prepare_observation(obs, arm.base, &self.config)
    }

    /// Base-frame robot node positions.
    pub fn robot_positions(&self, arm: &ArmModel, q: &[f64]) -> Result<Vec<Vec2>> {
        let kp = self.config.robot_arm(arm).key_points(q)?;
        if kp.positions.len() != self.num_robot_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_robot_nodes(),
                got: kp.positions.len(),
            });
        }
        Ok(kp.positions)
    }

    /// Stage one: coarsening, node encoders, scene-to-scene first-layer
    /// relations.
    pub fn encode_scenes(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        scenes: &[&PreparedObservation],
    ) -> Result<SceneEncoding> {
        let n_sa = self.config.sa_widths.len();
        let mut h0 = Vec::new();
        let mut pos = Vec::new();
        let mut offs = Vec::new();
        for (slot, ty) in [NodeType::Target, NodeType::Obstacle].into_iter().enumerate() {
            let groups: Vec<&Grouping> = scenes
                .iter()
                .map(|s| if slot == 0 { &s.target } else { &s.obstacles })
                .collect();
            if slot == 0 {
                if let Some(_) = groups.iter().find(|g| g.is_empty()) {
                    return Err(Error::EmptyTarget);
                }
            }
            let off = offsets_of(groups.iter().map(|g| g.len()));
            let mut offsets = Vec::new();
            let mut center_of = Vec::new();
            let mut centers = Vec::new();
            for (g, &o) in groups.iter().zip(&off) {
                offsets.extend_from_slice(&g.offsets);
                center_of.extend(g.center_of.iter().map(|c| c + o));
                centers.extend_from_slice(&g.centers);
            }
            let m = *off.last().expect("nonempty");
            let x = tape.constant(offsets_tensor(&offsets));
            let f = sa_forward(tape, p, ty, n_sa, x, &center_of, m)?;
            let e = dense(tape, p, &format!("enc.{}", ty.tag()), f)?;
            h0.push(tape.relu(e));
            pos.push(centers);
            offs.push(off);
        }
        let pos: [Vec<Vec2>; 2] = [pos[0].clone(), pos[1].clone()];
        let off: [Vec<usize>; 2] = [offs[0].clone(), offs[1].clone()];
        let pv = [
            tape.constant(positions_tensor(&pos[0])),
            tape.constant(positions_tensor(&pos[1])),
        ];
        let mut msg1 = Vec::new();
        for d in 0..2 {
            let nd = *off[d].last().expect("nonempty");
            let mut parts = Vec::new();
            for s in 0..2 {
                if s == d && !self.config.same_type_edges {
                    continue;
                }
                let (src, dst) = grouped_pairs(&off[s], &off[d], s == d);
                let prefix = format!("gat0.{}{}", NodeType::ALL[s].tag(), NodeType::ALL[d].tag());
                let agg = relation_forward(
                    tape,
                    p,
                    &prefix,
                    &RelationInput {
                        hs: h0[s],
                        ps: pv[s],
                        src_rows: &src,
                        hd: h0[d],
                        pd: pv[d],
                        dst_rows: &dst,
                        dst_seg: &dst,
                        n_dst: nd,
                    },
                )?;
                parts.push(agg);
            }
            let mut acc = parts[0];
            for &v in &parts[1..] {
                acc = tape.add(acc, v)?;
            }
            msg1.push(acc);
        }
        Ok(SceneEncoding {
            pos,
            off,
            h0: [h0[0], h0[1]],
            msg1: [msg1[0], msg1[1]],
        })
    }

    /// Stage two: logits (`B x 1`) for a batch of starts. `robot_pos` holds
    /// the base-frame robot node positions of all samples stacked (`B*K x 2`).
    pub fn forward_samples(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        enc: &SceneEncoding,
        samples: &[SampleRef],
        robot_pos: Var,
    ) -> Result<Var> {
        let b = samples.len();
        let k = self.num_robot_nodes();
        if tape.shape(robot_pos) != [b * k, 2] {
            return Err(Error::ShapeMismatch {
                op: "forward_samples",
                lhs: tape.shape(robot_pos).to_vec(),
                rhs: vec![b * k, 2],
            });
        }
        if let Some(s) = samples.iter().find(|s| s.scene >= enc.num_scenes()) {
            return Err(Error::DimensionMismatch {
                expected: enc.num_scenes(),
                got: s.scene,
            });
        }
        let h = self.config.hidden;
        // Per-sample copies of the scene nodes.
        let mut rows: [Vec<usize>; 3] = Default::default();
        let mut sample_of: [Vec<usize>; 3] = Default::default();
        for (i, s) in samples.iter().enumerate() {
            for slot in 0..2 {
                let (a, z) = (enc.off[slot][s.scene], enc.off[slot][s.scene + 1]);
                rows[slot].extend(a..z);
                sample_of[slot].extend(std::iter::repeat(i).take(z - a));
            }
            rows[2].extend(0..k);
            sample_of[2].extend(std::iter::repeat(i).take(k));
        }
        let off: Vec<Vec<usize>> = (0..3)
            .map(|t| {
                let mut o = vec![0; b + 1];
                for &i in &sample_of[t] {
                    o[i + 1] += 1;
                }
                for i in 0..b {
                    o[i + 1] += o[i];
                }
                o
            })
            .collect();
        let n: Vec<usize> = (0..3).map(|t| rows[t].len()).collect();

        // Robot encoder on one-hot ids.
        let eye = {
            let mut t = Tensor::zeros(k, k);
            for i in 0..k {
                t.data_mut()[i * k + i] = 1.0;
            }
            tape.constant(t)
        };
        let hr0 = dense(tape, p, "enc.r", eye)?;
        let hr0 = tape.relu(hr0);
        let hr0 = tape.gather_rows(hr0, &rows[2])?;

        let scene_pos = [
            tape.constant(positions_tensor(&enc.pos[0])),
            tape.constant(positions_tensor(&enc.pos[1])),
        ];

        // First layer: robot-involving relations, scene features from the encoding.
        let mut agg1: [Vec<Var>; 3] = Default::default();
        for (s, d) in self.config.relations() {
            let (si, di) = (s as usize, d as usize);
            if si != 2 && di != 2 {
                continue;
            }
            let (src, dst) = grouped_pairs(&off[si], &off[di], si == di);
            let src_rows: Vec<usize> = if si == 2 { src.clone() } else { src.iter().map(|&e| rows[si][e]).collect() };
            let dst_rows: Vec<usize> = if di == 2 { dst.clone() } else { dst.iter().map(|&e| rows[di][e]).collect() };
            let (hs, ps) = if si == 2 { (hr0, robot_pos) } else { (enc.h0[si], scene_pos[si]) };
            let (hd, pd) = if di == 2 { (hr0, robot_pos) } else { (enc.h0[di], scene_pos[di]) };
            let agg = relation_forward(
                tape,
                p,
                &format!("gat0.{}{}", s.tag(), d.tag()),
                &RelationInput {
                    hs,
                    ps,
                    src_rows: &src_rows,
                    hd,
                    pd,
                    dst_rows: &dst_rows,
                    dst_seg: &dst,
                    n_dst: n[di],
                },
            )?;
            agg1[di].push(agg);
        }
        let mut hcur: Vec<Var> = Vec::with_capacity(3);
        for t in 0..3 {
            let (prev, mut msg) = if t == 2 {
                let z = tape.constant(Tensor::zeros(n[2], h));
                (hr0, z)
            } else {
                let prev = tape.gather_rows(enc.h0[t], &rows[t])?;
                let m = tape.gather_rows(enc.msg1[t], &rows[t])?;
                (prev, m)
            };
            for &a in &agg1[t] {
                msg = tape.add(msg, a)?;
            }
            let cat = tape.concat_cols(&[prev, msg])?;
            let u = dense(tape, p, &format!("upd0.{}", NodeType::ALL[t].tag()), cat)?;
            hcur.push(tape.relu(u));
        }

        // Remaining layers on the per-sample copies.
        let copy_pos = [
            tape.gather_rows(scene_pos[0], &rows[0])?,
            tape.gather_rows(scene_pos[1], &rows[1])?,
            robot_pos,
        ];
        let pairs: Vec<((NodeType, NodeType), (Vec<usize>, Vec<usize>))> = self
            .config
            .relations()
            .into_iter()
            .map(|(s, d)| ((s, d), grouped_pairs(&off[s as usize], &off[d as usize], s == d)))
            .collect();
        for l in 1..self.config.layers {
            let mut msgs: [Vec<Var>; 3] = Default::default();
            for ((s, d), (src, dst)) in &pairs {
                let (si, di) = (*s as usize, *d as usize);
                let agg = relation_forward(
                    tape,
                    p,
                    &format!("gat{l}.{}{}", s.tag(), d.tag()),
                    &RelationInput {
                        hs: hcur[si],
                        ps: copy_pos[si],
                        src_rows: src,
                        hd: hcur[di],
                        pd: copy_pos[di],
                        dst_rows: dst,
                        dst_seg: dst,
                        n_dst: n[di],
                    },
                )?;
                msgs[di].push(agg);
            }
            let mut next = Vec::with_capacity(3);
            for t in 0..3 {
                let mut msg = match msgs[t].first() {
                    Some(&m) => m,
                    None => tape.constant(Tensor::zeros(n[t], h)),
                };
                for &a in msgs[t].iter().skip(1) {
                    msg = tape.add(msg, a)?;
                }
                let cat = tape.concat_cols(&[hcur[t], msg])?;
                let u = dense(tape, p, &format!("upd{l}.{}", NodeType::ALL[t].tag()), cat)?;
                next.push(tape.relu(u));
            }
            hcur = next;
        }

        let all = tape.concat_rows(&hcur)?;
        let seg: Vec<usize> = sample_of.iter().flatten().copied().collect();
        let pooled = global_attention_pool(tape, p, all, &seg, b)?;
        let z = dense(tape, p, "head.0", pooled)?;
        let z = tape.relu(z);
        dense(tape, p, "head.1", z)
    }

    /// Logits for several starts of one prepared observation.
    pub fn logits(
        &self,
        prepared: &PreparedObservation,
        arm: &ArmModel,
        qs: &[&[f64]],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let enc = self.encode_scenes(&mut tape, &p, &[prepared])?;
        let mut pos = Vec::new();
        for q in qs {
            pos.extend(self.robot_positions(arm, q)?);
        }
        let rp = tape.constant(positions_tensor(&pos));
        let samples = vec![SampleRef { scene: 0 }; qs.len()];
        let out = self.forward_samples(&mut tape, &p, &enc, &samples, rp)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Cached scene encoding for repeated evaluation.
    pub fn scene_cache(&self, prepared: &PreparedObservation) -> Result<SceneCache> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let enc = self.encode_scenes(&mut tape, &p, &[prepared])?;
        Ok(enc.detach(&tape))
    }

    /// Logit at `q` using a cached scene encoding.
    pub fn logit_cached(&self, cache: &SceneCache, arm: &ArmModel, q: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let enc = cache.attach(&mut tape);
        let rp = tape.constant(positions_tensor(&self.robot_positions(arm, q)?));
        let out = self.forward_samples(&mut tape, &p, &enc, &[SampleRef { scene: 0 }], rp)?;
        Ok(tape.value(out).item())
    }

    /// Logit and its gradient with respect to the joint angles, through the
    /// robot-node edge features and the key-point Jacobian.
    pub fn logit_grad_cached(
        &self,
        cache: &SceneCache,
        arm: &ArmModel,
        q: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let enc = cache.attach(&mut tape);
        let rp = tape.param(positions_tensor(&self.robot_positions(arm, q)?));
        let out = self.forward_samples(&mut tape, &p, &enc, &[SampleRef { scene: 0 }], rp)?;
        let logit = tape.value(out).item();
        let grads = tape.backward(out);
        let gp = grads
            .get(rp)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.num_robot_nodes(), 2));
        let jac = self.config.robot_arm(arm).key_point_jacobian(q)?;
        let mut gq = vec![0.0; q.len()];
        for (kk, jk) in jac.iter().enumerate() {
            let (gx, gy) = (gp.get(kk, 0), gp.get(kk, 1));
            for (j, d) in jk.iter().enumerate() {
                gq[j] += gx * d.x + gy * d.y;
            }
        }
        Ok((logit, gq))
    }
}

/// Logistic function kept strictly inside (0, 1) where f64 would round.
fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `(logit, sigmoid(logit))` of the model at `q`.
pub fn affordance_forward(
    model: &AffordanceModel,
    obs: &LabeledPointCloud,
    q: &[f64],
    arm: &ArmModel,
) -> Result<(f64, f64)> {
    let prepared = model.prepare(obs, arm)?;
    let l = model.logits(&prepared, arm, &[q])?[0];
    Ok((l, sigmoid(l)))
}

/// Gradient of the logit with respect to the joint angles.
pub fn affordance_grad_q(
    model: &AffordanceModel,
    obs: &LabeledPointCloud,
    q: &[f64],
    arm: &ArmModel,
) -> Result<Vec<f64>> {
    let prepared = model.prepare(obs, arm)?;
    let cache = model.scene_cache(&prepared)?;
    Ok(model.logit_grad_cached(&cache, arm, q)?.1)
}

/// Set abstraction of one cloud with trained weights.
pub fn set_abstraction(
    model: &AffordanceModel,
    ty: NodeType,
    points: &[Vec2],
) -> Result<CoarsePoints> {
    if ty == NodeType::Robot {
        return Err(Error::InvalidParameter("robot nodes are not coarsened".into()));
    }
    let g = group_points(points, &model.config);
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let x = tape.constant(offsets_tensor(&g.offsets));
    let f = sa_forward(&mut tape, &p, ty, model.config.sa_widths.len(), x, &g.center_of, g.len())?;
    Ok(CoarsePoints {
        centers: g.centers,
        features: tape.value(f).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, observe, EnvFamily, ObsConfig};
    use rand::Rng;

    fn model(seed: u64) -> AffordanceModel {
        AffordanceModel::init(HGraphConfig::default(), 5, seed).unwrap()
    }

    fn small_model(seed: u64) -> AffordanceModel {
        let cfg = HGraphConfig {
            hidden: 8,
            sa_widths: vec![4, 6],
            ..HGraphConfig::default()
        };
        AffordanceModel::init(cfg, 5, seed).unwrap()
    }

    fn obs(family: EnvFamily, seed: u64) -> LabeledPointCloud {
        let s = generate_scene(family, seed).unwrap();
        observe(&s, &ObsConfig::default(), seed).unwrap()
    }

    #[test]
    fn fps_picks_far_point_second() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(0.1, 0.0), Vec2::new(1.0, 0.0)];
        // Centroid is (0.3667, 0); nearest is (0.1, 0).
        let idx = farthest_point_sampling(&pts, 2);
        assert_eq!(idx, vec![1, 2]);
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(0.1, 0.0), Vec2::new(1.0, 0.0), Vec2::new(-0.05, 0.0)];
        let idx = farthest_point_sampling(&pts, 2);
        assert_eq!(idx, vec![1, 2]);
    }

    #[test]
    fn fps_two_cluster_fixture() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(0.1, 0.0), Vec2::new(1.0, 0.0)];
        let cfg = HGraphConfig {
            sa_ratio: 2.0 / 3.0,
            ..HGraphConfig::default()
        };
        let g = group_points(&pts, &cfg);
        assert_eq!(g.len(), 2);
        assert!(g.centers.contains(&Vec2::new(1.0, 0.0)));
    }

    #[test]
    fn center_count_rule() {
        assert_eq!(num_centers(128, 1.0 / 16.0), 8);
        assert_eq!(num_centers(3, 1.0 / 16.0), 1);
        assert_eq!(num_centers(0, 1.0 / 16.0), 0);
    }

    #[test]
    fn sa_max_pool_matches_hand_computation() {
        let m = small_model(3);
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(0.02, 0.01), Vec2::new(-0.01, 0.03)];
        let cfg = &m.config;
        let g = group_points(&pts, cfg);
        assert_eq!(g.len(), 1);
        let cp = set_abstraction(&m, NodeType::Target, &pts).unwrap();
        let layer = |x: &[f64], l: usize| -> Vec<f64> {
            let w = m.params.get(&format!("sa.t.{l}.w")).unwrap();
            let b = m.params.get(&format!("sa.t.{l}.b")).unwrap();
            (0..w.cols())
                .map(|c| {
                    let mut s = b.get(0, c);
                    for (r, xv) in x.iter().enumerate() {
                        s += xv * w.get(r, c);
                    }
                    s.max(0.0)
                })
                .collect()
        };
        let c = cp.centers[0];
        let mut expect = vec![f64::NEG_INFINITY; 6];
        for &p in &pts {
            let o = (p - c) * (1.0 / cfg.sa_radius);
            let h = layer(&layer(&[o.x, o.y], 0), 1);
            for (e, v) in expect.iter_mut().zip(h) {
                *e = e.max(v);
            }
        }
        for (a, b) in cp.features.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sa_translation_equivariance() {
        let m = small_model(4);
        let pts: Vec<Vec2> = (0..40)
            .map(|i| Vec2::from_angle(i as f64 * 0.3) * 0.05 + Vec2::new(0.5, 0.5))
            .collect();
        let t = Vec2::new(0.25, -0.125);
        let a = set_abstraction(&m, NodeType::Target, &pts).unwrap();
        let moved: Vec<Vec2> = pts.iter().map(|&p| p + t).collect();
        let b = set_abstraction(&m, NodeType::Target, &moved).unwrap();
        for (ca, cb) in a.centers.iter().zip(&b.centers) {
            assert!((*ca + t - *cb).norm() < 1e-12);
        }
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_edge_counts() {
        let cp = |n: usize| CoarsePoints {
            centers: (0..n).map(|i| Vec2::new(i as f64, 0.0)).collect(),
            features: Tensor::zeros(n, 3),
        };
        let arm = ArmModel::default();
        let mut kp = arm.key_points(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        kp.positions.truncate(4);
        kp.ids.truncate(4);
        let g = build_graph(&cp(2), &cp(3), &kp, true).unwrap();
        let rel = |s, d| g.edges.iter().find(|r| r.src_type == s && r.dst_type == d).unwrap();
        assert_eq!(rel(NodeType::Robot, NodeType::Target).src.len(), 8);
        assert_eq!(rel(NodeType::Obstacle, NodeType::Obstacle).src.len(), 6);
        assert_eq!(g.edges.len(), 9);
        for r in &g.edges {
            for ((&s, &d), &dl) in r.src.iter().zip(&r.dst).zip(&r.delta) {
                let expect = g.positions[r.src_type as usize][s] - g.positions[r.dst_type as usize][d];
                assert_eq!(dl, expect);
                if r.src_type == r.dst_type {
                    assert_ne!(s, d);
                }
            }
        }
        let g0 = build_graph(&cp(2), &cp(0), &kp, true).unwrap();
        for r in &g0.edges {
            if r.src_type == NodeType::Obstacle || r.dst_type == NodeType::Obstacle {
                assert!(r.src.is_empty());
            }
        }
        assert!(matches!(build_graph(&cp(0), &cp(1), &kp, true), Err(Error::EmptyTarget)));
        assert_eq!(build_graph(&cp(2), &cp(3), &kp, false).unwrap().edges.len(), 6);
    }

    #[test]
    fn edge_feature_definition() {
        let t = CoarsePoints {
            centers: vec![Vec2::new(0.0, 0.0)],
            features: Tensor::zeros(1, 1),
        };
        let o = CoarsePoints {
            centers: vec![Vec2::new(1.0, 2.0)],
            features: Tensor::zeros(1, 1),
        };
        let kp = crate::arm::KeyPointSet {
            positions: vec![],
            ids: vec![],
        };
        let g = build_graph(&t, &o, &kp, true).unwrap();
        let r = g
            .edges
            .iter()
            .find(|r| r.src_type == NodeType::Obstacle && r.dst_type == NodeType::Target)
            .unwrap();
        assert_eq!(r.delta, vec![Vec2::new(1.0, 2.0)]);
    }

    fn attention_fixture(h_src: Vec<f64>, n_src: usize) -> (Tape, Var, Var) {
        let m = small_model(5);
        let mut tape = Tape::new();
        let p = m.params.bind_frozen(&mut tape);
        let hs = tape.constant(Tensor::from_vec(n_src, 8, h_src).unwrap());
        let ps = tape.constant(Tensor::zeros(n_src, 2));
        let hd = tape.constant(Tensor::full(1, 8, 0.3));
        let pd = tape.constant(Tensor::zeros(1, 2));
        let src: Vec<usize> = (0..n_src).collect();
        let dst = vec![0; n_src];
        let (agg, alpha) = relation_forward_unfused(
            &mut tape,
            &p,
            "gat0.to",
            &RelationInput {
                hs,
                ps,
                src_rows: &src,
                hd,
                pd,
                dst_rows: &dst,
                dst_seg: &dst,
                n_dst: 1,
            },
        )
        .unwrap();
        (tape, agg, alpha)
    }

    #[test]
    fn attention_single_and_tied_edges() {
        let (t, _, a) = attention_fixture(vec![0.7; 8], 1);
        assert_eq!(t.value(a).data(), &[1.0]);
        let (t, _, a) = attention_fixture(vec![0.7; 16], 2);
        assert_eq!(t.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn attention_gradient_wrt_edge_features() {
        let m = small_model(6);
        let mut rng = seed::rng(2);
        let hs0 = Tensor::from_vec(3, 8, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ps0 = Tensor::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eval = |ps: &Tensor, grad: bool| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let p = m.params.bind_frozen(&mut tape);
            let hs = tape.constant(hs0.clone());
            let psv = if grad { tape.param(ps.clone()) } else { tape.constant(ps.clone()) };
            let src = [0, 1, 2, 0];
            let dst = [0, 0, 1, 1];
            let agg = relation_forward(
                &mut tape,
                &p,
                "gat1.ot",
                &RelationInput {
                    hs,
                    ps: psv,
                    src_rows: &src,
                    hd: hs,
                    pd: psv,
                    dst_rows: &dst,
                    dst_seg: &dst,
                    n_dst: 2,
                },
            )
            .unwrap();
            let sq = tape.square(agg);
            let out = tape.sum(sq);
            let v = tape.value(out).item();
            let g = grad.then(|| tape.backward(out).get(psv).unwrap().clone());
            (v, g)
        };
        let (_, g) = eval(&ps0, true);
        let g = g.unwrap();
        for i in 0..6 {
            let mut a = ps0.clone();
            let mut b = ps0.clone();
            a.data_mut()[i] += 1e-5;
            b.data_mut()[i] -= 1e-5;
            let fd = (eval(&a, false).0 - eval(&b, false).0) / 2e-5;
            let an = g.data()[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1.0) < 1e-4);
        }
    }

    #[test]
    fn fused_relation_matches_unfused() {
        let m = small_model(14);
        let mut rng = seed::rng(3);
        let mut r = |n: usize, c: usize| {
            Tensor::from_vec(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (hs0, hd0, ps0, pd0) = (r(4, 8), r(3, 8), r(4, 2), r(3, 2));
        let src = [0, 1, 2, 3, 0, 2, 1];
        let dst = [0, 0, 1, 1, 2, 2, 2];
        let seg = [1, 1, 0, 0, 2, 2, 2];
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape);
            let v = [
                tape.param(hs0.clone()),
                tape.param(hd0.clone()),
                tape.param(ps0.clone()),
                tape.param(pd0.clone()),
            ];
            let input = RelationInput {
                hs: v[0],
                ps: v[2],
                src_rows: &src,
                hd: v[1],
                pd: v[3],
                dst_rows: &dst,
                dst_seg: &seg,
                n_dst: 3,
            };
            let agg = if fused {
                relation_forward(&mut tape, &p, "gat0.or", &input).unwrap()
            } else {
                relation_forward_unfused(&mut tape, &p, "gat0.or", &input).unwrap().0
            };
            let t = tape.tanh(agg);
            let out = tape.sum(t);
            let mut g = tape.backward(out);
            let mut grads: Vec<Tensor> = v.iter().map(|&x| g.get(x).unwrap().clone()).collect();
            grads.extend(p.gradients(&tape, &mut g).into_values());
            (tape.value(agg).clone(), grads)
        };
        let (va, ga) = run(true);
        let (vb, gb) = run(false);
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(ga.len(), gb.len());
        for (ta, tb) in ga.iter().zip(&gb) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert!((x - y).abs() < 1e-11, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn pooling_properties() {
        let m = small_model(7);
        let mut rng = seed::rng(8);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pool = |rows: &[Vec<f64>]| -> Vec<f64> {
            let mut tape = Tape::new();
            let p = m.params.bind_frozen(&mut tape);
            let h = tape.constant(Tensor::from_rows(rows).unwrap());
            let seg = vec![0; rows.len()];
            let out = global_attention_pool(&mut tape, &p, h, &seg, 1).unwrap();
            tape.value(out).data().to_vec()
        };
        let single = pool(&rows[..1]);
        let gw = m.params.get("pool.gate.w").unwrap();
        let vw = m.params.get("pool.value.w").unwrap();
        let gate = sigmoid((0..8).map(|i| rows[0][i] * gw.get(i, 0)).sum::<f64>());
        for (c, s) in single.iter().enumerate() {
            let v: f64 = (0..8).map(|i| rows[0][i] * vw.get(i, c)).sum();
            assert!((s - gate * v).abs() < 1e-14);
        }
        let mut dup = rows.clone();
        dup.push(rows[2].clone());
        let base = pool(&rows);
        let with_dup = pool(&dup);
        let contrib = pool(&rows[2..3]);
        for c in 0..8 {
            assert!((with_dup[c] - base[c] - contrib[c]).abs() < 1e-12);
        }
        let mut perm = rows.clone();
        perm.reverse();
        perm.swap(1, 4);
        assert_eq!(pool(&perm), base);
    }

    #[test]
    fn score_in_unit_interval_and_deterministic() {
        let arm = ArmModel::default();
        let m = model(9);
        let o = obs(EnvFamily::F5, 3);
        let q = [1.2, -0.3, 0.4, -0.2];
        let (l1, s1) = affordance_forward(&m, &o, &q, &arm).unwrap();
        let (l2, _) = affordance_forward(&model(9), &o, &q, &arm).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(s1 > 0.0 && s1 < 1.0);
    }

    #[test]
    fn empty_obstacles_evaluate() {
        let arm = ArmModel::default();
        let m = model(10);
        let o = obs(EnvFamily::F1, 1);
        assert!(o.obstacle_points.is_empty());
        let (l, _) = affordance_forward(&m, &o, &[1.0, 0.2, 0.1, 0.0], &arm).unwrap();
        assert!(l.is_finite());
        let g = affordance_grad_q(&m, &o, &[1.0, 0.2, 0.1, 0.0], &arm).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batched_matches_single() {
        let arm = ArmModel::default();
        let m = model(11);
        let o1 = m.prepare(&obs(EnvFamily::F2, 1), &arm).unwrap();
        let o2 = m.prepare(&obs(EnvFamily::F6, 2), &arm).unwrap();
        let qa = [1.0, 0.3, -0.2, 0.1];
        let qb = [0.6, 0.9, 0.2, -0.5];
        let single = |pr: &PreparedObservation, q: &[f64]| m.logits(pr, &arm, &[q]).unwrap()[0];
        let mut tape = Tape::new();
        let p = m.params.bind_frozen(&mut tape);
        let enc = m.encode_scenes(&mut tape, &p, &[&o1, &o2]).unwrap();
        let mut pos = m.robot_positions(&arm, &qa).unwrap();
        pos.extend(m.robot_positions(&arm, &qb).unwrap());
        pos.extend(m.robot_positions(&arm, &qa).unwrap());
        let rp = tape.constant(positions_tensor(&pos));
        let out = m
            .forward_samples(&mut tape, &p, &enc, &[SampleRef { scene: 1 }, SampleRef { scene: 0 }, SampleRef { scene: 0 }], rp)
            .unwrap();
        let v = tape.value(out).data().to_vec();
        for (got, want) in v.iter().zip([single(&o2, &qa), single(&o1, &qb), single(&o1, &qa)]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn cached_path_matches_direct() {
        let arm = ArmModel::default();
        let m = model(12);
        let o = obs(EnvFamily::F4, 5);
        let q = [1.3, 0.2, -0.6, 0.4];
        let pr = m.prepare(&o, &arm).unwrap();
        let cache = m.scene_cache(&pr).unwrap();
        let a = m.logit_cached(&cache, &arm, &q).unwrap();
        let (b, _) = m.logit_grad_cached(&cache, &arm, &q).unwrap();
        let (c, _) = affordance_forward(&m, &o, &q, &arm).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn weights_round_trip_with_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let m = small_model(13);
        m.save(&path).unwrap();
        assert_eq!(AffordanceModel::load(&path).unwrap(), m);
    }

    #[test]
    fn eef_only_shares_parameter_names() {
        let full = model(1);
        let eef = AffordanceModel::init(
            HGraphConfig {
                robot_nodes: RobotNodes::EefOnly,
                ..HGraphConfig::default()
            },
            5,
            1,
        )
        .unwrap();
        let a: Vec<&str> = full.params.names().collect();
        let b: Vec<&str> = eef.params.names().collect();
        assert_eq!(a, b);
        assert_eq!(eef.num_robot_nodes(), 1);
        assert_eq!(eef.params.get("enc.r.w").unwrap().shape(), [1, 64]);
    }
}
