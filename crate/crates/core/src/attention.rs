//! Co-attention between visual objects and caption token clusters.
//!
//! Both sides are position-augmented (feature followed by the 8 normalized
//! box coordinates) before scoring. A bilinear affinity couples every
//! cluster with every object, each side's attention map mixes in the other
//! side through that affinity, and the attended outputs pool the
//! *unaugmented* features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParameterStore, Tensor, Var};

/// Normalized box coordinates appended to every feature.
pub const POSITION_DIM: usize = 8;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// Augmented width `d + 8`.
    pub dim: usize,
    /// Bilinear affinity map, `dim x dim`.
    pub w: ParamId,
    pub w_v: ParamId,
    pub w_c: ParamId,
    /// Scoring vectors, stored as `1 x dim` rows.
    pub score_v: ParamId,
    pub score_c: ParamId,
}

const NAMES: [&str; 5] = ["w_affinity", "w_v", "w_c", "score_v", "score_c"];

impl AttentionParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dim = d + POSITION_DIM;
        let mut ids = Vec::with_capacity(5);
        for name in NAMES {
            let rows = if name.starts_with("score") { 1 } else { dim };
            ids.push(store.insert_glorot(&format!("{prefix}.{name}"), rows, dim, rng)?);
        }
        Ok(Self::from_ids(dim, &ids))
    }

    pub fn bind(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let ids = NAMES
            .iter()
            .map(|n| store.require(&format!("{prefix}.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let dim = store.value(ids[0]).rows();
        let params = Self::from_ids(dim, &ids);
        for (id, rows) in [
            (params.w_v, dim),
            (params.w_c, dim),
            (params.score_v, 1),
            (params.score_c, 1),
        ] {
            if store.value(id).shape() != [rows, dim] {
                return Err(Error::Shape {
                    op: "attention.bind",
                    left: vec![rows, dim],
                    right: store.value(id).shape().to_vec(),
                });
            }
        }
        Ok(params)
    }

    fn from_ids(dim: usize, ids: &[ParamId]) -> Self {
        AttentionParams {
            dim,
            w: ids[0],
            w_v: ids[1],
            w_c: ids[2],
            score_v: ids[3],
            score_c: ids[4],
        }
    }
}

/// Stacks `features[k] ++ positions[k]` as the columns of a
/// `(d + 8) x n` matrix.
pub fn augment_with_position(
    features: &[Vec<f64>],
    positions: &[[f64; POSITION_DIM]],
) -> Result<Tensor> {
    let n = features.len();
    if positions.len() != n {
        return Err(Error::Shape {
            op: "augment_with_position",
            left: vec![n],
            right: vec![positions.len()],
        });
    }
    let d = features.first().map_or(0, Vec::len);
    let rows = d + POSITION_DIM;
    let mut data = vec![0.0; rows * n];
    for (k, (f, p)) in features.iter().zip(positions).enumerate() {
        if f.len() != d {
            return Err(Error::Shape {
                op: "augment_with_position",
                left: vec![d],
                right: vec![f.len()],
            });
        }
        for (r, &x) in f.iter().chain(p).enumerate() {
            data[r * n + k] = x;
        }
    }
    Tensor::matrix(rows, n, data)
}

/// Normalized positions for a list of boxes on one image.
pub fn positions(
    boxes: &[&BoundingBox],
    image_size: (f64, f64),
) -> Result<Vec<[f64; POSITION_DIM]>> {
    boxes
        .iter()
        .map(|b| b.normalize(image_size.0, image_size.1))
        .collect()
}

/// `tanh(C^T W V)` for augmented `C` (`dim x S`) and `V` (`dim x K`).
pub fn affinity(c: &Tensor, v: &Tensor, w: &Tensor) -> Result<Tensor> {
    use crate::nn::ops;
    let ct = ops::transpose(c);
    let e = ops::matmul(&ops::matmul(&ct, w)?, v)?;
    Ok(ops::tanh_map(&e))
}

/// One side of the alignment inside a graph: unaugmented feature columns
/// plus their normalized positions.
#[derive(Clone, Debug)]
pub struct SideVars<'a> {
    pub features: &'a [Var],
    pub positions: &'a [[f64; POSITION_DIM]],
}

#[derive(Clone, Copy, Debug)]
pub struct AttendVars {
    pub f_v: Var,
    pub f_c: Var,
    /// `1 x K`, absent when there are no objects.
    pub alpha_v: Option<Var>,
    /// `1 x S`, absent when there are no clusters.
    pub alpha_c: Option<Var>,
    /// `S x K`, absent unless both sides are non-empty.
    pub affinity: Option<Var>,
}

/// Records the co-attention in `g`. An empty side pools to the zero
/// vector of width `d`; the other side then attends on its own features
/// alone.
pub fn co_attend_vars(
    g: &mut Graph<'_>,
    params: &AttentionParams,
    d: usize,
    objects: SideVars<'_>,
    clusters: SideVars<'_>,
) -> Result<AttendVars> {
    co_attend_impl(g, params, d, objects, clusters, false)
}

pub(crate) fn co_attend_impl(
    g: &mut Graph<'_>,
    params: &AttentionParams,
    d: usize,
    objects: SideVars<'_>,
    clusters: SideVars<'_>,
    detach_alpha: bool,
) -> Result<AttendVars> {
    if params.dim != d + POSITION_DIM {
        return Err(Error::Shape {
            op: "co_attend",
            left: vec![params.dim],
            right: vec![d + POSITION_DIM],
        });
    }
    let side = |g: &mut Graph<'_>, s: &SideVars<'_>| -> Result<Option<(Var, Var)>> {
        if s.features.is_empty() {
            return Ok(None);
        }
        let raw = g.stack_cols(s.features)?;
        if g.value(raw).rows() != d {
            return Err(Error::Shape {
                op: "co_attend",
                left: vec![d],
                right: vec![g.value(raw).rows()],
            });
        }
        let n = s.features.len();
        if s.positions.len() != n {
            return Err(Error::Shape {
                op: "co_attend",
                left: vec![n],
                right: vec![s.positions.len()],
            });
        }
        let mut data = vec![0.0; POSITION_DIM * n];
        for (k, p) in s.positions.iter().enumerate() {
            for (r, &x) in p.iter().enumerate() {
                data[r * n + k] = x;
            }
        }
        let pos = g.input(Tensor::matrix(POSITION_DIM, n, data)?)?;
        let aug = g.concat(&[raw, pos])?;
        Ok(Some((raw, aug)))
    };
    let v = side(g, &objects)?;
    let c = side(g, &clusters)?;

    let w_v = g.param(params.w_v);
    let w_c = g.param(params.w_c);
    let wv_v = v.map(|(_, aug)| g.matmul(w_v, aug)).transpose()?;
    let wc_c = c.map(|(_, aug)| g.matmul(w_c, aug)).transpose()?;

    let e = match (v, c) {
        (Some((_, va)), Some((_, ca))) => {
            let w = g.param(params.w);
            let ct = g.transpose(ca)?;
            let ctw = g.matmul(ct, w)?;
            let pre = g.matmul(ctw, va)?;
            Some(g.tanh(pre)?)
        }
        _ => None,
    };

    let pool = |g: &mut Graph<'_>,
                raw_aug: Option<(Var, Var)>,
                own: Option<Var>,
                cross: Option<Var>,
                score: ParamId|
     -> Result<(Var, Option<Var>)> {
        let Some((raw, _)) = raw_aug else {
            return Ok((g.input(Tensor::zeros(&[d]))?, None));
        };
        let own = own.expect("own projection exists for a non-empty side");
        let pre = match cross {
            Some(x) => g.add(own, x)?,
            None => own,
        };
        let m = g.tanh(pre)?;
        let s = g.param(score);
        let scores = g.matmul(s, m)?;
        let alpha = g.softmax(scores)?;
        let weights = if detach_alpha {
            g.detach(alpha)?
        } else {
            alpha
        };
        let n = g.value(weights).len();
        let weights = g.reshape(weights, &[n])?;
        Ok((g.matmul(raw, weights)?, Some(alpha)))
    };

    // (W_c C) E and (W_v V) E^T
    let (cross_v, cross_c) = match (e, wv_v, wc_c) {
        (Some(e), Some(wvv), Some(wcc)) => {
            let et = g.transpose(e)?;
            (Some(g.matmul(wcc, e)?), Some(g.matmul(wvv, et)?))
        }
        _ => (None, None),
    };
    let (f_v, alpha_v) = pool(g, v, wv_v, cross_v, params.score_v)?;
    let (f_c, alpha_c) = pool(g, c, wc_c, cross_c, params.score_c)?;
    Ok(AttendVars {
        f_v,
        f_c,
        alpha_v,
        alpha_c,
        affinity: e,
    })
}

/// Materialised attention for one post; also the JSON debug dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub f_v: Vec<f64>,
    pub f_c: Vec<f64>,
    pub alpha_v: Vec<f64>,
    pub alpha_c: Vec<f64>,
    /// Rows are clusters, columns are objects.
    pub affinity: Vec<Vec<f64>>,
}

impl AttentionOutput {
    pub(crate) fn from_vars(g: &Graph<'_>, vars: &AttendVars) -> Self {
        let flat = |v: Option<Var>| v.map_or_else(Vec::new, |v| g.value(v).data().to_vec());
        let affinity = vars.affinity.map_or_else(Vec::new, |e| {
            let t = g.value(e);
            t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
        });
        AttentionOutput {
            f_v: g.value(vars.f_v).data().to_vec(),
            f_c: g.value(vars.f_c).data().to_vec(),
            alpha_v: flat(vars.alpha_v),
            alpha_c: flat(vars.alpha_c),
            affinity,
        }
    }
}

/// Evaluates the co-attention on plain vectors: `objects` and `clusters`
/// are `d`-dimensional features with their normalized positions.
pub fn co_attend(
    store: &ParameterStore,
    params: &AttentionParams,
    d: usize,
    objects: (&[Vec<f64>], &[[f64; POSITION_DIM]]),
    clusters: (&[Vec<f64>], &[[f64; POSITION_DIM]]),
) -> Result<AttentionOutput> {
    let mut g = Graph::new(store);
    let inputs = |g: &mut Graph<'_>, xs: &[Vec<f64>]| -> Result<Vec<Var>> {
        xs.iter()
            .map(|x| g.input(Tensor::vector(x.clone())))
            .collect()
    };
    let ov = inputs(&mut g, objects.0)?;
    let cv = inputs(&mut g, clusters.0)?;
    let vars = co_attend_vars(
        &mut g,
        params,
        d,
        SideVars {
            features: &ov,
            positions: objects.1,
        },
        SideVars {
            features: &cv,
            positions: clusters.1,
        },
    )?;
    Ok(AttentionOutput::from_vars(&g, &vars))
}
