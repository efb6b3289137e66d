//! Groups OCR word tokens into phrase clusters by spatial proximity.
//!
//! Two tokens are adjacent when their envelopes, each inflated by
//! `pad_factor * median token height`, intersect. Clusters are the
//! connected components of that relation. Inside a cluster the words are
//! split into lines by vertical center and read top to bottom, left to
//! right.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{Envelope, TokenCluster, WordToken};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Fraction of the median token height added on every side.
    pub pad_factor: f64,
    pub max_clusters: usize,
    /// Tokens share a line when their vertical centers differ by less than
    /// this fraction of the median height.
    pub line_factor: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            pad_factor: 0.5,
            max_clusters: 16,
            line_factor: 0.6,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pad_factor >= 0.0 && self.pad_factor.is_finite()) {
            return Err(Error::Config(format!(
                "cluster.pad_factor must be >= 0, got {}",
                self.pad_factor
            )));
        }
        if self.max_clusters == 0 {
            return Err(Error::Config("cluster.max_clusters must be >= 1".into()));
        }
        if !(self.line_factor > 0.0) {
            return Err(Error::Config("cluster.line_factor must be > 0".into()));
        }
        Ok(())
    }
}

/// Whether two tokens' envelopes, inflated by `pad` on all sides, intersect.
pub fn adjacency(a: &WordToken, b: &WordToken, pad: f64) -> bool {
    envelopes_adjacent(
        &a.bbox.envelope_unchecked(),
        &b.bbox.envelope_unchecked(),
        pad,
    )
}

pub(crate) fn envelopes_adjacent(a: &Envelope, b: &Envelope, pad: f64) -> bool {
    a.inflate(pad).intersects(&b.inflate(pad))
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median envelope height of a token list.
pub fn median_height(tokens: &[WordToken]) -> f64 {
    let mut h: Vec<f64> = tokens
        .iter()
        .map(|t| t.bbox.envelope_unchecked().height())
        .collect();
    median(&mut h)
}

/// Padding used for the adjacency test on this token list.
pub fn pad_for(tokens: &[WordToken], config: &ClusterConfig) -> f64 {
    config.pad_factor * median_height(tokens)
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the adjacency relation, before line ordering
/// and capping. Each component is a sorted list of token indices; the
/// components are sorted by their smallest index.
pub fn components(tokens: &[WordToken], pad: f64) -> Vec<Vec<usize>> {
    let n = tokens.len();
    let inflated: Vec<Envelope> = tokens
        .iter()
        .map(|t| t.bbox.envelope_unchecked().inflate(pad))
        .collect();

    // Sweep along x: only tokens whose inflated x-ranges overlap can touch.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| inflated[a].min_x.total_cmp(&inflated[b].min_x));

    let mut uf = UnionFind::new(n);
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if inflated[j].min_x > inflated[i].max_x {
                break;
            }
            if inflated[i].intersects(&inflated[j]) {
                uf.union(i, j);
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = uf.find(i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

fn group_envelope(tokens: &[WordToken], members: &[usize]) -> Envelope {
    members
        .iter()
        .map(|&i| tokens[i].bbox.envelope_unchecked())
        .reduce(|a, b| a.union(&b))
        .expect("non-empty group")
}

fn cmp_envelope(a: &Envelope, b: &Envelope) -> Ordering {
    a.min_y
        .total_cmp(&b.min_y)
        .then(a.min_x.total_cmp(&b.min_x))
        .then(a.max_y.total_cmp(&b.max_y))
        .then(a.max_x.total_cmp(&b.max_x))
}

/// Merges the smallest-area groups into their nearest neighbour until at
/// most `max` groups remain.
fn cap_groups(tokens: &[WordToken], mut groups: Vec<Vec<usize>>, max: usize) -> Vec<Vec<usize>> {
    while groups.len() > max {
        let envs: Vec<Envelope> = groups.iter().map(|g| group_envelope(tokens, g)).collect();
        let smallest = (0..groups.len())
            .min_by(|&a, &b| {
                envs[a]
                    .area()
                    .total_cmp(&envs[b].area())
                    .then(cmp_envelope(&envs[a], &envs[b]))
            })
            .unwrap();
        let nearest = (0..groups.len())
            .filter(|&j| j != smallest)
            .min_by(|&a, &b| {
                envs[smallest]
                    .gap_sq(&envs[a])
                    .total_cmp(&envs[smallest].gap_sq(&envs[b]))
                    .then(cmp_envelope(&envs[a], &envs[b]))
            })
            .unwrap();
        let moved = groups.swap_remove(smallest);
        // swap_remove may have relocated `nearest`.
        let target = if nearest == groups.len() {
            smallest
        } else {
            nearest
        };
        groups[target].extend(moved);
    }
    groups
}

/// Orders a group's tokens into reading order.
fn reading_order(tokens: &[WordToken], members: &[usize], line_tol: f64) -> Vec<usize> {
    let env = |i: usize| tokens[i].bbox.envelope_unchecked();
    let key_cmp = |a: &usize, b: &usize| {
        let (ea, eb) = (env(*a), env(*b));
        ea.center()
            .1
            .total_cmp(&eb.center().1)
            .then(ea.min_x.total_cmp(&eb.min_x))
            .then(tokens[*a].word.cmp(&tokens[*b].word))
            .then(cmp_envelope(&ea, &eb))
    };
    let mut by_y = members.to_vec();
    by_y.sort_by(key_cmp);

    let mut lines: Vec<Vec<usize>> = Vec::new();
    let mut anchor = f64::NEG_INFINITY;
    for i in by_y {
        let cy = env(i).center().1;
        match lines.last_mut() {
            Some(line) if cy - anchor < line_tol => line.push(i),
            _ => {
                anchor = cy;
                lines.push(vec![i]);
            }
        }
    }
    let mut out = Vec::with_capacity(members.len());
    for mut line in lines {
        line.sort_by(|a, b| {
            let (ea, eb) = (env(*a), env(*b));
            ea.min_x
                .total_cmp(&eb.min_x)
                .then(ea.center().1.total_cmp(&eb.center().1))
                .then(tokens[*a].word.cmp(&tokens[*b].word))
                .then(cmp_envelope(&ea, &eb))
        });
        out.extend(line);
    }
    out
}

/// Clusters word tokens into phrases. Clusters are returned in reading
/// order of their envelopes (top to bottom, then left to right).
pub fn cluster_tokens(tokens: &[WordToken], config: &ClusterConfig) -> Vec<TokenCluster> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let med_h = median_height(tokens);
    let groups = components(tokens, config.pad_factor * med_h);
    let groups = cap_groups(tokens, groups, config.max_clusters.max(1));

    let line_tol = config.line_factor * med_h;
    let mut clusters: Vec<(Envelope, TokenCluster)> = groups
        .into_iter()
        .map(|g| {
            let ordered = reading_order(tokens, &g, line_tol);
            let env = group_envelope(tokens, &ordered);
            let cluster = TokenCluster {
                phrase: ordered.iter().map(|&i| tokens[i].word.clone()).collect(),
                bbox: env.to_box(),
                member_indices: ordered,
            };
            (env, cluster)
        })
        .collect();
    clusters.sort_by(|(ea, ca), (eb, cb)| cmp_envelope(ea, eb).then(ca.phrase.cmp(&cb.phrase)));
    clusters.into_iter().map(|(_, c)| c).collect()
}
