//! Single-layer unidirectional LSTM that reads a word sequence and returns
//! its final hidden state.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::io::EmbeddingTable;

const GATES: [&str; 4] = ["input", "forget", "cell", "output"];

/// Parameter handles for one encoder. Each gate has a weight matrix over
/// the concatenated `[x; h_prev]` and a bias.
#[derive(Clone, Debug)]
pub struct SeqEncoder {
    pub input_dim: usize,
    pub hidden: usize,
    weights: [ParamId; 4],
    biases: [ParamId; 4],
}

impl SeqEncoder {
    /// Registers Glorot-initialised gate weights, zero biases and a forget
    /// bias of 1.
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for gate in GATES {
            weights.push(store.insert_glorot(
                &format!("{prefix}.w_{gate}"),
                hidden,
                input_dim + hidden,
                rng,
            )?);
            let fill = if gate == "forget" { 1.0 } else { 0.0 };
            biases
                .push(store.insert(&format!("{prefix}.b_{gate}"), Tensor::full(&[hidden], fill))?);
        }
        Ok(SeqEncoder {
            input_dim,
            hidden,
            weights: weights.try_into().unwrap(),
            biases: biases.try_into().unwrap(),
        })
    }

    /// Looks up existing parameters by prefix.
    pub fn bind(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for gate in GATES {
            weights.push(store.require(&format!("{prefix}.w_{gate}"))?);
            biases.push(store.require(&format!("{prefix}.b_{gate}"))?);
        }
        let w = store.value(weights[0]);
        let hidden = w.rows();
        Ok(SeqEncoder {
            input_dim: w.cols() - hidden,
            hidden,
            weights: weights.try_into().unwrap(),
            biases: biases.try_into().unwrap(),
        })
    }

    /// Records the encoder over a sequence of input vectors. An empty
    /// sequence yields the zero vector.
    pub fn encode(&self, g: &mut Graph<'_>, inputs: &[Var]) -> Result<Var> {
        let mut h = g.input(Tensor::zeros(&[self.hidden]))?;
        let mut c = h;
        if inputs.is_empty() {
            return Ok(h);
        }
        let w: Vec<Var> = self.weights.iter().map(|&id| g.param(id)).collect();
        let b: Vec<Var> = self.biases.iter().map(|&id| g.param(id)).collect();
        for (t, &x) in inputs.iter().enumerate() {
            let z = g.concat(&[x, h])?;
            let mut pre = [h; 4];
            for k in 0..4 {
                let wz = g.matmul(w[k], z)?;
                pre[k] = g.add(wz, b[k])?;
            }
            let i_gate = g.sigmoid(pre[0])?;
            let f_gate = g.sigmoid(pre[1])?;
            let cand = g.tanh(pre[2])?;
            let o_gate = g.sigmoid(pre[3])?;
            let ig = g.mul(i_gate, cand)?;
            c = if t == 0 {
                // c_prev is zero
                ig
            } else {
                let fc = g.mul(f_gate, c)?;
                g.add(fc, ig)?
            };
            let tc = g.tanh(c)?;
            h = g.mul(o_gate, tc)?;
        }
        Ok(h)
    }

    /// Embeds `words` through `table` and records the encoder.
    pub fn encode_words<S: AsRef<str>>(
        &self,
        g: &mut Graph<'_>,
        words: &[S],
        table: &EmbeddingTable,
    ) -> Result<Var> {
        let inputs = words
            .iter()
            .map(|w| g.input(Tensor::vector(table.lookup(w.as_ref()).to_vec())))
            .collect::<Result<Vec<_>>>()?;
        self.encode(g, &inputs)
    }
}

/// Final hidden state for a word sequence, evaluated without recording
/// gradients for later use.
pub fn encode_sequence<S: AsRef<str>>(
    store: &ParameterStore,
    encoder: &SeqEncoder,
    words: &[S],
    table: &EmbeddingTable,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let h = encoder.encode_words(&mut g, words, table)?;
    Ok(g.value(h).data().to_vec())
}
