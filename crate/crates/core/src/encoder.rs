//! Bidirectional GRU encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams, ParamId};
use crate::tensor::{GruWeights, Tape, Var};

/// Parameter ids of one GRU cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn new(params: &mut ModelParams, name: &str, d_in: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            w_input: params.uniform(&format!("{name}.w_input"), vec![d_in, 3 * hidden], scale, rng),
            w_hidden: params.uniform(&format!("{name}.w_hidden"), vec![hidden, 3 * hidden], scale, rng),
            b_input: params.filled(&format!("{name}.b_input"), vec![3 * hidden], 0.0),
            b_hidden: params.filled(&format!("{name}.b_hidden"), vec![3 * hidden], 0.0),
            hidden,
        }
    }

    pub fn bind(&self, bound: &Bound) -> GruWeights {
        GruWeights {
            w_input: bound[self.w_input],
            w_hidden: bound[self.w_hidden],
            b_input: bound[self.b_input],
            b_hidden: bound[self.b_hidden],
        }
    }
}

/// Per-position encoder states. Masked positions hold zeros.
#[derive(Clone, Debug)]
pub struct EncodedSeq {
    /// `[l × width]`
    pub states: Var,
    pub mask: Vec<bool>,
    /// Final forward state joined with the final backward state, `[1 × width]`.
    pub last: Var,
}

impl EncodedSeq {
    /// Treats a `[1 × d]` vector as a length-1 sequence.
    pub fn from_vector(v: Var) -> Self {
        Self { states: v, mask: vec![true], last: v }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Forward and backward GRU cells; initial states are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiGruEncoder {
    pub forward: GruParams,
    pub backward: GruParams,
}

impl BiGruEncoder {
    pub fn new(params: &mut ModelParams, name: &str, d_in: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            forward: GruParams::new(params, &format!("{name}.fwd"), d_in, hidden, scale, rng),
            backward: GruParams::new(params, &format!("{name}.bwd"), d_in, hidden, scale, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    /// Output width per position: both directions concatenated.
    pub fn width(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Encodes the unmasked positions of `ids`, looking tokens up in `table`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        table: Var,
        ids: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<EncodedSeq> {
        let mask: Vec<bool> = match mask {
            Some(m) if m.len() != ids.len() => {
                return Err(Error::Dimension { op: "encode", left: vec![ids.len()], right: vec![m.len()] })
            }
            Some(m) => m.to_vec(),
            None => vec![true; ids.len()],
        };
        let valid: Vec<usize> = ids.iter().zip(&mask).filter(|(_, &m)| m).map(|(&id, _)| id).collect();
        if valid.is_empty() {
            return Err(Error::contract("encode needs a non-empty sequence"));
        }
        let hidden = self.hidden();
        let embedded = tape.embedding(table, &valid)?;
        let n = valid.len();
        let run = |tape: &mut Tape, cell: &GruParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var>>> {
            let w = cell.bind(bound);
            let mut h = tape.zeros(vec![1, hidden])?;
            let mut out = vec![None; n];
            for t in order {
                let x = tape.row(embedded, t)?;
                h = tape.gru_cell(x, h, w)?;
                out[t] = Some(h);
            }
            Ok(out)
        };
        let fwd = run(tape, &self.forward, &mut (0..n))?;
        let bwd = run(tape, &self.backward, &mut (0..n).rev())?;
        let mut rows = Vec::with_capacity(ids.len());
        let mut k = 0;
        let mut zero_row = None;
        for &m in &mask {
            if m {
                let row = tape.concat(&[fwd[k].unwrap(), bwd[k].unwrap()], 1)?;
                rows.push(row);
                k += 1;
            } else {
                let z = match zero_row {
                    Some(z) => z,
                    None => *zero_row.insert(tape.zeros(vec![1, 2 * hidden])?),
                };
                rows.push(z);
            }
        }
        let states = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let last = tape.concat(&[fwd[n - 1].unwrap(), bwd[0].unwrap()], 1)?;
        Ok(EncodedSeq { states, mask, last })
    }
}
