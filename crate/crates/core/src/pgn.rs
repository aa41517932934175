//! Multi-layer bidirectional LSTM whose weights are either owned directly
//! (basic mode) or generated per language as `W_PGN · e_lang` (pgn mode).
//!
//! Flattened layout, frozen across versions: for each layer, the forward
//! direction then the backward direction, each as `wx` (`in × 4H`), `wh`
//! (`H × 4H`), `b` (`4H`), all row-major. Gate columns are ordered input,
//! forget, output, cell.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xsrl_tensor::{Axis, ParamId, Params, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Fwd,
    Bwd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Wx,
    Wh,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub layer: usize,
    pub dir: Direction,
    pub kind: BlockKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> String {
        let dir = match self.dir {
            Direction::Fwd => "fwd",
            Direction::Bwd => "bwd",
        };
        let kind = match self.kind {
            BlockKind::Wx => "wx",
            BlockKind::Wh => "wh",
            BlockKind::B => "b",
        };
        format!("l{}.{dir}.{kind}", self.layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiLstmLayout {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl BiLstmLayout {
    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            2 * self.hidden
        }
    }

    pub fn blocks(&self) -> Vec<Block> {
        let g = 4 * self.hidden;
        let mut out = Vec::with_capacity(6 * self.layers);
        let mut offset = 0;
        for layer in 0..self.layers {
            for dir in [Direction::Fwd, Direction::Bwd] {
                for (kind, rows) in [
                    (BlockKind::Wx, self.layer_input(layer)),
                    (BlockKind::Wh, self.hidden),
                    (BlockKind::B, 1),
                ] {
                    out.push(Block {
                        layer,
                        dir,
                        kind,
                        offset,
                        rows,
                        cols: g,
                    });
                    offset += rows * g;
                }
            }
        }
        out
    }

    /// Total flattened parameter count.
    pub fn len(&self) -> usize {
        self.blocks().iter().map(Block::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Initial value of one block: Glorot for weights, zero biases with
    /// the forget-gate slice set to `forget_bias`.
    fn init_block<R: Rng>(&self, b: &Block, forget_bias: f64, rng: &mut R) -> Tensor {
        match b.kind {
            BlockKind::B => {
                let h = self.hidden;
                let mut v = vec![0.0; 4 * h];
                v[h..2 * h].fill(forget_bias);
                Tensor::new(vec![1, 4 * h], v).expect("bias shape")
            }
            _ => Tensor::glorot(b.rows, b.cols, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    #[default]
    Pgn,
    Basic,
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgn" => Ok(Self::Pgn),
            "basic" => Ok(Self::Basic),
            other => Err(Error::Config(format!("unknown encoder `{other}` (expected pgn or basic)"))),
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pgn => "pgn",
            Self::Basic => "basic",
        })
    }
}

/// Which language vector drives generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LangSel {
    Id(usize),
    /// Mean of all trained language vectors, for languages unseen in training.
    Mean,
}

#[derive(Clone, Debug)]
pub enum EncoderParams {
    Pgn {
        w: ParamId,
        e: ParamId,
        languages: usize,
        lang_dim: usize,
    },
    Basic {
        blocks: Vec<ParamId>,
    },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layout: BiLstmLayout,
    pub params: EncoderParams,
}

impl Encoder {
    /// Generated mode. Language rows start at `c + U(-0.1, 0.1)` with
    /// `c = 1/sqrt(d_L)`; forget-bias rows of `W_PGN` are `c` so the
    /// generated forget bias starts near 1.
    pub fn new_pgn<R: Rng>(
        params: &mut Params,
        layout: BiLstmLayout,
        languages: usize,
        lang_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if languages == 0 || lang_dim == 0 {
            return Err(Error::Config("pgn encoder needs at least one language and d_L > 0".into()));
        }
        let c = 1.0 / (lang_dim as f64).sqrt();
        let e: Vec<f64> = (0..languages * lang_dim)
            .map(|_| c + rng.gen_range(-0.1..0.1))
            .collect();
        let h = layout.hidden;
        let mut w = Vec::with_capacity(layout.len() * lang_dim);
        for b in layout.blocks() {
            match b.kind {
                BlockKind::B => {
                    for k in 0..b.len() {
                        let v = if (h..2 * h).contains(&k) { c } else { 0.0 };
                        w.extend(std::iter::repeat_n(v, lang_dim));
                    }
                }
                _ => {
                    let bound = (6.0 / (b.rows + b.cols) as f64).sqrt();
                    w.extend((0..b.len() * lang_dim).map(|_| rng.gen_range(-bound..bound)));
                }
            }
        }
        let w = params.add("enc.pgn.W", Tensor::new(vec![layout.len(), lang_dim], w)?)?;
        let e = params.add("enc.lang.E", Tensor::new(vec![languages, lang_dim], e)?)?;
        Ok(Self {
            layout,
            params: EncoderParams::Pgn {
                w,
                e,
                languages,
                lang_dim,
            },
        })
    }

    /// Directly owned weights with forget bias 1.
    pub fn new_basic<R: Rng>(params: &mut Params, layout: BiLstmLayout, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::new();
        for b in layout.blocks() {
            let t = layout.init_block(&b, 1.0, rng);
            blocks.push(params.add(format!("enc.basic.{}", b.name()), t)?);
        }
        Ok(Self {
            layout,
            params: EncoderParams::Basic { blocks },
        })
    }

    pub fn mode(&self) -> EncoderMode {
        match self.params {
            EncoderParams::Pgn { .. } => EncoderMode::Pgn,
            EncoderParams::Basic { .. } => EncoderMode::Basic,
        }
    }

    /// `V = W_PGN · e_lang` as a `|V| × 1` column.
    pub fn generate_params(&self, tape: &mut Tape<'_>, lang: LangSel) -> Result<Var> {
        let EncoderParams::Pgn { w, e, languages, .. } = self.params else {
            return Err(Error::Invalid("parameter generation needs a pgn encoder".into()));
        };
        let table = tape.param(e);
        let row = match lang {
            LangSel::Id(id) if id < languages => tape.row(table, id)?,
            LangSel::Id(id) => {
                return Err(Error::Invalid(format!(
                    "unknown language id {id} ({languages} configured)"
                )))
            }
            LangSel::Mean => {
                let ones = tape.constant_matrix(1, languages, vec![1.0 / languages as f64; languages])?;
                tape.matmul(ones, table)?
            }
        };
        let col = tape.transpose(row);
        let w = tape.param(w);
        Ok(tape.matmul(w, col)?)
    }

    /// Per-block weight matrices in layout order.
    pub fn weights(&self, tape: &mut Tape<'_>, lang: Option<LangSel>) -> Result<Vec<Var>> {
        match &self.params {
            EncoderParams::Basic { blocks } => Ok(blocks.iter().map(|&id| tape.param(id)).collect()),
            EncoderParams::Pgn { .. } => {
                let lang = lang.ok_or_else(|| Error::Invalid("pgn encoder needs a language id".into()))?;
                let v = self.generate_params(tape, lang)?;
                self.layout
                    .blocks()
                    .iter()
                    .map(|b| {
                        let s = tape.slice_rows(v, b.offset, b.len())?;
                        Ok(tape.reshape(s, b.rows, b.cols)?)
                    })
                    .collect()
            }
        }
    }

    pub fn encode(&self, tape: &mut Tape<'_>, x: Var, lang: Option<LangSel>) -> Result<Var> {
        let w = self.weights(tape, lang)?;
        self.run(tape, x, &w)
    }

    /// Runs the stacked BiLSTM with explicit weights; output is `n × 2H`.
    pub fn run(&self, tape: &mut Tape<'_>, x: Var, weights: &[Var]) -> Result<Var> {
        let (n, d) = tape.dims(x);
        if n == 0 {
            return Err(Error::Invalid("cannot encode an empty sequence".into()));
        }
        if d != self.layout.input_dim {
            return Err(Error::Invalid(format!(
                "encoder expects input dim {}, got {d}",
                self.layout.input_dim
            )));
        }
        let mut h = x;
        for layer in 0..self.layout.layers {
            let base = layer * 6;
            let fwd = self.direction(tape, h, &weights[base..base + 3], false)?;
            let bwd = self.direction(tape, h, &weights[base + 3..base + 6], true)?;
            h = tape.concat(&[fwd, bwd], Axis::Cols)?;
        }
        Ok(h)
    }

    fn direction(&self, tape: &mut Tape<'_>, x: Var, w: &[Var], reverse: bool) -> Result<Var> {
        let hd = self.layout.hidden;
        let (n, _) = tape.dims(x);
        let xw = tape.matmul(x, w[0])?;
        let z_all = tape.add(xw, w[2])?;
        let mut out: Vec<Option<Var>> = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let steps: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in steps {
            let mut z = tape.row(z_all, t)?;
            if let Some((h_prev, _)) = state {
                let hw = tape.matmul(h_prev, w[1])?;
                z = tape.add(z, hw)?;
            }
            let i = tape.slice_cols(z, 0, hd)?;
            let f = tape.slice_cols(z, hd, hd)?;
            let o = tape.slice_cols(z, 2 * hd, hd)?;
            let g = tape.slice_cols(z, 3 * hd, hd)?;
            let i = tape.sigmoid(i);
            let o = tape.sigmoid(o);
            let g = tape.tanh(g);
            let ig = tape.mul(i, g)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let f = tape.sigmoid(f);
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let h = tape.mul(o, tc)?;
            out[t] = Some(h);
            state = Some((h, c));
        }
        let rows: Vec<Var> = out.into_iter().map(|v| v.expect("every step visited")).collect();
        Ok(tape.concat(&rows, Axis::Rows)?)
    }

    /// Values of generated parameters for `lang`, outside any training tape.
    pub fn generated_values(&self, params: &Params, lang: LangSel) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let v = self.generate_params(&mut tape, lang)?;
        Ok(tape.value(v).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> BiLstmLayout {
        BiLstmLayout {
            input_dim: 3,
            hidden: 2,
            layers: 2,
        }
    }

    #[test]
    fn layout_offsets_are_contiguous() {
        let l = layout();
        let blocks = l.blocks();
        assert_eq!(blocks.len(), 12);
        let mut off = 0;
        for b in &blocks {
            assert_eq!(b.offset, off);
            off += b.len();
        }
        assert_eq!(off, l.len());
        // layer 0: (3+2+1)·8 per direction, layer 1: (4+2+1)·8
        assert_eq!(l.len(), 2 * 48 + 2 * 56);
        assert_eq!(blocks[0].name(), "l0.fwd.wx");
        assert_eq!(blocks[5].name(), "l0.bwd.b");
    }

    #[test]
    fn one_hot_selects_a_column() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new_pgn(&mut p, layout(), 3, 3, &mut rng).unwrap();
        let EncoderParams::Pgn { w, e, .. } = enc.params else { unreachable!() };
        let one_hot = [0.0, 1.0, 0.0];
        p.get_mut(e).values_mut()[3..6].copy_from_slice(&one_hot);
        p.get_mut(e).values_mut()[6..9].copy_from_slice(&[0.0; 3]);
        let v = enc.generated_values(&p, LangSel::Id(1)).unwrap();
        let col: Vec<f64> = p.get(w).values().chunks(3).map(|r| r[1]).collect();
        assert_eq!(v, col);
        assert!(enc.generated_values(&p, LangSel::Id(2)).unwrap().iter().all(|&x| x == 0.0));
        assert!(enc.generated_values(&p, LangSel::Id(3)).is_err());
    }

    #[test]
    fn equal_language_rows_generate_equal_params() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new_pgn(&mut p, layout(), 2, 4, &mut rng).unwrap();
        let EncoderParams::Pgn { e, .. } = enc.params else { unreachable!() };
        let row: Vec<f64> = p.get(e).values()[..4].to_vec();
        p.get_mut(e).values_mut()[4..].copy_from_slice(&row);
        assert_eq!(
            enc.generated_values(&p, LangSel::Id(0)).unwrap(),
            enc.generated_values(&p, LangSel::Id(1)).unwrap()
        );
    }

    #[test]
    fn initial_forget_bias_is_near_one() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = layout();
        let enc = Encoder::new_pgn(&mut p, l, 2, 8, &mut rng).unwrap();
        let v = enc.generated_values(&p, LangSel::Id(0)).unwrap();
        for b in l.blocks().iter().filter(|b| b.kind == BlockKind::B) {
            let bias = &v[b.offset..b.offset + b.len()];
            for (k, &x) in bias.iter().enumerate() {
                if (l.hidden..2 * l.hidden).contains(&k) {
                    assert!((x - 1.0).abs() < 0.3, "{x}");
                } else {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn output_shape_and_errors() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = BiLstmLayout {
            input_dim: 3,
            hidden: 650,
            layers: 1,
        };
        let enc = Encoder::new_basic(&mut p, l, &mut rng).unwrap();
        let mut t = Tape::new(&p);
        let x = t.constant(Tensor::uniform(&[3, 3], 1.0, &mut rng)).unwrap();
        let h = enc.encode(&mut t, x, None).unwrap();
        assert_eq!(t.dims(h), (3, 1300));
        let empty = t.zeros(0, 3);
        assert!(enc.encode(&mut t, empty, None).is_err());

        let mut p = Params::new();
        let enc = Encoder::new_pgn(&mut p, layout(), 1, 2, &mut rng).unwrap();
        let mut t = Tape::new(&p);
        let x = t.zeros(2, 3);
        assert!(enc.encode(&mut t, x, None).is_err());
    }

    #[test]
    fn reversal_swaps_directions_with_tied_weights() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = BiLstmLayout {
            input_dim: 3,
            hidden: 4,
            layers: 1,
        };
        let enc = Encoder::new_basic(&mut p, l, &mut rng).unwrap();
        let EncoderParams::Basic { blocks } = &enc.params else { unreachable!() };
        for k in 0..3 {
            let v = p.get(blocks[k]).values().to_vec();
            p.get_mut(blocks[k + 3]).values_mut().copy_from_slice(&v);
        }
        let xs = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let rev: Vec<Vec<f64>> = (0..5).rev().map(|r| xs.row(r).to_vec()).collect();
        let mut t = Tape::new(&p);
        let x = t.constant(xs).unwrap();
        let xr = t.constant(Tensor::from_rows(&rev).unwrap()).unwrap();
        let a = enc.encode(&mut t, x, None).unwrap();
        let b = enc.encode(&mut t, xr, None).unwrap();
        for r in 0..5 {
            let ra = t.row_values(a, r);
            let rb = t.row_values(b, 4 - r);
            assert_eq!(&ra[..4], &rb[4..]);
            assert_eq!(&ra[4..], &rb[..4]);
        }
    }

    #[test]
    fn mean_language_is_average_of_rows() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new_pgn(&mut p, layout(), 2, 2, &mut rng).unwrap();
        let a = enc.generated_values(&p, LangSel::Id(0)).unwrap();
        let b = enc.generated_values(&p, LangSel::Id(1)).unwrap();
        let m = enc.generated_values(&p, LangSel::Mean).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(&m) {
            assert!(((x + y) / 2.0 - z).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("pgn".parse::<EncoderMode>().unwrap(), EncoderMode::Pgn);
        assert_eq!("basic".parse::<EncoderMode>().unwrap(), EncoderMode::Basic);
        assert!("lstm".parse::<EncoderMode>().is_err());
    }
}
