//! Predicate/argument projections, unary beams, biaffine pair scoring with
//! a role-label scorer, the per-pair loss and triplet decoding.
//!
//! Label index 0 of every pair distribution is the null relation, whose
//! logit is the constant 0; role `k` of the label set sits at index `k + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use xsrl_tensor::{Axis, ParamId, Params, Tape, Tensor, Var};

use crate::conllu::{LabeledTriplet, Sentence};
use crate::error::Result;
use crate::features::LabelSet;

/// `min(n, max(1, ⌈α·n⌉))`.
pub fn beam_size(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64).ceil() as usize).max(1).min(n)
}

/// Top `beam_size(alpha, n)` positions by score, ties toward the lower
/// index; returned in ascending index order.
pub fn prune(scores: &[f64], alpha: f64) -> Vec<usize> {
    let k = beam_size(alpha, scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Candidate predicate and argument positions (0-based).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Beams {
    pub predicates: Vec<usize>,
    pub arguments: Vec<usize>,
}

impl Beams {
    pub fn full(n: usize) -> Self {
        Self {
            predicates: (0..n).collect(),
            arguments: (0..n).collect(),
        }
    }

    pub fn pairs(&self) -> usize {
        self.predicates.len() * self.arguments.len()
    }

    /// Adds positions, keeping both lists sorted and unique.
    pub fn inject(&mut self, predicates: impl IntoIterator<Item = usize>, arguments: impl IntoIterator<Item = usize>) {
        let p: BTreeSet<usize> = self.predicates.iter().copied().chain(predicates).collect();
        let a: BTreeSet<usize> = self.arguments.iter().copied().chain(arguments).collect();
        self.predicates = p.into_iter().collect();
        self.arguments = a.into_iter().collect();
    }
}

/// A predicted relation with 1-based token indices; `label` indexes the
/// role label set.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub predicate: usize,
    pub argument: usize,
    pub label: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    fn new<R: Rng>(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: params.add(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng))?,
            b: params.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

/// Scoring parameters on top of the encoder.
#[derive(Clone, Debug)]
pub struct SrlScorer {
    pub repr_dim: usize,
    pub labels: usize,
    pub ffn_p: Affine,
    pub ffn_a: Affine,
    pub unary_p: ParamId,
    pub unary_a: ParamId,
    pub w1: ParamId,
    /// `2·d_r × 1`: the predicate half followed by the argument half.
    pub w2: ParamId,
    pub bias: ParamId,
    pub label: Affine,
}

/// Per-sentence projections and unary scores.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub rp: Var,
    pub ra: Var,
    pub unary_p: Var,
    pub unary_a: Var,
}

impl SrlScorer {
    pub fn new<R: Rng>(params: &mut Params, input_dim: usize, repr_dim: usize, labels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            repr_dim,
            labels,
            ffn_p: Affine::new(params, "srl.ffn_p", input_dim, repr_dim, rng)?,
            ffn_a: Affine::new(params, "srl.ffn_a", input_dim, repr_dim, rng)?,
            unary_p: params.add("srl.unary_p", Tensor::glorot(repr_dim, 1, rng))?,
            unary_a: params.add("srl.unary_a", Tensor::glorot(repr_dim, 1, rng))?,
            w1: params.add("srl.biaffine.w1", Tensor::glorot(repr_dim, repr_dim, rng))?,
            w2: params.add("srl.biaffine.w2", Tensor::glorot(2 * repr_dim, 1, rng))?,
            bias: params.add("srl.biaffine.b", Tensor::zeros(&[1, 1]))?,
            label: Affine::new(params, "srl.label", repr_dim, labels, rng)?,
        })
    }

    /// `r^p = ReLU(FFN_p(h))`, `r^a = ReLU(FFN_a(h))` and unary scores.
    pub fn project(&self, tape: &mut Tape<'_>, h: Var) -> Result<Projections> {
        let rp = self.ffn_p.apply(tape, h)?;
        let rp = tape.relu(rp);
        let ra = self.ffn_a.apply(tape, h)?;
        let ra = tape.relu(ra);
        let wp = tape.param(self.unary_p);
        let wa = tape.param(self.unary_a);
        Ok(Projections {
            rp,
            ra,
            unary_p: tape.matmul(rp, wp)?,
            unary_a: tape.matmul(ra, wa)?,
        })
    }

    /// Beams from unary scores.
    pub fn beams(&self, tape: &Tape<'_>, proj: &Projections, alpha_p: f64, alpha_a: f64) -> Beams {
        Beams {
            predicates: prune(tape.value(proj.unary_p), alpha_p),
            arguments: prune(tape.value(proj.unary_a), alpha_a),
        }
    }

    /// Biaffine scores `|P| × |A|`.
    pub fn pair_scores(&self, tape: &mut Tape<'_>, rp: Var, ra: Var) -> Result<Var> {
        let d = self.repr_dim;
        let w1 = tape.param(self.w1);
        let w2 = tape.param(self.w2);
        let b = tape.param(self.bias);
        let w2p = tape.slice_rows(w2, 0, d)?;
        let w2a = tape.slice_rows(w2, d, d)?;
        let pw = tape.matmul(rp, w1)?;
        let at = tape.transpose(ra);
        let bil = tape.matmul(pw, at)?;
        let lin_p = tape.matmul(rp, w2p)?;
        let lin_a = tape.matmul(ra, w2a)?;
        let lin_a = tape.transpose(lin_a);
        let s = tape.add(bil, lin_p)?;
        let s = tape.add(s, lin_a)?;
        Ok(tape.add(s, b)?)
    }

    /// Logits `(|P|·|A|) × (K+1)` for the candidate pairs, row `i·|A| + j`
    /// for predicate `i` and argument `j`; column 0 is the constant null.
    pub fn pair_logits(&self, tape: &mut Tape<'_>, proj: &Projections, beams: &Beams) -> Result<Var> {
        let np = beams.predicates.len();
        let na = beams.arguments.len();
        let rp = tape.embedding(proj.rp, &beams.predicates)?;
        let ra = tape.embedding(proj.ra, &beams.arguments)?;
        let s = self.pair_scores(tape, rp, ra)?;
        let s = tape.reshape(s, np * na, 1)?;
        let l = self.label.apply(tape, ra)?;
        let tile: Vec<usize> = (0..np).flat_map(|_| 0..na).collect();
        let l = tape.embedding(l, &tile)?;
        let roles = tape.add(l, s)?;
        let null = tape.zeros(np * na, 1);
        Ok(tape.concat(&[null, roles], Axis::Cols)?)
    }
}

/// Gold label index (`k + 1`, or 0 for null) per 0-based pair.
pub fn gold_pairs(sentence: &Sentence, roles: &LabelSet) -> BTreeMap<(usize, usize), usize> {
    let mut out = BTreeMap::new();
    for f in &sentence.frames {
        for (&a, label) in &f.roles {
            match roles.id(label) {
                Some(k) => {
                    out.insert((f.predicate_index - 1, a - 1), k + 1);
                }
                None => log::warn!("{}: role `{label}` outside the label set", sentence.sentence_id),
            }
        }
    }
    out
}

/// Per-pair targets for `pair_logits` rows and the number of gold pairs
/// that fell outside the beams.
pub fn pair_targets(beams: &Beams, gold: &BTreeMap<(usize, usize), usize>) -> (Vec<usize>, usize) {
    let mut targets = Vec::with_capacity(beams.pairs());
    for &p in &beams.predicates {
        for &a in &beams.arguments {
            targets.push(gold.get(&(p, a)).copied().unwrap_or(0));
        }
    }
    let p: BTreeSet<usize> = beams.predicates.iter().copied().collect();
    let a: BTreeSet<usize> = beams.arguments.iter().copied().collect();
    let misses = gold.keys().filter(|(gp, ga)| !p.contains(gp) || !a.contains(ga)).count();
    (targets, misses)
}

/// Summed negative log-likelihood over all candidate pairs.
pub fn sentence_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, targets)?)
}

/// Arg-max decoding of candidate pairs; ties resolve to null first, then
/// to the lower label index. Only non-null winners are emitted.
pub fn decode(logits: &[f64], labels: usize, beams: &Beams) -> Vec<Triplet> {
    let width = labels + 1;
    let mut out = Vec::new();
    let mut row = 0;
    for &p in &beams.predicates {
        for &a in &beams.arguments {
            let r = &logits[row * width..(row + 1) * width];
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            if best != 0 {
                out.push(Triplet {
                    predicate: p + 1,
                    argument: a + 1,
                    label: best - 1,
                    score: r[best],
                });
            }
            row += 1;
        }
    }
    out
}

pub fn to_labeled(triplets: &[Triplet], roles: &LabelSet) -> BTreeSet<LabeledTriplet> {
    triplets
        .iter()
        .map(|t| LabeledTriplet {
            predicate: t.predicate,
            argument: t.argument,
            label: roles.label(t.label).to_string(),
        })
        .collect()
}

/// `sentence_id<TAB>predicate<TAB>argument<TAB>label<TAB>score` per line.
pub fn write_predictions<W: Write>(
    mut w: W,
    sentence_id: &str,
    triplets: &[Triplet],
    roles: &LabelSet,
) -> std::io::Result<()> {
    for t in triplets {
        writeln!(
            w,
            "{sentence_id}\t{}\t{}\t{}\t{:.6}",
            t.predicate,
            t.argument,
            roles.label(t.label),
            t.score
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use xsrl_tensor::softmax_in_place;

    fn zero_all(p: &mut Params) {
        for id in p.ids().collect::<Vec<_>>() {
            p.get_mut(id).values_mut().fill(0.0);
        }
    }

    #[test]
    fn beam_sizes() {
        assert_eq!(beam_size(0.4, 10), 4);
        assert_eq!(beam_size(0.7, 10), 7);
        assert_eq!(beam_size(1.0, 10), 10);
        assert_eq!(beam_size(0.4, 3), 2);
        assert_eq!(beam_size(0.01, 3), 1);
    }

    #[test]
    fn prune_breaks_ties_low_and_sorts() {
        assert_eq!(prune(&[1.0, 3.0, 3.0, 2.0, 3.0], 0.4), vec![1, 2]);
        assert_eq!(prune(&[0.0; 4], 0.5), vec![0, 1]);
        assert_eq!(prune(&[5.0, 1.0, 9.0], 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn zero_weights_project_to_zero() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SrlScorer::new(&mut p, 6, 4, 3, &mut rng).unwrap();
        zero_all(&mut p);
        let mut t = Tape::new(&p);
        let h = t.constant(Tensor::uniform(&[3, 6], 1.0, &mut rng)).unwrap();
        let pr = s.project(&mut t, h).unwrap();
        assert!(t.value(pr.rp).iter().chain(t.value(pr.ra)).all(|&v| v == 0.0));
    }

    #[test]
    fn heads_differ_on_random_fixture() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SrlScorer::new(&mut p, 6, 300, 3, &mut rng).unwrap();
        let mut t = Tape::new(&p);
        let h = t.constant(Tensor::uniform(&[3, 6], 1.0, &mut rng)).unwrap();
        let pr = s.project(&mut t, h).unwrap();
        assert_eq!(t.dims(pr.rp), (3, 300));
        assert_ne!(t.value(pr.rp), t.value(pr.ra));
    }

    #[test]
    fn biaffine_hand_arithmetic() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = SrlScorer::new(&mut p, 2, 2, 1, &mut rng).unwrap();
        p.get_mut(s.w1).values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.get_mut(s.w2).values_mut().fill(1.0);
        p.get_mut(s.bias).values_mut()[0] = 0.5;
        let mut t = Tape::new(&p);
        let rp = t.constant_matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let ra = t.constant_matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let phi = s.pair_scores(&mut t, rp, ra).unwrap();
        assert_eq!(t.scalar(phi), 2.5);

        zero_all(&mut p);
        let mut t = Tape::new(&p);
        let rp = t.constant_matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let ra = t.constant_matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let phi = s.pair_scores(&mut t, rp, ra).unwrap();
        assert_eq!(t.scalar(phi), 0.0);
    }

    #[test]
    fn bias_shifts_every_pair() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SrlScorer::new(&mut p, 4, 3, 2, &mut rng).unwrap();
        let h = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let run = |p: &Params| {
            let mut t = Tape::new(p);
            let hv = t.constant(h.clone()).unwrap();
            let pr = s.project(&mut t, hv).unwrap();
            let l = s.pair_logits(&mut t, &pr, &Beams::full(4)).unwrap();
            t.value(l).to_vec()
        };
        let a = run(&p);
        p.get_mut(s.bias).values_mut()[0] += 0.75;
        let b = run(&p);
        for (row_a, row_b) in a.chunks(3).zip(b.chunks(3)) {
            assert_eq!(row_a[0], 0.0);
            assert_eq!(row_b[0], 0.0);
            for k in 1..3 {
                assert!((row_b[k] - row_a[k] - 0.75).abs() < 1e-12);
            }
            let (mut pa, mut pb) = (row_a.to_vec(), row_b.to_vec());
            softmax_in_place(&mut pa);
            softmax_in_place(&mut pb);
            assert!(pb[0] < pa[0]);
        }
    }

    #[test]
    fn zero_model_is_uniform_and_decodes_nothing() {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = SrlScorer::new(&mut p, 4, 3, 3, &mut rng).unwrap();
        zero_all(&mut p);
        let mut t = Tape::new(&p);
        let h = t.constant(Tensor::uniform(&[1, 4], 1.0, &mut rng)).unwrap();
        let pr = s.project(&mut t, h).unwrap();
        let beams = Beams::full(1);
        let l = s.pair_logits(&mut t, &pr, &beams).unwrap();
        let mut probs = t.value(l).to_vec();
        softmax_in_place(&mut probs);
        assert_eq!(probs, vec![0.25; 4]);
        let loss = sentence_loss(&mut t, l, &[0]).unwrap();
        assert!((t.scalar(loss) - 4f64.ln()).abs() < 1e-12);
        assert!(decode(t.value(l), 3, &beams).is_empty());
    }

    #[test]
    fn two_way_tie() {
        let mut probs = vec![0.0, 0.0];
        softmax_in_place(&mut probs);
        assert_eq!(probs, vec![0.5, 0.5]);
        assert!(decode(&[0.0, 0.0], 1, &Beams::full(1)).is_empty());
    }

    #[test]
    fn decode_picks_unique_argmax() {
        // n = 2, full beams, pairs (0,0) (0,1) (1,0) (1,1)
        let mut logits = vec![0.0; 4 * 3];
        logits[2 * 3 + 1] = 2.0; // predicate 2, argument 1, label 0
        logits[3 * 3 + 2] = -1.0;
        let out = decode(&logits, 2, &Beams::full(2));
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].predicate, out[0].argument, out[0].label), (2, 1, 0));
        // equal non-null logits go to the lower label
        let out = decode(&[0.0, 1.0, 1.0], 2, &Beams::full(1));
        assert_eq!(out[0].label, 0);
    }

    #[test]
    fn targets_and_oracle_misses() {
        let beams = Beams {
            predicates: vec![1],
            arguments: vec![0, 2],
        };
        let gold: BTreeMap<_, _> = [((1, 0), 1), ((1, 3), 2), ((0, 2), 1)].into();
        let (t, misses) = pair_targets(&beams, &gold);
        assert_eq!(t, vec![1, 0]);
        assert_eq!(misses, 2);
        let mut b = beams.clone();
        b.inject([0], [3]);
        assert_eq!(b.predicates, vec![0, 1]);
        assert_eq!(b.arguments, vec![0, 2, 3]);
        assert_eq!(pair_targets(&b, &gold).1, 0);
    }

    #[test]
    fn prediction_lines() {
        let roles = LabelSet::new(["A0", "A1"]);
        let mut buf = Vec::new();
        let t = Triplet {
            predicate: 2,
            argument: 1,
            label: 1,
            score: 1.5,
        };
        write_predictions(&mut buf, "s1", &[t], &roles).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "s1\t2\t1\tA1\t1.500000\n");
    }
}
