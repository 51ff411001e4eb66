use acanmt::decoding::{beam_search_scored, DecodeError, Scorer};

/// Toy scorer whose distribution depends on the whole prefix.
struct PrefixScorer {
    seed: u64,
    vocab: usize,
}

impl PrefixScorer {
    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut bytes: Vec<u8> = Vec::with_capacity(prefix.len() * 8 + 8);
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for &t in prefix {
            bytes.extend_from_slice(&(t as u64).to_le_bytes());
        }
        let h = acanmt::data::fnv1a64(&bytes);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        logits.iter().map(|x| x - lse).collect()
    }
}

impl Scorer for PrefixScorer {
    type State = Vec<usize>;
    fn start(&mut self) -> Result<(Vec<usize>, Vec<f64>), DecodeError> {
        Ok((vec![], self.row(&[])))
    }
    fn step(&mut self, state: &Vec<usize>, token: usize) -> Result<(Vec<usize>, Vec<f64>), DecodeError> {
        let mut next = state.clone();
        next.push(token);
        let row = self.row(&next);
        Ok((next, row))
    }
}

/// All sequences up to max_len: eos-terminated early or truncated at max_len.
fn enumerate_best(
    scorer: &mut PrefixScorer,
    eos: usize,
    max_len: usize,
) -> (Vec<usize>, f64) {
    fn rec(
        scorer: &mut PrefixScorer,
        eos: usize,
        max_len: usize,
        prefix: &mut Vec<usize>,
        ll: f64,
        lp: &[f64],
        best: &mut (f64, Vec<usize>),
    ) {
        for tok in 0..lp.len() {
            let ll2 = ll + lp[tok];
            prefix.push(tok);
            if tok == eos || prefix.len() == max_len {
                let norm = ll2 / prefix.len() as f64;
                if norm > best.0 || (norm == best.0 && *prefix < best.1) {
                    *best = (norm, prefix.clone());
                }
            } else {
                let (_, next_lp) = scorer.step(&prefix[..prefix.len() - 1].to_vec(), tok).unwrap();
                rec(scorer, eos, max_len, prefix, ll2, &next_lp, best);
            }
            prefix.pop();
        }
    }
    let (_, lp) = scorer.start().unwrap();
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut prefix = Vec::new();
    rec(scorer, eos, max_len, &mut prefix, 0.0, &lp, &mut best);
    (best.1, best.0)
}

#[test]
#[ignore]
fn measure_agreement() {
    for max_len in [2usize, 3, 4] {
        for vocab in [3usize, 5] {
            let mut agree = 0;
            let n = 1000;
            for seed in 0..n {
                let mut s = PrefixScorer { seed, vocab };
                let hyp = beam_search_scored(&mut s, 2, vocab, max_len).unwrap();
                let mut s2 = PrefixScorer { seed, vocab };
                let (best_seq, best_norm) = enumerate_best(&mut s2, 2, max_len);
                if hyp.tokens == best_seq && (hyp.normalized_score() - best_norm).abs() < 1e-12 {
                    agree += 1;
                }
            }
            println!("max_len={max_len} vocab={vocab}: {agree}/{n}");
        }
    }
}
