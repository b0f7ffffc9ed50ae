//! Brute-force oracles shared by the property and acceptance targets. Each
//! one recomputes its answer from first principles instead of calling the
//! library routine it checks.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use dedup_core::corpus::{Corpus, Record, Schema};
use dedup_core::encoder::{DropoutMask, EncoderConfig, EncoderParams};
use dedup_core::preprocess::TokenSequence;
use dedup_core::training::{example_loss_and_grad, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_sequence(rng: &mut ChaCha8Rng, n: usize, max_len: usize, vocab: usize) -> TokenSequence {
    let mut ids: Vec<u32> = (0..n).map(|_| rng.random_range(8..vocab as u32)).collect();
    ids[0] = 0;
    let sep = n / 2;
    ids[sep] = 1;
    ids[n - 1] = 1;
    let mut mask = vec![true; n];
    let mut segments: Vec<u8> = (0..n).map(|i| u8::from(i > sep)).collect();
    let mut matches: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    ids.resize(max_len, 7);
    mask.resize(max_len, false);
    segments.resize(max_len, 0);
    matches.resize(max_len, 0);
    TokenSequence { pair_id: "g".into(), ids, mask, segments, matches }
}

fn loss(params: &EncoderParams, seq: &TokenSequence, label: u8, m: (&DropoutMask, &DropoutMask), cfg: &TrainConfig) -> f64 {
    let mut scratch = params.zeros_like();
    example_loss_and_grad(params, seq, label, (Some(m.0), Some(m.1)), cfg, &mut scratch).unwrap().total
}

/// Relative error with the denominator floored at 1e-6: central differences
/// at h = 1e-5 carry roughly 1e-11 of rounding noise, which would otherwise
/// dominate coordinates whose true gradient is zero (e.g. key biases, which
/// shift every score of a softmax row equally).
fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Runs the probe and returns (coordinates checked, worst relative error, tensor kinds covered).
pub fn run_gradient_probe(seed: u64, per_tensor: usize) -> (usize, f64, usize) {
    let cfg = EncoderConfig {
        vocab_size: 30,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_len: 12,
        dropout_rate: 0.2,
        seed,
        match_features: true,
    };
    let mut params = EncoderParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // Move layer-norm and bias parameters off their initial values so their
    // gradients are generic.
    params.for_each_mut(|t| t.mapv_inplace(|v| v + 0.1 * (rng.random::<f64>() - 0.5)));
    let seq = random_sequence(&mut rng, 9, cfg.max_len, cfg.vocab_size);
    let label = (seed % 2) as u8;
    let m1 = DropoutMask::sample(&cfg, 9, seed, 0);
    let m2 = DropoutMask::sample(&cfg, 9, seed, 1);
    let train = TrainConfig::default();

    let mut grads = params.zeros_like();
    example_loss_and_grad(&params, &seq, label, (Some(&m1), Some(&m2)), &train, &mut grads).unwrap();

    let used_ids: Vec<usize> = seq.ids[..9].iter().map(|&i| i as usize).collect();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grad_values: Vec<ndarray::Array2<f64>> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        let (rows, cols) = grad_values[ti].dim();
        for _ in 0..per_tensor {
            let r = match name.as_str() {
                "token_embedding" => used_ids[rng.random_range(0..used_ids.len())],
                "position_embedding" => rng.random_range(0..9),
                _ => rng.random_range(0..rows),
            };
            let c = rng.random_range(0..cols);
            let original = params.tensors()[ti].1[[r, c]];
            params.tensors_mut()[ti][[r, c]] = original + h;
            let up = loss(&params, &seq, label, (&m1, &m2), &train);
            params.tensors_mut()[ti][[r, c]] = original - h;
            let down = loss(&params, &seq, label, (&m1, &m2), &train);
            params.tensors_mut()[ti][[r, c]] = original;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad_values[ti][[r, c]];
            let err = relative_error(analytic, numeric);
            assert!(err < 1e-4, "{name}[{r},{c}]: analytic {analytic} vs numeric {numeric} (rel {err})");
            worst = worst.max(err);
            checked += 1;
        }
    }
    (checked, worst, names.len())
}

/// R-Drop total for one example written out term by term.
pub fn rdrop_scalar(p1: [f64; 2], p2: [f64; 2], y: usize, alpha: f64) -> f64 {
    let nll = -p1[y].ln() - p2[y].ln();
    let kl_12 = p1[0] * (p1[0] / p2[0]).ln() + p1[1] * (p1[1] / p2[1]).ln();
    let kl_21 = p2[0] * (p2[0] / p1[0]).ln() + p2[1] * (p2[1] / p1[1]).ln();
    nll + alpha * 0.5 * (kl_12 + kl_21)
}

const WORDS: &[&str] = &[
    "atlas", "Bronze", "cedar", "delta", "ember", "Fjord", "grove", "harbor", "iris", "jade", "kelp", "lumen",
    "maple", "Nova", "onyx", "pearl", "quill", "raven", "sage", "tundra", "the", "and", "of", "A", "in",
];

pub const STOPWORDS: &[&str] = &["the", "and", "of", "a", "in"];

/// A corpus of up to `max_records` records over letter-only words, some of
/// them stopwords and some capitalized.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_records: usize) -> Corpus {
    let n = rng.random_range(2..=max_records);
    let schema = Schema::new(["name", "place"]).unwrap();
    let records = (0..n)
        .map(|i| Record {
            id: format!("r{i:03}"),
            values: (0..2)
                .map(|_| {
                    let k = rng.random_range(0..4);
                    (0..k).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
                })
                .collect(),
            cluster_id: None,
        })
        .collect();
    Corpus::new(schema, records, false).unwrap()
}

/// Every record pair sharing at least one non-stopword token.
pub fn brute_force_pairs(corpus: &Corpus, stopwords: &[&str]) -> BTreeSet<(String, String)> {
    let tokens: Vec<HashSet<String>> = corpus
        .records
        .iter()
        .map(|r| {
            r.values
                .iter()
                .flat_map(|v| v.split_whitespace())
                .map(str::to_lowercase)
                .filter(|t| !stopwords.contains(&t.as_str()))
                .collect()
        })
        .collect();
    let mut pairs = BTreeSet::new();
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            if !tokens[i].is_disjoint(&tokens[j]) {
                let (a, b) = (&corpus.records[i].id, &corpus.records[j].id);
                pairs.insert(if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) });
            }
        }
    }
    pairs
}

/// Smoothed TF-IDF recomputed from the fitting documents.
pub struct TfidfOracle {
    docs: usize,
    df: HashMap<String, usize>,
    stopwords: HashSet<String>,
}

fn bracketed(t: &str) -> bool {
    t.starts_with('[') && t.ends_with(']')
}

impl TfidfOracle {
    pub fn fit(texts: &[String], stopwords: &[&str]) -> Self {
        let stopwords: HashSet<String> = stopwords.iter().map(|s| s.to_string()).collect();
        let mut df = HashMap::new();
        for text in texts {
            let unique: HashSet<String> = text
                .split_whitespace()
                .filter(|t| !bracketed(t))
                .map(str::to_lowercase)
                .filter(|t| !stopwords.contains(t))
                .collect();
            for t in unique {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        Self { docs: texts.len(), df, stopwords }
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(&token.to_lowercase())
    }

    pub fn score(&self, text: &str, token: &str) -> f64 {
        let key = token.to_lowercase();
        let tf = text.split_whitespace().filter(|t| t.to_lowercase() == key).count() as f64;
        let df = self.df.get(&key).copied().unwrap_or(0) as f64;
        tf * (((1 + self.docs) as f64 / (1.0 + df)).ln() + 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Fixed,
    Marker,
    Value { marked: bool },
}

fn roles(tokens: &[&str]) -> Vec<Role> {
    let (mut name, mut mark) = (false, false);
    tokens
        .iter()
        .map(|&t| match t {
            "[COL]" => {
                name = true;
                Role::Fixed
            }
            "[VAL]" | "[CLS]" | "[SEP]" => {
                name = false;
                Role::Fixed
            }
            "[LAST]" => {
                mark = true;
                Role::Marker
            }
            "[/LAST]" => {
                mark = false;
                Role::Marker
            }
            _ if name => Role::Fixed,
            _ => Role::Value { marked: mark },
        })
        .collect()
}

/// Whether exactly `excess` tokens can be removed from an input with
/// `unmarked` free value tokens and marked regions of the given sizes.
fn exact_trim_possible(unmarked: usize, regions: &[usize], excess: usize) -> bool {
    let mut sums: HashSet<usize> = (0..=unmarked).collect();
    for &size in regions {
        let options: Vec<usize> = (0..size).chain([size + 2]).collect();
        sums = sums.iter().flat_map(|s| options.iter().map(move |o| s + o)).collect();
    }
    sums.contains(&excess)
}

/// Checks one summarization against the contract; `Err` names the violation.
pub fn check_summary(input: &str, output: &str, tfidf: &TfidfOracle, max_len: usize) -> Result<(), String> {
    let inp: Vec<&str> = input.split_whitespace().collect();
    let out: Vec<&str> = output.split_whitespace().collect();
    let in_roles = roles(&inp);

    // Surviving tokens keep their order.
    let out_roles = roles(&out);
    let mut kept = vec![false; inp.len()];
    let mut cursor = 0;
    for (t, role) in out.iter().zip(&out_roles) {
        while cursor < inp.len() && (inp[cursor] != *t || in_roles[cursor] != *role) {
            cursor += 1;
        }
        if cursor == inp.len() {
            return Err(format!("`{t}` is not an in-order survivor"));
        }
        kept[cursor] = true;
        cursor += 1;
    }

    let fixed_in = in_roles.iter().filter(|r| **r == Role::Fixed).count();
    let fixed_out = out_roles.iter().filter(|r| **r == Role::Fixed).count();
    if fixed_in != fixed_out {
        return Err(format!("{fixed_in} structural or name tokens became {fixed_out}"));
    }

    let mut open = false;
    for w in out.windows(2) {
        if w == ["[LAST]", "[/LAST]"] {
            return Err("empty marked region".into());
        }
    }
    for t in &out {
        match *t {
            "[LAST]" if open => return Err("nested marker".into()),
            "[LAST]" => open = true,
            "[/LAST]" if !open => return Err("stray closing marker".into()),
            "[/LAST]" => open = false,
            _ => {}
        }
    }
    if open {
        return Err("unclosed marker".into());
    }

    if inp.len() > max_len && out.len() > max_len {
        return Err(format!("{} tokens exceed the budget {max_len}", out.len()));
    }
    if inp.len() <= max_len {
        if output != input {
            return Err("short input was modified".into());
        }
    } else {
        let unmarked = in_roles.iter().filter(|r| **r == Role::Value { marked: false }).count();
        let mut regions = Vec::new();
        for (i, r) in in_roles.iter().enumerate() {
            match r {
                Role::Marker if inp[i] == "[LAST]" => regions.push(0),
                Role::Value { marked: true } => *regions.last_mut().unwrap() += 1,
                _ => {}
            }
        }
        if exact_trim_possible(unmarked, &regions, inp.len() - max_len) && out.len() != max_len {
            return Err(format!("{} tokens where exactly {max_len} were reachable", out.len()));
        }
    }

    // Kept ordinary tokens outscore dropped ones.
    let ordinary = |i: usize| in_roles[i] == Role::Value { marked: false } && !tfidf.is_stopword(inp[i]);
    let kept_min = (0..inp.len()).filter(|&i| ordinary(i) && kept[i]).map(|i| tfidf.score(input, inp[i])).fold(f64::INFINITY, f64::min);
    let dropped_max =
        (0..inp.len()).filter(|&i| ordinary(i) && !kept[i]).map(|i| tfidf.score(input, inp[i])).fold(f64::NEG_INFINITY, f64::max);
    if kept_min + 1e-12 < dropped_max {
        return Err(format!("kept score {kept_min} below dropped score {dropped_max}"));
    }
    Ok(())
}

/// Brute-force uncertainty order: sort everything, take a prefix.
pub fn uncertainty_prefix(predictions: &[(String, f64)], n: usize) -> Vec<String> {
    let mut all = predictions.to_vec();
    all.sort_by(|a, b| (a.1 - 0.5).abs().partial_cmp(&(b.1 - 0.5).abs()).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.into_iter().take(n).map(|(id, _)| id).collect()
}
