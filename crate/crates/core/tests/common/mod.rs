//! Shared helpers for the integration tests: brute-force metric oracles
//! written directly from the formulas, and synthetic data generators.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracle {
    //! Deliberately naive: n-grams are compared as vectors of tokens by
    //! linear search, nothing is hashed or cached.

    pub fn tokens(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn ngrams<T: PartialEq>(seq: &[T], n: usize) -> Vec<&[T]> {
        if seq.len() < n {
            return vec![];
        }
        (0..=seq.len() - n).map(|i| &seq[i..i + n]).collect()
    }

    fn count<T: PartialEq>(list: &[&[T]], g: &[T]) -> u64 {
        list.iter().filter(|x| **x == g).count() as u64
    }

    #[derive(Debug, Clone, Copy, Default, PartialEq)]
    pub struct Stats {
        pub matches: [u64; 4],
        pub totals: [u64; 4],
        pub hyp_len: u64,
        pub ref_len: u64,
    }

    pub fn bleu_stats(hyp: &str, refs: &[&str]) -> Stats {
        let h = tokens(hyp);
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| tokens(r)).collect();
        let mut st = Stats {
            hyp_len: h.len() as u64,
            ..Default::default()
        };
        for n in 1..=4 {
            let hg = ngrams(&h, n);
            let rgs: Vec<Vec<&[&str]>> = rs.iter().map(|r| ngrams(r, n)).collect();
            st.totals[n - 1] = hg.len() as u64;
            let mut seen: Vec<&[&str]> = vec![];
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let c = count(&hg, g);
                let max_ref = rgs.iter().map(|rg| count(rg, g)).max().unwrap_or(0);
                st.matches[n - 1] += c.min(max_ref);
            }
        }
        // closest reference length, shorter one on ties
        let mut best: Option<u64> = None;
        for r in &rs {
            let l = r.len() as u64;
            best = match best {
                None => Some(l),
                Some(b) => {
                    let db = b.abs_diff(st.hyp_len);
                    let dl = l.abs_diff(st.hyp_len);
                    if dl < db || (dl == db && l < b) {
                        Some(l)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        st.ref_len = best.unwrap_or(0);
        st
    }

    pub fn bleu_from(st: &Stats) -> f64 {
        if st.hyp_len == 0 || st.matches.iter().all(|&m| m == 0) {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut used = 0.0;
        let mut k = 1.0;
        for n in 0..4 {
            if st.totals[n] == 0 {
                continue;
            }
            let p = if st.matches[n] == 0 {
                k *= 2.0;
                1.0 / (k * st.totals[n] as f64)
            } else {
                st.matches[n] as f64 / st.totals[n] as f64
            };
            log_sum += p.ln();
            used += 1.0;
        }
        let bp = if st.hyp_len < st.ref_len {
            (1.0 - st.ref_len as f64 / st.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / used).exp()
    }

    pub fn corpus_bleu(hyps: &[&str], refs: &[Vec<&str>]) -> f64 {
        let mut total = Stats::default();
        for (h, r) in hyps.iter().zip(refs) {
            let s = bleu_stats(h, r);
            for n in 0..4 {
                total.matches[n] += s.matches[n];
                total.totals[n] += s.totals[n];
            }
            total.hyp_len += s.hyp_len;
            total.ref_len += s.ref_len;
        }
        bleu_from(&total)
    }

    pub fn sentence_bleu(hyp: &str, refs: &[&str]) -> f64 {
        bleu_from(&bleu_stats(hyp, refs))
    }

    fn chrf_one(hyp: &str, reference: &str) -> f64 {
        let h: Vec<char> = tokens(hyp).join(" ").chars().collect();
        let r: Vec<char> = tokens(reference).join(" ").chars().collect();
        let (mut p_sum, mut r_sum, mut used) = (0.0, 0.0, 0.0);
        for n in 1..=6 {
            let hg = ngrams(&h, n);
            let rg = ngrams(&r, n);
            if hg.is_empty() || rg.is_empty() {
                continue;
            }
            let mut seen: Vec<&[char]> = vec![];
            let mut m = 0;
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                m += count(&hg, g).min(count(&rg, g));
            }
            p_sum += m as f64 / hg.len() as f64;
            r_sum += m as f64 / rg.len() as f64;
            used += 1.0;
        }
        if used == 0.0 {
            return 0.0;
        }
        let (p, r) = (p_sum / used, r_sum / used);
        if p + r == 0.0 {
            return 0.0;
        }
        100.0 * 5.0 * p * r / (4.0 * p + r)
    }

    /// Sentence chrF against the best reference.
    pub fn sentence_chrf(hyp: &str, refs: &[&str]) -> f64 {
        refs.iter()
            .map(|r| chrf_one(hyp, r))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// First index of the maximum.
    pub fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    }
}

pub const VOCAB: &[&str] = &[
    "the", "a", "cat", "dog", "sat", "on", "mat", "house", "green", "red", "runs", "quickly",
    "over", "under", "river", "bank", "money", "is", "was", "very", "small", "large", "tree",
    "bird", "sings", "today", ",", ".", "and", "or", "not", "with",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Replaces, drops or inserts tokens with probability `rate` each.
pub fn perturb(rng: &mut ChaCha8Rng, s: &str, rate: f64) -> String {
    let mut out = Vec::new();
    for t in s.split_whitespace() {
        let u: f64 = rng.gen();
        if u < rate {
            out.push(*VOCAB.choose(rng).unwrap());
        } else if u < 1.5 * rate {
            continue;
        } else {
            out.push(t);
        }
        if rng.gen::<f64>() < rate / 2.0 {
            out.push(*VOCAB.choose(rng).unwrap());
        }
    }
    if out.is_empty() {
        out.push(VOCAB[0]);
    }
    out.join(" ")
}

/// `sentences` references and n-best lists of `n` perturbations each.
pub fn synthetic_lists(seed: u64, sentences: usize, n: usize) -> (Vec<Vec<String>>, Vec<String>) {
    let mut r = rng(seed);
    let refs: Vec<String> = (0..sentences)
        .map(|_| random_sentence(&mut r, 4, 20))
        .collect();
    let lists = refs
        .iter()
        .map(|reference| {
            (0..n)
                .map(|_| {
                    let rate = r.gen_range(0.05..0.6);
                    perturb(&mut r, reference, rate)
                })
                .collect()
        })
        .collect();
    (lists, refs)
}

/// Moses n-best text with a `total` equal to minus the rank and an `lm`
/// teacher score.
pub fn nbest_text(lists: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (sid, l) in lists.iter().enumerate() {
        for (rank, t) in l.iter().enumerate() {
            let lm = -(t.split_whitespace().count() as f64) * 0.5 - rank as f64 * 0.25;
            out.push_str(&format!(
                "{sid} ||| {t} ||| lm= {lm} ||| {}\n",
                -(rank as f64)
            ));
        }
    }
    out
}

pub fn lines(v: &[String]) -> String {
    v.iter().map(|s| format!("{s}\n")).collect()
}

/// Hypotheses (one per reference) whose oracle corpus BLEU is close to
/// `target`: tokens are overwritten with an unseen word one at a time until
/// the score falls to the target, keeping whichever side is closer.
pub fn hyps_with_bleu(refs: &[String], target: f64, seed: u64) -> (Vec<String>, f64) {
    let mut toks: Vec<Vec<String>> = refs
        .iter()
        .map(|r| r.split_whitespace().map(str::to_string).collect())
        .collect();
    let mut positions: Vec<(usize, usize)> = toks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    positions.shuffle(&mut rng(seed));
    let stats_of = |t: &[String], r: &str| oracle::bleu_stats(&t.join(" "), &[r]);
    let mut stats: Vec<oracle::Stats> =
        toks.iter().zip(refs).map(|(t, r)| stats_of(t, r)).collect();
    let total = |stats: &[oracle::Stats]| {
        let mut s = oracle::Stats::default();
        for x in stats {
            for n in 0..4 {
                s.matches[n] += x.matches[n];
                s.totals[n] += x.totals[n];
            }
            s.hyp_len += x.hyp_len;
            s.ref_len += x.ref_len;
        }
        oracle::bleu_from(&s)
    };
    let mut current = total(&stats);
    for (i, j) in positions {
        let before = (toks[i][j].clone(), stats[i], current);
        toks[i][j] = "zzz".into();
        stats[i] = stats_of(&toks[i], &refs[i]);
        current = total(&stats);
        if current <= target {
            if (before.2 - target).abs() < (current - target).abs() {
                toks[i][j] = before.0;
                stats[i] = before.1;
                current = before.2;
            }
            break;
        }
    }
    // local search: single-token edits that move closer to the target
    let mut r = rng(seed ^ 0x5eed);
    let originals: Vec<Vec<String>> = refs
        .iter()
        .map(|x| x.split_whitespace().map(str::to_string).collect())
        .collect();
    for _ in 0..4000 {
        if (current - target).abs() < 1e-3 {
            break;
        }
        let i = r.gen_range(0..toks.len());
        let saved = toks[i].clone();
        match r.gen_range(0..3) {
            0 => {
                let j = r.gen_range(0..toks[i].len());
                toks[i][j] = "zzz".into();
            }
            1 => {
                let j = r.gen_range(0..toks[i].len());
                if j < originals[i].len() {
                    toks[i][j] = originals[i][j].clone();
                }
            }
            _ => toks[i].push("zzz".into()),
        }
        let old = stats[i];
        stats[i] = stats_of(&toks[i], &refs[i]);
        let next = total(&stats);
        if (next - target).abs() < (current - target).abs() {
            current = next;
        } else {
            toks[i] = saved;
            stats[i] = old;
        }
    }
    (toks.iter().map(|t| t.join(" ")).collect(), current)
}

pub struct PipelineFixture {
    pub root: std::path::PathBuf,
    pub config: std::path::PathBuf,
    /// Oracle corpus BLEU of the baked dev hypotheses per iteration.
    pub dev_bleu: Vec<f64>,
    pub dev_hyps: Vec<Vec<String>>,
}

/// Writes data, per-iteration baked hook outputs and a TOML config under
/// `root`. The hooks copy `baked/iter{ITER}/{SET}.*`; `score_hook_prefix`
/// is prepended to the score hook command.
pub fn pipeline_fixture(
    root: &std::path::Path,
    dev_targets: &[f64],
    iterations_max: usize,
    score_hook_prefix: &str,
) -> PipelineFixture {
    use std::fs;
    let write = |p: &std::path::Path, s: &str| {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, s).unwrap();
    };
    let (_, tune_refs) = synthetic_lists(11, 40, 1);
    let mut r = rng(12);
    let dev_refs: Vec<String> = (0..400).map(|_| random_sentence(&mut r, 8, 16)).collect();
    let transfer_src: Vec<String> = (0..30).map(|i| format!("quelle {i}")).collect();
    write(
        &root.join("data/tune.src"),
        &lines(&(0..40).map(|i| format!("tune {i}")).collect::<Vec<_>>()),
    );
    write(&root.join("data/tune.ref"), &lines(&tune_refs));
    write(
        &root.join("data/dev.src"),
        &lines(&(0..400).map(|i| format!("dev {i}")).collect::<Vec<_>>()),
    );
    write(&root.join("data/dev.ref"), &lines(&dev_refs));
    write(&root.join("data/transfer.src"), &lines(&transfer_src));

    let mut dev_bleu = Vec::new();
    let mut dev_hyps = Vec::new();
    for (k, &target) in dev_targets.iter().enumerate() {
        let iter = k + 1;
        let dir = root.join(format!("baked/iter{iter}"));
        let mut r = rng(100 + iter as u64);
        let tune_lists: Vec<Vec<String>> = tune_refs
            .iter()
            .map(|t| {
                (0..4)
                    .map(|_| {
                        let rate = r.gen_range(0.05..0.5);
                        perturb(&mut r, t, rate)
                    })
                    .collect()
            })
            .collect();
        let (transfer_lists, _) = synthetic_lists(200 + iter as u64, 30, 4);
        let (hyps, bleu) = hyps_with_bleu(&dev_refs, target, iter as u64);
        let dev_lists: Vec<Vec<String>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        for (set, lists) in [
            ("tune", &tune_lists),
            ("dev", &dev_lists),
            ("transfer", &transfer_lists),
        ] {
            write(&dir.join(format!("{set}.nbest")), &nbest_text(lists));
            let mut scores = String::new();
            for (sid, l) in lists.iter().enumerate() {
                for (rank, t) in l.iter().enumerate() {
                    let v = -(t.len() as f64) / 10.0 + (sid % 3) as f64;
                    scores.push_str(&format!("{sid}\t{rank}\t{v}\n"));
                }
            }
            write(&dir.join(format!("{set}.lm.tsv")), &scores);
        }
        dev_bleu.push(bleu);
        dev_hyps.push(hyps);
    }

    let baked = root.join("baked");
    let config = format!(
        r#"workdir = "work"
iterations_max = {iterations_max}
min_delta = 0.1
top_k_models = 3
parallelism = 2

[hooks]
generate_nbest = "cp {b}/iter{{ITER}}/{{SET}}.nbest {{OUT}}"
score_ext = "{score_hook_prefix}cp {b}/iter{{ITER}}/{{SET}}.lm.tsv {{OUT}}"

[data]
tune_src = "data/tune.src"
tune_refs = ["data/tune.ref"]
dev_src = "data/dev.src"
dev_refs = ["data/dev.ref"]
transfer_src = "data/transfer.src"

[features]
passthrough = ["total", "lm"]
native = ["mbr_bleu", "len"]
external = ["ext"]

[mira]
c = 0.01
epochs = 10
seed = 3
"#,
        b = baked.display()
    );
    let config_path = root.join("selftrain.toml");
    write(&config_path, &config);
    PipelineFixture {
        root: root.to_path_buf(),
        config: config_path,
        dev_bleu,
        dev_hyps,
    }
}
