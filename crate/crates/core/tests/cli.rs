mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nbkd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbkd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = nbkd(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) {
    let (lists, refs) = common::synthetic_lists(5, 25, 6);
    fs::write(dir.join("test.nbest"), common::nbest_text(&lists)).unwrap();
    fs::write(dir.join("test.ref"), common::lines(&refs)).unwrap();
    let src: Vec<String> = (0..25).map(|i| format!("src {i}")).collect();
    fs::write(dir.join("test.src"), common::lines(&src)).unwrap();
    let mut scores = String::new();
    for (sid, l) in lists.iter().enumerate() {
        for (rank, t) in l.iter().enumerate() {
            scores.push_str(&format!("{sid}\t{rank}\t{}\n", t.len() as f64 * 0.1));
        }
    }
    fs::write(dir.join("ext.tsv"), scores).unwrap();
    let hyps: Vec<String> = lists.iter().map(|l| l[0].clone()).collect();
    fs::write(dir.join("hyp.txt"), common::lines(&hyps)).unwrap();
}

#[test]
fn evaluate_prints_metric_and_signature() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = ok(
        &[
            "evaluate",
            "--hyp",
            "hyp.txt",
            "--refs",
            "test.ref,test.ref",
        ],
        dir.path(),
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    let value: f64 = lines[0].strip_prefix("BLEU\t").unwrap().parse().unwrap();
    let (lists, refs) = common::synthetic_lists(5, 25, 6);
    let hyps: Vec<&str> = lists.iter().map(|l| l[0].as_str()).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|x| vec![x.as_str(), x.as_str()]).collect();
    assert!((value - common::oracle::corpus_bleu(&hyps, &r)).abs() < 5e-5);
    assert!(
        lines[1].contains("nrefs:2")
            && lines[1].contains("tok:13a")
            && lines[1].contains("smooth:exp")
    );

    let out = ok(
        &[
            "evaluate", "--hyp", "hyp.txt", "--refs", "test.ref", "--metric", "chrf",
        ],
        dir.path(),
    );
    assert!(out.starts_with("chrF\t"));
    assert_eq!(
        out.lines()
            .next()
            .unwrap()
            .split('\t')
            .nth(1)
            .unwrap()
            .split('.')
            .nth(1)
            .unwrap()
            .len(),
        4
    );
}

#[test]
fn full_command_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(
        &[
            "assemble",
            "--nbest",
            "test.nbest",
            "--native",
            "mbr_bleu,len_ratio",
            "--passthrough",
            "total,lm",
            "--scores",
            "ext=ext.tsv",
            "--out",
            "m.tsv",
        ],
        d,
    );
    let m = fs::read_to_string(d.join("m.tsv")).unwrap();
    assert!(m.starts_with("#features\ttotal\tlm\tmbr_bleu\tlen_ratio\text\n"));
    assert_eq!(m.lines().count(), 1 + 25 * 6);

    ok(
        &[
            "tune",
            "--matrix",
            "m.tsv",
            "--nbest",
            "test.nbest",
            "--refs",
            "test.ref",
            "--epochs",
            "5",
            "--out",
            "w.tsv",
        ],
        d,
    );
    let w = fs::read_to_string(d.join("w.tsv")).unwrap();
    assert_eq!(w.lines().count(), 6);
    assert!(w.lines().last().unwrap().starts_with("#best_epoch\t"));

    let report = ok(
        &[
            "rerank",
            "--matrix",
            "m.tsv",
            "--nbest",
            "test.nbest",
            "--weights",
            "w.tsv",
            "--top-k-models",
            "2",
            "--out",
            "sel.tsv",
            "--refs",
            "test.ref",
            "--report",
        ],
        d,
    );
    assert!(report.contains("BLEU\t"));
    let sel = fs::read_to_string(d.join("sel.tsv")).unwrap();
    assert_eq!(sel.lines().count(), 25);
    assert!(sel
        .lines()
        .enumerate()
        .all(|(i, l)| l.starts_with(&format!("{i}\t"))));

    ok(
        &[
            "distill",
            "--strategy",
            "rerank",
            "--nbest",
            "test.nbest",
            "--src",
            "test.src",
            "--matrix",
            "m.tsv",
            "--weights",
            "w.tsv",
            "--top-k-models",
            "2",
            "--out",
            "rr",
            "--format",
            "tsv",
        ],
        d,
    );
    let tsv = fs::read_to_string(d.join("rr.tsv")).unwrap();
    let sel_texts: Vec<&str> = sel
        .lines()
        .map(|l| l.splitn(3, '\t').nth(2).unwrap())
        .collect();
    let tsv_texts: Vec<&str> = tsv.lines().map(|l| l.split_once('\t').unwrap().1).collect();
    assert_eq!(sel_texts, tsv_texts);

    ok(
        &[
            "distill",
            "--strategy",
            "kd",
            "--nbest",
            "test.nbest",
            "--src",
            "test.src",
            "--out",
            "kd",
        ],
        d,
    );
    assert_eq!(
        fs::read_to_string(d.join("kd.tgt")).unwrap(),
        fs::read_to_string(d.join("hyp.txt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(d.join("kd.src")).unwrap(),
        fs::read_to_string(d.join("test.src")).unwrap()
    );

    ok(
        &[
            "distill",
            "--strategy",
            "ki",
            "--nbest",
            "test.nbest",
            "--src",
            "test.src",
            "--orig-refs",
            "test.ref",
            "--out",
            "ki",
        ],
        d,
    );
    let oracle_sel = ok(
        &["oracle", "--nbest", "test.nbest", "--refs", "test.ref"],
        d,
    );
    let oracle_texts: String = oracle_sel
        .lines()
        .map(|l| format!("{}\n", l.splitn(3, '\t').nth(2).unwrap()))
        .collect();
    assert_eq!(fs::read_to_string(d.join("ki.tgt")).unwrap(), oracle_texts);

    let sweep = ok(
        &[
            "oracle",
            "--nbest",
            "test.nbest",
            "--refs",
            "test.ref",
            "--sweep",
            "1,2,4,6",
        ],
        d,
    );
    let rows: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert!(sweep.contains("greedy"));
    for r in rows {
        let v: Vec<f64> = r.split('\t').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v[0] <= v[1] && v[1] <= v[2], "{r}");
    }
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = nbkd(
        &["assemble", "--nbest", "test.nbest", "--native", "bogus"],
        d,
    );
    assert!(!out.status.success());
    let out = nbkd(
        &["assemble", "--nbest", "test.nbest", "--scores", "noequals"],
        d,
    );
    assert!(!out.status.success());
    fs::write(d.join("short.tsv"), "0\t0\t1.0\n").unwrap();
    let out = nbkd(
        &[
            "assemble",
            "--nbest",
            "test.nbest",
            "--scores",
            "x=short.tsv",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    let out = nbkd(
        &[
            "distill",
            "--strategy",
            "ki",
            "--nbest",
            "test.nbest",
            "--src",
            "test.src",
            "--out",
            "x",
        ],
        d,
    );
    assert!(!out.status.success());
    let out = nbkd(&["status", "--workdir", "nowhere"], d);
    assert!(!out.status.success());
    let out = nbkd(
        &[
            "oracle",
            "--nbest",
            "test.nbest",
            "--refs",
            "test.ref",
            "--sweep",
            "4,2",
        ],
        d,
    );
    assert!(!out.status.success());
}

#[test]
fn selftrain_and_status() {
    let dir = tempfile::tempdir().unwrap();
    let fx = common::pipeline_fixture(dir.path(), &[40.0, 45.0], 2, "");
    let out = ok(
        &["selftrain", "--config", fx.config.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.contains("stop\tmax_iterations"));
    assert!(out.contains("final_iter\t2"));
    let status = ok(&["status", "--workdir", "work"], dir.path());
    assert_eq!(status.lines().count(), 3);
    assert!(status.lines().nth(1).unwrap().starts_with("1\t"));
}
