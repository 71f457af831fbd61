use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use slopt::catalog::{Catalog, Features};
use slopt::emit::assemble_ir;
use slopt::encode::{encode, encode_all, form_signature, to_hex};
use slopt::external::{assemble_each, assemble_listing, find_assembler};
use slopt::model::Model;
use slopt::testgen::{emitted_instructions, random_spec, register_sweep, GenConfig};
use slopt::x86::Inst;

fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/encodings.txt")
}

fn load_corpus() -> Vec<(String, Inst)> {
    std::fs::read_to_string(corpus_path())
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (hex, text) = l.split_once('\t').unwrap();
            (
                hex.to_string(),
                Inst::parse(text).unwrap_or_else(|e| panic!("{text}: {e}")),
            )
        })
        .collect()
}

fn corpus_instructions() -> Vec<Inst> {
    let emitted = emitted_instructions(0, 400);
    let mut all: Vec<Inst> = emitted.clone();
    all.extend(register_sweep(&emitted));
    let mut seen = BTreeSet::new();
    all.retain(|i| seen.insert(i.to_string()));
    all
}

/// Rewrites the corpus from the system assembler's output.
#[test]
#[ignore = "regenerates tests/data/encodings.txt with the system assembler"]
fn regenerate_corpus() {
    let assembler = find_assembler().expect("`as` on PATH");
    let insts = corpus_instructions();
    let bytes = assemble_each(&assembler, &insts).unwrap();
    let mut text = String::from("# hex\tinstruction, as produced by GNU as --64 (Intel syntax)\n");
    for (i, b) in insts.iter().zip(bytes) {
        text.push_str(&format!("{}\t{i}\n", to_hex(&b)));
    }
    std::fs::write(corpus_path(), text).unwrap();
}

#[test]
fn encoder_matches_corpus() {
    let corpus = load_corpus();
    assert!(corpus.len() > 500, "corpus has {} entries", corpus.len());
    let mismatches: Vec<String> = corpus
        .iter()
        .filter_map(|(hex, inst)| {
            let got = encode(inst)
                .map(|b| to_hex(&b))
                .unwrap_or_else(|e| e.to_string());
            (&got != hex).then(|| format!("{inst}: expected {hex}, got {got}"))
        })
        .collect();
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n"));
}

#[test]
fn every_emitted_form_is_in_corpus() {
    let covered: BTreeSet<String> = load_corpus()
        .iter()
        .map(|(_, i)| form_signature(i))
        .collect();
    let missing: BTreeSet<String> = emitted_instructions(99, 200)
        .iter()
        .map(form_signature)
        .filter(|f| !covered.contains(f))
        .collect();
    assert!(missing.is_empty(), "{missing:?}");
}

#[test]
fn whole_programs_match_system_assembler() {
    let Some(assembler) = find_assembler() else {
        eprintln!("SKIP: no system assembler");
        return;
    };
    let mut rng = slopt::oracle::rng_from_seed(5);
    for _ in 0..20 {
        let spec = Arc::new(random_spec(&mut rng, &GenConfig::default()));
        let m = Model::new(spec, &Catalog::new(Features::ALL)).unwrap();
        let p = assemble_ir(&m).unwrap();
        let theirs = assemble_listing(&assembler, &p.listing(&[])).unwrap();
        assert_eq!(
            to_hex(&encode_all(&p.insts).unwrap()),
            to_hex(&theirs),
            "{}",
            p.listing(&[])
        );
    }
}
