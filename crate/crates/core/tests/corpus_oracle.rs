use npd_core::corpus::{gen_corpus, read_corpus, split_corpus, write_corpus, TaskKind, TaskSpec, Vocab, BOS, EOS, SEP};

fn oracle(kind: TaskKind, alphabet: u32, payload: &[u32]) -> Vec<u32> {
    let symbols: Vec<u32> = payload.iter().map(|t| t - 4).collect();
    let mut out: Vec<u32> = match kind {
        TaskKind::Reverse => symbols.iter().rev().map(|s| s + 4).collect(),
        TaskKind::ModAdd => (1..=symbols.len())
            .map(|n| symbols[..n].iter().sum::<u32>() % alphabet + 4)
            .collect(),
    };
    out.push(EOS);
    out
}

#[test]
fn targets_match_independent_recomputation() {
    let vocab = Vocab::new(20).unwrap();
    for kind in [TaskKind::Reverse, TaskKind::ModAdd] {
        let spec = TaskSpec {
            kind,
            prompt_len_range: (1, 6),
            alphabet_size: 11,
            seed: 12,
        };
        let examples = gen_corpus(&spec, &vocab, 2000).unwrap();
        for (i, e) in examples.iter().enumerate() {
            assert_eq!(e.id, i as u64);
            assert_eq!(e.prompt[0], BOS);
            assert_eq!(*e.prompt.last().unwrap(), SEP);
            let payload = e.payload();
            assert!((1..=6).contains(&payload.len()));
            assert!(payload.iter().all(|&t| (4..15).contains(&t)));
            assert_eq!(e.target, oracle(kind, 11, payload));
        }
        assert_eq!(gen_corpus(&spec, &vocab, 2000).unwrap(), examples);
    }
}

#[test]
fn corpus_file_round_trip_and_split() {
    let vocab = Vocab::new(16).unwrap();
    let spec = TaskSpec {
        kind: TaskKind::Reverse,
        prompt_len_range: (1, 3),
        alphabet_size: 12,
        seed: 1,
    };
    let examples = gen_corpus(&spec, &vocab, 100).unwrap();
    let (train, eval) = split_corpus(&examples, (0.9, 0.1)).unwrap();
    assert_eq!((train.len(), eval.len()), (90, 10));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_corpus(&train, &path).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), train);
}
