use std::io::Cursor;

use sluprobe::ingest::{
    parse_conversations, parse_dependencies, parse_pairs, parse_segmentations, parse_span_pairs, read_dataset,
    write_conversations, write_dependencies, write_dataset, write_pairs, write_segmentations, write_span_pairs,
};
use sluprobe::model_io::{MtlFile, NgramJson, ProbeFile};
use sluprobe::Error;
use sluprobe_core::attn::{Segmentation, SpanPair};
use sluprobe_core::model::{Label, ProbeInstance, Split, UtterancePair};
use sluprobe_core::mtl::{train_mtl, MtlConfig};
use sluprobe_core::probes::{FeatureSource, NgramVocab};
use sluprobe_core::synth::{gen_conversations, gen_shared_subspace, CorpusSpec, SharedSubspaceSpec};
use sluprobe_core::taskgen::{LabelSet, ProbeDataset};

#[test]
fn synthetic_conversations_round_trip() {
    let corpus = gen_conversations(&CorpusSpec {
        n_conversations: 5,
        seed: 3,
        ..CorpusSpec::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_conversations(&mut buf, &corpus.conversations).unwrap();
    let back = parse_conversations(Cursor::new(buf)).unwrap();
    assert_eq!(back, corpus.conversations);
}

#[test]
fn invalid_conversation_reports_line() {
    let text = concat!(
        r#"{"id":"c1","channels":[{"channel":0,"role":"agent"}],"turns":[{"channel":0,"tokens":[{"w":"hi","s":0,"e":10}]}]}"#,
        "\n\n",
        r#"{"id":"c2","channels":[{"channel":0,"role":"agent"}],"turns":[{"channel":1,"tokens":[{"w":"Hi","s":0,"e":10}]}]}"#,
        "\n"
    );
    match parse_conversations(Cursor::new(text)) {
        Err(Error::InvalidConversation { line, id, violations }) => {
            assert_eq!(line, 3);
            assert_eq!(id, "c2");
            assert!(violations.contains("not declared"), "{violations}");
            assert!(violations.contains("lowercase"), "{violations}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn pairs_round_trip_and_normalise() {
    let text = "{\"id\":\"p1\",\"ref\":\"Customer resolution\",\"hyp\":\"customer  REVOLUTION\"}\n";
    let pairs = parse_pairs(Cursor::new(text)).unwrap();
    assert_eq!(pairs[0], UtterancePair::from_text("p1", "customer resolution", "customer revolution").unwrap());
    let mut buf = Vec::new();
    write_pairs(&mut buf, &pairs).unwrap();
    assert_eq!(parse_pairs(Cursor::new(buf)).unwrap(), pairs);
}

#[test]
fn dependencies_round_trip() {
    let text = "1\tthe\t2\tdet\n2\tdog\t3\tnsubj\n3\tbarks\t0\troot\n\n1\tyes\t0\troot\n";
    let sents = parse_dependencies(Cursor::new(text)).unwrap();
    assert_eq!(sents.len(), 2);
    assert_eq!(sents[0].heads, [2, 3, 0]);
    let mut buf = Vec::new();
    write_dependencies(&mut buf, &sents).unwrap();
    assert_eq!(parse_dependencies(Cursor::new(buf)).unwrap(), sents);
}

#[test]
fn spans_and_segments_round_trip() {
    let spans = vec![SpanPair {
        id: "x".into(),
        entity: 0..2,
        value: 3..5,
    }];
    let mut buf = Vec::new();
    write_span_pairs(&mut buf, &spans).unwrap();
    assert_eq!(parse_span_pairs(Cursor::new(buf)).unwrap(), spans);

    let segs = vec![(
        "y".to_string(),
        Segmentation {
            segments: vec![1..3, 4..6],
            separators: vec![3, 6],
            initial: Some(0),
        },
    )];
    let mut buf = Vec::new();
    write_segmentations(&mut buf, &segs).unwrap();
    assert_eq!(parse_segmentations(Cursor::new(buf)).unwrap(), segs);
}

fn instance(id: &str, label: Label, split: Split, position: Option<usize>) -> ProbeInstance {
    ProbeInstance {
        id: id.into(),
        conv_id: id.split('#').next().unwrap().into(),
        text: "um so yes".into(),
        label,
        split,
        position,
    }
}

#[test]
fn datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ProbeDataset {
        task: "error_binary".into(),
        label_set: LabelSet::classes(&["correct", "error"]),
        instances: vec![
            instance("p1#0", Label::Class("correct".into()), Split::Train, Some(0)),
            instance("p1#2", Label::Class("error".into()), Split::Train, Some(2)),
            instance("p2#1", Label::Class("error".into()), Split::Valid, Some(1)),
            instance("p3#0", Label::Class("correct".into()), Split::Test, Some(0)),
        ],
        seed: 4,
    };
    write_dataset(&classes, &dir.path().join("eb")).unwrap();
    assert_eq!(read_dataset(&dir.path().join("eb")).unwrap(), classes);

    let values = ProbeDataset {
        task: "wer".into(),
        label_set: LabelSet::Regression,
        instances: vec![
            instance("a", Label::Value(16.666666666666668), Split::Train, None),
            instance("b", Label::Value(0.1 + 0.2), Split::Test, None),
        ],
        seed: 0,
    };
    write_dataset(&values, &dir.path().join("wer")).unwrap();
    assert_eq!(read_dataset(&dir.path().join("wer")).unwrap(), values);
}

#[test]
fn empty_train_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = ProbeDataset {
        task: "t".into(),
        label_set: LabelSet::classes(&["a", "b"]),
        instances: vec![instance("x", Label::Class("a".into()), Split::Test, None)],
        seed: 0,
    };
    assert!(write_dataset(&ds, dir.path()).is_err());
}

#[test]
fn probe_files_round_trip() {
    let vocab = NgramVocab::fit(["um so yes", "no thanks"], 2);
    let json = NgramJson::from_vocab(&vocab);
    assert_eq!(json.to_vocab(), vocab);
    let file = ProbeFile {
        task: "t".into(),
        layer: None,
        ngrams: Some(json),
        head: sluprobe::model_io::HeadJson::from_model(&sluprobe_core::probes::ProbeModel::new(
            LabelSet::classes(&["a", "b"]),
            vocab.len(),
        )),
    };
    let text = serde_json::to_string(&file).unwrap();
    let back: ProbeFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back.head.to_model().unwrap(), file.head.to_model().unwrap());
}

#[test]
fn mtl_file_round_trips_at_f32_precision() {
    let s = gen_shared_subspace(&SharedSubspaceSpec {
        dim: 4,
        n_items: 120,
        directions: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        separation: 4.0,
        noise_sigma: 1.0,
        seed: 1,
    })
    .unwrap();
    let ds = |t: usize, name: &str| ProbeDataset {
        task: name.into(),
        label_set: LabelSet::classes(&["neg", "pos"]),
        instances: s.instances(t, 80, 20),
        seed: 0,
    };
    let (a, b) = (ds(0, "a"), ds(1, "b"));
    let config = MtlConfig {
        width: 6,
        epochs: 2,
        ..MtlConfig::default()
    };
    let run = train_mtl(&[&a, &b], FeatureSource::Store { store: &s.store, layer: 0 }, &config).unwrap();
    let file = MtlFile::from_model(&run.model, 0);
    let back: MtlFile = serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap();
    let model = back.to_model().unwrap();
    assert_eq!(model.trunk.width, 6);
    for (x, y) in model.trunk.weights.iter().zip(&run.model.trunk.weights) {
        assert_eq!(*x, *y as f32 as f64);
    }
    assert_eq!(model.heads.keys().collect::<Vec<_>>(), ["a", "b"]);
}
