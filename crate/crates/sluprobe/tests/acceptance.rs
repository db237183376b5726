#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use sluprobe_core::align::{align, apply_script, edit_distance, label_error_tokens, wer, ErrorLabel};
use sluprobe_core::attn::{
    attention_buckets, dependency_uas, entity_value_accuracy, HeadSelection, Segmentation, SpanPair,
};
use sluprobe_core::linalg::FeatureRow;
use sluprobe_core::model::{
    ChannelInfo, Conversation, DependencySentence, Label, ProbeInstance, Role, Split, TimedToken, Turn, UtterancePair,
};
use sluprobe_core::mtl::{evaluate_transfer, train_mtl, MtlConfig, MtlTrainer, TransferMode};
use sluprobe_core::probes::{
    evaluate_probe, loss_and_grad, sweep_layers, train_probe, FeatureSource, NgramVocab, ProbeModel, Target,
    TrainConfig,
};
use sluprobe_core::rng::Stream;
use sluprobe_core::store::{Matrix, RecordKey, TensorStore};
use sluprobe_core::synth::{
    corrupt_indexed, gen_conversations, gen_feature_store, gen_shared_subspace, one_hot_attention,
    plant_dependency_attention, random_attention, random_dependency_sentence, random_sentence,
    uniform_attention, AttentionSpec, CorpusSpec, ErrorRates, FeatureSpec, SharedSubspace, SharedSubspaceSpec,
    SHARED_VOCAB,
};
use sluprobe_core::taskgen::{
    gen_utterance_task, merge_channels, merged_text, utterance_task_candidates, LabelSet, ProbeDataset, TaskConfig,
    TaskKind,
};

type Outcome = Result<String, Box<dyn std::error::Error>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+).into());
        }
    };
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sluprobe"));
    c.env_remove("SLUPROBE_CACHE");
    c
}

fn run_cli(cwd: &Path, args: &[&str]) -> Result<(), Box<dyn std::error::Error>> {
    let o = bin().args(args).current_dir(cwd).output()?;
    ensure!(
        o.status.success(),
        "`sluprobe {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&o.stderr).trim()
    );
    Ok(())
}

fn macro_f1(m: &sluprobe_core::probes::Metrics) -> f64 {
    m.macro_f1.unwrap_or(f64::NAN)
}

fn a1() -> Outcome {
    let pair = UtterancePair::from_text(
        "t1",
        "customer resolution is our primary motive",
        "customer resolution is hour primary motive",
    )?;
    let ops = align(&pair.reference, &pair.hypothesis);
    let stats = wer(&ops, pair.reference.len())?;
    ensure!((stats.wer - 16.67).abs() <= 0.01, "wer {}", stats.wer);
    ensure!(
        (stats.substitutions, stats.deletions, stats.insertions) == (1, 0, 0),
        "S/D/I {}/{}/{}",
        stats.substitutions,
        stats.deletions,
        stats.insertions
    );
    let errors: Vec<_> = label_error_tokens(&ops, pair.hypothesis.len())?
        .into_iter()
        .filter(|l| l.label.is_error())
        .collect();
    ensure!(
        errors.len() == 1 && errors[0].label == ErrorLabel::Substitution && pair.hypothesis[errors[0].hyp_index] == "hour",
        "error tokens {errors:?}"
    );

    let dir = tempfile::tempdir()?;
    fs::write(
        dir.path().join("pairs.jsonl"),
        "{\"id\":\"t1\",\"ref\":\"customer resolution is our primary motive\",\"hyp\":\"customer resolution is hour primary motive\"}\n",
    )?;
    run_cli(dir.path(), &["align", "--in", "pairs.jsonl", "--out", "wer.csv"])?;
    let csv = fs::read_to_string(dir.path().join("wer.csv"))?;
    ensure!(csv == "id,n_ref,S,D,I,wer\nt1,6,1,0,0,16.67\n", "align csv {csv:?}");
    Ok(format!("WER {:.2}, substitution on \"hour\"", stats.wer))
}

/// Every alignment of `r` against `h`, explored without memoisation.
fn exhaustive(r: &[u8], h: &[u8]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rt)), Some((b, ht))) => {
            let diag = exhaustive(rt, ht) + usize::from(a != b);
            diag.min(exhaustive(rt, h) + 1).min(exhaustive(r, ht) + 1)
        }
    }
}

/// Minimum edits by recursion over suffix pairs.
fn recursive(r: &[u8], h: &[u8]) -> usize {
    fn go(r: &[u8], h: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == r.len() {
            return h.len() - j;
        }
        if j == h.len() {
            return r.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = (go(r, h, i + 1, j + 1, memo) + usize::from(r[i] != h[j]))
            .min(go(r, h, i + 1, j, memo) + 1)
            .min(go(r, h, i, j + 1, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(r, h, 0, 0, &mut HashMap::new())
}

fn a2() -> Outcome {
    let mut rng = Stream::new(2024, 100, 0);
    let mut exhaustive_checked = 0;
    for n in 0..1000 {
        let seq = |rng: &mut Stream| -> Vec<u8> {
            let len = rng.index(13);
            (0..len).map(|_| rng.index(5) as u8).collect()
        };
        let r = seq(&mut rng);
        let h = seq(&mut rng);
        let ops = align(&r, &h);
        let d = edit_distance(&ops);
        let oracle = recursive(&r, &h);
        ensure!(d == oracle, "pair {n}: {r:?} vs {h:?}: dp {d}, oracle {oracle}");
        ensure!(apply_script(&r, &h, &ops)? == h, "pair {n}: script does not replay");
        if r.len() + h.len() <= 14 {
            ensure!(d == exhaustive(&r, &h), "pair {n}: exhaustive search disagrees");
            exhaustive_checked += 1;
        }
    }
    Ok(format!("1000 pairs agree ({exhaustive_checked} also by exhaustive search)"))
}

fn planted_vs_aligned(rates: &ErrorRates, seed: u64, n: usize) -> Result<(usize, usize), Box<dyn std::error::Error>> {
    let mut rng = Stream::new(seed, 101, 0);
    let (mut agree, mut total) = (0, 0);
    for i in 0..n {
        let len = 5 + rng.index(16);
        let reference = random_sentence(len, &mut rng);
        let (hyp, planted) = corrupt_indexed(&reference, rates, seed, i as u64);
        let expected = label_error_tokens(&planted, hyp.len())?;
        let got = label_error_tokens(&align(&reference, &hyp), hyp.len())?;
        total += expected.len().max(got.len());
        agree += expected.iter().zip(&got).filter(|(a, b)| a == b).count();
    }
    Ok((agree, total))
}

fn a3() -> Outcome {
    let gapped = ErrorRates::new(0.1, 0.1, 0.1)?.with_min_gap(2);
    let (agree, total) = planted_vs_aligned(&gapped, 31, 3000)?;
    ensure!(agree == total, "separated edits: {agree}/{total} tokens agree");
    let free = ErrorRates::new(0.05, 0.05, 0.05)?;
    let (agree2, total2) = planted_vs_aligned(&free, 32, 3000)?;
    let share = agree2 as f64 / total2 as f64;
    ensure!(share >= 0.95, "unrestricted: agreement {:.4}", share);
    Ok(format!("separated {agree}/{total}, unrestricted {:.2}%", 100.0 * share))
}

fn max_rel_error(model: &ProbeModel, rows: &[FeatureRow], targets: &[Target]) -> f64 {
    let l2 = 0.01;
    let (_, grad) = loss_and_grad(model, rows, targets, l2);
    let p0 = model.params();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..p0.len() {
        let mut m = model.clone();
        let mut p = p0.clone();
        p[k] += h;
        m.set_params(&p).unwrap();
        let up = loss_and_grad(&m, rows, targets, l2).0;
        p[k] -= 2.0 * h;
        m.set_params(&p).unwrap();
        let down = loss_and_grad(&m, rows, targets, l2).0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

fn a4() -> Outcome {
    let mut worst = 0.0f64;
    for point in 0..10u64 {
        let mut rng = Stream::new(404, 102, point);
        let dim = 6;
        let rows: Vec<FeatureRow> =
            (0..16).map(|_| FeatureRow::Dense((0..dim).map(|_| rng.normal()).collect())).collect();
        for head in [LabelSet::classes(&["a", "b", "c", "d"]), LabelSet::Regression] {
            let mut model = ProbeModel::new(head.clone(), dim);
            let p: Vec<f64> = model.params().iter().map(|_| rng.normal()).collect();
            model.set_params(&p)?;
            let targets: Vec<Target> = match head {
                LabelSet::Classes(_) => (0..16).map(|_| Target::Class(rng.index(4))).collect(),
                LabelSet::Regression => (0..16).map(|_| Target::Value(2.0 * rng.normal())).collect(),
            };
            worst = worst.max(max_rel_error(&model, &rows, &targets));
        }
    }
    ensure!(worst <= 1e-4, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.2e}"))
}

fn split_of(i: usize) -> Split {
    match i % 20 {
        0..=2 => Split::Valid,
        3..=5 => Split::Test,
        _ => Split::Train,
    }
}

fn planted_dataset(n_per_class: usize, layers: u32, informative: u32, seed: u64) -> Result<(ProbeDataset, TensorStore), Box<dyn std::error::Error>> {
    let classes = vec!["neg".to_string(), "pos".to_string()];
    let planted = gen_feature_store(&FeatureSpec {
        classes: classes.clone(),
        dim: 16,
        separation: 4.0,
        noise_sigma: 1.0,
        n_per_class,
        layers,
        informative_layer: informative,
        seed,
    })?;
    let mut instances = planted.instances(&classes, Split::Train);
    for (i, inst) in instances.iter_mut().enumerate() {
        inst.split = split_of(i);
    }
    let ds = ProbeDataset {
        task: "planted".into(),
        label_set: LabelSet::Classes(classes),
        instances,
        seed,
    };
    Ok((ds, planted.store))
}

fn a5() -> Outcome {
    let (ds, store) = planted_dataset(1000, 0, 0, 5)?;
    let source = FeatureSource::Store { store: &store, layer: 0 };
    let config = TrainConfig::default();
    ensure!(config.epochs <= 20, "{} epochs", config.epochs);
    let model = train_probe(&ds, source, &config)?;
    let f1 = macro_f1(&evaluate_probe(&model, &ds, Split::Test, source)?);
    ensure!(f1 >= 0.95, "planted macro-F1 {f1:.4}");

    let mut shuffled = ds.clone();
    let mut labels: Vec<Label> = shuffled.instances.iter().map(|i| i.label.clone()).collect();
    Stream::new(5, 103, 0).shuffle(&mut labels);
    for (inst, l) in shuffled.instances.iter_mut().zip(labels) {
        inst.label = l;
    }
    let model = train_probe(&shuffled, source, &config)?;
    let chance = macro_f1(&evaluate_probe(&model, &shuffled, Split::Test, source)?);
    ensure!(chance <= 0.60, "shuffled macro-F1 {chance:.4}");
    Ok(format!("planted {f1:.4}, shuffled {chance:.4}"))
}

fn a6() -> Outcome {
    let top = 6;
    let mut found = Vec::new();
    for k in [0, 3, top] {
        let (ds, store) = planted_dataset(400, top, k, 60 + k as u64)?;
        let report = sweep_layers(&ds, &store, &TrainConfig::default())?;
        ensure!(report.best_layer == k, "planted layer {k}, best layer {}", report.best_layer);
        found.push(report.best_layer);
    }
    Ok(format!("best layers {found:?} over layers 0..={top}"))
}

/// Row-stochastic row with `weight` on `target` and the rest spread evenly.
fn peaked_row(t: usize, target: usize, weight: f32) -> Vec<f32> {
    let rest = (1.0 - weight) / (t - 1) as f32;
    (0..t).map(|j| if j == target { weight } else { rest }).collect()
}

fn a7() -> Outcome {
    let t = 8;
    let mut data = Vec::with_capacity(t * t);
    for i in 0..t {
        let row = match i {
            4 => peaked_row(t, 0, 0.6),
            5 => peaked_row(t, 1, 0.6),
            6 => peaked_row(t, 1, 0.6),
            7 => peaked_row(t, 3, 0.6),
            _ => vec![1.0 / t as f32; t],
        };
        data.extend(row);
    }
    let mut store = TensorStore::new();
    store.insert(RecordKey::attention("s1", 0, 0), Matrix::new(t, t, data)?)?;
    store.insert(RecordKey::attention("s1", 0, 1), uniform_attention(t))?;
    let pairs = [SpanPair {
        id: "s1".into(),
        entity: 0..2,
        value: 4..8,
    }];
    let single = entity_value_accuracy(&store, &pairs, HeadSelection::Single { layer: 0, head: 0 })?;
    ensure!(single.accuracy == 75.0, "single head accuracy {}", single.accuracy);
    let pooled = entity_value_accuracy(&store, &pairs, HeadSelection::MaxPooled { layer: 0 })?;
    ensure!(pooled.accuracy == 75.0, "max-pooled accuracy {}", pooled.accuracy);
    Ok(format!("accuracy {:.1} ({} of {})", single.accuracy, single.successes, single.total))
}

fn random_segmentation(t: usize, rng: &mut Stream) -> Segmentation {
    let mut seg = Segmentation {
        segments: Vec::new(),
        separators: Vec::new(),
        initial: Some(0),
    };
    let mut pos = 1;
    while pos < t {
        let len = 1 + rng.index(4.min(t - pos));
        seg.segments.push(pos..pos + len);
        pos += len;
        if pos < t {
            seg.separators.push(pos);
            pos += 1;
        }
    }
    seg
}

fn a8() -> Outcome {
    let mut rng = Stream::new(808, 104, 0);
    let mut worst = 0.0f64;
    for n in 0..100 {
        let t = 4 + rng.index(13);
        let seg = random_segmentation(t, &mut rng);
        let mut store = TensorStore::new();
        store.insert(RecordKey::attention("x", 0, 0), random_attention(t, &mut rng))?;
        let b = attention_buckets(&store, &[("x".to_string(), seg)])?;
        let dev = (b.layer(0).ok_or("no layer 0")?.sum() - 1.0).abs();
        ensure!(dev <= 1e-6, "matrix {n}: buckets sum off by {dev:e}");
        worst = worst.max(dev);
    }

    let seg = Segmentation {
        segments: vec![1..4, 5..7, 8..12],
        separators: vec![4, 7],
        initial: Some(0),
    };
    let t = seg.len();
    let targets: Vec<usize> = (0..t)
        .map(|i| match seg.segments.iter().position(|r| r.contains(&i)) {
            Some(s) => seg.segments[(s + 1) % seg.segments.len()].start,
            None => i,
        })
        .collect();
    let mut store = TensorStore::new();
    store.insert(RecordKey::attention("y", 0, 0), one_hot_attention(&targets))?;
    let b = attention_buckets(&store, &[("y".to_string(), seg)])?;
    let isa = b.layer(0).ok_or("no layer 0")?.isa_percent();
    ensure!((isa - 100.0).abs() <= 1e-9, "planted inter-segment ISA {isa}");
    Ok(format!("max |sum - 1| {worst:.1e}, planted ISA {isa:.1}%"))
}

/// Token that a uniform row `i` of length `t` points at once self is
/// excluded: the lowest other index.
fn uniform_pointer(i: usize) -> usize {
    if i == 0 {
        1
    } else {
        0
    }
}

fn a9() -> Outcome {
    let relations = ["nsubj", "obj", "det", "amod", "advmod"];
    let mut rng = Stream::new(909, 105, 0);
    let sentences: Vec<(String, DependencySentence)> = (0..200)
        .map(|i| (format!("d{i:06}"), random_dependency_sentence(4 + rng.index(12), &relations, &mut rng)))
        .collect();
    let planted = plant_dependency_attention(
        &sentences,
        &AttentionSpec {
            layers: 3,
            heads: 4,
            planted: Some((2, 1)),
            seed: 9,
        },
    )?;
    let report = dependency_uas(&planted, &sentences)?;
    for r in &report.relations {
        ensure!(r.uas == 100.0, "{}: UAS {} at layer {} head {}", r.relation, r.uas, r.layer, r.head);
        ensure!((r.layer, r.head) == (2, 1), "{}: best cell {}/{}", r.relation, r.layer, r.head);
    }
    ensure!(report.relations.len() == relations.len(), "{} relations scored", report.relations.len());

    let mut uniform = TensorStore::new();
    for (id, s) in &sentences {
        uniform.insert(RecordKey::attention(id.clone(), 0, 0), uniform_attention(s.len()))?;
    }
    let got = dependency_uas(&uniform, &sentences)?;
    let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for (_, s) in &sentences {
        for (i, (&h, rel)) in s.heads.iter().zip(&s.relations).enumerate() {
            if h == 0 {
                continue;
            }
            let c = counts.entry(rel.as_str()).or_default();
            c[0] += usize::from(uniform_pointer(i) == h - 1);
            c[1] += usize::from(uniform_pointer(h - 1) == i);
            c[2] += 1;
        }
    }
    for (rel, [dep, head, total]) in &counts {
        let expected = 100.0 * (*dep.max(head)) as f64 / *total as f64;
        let r = got.relation(rel).ok_or_else(|| format!("{rel} missing"))?;
        ensure!(r.uas == expected, "{rel}: uniform UAS {} expected {expected}", r.uas);
    }
    Ok(format!(
        "planted 100 on {} relations; uniform matches tie rule (all {:.2})",
        counts.len(),
        got.all_micro.uas
    ))
}

fn a10() -> Outcome {
    let tok = |w: &str, s: u64| TimedToken::new(w, s, s + 150);
    let a = Turn::new(
        0,
        vec![tok("i'm", 0), tok("not", 400), tok("referring", 800), tok("to", 1000), tok("transaction", 1400)],
    );
    let b = Turn::new(
        1,
        vec![tok("yes", 200), tok("i", 500), tok("know", 650), tok("how", 1200), tok("it", 1600), tok("works", 1800)],
    );
    let conv = Conversation {
        id: "call".into(),
        channels: vec![
            ChannelInfo {
                channel: 0,
                role: Role::Agent,
            },
            ChannelInfo {
                channel: 1,
                role: Role::Customer,
            },
        ],
        turns: vec![a, b],
    };
    let expected = "i'm yes not i know referring to how transaction it works";
    let text = merged_text(&merge_channels(&conv));
    ensure!(text == expected, "merged {text:?}");
    let candidates = utterance_task_candidates(TaskKind::Overtalk, &[conv], &TaskConfig::default())?;
    ensure!(candidates.len() == 1, "{} overtalk candidates", candidates.len());
    let c = &candidates[0];
    ensure!(
        c.id == "call:o0-1" && c.text == expected && c.label == Label::Class("overtalk".into()),
        "candidate {c:?}"
    );
    Ok(format!("\"{text}\""))
}

fn gold_label(kind: TaskKind, inst: &ProbeInstance, gold: &HashMap<&str, &sluprobe_core::synth::ConversationGold>) -> Result<String, String> {
    let (conv, rest) = inst.id.split_once(':').ok_or("id without conversation")?;
    let g = gold.get(conv).ok_or("unknown conversation")?;
    let turn = |s: &str| -> Result<&sluprobe_core::synth::TurnGold, String> {
        let i: usize = s.parse().map_err(|_| format!("bad turn index {s}"))?;
        g.turns.get(i).ok_or_else(|| format!("turn {i} out of range"))
    };
    let tag = |b: bool, yes: &str, no: &str| if b { yes } else { no }.to_string();
    let (kind_char, body) = rest.split_at(1);
    Ok(match (kind, kind_char) {
        (TaskKind::Overtalk, "o") => {
            let (a, b) = body.split_once('-').ok_or("bad overtalk id")?;
            let (a, b) = (turn(a)?, turn(b)?);
            tag(a.overtalk && b.overtalk, "overtalk", "mismatch")
        }
        (TaskKind::Overtalk, "t") => tag(turn(body)?.overtalk, "mismatch", "non-overtalk"),
        (TaskKind::Pause, "t") => tag(turn(body)?.pause, "pause", "no-pause"),
        (TaskKind::Disfluency, "t") => tag(turn(body)?.disfluent, "disfluent", "fluent"),
        (TaskKind::Question, "t") => turn(body)?.question.as_str().to_string(),
        (TaskKind::SpeakerRole, "t") => turn(body)?.role.as_str().to_string(),
        (TaskKind::ResponseLength, "r") => {
            let i: usize = body.parse().map_err(|_| "bad response index")?;
            tag(turn(&(i + 1).to_string())?.long, "long", "short")
        }
        (TaskKind::TurnTaking, "s") => {
            let (t, k) = body.split_once('.').ok_or("bad segment id")?;
            let k: usize = k.parse().map_err(|_| "bad segment index")?;
            match turn(t)?.segment_continues.get(k).copied().flatten() {
                Some(true) => "turn-continue".into(),
                Some(false) => "turn-break".into(),
                None => return Err(format!("segment {k} has no successor")),
            }
        }
        _ => return Err(format!("unexpected id shape {}", inst.id)),
    })
}

fn a11() -> Outcome {
    let corpus = gen_conversations(&CorpusSpec {
        n_conversations: 8000,
        seed: 11,
        ..CorpusSpec::default()
    })?;
    let gold: HashMap<&str, _> = corpus.gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let config = TaskConfig {
        seed: 11,
        ..TaskConfig::default()
    };
    let mut checked = 0usize;
    for kind in TaskKind::ALL {
        let ds = gen_utterance_task(kind, &corpus.conversations, &config)
            .map_err(|e| format!("{}: {e}", kind.as_str()))?;
        ensure!(ds.counts() == [10_000, 2_000, 2_000], "{}: sizes {:?}", kind.as_str(), ds.counts());
        let mut conv_split: HashMap<&str, Split> = HashMap::new();
        let mut per_class: BTreeMap<(usize, String), usize> = BTreeMap::new();
        for inst in &ds.instances {
            let want = gold_label(kind, inst, &gold).map_err(|e| format!("{}: {}: {e}", kind.as_str(), inst.id))?;
            let got = inst.label.class().unwrap_or_default();
            ensure!(got == want, "{}: {} labeled {got}, gold {want}", kind.as_str(), inst.id);
            let s = *conv_split.entry(inst.conv_id.as_str()).or_insert(inst.split);
            ensure!(s == inst.split, "{}: conversation {} spans splits", kind.as_str(), inst.conv_id);
            *per_class.entry((inst.split.index(), got.to_string())).or_default() += 1;
            checked += 1;
        }
        let classes = match &ds.label_set {
            LabelSet::Classes(c) => c.clone(),
            LabelSet::Regression => Vec::new(),
        };
        for s in 0..3 {
            let counts: Vec<usize> = classes.iter().map(|c| per_class.get(&(s, c.clone())).copied().unwrap_or(0)).collect();
            let (lo, hi) = (counts.iter().min().copied().unwrap_or(0), counts.iter().max().copied().unwrap_or(0));
            ensure!(hi - lo <= 1, "{}: split {s} class counts {counts:?}", kind.as_str());
        }
    }

    let small = gen_conversations(&CorpusSpec {
        n_conversations: 30,
        seed: 11,
        ..CorpusSpec::default()
    })?;
    let err = gen_utterance_task(TaskKind::Pause, &small.conversations, &config)
        .err()
        .ok_or("30 conversations met 10k/2k/2k")?;
    ensure!(err.to_string().contains("achievable"), "infeasible error: {err}");
    Ok(format!("{checked} labels match gold over 7 tasks at 10k/2k/2k"))
}

fn shared(n: usize, seed: u64) -> Result<SharedSubspace, Box<dyn std::error::Error>> {
    let dim = 8;
    let axis = |k: usize| (0..dim).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    Ok(gen_shared_subspace(&SharedSubspaceSpec {
        dim,
        n_items: n,
        directions: vec![axis(0), axis(1)],
        separation: 4.0,
        noise_sigma: 1.0,
        seed,
    })?)
}

fn binary_task(s: &SharedSubspace, t: usize, name: &str, train: usize, valid: usize) -> ProbeDataset {
    ProbeDataset {
        task: name.into(),
        label_set: LabelSet::classes(&["neg", "pos"]),
        instances: s.instances(t, train, valid),
        seed: 0,
    }
}

fn a12() -> Outcome {
    let s = shared(3000, 12)?;
    let a = binary_task(&s, 0, "a", 2000, 500);
    let b = binary_task(&s, 1, "b", 2000, 500);
    let source = FeatureSource::Store { store: &s.store, layer: 0 };
    let run = train_mtl(&[&a, &b], source, &MtlConfig { seed: 12, ..MtlConfig::default() })?;
    let mut detail = Vec::new();
    for ds in [&a, &b] {
        let probe = train_probe(ds, source, &TrainConfig::default())?;
        let single = macro_f1(&evaluate_probe(&probe, ds, Split::Test, source)?);
        let multi = macro_f1(&evaluate_transfer(
            &run.model,
            ds,
            source,
            TransferMode::FrozenEverything,
            &TrainConfig::default(),
        )?);
        ensure!((single - multi).abs() <= 0.02, "{}: single {single:.4}, mtl {multi:.4}", ds.task);
        detail.push(format!("{} {multi:.3} vs {single:.3}", ds.task));
    }

    let mut trainer = MtlTrainer::new(&[&a, &b], source, &MtlConfig { width: 16, seed: 12, ..MtlConfig::default() })?;
    for step in 0..20 {
        let before = trainer.model();
        let (t, _) = trainer.step()?;
        let after = trainer.model();
        let (mine, other) = if t == 0 { ("a", "b") } else { ("b", "a") };
        ensure!(before.heads[other] == after.heads[other], "step {step}: head {other} moved");
        ensure!(before.heads[mine] != after.heads[mine], "step {step}: head {mine} did not move");
    }
    Ok(format!("{}; heads isolated over 20 steps", detail.join(", ")))
}

fn a13() -> Outcome {
    let mut rng = Stream::new(1313, 106, 0);
    let keyword = "chargeback";
    let instances: Vec<ProbeInstance> = (0..2000)
        .map(|i| {
            let mut words = random_sentence(6 + rng.index(7), &mut rng);
            let positive = i % 2 == 1;
            if positive {
                let at = rng.index(words.len() + 1);
                words.insert(at, keyword.to_string());
            }
            ProbeInstance {
                id: format!("k{i:05}"),
                conv_id: format!("k{i:05}"),
                text: words.join(" "),
                label: Label::Class(if positive { "flagged" } else { "plain" }.into()),
                split: split_of(i / 2),
                position: None,
            }
        })
        .collect();
    ensure!(!SHARED_VOCAB.contains(&keyword), "keyword is in the base vocabulary");
    let ds = ProbeDataset {
        task: "keyword".into(),
        label_set: LabelSet::classes(&["plain", "flagged"]),
        instances,
        seed: 0,
    };
    let vocab = NgramVocab::fit_dataset(&ds, 4);
    let source = FeatureSource::Ngrams(&vocab);
    let model = train_probe(&ds, source, &TrainConfig::default())?;
    let f1 = macro_f1(&evaluate_probe(&model, &ds, Split::Test, source)?);
    ensure!(f1 >= 0.90, "n-gram macro-F1 {f1:.4}");
    Ok(format!("macro-F1 {f1:.4} over {} n-grams up to 4", vocab.len()))
}

fn pipeline(dir: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let tasks = ["pause", "speaker_role", "turn_taking"];
    run_cli(dir, &["synth-corpus", "--out", "corpus", "--seed", "21", "--conversations", "400"])?;
    for t in tasks {
        let out = format!("ds/{t}");
        run_cli(
            dir,
            &[
                "gen-tasks", "--task", t, "--in", "corpus/convs.jsonl", "--out", &out, "--seed", "21", "--train", "600",
                "--val", "150", "--test", "150",
            ],
        )?;
    }
    let mut store_args = vec!["synth-store", "--kind", "features", "--out", "feats.bin", "--seed", "21", "--layers", "4"];
    let mut sweep_args = vec!["--jobs", "3", "sweep-layers", "--store", "feats.bin", "--out", "sweep.csv", "--seed", "21"];
    let datasets: Vec<String> = tasks.iter().map(|t| format!("ds/{t}")).collect();
    for d in &datasets {
        store_args.extend(["--dataset", d.as_str()]);
        sweep_args.extend(["--dataset", d.as_str()]);
    }
    run_cli(dir, &store_args)?;
    run_cli(dir, &sweep_args)?;
    run_cli(dir, &["report", "--probe", "planted=sweep.csv", "--out", "report"])?;
    Ok(())
}

fn tree(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, Box<dyn std::error::Error>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root)?.to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn a14() -> Outcome {
    let (x, y) = (tempfile::tempdir()?, tempfile::tempdir()?);
    pipeline(x.path())?;
    pipeline(y.path())?;
    let (tx, ty) = (tree(x.path())?, tree(y.path())?);
    let names: BTreeSet<&String> = tx.keys().chain(ty.keys()).collect();
    for n in &names {
        ensure!(tx.get(*n) == ty.get(*n), "{n} differs between runs");
    }
    ensure!(tx.contains_key("report/tables.md"), "report/tables.md missing");
    let sweep = String::from_utf8_lossy(&tx["sweep.csv"]).into_owned();
    ensure!(sweep.lines().count() > 1, "empty sweep");
    Ok(format!("{} files identical across two runs", names.len()))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { name: "A1 wer golden", budget: secs(1), run: a1 },
        Criterion { name: "A2 alignment oracle", budget: secs(60), run: a2 },
        Criterion { name: "A3 error typing recovery", budget: secs(30), run: a3 },
        Criterion { name: "A4 gradient check", budget: secs(10), run: a4 },
        Criterion { name: "A5 probe learnability", budget: secs(60), run: a5 },
        Criterion { name: "A6 layer sweep", budget: secs(120), run: a6 },
        Criterion { name: "A7 entity-value golden", budget: secs(60), run: a7 },
        Criterion { name: "A8 attention buckets", budget: secs(60), run: a8 },
        Criterion { name: "A9 dependency probe", budget: secs(60), run: a9 },
        Criterion { name: "A10 overtalk merge golden", budget: secs(60), run: a10 },
        Criterion { name: "A11 task generation", budget: secs(120), run: a11 },
        Criterion { name: "A12 multi-task learning", budget: secs(180), run: a12 },
        Criterion { name: "A13 n-gram baseline", budget: secs(60), run: a13 },
        Criterion { name: "A14 end-to-end determinism", budget: secs(300), run: a14 },
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run));
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(Ok(d)) if took <= c.budget => (true, d),
            Ok(Ok(d)) => (false, format!("{d}; over budget")),
            Ok(Err(e)) => (false, e.to_string()),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:<28} {:>7.2}s / {:>4}s  {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
