//! JSONL and TSV readers/writers for conversations, ASR pairs, dependency
//! sentences, labeled utterances, span annotations and probe datasets.
//!
//! Blank lines are ignored; every other line must parse or the whole read
//! fails with its 1-based line number.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sluprobe_core::attn::{Segmentation, SpanPair};
use sluprobe_core::model::{
    join_tokens, normalize_tokens, validate_conversation, Annotations, ChannelInfo, Conversation,
    DependencySentence, Label, LabeledUtterance, ProbeInstance, QuestionClass, Role, Split,
    TimedToken, Turn, UtterancePair,
};
use sluprobe_core::synth::ConversationGold;
use sluprobe_core::taskgen::{LabelSet, ProbeDataset};

use crate::error::{Error, Result};

pub fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stream>", e)
}

/// Non-blank lines with their 1-based line numbers.
fn lines(reader: impl BufRead) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(io_err(e))),
        })
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<(usize, T)>> {
    lines(reader)
        .map(|l| {
            let (n, line) = l?;
            serde_json::from_str(&line)
                .map(|v| (n, v))
                .map_err(|e| Error::parse(n, e))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(mut w: impl Write, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Serialize, Deserialize)]
struct ChannelRec {
    channel: u32,
    role: String,
}

#[derive(Serialize, Deserialize)]
struct TokenRec {
    w: String,
    s: u64,
    e: u64,
}

#[derive(Serialize, Deserialize, Default)]
struct AnnoRec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    disfluent: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TurnRec {
    channel: u32,
    tokens: Vec<TokenRec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anno: Option<AnnoRec>,
}

#[derive(Serialize, Deserialize)]
struct ConversationRec {
    id: String,
    channels: Vec<ChannelRec>,
    turns: Vec<TurnRec>,
}

fn conversation_from(line: usize, rec: ConversationRec) -> Result<Conversation> {
    let channels = rec
        .channels
        .into_iter()
        .map(|c| {
            Role::parse(&c.role)
                .map(|role| ChannelInfo {
                    channel: c.channel,
                    role,
                })
                .ok_or_else(|| Error::parse(line, format!("unknown role {:?}", c.role)))
        })
        .collect::<Result<Vec<_>>>()?;
    let turns = rec
        .turns
        .into_iter()
        .map(|t| {
            let anno = t.anno.unwrap_or_default();
            let question = match anno.question {
                None => None,
                Some(q) => Some(
                    QuestionClass::parse(&q)
                        .ok_or_else(|| Error::parse(line, format!("unknown question class {q:?}")))?,
                ),
            };
            Ok(Turn {
                channel: t.channel,
                tokens: t
                    .tokens
                    .into_iter()
                    .map(|k| TimedToken::new(k.w, k.s, k.e))
                    .collect(),
                annotations: Annotations {
                    disfluent: anno.disfluent,
                    question,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let conv = Conversation {
        id: rec.id,
        channels,
        turns,
    };
    let violations = validate_conversation(&conv);
    if !violations.is_empty() {
        return Err(Error::InvalidConversation {
            line,
            id: conv.id,
            violations: violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    Ok(conv)
}

fn conversation_rec(c: &Conversation) -> ConversationRec {
    ConversationRec {
        id: c.id.clone(),
        channels: c
            .channels
            .iter()
            .map(|ch| ChannelRec {
                channel: ch.channel,
                role: ch.role.as_str().into(),
            })
            .collect(),
        turns: c
            .turns
            .iter()
            .map(|t| TurnRec {
                channel: t.channel,
                tokens: t
                    .tokens
                    .iter()
                    .map(|k| TokenRec {
                        w: k.text.clone(),
                        s: k.start_ms,
                        e: k.end_ms,
                    })
                    .collect(),
                anno: (!t.annotations.is_empty()).then(|| AnnoRec {
                    disfluent: t.annotations.disfluent,
                    question: t.annotations.question.map(|q| q.as_str().into()),
                }),
            })
            .collect(),
    }
}

/// One validated conversation per line, in file order.
pub fn parse_conversations(reader: impl BufRead) -> Result<Vec<Conversation>> {
    parse_jsonl::<ConversationRec>(reader)?
        .into_iter()
        .map(|(n, rec)| conversation_from(n, rec))
        .collect()
}

pub fn write_conversations(w: impl Write, convs: &[Conversation]) -> Result<()> {
    write_jsonl(w, convs.iter().map(conversation_rec))
}

#[derive(Serialize, Deserialize)]
struct PairRec {
    id: String,
    #[serde(rename = "ref")]
    reference: String,
    hyp: String,
}

/// Pairs are lowercased and whitespace-tokenised; an empty reference is an error.
pub fn parse_pairs(reader: impl BufRead) -> Result<Vec<UtterancePair>> {
    parse_jsonl::<PairRec>(reader)?
        .into_iter()
        .map(|(n, p)| {
            UtterancePair::from_text(p.id, &p.reference, &p.hyp).map_err(|e| Error::parse(n, e))
        })
        .collect()
}

pub fn write_pairs(w: impl Write, pairs: &[UtterancePair]) -> Result<()> {
    write_jsonl(
        w,
        pairs.iter().map(|p| PairRec {
            id: p.id.clone(),
            reference: join_tokens(p.reference.iter().map(String::as_str)),
            hyp: join_tokens(p.hypothesis.iter().map(String::as_str)),
        }),
    )
}

/// Tab-separated `index token head relation` rows, blank line between
/// sentences.
pub fn parse_dependencies(reader: impl BufRead) -> Result<Vec<DependencySentence>> {
    let mut out = Vec::new();
    let mut cur = DependencySentence {
        tokens: Vec::new(),
        heads: Vec::new(),
        relations: Vec::new(),
    };
    let mut rows: Vec<usize> = Vec::new();
    let finish = |cur: &mut DependencySentence, rows: &mut Vec<usize>, out: &mut Vec<DependencySentence>| -> Result<()> {
        if cur.is_empty() {
            return Ok(());
        }
        let n = cur.len();
        if let Some(i) = cur.heads.iter().position(|&h| h > n) {
            return Err(Error::parse(
                rows[i],
                format!(
                    "sentence {} row {}: head {} out of range for {n} tokens",
                    out.len() + 1,
                    i + 1,
                    cur.heads[i]
                ),
            ));
        }
        out.push(std::mem::replace(
            cur,
            DependencySentence {
                tokens: Vec::new(),
                heads: Vec::new(),
                relations: Vec::new(),
            },
        ));
        rows.clear();
        Ok(())
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let n = i + 1;
        if line.trim().is_empty() {
            finish(&mut cur, &mut rows, &mut out)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(n, format!("expected 4 tab-separated columns, got {}", cols.len())));
        }
        let index: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(n, format!("bad index {:?}", cols[0])))?;
        if index != cur.len() + 1 {
            return Err(Error::parse(n, format!("expected index {}, got {index}", cur.len() + 1)));
        }
        let head: usize = cols[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(n, format!("bad head {:?}", cols[2])))?;
        cur.tokens.push(cols[1].trim().to_lowercase());
        cur.heads.push(head);
        cur.relations.push(cols[3].trim().to_string());
        rows.push(n);
    }
    finish(&mut cur, &mut rows, &mut out)?;
    Ok(out)
}

/// Ids for sentences of a dependency file, by position: `d000000`, ...
/// Attention stores built for such a file use the same ids.
pub fn with_sentence_ids(sentences: Vec<DependencySentence>) -> Vec<(String, DependencySentence)> {
    sentences
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("d{i:06}"), s))
        .collect()
}

pub fn write_dependencies(mut w: impl Write, sentences: &[DependencySentence]) -> Result<()> {
    for (k, s) in sentences.iter().enumerate() {
        if k > 0 {
            writeln!(w).map_err(io_err)?;
        }
        for i in 0..s.len() {
            writeln!(w, "{}\t{}\t{}\t{}", i + 1, s.tokens[i], s.heads[i], s.relations[i]).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[derive(Serialize, Deserialize)]
struct LabeledRec {
    text: String,
    label: String,
}

pub fn parse_labeled_utterances(reader: impl BufRead) -> Result<Vec<LabeledUtterance>> {
    parse_jsonl::<LabeledRec>(reader)?
        .into_iter()
        .map(|(n, r)| {
            if r.label.is_empty() {
                return Err(Error::parse(n, "empty label"));
            }
            Ok(LabeledUtterance {
                text: r.text,
                label: r.label,
            })
        })
        .collect()
}

pub fn write_labeled_utterances(w: impl Write, items: &[LabeledUtterance]) -> Result<()> {
    write_jsonl(
        w,
        items.iter().map(|u| LabeledRec {
            text: u.text.clone(),
            label: u.label.clone(),
        }),
    )
}

/// Builds a dataset from externally split labeled utterances. Instance ids
/// are `<split><index>` and the label set is the sorted set of labels seen.
pub fn labeled_dataset(task: &str, splits: [&[LabeledUtterance]; 3], seed: u64) -> ProbeDataset {
    let labels: BTreeSet<&str> = splits
        .iter()
        .flat_map(|s| s.iter().map(|u| u.label.as_str()))
        .collect();
    let mut instances = Vec::new();
    for (split, items) in Split::ALL.into_iter().zip(splits) {
        for (i, u) in items.iter().enumerate() {
            let id = format!("{}{i:06}", split.as_str());
            instances.push(ProbeInstance {
                id: id.clone(),
                conv_id: id,
                text: join_tokens(normalize_tokens(&u.text).iter().map(String::as_str)),
                label: Label::Class(u.label.clone()),
                split,
                position: None,
            });
        }
    }
    ProbeDataset {
        task: task.to_string(),
        label_set: LabelSet::Classes(labels.into_iter().map(String::from).collect()),
        instances,
        seed,
    }
}

#[derive(Serialize, Deserialize)]
struct SpanRec {
    id: String,
    entity: [usize; 2],
    value: [usize; 2],
}

/// `{"id", "entity": [start, end), "value": [start, end)}` per line.
pub fn parse_span_pairs(reader: impl BufRead) -> Result<Vec<SpanPair>> {
    parse_jsonl::<SpanRec>(reader).map(|v| {
        v.into_iter()
            .map(|(_, r)| SpanPair {
                id: r.id,
                entity: r.entity[0]..r.entity[1],
                value: r.value[0]..r.value[1],
            })
            .collect()
    })
}

pub fn write_span_pairs(w: impl Write, pairs: &[SpanPair]) -> Result<()> {
    write_jsonl(
        w,
        pairs.iter().map(|p| SpanRec {
            id: p.id.clone(),
            entity: [p.entity.start, p.entity.end],
            value: [p.value.start, p.value.end],
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct SegmentationRec {
    id: String,
    segments: Vec<[usize; 2]>,
    #[serde(default)]
    separators: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<usize>,
}

pub fn parse_segmentations(reader: impl BufRead) -> Result<Vec<(String, Segmentation)>> {
    parse_jsonl::<SegmentationRec>(reader).map(|v| {
        v.into_iter()
            .map(|(_, r)| {
                (
                    r.id,
                    Segmentation {
                        segments: r.segments.iter().map(|s| s[0]..s[1]).collect(),
                        separators: r.separators,
                        initial: r.initial,
                    },
                )
            })
            .collect()
    })
}

pub fn write_segmentations(w: impl Write, items: &[(String, Segmentation)]) -> Result<()> {
    write_jsonl(
        w,
        items.iter().map(|(id, s)| SegmentationRec {
            id: id.clone(),
            segments: s.segments.iter().map(|r| [r.start, r.end]).collect(),
            separators: s.separators.clone(),
            initial: s.initial,
        }),
    )
}

#[derive(Serialize)]
struct TurnGoldRec<'a> {
    role: &'a str,
    pause: bool,
    disfluent: bool,
    question: &'a str,
    overtalk: bool,
    long: bool,
    segment_continues: &'a [Option<bool>],
}

#[derive(Serialize)]
struct GoldRec<'a> {
    id: &'a str,
    turns: Vec<TurnGoldRec<'a>>,
}

/// Generator ground truth, one conversation per line.
pub fn write_gold(w: impl Write, gold: &[ConversationGold]) -> Result<()> {
    write_jsonl(
        w,
        gold.iter().map(|g| GoldRec {
            id: &g.id,
            turns: g
                .turns
                .iter()
                .map(|t| TurnGoldRec {
                    role: t.role.as_str(),
                    pause: t.pause,
                    disfluent: t.disfluent,
                    question: t.question.as_str(),
                    overtalk: t.overtalk,
                    long: t.long,
                    segment_continues: &t.segment_continues,
                })
                .collect(),
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct InstanceRec {
    id: String,
    conv: String,
    text: String,
    label: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<usize>,
}

/// Dataset summary written as `dataset.json` next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: String,
    /// A list of class names, or the string `"regression"`.
    pub labels: Value,
    pub counts: SplitCounts,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.as_str()))
}

fn label_value(l: &Label) -> Value {
    match l {
        Label::Class(c) => Value::String(c.clone()),
        Label::Value(v) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
    }
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `dataset.json` into `dir`.
pub fn write_dataset(dataset: &ProbeDataset, dir: &Path) -> Result<DatasetManifest> {
    let [train, valid, test] = dataset.counts();
    if train == 0 {
        return Err(sluprobe_core::Error::EmptySplit("train").into());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let path = split_path(dir, split);
        let f = create(&path)?;
        write_jsonl(
            f,
            dataset.split(split).map(|i| InstanceRec {
                id: i.id.clone(),
                conv: i.conv_id.clone(),
                text: i.text.clone(),
                label: label_value(&i.label),
                position: i.position,
            }),
        )
        .map_err(|e| relocate(e, &path))?;
    }
    let manifest = DatasetManifest {
        task: dataset.task.clone(),
        labels: match &dataset.label_set {
            LabelSet::Classes(c) => Value::from(c.clone()),
            LabelSet::Regression => Value::from("regression"),
        },
        counts: SplitCounts { train, valid, test },
        seed: dataset.seed,
    };
    let path = dir.join(DATASET_MANIFEST);
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f).and_then(|_| f.flush()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn relocate(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Parse { line, message } => Error::Format(format!("{}: line {line}: {message}", path.display())),
        other => other,
    }
}

pub fn read_dataset(dir: &Path) -> Result<ProbeDataset> {
    let mpath = dir.join(DATASET_MANIFEST);
    let manifest: DatasetManifest =
        serde_json::from_reader(open(&mpath)?).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let label_set = match &manifest.labels {
        Value::String(s) if s == "regression" => LabelSet::Regression,
        Value::Array(items) => LabelSet::Classes(
            items
                .iter()
                .map(|v| v.as_str().map(String::from))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Format(format!("{}: labels must be strings", mpath.display())))?,
        ),
        other => return Err(Error::Format(format!("{}: bad labels {other}", mpath.display()))),
    };
    let mut instances = Vec::new();
    for split in Split::ALL {
        let path = split_path(dir, split);
        let recs = parse_jsonl::<InstanceRec>(open(&path)?).map_err(|e| relocate(e, &path))?;
        for (n, r) in recs {
            let label = match (&label_set, r.label) {
                (LabelSet::Regression, Value::Number(x)) => Label::Value(x.as_f64().unwrap_or(f64::NAN)),
                (LabelSet::Classes(_), Value::String(s)) => Label::Class(s),
                (_, v) => {
                    return Err(relocate(Error::parse(n, format!("label {v} does not fit label set")), &path))
                }
            };
            instances.push(ProbeInstance {
                id: r.id,
                conv_id: r.conv,
                text: r.text,
                label,
                split,
                position: r.position,
            });
        }
    }
    let dataset = ProbeDataset {
        task: manifest.task,
        label_set,
        instances,
        seed: manifest.seed,
    };
    let c = dataset.counts();
    if c != [manifest.counts.train, manifest.counts.valid, manifest.counts.test] {
        return Err(Error::Format(format!(
            "{}: manifest counts {:?} but files hold {c:?}",
            mpath.display(),
            manifest.counts
        )));
    }
    for inst in &dataset.instances {
        dataset.class_index(inst)?;
    }
    Ok(dataset)
}
