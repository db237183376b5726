//! Probe dataset synthesis from timed conversations and ASR pairs.
//!
//! Timing-derived labels (pause, overtalk, response length, turn taking) are
//! pure functions of token timestamps and the thresholds in [`TaskConfig`];
//! disfluency and question labels are read from turn annotations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::align::{align, label_error_tokens, wer, ErrorLabel};
use crate::model::{
    join_tokens, Conversation, Label, ProbeInstance, QuestionClass, Role, Split, TimedToken,
    Turn, UtterancePair,
};
use crate::rng::{tags, Stream};
use crate::{Error, Result};

/// Separator placed between the previous and current turn in
/// response-length instances.
pub const TURN_SEPARATOR: &str = "[sep]";

/// Lexical cues used to retrieve disfluency candidates.
pub mod lexicon {
    pub const FILLERS: &[&str] = &["um", "uh", "er", "ah", "hmm"];
    pub const MARKERS: &[&str] = &["well", "like", "so", "okay", "actually"];
    pub const MULTIWORD_MARKERS: &[&str] = &["i mean", "you know", "sort of", "kind of"];

    /// True if the word sequence contains a filler, a discourse marker or
    /// the same word twice in a row.
    pub fn has_cue(words: &[&str]) -> bool {
        if words
            .iter()
            .any(|w| FILLERS.contains(w) || MARKERS.contains(w))
        {
            return true;
        }
        if words.windows(2).any(|p| p[0] == p[1]) {
            return true;
        }
        words.windows(2).any(|p| {
            MULTIWORD_MARKERS.iter().any(|m| {
                let mut it = m.split(' ');
                it.next() == Some(p[0]) && it.next() == Some(p[1])
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSet {
    Classes(Vec<String>),
    Regression,
}

impl LabelSet {
    pub fn classes<S: AsRef<str>>(names: &[S]) -> Self {
        LabelSet::Classes(names.iter().map(|s| s.as_ref().to_string()).collect())
    }

    pub fn len(&self) -> usize {
        match self {
            LabelSet::Classes(c) => c.len(),
            LabelSet::Regression => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, LabelSet::Regression)
    }
}

/// A labeled, split, class-balanced probe dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub task: String,
    pub label_set: LabelSet,
    pub instances: Vec<ProbeInstance>,
    pub seed: u64,
}

impl ProbeDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ProbeInstance> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for i in &self.instances {
            c[i.split.index()] += 1;
        }
        c
    }

    pub fn class_index(&self, inst: &ProbeInstance) -> Result<usize> {
        class_index(&self.label_set, inst)
    }

    /// Checks label membership, per-split balance (within one per class)
    /// and that no conversation feeds two splits.
    pub fn validate(&self) -> Result<()> {
        let k = self.label_set.len();
        let mut per = [vec![0usize; k], vec![0usize; k], vec![0usize; k]];
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for inst in &self.instances {
            let c = self.class_index(inst)?;
            per[inst.split.index()][c] += 1;
            if let Some(prev) = owner.insert(&inst.conv_id, inst.split) {
                if prev != inst.split {
                    return Err(Error::InvalidConfig(format!(
                        "conversation {} appears in {prev} and {}",
                        inst.conv_id, inst.split
                    )));
                }
            }
        }
        if !self.label_set.is_regression() {
            for (s, counts) in per.iter().enumerate() {
                let lo = counts.iter().min().copied().unwrap_or(0);
                let hi = counts.iter().max().copied().unwrap_or(0);
                if hi > lo + 1 {
                    return Err(Error::InvalidConfig(format!(
                        "split {} unbalanced: {counts:?}",
                        Split::ALL[s]
                    )));
                }
            }
        }
        Ok(())
    }
}

fn class_index(label_set: &LabelSet, inst: &ProbeInstance) -> Result<usize> {
    match (label_set, &inst.label) {
        (LabelSet::Classes(classes), Label::Class(c)) => {
            classes
                .iter()
                .position(|x| x == c)
                .ok_or_else(|| Error::UnknownLabel {
                    label: c.clone(),
                    instance: inst.id.clone(),
                })
        }
        (LabelSet::Regression, Label::Value(v)) if v.is_finite() => Ok(0),
        (_, l) => Err(Error::UnknownLabel {
            label: format!("{l}"),
            instance: inst.id.clone(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub pause_threshold_ms: u64,
    pub response_long_threshold_ms: u64,
    /// Response turns with durations outside these percentiles of all turn
    /// durations are discarded before labeling.
    pub duration_trim_percentiles: (f64, f64),
    /// Train / valid / test sizes.
    pub split_sizes: [usize; 3],
    /// Roles kept by the speaker-role task.
    pub roles: Vec<Role>,
    /// An intra-turn gap at least this long counts as an intermittent pause
    /// for disfluency candidate retrieval.
    pub disfluency_pause_ms: u64,
    /// Two intermittent pauses starting within this window make a turn a
    /// disfluency candidate.
    pub disfluency_window_ms: u64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            pause_threshold_ms: 5_000,
            response_long_threshold_ms: 30_000,
            duration_trim_percentiles: (5.0, 95.0),
            split_sizes: [10_000, 2_000, 2_000],
            roles: vec![Role::Agent, Role::Customer],
            disfluency_pause_ms: 1_000,
            disfluency_window_ms: 10_000,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pause_threshold_ms == 0 || self.response_long_threshold_ms == 0 {
            return Err(Error::InvalidConfig("thresholds must be positive".into()));
        }
        let (lo, hi) = self.duration_trim_percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidConfig(format!(
                "trim percentiles {lo}/{hi} must satisfy 0 <= lower < upper <= 100"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Pause,
    Overtalk,
    Disfluency,
    Question,
    SpeakerRole,
    ResponseLength,
    TurnTaking,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Pause,
        TaskKind::Overtalk,
        TaskKind::Disfluency,
        TaskKind::Question,
        TaskKind::SpeakerRole,
        TaskKind::ResponseLength,
        TaskKind::TurnTaking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Pause => "pause",
            TaskKind::Overtalk => "overtalk",
            TaskKind::Disfluency => "disfluency",
            TaskKind::Question => "question",
            TaskKind::SpeakerRole => "speaker_role",
            TaskKind::ResponseLength => "response_length",
            TaskKind::TurnTaking => "turn_taking",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn label_set(self, config: &TaskConfig) -> LabelSet {
        match self {
            TaskKind::Pause => LabelSet::classes(&["pause", "no-pause"]),
            TaskKind::Overtalk => LabelSet::classes(&["overtalk", "non-overtalk"]),
            TaskKind::Disfluency => LabelSet::classes(&["disfluent", "fluent"]),
            TaskKind::Question => {
                LabelSet::Classes(QuestionClass::ASKED.iter().map(|q| q.as_str().into()).collect())
            }
            TaskKind::SpeakerRole => {
                LabelSet::Classes(config.roles.iter().map(|r| r.as_str().into()).collect())
            }
            TaskKind::ResponseLength => LabelSet::classes(&["short", "long"]),
            TaskKind::TurnTaking => LabelSet::classes(&["turn-continue", "turn-break"]),
        }
    }
}

/// A token from a merged (mono-channel) view, tagged with its source channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedToken {
    pub channel: u32,
    pub token: TimedToken,
}

/// All tokens of all channels in time order. Ties on start time go to the
/// lower channel index, then to original order.
pub fn merge_channels(conv: &Conversation) -> Vec<MergedToken> {
    merge_turns(conv.turns.iter())
}

pub fn merge_turns<'a>(turns: impl IntoIterator<Item = &'a Turn>) -> Vec<MergedToken> {
    let mut out: Vec<MergedToken> = turns
        .into_iter()
        .flat_map(|t| {
            t.tokens.iter().map(move |tok| MergedToken {
                channel: t.channel,
                token: tok.clone(),
            })
        })
        .collect();
    out.sort_by_key(|m| (m.token.start_ms, m.channel));
    out
}

pub fn merged_text(tokens: &[MergedToken]) -> String {
    join_tokens(tokens.iter().map(|m| m.token.text.as_str()))
}

/// Linear-interpolation percentile of an unsorted sample (`p` in 0..=100).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0) * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn instance(id: String, conv: &str, text: String, label: &str) -> ProbeInstance {
    ProbeInstance {
        id,
        conv_id: conv.to_string(),
        text,
        label: Label::Class(label.to_string()),
        split: Split::Train,
        position: None,
    }
}

/// Pause-delimited pieces of a turn: token index ranges split wherever the
/// gap exceeds `threshold_ms`.
pub fn segment_turn(turn: &Turn, threshold_ms: u64) -> Vec<core::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, gap) in turn.gaps_ms().enumerate() {
        if gap > threshold_ms {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if !turn.tokens.is_empty() {
        out.push(start..turn.tokens.len());
    }
    out
}

/// Disfluency candidate filter: a lexical cue, or two intermittent pauses
/// starting within the configured window.
pub fn is_disfluency_candidate(turn: &Turn, config: &TaskConfig) -> bool {
    let words: Vec<&str> = turn.tokens.iter().map(|t| t.text.as_str()).collect();
    if lexicon::has_cue(&words) {
        return true;
    }
    let pause_starts: Vec<u64> = turn
        .tokens
        .windows(2)
        .filter(|w| w[1].start_ms.saturating_sub(w[0].end_ms) >= config.disfluency_pause_ms)
        .map(|w| w[0].end_ms)
        .collect();
    pause_starts
        .windows(2)
        .any(|w| w[1] - w[0] <= config.disfluency_window_ms)
}

fn overlap(a: &Turn, b: &Turn) -> bool {
    a.start_ms() < b.end_ms() && b.start_ms() < a.end_ms()
}

/// Groups of turns linked by cross-channel time overlap, as sorted turn
/// index lists. Turns overlapping nothing form singleton groups.
pub fn overtalk_groups(conv: &Conversation) -> Vec<Vec<usize>> {
    let n = conv.turns.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for a in 0..n {
        for b in a + 1..n {
            let (ta, tb) = (&conv.turns[a], &conv.turns[b]);
            if ta.channel != tb.channel && overlap(ta, tb) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn utterance_candidates(
    kind: TaskKind,
    conversations: &[Conversation],
    config: &TaskConfig,
) -> Result<Vec<ProbeInstance>> {
    let mut out = Vec::new();
    let trim = if kind == TaskKind::ResponseLength {
        let durations: Vec<f64> = conversations
            .iter()
            .flat_map(|c| c.turns.iter().map(|t| t.duration_ms() as f64))
            .collect();
        let (lo, hi) = config.duration_trim_percentiles;
        Some((percentile(&durations, lo), percentile(&durations, hi)))
    } else {
        None
    };

    for conv in conversations {
        let cid = conv.id.as_str();
        match kind {
            TaskKind::Pause => {
                for (ti, turn) in conv.turns.iter().enumerate() {
                    if turn.annotations.disfluent == Some(true) {
                        continue;
                    }
                    let paused = turn.gaps_ms().any(|g| g > config.pause_threshold_ms);
                    let label = if paused { "pause" } else { "no-pause" };
                    out.push(instance(format!("{cid}:t{ti}"), cid, turn.text(), label));
                }
            }
            TaskKind::Overtalk => {
                for group in overtalk_groups(conv) {
                    if group.len() > 1 {
                        let merged = merge_turns(group.iter().map(|&i| &conv.turns[i]));
                        out.push(instance(
                            format!("{cid}:o{}-{}", group[0], group[group.len() - 1]),
                            cid,
                            merged_text(&merged),
                            "overtalk",
                        ));
                    } else {
                        let ti = group[0];
                        out.push(instance(
                            format!("{cid}:t{ti}"),
                            cid,
                            conv.turns[ti].text(),
                            "non-overtalk",
                        ));
                    }
                }
            }
            TaskKind::Disfluency => {
                for (ti, turn) in conv.turns.iter().enumerate() {
                    if !is_disfluency_candidate(turn, config) {
                        continue;
                    }
                    let disfluent =
                        turn.annotations
                            .disfluent
                            .ok_or_else(|| Error::MissingAnnotation {
                                task: kind.as_str().into(),
                                turn: format!("{cid}:t{ti}"),
                                field: "disfluent",
                            })?;
                    let label = if disfluent { "disfluent" } else { "fluent" };
                    out.push(instance(format!("{cid}:t{ti}"), cid, turn.text(), label));
                }
            }
            TaskKind::Question => {
                for (ti, turn) in conv.turns.iter().enumerate() {
                    let q = turn
                        .annotations
                        .question
                        .ok_or_else(|| Error::MissingAnnotation {
                            task: kind.as_str().into(),
                            turn: format!("{cid}:t{ti}"),
                            field: "question",
                        })?;
                    if q != QuestionClass::None {
                        out.push(instance(format!("{cid}:t{ti}"), cid, turn.text(), q.as_str()));
                    }
                }
            }
            TaskKind::SpeakerRole => {
                for (ti, turn) in conv.turns.iter().enumerate() {
                    if let Some(role) = conv.role_of(turn.channel) {
                        if config.roles.contains(&role) {
                            out.push(instance(format!("{cid}:t{ti}"), cid, turn.text(), role.as_str()));
                        }
                    }
                }
            }
            TaskKind::ResponseLength => {
                let (lo, hi) = trim.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
                for ti in 1..conv.turns.len().saturating_sub(1) {
                    let next = conv.turns[ti + 1].duration_ms();
                    if (next as f64) < lo || (next as f64) > hi {
                        continue;
                    }
                    let label = if next <= config.response_long_threshold_ms { "short" } else { "long" };
                    let text = format!(
                        "{} {TURN_SEPARATOR} {}",
                        conv.turns[ti - 1].text(),
                        conv.turns[ti].text()
                    );
                    out.push(instance(format!("{cid}:r{ti}"), cid, text, label));
                }
            }
            TaskKind::TurnTaking => {
                let mut segs: Vec<(usize, usize, u32, String)> = Vec::new();
                for (ti, turn) in conv.turns.iter().enumerate() {
                    for (k, r) in segment_turn(turn, config.pause_threshold_ms).into_iter().enumerate() {
                        let text = join_tokens(turn.tokens[r].iter().map(|t| t.text.as_str()));
                        segs.push((ti, k, turn.channel, text));
                    }
                }
                for w in segs.windows(2) {
                    let (ti, k, ch, ref text) = w[0];
                    let label = if w[1].2 == ch { "turn-continue" } else { "turn-break" };
                    out.push(instance(format!("{cid}:s{ti}.{k}"), cid, text.clone(), label));
                }
            }
        }
    }
    Ok(out)
}

/// Builds one utterance-level probe dataset from validated conversations.
pub fn gen_utterance_task(
    kind: TaskKind,
    conversations: &[Conversation],
    config: &TaskConfig,
) -> Result<ProbeDataset> {
    config.validate()?;
    let candidates = utterance_candidates(kind, conversations, config)?;
    balance_and_split(
        kind.as_str(),
        candidates,
        &kind.label_set(config),
        config.split_sizes,
        config.seed,
    )
}

/// All candidate instances before balancing, in corpus order; every
/// instance has split `Train`.
pub fn utterance_task_candidates(
    kind: TaskKind,
    conversations: &[Conversation],
    config: &TaskConfig,
) -> Result<Vec<ProbeInstance>> {
    config.validate()?;
    utterance_candidates(kind, conversations, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorTaskMode {
    Binary,
    Multiclass,
}

impl ErrorTaskMode {
    pub fn task_name(self) -> &'static str {
        match self {
            ErrorTaskMode::Binary => "error_binary",
            ErrorTaskMode::Multiclass => "error_multiclass",
        }
    }

    pub fn label_set(self) -> LabelSet {
        match self {
            ErrorTaskMode::Binary => LabelSet::classes(&["correct", "error"]),
            ErrorTaskMode::Multiclass => LabelSet::classes(&["insertion", "deletion", "substitution"]),
        }
    }
}

/// Token-level candidates: one per hypothesis token (binary) or per
/// erroneous hypothesis token (multiclass). The pair id is the grouping id.
pub fn token_error_candidates(pairs: &[UtterancePair], mode: ErrorTaskMode) -> Result<Vec<ProbeInstance>> {
    let mut out = Vec::new();
    for pair in pairs {
        if pair.reference.is_empty() {
            return Err(Error::EmptyReference { id: pair.id.clone() });
        }
        let ops = align(&pair.reference, &pair.hypothesis);
        let labels = label_error_tokens(&ops, pair.hypothesis.len())?;
        let text = join_tokens(pair.hypothesis.iter().map(String::as_str));
        for l in labels {
            let name = match (mode, l.label) {
                (_, ErrorLabel::AllDeleted) => continue,
                (ErrorTaskMode::Binary, lab) => {
                    if lab.is_error() {
                        "error"
                    } else {
                        "correct"
                    }
                }
                (ErrorTaskMode::Multiclass, ErrorLabel::Correct) => continue,
                (ErrorTaskMode::Multiclass, lab) => lab.as_str(),
            };
            out.push(ProbeInstance {
                id: format!("{}#{}", pair.id, l.hyp_index),
                conv_id: pair.id.clone(),
                text: text.clone(),
                label: Label::Class(name.to_string()),
                split: Split::Train,
                position: Some(l.hyp_index),
            });
        }
    }
    Ok(out)
}

pub fn gen_token_error_task(
    pairs: &[UtterancePair],
    mode: ErrorTaskMode,
    config: &TaskConfig,
) -> Result<ProbeDataset> {
    let candidates = token_error_candidates(pairs, mode)?;
    balance_and_split(
        mode.task_name(),
        candidates,
        &mode.label_set(),
        config.split_sizes,
        config.seed,
    )
}

/// Regression candidates: hypothesis text labeled with its per-utterance
/// WER percentage. Pairs with an empty hypothesis are skipped (no text).
pub fn wer_candidates(pairs: &[UtterancePair]) -> Result<Vec<ProbeInstance>> {
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.reference.is_empty() {
            return Err(Error::EmptyReference { id: pair.id.clone() });
        }
        if pair.hypothesis.is_empty() {
            continue;
        }
        let stats = wer(&align(&pair.reference, &pair.hypothesis), pair.reference.len())?;
        out.push(ProbeInstance {
            id: pair.id.clone(),
            conv_id: pair.id.clone(),
            text: join_tokens(pair.hypothesis.iter().map(String::as_str)),
            label: Label::Value(stats.wer),
            split: Split::Train,
            position: None,
        });
    }
    Ok(out)
}

pub fn gen_wer_task(pairs: &[UtterancePair], config: &TaskConfig) -> Result<ProbeDataset> {
    let candidates = wer_candidates(pairs)?;
    balance_and_split("wer", candidates, &LabelSet::Regression, config.split_sizes, config.seed)
}

/// Assigns whole conversations to splits and downsamples majority classes so
/// each split holds exactly `sizes[s]` instances with per-class counts
/// differing by at most one.
///
/// Conversations are visited in a seeded order; each goes to the split
/// with the largest remaining fraction of unmet quota among those it can
/// still contribute to. Conversations that help no split are left out.
pub fn balance_and_split(
    task: &str,
    instances: Vec<ProbeInstance>,
    label_set: &LabelSet,
    sizes: [usize; 3],
    seed: u64,
) -> Result<ProbeDataset> {
    let k = label_set.len();
    if k == 0 {
        return Err(Error::InvalidConfig("empty label set".into()));
    }
    let classes: Vec<usize> = instances
        .iter()
        .map(|i| class_index(label_set, i))
        .collect::<Result<_>>()?;

    let quota: [Vec<usize>; 3] = core::array::from_fn(|s| {
        (0..k).map(|c| sizes[s] / k + usize::from(c < sizes[s] % k)).collect()
    });
    let mut need = quota.clone();

    let mut by_conv: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_conv.entry(inst.conv_id.as_str()).or_default().push(i);
    }
    let mut convs: Vec<(&str, Vec<usize>)> = by_conv.into_iter().collect();
    Stream::new(seed, tags::SPLIT, 0).shuffle(&mut convs);

    let mut assigned: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (_, members) in &convs {
        let mut counts = vec![0usize; k];
        for &m in members {
            counts[classes[m]] += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        for s in 0..3 {
            let useful: usize = (0..k).map(|c| counts[c].min(need[s][c])).sum();
            if useful == 0 {
                continue;
            }
            let ratio = need[s].iter().sum::<usize>() as f64 / sizes[s] as f64;
            if best.is_none_or(|(_, r)| ratio > r) {
                best = Some((s, ratio));
            }
        }
        if let Some((s, _)) = best {
            for c in 0..k {
                need[s][c] -= counts[c].min(need[s][c]);
            }
            assigned[s].extend_from_slice(members);
        }
    }

    if need.iter().any(|n| n.iter().any(|&x| x > 0)) {
        let achievable: [usize; 3] = core::array::from_fn(|s| {
            let have: Vec<usize> = (0..k).map(|c| quota[s][c] - need[s][c]).collect();
            let min = have.iter().copied().min().unwrap_or(0);
            (k * min + have.iter().filter(|&&h| h > min).count()).min(sizes[s])
        });
        return Err(Error::InsufficientInstances {
            task: task.to_string(),
            requested: sizes,
            achievable,
        });
    }

    let mut chosen: Vec<ProbeInstance> = Vec::with_capacity(sizes.iter().sum());
    let mut instances: Vec<Option<ProbeInstance>> = instances.into_iter().map(Some).collect();
    for (s, members) in assigned.iter().enumerate() {
        let mut rng = Stream::new(seed, tags::SPLIT, 1 + s as u64);
        for (c, &want) in quota[s].iter().enumerate() {
            let mut pool: Vec<usize> = members.iter().copied().filter(|&m| classes[m] == c).collect();
            pool.sort_unstable();
            rng.shuffle(&mut pool);
            for &m in pool.iter().take(want) {
                if let Some(mut inst) = instances[m].take() {
                    inst.split = Split::ALL[s];
                    chosen.push(inst);
                }
            }
        }
    }
    chosen.sort_by(|a, b| (a.split, &a.id).cmp(&(b.split, &b.id)));
    Ok(ProbeDataset {
        task: task.to_string(),
        label_set: label_set.clone(),
        instances: chosen,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChannelInfo;

    fn tok(w: &str, s: u64, e: u64) -> TimedToken {
        TimedToken::new(w, s, e)
    }

    fn conv(turns: Vec<Turn>) -> Conversation {
        Conversation {
            id: "c".into(),
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
            turns,
        }
    }

    #[test]
    fn identical_timestamps_prefer_channel_zero() {
        let c = conv(vec![
            Turn::new(0, vec![tok("a", 100, 200)]),
            Turn::new(1, vec![tok("b", 100, 200)]),
        ]);
        let m = merge_channels(&c);
        assert_eq!(merged_text(&m), "a b");
        assert_eq!(m[0].channel, 0);
    }

    #[test]
    fn non_overlapping_turns_concatenate() {
        let c = conv(vec![
            Turn::new(0, vec![tok("one", 0, 100), tok("two", 150, 200)]),
            Turn::new(1, vec![tok("three", 500, 600)]),
            Turn::new(0, vec![tok("four", 900, 1000)]),
        ]);
        assert_eq!(merged_text(&merge_channels(&c)), "one two three four");
    }

    #[test]
    fn pause_threshold_is_strict() {
        let gap = |g: u64| {
            let t = Turn::new(0, vec![tok("a", 0, 100), tok("b", 100 + g, 200 + g)]);
            let c = conv(vec![t]);
            let config = TaskConfig::default();
            utterance_task_candidates(TaskKind::Pause, &[c], &config).unwrap()[0]
                .label
                .clone()
        };
        assert_eq!(gap(6_200), Label::Class("pause".into()));
        assert_eq!(gap(5_000), Label::Class("no-pause".into()));
    }

    #[test]
    fn response_length_uses_next_turn_duration() {
        let turn = |ch: u32, start: u64, dur: u64| {
            Turn::new(ch, vec![tok("x", start, start + dur / 2), tok("y", start + dur / 2, start + dur)])
        };
        let c = conv(vec![
            turn(0, 0, 2_000),
            turn(1, 3_000, 2_000),
            turn(0, 6_000, 12_000),
            turn(1, 20_000, 45_000),
        ]);
        let config = TaskConfig {
            duration_trim_percentiles: (0.0, 100.0),
            ..TaskConfig::default()
        };
        let inst = utterance_task_candidates(TaskKind::ResponseLength, &[c], &config).unwrap();
        let labels: Vec<String> = inst.iter().map(|i| i.label.to_string()).collect();
        assert_eq!(labels, ["short", "long"]);
        assert_eq!(inst[0].text, "x y [sep] x y");
    }

    #[test]
    fn turn_taking_segments() {
        let c = conv(vec![
            Turn::new(0, vec![tok("a", 0, 100), tok("b", 6_000, 6_100)]),
            Turn::new(1, vec![tok("c", 7_000, 7_100)]),
        ]);
        let inst = utterance_task_candidates(TaskKind::TurnTaking, &[c], &TaskConfig::default()).unwrap();
        let got: Vec<(String, String)> = inst.iter().map(|i| (i.text.clone(), i.label.to_string())).collect();
        assert_eq!(
            got,
            [
                ("a".to_string(), "turn-continue".to_string()),
                ("b".to_string(), "turn-break".to_string())
            ]
        );
    }

    #[test]
    fn lexical_cues() {
        assert!(lexicon::has_cue(&["i", "i", "think"]));
        assert!(lexicon::has_cue(&["it", "is", "um", "fine"]));
        assert!(lexicon::has_cue(&["i", "mean", "yes"]));
        assert!(!lexicon::has_cue(&["it", "is", "fine"]));
    }

    #[test]
    fn question_requires_annotations() {
        let c = conv(vec![Turn::new(0, vec![tok("what", 0, 100)])]);
        assert!(matches!(
            gen_utterance_task(TaskKind::Question, &[c], &TaskConfig::default()),
            Err(Error::MissingAnnotation { .. })
        ));
    }

    fn labeled(n_a: usize, n_b: usize) -> Vec<ProbeInstance> {
        (0..n_a + n_b)
            .map(|i| ProbeInstance {
                id: format!("i{i:04}"),
                conv_id: format!("c{i:04}"),
                text: "t".into(),
                label: Label::Class(if i < n_a { "a" } else { "b" }.into()),
                split: Split::Train,
                position: None,
            })
            .collect()
    }

    #[test]
    fn downsamples_majority_class() {
        let ds = balance_and_split("t", labeled(600, 400), &LabelSet::classes(&["a", "b"]), [400, 0, 0], 1)
            .unwrap();
        let a = ds.split(Split::Train).filter(|i| i.label.class() == Some("a")).count();
        assert_eq!((a, ds.counts()[0] - a), (200, 200));
        ds.validate().unwrap();
    }

    #[test]
    fn split_is_deterministic() {
        let ls = LabelSet::classes(&["a", "b"]);
        let a = balance_and_split("t", labeled(50, 50), &ls, [40, 10, 10], 9).unwrap();
        let b = balance_and_split("t", labeled(50, 50), &ls, [40, 10, 10], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_request_reports_sizes() {
        let err = balance_and_split("t", labeled(10, 3), &LabelSet::classes(&["a", "b"]), [10, 0, 0], 1)
            .unwrap_err();
        match err {
            Error::InsufficientInstances { achievable, .. } => assert_eq!(achievable[0], 7),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn conversation_disjoint_with_shared_conversations() {
        let mut inst = labeled(60, 60);
        for (i, x) in inst.iter_mut().enumerate() {
            x.conv_id = format!("c{}", i % 17);
        }
        let ds = balance_and_split("t", inst, &LabelSet::classes(&["a", "b"]), [40, 10, 10], 3).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.counts(), [40, 10, 10]);
    }
}
