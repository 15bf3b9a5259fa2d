//! Training example construction: salient-span corruption, task formatting, case copies.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::layout::{image_anchor_tokens, BBox, Document, Page, TaskInstance, TaskKind, TokenKind};
use crate::vision::mask_image_regions;

pub const NUM_SENTINELS: usize = 16;
pub const MASK_BUDGET: f64 = 0.15;
pub const MEAN_SPAN: usize = 3;
pub const IMAGE_MASK_P: f64 = 0.8;
pub const NONE_ANSWER: &str = "None";
/// Anchors added to pages that carry no words.
pub const ANCHOR_COUNT: usize = 16;
/// Height of the off-page row holding prompt words, in page units.
pub const PROMPT_ROW: f64 = 16.0;

const SENTINEL_BASE: u32 = 0xE000;

/// Sentinel `i` as a private-use character, so it survives inside plain strings.
pub fn sentinel(i: usize) -> char {
    assert!(i < NUM_SENTINELS, "sentinel {i} out of range");
    char::from_u32(SENTINEL_BASE + i as u32).expect("private-use range")
}

pub fn sentinel_index(c: char) -> Option<usize> {
    let v = c as u32;
    (SENTINEL_BASE..SENTINEL_BASE + NUM_SENTINELS as u32)
        .contains(&v)
        .then(|| (v - SENTINEL_BASE) as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt,
    Separator,
    Document,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceItem {
    pub text: String,
    pub bbox: BBox,
    pub role: Role,
}

impl SourceItem {
    /// Only page content reads image features; prompt and separator rows get none.
    pub fn has_image(&self) -> bool {
        self.role == Role::Document
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqExample {
    pub id: String,
    pub page: Page,
    pub source: Vec<SourceItem>,
    pub target: String,
}

impl Seq2SeqExample {
    pub fn source_text(&self) -> String {
        self.source
            .iter()
            .filter(|s| s.role == Role::Document)
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `len` consecutive token indices starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

fn ends_sentence(text: &str) -> bool {
    text.ends_with(['.', '!', '?', ':'])
}

fn is_salient(text: &str, sentence_start: bool) -> bool {
    if text.chars().any(|c| c.is_ascii_digit()) {
        return true;
    }
    let letters: Vec<char> = text.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.is_empty() {
        return false;
    }
    if letters.len() >= 2 && letters.iter().all(|c| c.is_uppercase()) {
        return true;
    }
    let first_upper = text.chars().next().is_some_and(char::is_uppercase);
    first_upper && !sentence_start
}

/// Maximal runs of entity-looking words: digit-bearing, all-caps, or capitalized
/// away from a sentence start.
pub fn salient_spans(doc: &Document) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut run: Option<Span> = None;
    let mut sentence_start = true;
    for (i, t) in doc.tokens.iter().enumerate() {
        let hit = t.kind == TokenKind::Word && is_salient(&t.text, sentence_start);
        match (&mut run, hit) {
            (Some(r), true) => r.len += 1,
            (None, true) => run = Some(Span { start: i, len: 1 }),
            (Some(_), false) => spans.extend(run.take()),
            (None, false) => {}
        }
        if t.kind == TokenKind::Word {
            sentence_start = ends_sentence(&t.text);
        }
    }
    spans.extend(run);
    spans
}

/// Mask budget for `n` tokens: 15%, at most half.
pub fn mask_budget(n: usize) -> usize {
    ((n as f64 * MASK_BUDGET).round() as usize).min(n / 2)
}

/// Salient spans first (in random order, trimmed to the budget), then random spans
/// that neither overlap nor touch existing ones.
pub fn select_spans<R: Rng + ?Sized>(doc: &Document, rng: &mut R) -> Vec<Span> {
    let n = doc.tokens.len();
    let budget = mask_budget(n);
    let max_spans = NUM_SENTINELS - 1;
    let mut taken = vec![false; n];
    let mut spans: Vec<Span> = Vec::new();
    let mut used = 0;

    let free = |taken: &[bool], s: usize, len: usize| -> bool {
        let lo = s.saturating_sub(1);
        let hi = (s + len + 1).min(n);
        s + len <= n && taken[lo..hi].iter().all(|t| !t)
    };

    let mut salient = salient_spans(doc);
    salient.shuffle(rng);
    for s in salient {
        if used >= budget || spans.len() >= max_spans {
            break;
        }
        let len = s.len.min(budget - used);
        if free(&taken, s.start, len) {
            taken[s.start..s.start + len].iter_mut().for_each(|t| *t = true);
            spans.push(Span { start: s.start, len });
            used += len;
        }
    }

    while used < budget && spans.len() < max_spans {
        let remaining = budget - used;
        let floor = remaining.div_ceil(max_spans - spans.len());
        let mut len = rng.random_range(1..=2 * MEAN_SPAN - 1).max(floor).min(remaining);
        let mut placed = false;
        while len > 0 && !placed {
            let starts: Vec<usize> = (0..n.saturating_sub(len - 1)).filter(|&s| free(&taken, s, len)).collect();
            if let Some(&s) = starts.as_slice().choose(rng) {
                taken[s..s + len].iter_mut().for_each(|t| *t = true);
                spans.push(Span { start: s, len });
                used += len;
                placed = true;
            } else {
                len -= 1;
            }
        }
        if !placed {
            break;
        }
    }
    spans.sort();
    spans
}

fn check_spans(spans: &[Span], n: usize) -> Result<Vec<Span>> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    if sorted.len() >= NUM_SENTINELS {
        return Err(TiltError::Contract(format!(
            "{} spans need more than {NUM_SENTINELS} sentinels",
            sorted.len()
        )));
    }
    for (i, s) in sorted.iter().enumerate() {
        if s.len == 0 || s.end() > n {
            return Err(TiltError::Contract(format!("span {s:?} invalid for {n} tokens")));
        }
        if i > 0 && sorted[i - 1].end() > s.start {
            return Err(TiltError::Contract(format!(
                "spans {:?} and {s:?} overlap",
                sorted[i - 1]
            )));
        }
    }
    Ok(sorted)
}

/// Replaces each span by one sentinel (boxed by the union of its tokens); the target
/// lists every sentinel followed by its words and ends with one more sentinel.
/// The raster is left untouched; see [`corrupt_with_image`].
pub fn span_corrupt(doc: &Document, spans: &[Span]) -> Result<Seq2SeqExample> {
    let spans = check_spans(spans, doc.tokens.len())?;
    let mut source = Vec::with_capacity(doc.tokens.len());
    let mut target = String::new();
    let mut next = 0;
    for (k, s) in spans.iter().enumerate() {
        for t in &doc.tokens[next..s.start] {
            source.push(SourceItem {
                text: t.text.clone(),
                bbox: t.bbox,
                role: Role::Document,
            });
        }
        let masked = &doc.tokens[s.start..s.end()];
        let bbox = masked
            .iter()
            .skip(1)
            .fold(masked[0].bbox, |acc, t| acc.union(&t.bbox));
        source.push(SourceItem {
            text: sentinel(k).to_string(),
            bbox,
            role: Role::Document,
        });
        target.push(sentinel(k));
        target.push_str(&masked.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" "));
        next = s.end();
    }
    for t in &doc.tokens[next..] {
        source.push(SourceItem {
            text: t.text.clone(),
            bbox: t.bbox,
            role: Role::Document,
        });
    }
    target.push(sentinel(spans.len()));
    Ok(Seq2SeqExample {
        id: doc.id.clone(),
        page: doc.page.clone(),
        source,
        target,
    })
}

/// Span corruption plus blanking each masked token's image region with probability `p`.
pub fn corrupt_with_image<R: Rng + ?Sized>(
    doc: &Document,
    spans: &[Span],
    p: f64,
    rng: &mut R,
) -> Result<Seq2SeqExample> {
    let mut ex = span_corrupt(doc, spans)?;
    if let Some(img) = &doc.page.image {
        let boxes: Vec<BBox> = spans
            .iter()
            .flat_map(|s| doc.tokens[s.start..s.end()].iter().map(|t| t.bbox))
            .collect();
        let (w, h) = (doc.page.width as f64, doc.page.height as f64);
        ex.page.image = Some(mask_image_regions(img, w, h, &boxes, p, rng).image);
    }
    Ok(ex)
}

/// Inverse of [`span_corrupt`] on text: the original words, space-joined.
pub fn reconstruct(source: &[SourceItem], target: &str) -> Result<String> {
    let mut fills: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    for c in target.chars() {
        if let Some(i) = sentinel_index(c) {
            if i != fills.len() + usize::from(current.is_some()) {
                return Err(TiltError::Contract(format!("sentinel {i} out of order")));
            }
            fills.extend(current.take());
            current = Some(String::new());
        } else if let Some(cur) = &mut current {
            cur.push(c);
        } else {
            return Err(TiltError::Contract("target must start with a sentinel".into()));
        }
    }
    let mut words = Vec::new();
    for item in source.iter().filter(|s| s.role == Role::Document) {
        let mut chars = item.text.chars();
        match (chars.next().and_then(sentinel_index), chars.next()) {
            (Some(i), None) => {
                let fill = fills
                    .get(i)
                    .ok_or_else(|| TiltError::Contract(format!("no fill for sentinel {i}")))?;
                words.push(fill.clone());
            }
            _ => words.push(item.text.clone()),
        }
    }
    Ok(words.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseMode {
    Identity,
    Lower,
    Upper,
}

impl CaseMode {
    pub const ALL: [CaseMode; 3] = [CaseMode::Identity, CaseMode::Lower, CaseMode::Upper];

    pub fn apply(self, s: &str) -> String {
        match self {
            CaseMode::Identity => s.to_string(),
            CaseMode::Lower => s.to_lowercase(),
            CaseMode::Upper => s.to_uppercase(),
        }
    }
}

/// Transforms source and target text together; boxes and raster are untouched.
pub fn case_augment(ex: &Seq2SeqExample, mode: CaseMode) -> Seq2SeqExample {
    Seq2SeqExample {
        id: ex.id.clone(),
        page: ex.page.clone(),
        source: ex
            .source
            .iter()
            .map(|s| SourceItem {
                text: mode.apply(&s.text),
                ..s.clone()
            })
            .collect(),
        target: mode.apply(&ex.target),
    }
}

/// Prompt words on an off-page row, one grid-cell width per character.
fn prompt_items(prompt: &str, page_w: f64) -> Vec<SourceItem> {
    let cell = page_w / crate::layout::GRID_W as f64;
    let mut col = 0usize;
    prompt
        .split_whitespace()
        .map(|w| {
            let len = w.chars().count();
            let bbox = BBox::new(col as f64 * cell, -PROMPT_ROW, (col + len) as f64 * cell, 0.0);
            col += len + 1;
            SourceItem {
                text: w.to_string(),
                bbox,
                role: Role::Prompt,
            }
        })
        .collect()
}

/// `prompt ++ separator ++ document` with the answer (or `None`) as target.
pub fn to_seq2seq(doc: &Document, task: &TaskInstance) -> Result<Seq2SeqExample> {
    if task.prompt.trim().is_empty() {
        return Err(TiltError::Validation(format!(
            "document `{}`: task has no prompt",
            doc.id
        )));
    }
    let mut source = prompt_items(&task.prompt, doc.page.width as f64);
    source.push(SourceItem {
        text: String::new(),
        bbox: BBox::new(0.0, -PROMPT_ROW, 0.0, 0.0),
        role: Role::Separator,
    });
    let textless = doc.word_count() == 0;
    let anchors = if textless {
        image_anchor_tokens(&doc.page, ANCHOR_COUNT)?
    } else {
        Vec::new()
    };
    for t in doc.tokens.iter().chain(&anchors) {
        source.push(SourceItem {
            text: t.text.clone(),
            bbox: t.bbox,
            role: Role::Document,
        });
    }
    let target = match (task.task, task.answers.first()) {
        (_, Some(a)) => a.clone(),
        (TaskKind::Classify, None) => {
            return Err(TiltError::Validation(format!(
                "document `{}`: classification task without a label",
                doc.id
            )))
        }
        (_, None) => NONE_ANSWER.to_string(),
    };
    Ok(Seq2SeqExample {
        id: doc.id.clone(),
        page: doc.page.clone(),
        source,
        target,
    })
}
