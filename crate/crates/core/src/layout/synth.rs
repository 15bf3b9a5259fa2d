//! Seeded synthetic forms whose questions can only be answered from 2-D geometry.
//!
//! Words are dropped into a coarse slot grid; every question names a word and
//! asks for its neighbour to the right or below. Token order is shuffled so the
//! reading order carries no hint.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::INK;
use super::{BBox, Document, GrayImage, Page, TaskInstance, TaskKind, Token};
use crate::error::{Result, TiltError};

/// Glyph level for emphasized (bold) words.
pub const BOLD_INK: f32 = 0.0;
/// Glyph level for regular words in style-cue documents.
pub const LIGHT_INK: f32 = 153.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    RightOf,
    Below,
}

impl Relation {
    fn offset(self) -> (usize, usize) {
        match self {
            Relation::RightOf => (1, 0),
            Relation::Below => (0, 1),
        }
    }

    pub fn question(self, key: &str) -> String {
        match self {
            Relation::RightOf => format!("right of {key}?"),
            Relation::Below => format!("below {key}?"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormEntry {
    pub key: String,
    pub value: String,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormSpec {
    pub entries: Vec<FormEntry>,
    pub table: Option<TableSpec>,
    pub page_w: u32,
    pub page_h: u32,
    pub slot_w: u32,
    pub slot_h: u32,
    pub font_w: u32,
    pub font_h: u32,
    pub shuffle_order: bool,
}

impl Default for FormSpec {
    fn default() -> Self {
        FormSpec {
            entries: Vec::new(),
            table: None,
            page_w: 512,
            page_h: 384,
            slot_w: 80,
            slot_h: 32,
            font_w: 10,
            font_h: 16,
            shuffle_order: true,
        }
    }
}

impl FormSpec {
    pub fn pairs(pairs: &[(&str, &str)], relation: Relation) -> Self {
        FormSpec {
            entries: pairs
                .iter()
                .map(|(k, v)| FormEntry {
                    key: k.to_string(),
                    value: v.to_string(),
                    relation,
                })
                .collect(),
            ..Default::default()
        }
    }
}

struct SlotGrid {
    cols: usize,
    rows: usize,
    used: Vec<bool>,
}

impl SlotGrid {
    fn free(&self, c: usize, r: usize) -> bool {
        c < self.cols && r < self.rows && !self.used[r * self.cols + c]
    }

    fn take(&mut self, c: usize, r: usize) {
        self.used[r * self.cols + c] = true;
    }

    /// Random anchor `(c, r)` such that every offset in `cells` is free.
    fn find(&self, cells: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
        let mut all: Vec<(usize, usize)> = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (c, r)))
            .collect();
        all.shuffle(rng);
        all.into_iter()
            .find(|&(c, r)| cells.iter().all(|&(dc, dr)| self.free(c + dc, r + dr)))
    }
}

struct Canvas {
    spec_font: (f64, f64),
    slot: (f64, f64),
    image: GrayImage,
    tokens: Vec<Token>,
}

impl Canvas {
    fn put(&mut self, text: &str, c: usize, r: usize, ink: f32, inset: bool) -> Result<BBox> {
        let (fw, fh) = self.spec_font;
        let len = text.chars().count() as f64;
        if len * fw > self.slot.0 || fh > self.slot.1 {
            return Err(TiltError::Validation(format!("word `{text}` does not fit a form slot")));
        }
        let x0 = c as f64 * self.slot.0;
        let y0 = r as f64 * self.slot.1;
        let bbox = BBox::new(x0, y0, x0 + len * fw, y0 + fh);
        let pad = if inset { 1.0 } else { 0.0 };
        for i in 0..text.chars().count() {
            let gx = x0 + i as f64 * fw;
            self.image
                .fill_rect(gx + pad, y0 + pad, gx + fw - pad, y0 + fh - pad, ink);
        }
        self.tokens.push(Token::word(text, bbox));
        Ok(bbox)
    }
}

fn new_canvas(spec: &FormSpec) -> Result<(Canvas, SlotGrid)> {
    if spec.slot_w == 0 || spec.slot_h == 0 || spec.page_w < spec.slot_w || spec.page_h < spec.slot_h {
        return Err(TiltError::Validation("form slots must fit the page".into()));
    }
    let grid = SlotGrid {
        cols: (spec.page_w / spec.slot_w) as usize,
        rows: (spec.page_h / spec.slot_h) as usize,
        used: vec![false; ((spec.page_w / spec.slot_w) * (spec.page_h / spec.slot_h)) as usize],
    };
    let canvas = Canvas {
        spec_font: (spec.font_w as f64, spec.font_h as f64),
        slot: (spec.slot_w as f64, spec.slot_h as f64),
        image: GrayImage::filled(spec.page_w as usize, spec.page_h as usize, 1.0),
        tokens: Vec::new(),
    };
    Ok((canvas, grid))
}

fn overfull() -> TiltError {
    TiltError::Validation("form does not fit on the page".into())
}

/// Renders `spec` deterministically from `seed` into tokens, raster, and QA instances.
pub fn synth_form(seed: u64, spec: &FormSpec) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut canvas, mut grid) = new_canvas(spec)?;
    let mut annotations = Vec::new();

    if let Some(table) = &spec.table {
        let w = table.headers.len();
        let h = 1 + table.rows.len();
        if table.rows.iter().any(|r| r.len() != w) {
            return Err(TiltError::Validation("table rows must match header count".into()));
        }
        let cells: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (c, r))).collect();
        let (c0, r0) = grid.find(&cells, &mut rng).ok_or_else(overfull)?;
        for (c, head) in table.headers.iter().enumerate() {
            canvas.put(head, c0 + c, r0, INK, true)?;
            grid.take(c0 + c, r0);
            if let Some(first) = table.rows.first() {
                annotations.push(TaskInstance {
                    task: TaskKind::Qa,
                    prompt: Relation::Below.question(head),
                    answers: vec![first[c].clone()],
                });
            }
        }
        for (r, row) in table.rows.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                canvas.put(cell, c0 + c, r0 + 1 + r, INK, true)?;
                grid.take(c0 + c, r0 + 1 + r);
            }
        }
    }

    for e in &spec.entries {
        let off = e.relation.offset();
        let (c, r) = grid.find(&[(0, 0), off], &mut rng).ok_or_else(overfull)?;
        canvas.put(&e.key, c, r, INK, true)?;
        canvas.put(&e.value, c + off.0, r + off.1, INK, true)?;
        grid.take(c, r);
        grid.take(c + off.0, r + off.1);
        annotations.push(TaskInstance {
            task: TaskKind::Qa,
            prompt: e.relation.question(&e.key),
            answers: vec![e.value.clone()],
        });
    }

    let mut tokens = canvas.tokens;
    if spec.shuffle_order {
        tokens.shuffle(&mut rng);
    }
    Ok(Document {
        id: format!("form-{seed}"),
        page: Page {
            width: spec.page_w,
            height: spec.page_h,
            image: Some(canvas.image),
        },
        tokens,
        annotations,
    })
}

fn distinct_symbols(rng: &mut ChaCha8Rng, alphabet: &[u8], n: usize) -> Vec<String> {
    let mut pool = alphabet.to_vec();
    pool.shuffle(rng);
    pool.into_iter().take(n).map(|b| (b as char).to_string()).collect()
}

const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const DIGITS: &[u8] = b"0123456789";
/// Stack heads that mark the asked-about stack.
const RELATION_KEYS: &[u8] = b"XYZ";

/// Layout-dependent QA: `pairs` single-letter labels, each with a digit directly
/// below it; one question per label.
pub fn layout_qa_document(seed: u64, pairs: usize, spec: &FormSpec) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a70);
    let keys = distinct_symbols(&mut rng, LETTERS, pairs);
    let values: Vec<String> = (0..pairs)
        .map(|_| (DIGITS[rng.random_range(0..DIGITS.len())] as char).to_string())
        .collect();
    let spec = FormSpec {
        entries: keys
            .into_iter()
            .zip(values)
            .map(|(key, value)| FormEntry {
                key,
                value,
                relation: Relation::Below,
            })
            .collect(),
        table: None,
        ..spec.clone()
    };
    let mut doc = synth_form(seed, &spec)?;
    doc.id = format!("layout-{seed}");
    Ok(doc)
}

/// Single-question geometry QA on `pairs` look-alike two-glyph vertical stacks.
/// One stack is headed by a key letter, the others by digits; the question asks
/// for the digit below the key. The raster shows identical stacks, so only
/// token positions and text tell them apart.
pub fn relation_qa_document(seed: u64, pairs: usize, spec: &FormSpec) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e1a_7105);
    if pairs == 0 || 2 * pairs > DIGITS.len() + 1 {
        return Err(TiltError::Validation(format!("cannot place {pairs} distinct stacks")));
    }
    let key = distinct_symbols(&mut rng, RELATION_KEYS, 1).remove(0);
    let mut digits = distinct_symbols(&mut rng, DIGITS, 2 * pairs - 1);
    let relation = Relation::Below;
    let mut entries = vec![FormEntry {
        key: key.clone(),
        value: digits.pop().expect("at least one digit"),
        relation,
    }];
    while let (Some(head), Some(value)) = (digits.pop(), digits.pop()) {
        entries.push(FormEntry { key: head, value, relation });
    }
    let spec = FormSpec {
        entries,
        table: None,
        ..spec.clone()
    };
    let mut doc = synth_form(seed, &spec)?;
    let question = relation.question(&key);
    doc.annotations.retain(|a| a.prompt == question);
    doc.id = format!("relation-{seed}");
    Ok(doc)
}

/// Style-cue QA: `words` distinct symbols, exactly one rendered in bold ink;
/// the question asks which one. Only the raster reveals the answer.
pub fn font_cue_document(seed: u64, words: usize, spec: &FormSpec) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0e7_c0e5);
    let (mut canvas, mut grid) = new_canvas(spec)?;
    let alphabet: Vec<u8> = LETTERS.iter().chain(DIGITS).copied().collect();
    let symbols = distinct_symbols(&mut rng, &alphabet, words);
    if symbols.len() < words {
        return Err(overfull());
    }
    let bold = rng.random_range(0..words);
    for (i, s) in symbols.iter().enumerate() {
        let (c, r) = grid.find(&[(0, 0)], &mut rng).ok_or_else(overfull)?;
        grid.take(c, r);
        // leave a free slot around each word so pooled regions do not overlap
        for (dc, dr) in [(1usize, 0usize), (0, 1), (1, 1)] {
            if grid.free(c + dc, r + dr) {
                grid.take(c + dc, r + dr);
            }
        }
        if i == bold {
            canvas.put(s, c, r, BOLD_INK, false)?;
        } else {
            canvas.put(s, c, r, LIGHT_INK, true)?;
        }
    }
    let mut tokens = canvas.tokens;
    tokens.shuffle(&mut rng);
    Ok(Document {
        id: format!("font-{seed}"),
        page: Page {
            width: spec.page_w,
            height: spec.page_h,
            image: Some(canvas.image),
        },
        tokens,
        annotations: vec![TaskInstance {
            task: TaskKind::Qa,
            prompt: "bold?".into(),
            answers: vec![symbols[bold].clone()],
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find<'a>(doc: &'a Document, text: &str) -> &'a Token {
        doc.tokens.iter().find(|t| t.text == text).unwrap()
    }

    #[test]
    fn value_sits_right_of_key() {
        let spec = FormSpec::pairs(&[("TOTAL", "5.00")], Relation::RightOf);
        let doc = synth_form(3, &spec).unwrap();
        let k = find(&doc, "TOTAL").bbox;
        let v = find(&doc, "5.00").bbox;
        assert!(v.x0 > k.x1);
        assert_eq!(v.y0, k.y0);
        assert_eq!(doc.annotations.len(), 1);
        assert_eq!(doc.annotations[0].answers, vec!["5.00"]);
        assert!(doc.annotations[0].prompt.contains("TOTAL"));
        doc.validate().unwrap();
    }

    #[test]
    fn same_seed_same_document() {
        let spec = FormSpec::pairs(&[("A", "1"), ("B", "2"), ("C", "3")], Relation::Below);
        assert_eq!(synth_form(11, &spec).unwrap(), synth_form(11, &spec).unwrap());
        assert_ne!(synth_form(11, &spec).unwrap(), synth_form(12, &spec).unwrap());
    }

    #[test]
    fn table_question_targets_first_data_row() {
        let spec = FormSpec {
            table: Some(TableSpec {
                headers: vec!["H1".into(), "H2".into()],
                rows: vec![vec!["a1".into(), "a2".into()], vec!["b1".into(), "b2".into()]],
            }),
            ..Default::default()
        };
        let doc = synth_form(5, &spec).unwrap();
        let q = doc
            .annotations
            .iter()
            .find(|a| a.prompt == Relation::Below.question("H1"))
            .unwrap();
        assert_eq!(q.answers, vec!["a1"]);
        let h = find(&doc, "H1").bbox;
        let cell = find(&doc, "a1").bbox;
        assert_eq!(cell.x0, h.x0);
        assert!(cell.y0 > h.y0);
    }

    #[test]
    fn overfull_page_is_an_error() {
        let entries: Vec<(String, String)> = (0..200).map(|i| (format!("K{i}"), format!("{i}"))).collect();
        let refs: Vec<(&str, &str)> = entries.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let spec = FormSpec::pairs(&refs, Relation::RightOf);
        assert!(synth_form(1, &spec).is_err());
    }

    #[test]
    fn layout_answers_are_below_their_labels() {
        for seed in 0..20 {
            let doc = layout_qa_document(seed, 4, &FormSpec::default()).unwrap();
            assert_eq!(doc.annotations.len(), 4);
            for a in &doc.annotations {
                let key = a.prompt.trim_start_matches("below ").trim_end_matches('?');
                let k = find(&doc, key).bbox;
                let below: Vec<_> = doc
                    .tokens
                    .iter()
                    .filter(|t| t.bbox.x0 == k.x0 && t.bbox.y0 > k.y0)
                    .map(|t| (t.bbox.y0, t.text.clone()))
                    .collect();
                let nearest = below
                    .iter()
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, t)| t.clone());
                assert_eq!(nearest.as_deref(), Some(a.answers[0].as_str()));
            }
        }
    }

    #[test]
    fn font_cue_marks_exactly_one_word_bold() {
        let doc = font_cue_document(9, 4, &FormSpec::default()).unwrap();
        let img = doc.page.image.as_ref().unwrap();
        let bold: Vec<_> = doc
            .tokens
            .iter()
            .filter(|t| {
                let (cx, cy) = t.bbox.center();
                img.get(cx as usize, cy as usize) == BOLD_INK
            })
            .collect();
        assert_eq!(bold.len(), 1);
        assert_eq!(doc.annotations[0].answers[0], bold[0].text);
    }

    #[test]
    fn relation_qa_has_one_letter_headed_stack() {
        for seed in 0..40 {
            let doc = relation_qa_document(seed, 4, &FormSpec::default()).unwrap();
            doc.validate().unwrap();
            assert_eq!(doc.tokens.len(), 8);
            assert_eq!(doc.annotations.len(), 1);
            let ann = &doc.annotations[0];
            let key = ann.prompt.strip_prefix("below ").unwrap().trim_end_matches('?');
            let letters: Vec<_> = doc.tokens.iter().filter(|t| t.text.chars().all(|c| c.is_ascii_uppercase())).collect();
            assert_eq!(letters.len(), 1);
            assert_eq!(letters[0].text, key);
            let k = find(&doc, key).bbox;
            let v = find(&doc, &ann.answers[0]).bbox;
            assert_eq!((v.x0, v.y0), (k.x0, k.y0 + 32.0));
        }
        assert!(relation_qa_document(0, 6, &FormSpec::default()).is_err());
    }
}
