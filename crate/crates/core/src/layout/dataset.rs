//! JSONL dataset reader/writer, one document per line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BBox, Document, GrayImage, Page, TaskInstance, Token, TokenKind};
use crate::error::{Result, TiltError};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    id: String,
    page: PageRecord,
    tokens: Vec<TokenRecord>,
    #[serde(default)]
    annotations: Vec<TaskInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageRecord {
    width: u32,
    height: u32,
    #[serde(default)]
    image_path: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    text: String,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "is_word")]
    kind: TokenKind,
}

impl DocRecord {
    fn from_document(doc: &Document, image_path: Option<String>) -> Self {
        DocRecord {
            id: doc.id.clone(),
            page: PageRecord {
                width: doc.page.width,
                height: doc.page.height,
                image_path,
            },
            tokens: doc
                .tokens
                .iter()
                .map(|t| TokenRecord {
                    text: t.text.clone(),
                    bbox: [t.bbox.x0, t.bbox.y0, t.bbox.x1, t.bbox.y1],
                    kind: t.kind,
                })
                .collect(),
            annotations: doc.annotations.clone(),
        }
    }
}

/// One JSONL line for `doc` without its raster.
pub fn document_line(doc: &Document) -> Result<String> {
    Ok(serde_json::to_string(&DocRecord::from_document(doc, None))?)
}

fn is_word(kind: &TokenKind) -> bool {
    *kind == TokenKind::Word
}

/// Parses one JSONL line. Relative image paths resolve against `base_dir`.
pub fn read_document_line(line: &str, base_dir: &Path, path: &Path, line_no: usize) -> Result<Document> {
    let err = |message: String| TiltError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let rec: DocRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    if rec.page.width == 0 || rec.page.height == 0 {
        return Err(err(format!("page {}x{} is empty", rec.page.width, rec.page.height)));
    }
    let (w, h) = (rec.page.width as f64, rec.page.height as f64);
    let mut tokens = Vec::with_capacity(rec.tokens.len());
    for (i, t) in rec.tokens.into_iter().enumerate() {
        let [x0, y0, x1, y1] = t.bbox;
        let bbox = BBox::new(x0, y0, x1, y1);
        if !bbox.is_valid() {
            return Err(TiltError::Validation(format!(
                "{}:{line_no}: token {i} `{}` has inverted bbox [{x0}, {y0}, {x1}, {y1}]",
                path.display(),
                t.text
            )));
        }
        tokens.push(Token {
            text: t.text,
            bbox: bbox.clamp_to(w, h),
            kind: t.kind,
        });
    }
    let image = match rec.page.image_path {
        Some(p) => {
            let full = base_dir.join(&p);
            Some(GrayImage::read_pnm(&full)?)
        }
        None => None,
    };
    let doc = Document {
        id: rec.id,
        page: Page {
            width: rec.page.width,
            height: rec.page.height,
            image,
        },
        tokens,
        annotations: rec.annotations,
    };
    doc.validate().map_err(|e| match e {
        TiltError::Validation(m) => TiltError::Validation(format!("{}:{line_no}: {m}", path.display())),
        other => other,
    })?;
    Ok(doc)
}

/// Streaming reader over a JSONL dataset; blank lines are skipped.
pub struct DatasetReader {
    path: PathBuf,
    base_dir: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl Iterator for DatasetReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(read_document_line(&line, &self.base_dir, &self.path, self.line_no));
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetReader> {
    let path = path.as_ref();
    let file = File::open(path)?;
    Ok(DatasetReader {
        path: path.to_path_buf(),
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
    })
}

fn image_file_name(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    format!("{index:05}_{clean}.pgm")
}

/// Writes `docs` as JSONL at `path`; rasters go to `<path>.images/` as 8-bit PGM.
pub fn save_dataset(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir_name = format!(
        "{}.images",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("dataset")
    );
    let mut out = BufWriter::new(File::create(path)?);
    for (i, doc) in docs.iter().enumerate() {
        let image_path = match &doc.page.image {
            Some(img) => {
                fs::create_dir_all(base.join(&dir_name))?;
                let rel = format!("{dir_name}/{}", image_file_name(i, &doc.id));
                img.write_pgm(&base.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let rec = DocRecord::from_document(doc, image_path);
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
