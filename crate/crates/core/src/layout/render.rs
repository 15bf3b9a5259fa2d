use super::{BBox, Document, GrayImage, Page, Token};
use crate::error::{Result, TiltError};

/// Gray level used for rendered glyph cells (an exact 8-bit level).
pub const INK: f32 = 51.0 / 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub document: Document,
    /// Set when a word longer than a line had to be split.
    pub hard_wrapped: bool,
}

/// Lays `text` out on a monospace grid, wrapping words left-to-right then top-to-bottom.
/// Each word's box spans its character cells; the raster fills those cells with ink.
pub fn render_plaintext(
    text: &str,
    page_w: u32,
    page_h: u32,
    font_w: u32,
    font_h: u32,
) -> Result<Rendered> {
    if page_w == 0 || page_h == 0 || font_w == 0 || font_h == 0 {
        return Err(TiltError::Validation("render dimensions must be positive".into()));
    }
    let cols = (page_w / font_w) as usize;
    let rows = (page_h / font_h) as usize;
    if cols == 0 || rows == 0 {
        return Err(TiltError::Validation(format!(
            "font {font_w}x{font_h} does not fit page {page_w}x{page_h}"
        )));
    }
    let mut image = GrayImage::filled(page_w as usize, page_h as usize, 1.0);
    let mut tokens = Vec::new();
    let mut hard_wrapped = false;
    let (mut col, mut row) = (0usize, 0usize);
    let (fw, fh) = (font_w as f64, font_h as f64);

    let mut place = |piece: &str, col: usize, row: usize| -> Result<()> {
        if row >= rows {
            return Err(TiltError::Validation(format!(
                "text overflows the page after {} words",
                tokens.len()
            )));
        }
        let len = piece.chars().count();
        let bbox = BBox::new(
            col as f64 * fw,
            row as f64 * fh,
            (col + len) as f64 * fw,
            (row + 1) as f64 * fh,
        );
        image.fill_rect(bbox.x0, bbox.y0, bbox.x1, bbox.y1, INK);
        tokens.push(Token::word(piece, bbox));
        Ok(())
    };

    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > cols {
            hard_wrapped = true;
            if col > 0 {
                col = 0;
                row += 1;
            }
            for chunk in chars.chunks(cols) {
                let piece: String = chunk.iter().collect();
                place(&piece, 0, row)?;
                if chunk.len() == cols {
                    row += 1;
                    col = 0;
                } else {
                    col = chunk.len() + 1;
                }
            }
            continue;
        }
        if col > 0 && col + chars.len() > cols {
            col = 0;
            row += 1;
        }
        place(word, col, row)?;
        col += chars.len() + 1;
    }

    Ok(Rendered {
        document: Document {
            id: String::new(),
            page: Page {
                width: page_w,
                height: page_h,
                image: Some(image),
            },
            tokens,
            annotations: Vec::new(),
        },
        hard_wrapped,
    })
}
