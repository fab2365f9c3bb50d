//! The WKT subset used by footprint CSVs: 2-D `POLYGON` with optional holes,
//! and `POLYGON EMPTY`.

use std::fmt::Write as _;

use super::{Point, Polygon};
use crate::error::{Error, Result};

/// A parsed WKT value.
#[derive(Debug, Clone, PartialEq)]
pub enum Wkt {
    Polygon(Polygon),
    Empty,
}

impl Wkt {
    pub fn into_polygon(self) -> Option<Polygon> {
        match self {
            Wkt::Polygon(p) => Some(p),
            Wkt::Empty => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok<'a> {
    Word(&'a str),
    Num(f64),
    Open,
    Close,
    Comma,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Wkt {
            offset,
            message: message.into(),
        })
    }

    /// Returns the next token and the byte offset it starts at.
    fn next(&mut self) -> Result<(Tok<'a>, usize)> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&b) = bytes.get(start) else {
            return Ok((Tok::End, start));
        };
        let tok = match b {
            b'(' => {
                self.pos += 1;
                Tok::Open
            }
            b')' => {
                self.pos += 1;
                Tok::Close
            }
            b',' => {
                self.pos += 1;
                Tok::Comma
            }
            b if b.is_ascii_alphabetic() => {
                while self.pos < bytes.len() && bytes[self.pos].is_ascii_alphabetic() {
                    self.pos += 1;
                }
                Tok::Word(&self.src[start..self.pos])
            }
            b if b == b'-' || b == b'+' || b == b'.' || b.is_ascii_digit() => {
                while self.pos < bytes.len()
                    && matches!(bytes[self.pos], b'0'..=b'9' | b'.' | b'-' | b'+' | b'e' | b'E')
                {
                    self.pos += 1;
                }
                let text = &self.src[start..self.pos];
                match text.parse::<f64>() {
                    Ok(v) if v.is_finite() => Tok::Num(v),
                    _ => return self.err(start, format!("invalid number {text:?}")),
                }
            }
            _ => {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return self.err(start, format!("unexpected character {ch:?}"));
            }
        };
        Ok((tok, start))
    }

    fn expect(&mut self, want: Tok<'static>, what: &str) -> Result<usize> {
        let (tok, at) = self.next()?;
        if tok != want {
            return self.err(at, format!("expected {what}, found {}", describe(tok)));
        }
        Ok(at)
    }
}

fn describe(tok: Tok<'_>) -> String {
    match tok {
        Tok::Word(w) => format!("word {w:?}"),
        Tok::Num(v) => format!("number {v}"),
        Tok::Open => "'('".into(),
        Tok::Close => "')'".into(),
        Tok::Comma => "','".into(),
        Tok::End => "end of input".into(),
    }
}

fn parse_ring(lx: &mut Lexer<'_>) -> Result<Vec<Point>> {
    let open_at = lx.expect(Tok::Open, "'(' opening a ring")?;
    let mut ring = Vec::new();
    loop {
        let (tx, at) = lx.next()?;
        let Tok::Num(x) = tx else {
            return lx.err(at, format!("expected x coordinate, found {}", describe(tx)));
        };
        let (ty, at) = lx.next()?;
        let Tok::Num(y) = ty else {
            return lx.err(at, format!("expected y coordinate, found {}", describe(ty)));
        };
        ring.push((x, y));
        let (t, at) = lx.next()?;
        match t {
            Tok::Comma => continue,
            Tok::Close => break,
            other => {
                return lx.err(at, format!("expected ',' or ')', found {}", describe(other)))
            }
        }
    }
    if ring.len() < 4 {
        return lx.err(
            open_at,
            format!("ring has {} points, need at least 4", ring.len()),
        );
    }
    if ring.first() != ring.last() {
        return lx.err(open_at, "ring not closed: first and last points differ");
    }
    Ok(ring)
}

/// Parses `POLYGON ((x y, ...), (hole...))` or `POLYGON EMPTY`. Coordinates
/// are kept exactly as written.
pub fn parse_wkt(text: &str) -> Result<Wkt> {
    let mut lx = Lexer { src: text, pos: 0 };
    let (tok, at) = lx.next()?;
    match tok {
        Tok::Word(w) if w.eq_ignore_ascii_case("POLYGON") => {}
        other => return lx.err(at, format!("expected POLYGON, found {}", describe(other))),
    }
    let (tok, at) = lx.next()?;
    let result = match tok {
        Tok::Word(w) if w.eq_ignore_ascii_case("EMPTY") => Wkt::Empty,
        Tok::Open => {
            let mut rings = vec![parse_ring(&mut lx)?];
            loop {
                let (t, at) = lx.next()?;
                match t {
                    Tok::Comma => rings.push(parse_ring(&mut lx)?),
                    Tok::Close => break,
                    other => {
                        return lx.err(at, format!("expected ',' or ')', found {}", describe(other)))
                    }
                }
            }
            let exterior = rings.remove(0);
            Wkt::Polygon(Polygon::new(exterior, rings)?)
        }
        other => {
            return lx.err(at, format!("expected '(' or EMPTY, found {}", describe(other)))
        }
    };
    let (tok, at) = lx.next()?;
    if tok != Tok::End {
        return lx.err(at, format!("trailing {}", describe(tok)));
    }
    Ok(result)
}

fn write_ring(out: &mut String, ring: &[Point]) {
    out.push('(');
    for (i, (x, y)) in ring.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{x} {y}");
    }
    out.push(')');
}

/// Serializes a polygon; `parse_wkt(&to_wkt(p))` returns `p` vertex for vertex.
pub fn to_wkt(polygon: &Polygon) -> String {
    let mut out = String::from("POLYGON (");
    for (i, ring) in polygon.rings().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_ring(&mut out, ring);
    }
    out.push(')');
    out
}
