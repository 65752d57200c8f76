//! World-millimetre landmark CSV files with the exact header `Landmark,X,Y,Z`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Frame, LandmarkSet, Point};

pub const HEADER: &str = "Landmark,X,Y,Z";

fn err<T>(path: &Path, line: usize, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Format(format!("{}:{line}: {msg}", path.display())))
}

/// Parses landmark rows; `case_id` is taken from the file stem.
pub fn parse_landmarks(text: &str, path: &Path, case_id: &str) -> Result<LandmarkSet> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    match lines.next() {
        Some((_, h)) if h.trim_start_matches('\u{feff}') == HEADER => {}
        Some((n, h)) => return err(path, n, format!("expected header `{HEADER}`, found `{h}`")),
        None => return err(path, 1, "empty file"),
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return err(path, n, format!("expected 4 columns, found {}", fields.len()));
        }
        let id: u32 = fields[0]
            .parse()
            .or_else(|_| err(path, n, format!("landmark id `{}` is not a non-negative integer", fields[0])))?;
        let mut c = [0.0; 3];
        for a in 0..3 {
            let v: f64 = fields[a + 1]
                .parse()
                .or_else(|_| err(path, n, format!("coordinate `{}` is not numeric", fields[a + 1])))?;
            if !v.is_finite() {
                return err(path, n, "non-finite coordinate");
            }
            c[a] = v;
        }
        if !seen.insert(id) {
            return err(path, n, format!("duplicate landmark id {id}"));
        }
        entries.push((id, Point::world(c)));
    }
    if entries.is_empty() {
        return Err(Error::Format(format!("{}: no landmark rows", path.display())));
    }
    LandmarkSet::new(case_id, entries).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path)?;
    let case_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    parse_landmarks(&text, path, &case_id)
}

pub fn format_landmarks(lms: &LandmarkSet) -> Result<String> {
    if lms.frame() != Frame::World {
        return Err(Error::InvalidInput("landmark files hold world-frame coordinates".into()));
    }
    let mut s = String::from(HEADER);
    s.push('\n');
    for (id, p) in lms.entries() {
        let [x, y, z] = p.coords;
        writeln!(s, "{id},{x:.6},{y:.6},{z:.6}").expect("writing to a String cannot fail");
    }
    Ok(s)
}

pub fn write_landmarks(lms: &LandmarkSet, path: &Path) -> Result<()> {
    fs::write(path, format_landmarks(lms)?)?;
    Ok(())
}
