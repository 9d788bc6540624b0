//! Line-delimited quadruplet manifests.
//!
//! ```text
//! #manifest v1
//! prompt=<text>\timage=<relative path>\tquestion=<text>\tanswer=<text>\tmeta=<scene>
//! ```
//!
//! Values escape `\`, tab and newline as `\\`, `\t`, `\n`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gen_sample, render, SceneSpec, Split};
use crate::error::{Error, Result};

pub const HEADER: &str = "#manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
const FIELDS: [&str; 5] = ["prompt", "image", "question", "answer", "meta"];

#[derive(Clone, Debug, PartialEq)]
pub struct Quadruplet {
    pub prompt: String,
    /// Relative to the manifest's directory.
    pub image: String,
    pub question: String,
    pub answer: String,
    pub meta: SceneSpec,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(ch) = it.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => return Err(format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

pub fn format_record(q: &Quadruplet) -> String {
    let values = [&q.prompt, &q.image, &q.question, &q.answer, &q.meta.encode()];
    FIELDS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k}={}", escape(v)))
        .collect::<Vec<_>>()
        .join("\t")
}

pub fn parse_record(line: &str, line_no: usize) -> Result<Quadruplet> {
    let err = |reason: String| Error::Parse { line: line_no, reason };
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != FIELDS.len() {
        return Err(err(format!("expected {} fields, found {}", FIELDS.len(), parts.len())));
    }
    let mut vals = Vec::with_capacity(FIELDS.len());
    for (part, key) in parts.iter().zip(FIELDS) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| err(format!("field `{part}` has no `=`")))?;
        if k != key {
            return Err(err(format!("expected key `{key}`, found `{k}`")));
        }
        let v = unescape(v).map_err(err)?;
        if v.is_empty() {
            return Err(err(format!("field `{key}` is empty")));
        }
        vals.push(v);
    }
    let meta = SceneSpec::decode(&vals[4]).map_err(|e| err(e.to_string()))?;
    let mut it = vals.into_iter();
    let mut next = || it.next().expect("five fields");
    Ok(Quadruplet {
        prompt: next(),
        image: next(),
        question: next(),
        answer: next(),
        meta,
    })
}

/// Writes `dir/manifest.txt`; returns its path.
pub fn write_manifest(records: &[Quadruplet], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut text = String::from(HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&format_record(r));
        text.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text)?;
    Ok(path)
}

/// Parses every line and, when `check_images` is set, resolves every image.
pub fn load_manifest(path: &Path, check_images: bool) -> Result<Vec<Quadruplet>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(HEADER) => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header `{HEADER}`, found `{}`", other.unwrap_or("")),
            })
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let q = parse_record(line, i + 2)?;
        if check_images {
            let img = base.join(&q.image);
            if !img.is_file() {
                return Err(Error::MissingFile(img));
            }
        }
        out.push(q);
    }
    Ok(out)
}

/// Generates `n` quadruplets, writes their images under `dir/images` and
/// the manifest at `dir/manifest.txt`.
pub fn write_dataset(dir: &Path, n: usize, seed: u64, split: Split) -> Result<(PathBuf, Vec<Quadruplet>)> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let s = gen_sample(&mut rng, split, 1);
        let rel = format!("images/{i:06}.ppm");
        render(&s.spec).write_ppm(&dir.join(&rel))?;
        records.push(Quadruplet {
            prompt: s.caption,
            image: rel,
            question: s.question,
            answer: s.answer,
            meta: s.spec,
        });
    }
    let path = write_manifest(&records, dir)?;
    Ok((path, records))
}
