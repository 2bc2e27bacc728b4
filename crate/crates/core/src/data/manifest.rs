//! Dataset manifest: one `path<TAB>format<TAB>split<TAB>tag` line per image.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::load_hdr;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Format {
    Rgbe,
    Pfm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s { $($s => Ok(Self::$v),)+ _ => Err(format!("unknown value {s:?}")) }
            }
        }
    };
}
text_enum!(Format, Rgbe => "rgbe", Pfm => "pfm");
text_enum!(Split, Train => "train", Val => "val", Test => "test");

impl Format {
    pub fn from_path(p: &Path) -> Option<Self> {
        match p.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "hdr" | "rgbe" | "pic" => Some(Format::Rgbe),
            "pfm" => Some(Format::Pfm),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub format: Format,
    pub split: Split,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses manifest text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::data(origin, format!("line {}: {msg}", i + 1));
            if f.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated fields, found {}", f.len())));
            }
            let path = base.join(f[0]);
            if !seen.insert(path.clone()) {
                return Err(bad(format!("duplicate path {}", f[0])));
            }
            entries.push(ManifestEntry {
                path,
                format: f[1].parse().map_err(bad)?,
                split: f[2].parse().map_err(bad)?,
                tag: f[3].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            s.push_str(&format!("{}\t{}\t{}\t{}\n", p.display(), e.format, e.split, e.tag));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Confirms every entry decodes.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            load_hdr(&e.path, e.format)?;
        }
        Ok(())
    }
}
