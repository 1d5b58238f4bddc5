//! On-disk dataset layout and the plain-text manifest.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<split>/<id>.ppm
//! <root>/<split>/<id>.pgm
//! <root>/<split>/<id>.pc_k<k>_p<P>.txt
//! ```
//!
//! `manifest.txt` starts with `clustvit-manifest 1`, then `patch <P>` and `clusters <k>`,
//! then one tab-separated `split id image mask pseudo` line per sample, paths relative
//! to the root. Pseudo-cluster files hold one integer per patch, one per line, row-major.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::pseudo::pseudo_clusters;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "clustvit-manifest 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub pseudo: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub patch: usize,
    pub clusters: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn pseudo_file_name(id: &str, clusters: usize, patch: usize) -> String {
    format!("{id}.pc_k{clusters}_p{patch}.txt")
}

/// Writes the image and mask of every sample under `<root>/<split>/`.
pub fn write_samples(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let dir = root.join(split.as_str());
    fs::create_dir_all(&dir)?;
    for s in samples {
        write_ppm(&dir.join(format!("{}.ppm", s.id)), &s.image)?;
        write_pgm(&dir.join(format!("{}.pgm", s.id)), &s.mask)?;
    }
    Ok(())
}

pub fn read_sample(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    Ok(Sample {
        id: entry.id.clone(),
        image: read_ppm(&root.join(&entry.image))?,
        mask: read_pgm(&root.join(&entry.mask))?,
    })
}

impl Manifest {
    /// Computes pseudo-cluster files for the listed samples and writes `manifest.txt`.
    ///
    /// Existing pseudo-cluster files for other `(k, P)` pairs are left in place.
    pub fn build(root: &Path, samples: &[(Split, String)], patch: usize, clusters: usize) -> Result<Self> {
        let mut entries = Vec::with_capacity(samples.len());
        for (split, id) in samples {
            let dir = PathBuf::from(split.as_str());
            let entry = ManifestEntry {
                split: *split,
                id: id.clone(),
                image: dir.join(format!("{id}.ppm")),
                mask: dir.join(format!("{id}.pgm")),
                pseudo: dir.join(pseudo_file_name(id, clusters, patch)),
            };
            let mask = read_pgm(&root.join(&entry.mask))?;
            let pc = pseudo_clusters(&mask, patch, clusters)?;
            let mut text = String::with_capacity(pc.labels.len() * 2);
            for l in &pc.labels {
                text.push_str(&l.to_string());
                text.push('\n');
            }
            fs::write(root.join(&entry.pseudo), text)?;
            entries.push(entry);
        }
        let m = Manifest {
            root: root.to_path_buf(),
            patch,
            clusters,
            entries,
        };
        m.save()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let mut text = format!("{MANIFEST_HEADER}\npatch {}\nclusters {}\n", self.patch, self.clusters);
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.split,
                e.id,
                e.image.display(),
                e.mask.display(),
                e.pseudo.display()
            ));
        }
        fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Parses `manifest.txt` and checks that every referenced file exists.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => e.into(),
        })?;
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n').map(|l| {
            let start = offset;
            offset += l.len();
            (start, l.trim_end_matches(['\n', '\r']))
        });
        let err = |off: usize, msg: String| Error::Parse {
            path: path.clone(),
            offset: off,
            msg,
        };
        let mut header_field = |name: &str| -> Result<String> {
            let (off, line) = lines.next().ok_or_else(|| err(text.len(), format!("missing {name} line")))?;
            if name == "header" {
                return if line == MANIFEST_HEADER {
                    Ok(String::new())
                } else {
                    Err(err(off, format!("expected {MANIFEST_HEADER:?}")))
                };
            }
            line.strip_prefix(name)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| err(off, format!("expected `{name} <n>`")))
        };
        header_field("header")?;
        let patch = header_field("patch")?;
        let clusters = header_field("clusters")?;
        let patch: usize = patch.parse().map_err(|_| err(0, format!("bad patch size {patch:?}")))?;
        let clusters: usize = clusters.parse().map_err(|_| err(0, format!("bad cluster count {clusters:?}")))?;

        let mut entries = Vec::new();
        for (off, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(off, format!("expected 5 tab-separated fields, found {}", f.len())));
            }
            let entry = ManifestEntry {
                split: f[0].parse().map_err(|_| err(off, format!("unknown split {:?}", f[0])))?,
                id: f[1].to_string(),
                image: PathBuf::from(f[2]),
                mask: PathBuf::from(f[3]),
                pseudo: PathBuf::from(f[4]),
            };
            for p in [&entry.image, &entry.mask, &entry.pseudo] {
                if !root.join(p).is_file() {
                    return Err(Error::MissingFile(root.join(p)));
                }
            }
            entries.push(entry);
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            patch,
            clusters,
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        read_sample(&self.root, entry)
    }

    pub fn pseudo(&self, entry: &ManifestEntry) -> Result<Vec<usize>> {
        let path = self.root.join(&entry.pseudo);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => e.into(),
        })?;
        let mut out = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let t = line.trim();
            if !t.is_empty() {
                let v: usize = t.parse().map_err(|_| Error::Parse {
                    path: path.clone(),
                    offset,
                    msg: format!("bad pseudo-cluster label {t:?}"),
                })?;
                if v > self.clusters {
                    return Err(Error::Parse {
                        path: path.clone(),
                        offset,
                        msg: format!("label {v} exceeds k = {}", self.clusters),
                    });
                }
                out.push(v);
            }
            offset += line.len();
        }
        Ok(out)
    }
}
