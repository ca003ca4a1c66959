//! On-disk synthetic datasets: `manifest.txt` plus five FMAP maps per sample.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flowlens_core::synth::{split_seeds, SampleRecord, Split, SplitCounts};
use flowlens_core::{Real, Tensor};

use crate::error::{CliError, Result};
use crate::fmap;
use crate::fsutil;

pub const MANIFEST: &str = "manifest.txt";
pub const CHANNELS: [&str; 5] = ["I", "T1", "FLAIR", "L", "H"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub master_seed: u64,
    pub counts: SplitCounts,
    pub size: usize,
    pub low_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
}

impl ManifestEntry {
    pub fn file(&self, channel: &str) -> String {
        format!("{channel}_{:04}.fmap", self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub size: usize,
    pub low_size: usize,
    pub master_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("# flowlens dataset\n");
        let _ = writeln!(s, "# size = {}", self.size);
        let _ = writeln!(s, "# low_size = {}", self.low_size);
        let _ = writeln!(s, "# master_seed = {}", self.master_seed);
        s.push_str("# seed split I T1 FLAIR L H\n");
        for e in &self.entries {
            let _ = write!(s, "{} {}", e.seed, e.split.name());
            for c in CHANNELS {
                let _ = write!(s, " {}", e.file(c));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| CliError::Config {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let (mut size, mut low_size, mut master_seed) = (None, None, None);
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if let Some(rest) = raw.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    let v = v.trim();
                    let parsed = |name: &str| {
                        v.parse::<u64>()
                            .map_err(|_| err(line, format!("bad {name} `{v}`")))
                    };
                    match k.trim() {
                        "size" => size = Some(parsed("size")? as usize),
                        "low_size" => low_size = Some(parsed("low_size")? as usize),
                        "master_seed" => master_seed = Some(parsed("master_seed")?),
                        _ => {}
                    }
                }
                continue;
            }
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() != 2 + CHANNELS.len() {
                return Err(err(
                    line,
                    format!(
                        "expected {} fields, found {}",
                        2 + CHANNELS.len(),
                        fields.len()
                    ),
                ));
            }
            let seed = fields[0]
                .parse()
                .map_err(|_| err(line, format!("bad seed `{}`", fields[0])))?;
            let split = Split::parse(fields[1])
                .ok_or_else(|| err(line, format!("unknown split `{}`", fields[1])))?;
            let entry = ManifestEntry {
                index: entries.len(),
                seed,
                split,
            };
            for (c, f) in CHANNELS.iter().zip(&fields[2..]) {
                if *f != entry.file(c) {
                    return Err(err(
                        line,
                        format!("expected file `{}`, found `{f}`", entry.file(c)),
                    ));
                }
            }
            entries.push(entry);
        }
        let missing = |k: &str| CliError::format(origin, format!("manifest header lacks `{k}`"));
        Ok(Manifest {
            size: size.ok_or_else(|| missing("size"))?,
            low_size: low_size.ok_or_else(|| missing("low_size"))?,
            master_seed: master_seed.ok_or_else(|| missing("master_seed"))?,
            entries,
        })
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

fn is_dataset_file(name: &str) -> bool {
    name == MANIFEST
        || (name.ends_with(".fmap") && CHANNELS.iter().any(|c| name.starts_with(&format!("{c}_"))))
}

/// Refuses a non-empty directory unless `force`, in which case earlier
/// dataset files (and only those) are removed.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if !dir.exists() {
        return fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e));
    }
    let listing: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(dir, e))?;
    if listing.is_empty() {
        return Ok(());
    }
    if !force {
        return Err(CliError::Usage(format!(
            "output directory {} exists and is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    for entry in listing {
        let name = entry.file_name();
        if is_dataset_file(&name.to_string_lossy()) {
            fs::remove_file(entry.path()).map_err(|e| CliError::io(&entry.path(), e))?;
        }
    }
    Ok(())
}

pub fn build_dataset(dir: &Path, spec: &DatasetSpec, force: bool) -> Result<Manifest> {
    let seeds = split_seeds(spec.master_seed, spec.counts)?;
    // Validate the geometry before touching the directory.
    SampleRecord::<f64>::synthesize(seeds[0].1, spec.size, spec.low_size)?;
    prepare_dir(dir, force)?;
    let mut entries = Vec::with_capacity(seeds.len());
    for (index, &(split, seed)) in seeds.iter().enumerate() {
        let rec = SampleRecord::<f64>::synthesize(seed, spec.size, spec.low_size)?;
        let entry = ManifestEntry { index, seed, split };
        for (c, t) in CHANNELS
            .iter()
            .zip([&rec.image, &rec.t1, &rec.flair, &rec.low, &rec.sr])
        {
            fmap::write(&dir.join(entry.file(c)), t)?;
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        size: spec.size,
        low_size: spec.low_size,
        master_seed: spec.master_seed,
        entries,
    };
    fsutil::write_atomic(&dir.join(MANIFEST), manifest.render().as_bytes())?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "no dataset at {} (missing {MANIFEST})",
                dir.display()
            )));
        }
        let manifest = Manifest::parse(&fsutil::read_to_string(&path)?, &path)?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .filter(move |e| e.split == split)
    }

    fn channel(&self, entry: &ManifestEntry, c: &str, size: usize) -> Result<Tensor<f64>> {
        let path = self.dir.join(entry.file(c));
        let t = fmap::read(&path)?;
        if t.shape() != [1, size, size] {
            return Err(CliError::format(
                &path,
                format!("shape {:?}, expected [1, {size}, {size}]", t.shape()),
            ));
        }
        Ok(t.cast())
    }

    /// Reads one record, verifying that its stored measurement and SR map
    /// are consistent with its ground truth.
    pub fn load<T: Real>(&self, entry: &ManifestEntry) -> Result<SampleRecord<T>> {
        let (n, m) = (self.manifest.size, self.manifest.low_size);
        let rec = SampleRecord {
            image: self.channel(entry, "I", n)?,
            t1: self.channel(entry, "T1", n)?,
            flair: self.channel(entry, "FLAIR", n)?,
            low: self.channel(entry, "L", m)?,
            sr: self.channel(entry, "H", n)?,
            seed: entry.seed,
        };
        if !rec.is_consistent()? {
            return Err(CliError::Data(format!(
                "sample {} in {} is inconsistent: stored L/H do not match I",
                entry.index,
                self.dir.display()
            )));
        }
        Ok(SampleRecord {
            image: rec.image.cast(),
            t1: rec.t1.cast(),
            flair: rec.flair.cast(),
            low: rec.low.cast(),
            sr: rec.sr.cast(),
            seed: rec.seed,
        })
    }

    pub fn load_split<T: Real>(&self, split: Split) -> Result<Vec<SampleRecord<T>>> {
        let out: Vec<_> = self
            .entries(split)
            .map(|e| self.load(e))
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(CliError::Data(format!(
                "dataset {} has no {} samples",
                self.dir.display(),
                split.name()
            )));
        }
        Ok(out)
    }
}
