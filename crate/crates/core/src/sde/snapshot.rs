//! Ensemble snapshots: a little-endian binary format and a CSV twin, both bit exact.
//!
//! Binary layout: magic `EVOENS01`, then `time: f64`, `n: u64`, `d: u64`,
//! `root: u64`, `epoch: u64`, then `n·d` positions (`f64`, row-major).
//! CSV layout: one `# key=value` header line, a column line, then one row per particle
//! with 17 significant digits.

use super::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::rng::SeedLineage;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"EVOENS01";

pub fn write_binary<W: Write>(e: &ParticleEnsemble, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(MAGIC)?;
    w.write_all(&e.time.to_le_bytes())?;
    w.write_all(&(e.len() as u64).to_le_bytes())?;
    w.write_all(&(e.dim as u64).to_le_bytes())?;
    w.write_all(&e.lineage.root.to_le_bytes())?;
    w.write_all(&e.lineage.epoch.to_le_bytes())?;
    for v in &e.positions {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(r: R) -> Result<ParticleEnsemble> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut BufReader<R>| -> Result<[u8; 8]> {
        r.read_exact(&mut word).map_err(|e| Error::Snapshot(format!("truncated header: {e}")))?;
        Ok(word)
    };
    let time = f64::from_le_bytes(next(&mut r)?);
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let d = u64::from_le_bytes(next(&mut r)?) as usize;
    let root = u64::from_le_bytes(next(&mut r)?);
    let epoch = u64::from_le_bytes(next(&mut r)?);
    let count = n
        .checked_mul(d)
        .ok_or_else(|| Error::Snapshot("size overflow".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Snapshot(format!("expected {} position bytes, found {}", count * 8, bytes.len())));
    }
    let positions = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ParticleEnsemble::new(time, d, positions, SeedLineage { root, epoch })
}

pub fn write_csv<W: Write>(e: &ParticleEnsemble, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(
        w,
        "# time={:.16e} n={} d={} root={} epoch={}",
        e.time,
        e.len(),
        e.dim,
        e.lineage.root,
        e.lineage.epoch
    )?;
    let cols: Vec<String> = (1..=e.dim).map(|k| format!("x{k}")).collect();
    writeln!(w, "{}", cols.join(","))?;
    for p in e.particles() {
        let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<ParticleEnsemble> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Snapshot("empty file".into()))??;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::Snapshot("missing '# ' header".into()))?;
    let field = |key: &str| -> Result<&str> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .ok_or_else(|| Error::Snapshot(format!("header lacks {key}")))
    };
    let bad = |k: &str| Error::Snapshot(format!("bad header value for {k}"));
    let time: f64 = field("time")?.parse().map_err(|_| bad("time"))?;
    let n: usize = field("n")?.parse().map_err(|_| bad("n"))?;
    let d: usize = field("d")?.parse().map_err(|_| bad("d"))?;
    let root: u64 = field("root")?.parse().map_err(|_| bad("root"))?;
    let epoch: u64 = field("epoch")?.parse().map_err(|_| bad("epoch"))?;
    lines.next().ok_or_else(|| Error::Snapshot("missing column line".into()))??;
    let mut positions = Vec::with_capacity(n * d);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let before = positions.len();
        for v in line.split(',') {
            positions.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Snapshot(format!("row {}: cannot parse '{v}'", i + 1)))?,
            );
        }
        if positions.len() - before != d {
            return Err(Error::Snapshot(format!("row {} has {} columns, expected {d}", i + 1, positions.len() - before)));
        }
    }
    if positions.len() != n * d {
        return Err(Error::Snapshot(format!("expected {n} rows, found {}", positions.len() / d.max(1))));
    }
    ParticleEnsemble::new(time, d, positions, SeedLineage { root, epoch })
}

/// Writes CSV if the extension is `.csv`, binary otherwise.
pub fn save(e: &ParticleEnsemble, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    if path.extension().is_some_and(|x| x == "csv") {
        write_csv(e, f)
    } else {
        write_binary(e, f)
    }
}

pub fn load(path: &Path) -> Result<ParticleEnsemble> {
    let f = std::fs::File::open(path)?;
    if path.extension().is_some_and(|x| x == "csv") {
        read_csv(f)
    } else {
        read_binary(f)
    }
}
