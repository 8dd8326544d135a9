//! Plain-text layout for [`MeasurementRecord`].
//!
//! ```text
//! # openloop-record 1
//! # dim=4
//! # gamma=1.0000000000000000e0
//! # ...
//! # meta.initial_state=maximally_mixed
//! step,dR,unitary_id
//! 0,-1.2496813360468310e-2,
//! 40,3.0061459913612187e-3,17
//! ...
//! # end rows=4000
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! `f64` exactly. The trailer guards against truncation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::control::{ControlSchedule, PermutationConvention, Strategy};
use crate::error::{Error, Result};
use crate::sme::{ControlEntry, MeasurementRecord, SimParams};
use crate::state::DensityMatrix;

const MAGIC: &str = "# openloop-record 1";
const COLUMNS: &str = "step,dR,unitary_id";
const META_PREFIX: &str = "meta.";

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::RecordCorrupt(msg.into())
}

pub fn write_record<W: Write>(record: &MeasurementRecord, mut out: W) -> Result<()> {
    let p = &record.params;
    let s = &record.schedule;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "# dim={}", p.dim)?;
    writeln!(out, "# gamma={}", fmt_f64(p.gamma))?;
    writeln!(out, "# dt={}", fmt_f64(p.dt))?;
    writeln!(out, "# total_time={}", fmt_f64(p.total_time))?;
    writeln!(out, "# allow_coarse_dt={}", p.allow_coarse_dt)?;
    writeln!(out, "# scheme={}", p.scheme.name())?;
    writeln!(out, "# seed={}", record.seed)?;
    writeln!(out, "# strategy={}", s.strategy.name())?;
    writeln!(out, "# delta_t={}", fmt_f64(s.delta_t))?;
    writeln!(out, "# control_seed={}", s.seed)?;
    writeln!(out, "# alternation={}", s.alternation.join(";"))?;
    let convention = match s.convention {
        PermutationConvention::Image => "image",
        PermutationConvention::Preimage => "preimage",
    };
    writeln!(out, "# convention={convention}")?;
    writeln!(out, "# n_steps={}", record.increments.len())?;
    for (k, v) in &record.metadata {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Config(format!("metadata entry '{k}' cannot be serialized")));
        }
        writeln!(out, "# {META_PREFIX}{k}={v}")?;
    }
    writeln!(out, "{COLUMNS}")?;
    let mut log = record.control_log.iter().peekable();
    for (step, dr) in record.increments.iter().enumerate() {
        match log.next_if(|e| e.step == step) {
            Some(e) => writeln!(out, "{step},{},{}", fmt_f64(*dr), e.id)?,
            None => writeln!(out, "{step},{},", fmt_f64(*dr))?,
        }
    }
    if let Some(e) = log.next() {
        return Err(corrupt(format!("control entry at step {} beyond record", e.step)));
    }
    writeln!(out, "# end rows={}", record.increments.len())?;
    out.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(header: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = header
        .get(key)
        .ok_or_else(|| corrupt(format!("header lacks '{key}'")))?;
    raw.parse()
        .map_err(|_| corrupt(format!("header '{key}' has unparsable value '{raw}'")))
}

pub fn read_record<R: BufRead>(input: R) -> Result<MeasurementRecord> {
    let mut lines = input.lines();
    match lines.next().transpose()? {
        Some(l) if l == MAGIC => {}
        _ => return Err(corrupt("missing record header")),
    }
    let mut header = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    loop {
        let line = lines
            .next()
            .transpose()?
            .ok_or_else(|| corrupt("header not terminated"))?;
        if line == COLUMNS {
            break;
        }
        let body = line
            .strip_prefix("# ")
            .ok_or_else(|| corrupt(format!("unexpected header line '{line}'")))?;
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| corrupt(format!("header line '{line}' is not key=value")))?;
        match k.strip_prefix(META_PREFIX) {
            Some(meta) => metadata.insert(meta.to_string(), v.to_string()),
            None => header.insert(k.to_string(), v.to_string()),
        };
    }

    let params = SimParams {
        dim: parse(&header, "dim")?,
        gamma: parse(&header, "gamma")?,
        dt: parse(&header, "dt")?,
        total_time: parse(&header, "total_time")?,
        allow_coarse_dt: parse(&header, "allow_coarse_dt")?,
        scheme: parse(&header, "scheme")?,
    };
    let strategy: Strategy = header
        .get("strategy")
        .ok_or_else(|| corrupt("header lacks 'strategy'"))?
        .parse()
        .map_err(|e: Error| corrupt(e.to_string()))?;
    let alternation = header
        .get("alternation")
        .map(|s| s.split(';').filter(|x| !x.is_empty()).map(str::to_string).collect())
        .unwrap_or_default();
    let convention = match header.get("convention").map(String::as_str) {
        Some("image") | None => PermutationConvention::Image,
        Some("preimage") => PermutationConvention::Preimage,
        Some(other) => return Err(corrupt(format!("unknown convention '{other}'"))),
    };
    let schedule = ControlSchedule {
        strategy,
        delta_t: parse(&header, "delta_t")?,
        seed: parse(&header, "control_seed")?,
        alternation,
        convention,
    };
    let n_steps: usize = parse(&header, "n_steps")?;

    let mut increments = Vec::with_capacity(n_steps);
    let mut control_log = Vec::new();
    let mut finished = false;
    for line in lines {
        let line = line?;
        if let Some(trailer) = line.strip_prefix("# end rows=") {
            let rows: usize = trailer.parse().map_err(|_| corrupt("bad trailer"))?;
            if rows != increments.len() {
                return Err(corrupt(format!("trailer says {rows} rows, read {}", increments.len())));
            }
            finished = true;
            break;
        }
        let mut fields = line.split(',');
        let (Some(step), Some(dr), Some(id), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(corrupt(format!("malformed row '{line}'")));
        };
        let step: usize = step.parse().map_err(|_| corrupt(format!("bad step in '{line}'")))?;
        if step != increments.len() {
            return Err(corrupt(format!("row {step} out of sequence")));
        }
        let dr: f64 = dr.parse().map_err(|_| corrupt(format!("bad dR in '{line}'")))?;
        increments.push(dr);
        if !id.is_empty() {
            let id = id.parse().map_err(|_| corrupt(format!("bad unitary id in '{line}'")))?;
            control_log.push(ControlEntry { step, id });
        }
    }
    if !finished {
        return Err(corrupt(format!("record truncated after {} rows", increments.len())));
    }
    if increments.len() != n_steps {
        return Err(corrupt(format!("{} rows, header says {n_steps}", increments.len())));
    }

    let record = MeasurementRecord {
        params,
        schedule,
        seed: parse(&header, "seed")?,
        increments,
        control_log,
        metadata,
    };
    record.validate()?;
    Ok(record)
}

pub fn save_record(record: &MeasurementRecord, path: &Path) -> Result<()> {
    write_record(record, BufWriter::new(File::create(path)?))
}

pub fn load_record(path: &Path) -> Result<MeasurementRecord> {
    read_record(BufReader::new(File::open(path)?))
}

/// SHA-256 over the little-endian bit patterns of the matrix entries, hex encoded.
pub fn state_digest(rho: &DensityMatrix) -> String {
    let mut h = Sha256::new();
    h.update((rho.dim() as u64).to_le_bytes());
    for z in rho.matrix().as_slice() {
        h.update(z.re.to_bits().to_le_bytes());
        h.update(z.im.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}
