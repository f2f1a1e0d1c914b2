//! Tab-separated fact files: `head<TAB>relation<TAB>tail`, `#` comments.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{KgError, MedicalKG, Result};
use crate::ehr::CodeTable;

pub fn write_kg(kg: &MedicalKG, mut w: impl Write) -> Result<()> {
    writeln!(w, "# head\trelation\ttail")?;
    let name = |c| kg.codes().name(c).expect("validated");
    for t in kg.facts() {
        writeln!(
            w,
            "{}\t{}\t{}",
            name(t.head),
            kg.relation_name(t.relation).expect("validated"),
            name(t.tail)
        )?;
    }
    Ok(())
}

pub fn save_kg(kg: &MedicalKG, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_kg(kg, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_kg(codes: &CodeTable, reader: impl BufRead) -> Result<MedicalKG> {
    let mut facts = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let s = line.trim_end_matches('\r');
        if s.trim().is_empty() || s.trim_start().starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = s.split('\t').collect();
        let [h, r, t] = parts[..] else {
            return Err(KgError::Parse {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, got {}", parts.len()),
            });
        };
        for n in [h, t] {
            if codes.by_name(n).is_none() {
                return Err(KgError::Parse {
                    line: lineno,
                    msg: format!("unknown code name {n:?}"),
                });
            }
        }
        if h == t || r.is_empty() {
            return Err(KgError::Parse {
                line: lineno,
                msg: "self-loop or empty relation".into(),
            });
        }
        let fact = (h.to_string(), r.to_string(), t.to_string());
        if !seen.insert(fact.clone()) {
            log::warn!("line {lineno}: duplicate fact {h} {r} {t} dropped");
            continue;
        }
        facts.push(fact);
    }
    MedicalKG::from_named(codes.clone(), &facts)
}

pub fn load_kg(path: &Path, codes: &CodeTable) -> Result<MedicalKG> {
    read_kg(codes, BufReader::new(File::open(path)?))
}
