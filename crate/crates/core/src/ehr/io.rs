//! JSON-lines persistence: one patient per line in the dataset file, one
//! code per line in the codes file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{CodeTable, EhrDataset, EhrError, MedicalCode, PatientRecord, Result};

fn parse_lines<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EhrError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_codes(table: &CodeTable, mut w: impl Write) -> Result<()> {
    for c in table.codes() {
        serde_json::to_writer(&mut w, c).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset(ds: &EhrDataset, mut w: impl Write) -> Result<()> {
    for p in &ds.patients {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_codes(table: &CodeTable, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codes(table, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_codes(path: &Path) -> Result<CodeTable> {
    let codes: Vec<MedicalCode> = parse_lines(BufReader::new(File::open(path)?))?;
    if codes.is_empty() {
        return Err(EhrError::Empty);
    }
    CodeTable::new(codes)
}

/// Writes the patients file and its companion codes file.
pub fn save_dataset(ds: &EhrDataset, data_path: &Path, codes_path: &Path) -> Result<()> {
    save_codes(&ds.codes, codes_path)?;
    let mut w = BufWriter::new(File::create(data_path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(data_path: &Path, codes_path: &Path) -> Result<EhrDataset> {
    let codes = load_codes(codes_path)?;
    let patients: Vec<PatientRecord> = parse_lines(BufReader::new(File::open(data_path)?))?;
    if patients.is_empty() {
        return Err(EhrError::Empty);
    }
    EhrDataset::new(codes, patients)
}
