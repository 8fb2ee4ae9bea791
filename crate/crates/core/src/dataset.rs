//! JSON Lines dataset files: one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strain::{PhantomRecord, Provenance, SectorLabels, SliceLevel, StrainMatrix, TosCurve};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    patient_id: String,
    slice_level: SliceLevel,
    n_sectors: usize,
    n_frames: usize,
    frame_period_ms: f64,
    strain: Vec<f64>,
    tos_ms: Vec<f64>,
    lma: Vec<[f64; 2]>,
    scar_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl From<&PhantomRecord> for RecordLine {
    fn from(r: &PhantomRecord) -> Self {
        Self {
            id: r.id.clone(),
            patient_id: r.patient_id.clone(),
            slice_level: r.slice_level,
            n_sectors: r.strain.n_sectors(),
            n_frames: r.strain.n_frames(),
            frame_period_ms: r.strain.frame_period_ms(),
            strain: r.strain.values().to_vec(),
            tos_ms: r.tos.tos_ms.clone(),
            lma: r.labels.probs.clone(),
            scar_mask: r.scar_mask.clone(),
            provenance: r.provenance.clone(),
        }
    }
}

impl RecordLine {
    fn into_record(self, line: usize) -> Result<PhantomRecord> {
        let fail = |msg: String| Error::Parse { line, msg: format!("record {}: {msg}", self.id) };
        let cells = self.n_sectors * self.n_frames;
        if self.strain.len() != cells {
            return Err(fail(format!(
                "strain has {} values, expected {} ({}x{})",
                self.strain.len(),
                cells,
                self.n_sectors,
                self.n_frames
            )));
        }
        for (name, len) in
            [("tos_ms", self.tos_ms.len()), ("lma", self.lma.len()), ("scar_mask", self.scar_mask.len())]
        {
            if len != self.n_sectors {
                return Err(fail(format!("{name} has {len} entries, expected {}", self.n_sectors)));
            }
        }
        let strain = StrainMatrix::new(self.n_sectors, self.n_frames, self.frame_period_ms, self.strain.clone())
            .map_err(|e| fail(e.to_string()))?;
        let labels = SectorLabels { probs: self.lma.clone() };
        labels.validate().map_err(|e| fail(e.to_string()))?;
        Ok(PhantomRecord {
            id: self.id,
            patient_id: self.patient_id,
            slice_level: self.slice_level,
            strain,
            tos: TosCurve::new(self.tos_ms),
            labels,
            scar_mask: self.scar_mask,
            provenance: self.provenance,
        })
    }
}

pub fn write_dataset<W: Write>(records: &[PhantomRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &RecordLine::from(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<PhantomRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        out.push(parsed.into_record(line_no)?);
    }
    Ok(out)
}

pub fn save_dataset(records: &[PhantomRecord], path: impl AsRef<Path>) -> Result<()> {
    write_dataset(records, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PhantomRecord>> {
    read_dataset(BufReader::new(File::open(path)?))
}
