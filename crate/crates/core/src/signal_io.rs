//! Record and cohort input/output.
//!
//! Records come either as a WFDB header/signal pair in format 16 (16-bit
//! little-endian two's complement, one or two interleaved signals) or as a
//! plain CSV column. Cohorts are described by a manifest CSV with the header
//! `record_id,path,format,fs,age`; relative paths resolve against the
//! manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};

/// One of the 15 age bins: 18-19, then 5-year bins from 20 to 84, then 85-92.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub const COUNT: usize = 15;

    pub fn from_index(index: usize) -> Result<Self> {
        if index < Self::COUNT {
            Ok(AgeGroup(index as u8))
        } else {
            Err(Error::invalid(format!("age group index {index} out of range 0..15")))
        }
    }

    /// Maps an age in years (fractions truncated) onto its bin.
    pub fn from_age(age: f64) -> Result<Self> {
        if !age.is_finite() {
            return Err(Error::AgeOutOfRange(age));
        }
        let years = age.floor() as i64;
        let index = match years {
            18..=19 => 0,
            20..=84 => 1 + (years - 20) / 5,
            85..=92 => 14,
            _ => return Err(Error::AgeOutOfRange(age)),
        };
        Ok(AgeGroup(index as u8))
    }

    pub fn all() -> impl Iterator<Item = AgeGroup> {
        (0..Self::COUNT as u8).map(AgeGroup)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Inclusive lower bound in years.
    pub fn lo(self) -> u32 {
        match self.0 {
            0 => 18,
            14 => 85,
            i => 20 + 5 * (i as u32 - 1),
        }
    }

    /// Inclusive upper bound in years.
    pub fn hi(self) -> u32 {
        match self.0 {
            0 => 19,
            14 => 92,
            i => 24 + 5 * (i as u32 - 1),
        }
    }

    pub fn label(self) -> String {
        format!("{}-{}", self.lo(), self.hi())
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}y", self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub record_id: String,
    /// Amplitudes in millivolts.
    pub samples: Vec<f64>,
    pub fs: u32,
    pub lead: String,
    pub age_group: Option<AgeGroup>,
}

impl EcgRecord {
    pub fn new(record_id: impl Into<String>, samples: Vec<f64>, fs: u32) -> Result<Self> {
        if fs == 0 {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("record has no samples"));
        }
        Ok(EcgRecord {
            record_id: record_id.into(),
            samples,
            fs,
            lead: "II".to_string(),
            age_group: None,
        })
    }

    pub fn with_age_group(mut self, group: AgeGroup) -> Self {
        self.age_group = Some(group);
        self
    }

    pub fn with_lead(mut self, lead: impl Into<String>) -> Self {
        self.lead = lead.into();
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Wfdb16,
    Csv,
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wfdb16" | "wfdb" => Ok(RecordFormat::Wfdb16),
            "csv" => Ok(RecordFormat::Csv),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

impl fmt::Display for RecordFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordFormat::Wfdb16 => "wfdb16",
            RecordFormat::Csv => "csv",
        })
    }
}

/// Options for [`read_record_with`].
#[derive(Debug, Clone, Default)]
pub struct ReadOptions {
    /// Sampling rate; required for CSV, overrides nothing for WFDB unless the
    /// header omits it.
    pub fs: Option<u32>,
    /// Lead to select by description (WFDB) or column name (CSV). Defaults
    /// to lead "II" when present, else the first signal.
    pub lead: Option<String>,
}

pub fn read_record(path: &Path, format: RecordFormat) -> Result<EcgRecord> {
    read_record_with(path, format, &ReadOptions::default())
}

pub fn read_record_with(path: &Path, format: RecordFormat, opts: &ReadOptions) -> Result<EcgRecord> {
    match format {
        RecordFormat::Wfdb16 => read_wfdb16(path, opts),
        RecordFormat::Csv => read_csv_record(path, opts),
    }
}

/// Parsed WFDB signal specification line.
#[derive(Debug, Clone, PartialEq)]
pub struct WfdbSignal {
    pub file_name: String,
    pub format: String,
    pub gain: f64,
    pub baseline: f64,
    pub units: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfdbHeader {
    pub record_name: String,
    pub fs: Option<f64>,
    pub n_samples: Option<usize>,
    pub signals: Vec<WfdbSignal>,
}

fn header_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hea") => path.to_path_buf(),
        Some("dat") => path.with_extension("hea"),
        _ => {
            let mut p = path.as_os_str().to_owned();
            p.push(".hea");
            PathBuf::from(p)
        }
    }
}

fn leading_number(s: &str) -> &str {
    let end = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
        .unwrap_or(s.len());
    &s[..end]
}

pub fn parse_wfdb_header(text: &str, path: &Path) -> Result<WfdbHeader> {
    let malformed = |msg: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let record_line = lines.next().ok_or_else(|| malformed("empty header".into()))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(malformed(format!("record line too short: {record_line:?}")));
    }
    if fields[0].contains('/') {
        return Err(malformed("multi-segment records are not supported".into()));
    }
    let n_sig: usize = fields[1]
        .parse()
        .map_err(|_| malformed(format!("bad signal count {:?}", fields[1])))?;
    let fs = match fields.get(2) {
        Some(f) => Some(
            leading_number(f)
                .parse::<f64>()
                .map_err(|_| malformed(format!("bad sampling frequency {f:?}")))?,
        ),
        None => None,
    };
    let n_samples = match fields.get(3) {
        Some(f) => Some(
            f.parse::<usize>()
                .map_err(|_| malformed(format!("bad sample count {f:?}")))?,
        ),
        None => None,
    };
    let mut signals = Vec::with_capacity(n_sig);
    for _ in 0..n_sig {
        let line = lines
            .next()
            .ok_or_else(|| malformed(format!("expected {n_sig} signal lines")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(malformed(format!("signal line too short: {line:?}")));
        }
        let format = f[1].to_string();
        let adc_zero: f64 = f.get(4).and_then(|v| v.parse().ok()).unwrap_or(0.0);
        let (gain, baseline, units) = match f.get(2) {
            None => (200.0, adc_zero, "mV".to_string()),
            Some(spec) => {
                let (gain_part, units) = match spec.split_once('/') {
                    Some((g, u)) => (g, u.to_string()),
                    None => (*spec, "mV".to_string()),
                };
                let (gain_str, baseline) = match gain_part.split_once('(') {
                    Some((g, b)) => {
                        let b = b.trim_end_matches(')');
                        let b: f64 = b.parse().map_err(|_| malformed(format!("bad baseline {b:?}")))?;
                        (g, b)
                    }
                    None => (gain_part, adc_zero),
                };
                let gain: f64 = gain_str
                    .parse()
                    .map_err(|_| malformed(format!("bad gain {gain_str:?}")))?;
                let gain = if gain == 0.0 { 200.0 } else { gain };
                (gain, baseline, units)
            }
        };
        let description = if f.len() > 8 { f[8..].join(" ") } else { String::new() };
        signals.push(WfdbSignal {
            file_name: f[0].to_string(),
            format,
            gain,
            baseline,
            units,
            description,
        });
    }
    Ok(WfdbHeader {
        record_name: fields[0].to_string(),
        fs,
        n_samples,
        signals,
    })
}

fn units_to_mv(units: &str) -> Result<f64> {
    match units {
        "mV" | "mv" | "" => Ok(1.0),
        "uV" | "µV" | "uv" => Ok(1e-3),
        "V" => Ok(1e3),
        other => Err(Error::invalid(format!("unsupported signal units {other:?}"))),
    }
}

fn select_lead(names: &[String], wanted: Option<&str>) -> Result<usize> {
    match wanted {
        Some(w) => names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(w))
            .ok_or_else(|| Error::invalid(format!("lead {w:?} not found among {names:?}"))),
        None => Ok(names.iter().position(|n| n.eq_ignore_ascii_case("II")).unwrap_or(0)),
    }
}

fn read_wfdb16(path: &Path, opts: &ReadOptions) -> Result<EcgRecord> {
    let hea = header_path(path);
    let text = fs::read_to_string(&hea).map_err(|e| Error::io(&hea, e))?;
    let header = parse_wfdb_header(&text, &hea)?;
    if header.signals.is_empty() || header.signals.len() > 2 {
        return Err(Error::MalformedHeader {
            path: hea,
            msg: format!("{} signals; only 1 or 2 are supported", header.signals.len()),
        });
    }
    for s in &header.signals {
        if s.format != "16" {
            return Err(Error::UnsupportedFormat(s.format.clone()));
        }
    }
    let file_name = &header.signals[0].file_name;
    if header.signals.iter().any(|s| &s.file_name != file_name) {
        return Err(Error::MalformedHeader {
            path: hea,
            msg: "signals spread over several files".into(),
        });
    }
    let dat = hea.parent().unwrap_or(Path::new(".")).join(file_name);
    let bytes = fs::read(&dat).map_err(|e| Error::io(&dat, e))?;
    let n_sig = header.signals.len();
    let frame = 2 * n_sig;
    if bytes.len() % frame != 0 {
        return Err(Error::LengthMismatch {
            expected: header.n_samples.unwrap_or(0),
            actual: bytes.len() / frame,
        });
    }
    let n = bytes.len() / frame;
    if let Some(expected) = header.n_samples {
        if expected != 0 && expected != n {
            return Err(Error::LengthMismatch { expected, actual: n });
        }
    }
    let names: Vec<String> = header
        .signals
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.description.is_empty() {
                format!("sig{i}")
            } else {
                s.description.clone()
            }
        })
        .collect();
    let idx = select_lead(&names, opts.lead.as_deref())?;
    let sig = &header.signals[idx];
    let to_mv = units_to_mv(&sig.units)?;
    let samples: Vec<f64> = bytes
        .chunks_exact(frame)
        .map(|fr| {
            let raw = i16::from_le_bytes([fr[2 * idx], fr[2 * idx + 1]]);
            // -32768 is WFDB's invalid-sample marker.
            if raw == i16::MIN {
                f64::NAN
            } else {
                (raw as f64 - sig.baseline) / sig.gain * to_mv
            }
        })
        .collect();
    let fs = match (header.fs, opts.fs) {
        (Some(f), _) => f,
        (None, Some(f)) => f as f64,
        (None, None) => 250.0,
    };
    if fs.fract() != 0.0 || fs <= 0.0 {
        return Err(Error::MalformedHeader {
            path: hea,
            msg: format!("non-integer sampling frequency {fs}"),
        });
    }
    Ok(EcgRecord::new(header.record_name, samples, fs as u32)?.with_lead(names[idx].clone()))
}

fn read_csv_record(path: &Path, opts: &ReadOptions) -> Result<EcgRecord> {
    let fs = opts
        .fs
        .ok_or_else(|| Error::invalid("CSV records need an explicit sampling rate"))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::invalid(format!("{other:?}")),
        })?;
    let mut rows = reader.records();
    let first = match rows.next() {
        Some(r) => r?,
        None => return Err(Error::invalid(format!("{} is empty", path.display()))),
    };
    let is_header = first
        .iter()
        .any(|f| f.trim().parse::<f64>().is_err() && !f.trim().is_empty());
    let (names, mut pending): (Vec<String>, Option<csv::StringRecord>) = if is_header {
        (first.iter().map(|s| s.trim().to_string()).collect(), None)
    } else {
        ((0..first.len()).map(|i| format!("sig{i}")).collect(), Some(first))
    };
    let data_cols: Vec<usize> = (0..names.len())
        .filter(|&i| {
            !matches!(
                names[i].to_ascii_lowercase().as_str(),
                "time" | "t" | "sample" | "index"
            )
        })
        .collect();
    let data_names: Vec<String> = data_cols.iter().map(|&i| names[i].clone()).collect();
    if data_names.is_empty() {
        return Err(Error::invalid("CSV has no signal column"));
    }
    let col = data_cols[select_lead(&data_names, opts.lead.as_deref())?];
    let mut samples = Vec::new();
    let mut push = |rec: &csv::StringRecord| -> Result<()> {
        let cell = rec.get(col).unwrap_or("").trim();
        let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
            f64::NAN
        } else {
            cell.parse::<f64>()
                .map_err(|_| Error::invalid(format!("non-numeric sample {cell:?}")))?
        };
        samples.push(v);
        Ok(())
    };
    if let Some(rec) = pending.take() {
        push(&rec)?;
    }
    for rec in rows {
        push(&rec?)?;
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let lead = names[col].clone();
    Ok(EcgRecord::new(id, samples, fs)?.with_lead(lead))
}

/// Writes a single-signal format-16 record as `<dir>/<record_id>.hea/.dat`.
/// Samples are quantized at `gain` ADC units per mV (non-finite samples
/// become the invalid marker). Returns the header path.
pub fn write_wfdb16(record: &EcgRecord, dir: &Path, gain: f64) -> Result<PathBuf> {
    let dat_name = format!("{}.dat", record.record_id);
    let mut bytes = Vec::with_capacity(record.samples.len() * 2);
    for v in &record.samples {
        let raw = if v.is_finite() {
            (v * gain).round().clamp(-32767.0, 32767.0) as i16
        } else {
            i16::MIN
        };
        bytes.extend_from_slice(&raw.to_le_bytes());
    }
    let dat = dir.join(&dat_name);
    fs::write(&dat, &bytes).map_err(|e| Error::io(&dat, e))?;
    let header = format!(
        "{} 1 {} {}\n{} 16 {}(0)/mV 16 0 0 0 0 {}\n",
        record.record_id,
        record.fs,
        record.samples.len(),
        dat_name,
        gain,
        record.lead
    );
    let hea = dir.join(format!("{}.hea", record.record_id));
    fs::write(&hea, header).map_err(|e| Error::io(&hea, e))?;
    Ok(hea)
}

/// Writes a one-column CSV with the lead name as header.
pub fn write_csv_record(record: &EcgRecord, path: &Path) -> Result<()> {
    write_csv_record_with(record, path, &[])
}

/// As [`write_csv_record`], preceded by `# `-prefixed comment lines.
pub fn write_csv_record_with(record: &EcgRecord, path: &Path, preamble: &[String]) -> Result<()> {
    let mut out = String::with_capacity(record.samples.len() * 10);
    for line in preamble {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&record.lead);
    out.push('\n');
    for v in &record.samples {
        if v.is_finite() {
            out.push_str(&v.to_string());
        } else {
            out.push_str("nan");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Decimates by an integer ratio after a zero-phase anti-alias low-pass with
/// cutoff `0.45 * target_fs`. Output length is `ceil(N * target_fs / fs)`.
pub fn resample(record: &EcgRecord, target_fs: u32) -> Result<EcgRecord> {
    if target_fs == 0 || record.fs % target_fs != 0 {
        return Err(Error::NonIntegerRatio {
            from: record.fs,
            to: target_fs,
        });
    }
    let ratio = (record.fs / target_fs) as usize;
    if ratio == 1 {
        return Ok(record.clone());
    }
    let cutoff = 0.45 * target_fs as f64 / record.fs as f64;
    let h = dsp::fir_lowpass(cutoff, 8 * ratio + 1);
    let filtered = dsp::convolve_same(&record.samples, &h);
    let samples: Vec<f64> = filtered.into_iter().step_by(ratio).collect();
    Ok(EcgRecord {
        samples,
        fs: target_fs,
        ..record.clone()
    })
}

/// Replaces non-finite samples by linear interpolation between the nearest
/// finite neighbours; leading and trailing gaps hold the nearest finite value.
pub fn impute_missing(record: &EcgRecord) -> Result<EcgRecord> {
    let x = &record.samples;
    let finite: Vec<usize> = (0..x.len()).filter(|&i| x[i].is_finite()).collect();
    let (&first, &last) = match (finite.first(), finite.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::AllMissing),
    };
    if finite.len() == x.len() {
        return Ok(record.clone());
    }
    let mut out = x.clone();
    out[..first].fill(x[first]);
    out[last + 1..].fill(x[last]);
    for w in finite.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b > a + 1 {
            let (va, vb) = (x[a], x[b]);
            for (i, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
                let f = (i - a) as f64 / (b - a) as f64;
                *o = va + f * (vb - va);
            }
        }
    }
    Ok(EcgRecord {
        samples: out,
        ..record.clone()
    })
}

/// One row of a cohort manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub record_id: String,
    pub path: String,
    pub format: RecordFormat,
    pub fs: Option<u32>,
    pub age: Option<f64>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::invalid(format!("{other:?}")),
        })?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    write_manifest_with(rows, path, &[])
}

/// As [`write_manifest`], preceded by `# `-prefixed comment lines.
pub fn write_manifest_with(rows: &[ManifestRow], path: &Path, preamble: &[String]) -> Result<()> {
    let mut out: Vec<u8> = preamble.iter().flat_map(|l| format!("# {l}\n").into_bytes()).collect();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub records: Vec<EcgRecord>,
    pub manifest_path: Option<PathBuf>,
    /// Manifest rows dropped because their age was missing.
    pub excluded_missing_age: usize,
}

impl Cohort {
    pub fn new(records: Vec<EcgRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::DuplicateRecord(r.record_id.clone()));
            }
        }
        Ok(Cohort {
            records,
            manifest_path: None,
            excluded_missing_age: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, record_id: &str) -> Option<&EcgRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Record counts per age group (records without a group are skipped).
    pub fn group_counts(&self) -> [usize; AgeGroup::COUNT] {
        let mut c = [0; AgeGroup::COUNT];
        for g in self.records.iter().filter_map(|r| r.age_group) {
            c[g.index()] += 1;
        }
        c
    }
}

/// Loads every manifest row that has an age, imputing missing samples.
/// Records are loaded in parallel; order follows the manifest.
pub fn load_cohort(manifest: &Path) -> Result<Cohort> {
    use rayon::prelude::*;

    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    for r in &rows {
        if !seen.insert(r.record_id.as_str()) {
            return Err(Error::DuplicateRecord(r.record_id.clone()));
        }
    }
    let excluded = rows.iter().filter(|r| r.age.is_none()).count();
    if excluded > 0 {
        log::info!("{excluded} manifest rows without age excluded");
    }
    let records = rows
        .par_iter()
        .filter(|r| r.age.is_some())
        .map(|row| {
            let group = AgeGroup::from_age(row.age.unwrap_or(f64::NAN))?;
            let path = base.join(&row.path);
            let opts = ReadOptions { fs: row.fs, lead: None };
            let mut rec = read_record_with(&path, row.format, &opts)?;
            if let Some(fs) = row.fs {
                if fs != rec.fs {
                    return Err(Error::invalid(format!(
                        "{}: manifest fs {fs} disagrees with header fs {}",
                        row.record_id, rec.fs
                    )));
                }
            }
            rec.record_id = row.record_id.clone();
            rec.age_group = Some(group);
            impute_missing(&rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        records,
        manifest_path: Some(manifest.to_path_buf()),
        excluded_missing_age: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn rec(samples: Vec<f64>, fs: u32) -> EcgRecord {
        EcgRecord::new("r", samples, fs).unwrap()
    }

    #[test]
    fn age_group_bins() {
        assert_eq!(AgeGroup::from_age(18.0).unwrap().index(), 0);
        assert_eq!(AgeGroup::from_age(19.0).unwrap().index(), 0);
        assert_eq!(AgeGroup::from_age(22.0).unwrap().index(), 1);
        assert_eq!(AgeGroup::from_age(84.0).unwrap().index(), 13);
        assert_eq!(AgeGroup::from_age(85.0).unwrap().index(), 14);
        assert_eq!(AgeGroup::from_age(92.0).unwrap().index(), 14);
        assert!(AgeGroup::from_age(17.0).is_err());
        assert!(AgeGroup::from_age(93.0).is_err());
        for g in AgeGroup::all() {
            assert_eq!(AgeGroup::from_age(g.lo() as f64).unwrap(), g);
            assert_eq!(AgeGroup::from_age(g.hi() as f64).unwrap(), g);
        }
    }

    #[test]
    fn wfdb16_gain_and_baseline() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("a.hea"),
            "a 1 1000 3\na.dat 16 200(0)/mV 16 0 0 0 0 II\n",
        )
        .unwrap();
        let raw: Vec<u8> = [400i16, -200, 0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("a.dat"), raw).unwrap();
        let r = read_record(&dir.path().join("a"), RecordFormat::Wfdb16).unwrap();
        assert_eq!(r.samples, vec![2.0, -1.0, 0.0]);
        assert_eq!(r.fs, 1000);
        assert_eq!(r.lead, "II");
    }

    #[test]
    fn wfdb16_dual_signal_selects_lead_ii() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("b.hea"),
            "b 2 500 2\nb.dat 16 100(10)/mV 16 0 0 0 0 I\nb.dat 16 1000/uV 16 0 0 0 0 II\n",
        )
        .unwrap();
        let raw: Vec<u8> = [110i16, 2000, 10, -1000].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("b.dat"), raw).unwrap();
        let r = read_record(&dir.path().join("b.hea"), RecordFormat::Wfdb16).unwrap();
        assert_eq!(r.samples, vec![2e-3, -1e-3]);
        let r = read_record_with(
            &dir.path().join("b"),
            RecordFormat::Wfdb16,
            &ReadOptions {
                lead: Some("I".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.samples, vec![1.0, 0.0]);
    }

    #[test]
    fn wfdb16_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("c.hea"), "c 1 1000 5\nc.dat 16 200 16 0 0 0 0 II\n").unwrap();
        fs::write(p.join("c.dat"), [0u8; 6]).unwrap();
        assert!(matches!(
            read_record(&p.join("c"), RecordFormat::Wfdb16),
            Err(Error::LengthMismatch { expected: 5, actual: 3 })
        ));
        fs::write(p.join("d.hea"), "d 1 1000 3\nd.dat 212 200 12 0 0 0 0 II\n").unwrap();
        fs::write(p.join("d.dat"), [0u8; 6]).unwrap();
        assert!(matches!(
            read_record(&p.join("d"), RecordFormat::Wfdb16),
            Err(Error::UnsupportedFormat(_))
        ));
        fs::write(p.join("e.hea"), "e 1 1000 3\ne.dat 16 abc 16 0 0 0 0 II\n").unwrap();
        assert!(matches!(
            read_record(&p.join("e"), RecordFormat::Wfdb16),
            Err(Error::MalformedHeader { .. })
        ));
        fs::write(p.join("f.hea"), "f 2 1000 3\nf.dat 16 200 16 0 0 0 0 II\n").unwrap();
        assert!(matches!(
            read_record(&p.join("f"), RecordFormat::Wfdb16),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn wfdb16_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = rec(vec![0.0, 1.5, -0.25, 0.001], 500);
        let hea = write_wfdb16(&r, dir.path(), 1000.0).unwrap();
        let back = read_record(&hea, RecordFormat::Wfdb16).unwrap();
        assert_eq!(back.samples, r.samples);
        assert_eq!(back.fs, 500);
    }

    #[test]
    fn csv_record_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let body: String = (0..1000).map(|i| format!("{}\n", i as f64 * 0.001)).collect();
        fs::write(&p, format!("II\n{body}")).unwrap();
        let r = read_record_with(
            &p,
            RecordFormat::Csv,
            &ReadOptions {
                fs: Some(1000),
                lead: None,
            },
        )
        .unwrap();
        assert_eq!(r.samples.len(), 1000);
        assert_eq!(r.fs, 1000);
        assert!(read_record(&p, RecordFormat::Csv).is_err());

        fs::write(&p, "time,I,II\n0,1,2\n1,3,\n").unwrap();
        let r = read_record_with(
            &p,
            RecordFormat::Csv,
            &ReadOptions {
                fs: Some(10),
                lead: None,
            },
        )
        .unwrap();
        assert_eq!(r.samples[0], 2.0);
        assert!(r.samples[1].is_nan());
    }

    #[test]
    fn resample_lengths_and_dc() {
        let r = rec(vec![0.7; 10_000], 1000);
        let d = resample(&r, 100).unwrap();
        assert_eq!(d.samples.len(), 1000);
        assert!(d.samples.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let odd = rec(vec![1.0; 1005], 1000);
        assert_eq!(resample(&odd, 100).unwrap().samples.len(), 101);
        assert!(matches!(resample(&r, 300), Err(Error::NonIntegerRatio { .. })));
        assert_eq!(resample(&r, 1000).unwrap(), r);
    }

    #[test]
    fn resample_preserves_slow_sinusoid() {
        let x: Vec<f64> = (0..10_000)
            .map(|i| (2.0 * PI * 5.0 * i as f64 / 1000.0).sin())
            .collect();
        let d = resample(&rec(x, 1000), 100).unwrap();
        // Compare away from the edges against the analytic sinusoid at 100 Hz.
        for (i, v) in d.samples.iter().enumerate().skip(20).take(960) {
            let want = (2.0 * PI * 5.0 * i as f64 / 100.0).sin();
            assert!((v - want).abs() < 0.01, "i={i} got {v} want {want}");
        }
    }

    #[test]
    fn impute_examples() {
        let r = impute_missing(&rec(vec![1.0, f64::NAN, 3.0], 1)).unwrap();
        assert_eq!(r.samples, vec![1.0, 2.0, 3.0]);
        let r = impute_missing(&rec(vec![f64::NAN, f64::NAN, 5.0], 1)).unwrap();
        assert_eq!(r.samples, vec![5.0, 5.0, 5.0]);
        let clean = rec(vec![1.0, 2.0], 1);
        assert_eq!(impute_missing(&clean).unwrap(), clean);
        assert!(matches!(
            impute_missing(&rec(vec![f64::NAN, f64::INFINITY], 1)),
            Err(Error::AllMissing)
        ));
    }

    #[test]
    fn cohort_manifest_excludes_missing_age() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        for id in ["a", "b", "c"] {
            write_csv_record(&rec(vec![0.0, 1.0, f64::NAN, 3.0], 100), &p.join(format!("{id}.csv"))).unwrap();
        }
        fs::write(
            p.join("m.csv"),
            "record_id,path,format,fs,age\na,a.csv,csv,100,22\nb,b.csv,csv,100,\nc,c.csv,csv,100,18\n",
        )
        .unwrap();
        let c = load_cohort(&p.join("m.csv")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.excluded_missing_age, 1);
        assert_eq!(c.records[0].age_group.unwrap().index(), 1);
        assert_eq!(c.records[1].age_group.unwrap().index(), 0);
        assert_eq!(c.records[0].samples, vec![0.0, 1.0, 2.0, 3.0]);

        fs::write(
            p.join("dup.csv"),
            "record_id,path,format,fs,age\na,a.csv,csv,100,22\na,b.csv,csv,100,30\n",
        )
        .unwrap();
        assert!(matches!(
            load_cohort(&p.join("dup.csv")),
            Err(Error::DuplicateRecord(_))
        ));
        assert!(matches!(load_cohort(&p.join("nope.csv")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn impute_output_is_finite(v in prop::collection::vec(prop_oneof![Just(f64::NAN), -10.0f64..10.0], 1..60)) {
            prop_assume!(v.iter().any(|x| x.is_finite()));
            let out = impute_missing(&rec(v, 10)).unwrap();
            prop_assert!(out.samples.iter().all(|x| x.is_finite()));
        }

        #[test]
        fn resample_is_idempotent_on_length(n in 1usize..3000) {
            let r = rec(vec![0.1; n], 1000);
            let once = resample(&r, 100).unwrap();
            let twice = resample(&once, 100).unwrap();
            prop_assert_eq!(once.samples.len(), twice.samples.len());
            prop_assert_eq!(once.samples.len(), n.div_ceil(10));
        }

        #[test]
        fn age_mapping_total_on_range(age in 18u32..=92) {
            let g = AgeGroup::from_age(age as f64).unwrap();
            prop_assert!(g.lo() <= age && age <= g.hi());
        }
    }
}
