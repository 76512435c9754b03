//! Readers and writers for the on-disk formats: genotype TSV and `LGH1` binary, allele
//! frequency TSV, `GRM1` binary with its ID file, phenotype TSV, and JSON documents.
//!
//! Floats are written with Rust's shortest round-trip formatting, so `parse(write(x)) == x`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use faer::Mat;
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grm::{GenotypeMatrix, Grm};
use crate::model::{LongitudinalDataset, Subject};

pub const GENOTYPE_MAGIC: &[u8; 4] = b"LGH1";
pub const GRM_MAGIC: &[u8; 4] = b"GRM1";

/// Tokens read as a missing value in phenotype files.
pub const MISSING_TOKENS: [&str; 5] = ["", "NA", "NaN", "nan", "."];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn parse_f64(path: &Path, line: usize, field: &str, tok: &str) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|_| parse_err(path, line, format!("{field}: cannot parse {tok:?} as a number")))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push((i + 1, line.to_string()));
    }
    Ok(out)
}

fn has_magic(path: &Path, magic: &[u8; 4]) -> Result<bool> {
    let mut buf = [0u8; 4];
    let mut f = open(path)?;
    match f.read_exact(&mut buf) {
        Ok(()) => Ok(&buf == magic),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, path: &Path, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra).map_err(|e| Error::io(path, e))? {
        0 => Ok(()),
        _ => Err(parse_err(path, 0, "trailing bytes after the declared payload")),
    }
}

/// Companion identifier file of a binary matrix: `<path>.id`.
pub fn id_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".id");
    PathBuf::from(s)
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    Ok(data_lines(path)?.into_iter().map(|(_, l)| l.trim().to_string()).collect())
}

fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut w = create(path)?;
    for id in ids {
        writeln!(w, "{id}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `variant_id<TAB>af` rows; a first row whose af field is not numeric is a header.
pub fn read_allele_freqs(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (k, (line, text)) in data_lines(path)?.into_iter().enumerate() {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 columns, found {}", fields.len())));
        }
        if k == 0 && fields[1].trim().parse::<f64>().is_err() {
            continue;
        }
        out.push((fields[0].trim().to_string(), parse_f64(path, line, "af", fields[1])?));
    }
    Ok(out)
}

pub fn write_allele_freqs(path: &Path, ids: &[String], afs: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "variant_id\taf").map_err(io)?;
    for (id, af) in ids.iter().zip(afs) {
        writeln!(w, "{id}\t{af}").map_err(io)?;
    }
    w.flush().map_err(io)
}

struct RawGenotypes {
    dosages: Mat<f64>,
    subject_ids: Vec<String>,
    variant_ids: Option<Vec<String>>,
}

fn read_genotype_tsv(path: &Path) -> Result<RawGenotypes> {
    let lines = data_lines(path)?;
    let Some((_, header)) = lines.first() else {
        return Err(parse_err(path, 1, "empty genotype file"));
    };
    let mut head: Vec<&str> = header.split('\t').collect();
    // An optional leading label column (e.g. "subject_id") precedes the variant ids.
    let body_width = lines.get(1).map(|(_, l)| l.split('\t').count());
    if body_width == Some(head.len()) {
        head.remove(0);
    }
    let variant_ids: Vec<String> = head.iter().map(|s| s.trim().to_string()).collect();
    let p = variant_ids.len();
    let n = lines.len() - 1;
    let mut dosages = Mat::<f64>::zeros(n, p);
    let mut subject_ids = Vec::with_capacity(n);
    for (i, (line, text)) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != p + 1 {
            return Err(parse_err(path, *line, format!("expected {} columns, found {}", p + 1, fields.len())));
        }
        subject_ids.push(fields[0].trim().to_string());
        for j in 0..p {
            dosages[(i, j)] = parse_f64(path, *line, &variant_ids[j], fields[j + 1])?;
        }
    }
    Ok(RawGenotypes { dosages, subject_ids, variant_ids: Some(variant_ids) })
}

fn read_genotype_binary(path: &Path) -> Result<RawGenotypes> {
    let mut r = BufReader::new(open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    let n = read_u64(&mut r, path)? as usize;
    let p = read_u64(&mut r, path)? as usize;
    let values = read_f64s(&mut r, path, n.checked_mul(p).ok_or_else(|| parse_err(path, 0, "dimensions overflow"))?)?;
    expect_eof(&mut r, path)?;
    let ids_file = id_path(path);
    let subject_ids = if ids_file.exists() {
        let ids = read_ids(&ids_file)?;
        if ids.len() != n {
            return Err(Error::Dimension(format!("{} lists {} ids for {n} subjects", ids_file.display(), ids.len())));
        }
        ids
    } else {
        (1..=n).map(|i| i.to_string()).collect()
    };
    Ok(RawGenotypes { dosages: Mat::from_fn(n, p, |i, j| values[i * p + j]), subject_ids, variant_ids: None })
}

/// Reads genotypes from TSV or `LGH1` binary (detected by magic bytes), attaching allele
/// frequencies from `af_path` when given (matched by variant id for TSV input, by position for
/// binary input) and estimating them otherwise.
pub fn read_genotypes(path: &Path, af_path: Option<&Path>) -> Result<GenotypeMatrix> {
    let raw = if has_magic(path, GENOTYPE_MAGIC)? { read_genotype_binary(path)? } else { read_genotype_tsv(path)? };
    let p = raw.dosages.ncols();
    let afs = af_path.map(read_allele_freqs).transpose()?;
    let (variant_ids, afs) = match (raw.variant_ids, afs) {
        (Some(vids), Some(table)) => {
            let lookup: HashMap<&str, f64> = table.iter().map(|(id, af)| (id.as_str(), *af)).collect();
            let afs =
                vids.iter()
                    .map(|v| {
                        lookup.get(v.as_str()).copied().ok_or_else(|| {
                            Error::invalid(format!("variant {v:?} missing from the allele frequency file"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
            (vids, Some(afs))
        }
        (None, Some(table)) => {
            if table.len() != p {
                return Err(Error::Dimension(format!("{} allele frequencies for {p} variants", table.len())));
            }
            let (vids, afs): (Vec<String>, Vec<f64>) = table.into_iter().unzip();
            (vids, Some(afs))
        }
        (Some(vids), None) => (vids, None),
        (None, None) => ((1..=p).map(|j| format!("v{j}")).collect(), None),
    };
    GenotypeMatrix::new(raw.dosages, afs, raw.subject_ids, variant_ids)
}

pub fn write_genotypes_tsv(path: &Path, geno: &GenotypeMatrix) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "subject_id").map_err(io)?;
    for v in geno.variant_ids() {
        write!(w, "\t{v}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    let d = geno.dosages();
    for (i, id) in geno.subject_ids().iter().enumerate() {
        write!(w, "{id}").map_err(io)?;
        for j in 0..geno.n_variants() {
            write!(w, "\t{}", d[(i, j)]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `LGH1` binary plus a `<path>.id` subject file.
pub fn write_genotypes_binary(path: &Path, geno: &GenotypeMatrix) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(GENOTYPE_MAGIC).map_err(io)?;
    w.write_all(&(geno.n_subjects() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(geno.n_variants() as u64).to_le_bytes()).map_err(io)?;
    let d = geno.dosages();
    for i in 0..geno.n_subjects() {
        for j in 0..geno.n_variants() {
            w.write_all(&d[(i, j)].to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    write_ids(&id_path(path), geno.subject_ids())
}

/// `GRM1` binary (lower triangle, row-major) plus a `<path>.id` subject file.
pub fn write_grm(path: &Path, grm: &Grm) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(GRM_MAGIC).map_err(io)?;
    w.write_all(&(grm.n() as u64).to_le_bytes()).map_err(io)?;
    for i in 0..grm.n() {
        for k in 0..=i {
            w.write_all(&grm.get(i, k).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    write_ids(&id_path(path), grm.subject_ids())
}

/// Reads a `GRM1` file and its ID file. The variant count is not stored and is reported as 0.
pub fn read_grm(path: &Path) -> Result<Grm> {
    if !has_magic(path, GRM_MAGIC)? {
        return Err(parse_err(path, 0, "missing GRM1 magic bytes"));
    }
    let mut r = BufReader::new(open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    let n = read_u64(&mut r, path)? as usize;
    let tri = read_f64s(&mut r, path, n * (n + 1) / 2)?;
    expect_eof(&mut r, path)?;
    let ids = read_ids(&id_path(path))?;
    let mut values = Mat::<f64>::zeros(n, n);
    let mut it = tri.into_iter();
    for i in 0..n {
        for k in 0..=i {
            values[(i, k)] = it.next().expect("sized above");
        }
    }
    Grm::from_parts(values, ids, 0)
}

/// Phenotype records parsed from a TSV, with the count of records dropped for missing values.
#[derive(Debug, Clone)]
pub struct PhenotypeTable {
    pub data: LongitudinalDataset,
    pub dropped: usize,
}

/// Reads `subject_id  time  y  [covariate...]`. Records keep file order within each subject;
/// subjects appear in order of first occurrence. Records with a missing field are dropped.
pub fn read_phenotypes(path: &Path) -> Result<PhenotypeTable> {
    let lines = data_lines(path)?;
    let Some((hline, header)) = lines.first() else {
        return Err(parse_err(path, 1, "empty phenotype file"));
    };
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "subject_id" || cols[1] != "time" || cols[2] != "y" {
        return Err(parse_err(path, *hline, "header must start with subject_id, time, y"));
    }
    let covariate_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut subjects: Vec<Subject> = Vec::new();
    let mut dropped = 0;
    for (line, text) in &lines[1..] {
        let fields: Vec<&str> = text.split('\t').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(parse_err(path, *line, format!("expected {} columns, found {}", cols.len(), fields.len())));
        }
        if fields[0].is_empty() {
            return Err(parse_err(path, *line, "empty subject_id"));
        }
        if fields[1..].iter().any(|f| MISSING_TOKENS.contains(f)) {
            dropped += 1;
            continue;
        }
        let values = fields[1..]
            .iter()
            .zip(&cols[1..])
            .map(|(f, c)| parse_f64(path, *line, c, f))
            .collect::<Result<Vec<f64>>>()?;
        let k = *index.entry(fields[0].to_string()).or_insert_with(|| {
            order.push(fields[0].to_string());
            subjects.push(Subject { id: fields[0].to_string(), times: vec![], phenotypes: vec![], covariates: vec![] });
            subjects.len() - 1
        });
        let s = &mut subjects[k];
        s.times.push(values[0]);
        s.phenotypes.push(values[1]);
        s.covariates.push(values[2..].to_vec());
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} records with missing values", path.display());
    }
    info!("{}: {} subjects, {} records", path.display(), subjects.len(), lines.len() - 1 - dropped);
    Ok(PhenotypeTable { data: LongitudinalDataset::new(subjects, covariate_names)?, dropped })
}

pub fn write_phenotypes(path: &Path, data: &LongitudinalDataset) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "subject_id\ttime\ty").map_err(io)?;
    for c in data.covariate_names() {
        write!(w, "\t{c}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for s in data.subjects() {
        for r in 0..s.times.len() {
            write!(w, "{}\t{}\t{}", s.id, s.times[r], s.phenotypes[r]).map_err(io)?;
            for v in &s.covariates[r] {
                write!(w, "\t{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// A tab-separated table; cells that are `None` are written as `NA`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_tsv())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let lines = data_lines(path)?;
        let Some((_, header)) = lines.first() else {
            return Err(parse_err(path, 1, "empty table"));
        };
        let header: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::with_capacity(lines.len() - 1);
        for (line, text) in &lines[1..] {
            let row: Vec<String> = text.split('\t').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(parse_err(path, *line, format!("expected {} columns, found {}", header.len(), row.len())));
            }
            rows.push(row);
        }
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(open(path)?))?)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::seed::digest_hex(&bytes))
}
