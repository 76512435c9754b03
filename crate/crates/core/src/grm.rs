//! Genotype standardisation and the genetic relationship matrix `G = Z Zᵀ / P`.

use std::collections::HashSet;

use faer::Mat;

use crate::error::{Error, Result};

pub const DEFAULT_MAF: f64 = 0.01;
pub const DEFAULT_CHUNK: usize = 1024;

const DOSAGE_TOL: f64 = 1e-9;

/// Reference-allele dosages for `N` subjects by `P` variants.
#[derive(Debug, Clone)]
pub struct GenotypeMatrix {
    dosages: Mat<f64>,
    allele_freqs: Vec<f64>,
    subject_ids: Vec<String>,
    variant_ids: Vec<String>,
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate {what} identifier {id:?}")));
        }
    }
    Ok(())
}

impl GenotypeMatrix {
    /// Builds a genotype matrix. When `allele_freqs` is `None` they are estimated as
    /// `mean(dosage) / 2` per variant.
    pub fn new(
        dosages: Mat<f64>,
        allele_freqs: Option<Vec<f64>>,
        subject_ids: Vec<String>,
        variant_ids: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = (dosages.nrows(), dosages.ncols());
        if subject_ids.len() != n || variant_ids.len() != p {
            return Err(Error::Dimension(format!(
                "dosages are {n}x{p} but {} subject ids and {} variant ids were given",
                subject_ids.len(),
                variant_ids.len()
            )));
        }
        check_unique(&subject_ids, "subject")?;
        check_unique(&variant_ids, "variant")?;
        for j in 0..p {
            for i in 0..n {
                let x = dosages[(i, j)];
                if x.is_nan() {
                    return Err(Error::invalid(format!(
                        "NaN dosage for subject {} at variant {}",
                        subject_ids[i], variant_ids[j]
                    )));
                }
                if !(-DOSAGE_TOL..=2.0 + DOSAGE_TOL).contains(&x) {
                    return Err(Error::invalid(format!(
                        "dosage {x} outside [0, 2] for subject {} at variant {}",
                        subject_ids[i], variant_ids[j]
                    )));
                }
            }
        }
        let allele_freqs = match allele_freqs {
            Some(af) => {
                if af.len() != p {
                    return Err(Error::Dimension(format!("{} allele frequencies for {p} variants", af.len())));
                }
                af
            }
            None => {
                log::warn!("no allele frequencies supplied; estimating them from the dosages");
                estimate_allele_freqs(&dosages)
            }
        };
        Ok(GenotypeMatrix { dosages, allele_freqs, subject_ids, variant_ids })
    }

    pub fn n_subjects(&self) -> usize {
        self.dosages.nrows()
    }

    pub fn n_variants(&self) -> usize {
        self.dosages.ncols()
    }

    pub fn dosages(&self) -> &Mat<f64> {
        &self.dosages
    }

    pub fn allele_freqs(&self) -> &[f64] {
        &self.allele_freqs
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn variant_ids(&self) -> &[String] {
        &self.variant_ids
    }

    /// Keeps variants whose minor allele frequency is at least `threshold`.
    pub fn filter_maf(&self, threshold: f64) -> GenotypeMatrix {
        let keep: Vec<usize> = self
            .allele_freqs
            .iter()
            .enumerate()
            .filter(|&(_, &af)| af > 0.0 && af < 1.0 && af.min(1.0 - af) >= threshold)
            .map(|(j, _)| j)
            .collect();
        self.select_variants(&keep)
    }

    pub fn select_variants(&self, cols: &[usize]) -> GenotypeMatrix {
        let n = self.n_subjects();
        GenotypeMatrix {
            dosages: Mat::from_fn(n, cols.len(), |i, j| self.dosages[(i, cols[j])]),
            allele_freqs: cols.iter().map(|&j| self.allele_freqs[j]).collect(),
            subject_ids: self.subject_ids.clone(),
            variant_ids: cols.iter().map(|&j| self.variant_ids[j].clone()).collect(),
        }
    }
}

pub fn estimate_allele_freqs(dosages: &Mat<f64>) -> Vec<f64> {
    let n = dosages.nrows().max(1) as f64;
    (0..dosages.ncols()).map(|j| (0..dosages.nrows()).map(|i| dosages[(i, j)]).sum::<f64>() / (2.0 * n)).collect()
}

/// Standardised genotypes `z_ip`, one column per variant.
#[derive(Debug, Clone)]
pub struct StandardizedMatrix {
    pub values: Mat<f64>,
    pub subject_ids: Vec<String>,
}

/// `z_ip = (x_ip - 2 AF_p) / sqrt(2 AF_p (1 - AF_p))` using the supplied frequencies, so each
/// column has mean zero and unit variance under Hardy-Weinberg sampling.
pub fn standardize_genotypes(geno: &GenotypeMatrix) -> Result<StandardizedMatrix> {
    for (j, &af) in geno.allele_freqs.iter().enumerate() {
        if !(af > 0.0 && af < 1.0) {
            return Err(Error::AlleleFrequency { index: j, value: af });
        }
    }
    let (n, p) = (geno.n_subjects(), geno.n_variants());
    let mut z = Mat::zeros(n, p);
    for j in 0..p {
        let af = geno.allele_freqs[j];
        let scale = (2.0 * af * (1.0 - af)).sqrt();
        for i in 0..n {
            let x = geno.dosages[(i, j)];
            if x.is_nan() {
                return Err(Error::invalid(format!("NaN dosage at ({i}, {j})")));
            }
            z[(i, j)] = (x - 2.0 * af) / scale;
        }
    }
    Ok(StandardizedMatrix { values: z, subject_ids: geno.subject_ids.clone() })
}

/// Symmetric genetic relationship matrix over a fixed subject order.
#[derive(Debug, Clone)]
pub struct Grm {
    values: Mat<f64>,
    subject_ids: Vec<String>,
    variant_count: usize,
}

impl Grm {
    /// Wraps an existing matrix; the upper triangle is overwritten by the lower one.
    pub fn from_parts(mut values: Mat<f64>, subject_ids: Vec<String>, variant_count: usize) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n || subject_ids.len() != n {
            return Err(Error::Dimension(format!(
                "GRM is {}x{} with {} ids",
                values.nrows(),
                values.ncols(),
                subject_ids.len()
            )));
        }
        check_unique(&subject_ids, "subject")?;
        for i in 0..n {
            for k in 0..i {
                values[(k, i)] = values[(i, k)];
            }
        }
        Ok(Grm { values, subject_ids, variant_count })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[(i, k)]
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn variant_count(&self) -> usize {
        self.variant_count
    }

    pub fn diag_mean(&self) -> f64 {
        let n = self.n();
        (0..n).map(|i| self.values[(i, i)]).sum::<f64>() / n.max(1) as f64
    }

    /// Logs a warning when the diagonal looks implausible for a standardised GRM.
    pub fn sanity_check(&self) -> bool {
        let m = self.diag_mean();
        let ok = (0.5..=2.0).contains(&m) && (0..self.n()).all(|i| self.values[(i, i)] > 0.0);
        if !ok {
            log::warn!("GRM diagonal mean {m:.4} outside [0.5, 2.0] or non-positive diagonal entry");
        }
        ok
    }

    /// Principal submatrix for the given subject indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Grm> {
        let n = self.n();
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("subject index {i} out of range for {n} subjects")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("duplicate subject index {i}")));
            }
        }
        Ok(Grm {
            values: Mat::from_fn(indices.len(), indices.len(), |a, b| self.values[(indices[a], indices[b])]),
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            variant_count: self.variant_count,
        })
    }
}

/// `G = Z Zᵀ / P`, accumulated over consecutive variant chunks of `chunk` columns.
pub fn compute_grm(z: &StandardizedMatrix, chunk: usize) -> Result<Grm> {
    let (n, p) = (z.values.nrows(), z.values.ncols());
    if p == 0 {
        return Err(Error::Dimension("GRM needs at least one variant".into()));
    }
    if z.subject_ids.len() != n {
        return Err(Error::Dimension(format!("{n} genotype rows but {} subject ids", z.subject_ids.len())));
    }
    let chunk = chunk.max(1);
    let mut g = Mat::<f64>::zeros(n, n);
    let mut start = 0;
    while start < p {
        let width = chunk.min(p - start);
        let block = z.values.as_ref().subcols(start, width);
        g += block * block.transpose();
        start += width;
    }
    let inv_p = 1.0 / p as f64;
    for k in 0..n {
        for i in k..n {
            let v = g[(i, k)] * inv_p;
            g[(i, k)] = v;
            g[(k, i)] = v;
        }
    }
    Ok(Grm { values: g, subject_ids: z.subject_ids.clone(), variant_count: p })
}
