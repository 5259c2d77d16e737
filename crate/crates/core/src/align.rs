//! Feature alignment: PCA projection into a shared `d`-dimensional space and
//! per-domain centers.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DomainGraph;

/// Node features of one domain in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFeatures {
    pub domain_id: usize,
    pub matrix: Array2<f64>,
}

impl AlignedFeatures {
    pub fn new(domain_id: usize, matrix: Array2<f64>) -> Self {
        Self { domain_id, matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCenter {
    pub domain_id: usize,
    pub vector: Vec<f64>,
}

/// How the domains are brought into one space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// One PCA fitted on all source domains (raw features zero-padded to a
    /// common width). Projections keep the source mean, so domain centers
    /// stay distinct and non-zero.
    #[default]
    Joint,
    /// Independent centered PCA per domain. Every domain center is then the
    /// zero vector.
    PerDomain,
}

/// A fitted principal-component basis.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub mean: Array1<f64>,
    /// Column scale applied after centering (all ones unless standardized).
    pub scale: Array1<f64>,
    /// `d_in x d` basis; columns are unit eigenvectors in descending
    /// eigenvalue order, or zero where no variance is left.
    pub components: Array2<f64>,
    pub eigenvalues: Vec<f64>,
}

fn check_finite(x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("feature matrix contains non-finite entries".into()));
    }
    Ok(())
}

impl PcaFit {
    pub fn fit(x: &Array2<f64>, d: usize) -> Result<Self> {
        Self::fit_with(x, d, false)
    }

    pub fn fit_with(x: &Array2<f64>, d: usize, standardize: bool) -> Result<Self> {
        check_finite(x)?;
        let (n, p) = x.dim();
        if n == 0 || d == 0 {
            return Err(Error::Validation(format!(
                "pca needs at least one row and d >= 1 (rows={n}, d={d})"
            )));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 1");
        let mut centered = x - &mean;
        let mut scale = Array1::ones(p);
        if standardize && n > 1 {
            for (j, mut col) in centered.columns_mut().into_iter().enumerate() {
                let sd = (col.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64).sqrt();
                if sd > 0.0 {
                    col /= sd;
                    scale[j] = sd;
                }
            }
        }
        let mut components = Array2::zeros((p, d));
        let mut eigenvalues = vec![0.0; d];
        if n > 1 {
            let cov = centered.t().dot(&centered) / (n - 1) as f64;
            let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| cov[[i, j]]));
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| {
                eig.eigenvalues[b]
                    .partial_cmp(&eig.eigenvalues[a])
                    .expect("finite covariance")
                    .then(a.cmp(&b))
            });
            let top = eig.eigenvalues[order[0]].max(0.0);
            let cutoff = 1e-12 * top.max(f64::MIN_POSITIVE);
            for (slot, &idx) in order.iter().take(d).enumerate() {
                let lambda = eig.eigenvalues[idx];
                if top == 0.0 || lambda <= cutoff {
                    continue;
                }
                let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
                let pivot = v
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
                if v[pivot] < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                for (i, x) in v.into_iter().enumerate() {
                    components[[i, slot]] = x;
                }
                eigenvalues[slot] = lambda;
            }
        }
        Ok(Self {
            mean,
            scale,
            components,
            eigenvalues,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Centered projection `((x - mean) / scale) V`.
    pub fn project(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        Ok(((x - &self.mean) / &self.scale).dot(&self.components))
    }

    /// Projection without removing the mean, `(x / scale) V`.
    pub fn project_raw(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        Ok((x / &self.scale).dot(&self.components))
    }

    /// Maps projected rows back to (centered, scaled) input coordinates.
    pub fn back_project(&self, y: &Array2<f64>) -> Array2<f64> {
        y.dot(&self.components.t())
    }

    fn check_width(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "pca fitted on {} columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        check_finite(x)
    }
}

/// Centers the rows and projects them onto the top-`d` principal axes.
pub fn pca_project(domain_id: usize, features_raw: &Array2<f64>, d: usize) -> Result<AlignedFeatures> {
    let fit = PcaFit::fit(features_raw, d)?;
    Ok(AlignedFeatures::new(domain_id, fit.project(features_raw)?))
}

pub fn domain_center(aligned: &AlignedFeatures) -> DomainCenter {
    DomainCenter {
        domain_id: aligned.domain_id,
        vector: aligned
            .matrix
            .mean_axis(Axis(0))
            .expect("aligned features have at least one row")
            .to_vec(),
    }
}

fn pad_columns(x: &Array2<f64>, width: usize) -> Array2<f64> {
    if x.ncols() == width {
        return x.clone();
    }
    let mut out = Array2::zeros((x.nrows(), width));
    out.slice_mut(s![.., ..x.ncols()]).assign(x);
    out
}

/// Aligns the source domains and the target domain into one `d`-dimensional
/// space. In [`AlignMode::Joint`] the basis is fitted on the sources only and
/// the target is projected with it.
pub fn align_domains(
    sources: &[DomainGraph],
    target: &DomainGraph,
    d: usize,
    mode: AlignMode,
    standardize: bool,
) -> Result<(Vec<AlignedFeatures>, AlignedFeatures)> {
    match mode {
        AlignMode::PerDomain => {
            let project = |g: &DomainGraph| -> Result<AlignedFeatures> {
                let fit = PcaFit::fit_with(&g.features_raw, d, standardize)?;
                Ok(AlignedFeatures::new(g.domain_id, fit.project(&g.features_raw)?))
            };
            let src = sources.iter().map(project).collect::<Result<Vec<_>>>()?;
            Ok((src, project(target)?))
        }
        AlignMode::Joint => {
            let width = sources
                .iter()
                .chain(std::iter::once(target))
                .map(DomainGraph::raw_dim)
                .max()
                .unwrap_or(0);
            let padded: Vec<Array2<f64>> = sources
                .iter()
                .map(|g| pad_columns(&g.features_raw, width))
                .collect();
            let views: Vec<_> = padded.iter().map(|m| m.view()).collect();
            let stacked = ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
            let fit = PcaFit::fit_with(&stacked, d, standardize)?;
            let src = sources
                .iter()
                .zip(&padded)
                .map(|(g, m)| Ok(AlignedFeatures::new(g.domain_id, fit.project_raw(m)?)))
                .collect::<Result<Vec<_>>>()?;
            let tgt = AlignedFeatures::new(
                target.domain_id,
                fit.project_raw(&pad_columns(&target.features_raw, width))?,
            );
            Ok((src, tgt))
        }
    }
}
