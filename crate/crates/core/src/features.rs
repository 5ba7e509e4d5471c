//! Feature-matrix assembly: embedding flattening, PCA reduction,
//! DEM-derived topography, one-hot land cover, and table alignment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature-set tag carried by every column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Satellite,
    Climate,
    Soil,
    Topography,
    Landcover,
    Geo,
}

impl FeatureSet {
    /// Fixed concatenation order of the assembled matrix.
    pub const ORDER: [FeatureSet; 6] = [
        FeatureSet::Satellite,
        FeatureSet::Climate,
        FeatureSet::Soil,
        FeatureSet::Topography,
        FeatureSet::Landcover,
        FeatureSet::Geo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Satellite => "satellite",
            FeatureSet::Climate => "climate",
            FeatureSet::Soil => "soil",
            FeatureSet::Topography => "topography",
            FeatureSet::Landcover => "landcover",
            FeatureSet::Geo => "geo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "satellite" | "sat" => Ok(FeatureSet::Satellite),
            "climate" | "clim" => Ok(FeatureSet::Climate),
            "soil" => Ok(FeatureSet::Soil),
            "topography" | "topo" => Ok(FeatureSet::Topography),
            "landcover" | "wc" => Ok(FeatureSet::Landcover),
            "geo" => Ok(FeatureSet::Geo),
            other => Err(Error::Validation(format!("unknown feature set \"{other}\""))),
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The 11 land cover classes, in the documented column order.
pub const WORLDCOVER_CLASSES: [&str; 11] = [
    "tree_cover",
    "shrubland",
    "grassland",
    "cropland",
    "built_up",
    "bare_sparse_vegetation",
    "snow_and_ice",
    "permanent_water_bodies",
    "herbaceous_wetland",
    "mangroves",
    "moss_and_lichen",
];

/// Sample-by-feature table with named, set-tagged columns and row ids.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub column_names: Vec<String>,
    pub column_sets: Vec<FeatureSet>,
    pub row_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.column_names.len() != self.values.ncols()
            || self.column_sets.len() != self.values.ncols()
            || self.row_ids.len() != self.values.nrows()
        {
            return Err(Error::Dimension("feature matrix metadata mismatch".into()));
        }
        let unique: BTreeSet<&str> = self.column_names.iter().map(|s| s.as_str()).collect();
        if unique.len() != self.column_names.len() {
            return Err(Error::Validation("duplicate feature column names".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "feature matrix contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Column indices belonging to one feature set.
    pub fn set_columns(&self, set: FeatureSet) -> Vec<usize> {
        self.column_sets
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == set)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Embedding flattening
// ---------------------------------------------------------------------------

/// Row-major flatten of one `[3 x 3 x 128]` patch embedding into a 1152
/// vector (pixel row, pixel col, channel).
pub fn flatten_embeddings(patch: &Array3<f64>) -> Result<Array1<f64>> {
    let (h, w, c) = patch.dim();
    if (h, w, c) != (3, 3, 128) {
        return Err(Error::Dimension(format!(
            "expected [3 x 3 x 128] embedding tensor, got [{h} x {w} x {c}]"
        )));
    }
    Ok(Array1::from_iter(patch.iter().copied()))
}

/// Flatten a batch `[N x 3 x 3 x 128] -> [N x 1152]`.
pub fn flatten_embedding_batch(batch: &ArrayView4<f64>) -> Result<Array2<f64>> {
    let (n, h, w, c) = batch.dim();
    if (h, w, c) != (3, 3, 128) {
        return Err(Error::Dimension(format!(
            "expected [N x 3 x 3 x 128] embeddings, got [{n} x {h} x {w} x {c}]"
        )));
    }
    let mut out = Array2::zeros((n, h * w * c));
    for (i, patch) in batch.outer_iter().enumerate() {
        for (j, v) in patch.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Principal component model: column means, column-orthonormal components
/// `[F x K]`, and non-increasing explained variances.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
}

/// Fit the top-`k` principal axes of `x` (sample covariance, denominator
/// N-1). Sign convention: the largest-magnitude loading of each component is
/// positive.
pub fn fit_pca(x: &Array2<f64>, k: usize) -> Result<PcaModel> {
    let (n, f) = x.dim();
    if n < 2 {
        return Err(Error::Domain("pca needs at least 2 rows".into()));
    }
    if k == 0 || k > (n - 1).min(f) {
        return Err(Error::Domain(format!(
            "pca k = {k} outside [1, min(N-1, F)] = [1, {}]",
            (n - 1).min(f)
        )));
    }
    let mean = x.sum_axis(ndarray::Axis(0)) / n as f64;
    let centered = x - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let sym = DMatrix::from_fn(f, f, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(sym);
    // Sort eigenpairs by descending eigenvalue.
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut components = Array2::zeros((f, k));
    let mut explained = Array1::zeros(k);
    for (col, &src) in order.iter().take(k).enumerate() {
        explained[col] = eig.eigenvalues[src].max(0.0);
        let v = eig.eigenvectors.column(src);
        // Flip so the largest-magnitude loading is positive.
        let mut max_abs = 0.0;
        let mut max_val = 0.0;
        for i in 0..f {
            if v[i].abs() > max_abs {
                max_abs = v[i].abs();
                max_val = v[i];
            }
        }
        let sign = if max_val < 0.0 { -1.0 } else { 1.0 };
        for i in 0..f {
            components[[i, col]] = sign * v[i];
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: explained,
    })
}

/// Fit with `k` clamped to `min(N-1, F)`; returns the effective `k` so
/// callers can warn about the clamp.
pub fn fit_pca_clamped(x: &Array2<f64>, k: usize) -> Result<(PcaModel, usize)> {
    let (n, f) = x.dim();
    if n < 2 {
        return Err(Error::Domain("pca needs at least 2 rows".into()));
    }
    let k_eff = k.min((n - 1).min(f)).max(1);
    Ok((fit_pca(x, k_eff)?, k_eff))
}

/// Project rows onto the principal axes: `(x - mean) . components`.
pub fn transform_pca(model: &PcaModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.mean.len() {
        return Err(Error::Dimension(format!(
            "pca transform expects {} columns, got {}",
            model.mean.len(),
            x.ncols()
        )));
    }
    let centered = x - &model.mean.view().insert_axis(ndarray::Axis(0));
    Ok(centered.dot(&model.components))
}

/// Map projections back to the original space (exact only at K = F).
pub fn inverse_transform_pca(model: &PcaModel, y: &Array2<f64>) -> Array2<f64> {
    y.dot(&model.components.t()) + &model.mean.view().insert_axis(ndarray::Axis(0))
}

// ---------------------------------------------------------------------------
// Topography
// ---------------------------------------------------------------------------

/// Aspect sentinel for flat cells.
pub const FLAT_ASPECT: f64 = -1.0;

/// Slope and aspect from a DEM using 3x3 weighted gradients (Horn).
///
/// Border cells are flagged missing (NaN). Slope is in degrees. Aspect is
/// the downslope-facing compass direction, clockwise from north in
/// [0, 360): a plane rising eastward drains west (270), a plane rising
/// northward drains south (180). Flat cells get the -1 sentinel. Row 0 of
/// the grid is the northern edge.
pub fn horn_slope_aspect(dem: &Array2<f64>, cellsize: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = dem.dim();
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!(
            "dem must be at least 3x3, got {h}x{w}"
        )));
    }
    if !(cellsize > 0.0) {
        return Err(Error::Domain("cellsize must be > 0".into()));
    }
    let mut slope = Array2::from_elem((h, w), f64::NAN);
    let mut aspect = Array2::from_elem((h, w), f64::NAN);
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let z = |di: isize, dj: isize| -> f64 {
                dem[[(i as isize + di) as usize, (j as isize + dj) as usize]]
            };
            // dz/dx eastward, dz/dy northward (row 0 is north).
            let p = ((z(-1, 1) + 2.0 * z(0, 1) + z(1, 1))
                - (z(-1, -1) + 2.0 * z(0, -1) + z(1, -1)))
                / (8.0 * cellsize);
            let q = ((z(-1, -1) + 2.0 * z(-1, 0) + z(-1, 1))
                - (z(1, -1) + 2.0 * z(1, 0) + z(1, 1)))
                / (8.0 * cellsize);
            slope[[i, j]] = (p * p + q * q).sqrt().atan().to_degrees();
            aspect[[i, j]] = if p == 0.0 && q == 0.0 {
                FLAT_ASPECT
            } else {
                let deg = (-p).atan2(-q).to_degrees();
                if deg < 0.0 {
                    deg + 360.0
                } else {
                    deg
                }
            };
        }
    }
    Ok((slope, aspect))
}

// ---------------------------------------------------------------------------
// One-hot encoding
// ---------------------------------------------------------------------------

/// One-hot encode labels against an ordered class list. Every row gets
/// exactly one 1; an unknown label is a validation error naming it.
pub fn one_hot(labels: &[String], classes: &[&str]) -> Result<Array2<f64>> {
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut out = Array2::zeros((labels.len(), classes.len()));
    for (row, label) in labels.iter().enumerate() {
        match index.get(label.as_str()) {
            Some(&col) => out[[row, col]] = 1.0,
            None => {
                return Err(Error::Validation(format!(
                    "unknown class label \"{label}\""
                )))
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Environmental tables and assembly
// ---------------------------------------------------------------------------

/// One environmental table keyed by sample id. Values may contain NaN for
/// missing entries; assembly drops those rows.
#[derive(Debug, Clone)]
pub struct EnvTable {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

impl EnvTable {
    pub fn new(ids: Vec<String>, names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != ids.len() || values.ncols() != names.len() {
            return Err(Error::Dimension(format!(
                "env table shape {:?} does not match {} ids x {} names",
                values.dim(),
                ids.len(),
                names.len()
            )));
        }
        Ok(EnvTable { ids, names, values })
    }
}

/// Read an environmental CSV (`sample_id` key column mandatory). Columns
/// named in `categorical` are one-hot expanded; the class list is either
/// fixed (land cover) or the sorted set of observed labels. Empty, `NA`, and
/// `NaN` cells become missing values.
pub fn read_env_csv(path: &Path, categorical: &[(&str, Option<&[&str]>)]) -> Result<EnvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let id_col = headers
        .iter()
        .position(|h| h == "sample_id")
        .ok_or_else(|| {
            Error::Validation(format!("{}: missing sample_id column", path.display()))
        })?;
    let cat_cols: BTreeMap<usize, &str> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            categorical
                .iter()
                .find(|(name, _)| name == h)
                .map(|(name, _)| (i, *name))
        })
        .collect();

    let mut ids = Vec::new();
    let mut numeric_rows: Vec<Vec<f64>> = Vec::new();
    let mut cat_values: BTreeMap<&str, Vec<String>> =
        cat_cols.values().map(|&n| (n, Vec::new())).collect();
    for record in reader.records() {
        let record = record?;
        ids.push(record[id_col].to_string());
        let mut row = Vec::new();
        for (i, field) in record.iter().enumerate() {
            if i == id_col {
                continue;
            }
            if let Some(name) = cat_cols.get(&i) {
                cat_values.get_mut(name).unwrap().push(field.to_string());
            } else {
                row.push(parse_cell(field, &headers[i], path)?);
            }
        }
        numeric_rows.push(row);
    }
    let numeric_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id_col && !cat_cols.contains_key(i))
        .map(|(_, h)| h.clone())
        .collect();
    let n = ids.len();
    let mut names = numeric_names.clone();
    let mut values = Array2::zeros((n, numeric_names.len()));
    for (r, row) in numeric_rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            values[[r, c]] = v;
        }
    }
    // Append one-hot blocks for each categorical column.
    for (name, labels) in &cat_values {
        let fixed = categorical
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, classes)| *classes);
        let owned_classes: Vec<String> = match fixed {
            Some(classes) => classes.iter().map(|s| s.to_string()).collect(),
            None => {
                let set: BTreeSet<String> = labels
                    .iter()
                    .filter(|l| !is_missing(l))
                    .cloned()
                    .collect();
                set.into_iter().collect()
            }
        };
        let class_refs: Vec<&str> = owned_classes.iter().map(|s| s.as_str()).collect();
        let mut block = Array2::from_elem((n, class_refs.len()), f64::NAN);
        for (r, label) in labels.iter().enumerate() {
            if is_missing(label) {
                continue;
            }
            let one = one_hot(std::slice::from_ref(label), &class_refs)?;
            block.row_mut(r).assign(&one.row(0));
        }
        let mut grown = Array2::zeros((n, values.ncols() + block.ncols()));
        grown
            .slice_mut(ndarray::s![.., ..values.ncols()])
            .assign(&values);
        grown
            .slice_mut(ndarray::s![.., values.ncols()..])
            .assign(&block);
        values = grown;
        for class in &owned_classes {
            names.push(format!("{name}_{class}"));
        }
    }
    EnvTable::new(ids, names, values)
}

fn is_missing(field: &str) -> bool {
    field.is_empty() || field.eq_ignore_ascii_case("na") || field.eq_ignore_ascii_case("nan")
}

fn parse_cell(field: &str, column: &str, path: &Path) -> Result<f64> {
    if is_missing(field) {
        return Ok(f64::NAN);
    }
    field.parse::<f64>().map_err(|_| {
        Error::Validation(format!(
            "{}: column {column}: cannot parse \"{field}\" as a number",
            path.display()
        ))
    })
}

/// Row-drop accounting from [`assemble`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct AssembleReport {
    pub rows_in: usize,
    pub rows_kept: usize,
    pub rows_dropped: usize,
    /// Rows dropped per feature set that contained the missing value.
    pub dropped_by_set: BTreeMap<String, usize>,
}

/// Concatenate the selected feature sets in fixed order (satellite, climate,
/// soil, topography, landcover, geo), aligning every table to `ids`. A
/// sample id absent from a selected table is an alignment error; a missing
/// (NaN) value drops the row with per-set accounting.
pub fn assemble(
    ids: &[String],
    tables: &BTreeMap<FeatureSet, EnvTable>,
    selection: &BTreeSet<FeatureSet>,
) -> Result<(FeatureMatrix, AssembleReport)> {
    if selection.is_empty() {
        return Err(Error::Validation("empty feature-set selection".into()));
    }
    for set in selection {
        if !tables.contains_key(set) {
            return Err(Error::Validation(format!(
                "no table supplied for selected feature set \"{set}\""
            )));
        }
    }
    // Per-table id -> row index.
    let mut lookups: BTreeMap<FeatureSet, HashMap<&str, usize>> = BTreeMap::new();
    for (&set, table) in tables {
        if !selection.contains(&set) {
            continue;
        }
        let mut map = HashMap::with_capacity(table.ids.len());
        for (i, id) in table.ids.iter().enumerate() {
            if map.insert(id.as_str(), i).is_some() {
                return Err(Error::Alignment(format!(
                    "duplicate sample_id \"{id}\" in {set} table"
                )));
            }
        }
        lookups.insert(set, map);
    }

    let ordered_sets: Vec<FeatureSet> = FeatureSet::ORDER
        .iter()
        .copied()
        .filter(|s| selection.contains(s))
        .collect();
    let mut names = Vec::new();
    let mut sets = Vec::new();
    for &set in &ordered_sets {
        let table = &tables[&set];
        for n in &table.names {
            names.push(n.clone());
            sets.push(set);
        }
    }
    let width = names.len();

    let mut report = AssembleReport {
        rows_in: ids.len(),
        ..AssembleReport::default()
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut kept_ids = Vec::new();
    'rows: for id in ids {
        let mut row = Vec::with_capacity(width);
        for &set in &ordered_sets {
            let table = &tables[&set];
            let idx = lookups[&set].get(id.as_str()).copied().ok_or_else(|| {
                Error::Alignment(format!("sample_id \"{id}\" missing from {set} table"))
            })?;
            let slice = table.values.row(idx);
            if slice.iter().any(|v| !v.is_finite()) {
                *report
                    .dropped_by_set
                    .entry(set.name().to_string())
                    .or_insert(0) += 1;
                report.rows_dropped += 1;
                continue 'rows;
            }
            row.extend(slice.iter().copied());
        }
        rows.extend_from_slice(&row);
        kept_ids.push(id.clone());
    }
    report.rows_kept = kept_ids.len();
    let values = Array2::from_shape_vec((kept_ids.len(), width), rows)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let matrix = FeatureMatrix {
        values,
        column_names: names,
        column_sets: sets,
        row_ids: kept_ids,
    };
    matrix.validate()?;
    Ok((matrix, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_zero_tensor() {
        let t = Array3::zeros((3, 3, 128));
        let v = flatten_embeddings(&t).unwrap();
        assert_eq!(v.len(), 1152);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flatten_single_one_lands_at_documented_index() {
        let mut t = Array3::zeros((3, 3, 128));
        t[[1, 2, 5]] = 1.0;
        let v = flatten_embeddings(&t).unwrap();
        assert_eq!(v[1 * 3 * 128 + 2 * 128 + 5], 1.0);
        assert_eq!(v[645], 1.0);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn flatten_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Array3::from_shape_fn((3, 3, 128), |_| rng.random::<f64>());
        let v = flatten_embeddings(&t).unwrap();
        let back = Array3::from_shape_vec((3, 3, 128), v.to_vec()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn flatten_rejects_wrong_shape() {
        assert!(flatten_embeddings(&Array3::zeros((3, 3, 64))).is_err());
        let batch = Array4::<f64>::zeros((2, 3, 3, 64));
        assert!(flatten_embedding_batch(&batch.view()).is_err());
    }

    #[test]
    fn pca_line_degenerate_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let mut x = Array2::zeros((n, 2));
        for i in 0..n {
            let t: f64 = rng.random_range(-2.0..2.0);
            x[[i, 0]] = t;
            x[[i, 1]] = t;
        }
        let model = fit_pca(&x, 1).unwrap();
        let c = model.components.column(0);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] - inv_sqrt2).abs() < 1e-9, "c0 = {}", c[0]);
        assert!((c[1] - inv_sqrt2).abs() < 1e-9);
        // Second axis carries no variance.
        let full = fit_pca(&x, 2).unwrap();
        assert!(full.explained_variance[1].abs() < 1e-12);
    }

    #[test]
    fn pca_variance_matches_sample_covariance_oracle() {
        // Axis-aligned anisotropic cloud, sd 3 vs 1. The principal variances
        // must match the naively computed sample variances of the two axes.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 4000;
        let mut x = Array2::zeros((n, 2));
        let normal = |rng: &mut ChaCha8Rng| -> f64 {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        for i in 0..n {
            x[[i, 0]] = 3.0 * normal(&mut rng);
            x[[i, 1]] = normal(&mut rng);
        }
        let model = fit_pca(&x, 2).unwrap();
        // Naive-loop sample variances as the oracle.
        let mut means = [0.0f64; 2];
        for i in 0..n {
            means[0] += x[[i, 0]];
            means[1] += x[[i, 1]];
        }
        means[0] /= n as f64;
        means[1] /= n as f64;
        let mut vars = [0.0f64; 2];
        for i in 0..n {
            vars[0] += (x[[i, 0]] - means[0]).powi(2);
            vars[1] += (x[[i, 1]] - means[1]).powi(2);
        }
        vars[0] /= (n - 1) as f64;
        vars[1] /= (n - 1) as f64;
        let ratio = model.explained_variance[0] / model.explained_variance[1];
        let oracle_ratio = vars[0] / vars[1];
        assert!(
            (ratio - oracle_ratio).abs() / oracle_ratio < 0.05,
            "ratio {ratio}, oracle {oracle_ratio}"
        );
        assert!((ratio - 9.0).abs() < 2.0, "ratio {ratio} too far from 9");
    }

    #[test]
    fn pca_full_rank_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Array2::from_shape_fn((40, 5), |_| rng.random_range(-1.0..1.0));
        let model = fit_pca(&x, 5).unwrap();
        let y = transform_pca(&model, &x).unwrap();
        let back = inverse_transform_pca(&model, &y);
        let err = (&back - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "max reconstruction error {err}");
    }

    #[test]
    fn pca_rejects_oversized_k() {
        let x = Array2::zeros((10, 4));
        assert!(fit_pca(&x, 5).is_err());
        let x = Array2::zeros((3, 10));
        assert!(fit_pca(&x, 3).is_err()); // k > n-1
        let (model, k_eff) = fit_pca_clamped(
            &Array2::from_shape_fn((3, 10), |(i, j)| (i * 7 + j) as f64),
            256,
        )
        .unwrap();
        assert_eq!(k_eff, 2);
        assert_eq!(model.components.ncols(), 2);
    }

    #[test]
    fn pca_components_orthonormal_and_trace_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Array2::from_shape_fn((60, 8), |_| rng.random_range(-2.0..2.0));
        let model = fit_pca(&x, 8).unwrap();
        let gram = model.components.t().dot(&model.components);
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-8);
            }
        }
        // Total variance preserved at K = F.
        let mean = x.sum_axis(ndarray::Axis(0)) / 60.0;
        let mut trace = 0.0;
        for j in 0..8 {
            trace += x
                .column(j)
                .iter()
                .map(|v| (v - mean[j]) * (v - mean[j]))
                .sum::<f64>()
                / 59.0;
        }
        let ev_sum: f64 = model.explained_variance.sum();
        assert!((trace - ev_sum).abs() < 1e-8);
        // Non-increasing variances.
        for w in model.explained_variance.as_slice().unwrap().windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn horn_flat_dem() {
        let dem = Array2::from_elem((5, 5), 42.0);
        let (slope, aspect) = horn_slope_aspect(&dem, 10.0).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(slope[[i, j]], 0.0);
                assert_eq!(aspect[[i, j]], FLAT_ASPECT);
            }
        }
        assert!(slope[[0, 0]].is_nan());
    }

    #[test]
    fn horn_east_rising_plane() {
        // z = 0.1 * x_east with 10 m cells: slope atan(0.1) ~ 5.71 deg,
        // downslope faces west (270).
        let cellsize = 10.0;
        let dem = Array2::from_shape_fn((5, 6), |(_, j)| 0.1 * (j as f64 * cellsize));
        let (slope, aspect) = horn_slope_aspect(&dem, cellsize).unwrap();
        let expected = 0.1f64.atan().to_degrees();
        for i in 1..4 {
            for j in 1..5 {
                assert!((slope[[i, j]] - expected).abs() < 1e-9);
                assert!((aspect[[i, j]] - 270.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn horn_north_rising_plane() {
        // Row 0 is north; elevation rising northward drains south (180).
        let cellsize = 10.0;
        let h = 6;
        let dem = Array2::from_shape_fn((h, 5), |(i, _)| 0.1 * ((h - 1 - i) as f64 * cellsize));
        let (slope, aspect) = horn_slope_aspect(&dem, cellsize).unwrap();
        let expected = 0.1f64.atan().to_degrees();
        for i in 1..h - 1 {
            for j in 1..4 {
                assert!((slope[[i, j]] - expected).abs() < 1e-9);
                assert!((aspect[[i, j]] - 180.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_hot_worldcover_single_label() {
        let labels = vec!["tree_cover".to_string()];
        let m = one_hot(&labels, &WORLDCOVER_CLASSES).unwrap();
        assert_eq!(m.dim(), (1, 11));
        assert_eq!(m.row(0).sum(), 1.0);
        assert_eq!(m[[0, 0]], 1.0);
    }

    #[test]
    fn one_hot_empty_input() {
        let m = one_hot(&[], &WORLDCOVER_CLASSES).unwrap();
        assert_eq!(m.dim(), (0, 11));
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let labels: Vec<String> = ["grassland", "cropland", "mangroves", "grassland"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let m = one_hot(&labels, &WORLDCOVER_CLASSES).unwrap();
        for (row, label) in m.outer_iter().zip(&labels) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(WORLDCOVER_CLASSES[argmax], label.as_str());
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn one_hot_unknown_label_named_in_error() {
        let labels = vec!["volcano".to_string()];
        match one_hot(&labels, &WORLDCOVER_CLASSES) {
            Err(Error::Validation(msg)) => assert!(msg.contains("volcano")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    fn table(ids: &[&str], names: &[&str], rows: &[&[f64]]) -> EnvTable {
        let values = Array2::from_shape_vec(
            (rows.len(), names.len()),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap();
        EnvTable::new(
            ids.iter().map(|s| s.to_string()).collect(),
            names.iter().map(|s| s.to_string()).collect(),
            values,
        )
        .unwrap()
    }

    #[test]
    fn assemble_single_set() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let mut tables = BTreeMap::new();
        tables.insert(
            FeatureSet::Satellite,
            table(&["a", "b"], &["pc_1", "pc_2"], &[&[1.0, 2.0], &[3.0, 4.0]]),
        );
        let selection: BTreeSet<_> = [FeatureSet::Satellite].into_iter().collect();
        let (fm, report) = assemble(&ids, &tables, &selection).unwrap();
        assert_eq!(fm.n_cols(), 2);
        assert!(fm.column_sets.iter().all(|&s| s == FeatureSet::Satellite));
        assert_eq!(report.rows_kept, 2);
    }

    #[test]
    fn assemble_concatenates_all_sets_in_order() {
        let ids: Vec<String> = vec!["a".into()];
        let mut tables = BTreeMap::new();
        tables.insert(FeatureSet::Climate, table(&["a"], &["bio1"], &[&[1.0]]));
        tables.insert(FeatureSet::Satellite, table(&["a"], &["pc_1"], &[&[2.0]]));
        tables.insert(
            FeatureSet::Geo,
            table(&["a"], &["lat", "lon"], &[&[3.0, 4.0]]),
        );
        let selection: BTreeSet<_> = [FeatureSet::Satellite, FeatureSet::Climate, FeatureSet::Geo]
            .into_iter()
            .collect();
        let (fm, _) = assemble(&ids, &tables, &selection).unwrap();
        assert_eq!(fm.column_names, vec!["pc_1", "bio1", "lat", "lon"]);
        assert_eq!(
            fm.column_sets,
            vec![
                FeatureSet::Satellite,
                FeatureSet::Climate,
                FeatureSet::Geo,
                FeatureSet::Geo
            ]
        );
        assert_eq!(fm.values.row(0).to_vec(), vec![2.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn assemble_drops_rows_with_missing_values() {
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let mut tables = BTreeMap::new();
        tables.insert(
            FeatureSet::Soil,
            table(&["a", "b", "c"], &["ph"], &[&[6.5], &[f64::NAN], &[7.1]]),
        );
        let selection: BTreeSet<_> = [FeatureSet::Soil].into_iter().collect();
        let (fm, report) = assemble(&ids, &tables, &selection).unwrap();
        assert_eq!(fm.row_ids, vec!["a".to_string(), "c".to_string()]);
        assert_eq!(report.rows_dropped, 1);
        assert_eq!(report.dropped_by_set["soil"], 1);
    }

    #[test]
    fn assemble_rejects_misaligned_ids() {
        let ids: Vec<String> = vec!["a".into(), "zz".into()];
        let mut tables = BTreeMap::new();
        tables.insert(
            FeatureSet::Geo,
            table(&["a", "b"], &["lat"], &[&[0.0], &[1.0]]),
        );
        let selection: BTreeSet<_> = [FeatureSet::Geo].into_iter().collect();
        match assemble(&ids, &tables, &selection) {
            Err(Error::Alignment(msg)) => assert!(msg.contains("zz")),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn assemble_is_order_independent_given_ids() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let selection: BTreeSet<_> = [FeatureSet::Climate].into_iter().collect();
        let mut tables1 = BTreeMap::new();
        tables1.insert(
            FeatureSet::Climate,
            table(&["a", "b"], &["bio1"], &[&[1.0], &[2.0]]),
        );
        let mut tables2 = BTreeMap::new();
        tables2.insert(
            FeatureSet::Climate,
            table(&["b", "a"], &["bio1"], &[&[2.0], &[1.0]]),
        );
        let (m1, _) = assemble(&ids, &tables1, &selection).unwrap();
        let (m2, _) = assemble(&ids, &tables2, &selection).unwrap();
        assert_eq!(m1.values, m2.values);
        assert_eq!(m1.row_ids, m2.row_ids);
    }

    #[test]
    fn read_env_csv_with_categorical_block() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("landcover.csv");
        std::fs::write(
            &path,
            "sample_id,landcover\ns1,tree_cover\ns2,grassland\ns3,NA\n",
        )
        .unwrap();
        let t = read_env_csv(&path, &[("landcover", Some(&WORLDCOVER_CLASSES))]).unwrap();
        assert_eq!(t.ids, vec!["s1", "s2", "s3"]);
        assert_eq!(t.names.len(), 11);
        assert_eq!(t.values[[0, 0]], 1.0);
        assert_eq!(t.values[[1, 2]], 1.0);
        assert!(t.values[[2, 0]].is_nan());
    }

    proptest! {
        // one_hot rows always sum to exactly 1 for known labels.
        #[test]
        fn prop_one_hot_rows_sum_to_one(idx in proptest::collection::vec(0usize..11, 0..30)) {
            let labels: Vec<String> =
                idx.iter().map(|&i| WORLDCOVER_CLASSES[i].to_string()).collect();
            let m = one_hot(&labels, &WORLDCOVER_CLASSES).unwrap();
            for row in m.outer_iter() {
                prop_assert_eq!(row.sum(), 1.0);
            }
        }
    }
}
