//! Geometric multipath channels on uniform planar arrays.
//!
//! Element ordering is vertical-major everywhere: element `(p, q)` with
//! horizontal index `p` and vertical index `q` sits at flat index
//! `q * n_horizontal + p`. The DFT dictionaries are built with the matching
//! Kronecker order (`F_vertical ⊗ F_horizontal`), so a steering vector whose
//! spatial frequencies fall on the DFT grid maps to a single angular bin.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::check_dims;
use crate::{CMat, CVec, Error, Result};

/// Uniform planar array with `n_horizontal × n_vertical` elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_horizontal: usize,
    pub n_vertical: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl ArrayGeometry {
    pub fn new(n_horizontal: usize, n_vertical: usize) -> Self {
        Self {
            n_horizontal,
            n_vertical,
            spacing: 0.5,
        }
    }

    /// 8×8 transmit array.
    pub fn default_tx() -> Self {
        Self::new(8, 8)
    }

    /// 4×4 receive array.
    pub fn default_rx() -> Self {
        Self::new(4, 4)
    }

    pub fn size(&self) -> usize {
        self.n_horizontal * self.n_vertical
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_horizontal == 0 || self.n_vertical == 0 {
            return Err(Error::InvalidConfig(
                "array dimensions must be positive".into(),
            ));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "element spacing must be positive, got {}",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// Parameters of one propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    /// Linear path power.
    pub power: f64,
    /// Phase in radians.
    pub phase: f64,
    pub aoa_azimuth: f64,
    pub aoa_elevation: f64,
    pub aod_azimuth: f64,
    pub aod_elevation: f64,
}

impl PathParams {
    /// Complex path gain `sqrt(power) * exp(j * phase)`.
    pub fn gain(&self) -> Complex64 {
        Complex64::from_polar(self.power.sqrt(), self.phase)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(format!("power must be finite and >= 0, got {}", self.power));
        }
        let angles = [
            self.phase,
            self.aoa_azimuth,
            self.aoa_elevation,
            self.aod_azimuth,
            self.aod_elevation,
        ];
        if angles.iter().any(|a| !a.is_finite()) {
            return Err("angles must be finite".into());
        }
        Ok(())
    }
}

/// Ground-truth channel in both domains together with its path metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// `N_r × N_t` spatial channel `H`.
    pub spatial: CMat,
    /// `N_r × N_t` angular channel `H_a = F_r^H H F_t`.
    pub angular: CMat,
    pub paths: Vec<PathParams>,
    pub sample_id: String,
}

impl ChannelSample {
    /// Column-major vectorized angular channel.
    pub fn angular_vec(&self) -> CVec {
        crate::vec_col_major(&self.angular)
    }
}

/// Unitary 2-D DFT dictionary for a UPA.
#[derive(Debug, Clone, PartialEq)]
pub struct DftDictionary {
    pub matrix: CMat,
}

/// Array response of a UPA toward (`azimuth`, `elevation`), unit norm.
pub fn steering_vector(geom: &ArrayGeometry, azimuth: f64, elevation: f64) -> CVec {
    let n = geom.size();
    let norm = 1.0 / (n as f64).sqrt();
    let u = azimuth.sin() * elevation.cos();
    let v = elevation.sin();
    CVec::from_fn(n, |idx, _| {
        let p = (idx % geom.n_horizontal) as f64;
        let q = (idx / geom.n_horizontal) as f64;
        Complex64::from_polar(norm, 2.0 * PI * geom.spacing * (p * u + q * v))
    })
}

/// Narrowband geometric channel
/// `H = sqrt(N_t N_r / L) Σ_l α_l a_r(φ_l^r, θ_l^r) a_t^H(φ_l^t, θ_l^t)`.
pub fn synthesize_channel(
    geom_t: &ArrayGeometry,
    geom_r: &ArrayGeometry,
    paths: &[PathParams],
) -> Result<ChannelSample> {
    if paths.is_empty() {
        return Err(Error::EmptyPathList);
    }
    geom_t.validate()?;
    geom_r.validate()?;
    let (n_t, n_r) = (geom_t.size(), geom_r.size());
    let mut spatial = CMat::zeros(n_r, n_t);
    for path in paths {
        let a_r = steering_vector(geom_r, path.aoa_azimuth, path.aoa_elevation);
        let a_t = steering_vector(geom_t, path.aod_azimuth, path.aod_elevation);
        spatial += (a_r * a_t.adjoint()) * path.gain();
    }
    spatial *= Complex64::from(((n_t * n_r) as f64 / paths.len() as f64).sqrt());
    let f_t = build_dictionary(geom_t)?;
    let f_r = build_dictionary(geom_r)?;
    let angular = to_angular(&spatial, &f_r, &f_t)?;
    Ok(ChannelSample {
        spatial,
        angular,
        paths: paths.to_vec(),
        sample_id: String::new(),
    })
}

fn unitary_dft(n: usize) -> CMat {
    let scale = 1.0 / (n as f64).sqrt();
    CMat::from_fn(n, n, |k, m| {
        // Reduce the exponent before converting to keep the phase exact.
        let e = (k * m) % n;
        Complex64::from_polar(scale, -2.0 * PI * e as f64 / n as f64)
    })
}

/// `F_vertical ⊗ F_horizontal` with unitary 1-D DFT factors.
pub fn build_dictionary(geom: &ArrayGeometry) -> Result<DftDictionary> {
    geom.validate()?;
    let f_h = unitary_dft(geom.n_horizontal);
    let f_v = unitary_dft(geom.n_vertical);
    Ok(DftDictionary {
        matrix: f_v.kronecker(&f_h),
    })
}

/// `F_r^H H F_t`.
pub fn to_angular(h: &CMat, f_r: &DftDictionary, f_t: &DftDictionary) -> Result<CMat> {
    check_dims("to_angular rows", f_r.matrix.nrows(), h.nrows())?;
    check_dims("to_angular cols", f_t.matrix.nrows(), h.ncols())?;
    Ok(f_r.matrix.adjoint() * h * &f_t.matrix)
}

/// `F_r H_a F_t^H`, the inverse of [`to_angular`].
pub fn to_spatial(h_a: &CMat, f_r: &DftDictionary, f_t: &DftDictionary) -> Result<CMat> {
    check_dims("to_spatial rows", f_r.matrix.nrows(), h_a.nrows())?;
    check_dims("to_spatial cols", f_t.matrix.nrows(), h_a.ncols())?;
    Ok(&f_r.matrix * h_a * f_t.matrix.adjoint())
}

const PATH_COLUMNS: [&str; 7] = [
    "sample_id", "power", "phase", "aoa_az", "aoa_el", "aod_az", "aod_el",
];

/// Reads a CSV path-parameter file (`sample_id,power,phase,aoa_az,aoa_el,aod_az,aod_el`).
///
/// Rows are grouped by `sample_id` in order of first appearance; path order
/// within a group follows the file.
pub fn load_path_file(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<PathParams>)>> {
    let file = File::open(path)?;
    read_path_csv(BufReader::new(file))
}

pub fn read_path_csv<R: Read>(reader: R) -> Result<Vec<(String, Vec<PathParams>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 7];
    for (slot, name) in col.iter_mut().zip(PATH_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut groups: Vec<(String, Vec<PathParams>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64> {
            let raw = record.get(col[i]).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field `{}`", PATH_COLUMNS[i]),
            })?;
            raw.parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("field `{}` = {raw:?}: {e}", PATH_COLUMNS[i]),
            })
        };
        let params = PathParams {
            power: field(1)?,
            phase: field(2)?,
            aoa_azimuth: field(3)?,
            aoa_elevation: field(4)?,
            aod_azimuth: field(5)?,
            aod_elevation: field(6)?,
        };
        params
            .validate()
            .map_err(|message| Error::Parse { line, message })?;
        let id = record.get(col[0]).unwrap_or_default().to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            groups.push((id, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(params);
    }
    Ok(groups)
}

/// Synthetic stand-in for ray-traced path parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSamplerConfig {
    /// Inclusive range of the number of paths.
    pub l_min: usize,
    pub l_max: usize,
    /// Ratio between consecutive path powers before normalization.
    pub power_decay: f64,
}

impl Default for PathSamplerConfig {
    fn default() -> Self {
        Self {
            l_min: 1,
            l_max: 5,
            power_decay: 0.3,
        }
    }
}

/// Draws a path list: `L` uniform in the configured range, uniform angles,
/// geometrically decaying powers normalized to unit sum, uniform phases.
pub fn sample_synthetic_paths<R: Rng + ?Sized>(
    rng: &mut R,
    config: &PathSamplerConfig,
) -> Result<Vec<PathParams>> {
    if config.l_min < 1 || config.l_max > 64 || config.l_min > config.l_max {
        return Err(Error::InvalidRange(format!(
            "path count range [{}, {}] must lie within [1, 64]",
            config.l_min, config.l_max
        )));
    }
    if !(config.power_decay > 0.0 && config.power_decay.is_finite()) {
        return Err(Error::InvalidRange(format!(
            "power decay must be positive, got {}",
            config.power_decay
        )));
    }
    let count = rng.random_range(config.l_min..=config.l_max);
    let raw: Vec<f64> = (0..count).map(|l| config.power_decay.powi(l as i32)).collect();
    let total: f64 = raw.iter().sum();
    let paths = raw
        .iter()
        .map(|&p| PathParams {
            power: p / total,
            phase: rng.random_range(0.0..2.0 * PI),
            aoa_azimuth: rng.random_range(-PI / 2.0..=PI / 2.0),
            aoa_elevation: rng.random_range(-PI / 4.0..=PI / 4.0),
            aod_azimuth: rng.random_range(-PI / 2.0..=PI / 2.0),
            aod_elevation: rng.random_range(-PI / 4.0..=PI / 4.0),
        })
        .collect();
    Ok(paths)
}

/// A collection of channels sharing one pair of array geometries.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub geom_t: ArrayGeometry,
    pub geom_r: ArrayGeometry,
    pub samples: Vec<ChannelSample>,
}

const DATASET_MAGIC: &[u8; 8] = b"PNPCMCH\0";
const DATASET_VERSION: u32 = 1;

impl ChannelDataset {
    /// Synthesizes `count` channels from the path sampler.
    pub fn synthetic<R: Rng + ?Sized>(
        rng: &mut R,
        geom_t: ArrayGeometry,
        geom_r: ArrayGeometry,
        sampler: &PathSamplerConfig,
        count: usize,
        id_prefix: &str,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let paths = sample_synthetic_paths(rng, sampler)?;
            let mut sample = synthesize_channel(&geom_t, &geom_r, &paths)?;
            sample.sample_id = format!("{id_prefix}{i:06}");
            samples.push(sample);
        }
        Ok(Self {
            geom_t,
            geom_r,
            samples,
        })
    }

    /// Builds channels from grouped path parameters (e.g. a CSV path file).
    pub fn from_path_groups(
        geom_t: ArrayGeometry,
        geom_r: ArrayGeometry,
        groups: &[(String, Vec<PathParams>)],
    ) -> Result<Self> {
        let samples = groups
            .iter()
            .map(|(id, paths)| {
                let mut s = synthesize_channel(&geom_t, &geom_r, paths)?;
                s.sample_id = id.clone();
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geom_t,
            geom_r,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes the binary container described in the README
    /// (little-endian, interleaved re/im float64, column-major matrices).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for g in [&self.geom_t, &self.geom_r] {
            w.write_all(&(g.n_horizontal as u32).to_le_bytes())?;
            w.write_all(&(g.n_vertical as u32).to_le_bytes())?;
            w.write_all(&g.spacing.to_le_bytes())?;
        }
        let (n_r, n_t) = (self.geom_r.size() as u32, self.geom_t.size() as u32);
        w.write_all(&n_r.to_le_bytes())?;
        w.write_all(&n_t.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            let id = s.sample_id.as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&(s.paths.len() as u32).to_le_bytes())?;
            for p in &s.paths {
                for v in [
                    p.power,
                    p.phase,
                    p.aoa_azimuth,
                    p.aoa_elevation,
                    p.aod_azimuth,
                    p.aod_elevation,
                ] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            for m in [&s.spatial, &s.angular] {
                for c in m.iter() {
                    w.write_all(&c.re.to_le_bytes())?;
                    w.write_all(&c.im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::CorruptDataset("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::CorruptDataset(format!(
                "unsupported dataset version {version}"
            )));
        }
        let mut geoms = [ArrayGeometry::new(1, 1); 2];
        for g in geoms.iter_mut() {
            g.n_horizontal = read_u32(r)? as usize;
            g.n_vertical = read_u32(r)? as usize;
            g.spacing = read_f64(r)?;
            g.validate()
                .map_err(|e| Error::CorruptDataset(e.to_string()))?;
        }
        let [geom_t, geom_r] = geoms;
        let n_r = read_u32(r)? as usize;
        let n_t = read_u32(r)? as usize;
        if n_r != geom_r.size() || n_t != geom_t.size() {
            return Err(Error::CorruptDataset(format!(
                "shape {{n_r: {n_r}, n_t: {n_t}}} disagrees with array geometry"
            )));
        }
        let count = read_u64(r)? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id_len = read_u32(r)? as usize;
            let mut id = vec![0u8; id_len];
            read_exact(r, &mut id)?;
            let sample_id = String::from_utf8(id)
                .map_err(|_| Error::CorruptDataset("sample id is not UTF-8".into()))?;
            let n_paths = read_u32(r)? as usize;
            let mut paths = Vec::with_capacity(n_paths.min(64));
            for _ in 0..n_paths {
                paths.push(PathParams {
                    power: read_f64(r)?,
                    phase: read_f64(r)?,
                    aoa_azimuth: read_f64(r)?,
                    aoa_elevation: read_f64(r)?,
                    aod_azimuth: read_f64(r)?,
                    aod_elevation: read_f64(r)?,
                });
            }
            let spatial = read_cmat(r, n_r, n_t)?;
            let angular = read_cmat(r, n_r, n_t)?;
            samples.push(ChannelSample {
                spatial,
                angular,
                paths,
                sample_id,
            });
        }
        Ok(Self {
            geom_t,
            geom_r,
            samples,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptDataset("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_cmat<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<CMat> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        data.push(Complex64::new(re, im));
    }
    Ok(CMat::from_vec(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn max_abs(m: &CMat) -> f64 {
        m.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn random_cmat(rng: &mut impl Rng, rows: usize, cols: usize) -> CMat {
        CMat::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn broadside_steering_is_flat() {
        let a = steering_vector(&ArrayGeometry::new(2, 2), 0.0, 0.0);
        for c in a.iter() {
            assert_abs_diff_eq!(c.re, 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(c.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn steering_has_unit_norm() {
        let mut rng = seeded(3);
        for _ in 0..50 {
            let g = ArrayGeometry::new(rng.random_range(1..9), rng.random_range(1..9));
            let a = steering_vector(&g, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            assert_abs_diff_eq!(a.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn steering_matches_phase_table() {
        // 4x4 UPA, az = pi/6, el = 0: phase(p, q) = pi * p * sin(pi/6) = p * pi / 2.
        let a = steering_vector(&ArrayGeometry::new(4, 4), PI / 6.0, 0.0);
        let quarter_turns = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
        ];
        for q in 0..4 {
            for p in 0..4 {
                let expected = quarter_turns[p] * 0.25;
                let got = a[q * 4 + p];
                assert_abs_diff_eq!(got.re, expected.re, epsilon = 1e-12);
                assert_abs_diff_eq!(got.im, expected.im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_broadside_path_gives_all_ones() {
        let g = ArrayGeometry::new(2, 2);
        let path = PathParams {
            power: 1.0,
            phase: 0.0,
            aoa_azimuth: 0.0,
            aoa_elevation: 0.0,
            aod_azimuth: 0.0,
            aod_elevation: 0.0,
        };
        let s = synthesize_channel(&g, &g, &[path]).unwrap();
        for c in s.spatial.iter() {
            assert_abs_diff_eq!(c.re, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_power_paths_give_zero_channel() {
        let mut rng = seeded(5);
        let mut paths = sample_synthetic_paths(&mut rng, &PathSamplerConfig::default()).unwrap();
        for p in &mut paths {
            p.power = 0.0;
        }
        let s = synthesize_channel(&ArrayGeometry::default_tx(), &ArrayGeometry::default_rx(), &paths)
            .unwrap();
        assert_eq!(max_abs(&s.spatial), 0.0);
        assert_eq!(max_abs(&s.angular), 0.0);
    }

    #[test]
    fn empty_paths_rejected() {
        let g = ArrayGeometry::new(2, 2);
        assert!(matches!(
            synthesize_channel(&g, &g, &[]),
            Err(Error::EmptyPathList)
        ));
    }

    #[test]
    fn dictionary_trivial_and_small_cases() {
        let d1 = build_dictionary(&ArrayGeometry::new(1, 1)).unwrap();
        assert_eq!(d1.matrix, CMat::from_element(1, 1, Complex64::new(1.0, 0.0)));

        // (1/2) [[1,1],[1,-1]] ⊗ [[1,1],[1,-1]] written out.
        let d2 = build_dictionary(&ArrayGeometry::new(2, 2)).unwrap();
        let h2 = [[1.0, 1.0], [1.0, -1.0]];
        for r in 0..4 {
            for c in 0..4 {
                let expected = 0.5 * h2[r / 2][c / 2] * h2[r % 2][c % 2];
                assert_abs_diff_eq!(d2.matrix[(r, c)].re, expected, epsilon = 1e-15);
                assert_abs_diff_eq!(d2.matrix[(r, c)].im, 0.0, epsilon = 1e-15);
            }
        }
        // Explicit F^H F.
        let mut gram = [[Complex64::new(0.0, 0.0); 4]; 4];
        for (i, row) in gram.iter_mut().enumerate() {
            for (j, g) in row.iter_mut().enumerate() {
                for k in 0..4 {
                    *g += d2.matrix[(k, i)].conj() * d2.matrix[(k, j)];
                }
            }
        }
        for (i, row) in gram.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g.re, e, epsilon = 1e-12);
                assert_abs_diff_eq!(g.im, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dictionaries_are_unitary() {
        for (h, v) in [(4, 4), (8, 8), (3, 5), (7, 2)] {
            let f = build_dictionary(&ArrayGeometry::new(h, v)).unwrap().matrix;
            let n = f.nrows();
            let err = &(f.adjoint() * &f) - CMat::identity(n, n);
            assert!(max_abs(&err) < 1e-10, "{h}x{v}: {}", max_abs(&err));
        }
    }

    #[test]
    fn on_grid_path_hits_one_angular_bin() {
        // Spatial frequency 1/4 per element with d = 1/2 means sin(az) = 1/2.
        let g = ArrayGeometry::new(4, 4);
        let a = steering_vector(&g, (0.5f64).asin(), 0.0);
        let f = build_dictionary(&g).unwrap();
        let beam = f.matrix.adjoint() * a;
        let strong: Vec<_> = beam.iter().filter(|c| c.norm() > 1e-9).collect();
        assert_eq!(strong.len(), 1);
        assert_abs_diff_eq!(strong[0].norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn angular_transform_trivial_cases() {
        let g = ArrayGeometry::new(2, 2);
        let f = build_dictionary(&g).unwrap();
        let zero = CMat::zeros(4, 4);
        assert_eq!(max_abs(&to_angular(&zero, &f, &f).unwrap()), 0.0);
        assert_eq!(max_abs(&to_spatial(&zero, &f, &f).unwrap()), 0.0);

        let eye = DftDictionary {
            matrix: CMat::identity(4, 4),
        };
        let mut rng = seeded(9);
        let h = random_cmat(&mut rng, 4, 4);
        assert!(max_abs(&(to_angular(&h, &eye, &eye).unwrap() - &h)) < 1e-15);
        assert!(max_abs(&(to_spatial(&h, &eye, &eye).unwrap() - &h)) < 1e-15);
    }

    #[test]
    fn angular_round_trip_and_norm() {
        let f_t = build_dictionary(&ArrayGeometry::default_tx()).unwrap();
        let f_r = build_dictionary(&ArrayGeometry::default_rx()).unwrap();
        let mut rng = seeded(11);
        for _ in 0..100 {
            let h = random_cmat(&mut rng, 16, 64);
            let ha = to_angular(&h, &f_r, &f_t).unwrap();
            assert!(((ha.norm() - h.norm()) / h.norm()).abs() < 1e-10);
            let back = to_spatial(&ha, &f_r, &f_t).unwrap();
            assert!(max_abs(&(back - &h)) < 1e-10);
            // Inverse direction as well.
            let hs = to_spatial(&h, &f_r, &f_t).unwrap();
            assert!(max_abs(&(to_angular(&hs, &f_r, &f_t).unwrap() - &h)) < 1e-10);
        }
    }

    #[test]
    fn transform_rejects_bad_shapes() {
        let f4 = build_dictionary(&ArrayGeometry::new(2, 2)).unwrap();
        let f9 = build_dictionary(&ArrayGeometry::new(3, 3)).unwrap();
        let h = CMat::zeros(4, 4);
        assert!(matches!(
            to_angular(&h, &f4, &f9),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            to_spatial(&h, &f9, &f4),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sampler_contracts() {
        let mut rng = seeded(1);
        let one = PathSamplerConfig {
            l_min: 1,
            l_max: 1,
            power_decay: 0.5,
        };
        let paths = sample_synthetic_paths(&mut rng, &one).unwrap();
        assert_eq!(paths.len(), 1);
        assert_abs_diff_eq!(paths[0].power, 1.0, epsilon = 1e-15);

        let cfg = PathSamplerConfig {
            l_min: 1,
            l_max: 12,
            power_decay: 0.7,
        };
        for _ in 0..200 {
            let paths = sample_synthetic_paths(&mut rng, &cfg).unwrap();
            let total: f64 = paths.iter().map(|p| p.power).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            for p in &paths {
                assert!((-PI / 2.0..=PI / 2.0).contains(&p.aod_azimuth));
                assert!((-PI / 4.0..=PI / 4.0).contains(&p.aoa_elevation));
                assert!((0.0..2.0 * PI).contains(&p.phase));
            }
        }

        let a = sample_synthetic_paths(&mut seeded(42), &cfg).unwrap();
        let b = sample_synthetic_paths(&mut seeded(42), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_rejects_bad_ranges() {
        let mut rng = seeded(0);
        for (lo, hi) in [(0, 3), (4, 2), (1, 65)] {
            let cfg = PathSamplerConfig {
                l_min: lo,
                l_max: hi,
                power_decay: 0.5,
            };
            assert!(matches!(
                sample_synthetic_paths(&mut rng, &cfg),
                Err(Error::InvalidRange(_))
            ));
        }
    }

    #[test]
    fn csv_single_row() {
        let text = "sample_id,power,phase,aoa_az,aoa_el,aod_az,aod_el\ns0,1.0,0.5,0.1,0.2,0.3,0.4\n";
        let groups = read_path_csv(text.as_bytes()).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].0, "s0");
        assert_eq!(groups[0].1.len(), 1);
        assert_eq!(groups[0].1[0].aod_elevation, 0.4);
    }

    #[test]
    fn csv_interleaved_groups_keep_order() {
        let text = "sample_id,power,phase,aoa_az,aoa_el,aod_az,aod_el\n\
                    a,1,0,0,0,0,0\n\
                    b,0.5,0,0,0,0,0\n\
                    a,0.25,0,0,0,0,0\n\
                    b,0.125,0,0,0,0,0\n\
                    a,0.0625,0,0,0,0,0\n";
        let groups = read_path_csv(text.as_bytes()).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, "a");
        assert_eq!(groups[0].1.len(), 3);
        assert_eq!(groups[1].1.len(), 2);
        let powers: Vec<f64> = groups[0].1.iter().map(|p| p.power).collect();
        assert_eq!(powers, vec![1.0, 0.25, 0.0625]);
    }

    #[test]
    fn csv_reordered_columns_accepted() {
        let text = "aod_el,aod_az,aoa_el,aoa_az,phase,power,sample_id\n0.4,0.3,0.2,0.1,0.5,2.0,x\n";
        let groups = read_path_csv(text.as_bytes()).unwrap();
        assert_eq!(groups[0].1[0].power, 2.0);
        assert_eq!(groups[0].1[0].aod_elevation, 0.4);
    }

    #[test]
    fn csv_bad_angle_names_line() {
        let text = "sample_id,power,phase,aoa_az,aoa_el,aod_az,aod_el\n\
                    a,1,0,0,0,0,0\n\
                    a,1,0,zero,0,0,0\n";
        match read_path_csv(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("aoa_az"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_missing_column() {
        let text = "sample_id,power,phase,aoa_az,aoa_el,aod_az\na,1,0,0,0,0\n";
        assert!(matches!(
            read_path_csv(text.as_bytes()),
            Err(Error::MissingColumn(c)) if c == "aod_el"
        ));
    }

    #[test]
    fn dataset_round_trip_and_truncation() {
        let mut rng = seeded(21);
        let ds = ChannelDataset::synthetic(
            &mut rng,
            ArrayGeometry::new(4, 2),
            ArrayGeometry::new(2, 2),
            &PathSamplerConfig::default(),
            5,
            "t",
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = ChannelDataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            ChannelDataset::read_from(&mut &cut[..]),
            Err(Error::CorruptDataset(_))
        ));
    }
}
