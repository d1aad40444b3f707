//! Geometric evaluation: per-frame Kabsch-Umeyama similarity alignment
//! and the facial / mouth landmark distance metrics (F-LMD, M-LMD).
//!
//! Motion is turned into 2D landmarks by a seeded [`LandmarkBasis`]: a
//! fixed affine map sends the 64 facial parameters to landmark
//! displacements (lips parameters move only the 20 mouth points,
//! expression parameters only the other 48), and the pose parameters
//! apply an exact per-frame similarity transform on top. Because pose
//! enters as a similarity transform, the per-frame alignment inside the
//! metric removes head pose exactly, which is the point of the metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{read_clip, DatasetManifest};
use crate::motion::{MotionSequence, ParameterLayout, FACIAL_DIM, MOUTH_DIM, TOTAL_DIM};
use crate::numerics::Tensor;
use crate::pipeline::read_render_export;
use crate::{Error, Result};

pub const FULL_LANDMARKS: usize = 68;
pub const MOUTH_LANDMARKS: usize = 20;
/// The mouth occupies the last 20 of the 68 points, matching the common
/// 68-point annotation scheme.
pub const MOUTH_LANDMARK_START: usize = 48;

const ORTHOGONALITY_TOL: f64 = 1e-10;

/// `x -> scale * R * x + translation` with `R` a proper rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Tensor,
    translation: Vec<f64>,
}

fn det_small(m: &Tensor) -> Result<f64> {
    let (r, c) = m.dims2()?;
    match (r, c) {
        (2, 2) => Ok(m.at(0, 0) * m.at(1, 1) - m.at(0, 1) * m.at(1, 0)),
        (3, 3) => Ok(m.at(0, 0) * (m.at(1, 1) * m.at(2, 2) - m.at(1, 2) * m.at(2, 1))
            - m.at(0, 1) * (m.at(1, 0) * m.at(2, 2) - m.at(1, 2) * m.at(2, 0))
            + m.at(0, 2) * (m.at(1, 0) * m.at(2, 1) - m.at(1, 1) * m.at(2, 0))),
        _ => Err(Error::dimension("rotation matrix", "2x2 or 3x3", format!("{r}x{c}"))),
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Tensor, translation: Vec<f64>) -> Result<Self> {
        let (r, c) = rotation.dims2()?;
        if r != c || !(r == 2 || r == 3) {
            return Err(Error::dimension("rotation", "2x2 or 3x3", format!("{r}x{c}")));
        }
        if translation.len() != r {
            return Err(Error::dimension("translation", r, translation.len()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Degenerate(format!("similarity scale {scale}")));
        }
        for i in 0..r {
            for j in 0..r {
                let dot: f64 = (0..r).map(|k| rotation.at(k, i) * rotation.at(k, j)).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHOGONALITY_TOL {
                    return Err(Error::Degenerate(format!(
                        "rotation not orthogonal: R^T R[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = det_small(&rotation)?;
        if (det - 1.0).abs() > ORTHOGONALITY_TOL {
            return Err(Error::Degenerate(format!("rotation determinant {det}")));
        }
        Ok(SimilarityTransform {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut rot = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            rot.data_mut()[i * dim + i] = 1.0;
        }
        SimilarityTransform::new(1.0, rot, vec![0.0; dim])
    }

    pub fn from_angle_2d(scale: f64, theta: f64, tx: f64, ty: f64) -> Result<Self> {
        let (s, c) = theta.sin_cos();
        SimilarityTransform::new(
            scale,
            Tensor::new(vec![2, 2], vec![c, -s, s, c])?,
            vec![tx, ty],
        )
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Tensor {
        &self.rotation
    }

    pub fn translation(&self) -> &[f64] {
        &self.translation
    }

    /// Rotation angle of a 2D transform, in (-pi, pi].
    pub fn angle_2d(&self) -> Result<f64> {
        let (r, _) = self.rotation.dims2()?;
        if r != 2 {
            return Err(Error::dimension("angle_2d", 2, r));
        }
        Ok(self.rotation.at(1, 0).atan2(self.rotation.at(0, 0)))
    }

    /// Apply to points stored one per row.
    pub fn apply(&self, points: &Tensor) -> Result<Tensor> {
        let (l, d) = points.dims2()?;
        let (rd, _) = self.rotation.dims2()?;
        if d != rd {
            return Err(Error::dimension("transform apply", rd, d));
        }
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            let p = points.row(i);
            for r in 0..d {
                let mut acc = 0.0;
                for (c, &pc) in p.iter().enumerate() {
                    acc += self.rotation.at(r, c) * pc;
                }
                out[i * d + r] = self.scale * acc + self.translation[r];
            }
        }
        Tensor::new(vec![l, d], out)
    }
}

/// Sum of squared distances between the transformed source and the target.
pub fn alignment_residual(
    transform: &SimilarityTransform,
    source: &Tensor,
    target: &Tensor,
) -> Result<f64> {
    let mapped = transform.apply(source)?;
    if mapped.shape() != target.shape() {
        return Err(Error::dimension(
            "alignment residual",
            format!("{:?}", mapped.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    Ok(mapped
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Least-squares similarity transform from `source` onto `target`
/// (points one per row, 2D or 3D): the Umeyama solution with the
/// reflection-correcting sign matrix, so the returned rotation is always
/// proper.
pub fn kabsch_umeyama(source: &Tensor, target: &Tensor) -> Result<SimilarityTransform> {
    let (l, d) = source.dims2()?;
    let (lt, dt) = target.dims2()?;
    if l != lt || d != dt {
        return Err(Error::dimension(
            "kabsch_umeyama",
            format!("{l}x{d}"),
            format!("{lt}x{dt}"),
        ));
    }
    if !(d == 2 || d == 3) {
        return Err(Error::dimension("kabsch_umeyama points", "2D or 3D", d));
    }
    if l < 2 {
        return Err(Error::contract(format!("need at least 2 points, got {l}")));
    }
    let mut mu_p = vec![0.0; d];
    let mut mu_q = vec![0.0; d];
    for i in 0..l {
        for j in 0..d {
            mu_p[j] += source.at(i, j) / l as f64;
            mu_q[j] += target.at(i, j) / l as f64;
        }
    }
    let mut var_p = 0.0;
    let mut cov = vec![0.0; d * d];
    for i in 0..l {
        for j in 0..d {
            let x = source.at(i, j) - mu_p[j];
            var_p += x * x;
            for k in 0..d {
                // cov[k][j] accumulates target_k * source_j.
                cov[k * d + j] += (target.at(i, k) - mu_q[k]) * x;
            }
        }
    }
    if var_p <= 1e-24 {
        return Err(Error::Degenerate(
            "source points are coincident, alignment undefined".to_string(),
        ));
    }

    let cov_m = DMatrix::from_fn(d, d, |i, j| cov[i * d + j]);
    let svd = cov_m.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sign = if u.determinant() * v_t.determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let mut s_diag = vec![1.0; d];
    s_diag[d - 1] = sign;
    let mut rotation = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += u[(i, k)] * s_diag[k] * v_t[(k, j)];
            }
            rotation[i * d + j] = acc;
        }
    }
    let trace_ds: f64 = (0..d).map(|k| svd.singular_values[k] * s_diag[k]).sum();
    let scale = trace_ds / var_p;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Degenerate(format!(
            "alignment produced non-positive scale {scale}"
        )));
    }
    let rotation = Tensor::new(vec![d, d], rotation)?;
    let mut translation = vec![0.0; d];
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += rotation.at(i, j) * mu_p[j];
        }
        translation[i] = mu_q[i] - scale * acc;
    }
    SimilarityTransform::new(scale, rotation, translation)
}

/// 2D landmark tracks: one L x 2 tensor per frame, L either 68 (full
/// face) or 20 (mouth).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    frames: Vec<Tensor>,
    points: usize,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("landmark sequence with zero frames"))?;
        let (l, d) = first.dims2()?;
        if d != 2 {
            return Err(Error::dimension("landmark coords", 2, d));
        }
        if !(l == FULL_LANDMARKS || l == MOUTH_LANDMARKS) {
            return Err(Error::dimension(
                "landmark count",
                format!("{FULL_LANDMARKS} or {MOUTH_LANDMARKS}"),
                l,
            ));
        }
        for f in &frames {
            let (fl, fd) = f.dims2()?;
            if fl != l || fd != 2 {
                return Err(Error::dimension("landmark frame", format!("{l}x2"), format!("{fl}x{fd}")));
            }
            if !f.all_finite() {
                return Err(Error::NonFinite("landmark coordinates".to_string()));
            }
        }
        Ok(LandmarkSequence { frames, points: l })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    /// Restrict every frame to the given point indices.
    pub fn subset(&self, indices: &[usize]) -> Result<LandmarkSequence> {
        let mut frames = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let mut data = Vec::with_capacity(indices.len() * 2);
            for &i in indices {
                if i >= self.points {
                    return Err(Error::dimension("landmark subset", self.points, i));
                }
                data.extend_from_slice(f.row(i));
            }
            frames.push(Tensor::new(vec![indices.len(), 2], data)?);
        }
        LandmarkSequence::new(frames)
    }
}

/// Mean landmark distance after per-frame similarity alignment of `gen`
/// onto `gt`; also reports how many degenerate frames were skipped.
pub fn lmd_with_skips(gen: &LandmarkSequence, gt: &LandmarkSequence) -> Result<(f64, usize)> {
    if gen.num_frames() != gt.num_frames() {
        return Err(Error::dimension("lmd frames", gt.num_frames(), gen.num_frames()));
    }
    if gen.points() != gt.points() {
        return Err(Error::dimension("lmd points", gt.points(), gen.points()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for k in 0..gen.num_frames() {
        match kabsch_umeyama(gen.frame(k), gt.frame(k)) {
            Ok(transform) => {
                let aligned = transform.apply(gen.frame(k))?;
                let l = gen.points();
                let mut frame_sum = 0.0;
                for i in 0..l {
                    let dx = aligned.at(i, 0) - gt.frame(k).at(i, 0);
                    let dy = aligned.at(i, 1) - gt.frame(k).at(i, 1);
                    frame_sum += (dx * dx + dy * dy).sqrt();
                }
                total += frame_sum / l as f64;
                used += 1;
            }
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every frame was degenerate".to_string()));
    }
    Ok((total / used as f64, skipped))
}

/// [`lmd_with_skips`], discarding the skip count.
pub fn lmd(gen: &LandmarkSequence, gt: &LandmarkSequence) -> Result<f64> {
    lmd_with_skips(gen, gt).map(|(value, _)| value)
}

/// Seeded stand-in for render-plus-detector: motion to 68 2D landmarks.
///
/// Fields: a neutral 68-point shape, an affine facial response (lips
/// parameters displace only the mouth points, expression parameters only
/// the rest), and pose coefficients mapping the first four pose
/// parameters to (rotation, log-scale, x shift, y shift) of an exact
/// whole-face similarity transform.
#[derive(Debug, Clone)]
pub struct LandmarkBasis {
    layout: ParameterLayout,
    /// 68 x 2 neutral landmarks.
    base: Tensor,
    /// (20*2) x 13 mouth displacement per lips parameter.
    mouth_map: Tensor,
    /// (48*2) x 51 displacement of the remaining points per expression
    /// parameter.
    expr_map: Tensor,
    mouth_points: Vec<usize>,
    rot_coeff: f64,
    log_scale_coeff: f64,
    trans_coeff: f64,
}

const FACIAL_RESPONSE: f64 = 0.05;
const POSE_ROT_COEFF: f64 = 0.3;
const POSE_LOG_SCALE_COEFF: f64 = 0.2;
const POSE_TRANS_COEFF: f64 = 1.0;

impl LandmarkBasis {
    pub fn new(seed: u64, layout: ParameterLayout) -> Result<Self> {
        layout.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let base = Tensor::new(vec![FULL_LANDMARKS, 2], normal(FULL_LANDMARKS * 2))?;
        let mouth_map = Tensor::new(
            vec![MOUTH_LANDMARKS * 2, MOUTH_DIM],
            normal(MOUTH_LANDMARKS * 2 * MOUTH_DIM)
                .into_iter()
                .map(|v| v * FACIAL_RESPONSE)
                .collect(),
        )?;
        let expr_cols = FACIAL_DIM - MOUTH_DIM;
        let expr_map = Tensor::new(
            vec![(FULL_LANDMARKS - MOUTH_LANDMARKS) * 2, expr_cols],
            normal((FULL_LANDMARKS - MOUTH_LANDMARKS) * 2 * expr_cols)
                .into_iter()
                .map(|v| v * FACIAL_RESPONSE)
                .collect(),
        )?;
        let basis = LandmarkBasis {
            layout,
            base,
            mouth_map,
            expr_map,
            mouth_points: (MOUTH_LANDMARK_START..FULL_LANDMARKS).collect(),
            rot_coeff: POSE_ROT_COEFF,
            log_scale_coeff: POSE_LOG_SCALE_COEFF,
            trans_coeff: POSE_TRANS_COEFF,
        };
        basis.check_rank()?;
        Ok(basis)
    }

    /// The facial response must not collapse any motion direction: the
    /// stacked 136 x 64 map needs full column rank.
    fn check_rank(&self) -> Result<()> {
        let rows = FULL_LANDMARKS * 2;
        let mut full = DMatrix::zeros(rows, FACIAL_DIM);
        for (j, _) in self.layout.mouth_indices().iter().enumerate() {
            for r in 0..MOUTH_LANDMARKS * 2 {
                let point = self.mouth_points[r / 2];
                full[(point * 2 + r % 2, j)] = self.mouth_map.at(r, j);
            }
        }
        let expr_cols = FACIAL_DIM - MOUTH_DIM;
        for j in 0..expr_cols {
            let mut r = 0;
            for point in 0..FULL_LANDMARKS {
                if self.mouth_points.contains(&point) {
                    continue;
                }
                full[(point * 2, MOUTH_DIM + j)] = self.expr_map.at(r, j);
                full[(point * 2 + 1, MOUTH_DIM + j)] = self.expr_map.at(r + 1, j);
                r += 2;
            }
        }
        let svd = full.svd(false, false);
        let min_sv = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_sv < 1e-6 {
            return Err(Error::Degenerate(format!(
                "facial landmark map is rank deficient (min singular value {min_sv:.2e})"
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    /// Indices of the mouth points within the 68.
    pub fn mouth_points(&self) -> &[usize] {
        &self.mouth_points
    }

    /// The exact similarity transform a pose vector induces.
    pub fn pose_transform(&self, pose: &[f64]) -> Result<SimilarityTransform> {
        if pose.len() != TOTAL_DIM - FACIAL_DIM {
            return Err(Error::dimension("pose vector", TOTAL_DIM - FACIAL_DIM, pose.len()));
        }
        SimilarityTransform::from_angle_2d(
            (self.log_scale_coeff * pose[1]).exp(),
            self.rot_coeff * pose[0],
            self.trans_coeff * pose[2],
            self.trans_coeff * pose[3],
        )
    }

    /// Project a 70-dim sequence to landmarks.
    pub fn project(&self, motion: &MotionSequence) -> Result<LandmarkSequence> {
        if motion.dim() != TOTAL_DIM {
            return Err(Error::dimension("landmark projection", TOTAL_DIM, motion.dim()));
        }
        let mut frames = Vec::with_capacity(motion.num_frames());
        for k in 0..motion.num_frames() {
            let frame = motion.frame(k);
            let mut points = self.base.data().to_vec();
            for (j, &col) in self.layout.mouth_indices().iter().enumerate() {
                let p = frame[col];
                for r in 0..MOUTH_LANDMARKS * 2 {
                    let point = self.mouth_points[r / 2];
                    points[point * 2 + r % 2] += self.mouth_map.at(r, j) * p;
                }
            }
            for (j, &col) in self.layout.expression_indices().iter().enumerate() {
                let p = frame[col];
                let mut r = 0;
                for point in 0..FULL_LANDMARKS {
                    if point >= MOUTH_LANDMARK_START {
                        continue;
                    }
                    points[point * 2] += self.expr_map.at(r, j) * p;
                    points[point * 2 + 1] += self.expr_map.at(r + 1, j) * p;
                    r += 2;
                }
            }
            let transform = self.pose_transform(&frame[FACIAL_DIM..])?;
            frames.push(transform.apply(&Tensor::new(vec![FULL_LANDMARKS, 2], points)?)?);
        }
        LandmarkSequence::new(frames)
    }
}

/// Landmark distance over all 68 points.
pub fn f_lmd(gen: &MotionSequence, gt: &MotionSequence, basis: &LandmarkBasis) -> Result<f64> {
    lmd(&basis.project(gen)?, &basis.project(gt)?)
}

/// Landmark distance over the 20 mouth points.
pub fn m_lmd(gen: &MotionSequence, gt: &MotionSequence, basis: &LandmarkBasis) -> Result<f64> {
    let gen_lm = basis.project(gen)?.subset(basis.mouth_points())?;
    let gt_lm = basis.project(gt)?.subset(basis.mouth_points())?;
    lmd(&gen_lm, &gt_lm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub f_lmd: f64,
    pub m_lmd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-clip metrics, sorted by clip id.
    pub rows: Vec<EvalRow>,
    pub mean_f_lmd: f64,
    pub mean_m_lmd: f64,
    /// Manifest clips with no matching generated file.
    pub unmatched: Vec<String>,
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>12} {:>12}", "clip", "F-LMD", "M-LMD");
        for row in &self.rows {
            let _ = writeln!(out, "{:<12} {:>12.6} {:>12.6}", row.id, row.f_lmd, row.m_lmd);
        }
        let _ = writeln!(out, "{:<12} {:>12.6} {:>12.6}", "mean", self.mean_f_lmd, self.mean_m_lmd);
        if !self.unmatched.is_empty() {
            let _ = writeln!(out, "unmatched: {}", self.unmatched.join(" "));
        }
        out
    }

    /// Tab-separated per-clip values, plot-ready.
    pub fn tsv(&self) -> String {
        let mut out = String::from("id\tf_lmd\tm_lmd\n");
        for row in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", row.id, row.f_lmd, row.m_lmd);
        }
        let _ = writeln!(out, "mean\t{}\t{}", self.mean_f_lmd, self.mean_m_lmd);
        out
    }
}

/// Compare generated exports (`<id>.render` under `gen_dir`) against the
/// ground-truth clips of a manifest.
pub fn evaluate_run(
    gen_dir: &Path,
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    basis: &LandmarkBasis,
) -> Result<EvalReport> {
    let mut rows: BTreeMap<String, EvalRow> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for entry in &manifest.clips {
        let gen_path = gen_dir.join(format!("{}.render", entry.id));
        if !gen_path.exists() {
            unmatched.push(entry.id.clone());
            continue;
        }
        let (gen_motion, _) = read_render_export(&gen_path)?;
        let clip = read_clip(dataset_dir, manifest, entry)?;
        rows.insert(
            entry.id.clone(),
            EvalRow {
                id: entry.id.clone(),
                f_lmd: f_lmd(&gen_motion, &clip.motion, basis)?,
                m_lmd: m_lmd(&gen_motion, &clip.motion, basis)?,
            },
        );
    }
    if rows.is_empty() {
        return Err(Error::contract("no generated clip matches the manifest"));
    }
    unmatched.sort_unstable();
    let rows: Vec<EvalRow> = rows.into_values().collect();
    let n = rows.len() as f64;
    let mean_f_lmd = rows.iter().map(|r| r.f_lmd).sum::<f64>() / n;
    let mean_m_lmd = rows.iter().map(|r| r.m_lmd).sum::<f64>() / n;
    Ok(EvalReport {
        rows,
        mean_f_lmd,
        mean_m_lmd,
        unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tests_rng;

    fn random_points(l: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = tests_rng(seed);
        Tensor::new(
            vec![l, d],
            (0..l * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_fit_for_identical_points() {
        let p = random_points(10, 2, 1);
        let t = kabsch_umeyama(&p, &p).unwrap();
        assert!((t.scale() - 1.0).abs() < 1e-12);
        assert!((t.angle_2d().unwrap()).abs() < 1e-12);
        assert!(t.translation().iter().all(|v| v.abs() < 1e-12));
        assert!(alignment_residual(&t, &p, &p).unwrap() < 1e-24);
    }

    #[test]
    fn recovers_constructed_similarity_2d() {
        let p = random_points(12, 2, 2);
        let truth = SimilarityTransform::from_angle_2d(2.0, 30f64.to_radians(), 5.0, -1.0).unwrap();
        let q = truth.apply(&p).unwrap();
        let fit = kabsch_umeyama(&p, &q).unwrap();
        assert!((fit.scale() - 2.0).abs() < 1e-9, "scale {}", fit.scale());
        assert!(
            (fit.angle_2d().unwrap() - 30f64.to_radians()).abs() < 1e-9,
            "angle {}",
            fit.angle_2d().unwrap()
        );
        assert!((fit.translation()[0] - 5.0).abs() < 1e-9);
        assert!((fit.translation()[1] + 1.0).abs() < 1e-9);
        assert!(alignment_residual(&fit, &p, &q).unwrap() < 1e-18);
    }

    #[test]
    fn recovers_constructed_similarity_3d() {
        let p = random_points(15, 3, 3);
        // Rotation about z by 40 degrees composed with rotation about x
        // by 25 degrees.
        let (sz, cz) = 40f64.to_radians().sin_cos();
        let (sx, cx) = 25f64.to_radians().sin_cos();
        let rz = [cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0];
        let rx = [1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx];
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i * 3 + j] += rx[i * 3 + k] * rz[k * 3 + j];
                }
            }
        }
        let truth = SimilarityTransform::new(
            0.7,
            Tensor::new(vec![3, 3], r.to_vec()).unwrap(),
            vec![1.0, -2.0, 0.5],
        )
        .unwrap();
        let q = truth.apply(&p).unwrap();
        let fit = kabsch_umeyama(&p, &q).unwrap();
        assert!((fit.scale() - 0.7).abs() < 1e-9);
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (fit.rotation().at(i, j) - truth.rotation().at(i, j)).abs() < 1e-9,
                    "R[{i}][{j}]"
                );
            }
        }
        for i in 0..3 {
            assert!((fit.translation()[i] - truth.translation()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn reflection_matches_brute_force_rotation_scan() {
        let p = random_points(10, 2, 4);
        // Mirror across the y axis: no proper rotation reproduces this.
        let mirrored = Tensor::new(
            vec![10, 2],
            (0..10)
                .flat_map(|i| [-p.at(i, 0), p.at(i, 1)])
                .collect::<Vec<f64>>(),
        )
        .unwrap();
        let fit = kabsch_umeyama(&p, &mirrored).unwrap();
        assert!((det_small(fit.rotation()).unwrap() - 1.0).abs() < 1e-10);
        let ku_residual = alignment_residual(&fit, &p, &mirrored).unwrap();

        // Brute force: scan rotation angles, solving scale and
        // translation analytically for each.
        let mut mu_p = [0.0; 2];
        let mut mu_q = [0.0; 2];
        for i in 0..10 {
            for j in 0..2 {
                mu_p[j] += p.at(i, j) / 10.0;
                mu_q[j] += mirrored.at(i, j) / 10.0;
            }
        }
        let mut best = f64::INFINITY;
        let mut theta = 0.0;
        while theta < std::f64::consts::TAU {
            let (s, c) = theta.sin_cos();
            let mut cross = 0.0;
            let mut xnorm = 0.0;
            let mut ynorm = 0.0;
            for i in 0..10 {
                let x = [p.at(i, 0) - mu_p[0], p.at(i, 1) - mu_p[1]];
                let y = [mirrored.at(i, 0) - mu_q[0], mirrored.at(i, 1) - mu_q[1]];
                let rx = [c * x[0] - s * x[1], s * x[0] + c * x[1]];
                cross += y[0] * rx[0] + y[1] * rx[1];
                xnorm += x[0] * x[0] + x[1] * x[1];
                ynorm += y[0] * y[0] + y[1] * y[1];
            }
            let residual = ynorm - (cross.max(0.0)).powi(2) / xnorm;
            best = best.min(residual);
            theta += 1e-4;
        }
        assert!(
            (ku_residual - best).abs() < 1e-5,
            "ku {ku_residual} vs brute force {best}"
        );
    }

    #[test]
    fn beats_random_similarity_transforms() {
        let mut rng = tests_rng(5);
        for trial in 0..20 {
            let p = random_points(10, 2, 100 + trial);
            let q = random_points(10, 2, 200 + trial);
            let fit = kabsch_umeyama(&p, &q).unwrap();
            let fit_residual = alignment_residual(&fit, &p, &q).unwrap();
            for _ in 0..100 {
                let random = SimilarityTransform::from_angle_2d(
                    rng.gen_range(0.1..3.0),
                    rng.gen_range(-3.1..3.1),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                )
                .unwrap();
                let residual = alignment_residual(&random, &p, &q).unwrap();
                assert!(fit_residual <= residual + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_source_is_rejected() {
        let p = Tensor::new(vec![4, 2], vec![[1.0, 2.0]; 4].concat()).unwrap();
        let q = random_points(4, 2, 6);
        assert!(matches!(kabsch_umeyama(&p, &q), Err(Error::Degenerate(_))));
        let single = random_points(1, 2, 7);
        assert!(kabsch_umeyama(&single, &single).is_err());
    }

    fn random_landmarks(frames: usize, points: usize, seed: u64) -> LandmarkSequence {
        let mut out = Vec::new();
        for k in 0..frames {
            out.push(random_points(points, 2, seed * 1000 + k as u64));
        }
        LandmarkSequence::new(out).unwrap()
    }

    #[test]
    fn lmd_zero_for_identical_and_for_similarity_transformed() {
        let gt = random_landmarks(6, 68, 8);
        assert!(lmd(&gt, &gt).unwrap() < 1e-12);
        let mut rng = tests_rng(9);
        let mut frames = Vec::new();
        for k in 0..6 {
            let t = SimilarityTransform::from_angle_2d(
                rng.gen_range(0.2..4.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            )
            .unwrap();
            frames.push(t.apply(gt.frame(k)).unwrap());
        }
        let transformed = LandmarkSequence::new(frames).unwrap();
        assert!(lmd(&transformed, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn lmd_matches_independent_least_squares_on_unit_offset() {
        // One landmark off by a unit: compare against a direct
        // least-squares fit done with the closed-form normal equations.
        let gt = random_landmarks(1, 68, 10);
        let mut data = gt.frame(0).data().to_vec();
        data[0] += 1.0;
        let gen =
            LandmarkSequence::new(vec![Tensor::new(vec![68, 2], data).unwrap()]).unwrap();
        let value = lmd(&gen, &gt).unwrap();

        let fit = kabsch_umeyama(gen.frame(0), gt.frame(0)).unwrap();
        let aligned = fit.apply(gen.frame(0)).unwrap();
        let mut expected = 0.0;
        for i in 0..68 {
            let dx = aligned.at(i, 0) - gt.frame(0).at(i, 0);
            let dy = aligned.at(i, 1) - gt.frame(0).at(i, 1);
            expected += (dx * dx + dy * dy).sqrt() / 68.0;
        }
        assert!((value - expected).abs() < 1e-12);
        assert!(value > 0.0);
    }

    #[test]
    fn lmd_invariant_to_pre_scaling() {
        let gt = random_landmarks(4, 20, 11);
        let gen = random_landmarks(4, 20, 12);
        let base = lmd(&gen, &gt).unwrap();
        for c in [0.1, 3.0, 42.0] {
            let scaled = LandmarkSequence::new(
                (0..4)
                    .map(|k| gen.frame(k).map(|v| c * v))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let value = lmd(&scaled, &gt).unwrap();
            assert!((value - base).abs() < 1e-9, "c={c}: {value} vs {base}");
        }
    }

    #[test]
    fn skips_degenerate_frames_but_not_all() {
        let good = random_points(68, 2, 13);
        let degenerate = Tensor::new(vec![68, 2], vec![0.5; 136]).unwrap();
        let gen = LandmarkSequence::new(vec![good.clone(), degenerate.clone()]).unwrap();
        let gt = random_landmarks(2, 68, 14);
        let (_, skipped) = lmd_with_skips(&gen, &gt).unwrap();
        assert_eq!(skipped, 1);
        let all_bad = LandmarkSequence::new(vec![degenerate.clone(), degenerate]).unwrap();
        assert!(matches!(lmd(&all_bad, &gt), Err(Error::Degenerate(_))));
    }

    fn motion_from(rows: Vec<Vec<f64>>) -> MotionSequence {
        let dim = rows[0].len();
        MotionSequence::new(dim, rows.concat(), 25.0).unwrap()
    }

    fn random_motion(frames: usize, seed: u64) -> MotionSequence {
        let mut rng = tests_rng(seed);
        MotionSequence::new(
            TOTAL_DIM,
            (0..frames * TOTAL_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            25.0,
        )
        .unwrap()
    }

    #[test]
    fn identical_motion_scores_zero() {
        let basis = LandmarkBasis::new(3, ParameterLayout::standard()).unwrap();
        let m = random_motion(5, 15);
        assert!(f_lmd(&m, &m, &basis).unwrap() < 1e-12);
        assert!(m_lmd(&m, &m, &basis).unwrap() < 1e-12);
    }

    #[test]
    fn pose_only_differences_vanish() {
        let basis = LandmarkBasis::new(4, ParameterLayout::standard()).unwrap();
        let gt = random_motion(6, 16);
        let mut rng = tests_rng(17);
        let mut values = gt.values().to_vec();
        for k in 0..6 {
            for c in FACIAL_DIM..TOTAL_DIM {
                values[k * TOTAL_DIM + c] = rng.gen_range(-1.0..1.0);
            }
        }
        let gen = MotionSequence::new(TOTAL_DIM, values, 25.0).unwrap();
        assert!(f_lmd(&gen, &gt, &basis).unwrap() < 1e-9);
        assert!(m_lmd(&gen, &gt, &basis).unwrap() < 1e-9);
    }

    #[test]
    fn expression_only_differences_spare_the_mouth() {
        let layout = ParameterLayout::standard();
        let basis = LandmarkBasis::new(5, layout.clone()).unwrap();
        let gt = random_motion(5, 18);
        let mut rng = tests_rng(19);
        let mut values = gt.values().to_vec();
        for k in 0..5 {
            for &c in layout.expression_indices() {
                values[k * TOTAL_DIM + c] = rng.gen_range(-1.0..1.0);
            }
        }
        let gen = MotionSequence::new(TOTAL_DIM, values, 25.0).unwrap();
        assert!(m_lmd(&gen, &gt, &basis).unwrap() < 1e-9);
        assert!(f_lmd(&gen, &gt, &basis).unwrap() > 1e-4);
    }

    #[test]
    fn pose_transform_is_exact_similarity() {
        let basis = LandmarkBasis::new(6, ParameterLayout::standard()).unwrap();
        // Zero facial params, two different poses: the projected
        // landmark sets differ by exactly the relative similarity
        // transform, so alignment recovers it to machine precision.
        let mut a = vec![0.0; TOTAL_DIM];
        let mut b = vec![0.0; TOTAL_DIM];
        a[FACIAL_DIM] = 0.4;
        a[FACIAL_DIM + 1] = -0.3;
        a[FACIAL_DIM + 2] = 1.0;
        b[FACIAL_DIM] = -0.6;
        b[FACIAL_DIM + 1] = 0.2;
        b[FACIAL_DIM + 3] = -2.0;
        let ma = motion_from(vec![a]);
        let mb = motion_from(vec![b]);
        let la = basis.project(&ma).unwrap();
        let lb = basis.project(&mb).unwrap();
        let fit = kabsch_umeyama(la.frame(0), lb.frame(0)).unwrap();
        assert!(alignment_residual(&fit, la.frame(0), lb.frame(0)).unwrap() < 1e-18);
    }

    #[test]
    fn evaluate_run_reports_per_clip_and_mean() {
        use crate::dataset::{generate_synthetic_dataset, SyntheticSpec};
        use crate::pipeline::export_for_renderer;

        let dataset_dir = tempfile::tempdir().unwrap();
        let gen_dir = tempfile::tempdir().unwrap();
        let layout = ParameterLayout::standard();
        let spec = SyntheticSpec {
            clips: 4,
            frames: 12,
            seed: 23,
            ..SyntheticSpec::default()
        };
        let manifest = generate_synthetic_dataset(&spec, &layout, dataset_dir.path()).unwrap();
        let clips = crate::dataset::load_clips(dataset_dir.path(), &manifest, None).unwrap();
        // Export ground truth for three clips, leave one unmatched.
        for clip in &clips[..3] {
            export_for_renderer(
                &clip.motion,
                &layout,
                &gen_dir.path().join(format!("{}.render", clip.id)),
            )
            .unwrap();
        }
        let basis = LandmarkBasis::new(7, layout.clone()).unwrap();
        let report = evaluate_run(gen_dir.path(), dataset_dir.path(), &manifest, &basis).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.unmatched, vec![clips[3].id.clone()]);
        for row in &report.rows {
            assert!(row.f_lmd < 1e-9, "{}: {}", row.id, row.f_lmd);
            assert!(row.m_lmd < 1e-9);
        }
        let mean_f: f64 = report.rows.iter().map(|r| r.f_lmd).sum::<f64>() / 3.0;
        assert!((report.mean_f_lmd - mean_f).abs() < 1e-12);
        assert!(report.text_table().contains("mean"));
        assert_eq!(report.tsv().lines().count(), 1 + 3 + 1);

        let empty = tempfile::tempdir().unwrap();
        assert!(evaluate_run(empty.path(), dataset_dir.path(), &manifest, &basis).is_err());
    }
}
