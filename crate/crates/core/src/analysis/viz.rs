use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::ArrayView2;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::policy::TrainLog;

/// Two-component principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub explained: [f64; 2],
    /// Set when the covariance was degenerate and raw dimensions 0 and 1 are used.
    pub fallback: bool,
}

impl Pca {
    pub fn fit(data: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 || d < 2 {
            return Err(Error::shape(format!("PCA needs >= 2 rows and >= 2 columns, got {n}x{d}")));
        }
        let mean: Vec<f64> = data.mean_axis(ndarray::Axis(0)).unwrap().to_vec();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for row in data.rows() {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= (n - 1) as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let trace = cov.trace();
        let eig = SymmetricEigen::new(cov);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let second = eig.eigenvalues[idx[1]];
        if !(trace > 0.0) || !(second > 1e-12 * trace) {
            log::warn!("degenerate covariance; projecting onto raw dimensions 0 and 1");
            let unit = |k: usize| (0..d).map(|i| f64::from(u8::from(i == k))).collect::<Vec<_>>();
            return Ok(Self {
                mean,
                components: [unit(0), unit(1)],
                explained: [0.0, 0.0],
                fallback: true,
            });
        }
        let component = |k: usize| {
            let mut v: Vec<f64> = eig.eigenvectors.column(idx[k]).iter().copied().collect();
            let lead = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() + 1e-12 { i } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Ok(Self {
            mean,
            components: [component(0), component(1)],
            explained: [eig.eigenvalues[idx[0]] / trace, second / trace],
            fallback: false,
        })
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let dot = |c: &[f64]| c.iter().zip(x.iter().zip(&self.mean)).map(|(ci, (xi, mi))| ci * (xi - mi)).sum();
        [dot(&self.components[0]), dot(&self.components[1])]
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain), without collinear points.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Inclusive test against a counter-clockwise convex polygon.
pub fn point_in_polygon(p: [f64; 2], hull: &[[f64; 2]]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= -1e-12)
}

/// Lloyd's k-means with farthest-point initialization. Returns centroids and labels.
pub fn kmeans(points: &[[f64; 2]], k: usize, iters: usize) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    if k == 0 || points.len() < k {
        return Err(Error::config(format!("k-means needs 1 <= k <= {} points, got k={k}", points.len())));
    }
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let first = (0..points.len())
        .min_by(|&a, &b| points[a][0].total_cmp(&points[b][0]))
        .unwrap();
    let mut centroids = vec![points[first]];
    while centroids.len() < k {
        let far = (0..points.len())
            .max_by(|&a, &b| {
                let da = centroids.iter().map(|&c| d2(points[a], c)).fold(f64::INFINITY, f64::min);
                let db = centroids.iter().map(|&c| d2(points[b], c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        centroids.push(points[far]);
    }
    let nearest = |p: [f64; 2], cs: &[[f64; 2]]| {
        (0..cs.len()).min_by(|&a, &b| d2(p, cs[a]).total_cmp(&d2(p, cs[b]))).unwrap()
    };
    let mut labels = vec![0; points.len()];
    for _ in 0..iters {
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
        let changed = next != labels;
        labels = next;
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            sums[l][2] += 1.0;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        if !changed {
            break;
        }
    }
    Ok((centroids, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizOutput {
    pub pca: Pca,
    pub dataset_points: Vec<[f64; 2]>,
    /// Projected probe joint action per logged step.
    pub policy_points: Vec<(usize, [f64; 2])>,
    pub csv: String,
    pub svg: String,
}

/// Projects dataset `(state, action)` vectors and the logged policy actions
/// at `probe_state` onto the dataset's two principal axes.
pub fn pca_policy_viz(dataset: &Dataset, log: &TrainLog, probe_state: &[f64], max_points: usize) -> Result<VizOutput> {
    let trajectory = log.action_trajectory();
    if trajectory.is_empty() {
        return Err(Error::config("train log has no logged joint actions"));
    }
    if probe_state.len() != dataset.meta().state_dim {
        return Err(Error::shape("probe state does not match the dataset's state dim"));
    }
    let joined = ndarray::concatenate(ndarray::Axis(1), &[dataset.states().view(), dataset.actions().view()])
        .map_err(|e| Error::shape(e.to_string()))?;
    let stride = dataset.len().div_ceil(max_points.max(1)).max(1);
    let rows: Vec<usize> = (0..dataset.len()).step_by(stride).collect();
    let sub = joined.select(ndarray::Axis(0), &rows);
    let pca = Pca::fit(sub.view())?;
    let dataset_points: Vec<[f64; 2]> = sub.rows().into_iter().map(|r| pca.project(&r.to_vec())).collect();
    let policy_points: Vec<(usize, [f64; 2])> = trajectory
        .iter()
        .map(|(step, a)| {
            let mut x = probe_state.to_vec();
            x.extend(a);
            (*step, pca.project(&x))
        })
        .collect();

    let mut csv = String::from("kind,step,pc1,pc2\n");
    for p in &dataset_points {
        let _ = writeln!(csv, "dataset,,{:.6},{:.6}", p[0], p[1]);
    }
    for (s, p) in &policy_points {
        let _ = writeln!(csv, "policy,{s},{:.6},{:.6}", p[0], p[1]);
    }
    let svg = render_svg(&dataset_points, &policy_points);
    Ok(VizOutput {
        pca,
        dataset_points,
        policy_points,
        csv,
        svg,
    })
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

fn render_svg(data: &[[f64; 2]], policy: &[(usize, [f64; 2])]) -> String {
    let all = data.iter().chain(policy.iter().map(|(_, p)| p));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in all {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let inner = SIZE - 2.0 * MARGIN;
    let px = |p: [f64; 2]| {
        (
            MARGIN + (p[0] - x0) / span * inner,
            SIZE - MARGIN - (p[1] - y0) / span * inner,
        )
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r##"<g fill="#888888" fill-opacity="0.35">"##);
    for &p in data {
        let (x, y) = px(p);
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5"/>"#);
    }
    s.push_str("</g>\n");
    let last = policy.last().map_or(1, |(st, _)| (*st).max(1)) as f64;
    let line: Vec<String> = policy
        .iter()
        .map(|(_, p)| {
            let (x, y) = px(*p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#333333" stroke-width="1"/>"##,
        line.join(" ")
    );
    for (step, p) in policy {
        let (x, y) = px(*p);
        let f = *step as f64 / last;
        let (r, b) = ((40.0 + 215.0 * f) as u8, (255.0 - 215.0 * f) as u8);
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="#{r:02x}40{b:02x}"><title>step {step}</title></circle>"##
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{:.0}" font-family="sans-serif" font-size="12">PC1 (x) vs PC2 (y); gray: dataset, colored: policy by step</text>"#,
        MARGIN / 2.0
    );
    s.push_str("</svg>\n");
    s
}
