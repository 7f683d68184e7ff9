//! Sample-quality metrics against the analytic world, plus figure
//! rendering: 99%-mass contours by marching squares with an overlaid sample
//! scatter, one panel per guidance setting, written as deterministic SVG.
//!
//! Outliers are samples whose data-manifold density (sigma = 0) falls below
//! the class's mass threshold; branch coverage counts the fraction of tree
//! branches that received at least one sample by maximum-responsibility
//! assignment; mean log-likelihood is the scalar companion to both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guide::GuidanceSpec;
use crate::mixture::{self, Class, GridSpec, WorldModel};

/// Metrics and provenance of one sampling run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub outlier_rate: f64,
    pub branch_coverage: f64,
    pub mean_loglik: f64,
    pub sample_count: usize,
    pub guidance: GuidanceSpec,
    pub checkpoint: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Fraction of samples with density(x, sigma = 0) below the threshold tau.
pub fn outlier_rate(samples: &[[f64; 2]], world: &WorldModel, class_id: Class, tau: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let outliers = samples
        .iter()
        .filter(|x| mixture::density(world, class_id, **x, 0.0) < tau)
        .count();
    outliers as f64 / samples.len() as f64
}

/// Fraction of tree branches hit by at least one sample, assigning each
/// sample to its maximum-responsibility component at sigma = 0.
pub fn branch_coverage(samples: &[[f64; 2]], world: &WorldModel, class_id: Class) -> f64 {
    let cm = world.class(class_id);
    let total = cm.branch_count();
    if total == 0 || samples.is_empty() {
        return 0.0;
    }
    let mut hit = vec![false; total];
    for x in samples {
        let idx = mixture::max_responsibility_component(world, class_id, *x, 0.0);
        hit[cm.components[idx].branch as usize] = true;
    }
    hit.iter().filter(|h| **h).count() as f64 / total as f64
}

/// Mean log density at sigma = 0 over the samples (log-sum-exp stabilized).
pub fn mean_loglik(samples: &[[f64; 2]], world: &WorldModel, class_id: Class) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples
        .iter()
        .map(|x| mixture::log_density(world, class_id, *x, 0.0))
        .sum();
    sum / samples.len() as f64
}

/// Pooled metrics of a two-class sample set: outlier and log-likelihood
/// pooled over all samples (each against its own class), coverage averaged
/// over the per-class coverages.
pub fn pooled_metrics(
    world: &WorldModel,
    samples: &[[f64; 2]],
    classes: &[Class],
    tau: &[f64; 2],
) -> (f64, f64, f64) {
    assert_eq!(samples.len(), classes.len());
    let mut by_class: [Vec<[f64; 2]>; 2] = [Vec::new(), Vec::new()];
    for (x, c) in samples.iter().zip(classes) {
        by_class[c.index()].push(*x);
    }
    let mut outliers = 0.0;
    let mut loglik = 0.0;
    let mut coverage = 0.0;
    let mut class_count = 0usize;
    for class in Class::ALL {
        let part = &by_class[class.index()];
        if part.is_empty() {
            continue;
        }
        let n = part.len() as f64;
        outliers += outlier_rate(part, world, class, tau[class.index()]) * n;
        loglik += mean_loglik(part, world, class) * n;
        coverage += branch_coverage(part, world, class);
        class_count += 1;
    }
    let total = samples.len().max(1) as f64;
    (
        outliers / total,
        if class_count > 0 { coverage / class_count as f64 } else { 0.0 },
        loglik / total,
    )
}

// --- marching squares ---------------------------------------------------

/// One contour polyline in data coordinates. Closed loops repeat their
/// first point at the end.
#[derive(Debug, Clone)]
pub struct Contour {
    pub points: Vec<[f64; 2]>,
}

/// Extract iso-contours of `vals > tau` from a grid of cell-center values
/// by marching squares with linear interpolation. Saddle cells are split by
/// the cell-average decider.
pub fn marching_squares(grid: &GridSpec, vals: &[f64], tau: f64) -> Vec<Contour> {
    assert_eq!(vals.len(), grid.nx * grid.ny);
    let v = |i: usize, j: usize| vals[j * grid.nx + i];
    let px = |i: usize| grid.x_center(i);
    let py = |j: usize| grid.y_center(j);
    // Edge crossing keyed for exact chaining: edges are identified by
    // (corner index, axis), so shared edges produce identical keys.
    let lerp = |a: f64, b: f64, va: f64, vb: f64| a + (tau - va) / (vb - va) * (b - a);

    #[derive(Clone, Copy, PartialEq, Eq, Hash)]
    struct EdgeKey {
        i: usize,
        j: usize,
        horizontal: bool,
    }
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    let mut edge_points: std::collections::HashMap<EdgeKey, [f64; 2]> =
        std::collections::HashMap::new();

    for j in 0..grid.ny - 1 {
        for i in 0..grid.nx - 1 {
            let (v00, v10, v11, v01) = (v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1));
            let mut case = 0u8;
            if v00 > tau {
                case |= 1;
            }
            if v10 > tau {
                case |= 2;
            }
            if v11 > tau {
                case |= 4;
            }
            if v01 > tau {
                case |= 8;
            }
            if case == 0 || case == 15 {
                continue;
            }
            // Edge keys: bottom/top are horizontal (vary x), left/right
            // vertical.
            let bottom = EdgeKey { i, j, horizontal: true };
            let top = EdgeKey { i, j: j + 1, horizontal: true };
            let left = EdgeKey { i, j, horizontal: false };
            let right = EdgeKey { i: i + 1, j, horizontal: false };
            let mut point = |k: EdgeKey| -> EdgeKey {
                edge_points.entry(k).or_insert_with(|| match k {
                    EdgeKey { i, j, horizontal: true } => {
                        [lerp(px(i), px(i + 1), v(i, j), v(i + 1, j)), py(j)]
                    }
                    EdgeKey { i, j, horizontal: false } => {
                        [px(i), lerp(py(j), py(j + 1), v(i, j), v(i, j + 1))]
                    }
                });
                k
            };
            let mut emit = |a: EdgeKey, b: EdgeKey, segs: &mut Vec<(EdgeKey, EdgeKey)>| {
                segs.push((point(a), point(b)));
            };
            match case {
                1 => emit(left, bottom, &mut segments),
                2 => emit(bottom, right, &mut segments),
                3 => emit(left, right, &mut segments),
                4 => emit(right, top, &mut segments),
                6 => emit(bottom, top, &mut segments),
                7 => emit(left, top, &mut segments),
                8 => emit(top, left, &mut segments),
                9 => emit(top, bottom, &mut segments),
                11 => emit(top, right, &mut segments),
                12 => emit(right, left, &mut segments),
                13 => emit(bottom, right, &mut segments),
                14 => emit(left, bottom, &mut segments),
                5 | 10 => {
                    let center = 0.25 * (v00 + v10 + v11 + v01);
                    let inside = center > tau;
                    if case == 5 {
                        if inside {
                            emit(left, top, &mut segments);
                            emit(right, bottom, &mut segments);
                        } else {
                            emit(left, bottom, &mut segments);
                            emit(right, top, &mut segments);
                        }
                    } else if inside {
                        emit(bottom, right, &mut segments);
                        emit(top, left, &mut segments);
                    } else {
                        emit(bottom, left, &mut segments);
                        emit(top, right, &mut segments);
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    // Chain segments into polylines by shared edge keys, walking in
    // insertion order for deterministic output.
    let mut adjacency: std::collections::HashMap<EdgeKey, Vec<usize>> =
        std::collections::HashMap::new();
    for (idx, (a, b)) in segments.iter().enumerate() {
        adjacency.entry(*a).or_default().push(idx);
        adjacency.entry(*b).or_default().push(idx);
    }
    let mut used = vec![false; segments.len()];
    let mut contours = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a0, b0) = segments[start];
        let mut chain = std::collections::VecDeque::from([a0, b0]);
        for (endpoint, front) in [(b0, false), (a0, true)] {
            let mut cur = endpoint;
            loop {
                let Some(next_idx) = adjacency
                    .get(&cur)
                    .and_then(|v| v.iter().find(|idx| !used[**idx]))
                    .copied()
                else {
                    break;
                };
                used[next_idx] = true;
                let (a, b) = segments[next_idx];
                cur = if a == cur { b } else { a };
                if front {
                    chain.push_front(cur);
                } else {
                    chain.push_back(cur);
                }
            }
        }
        contours.push(Contour {
            points: chain.iter().map(|k| edge_points[k]).collect(),
        });
    }
    contours
}

// --- figure rendering ----------------------------------------------------

/// Layout and resolution of a rendered figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FigureSpec {
    /// Density grid resolution per axis for the contours (>= 256).
    pub grid_res: usize,
    /// Mass quantile of the contour (0.99 reproduces the figures).
    pub contour_quantile: f64,
    /// Half-width of the shown data window.
    pub extent: f64,
    /// Panel edge length in pixels.
    pub panel_px: f64,
    /// At most this many scatter points are drawn per panel.
    pub max_scatter: usize,
}

impl Default for FigureSpec {
    fn default() -> Self {
        FigureSpec {
            grid_res: 1024,
            contour_quantile: 0.99,
            extent: 3.0,
            panel_px: 320.0,
            max_scatter: 4000,
        }
    }
}

impl FigureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_res < 256 {
            return Err(Error::Config(format!(
                "figure grid resolution {} is below the minimum of 256",
                self.grid_res
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::square(self.extent, self.grid_res)
    }
}

/// One figure panel: a title and the samples to scatter.
#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub samples: Vec<[f64; 2]>,
    pub classes: Vec<Class>,
}

const CONTOUR_COLORS: [&str; 2] = ["#9c9c9c", "#e08a3c"];
const SCATTER_COLORS: [&str; 2] = ["#47474f", "#b05a10"];

/// Render per-class 99%-contours and sample scatters, one panel per sample
/// set. Output bytes are a pure function of the inputs.
pub fn render_figure(spec: &FigureSpec, world: &WorldModel, panels: &[Panel]) -> Result<String> {
    spec.validate()?;
    if panels.is_empty() {
        return Err(Error::Config("figure needs at least one panel".into()));
    }
    let grid = spec.grid();
    let mut class_contours: Vec<Vec<Contour>> = Vec::new();
    for class in Class::ALL {
        let tau = mixture::mass_threshold(world, class, spec.contour_quantile, &grid)?;
        let vals = mixture::density_grid(world, class, 0.0, &grid);
        class_contours.push(marching_squares(&grid, &vals, tau));
    }

    let margin = 10.0;
    let title_h = 18.0;
    let p = spec.panel_px;
    let width = margin + panels.len() as f64 * (p + margin);
    let height = margin + title_h + p + margin;
    let mut svg = String::with_capacity(1 << 20);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    ));
    for (pi, panel) in panels.iter().enumerate() {
        let ox = margin + pi as f64 * (p + margin);
        let oy = margin + title_h;
        let to_px = |pt: [f64; 2]| {
            [
                ox + (pt[0] + spec.extent) / (2.0 * spec.extent) * p,
                // Flip y so that +y points up.
                oy + (spec.extent - pt[1]) / (2.0 * spec.extent) * p,
            ]
        };
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
            ox,
            margin + 12.0,
            xml_escape(&panel.title)
        ));
        svg.push_str(&format!(
            "<rect x=\"{ox:.1}\" y=\"{oy:.1}\" width=\"{p:.1}\" height=\"{p:.1}\" \
             fill=\"none\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n"
        ));
        svg.push_str(&format!(
            "<clipPath id=\"clip{pi}\"><rect x=\"{ox:.1}\" y=\"{oy:.1}\" width=\"{p:.1}\" height=\"{p:.1}\"/></clipPath>\n"
        ));
        svg.push_str(&format!("<g clip-path=\"url(#clip{pi})\">\n"));
        for class in Class::ALL {
            let color = CONTOUR_COLORS[class.index()];
            for contour in &class_contours[class.index()] {
                if contour.points.len() < 2 {
                    continue;
                }
                svg.push_str("<path d=\"");
                for (k, pt) in contour.points.iter().enumerate() {
                    let [x, y] = to_px(*pt);
                    svg.push_str(&format!("{}{x:.2} {y:.2}", if k == 0 { "M" } else { "L" }));
                }
                svg.push_str(&format!(
                    "\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.8\"/>\n"
                ));
            }
        }
        let step = (panel.samples.len() / spec.max_scatter).max(1);
        for (k, (x, c)) in panel.samples.iter().zip(&panel.classes).enumerate() {
            if k % step != 0 {
                continue;
            }
            let [px_, py_] = to_px(*x);
            svg.push_str(&format!(
                "<circle cx=\"{px_:.2}\" cy=\"{py_:.2}\" r=\"1.1\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
                SCATTER_COLORS[c.index()]
            ));
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One `metrics.csv` row per guidance setting.
pub fn write_metrics_csv(path: &std::path::Path, reports: &[RunReport]) -> Result<()> {
    let mut out = String::from(
        "setting,mode,w,w2,sigma_low,sigma_high,outlier_rate,branch_coverage,mean_loglik,sample_count,checkpoint,seed,config_hash\n",
    );
    for r in reports {
        let hi = r
            .guidance
            .sigma_high
            .map_or("inf".to_string(), |v| format!("{v}"));
        out.push_str(&format!(
            "{},{:?},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.guidance.tag(),
            r.guidance.mode,
            r.guidance.w,
            r.guidance.w2,
            r.guidance.sigma_low,
            hi,
            r.outlier_rate,
            r.branch_coverage,
            r.mean_loglik,
            r.sample_count,
            r.checkpoint,
            r.seed,
            r.config_hash
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
