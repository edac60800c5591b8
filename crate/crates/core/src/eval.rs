//! Policy evaluation, score normalization against in-repo anchors, learning
//! curves, the interaction-reduction metric and plot emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{self, MazeSpec};
use crate::error::{Error, Result};
use crate::planner::{Controller, RandomController, WaypointPlanner};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub random_return: f64,
    pub expert_return: f64,
    pub layout_name: String,
}

impl ReferenceScores {
    pub fn new(random_return: f64, expert_return: f64, layout_name: impl Into<String>) -> Result<Self> {
        let r = ReferenceScores {
            random_return,
            expert_return,
            layout_name: layout_name.into(),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.expert_return > self.random_return) {
            return Err(Error::invalid(format!(
                "degenerate reference scores for `{}`: expert {} <= random {}",
                self.layout_name, self.expert_return, self.random_return
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ReferenceScores = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        r.validate()?;
        Ok(r)
    }

    /// Loads `path` if it holds anchors for this layout, otherwise computes
    /// and writes them.
    pub fn cached(spec: &MazeSpec, path: &Path, n_episodes: usize, rng: &mut Rng) -> Result<Self> {
        if path.exists() {
            let r = ReferenceScores::load(path)?;
            if r.layout_name == spec.layout_name {
                return Ok(r);
            }
        }
        let r = compute_reference_scores(spec, n_episodes, rng)?;
        r.save(path)?;
        Ok(r)
    }
}

pub const REFERENCE_EPISODES: usize = 100;
pub const EVAL_EPISODES: usize = 20;

/// `100 · (raw − random) / (expert − random)`.
pub fn normalize(raw: f64, refs: &ReferenceScores) -> Result<f64> {
    refs.validate()?;
    Ok(100.0 * ((raw - refs.random_return) / (refs.expert_return - refs.random_return)))
}

/// Undiscounted returns of `n_episodes` rollouts from the start distribution.
pub fn rollout_returns(
    spec: &MazeSpec,
    controller: &mut dyn Controller,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    (0..n_episodes)
        .map(|_| {
            let mut s = env::reset(spec, rng);
            controller.begin_episode(spec, &s, rng);
            let mut ret = 0.0;
            loop {
                let a = controller.act(spec, &s, rng);
                let out = env::step(spec, &s, &a)?;
                ret += out.reward;
                s = out.next;
                if out.done {
                    return Ok(ret);
                }
            }
        })
        .collect()
}

pub fn evaluate(
    spec: &MazeSpec,
    controller: &mut dyn Controller,
    n_episodes: usize,
    refs: &ReferenceScores,
    rng: &mut Rng,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let returns = rollout_returns(spec, controller, n_episodes, rng)?;
    let (mean, std) = mean_std(&returns);
    Ok(EvalReport {
        mean_return: mean,
        std_return: std,
        normalized_score: normalize(mean, refs)?,
        n_episodes,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Uniform-random and planner-expert anchors.
pub fn compute_reference_scores(spec: &MazeSpec, n_episodes: usize, rng: &mut Rng) -> Result<ReferenceScores> {
    let mut expert = WaypointPlanner::expert(spec)?;
    let random = rollout_returns(spec, &mut RandomController, n_episodes, rng)?;
    let expert = rollout_returns(spec, &mut expert, n_episodes, rng)?;
    ReferenceScores::new(
        mean_std(&random).0,
        mean_std(&expert).0,
        spec.layout_name.clone(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub method_label: String,
    pub seed: u64,
    pub layout_name: String,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(method_label: impl Into<String>, seed: u64, layout_name: impl Into<String>) -> Self {
        LearningCurve {
            method_label: method_label.into(),
            seed,
            layout_name: layout_name.into(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, env_steps: u64, score: f64) -> Result<()> {
        if let Some(last) = self.points.last() {
            if env_steps <= last.env_steps {
                return Err(Error::invalid(format!(
                    "curve steps must increase strictly ({} after {})",
                    env_steps, last.env_steps
                )));
            }
        }
        self.points.push(CurvePoint { env_steps, score });
        Ok(())
    }

    /// Best score over checkpoints.
    pub fn best(&self) -> Option<f64> {
        self.points.iter().map(|p| p.score).reduce(f64::max)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.score)
    }

    /// Staircase value at `steps`: the latest point at or before it.
    pub fn value_at(&self, steps: u64) -> Option<f64> {
        self.points
            .iter()
            .take_while(|p| p.env_steps <= steps)
            .last()
            .map(|p| p.score)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Percent(f64),
    Inconclusive,
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reduction::Percent(p) => write!(f, "{p:.1}"),
            Reduction::Inconclusive => f.write_str("-"),
        }
    }
}

/// Percentage fewer steps `active` needs to match the best score of
/// `baseline`; inconclusive when it never does.
pub fn interaction_reduction(active: &LearningCurve, baseline: &LearningCurve) -> Result<Reduction> {
    let best = baseline
        .best()
        .ok_or_else(|| Error::invalid("baseline curve is empty"))?;
    if active.points.is_empty() {
        return Err(Error::invalid("active curve is empty"));
    }
    let n_b = baseline
        .points
        .iter()
        .find(|p| p.score >= best)
        .map(|p| p.env_steps)
        .expect("best is attained");
    let Some(n_a) = active.points.iter().find(|p| p.score >= best).map(|p| p.env_steps) else {
        return Ok(Reduction::Inconclusive);
    };
    if n_b == 0 {
        return Ok(Reduction::Inconclusive);
    }
    Ok(Reduction::Percent(100.0 * (n_b as f64 - n_a as f64) / n_b as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPoint {
    pub env_steps: u64,
    pub mean: f64,
    pub std: f64,
    pub n_curves: usize,
}

/// Per-method mean and standard deviation across seeds on the union of step
/// grids, restricted to steps every curve covers.
pub fn aggregate_curves(curves: &[LearningCurve]) -> BTreeMap<String, Vec<BandPoint>> {
    let mut by_method: BTreeMap<String, Vec<&LearningCurve>> = BTreeMap::new();
    for c in curves.iter().filter(|c| !c.points.is_empty()) {
        by_method.entry(c.method_label.clone()).or_default().push(c);
    }
    by_method
        .into_iter()
        .map(|(label, cs)| {
            let lo = cs.iter().map(|c| c.points[0].env_steps).max().unwrap();
            let hi = cs.iter().map(|c| c.points.last().unwrap().env_steps).min().unwrap();
            let mut grid: Vec<u64> = cs
                .iter()
                .flat_map(|c| c.points.iter().map(|p| p.env_steps))
                .filter(|&s| s >= lo && s <= hi)
                .collect();
            grid.sort_unstable();
            grid.dedup();
            let band = grid
                .into_iter()
                .map(|s| {
                    let vals: Vec<f64> = cs.iter().filter_map(|c| c.value_at(s)).collect();
                    let (mean, std) = mean_std(&vals);
                    BandPoint {
                        env_steps: s,
                        mean,
                        std,
                        n_curves: vals.len(),
                    }
                })
                .collect();
            (label, band)
        })
        .collect()
}

pub fn curves_csv(curves: &[LearningCurve]) -> String {
    let mut out = String::from("method,seed,env_steps,score\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(out, "{},{},{},{}", c.method_label, c.seed, p.env_steps, p.score);
        }
    }
    out
}

fn band_csv(bands: &BTreeMap<String, Vec<BandPoint>>) -> String {
    let mut out = String::from("method,env_steps,mean,std,n_seeds\n");
    for (label, band) in bands {
        for b in band {
            let _ = writeln!(out, "{label},{},{},{},{}", b.env_steps, b.mean, b.std, b.n_curves);
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG with a staircase mean line and ±std band per method.
pub fn render_svg(bands: &BTreeMap<String, Vec<BandPoint>>, title: &str) -> String {
    let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 70.0, 170.0, 40.0, 50.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let pts = bands.values().flatten();
    let x_max = pts.clone().map(|b| b.env_steps).max().unwrap_or(1).max(1) as f64;
    let x_min = pts.clone().map(|b| b.env_steps).min().unwrap_or(0) as f64;
    let mut y_min = pts.clone().map(|b| b.mean - b.std).fold(0.0, f64::min);
    let mut y_max = pts.map(|b| b.mean + b.std).fold(1.0, f64::max);
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;
    let x_span = (x_max - x_min).max(1.0);
    let sx = |x: u64| ml + (x as f64 - x_min) / x_span * pw;
    let sy = |y: f64| mt + (y_max - y) / (y_max - y_min) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        ml + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let fx = x_min + x_span * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.1}</text>"#,
            ml - 6.0,
            sy(fy) + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            sx(fx as u64),
            mt + ph + 18.0,
            fx as u64
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#,
        ml + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">normalized score</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    for (i, (label, band)) in bands.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if band.is_empty() {
            continue;
        }
        let stair = |f: &dyn Fn(&BandPoint) -> f64| -> Vec<(f64, f64)> {
            let mut v = Vec::new();
            for (k, b) in band.iter().enumerate() {
                if k > 0 {
                    v.push((sx(b.env_steps), sy(f(&band[k - 1]))));
                }
                v.push((sx(b.env_steps), sy(f(b))));
            }
            v
        };
        let upper = stair(&|b| b.mean + b.std);
        let lower = stair(&|b| b.mean - b.std);
        let poly: Vec<String> = upper
            .iter()
            .chain(lower.iter().rev())
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            poly.join(" ")
        );
        let line: Vec<String> = stair(&|b| b.mean)
            .iter()
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = mt + 14.0 + 18.0 * i as f64;
        let lx = ml + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `plot_<layout>.svg` and `plot_<layout>.csv` into `dir`.
pub fn emit_plots(curves: &[LearningCurve], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let first = curves
        .first()
        .ok_or_else(|| Error::invalid("no curves to plot"))?;
    if let Some(other) = curves.iter().find(|c| c.layout_name != first.layout_name) {
        return Err(Error::invalid(format!(
            "curves mix layouts `{}` and `{}`",
            first.layout_name, other.layout_name
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bands = aggregate_curves(curves);
    let svg_path = dir.join(format!("plot_{}.svg", first.layout_name));
    let csv_path = dir.join(format!("plot_{}.csv", first.layout_name));
    fs::write(&svg_path, render_svg(&bands, &first.layout_name)).map_err(|e| Error::io(&svg_path, e))?;
    fs::write(&csv_path, band_csv(&bands)).map_err(|e| Error::io(&csv_path, e))?;
    Ok((svg_path, csv_path))
}

pub fn read_curves_csv(text: &str, layout_name: &str) -> Result<Vec<LearningCurve>> {
    let mut curves: Vec<LearningCurve> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Parse {
            location: format!("curves line {}", i + 1),
            message: m.to_string(),
        };
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let seed: u64 = f[1].parse().map_err(|_| bad("bad seed"))?;
        let steps: u64 = f[2].parse().map_err(|_| bad("bad env_steps"))?;
        let score: f64 = f[3].parse().map_err(|_| bad("bad score"))?;
        let pos = curves
            .iter()
            .position(|c| c.method_label == f[0] && c.seed == seed);
        let curve = match pos {
            Some(p) => &mut curves[p],
            None => {
                curves.push(LearningCurve::new(f[0], seed, layout_name));
                curves.last_mut().unwrap()
            }
        };
        curve.push(steps, score).map_err(|e| bad(&e.to_string()))?;
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn curve(label: &str, seed: u64, pts: &[(u64, f64)]) -> LearningCurve {
        let mut c = LearningCurve::new(label, seed, "large");
        for &(s, v) in pts {
            c.push(s, v).unwrap();
        }
        c
    }

    #[test]
    fn normalize_anchors_and_midpoint() {
        let r = ReferenceScores::new(2.0, 12.0, "x").unwrap();
        assert_eq!(normalize(2.0, &r).unwrap(), 0.0);
        assert_eq!(normalize(12.0, &r).unwrap(), 100.0);
        assert_eq!(normalize(7.0, &r).unwrap(), 50.0);
        assert!(ReferenceScores::new(3.0, 3.0, "x").is_err());
    }

    #[test]
    fn reduction_examples() {
        let base = curve("ft", 0, &[(2000, 10.0), (8000, 50.0), (10000, 40.0)]);
        let act = curve("active", 0, &[(2000, 50.0), (8000, 60.0)]);
        assert_eq!(interaction_reduction(&act, &base).unwrap(), Reduction::Percent(75.0));
        assert_eq!(interaction_reduction(&base, &base).unwrap(), Reduction::Percent(0.0));
        let flat = curve("active", 0, &[(2000, 10.0), (8000, 49.0)]);
        assert_eq!(interaction_reduction(&flat, &base).unwrap(), Reduction::Inconclusive);
    }

    #[test]
    fn reduction_sign_flips_when_swapped() {
        let a = curve("a", 0, &[(1000, 5.0), (2000, 20.0), (3000, 20.0)]);
        let b = curve("b", 0, &[(1000, 5.0), (2000, 10.0), (3000, 20.0)]);
        let ab = interaction_reduction(&a, &b).unwrap();
        let ba = interaction_reduction(&b, &a).unwrap();
        match (ab, ba) {
            (Reduction::Percent(x), Reduction::Percent(y)) => {
                assert!(x > 0.0 && y < 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aggregation_never_extrapolates() {
        let c1 = curve("m", 0, &[(100, 1.0), (200, 3.0), (300, 5.0)]);
        let c2 = curve("m", 1, &[(100, 3.0), (250, 5.0)]);
        let bands = aggregate_curves(&[c1, c2]);
        let band = &bands["m"];
        assert_eq!(band.iter().map(|b| b.env_steps).collect::<Vec<_>>(), vec![100, 200, 250]);
        assert_eq!(band[0].mean, 2.0);
        assert_eq!(band[1].mean, 3.0);
        assert_eq!(band[2].mean, 4.0);
    }

    #[test]
    fn single_seed_band_is_flat_and_svg_parses() {
        let c = curve("m", 0, &[(100, 1.0), (200, 3.0)]);
        let bands = aggregate_curves(std::slice::from_ref(&c));
        assert!(bands["m"].iter().all(|b| b.std == 0.0));
        let dir = tempfile::tempdir().unwrap();
        let other = curve("n <&>", 2, &[(100, 2.0), (200, 0.5)]);
        let (svg, csv) = emit_plots(&[c.clone(), other], dir.path()).unwrap();
        let text = fs::read_to_string(svg).unwrap();
        roxmltree::Document::parse(&text).unwrap();
        assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 1 + 4);
        let mut mixed = c.clone();
        mixed.layout_name = "umaze".into();
        assert!(emit_plots(&[c, mixed], dir.path()).is_err());
    }

    #[test]
    fn curves_csv_round_trip() {
        let cs = vec![
            curve("a", 0, &[(100, 1.5), (200, -0.25)]),
            curve("b", 3, &[(100, 0.1)]),
        ];
        let back = read_curves_csv(&curves_csv(&cs), "large").unwrap();
        assert_eq!(back, cs);
    }

    #[test]
    fn curve_steps_must_increase() {
        let mut c = curve("a", 0, &[(100, 1.0)]);
        assert!(c.push(100, 2.0).is_err());
    }

    #[test]
    fn evaluation_is_reproducible_and_zero_policy_scores_nothing() {
        struct Still;
        impl Controller for Still {
            fn name(&self) -> &str {
                "still"
            }
            fn begin_episode(&mut self, _: &MazeSpec, _: &env::EnvState, _: &mut Rng) {}
            fn act(&mut self, _: &MazeSpec, _: &env::EnvState, _: &mut Rng) -> [f64; 2] {
                [0.0, 0.0]
            }
        }
        let spec = MazeSpec::parse_layout("room", "#######\n#.....#\n#.....#\n#....G#\n#######").unwrap();
        let refs = ReferenceScores::new(0.0, 100.0, "room").unwrap();
        let a = evaluate(&spec, &mut Still, 5, &refs, &mut rng::from_seed(3)).unwrap();
        let b = evaluate(&spec, &mut Still, 5, &refs, &mut rng::from_seed(3)).unwrap();
        assert_eq!(a, b);
        let far = MazeSpec::parse_layout("strip", "##########\n#.......G#\n##########").unwrap();
        let mut s = env::EnvState::at([1.5, 1.5]);
        let mut total = 0.0;
        for _ in 0..far.max_episode_steps {
            let out = env::step(&far, &s, &[0.0, 0.0]).unwrap();
            total += out.reward;
            s = out.next;
        }
        assert_eq!(total, 0.0);
        let one = evaluate(&spec, &mut Still, 1, &refs, &mut rng::from_seed(3)).unwrap();
        assert_eq!(one.std_return, 0.0);
    }

    #[test]
    fn reference_scores_cache_round_trip() {
        let spec = MazeSpec::builtin("umaze").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.json");
        let a = ReferenceScores::cached(&spec, &path, 10, &mut rng::from_seed(0)).unwrap();
        assert!(a.expert_return > a.random_return);
        let b = ReferenceScores::cached(&spec, &path, 10, &mut rng::from_seed(99)).unwrap();
        assert_eq!(a, b);
        let c = compute_reference_scores(&spec, 10, &mut rng::from_seed(0)).unwrap();
        assert_eq!(a, c);
    }
}
