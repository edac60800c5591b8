//! Train the contrastive ensemble on a pruned large-maze dataset and compare
//! uncertainty inside the pruned disc with uncertainty on covered states.

use rand::Rng as _;

use aorl::data;
use aorl::env::{self, MazeSpec, ACT_DIM, OBS_DIM};
use aorl::planner::WaypointPlanner;
use aorl::repr::{self, Aggregator, ReprConfig, RepresentationEnsemble};
use aorl::rng;

fn main() -> aorl::Result<()> {
    let spec = MazeSpec::builtin("large")?;
    let radius = 3.0;
    let mut behavior = WaypointPlanner::behavior(&spec, 0.2)?;
    let full = data::collect_behavior_dataset(&spec, &mut behavior, 30_000, &mut rng::stream(0, "data"))?;
    let d0 = data::prune_near_goal(&full, spec.goal, radius)?;
    let cfg = ReprConfig::default();
    let mut e = RepresentationEnsemble::new(OBS_DIM, ACT_DIM, &cfg, 0)?;
    repr::train_ensemble(&mut e, &d0, cfg.train_steps, cfg.batch_size, &mut rng::stream(0, "repr"))?;

    let mut r = rng::stream(0, "probe");
    let mut inside = Vec::new();
    while inside.len() < 500 * OBS_DIM {
        let s = env::reset(&spec, &mut r);
        if env::dist(s.position, spec.goal) <= radius {
            inside.extend(s.obs());
        }
    }
    let mut covered = Vec::new();
    for _ in 0..500 {
        let t = &d0.transitions[r.gen_range(0..d0.len())];
        covered.extend_from_slice(&t.obs);
    }
    for agg in Aggregator::ALL {
        let u_in = e.state_uncertainties(&inside, 500, agg)?;
        let u_cov = e.state_uncertainties(&covered, 500, agg)?;
        let (m_in, m_cov) = (mean(&u_in), mean(&u_cov));
        println!("{agg:>4}: pruned {m_in:.4}  covered {m_cov:.4}  ratio {:.2}", m_in / m_cov);
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
