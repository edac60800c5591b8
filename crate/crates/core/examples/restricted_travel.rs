//! Build the state graph of a medium-maze dataset, cluster it with Louvain,
//! train the goal-conditioned travel policy and route toward a far state.

use aorl::data;
use aorl::env::{self, EnvState, MazeSpec};
use aorl::offline::OfflineConfig;
use aorl::planner::WaypointPlanner;
use aorl::restricted::{self, RestrictedConfig, TravelPlan};
use aorl::rng;

fn main() -> aorl::Result<()> {
    let spec = MazeSpec::builtin("medium")?;
    let mut behavior = WaypointPlanner::behavior(&spec, 0.2)?;
    let d = data::collect_behavior_dataset(&spec, &mut behavior, 10_000, &mut rng::stream(0, "data"))?;
    let cfg = RestrictedConfig {
        max_nodes: 600,
        goal_steps: 4_000,
        ..Default::default()
    };
    let offline_cfg = OfflineConfig::default();
    let mut r = rng::stream(0, "restricted");

    let graph = restricted::build_state_graph(&d, cfg.max_nodes, cfg.edge_threshold, &mut r)?;
    let clustering = restricted::louvain(&graph, &mut r)?;
    println!(
        "{} nodes, {} edges, {} clusters, modularity {:.3}",
        graph.n_nodes(),
        graph.edges.len(),
        clustering.n_clusters(),
        clustering.modularity
    );
    let recomputed = restricted::modularity(&graph, &clustering.assignment);
    println!("recomputed modularity {recomputed:.3}");

    let plan = TravelPlan::build(&d, spec.max_force, &cfg, &offline_cfg, &mut r)?;
    let target = EnvState::at(spec.goal);
    let cluster = plan.nearest_cluster(&target);
    let mut s = env::reset(&spec, &mut r);
    let start = s.position;
    let mut closest = env::dist(start, spec.goal);
    for _ in 0..cfg.stage_cap {
        let waypoint = plan.waypoint_for(&target, &mut r)?;
        let a = plan.goal_policy.act(&s.obs(), waypoint)?;
        s = env::step(&spec, &s, &a)?.next;
        closest = closest.min(env::dist(s.position, spec.goal));
        if closest <= cfg.switch_radius {
            break;
        }
    }
    println!(
        "target cluster {cluster}: started {:.2} from the goal, came within {closest:.2}",
        env::dist(start, spec.goal)
    );
    Ok(())
}
