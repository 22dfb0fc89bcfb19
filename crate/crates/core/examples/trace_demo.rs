use std::path::PathBuf;
use vilp_core::harness::*;
use vilp_core::planner::{Conditioning, MultiviewPlanner};
use vilp_core::policy::ActionPolicy;
use vilp_core::diffusion::SamplerConfig;

fn main() {
    let t_all = std::time::Instant::now();
    let dir = PathBuf::from("/tmp/vilp-pilot");
    std::fs::create_dir_all(&dir).unwrap();
    let mut cfg = StackConfig::toy_default();
    cfg.planner_steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1600);
    cfg.policy_steps = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let eval_eps: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(20);

    let ds = dir.join("ds");
    if !ds.join("manifest.json").exists() {
        let t = std::time::Instant::now();
        generate_demos(&ds, &cfg.env, 200, 0.08, 0, false).unwrap();
        println!("demos: {:.0}s", t.elapsed().as_secs_f64());
    }
    let handle = vilp_core::dataset::DatasetHandle::open(&ds).unwrap();
    let (train_ids, _test) = handle.split_episodes(0.9, 0).unwrap();

    let t = std::time::Instant::now();
    let ae = train_autoencoders_cached(&handle, &cfg, &dir.join("work"), 0, false).unwrap();
    println!("autoencoders ready: {:.0}s", t.elapsed().as_secs_f64());

    let t = std::time::Instant::now();
    let planner_path = train_planner_cached(&handle, &train_ids, &cfg, Conditioning::CrossAttention, &ae, &dir.join("work"), 0, false).unwrap();
    println!("planner: {:.0}s", t.elapsed().as_secs_f64());

    let t = std::time::Instant::now();
    let policy_path = train_policy_cached(&handle, &train_ids, &cfg, &dir.join("work"), "main", 0, false).unwrap();
    println!("policy: {:.0}s", t.elapsed().as_secs_f64());

    let planner = MultiviewPlanner::load(&planner_path).unwrap();
    let policy = ActionPolicy::load(&policy_path).unwrap();
    let sampler = SamplerConfig::evenly_spaced(cfg.planner.k_max, 8).unwrap();
    let t = std::time::Instant::now();
    let table = evaluate_success(&planner, &policy, &cfg.controller, &cfg.env, &[0], eval_eps, Some(&sampler)).unwrap();
    println!("eval {:.0}s: success {:.2} over {} episodes", t.elapsed().as_secs_f64(), table.mean, eval_eps);
    println!("total {:.0}s", t_all.elapsed().as_secs_f64());
}
