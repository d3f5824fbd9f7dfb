use std::path::PathBuf;
use std::time::Instant;

use spt::checkpoint::Stage;
use spt::config::Config;
use spt::pipeline;
use spt::trainer::Phase;

// Quick end-to-end run with the default config into a scratch run dir,
// printing per-stage metrics and retrieval numbers.
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = Config::default();
    cfg.paths.run_dir = PathBuf::from("runs/dbg");
    if epochs > 0 {
        cfg.train.pretrain.epochs = epochs;
    }
    let t0 = Instant::now();
    pipeline::gen_data(&cfg).unwrap();
    println!("gen-data {:?}", t0.elapsed());

    let t = Instant::now();
    let recs = pipeline::pretrain(&cfg).unwrap();
    for r in &recs {
        println!("{} e{} loss {:.4} {:?}", r.phase, r.epoch, r.loss, r.metrics);
    }
    println!("pretrain {:?}", t.elapsed());

    for phase in [Phase::P1, Phase::P2, Phase::P3] {
        let t = Instant::now();
        let recs = pipeline::train_phase(&cfg, phase).unwrap();
        for r in &recs {
            println!("{} e{} loss {:.4} {:?}", r.phase, r.epoch, r.loss, r.metrics);
        }
        println!("{} {:?}", phase.label(), t.elapsed());
    }

    let t = Instant::now();
    let report = pipeline::evaluate(&cfg, "retrieval").unwrap();
    println!("retrieval {:?}\n{}", t.elapsed(), report.render_table());
    let report = pipeline::evaluate(&cfg, "extraction").unwrap();
    println!("{}", report.render_table());
    let report = pipeline::evaluate(&cfg, "generation").unwrap();
    println!("{}", report.render_table());
    let _ = Stage::Phase3;
    println!("total {:?}", t0.elapsed());
}
