use std::collections::BTreeSet;
use std::path::PathBuf;

use spt::checkpoint::Stage;
use spt::config::Config;
use spt::datagen::SampleKind;
use spt::pipeline;

fn main() {
    let mut cfg = Config::default();
    cfg.paths.run_dir = PathBuf::from("runs/dbg");
    let world = pipeline::load_world(&cfg, Stage::Phase3).unwrap();
    let dec = world.decoder(&cfg);
    let mut extra = 0usize;
    let mut missing = 0usize;
    let mut n = 0usize;
    let mut shown = 0;
    for s in world.test.iter().filter(|s| s.kind == SampleKind::Closed) {
        let out = dec.extract(&s.query).unwrap();
        let pred: BTreeSet<&str> = out.selected.iter().map(|x| x.as_str()).collect();
        let gold: BTreeSet<&str> = s.gold_schemas.iter().map(|x| x.as_str()).collect();
        extra += pred.difference(&gold).count();
        missing += gold.difference(&pred).count();
        n += 1;
        if pred != gold && shown < 6 {
            shown += 1;
            println!("q: {}\n  gold {:?}\n  pred {:?}", s.query, gold, pred);
        }
    }
    println!("closed n={n} extra={extra} missing={missing}");
}
