use std::path::PathBuf;

use spt::checkpoint::{self, Stage};
use spt::config::Config;
use spt::datagen::{self, SampleKind};
use spt::model::forward;
use spt::registry::SchemaPool;
use spt::trainer::prompt_prefix_ids;

// Test-set ranking diagnostic: where does each gold schema land in the
// first-position ranking, split by gold index?
fn main() {
    let mut cfg = Config::default();
    cfg.paths.run_dir = PathBuf::from("runs/dbg");
    let pool = SchemaPool::load(&cfg.paths.pool()).unwrap();
    let test = datagen::read_jsonl(&cfg.paths.test()).unwrap();
    let (params, vocab, _) = checkpoint::load(&cfg.paths.checkpoint(Stage::Phase3)).unwrap();

    let mut hist = vec![vec0(); 4];
    fn vec0() -> Vec<usize> {
        Vec::new()
    }
    let base = vocab.base_len();
    let n = vocab.n_schemas();
    for s in test.iter().filter(|s| s.kind == SampleKind::Closed) {
        let ids = prompt_prefix_ids(&vocab, &s.query);
        let fwd = forward(&params, &ids, Some(&[ids.len() - 1])).unwrap();
        let row = fwd.logits.row(ids.len() - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[base + b].partial_cmp(&row[base + a]).unwrap());
        for (gi, name) in s.gold_schemas.iter().enumerate() {
            let si = pool.index_of(name).unwrap();
            let rank = order.iter().position(|&x| x == si).unwrap();
            hist[gi.min(3)].push(rank);
        }
    }
    for (gi, ranks) in hist.iter().enumerate() {
        if ranks.is_empty() {
            continue;
        }
        let in5 = ranks.iter().filter(|&&r| r < 5).count();
        let mean = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
        println!(
            "gold[{}]: n {}  in-top5 {:.3}  mean rank {:.2}",
            gi,
            ranks.len(),
            in5 as f64 / ranks.len() as f64,
            mean
        );
    }
}
