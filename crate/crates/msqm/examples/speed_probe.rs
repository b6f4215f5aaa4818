use msqm::config::TrainConfig;
use msqm::data::BackgroundMode;
use msqm::model::DecodeMode;
use msqm::train::train;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = if args.get(1).map(|s| s == "baseline").unwrap_or(false) { DecodeMode::Baseline } else { DecodeMode::Ours };
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let mut cfg = TrainConfig::default();
    cfg.mode = mode;
    cfg.epochs = epochs;
    cfg.train_clips = 24;
    cfg.n_objects = 3;
    cfg.background = BackgroundMode::SlowDrift;
    let dir = std::env::temp_dir().join(format!("msqm_long_{mode:?}"));
    let report = train(&cfg, &dir).unwrap();
    for e in &report.epochs {
        println!("{mode:?} epoch {:2}  loss {:.4}  val {:.4}", e.epoch, e.loss, e.val_miou);
    }
}
