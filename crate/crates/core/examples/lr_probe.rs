use efcnet::config::ModelConfig;
use efcnet::dataio::{generate_dataset, SyntheticSpec};
use efcnet::train::train;

fn main() {
    for lr in [0.05, 0.2, 0.5, 1.0] {
        let mut cfg = ModelConfig::desk();
        cfg.epochs = 10;
        cfg.seed = 7;
        cfg.lr = lr;
        let data = generate_dataset::<f64>(&SyntheticSpec::from_config(&cfg), 40).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        let first = &out.log.epochs[0];
        let last = out.log.epochs.last().unwrap();
        println!(
            "lr {:>5}: epoch1 loss {:.4} -> epoch10 loss {:.4} (ratio {:.3}), val_dsc {:.4}",
            lr, first.total_loss, last.total_loss, last.total_loss / first.total_loss, last.val_dsc
        );
    }
}
