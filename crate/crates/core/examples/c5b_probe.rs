use efcnet::config::ModelConfig;
use efcnet::dataio::{generate_dataset, SyntheticSpec};
use efcnet::train::{evaluate_model, train};

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let flips: bool = std::env::args().nth(2).map(|s| s == "flips").unwrap_or(false);
    let mut cfg = ModelConfig::desk();
    cfg.epochs = 50;
    cfg.seed = 7;
    cfg.lr = lr;
    cfg.augment_hflip = flips;
    let data = generate_dataset::<f64>(&SyntheticSpec::from_config(&cfg), 40).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    let set: Vec<_> = data.iter().collect();
    let final_train = evaluate_model(&out.model, &set, None, "final").unwrap();
    println!(
        "lr {} flips {}: loss ratio {:.4}, final train DSC {:.4}",
        lr,
        flips,
        out.log.epochs.last().unwrap().total_loss / out.log.epochs[0].total_loss,
        final_train.mean_dsc
    );
}
