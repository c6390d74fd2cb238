use efcnet::config::ModelConfig;
use efcnet::dataio::{generate_dataset, SyntheticSpec};
use efcnet::train::{evaluate_model, train};
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut cfg = ModelConfig::desk();
    cfg.epochs = epochs;
    cfg.seed = 7;
    let data = generate_dataset::<f64>(&SyntheticSpec::from_config(&cfg), 40).unwrap();
    let t0 = Instant::now();
    let out = train(&cfg, &data, None).unwrap();
    println!("trained {} epochs in {:?}", epochs, t0.elapsed());
    for e in &out.log.epochs {
        if e.epoch == 1 || e.epoch % 5 == 0 || e.epoch == epochs {
            println!("epoch {:>3}: loss {:.4}  val_dsc {:.4}  val_iou {:.4}", e.epoch, e.total_loss, e.val_dsc, e.val_iou);
        }
    }
    let set: Vec<_> = data.iter().collect();
    let final_train = evaluate_model(&out.model, &set, None, "final").unwrap();
    println!("final model train-set DSC {:.4} IoU {:.4}", final_train.mean_dsc, final_train.mean_iou);
    println!("loss ratio final/epoch1: {:.4}", out.log.epochs.last().unwrap().total_loss / out.log.epochs[0].total_loss);
}
