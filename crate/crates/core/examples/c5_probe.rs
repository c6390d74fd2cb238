use efcnet::config::ModelConfig;
use efcnet::dataio::{generate_dataset, SyntheticSpec};
use efcnet::train::{evaluate_model, train};
use std::time::Instant;

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let mut cfg = ModelConfig::desk();
    cfg.epochs = 50;
    cfg.seed = 7;
    cfg.lr = lr;
    let data = generate_dataset::<f64>(&SyntheticSpec::from_config(&cfg), 40).unwrap();
    let t0 = Instant::now();
    let out = train(&cfg, &data, None).unwrap();
    println!("lr {lr}: 50 epochs in {:?}", t0.elapsed());
    for e in &out.log.epochs {
        if e.epoch == 1 || e.epoch % 10 == 0 {
            println!("epoch {:>3}: loss {:.4}  val_dsc {:.4}", e.epoch, e.total_loss, e.val_dsc);
        }
    }
    let set: Vec<_> = data.iter().collect();
    let final_train = evaluate_model(&out.model, &set, None, "final").unwrap();
    println!("final train-set DSC {:.4} IoU {:.4}", final_train.mean_dsc, final_train.mean_iou);
    println!("loss ratio: {:.4}", out.log.epochs.last().unwrap().total_loss / out.log.epochs[0].total_loss);
}
