use hsrkan::degradation::{make_dataset, DatasetConfig, SpectralResponse, Split};
use hsrkan::trainer::{self, mean_psnr, Checkpoint, CSV_HEADER};
use hsrkan::{ModelConfig, TrainConfig};
use tempfile::TempDir;

fn small() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig { hsi_bands: 10, hidden: 6, blocks: 1, seed: 4, ..ModelConfig::desk() };
    let train = TrainConfig { batch_size: 2, epochs: 4, eval_every: 2, seed: 4, ..Default::default() };
    (model, train)
}

fn data() -> (Vec<hsrkan::degradation::Sample>, Vec<hsrkan::degradation::Sample>) {
    let cfg = DatasetConfig { hsi_bands: 10, size: 16, scale: 4, endmembers: 3 };
    let r = SpectralResponse::default_rgb(10).unwrap();
    (
        make_dataset(2, 4, &cfg, &r, Split::Train).unwrap(),
        make_dataset(2, 2, &cfg, &r, Split::Val).unwrap(),
    )
}

#[test]
fn log_has_one_row_per_step_and_periodic_validation() {
    let (train, val) = data();
    let (m, t) = small();
    let mut csv = Vec::new();
    let out = trainer::train(m, t, &train, &val, Some(&mut csv)).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], CSV_HEADER);
    assert_eq!(rows.len(), 1 + 8);
    assert_eq!(out.log.len(), 8);
    let validated: Vec<u64> = out.log.iter().filter(|r| r.val_psnr.is_some()).map(|r| r.epoch).collect();
    // Rows carry the epoch their step belonged to; validation follows
    // the last step of epochs 2 and 4.
    assert_eq!(validated, [1, 3]);
    for r in &out.log {
        assert!(r.total.is_finite() && r.sparse_l1 >= 0.0 && r.sparse_entropy >= 0.0);
        assert!((r.total - r.l1 - r.sparse_l1 - r.sparse_entropy).abs() < 1e-12);
    }
    assert!(out.val_report.is_some());
}

#[test]
fn resume_from_file_matches_uninterrupted_run() {
    let (train, val) = data();
    let (m, t) = small();
    let full = trainer::train(m.clone(), t.clone(), &train, &[], None).unwrap();

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("half.hsrk");
    let half = trainer::train(m, TrainConfig { epochs: 2, ..t }, &train, &[], None).unwrap();
    half.checkpoint.save(&path).unwrap();
    let mut ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    ckpt.train.epochs = 4;
    let rest = trainer::resume(ckpt, &train, &[], None).unwrap();

    let tail: Vec<_> = full.log[4..].iter().map(|r| r.total.to_bits()).collect();
    let resumed: Vec<_> = rest.log.iter().map(|r| r.total.to_bits()).collect();
    assert_eq!(tail, resumed);
    assert_eq!(rest.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
    assert_eq!(
        mean_psnr(Some(&rest.checkpoint.model), &val, 4).unwrap(),
        mean_psnr(Some(&full.checkpoint.model), &val, 4).unwrap()
    );
}

#[test]
fn trained_model_beats_upsampling_on_its_training_data() {
    let (train, _) = data();
    let (m, t) = small();
    let out = trainer::train(
        ModelConfig { hidden: 16, ..m },
        TrainConfig { epochs: 60, sparse_loss_enabled: false, ..t },
        &train,
        &[],
        None,
    )
    .unwrap();
    let model = mean_psnr(Some(&out.checkpoint.model), &train, 4).unwrap();
    let base = mean_psnr(None, &train, 4).unwrap();
    assert!(model > base, "model {model:.2} dB vs upsampling {base:.2} dB");
}
