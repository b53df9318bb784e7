// Scratch pilot for the masked-vs-pooling ordering run. Not part of the
// product; exists to measure accuracy and wall time at candidate
// hyperparameters before they are baked into the defaults.

use std::time::Instant;

use maskcnn::dataio::{generate_synthetic_dataset, Split, SynthConfig};
use maskcnn::image::RgbImage;
use maskcnn::maskgen::{build_label_map, LabelMap};
use maskcnn::mcnn::{
    finetune_stream, joint_train, prepare_training_set, save_backbone, McnnConfig, McnnModel,
    StreamKind, Variant,
};
use maskcnn::metrics::mean_iu;
use maskcnn::segnet::{train_fcn, FcnConfig, FcnModel};
use maskcnn::tensor::{Labels, SgdConfig, Tensor};

fn epoch_means(losses: &[f64], steps_per_epoch: usize) -> String {
    losses
        .chunks(steps_per_epoch)
        .map(|c| format!("{:.3}", c.iter().sum::<f64>() / c.len() as f64))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let ft_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let joint_epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);
    eprintln!("== seed {seed} ft {ft_epochs} joint {joint_epochs} lr {lr} batch {batch} ==");

    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let manifest = generate_synthetic_dataset(&synth, dir.path()).unwrap();
    eprintln!("[{:>6.1}s] dataset", t0.elapsed().as_secs_f64());

    // FCN on ground-truth maps from the train split.
    let fcn_cfg = FcnConfig {
        seed,
        ..FcnConfig::default()
    };
    let mut fcn = FcnModel::build(fcn_cfg).unwrap();
    let train_data: Vec<(Tensor<f32>, Labels)> = manifest
        .split_records(Split::Train)
        .map(|rec| {
            let img = RgbImage::read_ppm(&manifest.image_path(rec)).unwrap();
            let map = build_label_map(&rec.keypoints, synth.size, synth.size).unwrap();
            (img.to_tensor(), map.to_labels())
        })
        .collect();
    let sgd = SgdConfig::new(0.03, 0.9, 1e-4).unwrap();
    train_fcn(&mut fcn, &train_data, &sgd, 12, 4).unwrap();
    eprintln!("[{:>6.1}s] fcn trained", t0.elapsed().as_secs_f64());

    // Predicted maps for both splits.
    let predict_items = |split: Split| -> Vec<(RgbImage, LabelMap, usize)> {
        manifest
            .split_records(split)
            .map(|rec| {
                let img = RgbImage::read_ppm(&manifest.image_path(rec)).unwrap();
                let (map, _) = fcn.predict(&img.to_tensor()).unwrap();
                (img, map, rec.label)
            })
            .collect()
    };
    let train_items = predict_items(Split::Train);
    let test_items = predict_items(Split::Test);
    eprintln!("[{:>6.1}s] masks predicted", t0.elapsed().as_secs_f64());

    // FCN quality on the test split: predicted maps vs ground truth.
    {
        let pred: Vec<LabelMap> = test_items.iter().map(|(_, m, _)| m.clone()).collect();
        let truth: Vec<LabelMap> = manifest
            .split_records(Split::Test)
            .map(|rec| build_label_map(&rec.keypoints, synth.size, synth.size).unwrap())
            .collect();
        let report = mean_iu(&pred, &truth, 3).unwrap();
        eprintln!(
            "[{:>6.1}s] fcn test mean IU {:.3} (per-class {:?})",
            t0.elapsed().as_secs_f64(),
            report.mean_iu,
            report
                .per_class
                .iter()
                .map(|v| (v * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        );
    }

    let mcfg = McnnConfig {
        seed,
        ..McnnConfig::default()
    };
    let samples = prepare_training_set(&mcfg, &train_items).unwrap();
    eprintln!(
        "[{:>6.1}s] {} samples prepared",
        t0.elapsed().as_secs_f64(),
        samples.len()
    );

    let sgd = SgdConfig::new(lr, 0.9, 1e-4).unwrap();
    for variant in [Variant::Masked, Variant::Pooling] {
        let tv = Instant::now();
        let mut model = McnnModel::build(mcfg.clone(), variant).unwrap();
        let steps_per_epoch = samples.len().div_ceil(batch);
        for kind in StreamKind::ALL {
            let (tuned, curve) =
                finetune_stream(&mcfg, variant, kind, &samples, &sgd, ft_epochs, batch).unwrap();
            let path = dir.path().join(format!("{}.{}.mcnn", variant.as_str(), kind.as_str()));
            save_backbone(&tuned, &path).unwrap();
            model.adopt_backbone(&path).unwrap();
            eprintln!(
                "[{:>6.1}s] {} {} finetune epochs: {}",
                t0.elapsed().as_secs_f64(),
                variant.as_str(),
                kind.as_str(),
                epoch_means(&curve.step_losses, steps_per_epoch)
            );
        }
        let curve = joint_train(&mut model, &samples, &sgd, joint_epochs, batch).unwrap();
        eprintln!(
            "[{:>6.1}s] {} joint epochs: {}",
            t0.elapsed().as_secs_f64(),
            variant.as_str(),
            epoch_means(&curve.step_losses, steps_per_epoch)
        );
        let train_acc = model.accuracy(&train_items).unwrap();
        let test_acc = model.accuracy(&test_items).unwrap();
        println!(
            "seed {seed} {}: train {:.2}% test {:.2}% ({:.0}s)",
            variant.as_str(),
            100.0 * train_acc,
            100.0 * test_acc,
            tv.elapsed().as_secs_f64()
        );
    }
    eprintln!("[{:>6.1}s] done", t0.elapsed().as_secs_f64());
}
