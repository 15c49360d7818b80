use std::fs;
use std::path::Path;

use hebbseed_core::autodiff::{backward, forward, Tape};
use hebbseed_core::data::{synth_textures, Dataset, TextureConfig};
use hebbseed_core::experiment::output::{self, run_to_dir};
use hebbseed_core::experiment::runner::{extract_features, load_data, pretrained_checkpoint, run_hpca_pretrain};
use hebbseed_core::experiment::{DatasetKind, ExperimentConfig, Method};
use hebbseed_core::layers::{ArchConfig, Network, NetworkSpec, ProbePoint};
use hebbseed_core::sgd::{cross_entropy, Schedule, Sgd, SgdConfig};
use hebbseed_core::{Rng, Tensor};

fn tiny(output: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetKind::Textures,
        train_subset: 120,
        test_subset: 30,
        regimes: vec![10.0, 50.0],
        seeds: vec![0, 1],
        methods: vec![Method::Bp, Method::Hpca, Method::HpcaFt],
        probes: vec![ProbePoint::L2, ProbePoint::Final],
        epochs: 2,
        ft_epochs: 1,
        hebbian_epochs: 1,
        width_divisor: 16,
        output_dir: output.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn reruns_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = tiny(a.path());
    let data = load_data(&cfg_a).unwrap();
    let (dir_a, _) = run_to_dir(&cfg_a, &data).unwrap();
    let (dir_b, _) = run_to_dir(&tiny(b.path()), &data).unwrap();
    assert_eq!(dir_a.file_name(), dir_b.file_name(), "run id depends only on the configuration");
    for name in [output::RECORDS, output::CELLS, output::HEBBIAN, output::TABLE_CSV] {
        assert_eq!(fs::read(dir_a.join(name)).unwrap(), fs::read(dir_b.join(name)).unwrap(), "{name} differs");
    }
    for seed in [0, 1] {
        let ck = format!("{}/seed-{seed}.bin", output::CKPT_DIR);
        assert_eq!(fs::read(dir_a.join(&ck)).unwrap(), fs::read(dir_b.join(&ck)).unwrap(), "{ck} differs");
    }
    let records = output::load_records(&dir_a).unwrap();
    assert!(records.iter().all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.val_acc)));
}

#[test]
fn labels_do_not_reach_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let pool = load_data(&cfg).unwrap().pool;
    let mut rng = Rng::new(99);
    let scrambled: Vec<usize> = pool.labels.iter().map(|_| rng.below(pool.num_classes)).collect();
    let relabeled = Dataset::new("relabeled", pool.images.clone(), scrambled, pool.num_classes).unwrap();
    let bytes = |ds: &Dataset| {
        let (net, pre) = run_hpca_pretrain(&cfg, ds, 5).unwrap();
        pretrained_checkpoint(&net, &pre).to_bytes()
    };
    assert_eq!(bytes(&pool), bytes(&relabeled));
}

#[test]
fn one_batch_is_memorized() {
    let data = synth_textures(64, &TextureConfig::default(), 3, 0).unwrap();
    let mut arch = ArchConfig::scaled(10, 8);
    arch.dropout = 0.0;
    let mut net = Network::new(NetworkSpec::five_block(&arch), &mut Rng::new(1)).unwrap();
    let sgd = SgdConfig { lr0: 0.05, momentum: 0.9, nesterov: true, l2: 0.0, schedule: Schedule::Constant };
    let mut opt = Sgd::new(sgd, net.params());
    let mut rng = Rng::new(2);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let mut tape = Tape::new();
        let logits = forward(net.layers_mut(), &data.images, &mut rng, &mut tape, true).unwrap();
        let (l, dlogits) = cross_entropy(&logits, &data.labels).unwrap();
        loss = l;
        let grads = backward(net.layers(), &tape, dlogits).unwrap();
        let flat = grads.into_flat();
        let refs: Vec<&Tensor> = flat.iter().collect();
        opt.step(&mut net.params_mut(), &refs, 0).unwrap();
    }
    assert!(loss < 0.01, "loss after 200 steps: {loss}");
}

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_l3.txt");

/// L3 features of four test images after one Hebbian epoch on a small pool.
/// `HEBBSEED_BLESS=1` rewrites the fixture.
#[test]
fn golden_l3_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { train_subset: 60, test_subset: 4, ..tiny(dir.path()) };
    let data = load_data(&cfg).unwrap();
    let (net, _) = run_hpca_pretrain(&cfg, &data.pool, 0).unwrap();
    let feats = extract_features(&net, &data.test.images, ProbePoint::L3).unwrap();
    if std::env::var_os("HEBBSEED_BLESS").is_some() {
        let text: Vec<String> = feats.data().iter().map(|v| format!("{v:e}")).collect();
        fs::create_dir_all(Path::new(GOLDEN).parent().unwrap()).unwrap();
        fs::write(GOLDEN, format!("{:?}\n{}\n", feats.shape(), text.join("\n"))).unwrap();
    }
    let text = fs::read_to_string(GOLDEN).expect("fixture missing; run with HEBBSEED_BLESS=1");
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("{:?}", feats.shape()));
    let expected: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
    assert_eq!(expected.len(), feats.len());
    for (i, (a, b)) in feats.data().iter().zip(&expected).enumerate() {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "feature {i}: {a} vs {b}");
    }
}
