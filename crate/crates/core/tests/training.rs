use autoalign::ablate::{ablate, rows, write_table, Axis};
use autoalign::cafa::FusionStrategy;
use autoalign::diagnostics::{dump_align_map, mass_in_box, pgm16};
use autoalign::geometry::Box2D;
use autoalign::gradcheck::{micro_run_config, micro_scene};
use autoalign::model::{batch_loss, is_image_side, Model, Prepared, RunConfig};
use autoalign::params::{Bound, OptimConfig, Optimizer, ParamStore};
use autoalign::scfi::ScfiVariant;
use autoalign::train::{evaluate, load_checkpoint, save_checkpoint, train_model};
use autoalign::AlignError;
use autoalign_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn scenes(n: usize, offset: u64) -> Vec<Prepared> {
    (0..n as u64).map(|i| micro_scene(offset + i).unwrap()).collect()
}

fn full_config() -> RunConfig {
    RunConfig {
        pair_score_threshold: 0.0,
        ..micro_run_config()
    }
}

#[test]
fn one_step_total_is_the_sum_of_components() {
    let cfg = full_config();
    let model = Model::new(cfg.clone()).unwrap();
    let data = scenes(2, 0);
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let batch: Vec<&Prepared> = data.iter().collect();
    let l = batch_loss(&p, &cfg, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = &l.breakdown;
    assert!(b.is_finite());
    assert_eq!(b.components().len(), 7);
    let sum: f64 = b.components().iter().sum();
    assert!((b.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    assert!(b.l3d_cls >= 0.0 && b.l3d_reg >= 0.0);
    let s = b.l_scfi.unwrap();
    assert!((-1.0..=1.0).contains(&s));
    tape.backward(l.total).unwrap();
    for (n, g) in p.grads(&model.params) {
        assert!(g.iter().all(|x| x.is_finite()), "{n}");
    }
}

#[test]
fn joint_2d_off_drops_the_2d_terms() {
    let cfg = RunConfig {
        joint_2d: false,
        ..full_config()
    };
    let model = Model::new(cfg.clone()).unwrap();
    assert!(model.params.names().all(|n| !n.starts_with("head2d.")));
    let data = scenes(1, 0);
    let tape = Tape::new();
    let p = Bound::new(&tape, &model.params);
    let l = batch_loss(&p, &cfg, &[&data[0]], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = &l.breakdown;
    assert!(b.l2d_rpn_cls.is_none() && b.l2d_rpn_reg.is_none() && b.l2d_rcnn_cls.is_none() && b.l2d_rcnn_reg.is_none());
    let json = serde_json::to_value(b).unwrap();
    assert!(json.get("l2d_rpn_cls").is_none());
}

#[test]
fn disabled_components_have_no_parameters() {
    let base = Model::new(RunConfig {
        fusion: FusionStrategy::None,
        scfi: ScfiVariant::Off,
        joint_2d: false,
        ..full_config()
    })
    .unwrap();
    for n in base.params.names() {
        assert!(
            n.starts_with("pts.") || n.starts_with("bev.") || n.starts_with("head3d"),
            "unexpected parameter {n}"
        );
    }
    let cafa = Model::new(RunConfig {
        scfi: ScfiVariant::Off,
        joint_2d: false,
        ..full_config()
    })
    .unwrap();
    assert!(cafa.params.names().all(|n| !n.starts_with("scfi.") && !n.starts_with("head2d.")));
    assert!(cafa.params.len() > base.params.len());
    let full = Model::new(full_config()).unwrap();
    assert!(full.params.names().any(|n| n.starts_with("scfi.pts.")));
    assert!(full.params.names().any(|n| n.starts_with("scfi.img.")));
    // the hybrid split sends image-side SCFI heads to the 2D optimizer
    let (pts, img) = full.param_groups();
    assert!(pts.iter().any(|n| n.starts_with("scfi.pts.")) && img.iter().any(|n| n.starts_with("scfi.img.")));
    assert!(img.iter().all(|n| is_image_side(n)));
}

#[test]
fn training_reduces_the_loss() {
    let cfg = RunConfig {
        steps: 300,
        optim_3d: OptimConfig::adamw(3e-3, 0.01),
        ..full_config()
    };
    let train = scenes(50, 100);
    let mut model = Model::new(cfg).unwrap();
    let report = train_model(&mut model, &train, &[]).unwrap();
    assert_eq!(report.losses.len(), 300);
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let mean = |s: &[autoalign::model::LossBreakdown]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&report.losses[..30]), mean(&report.losses[270..]));
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn training_is_deterministic() {
    let cfg = RunConfig {
        steps: 15,
        eval_every: 5,
        ..full_config()
    };
    let train = scenes(6, 0);
    let eval = scenes(3, 50);
    let mut a = Model::new(cfg.clone()).unwrap();
    let mut b = Model::new(cfg).unwrap();
    let ra = train_model(&mut a, &train, &eval).unwrap();
    let rb = train_model(&mut b, &train, &eval).unwrap();
    assert!(ra.same_results(&rb));
    assert_eq!(ra.evals.len(), 2);
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = RunConfig {
        steps: 5,
        ..full_config()
    };
    let train = scenes(4, 0);
    let eval = scenes(3, 50);
    let mut model = Model::new(cfg).unwrap();
    train_model(&mut model, &train, &eval).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(evaluate(&loaded, &eval).unwrap(), evaluate(&model, &eval).unwrap());
}

#[test]
fn truncated_checkpoint_fails_cleanly() {
    let model = Model::new(full_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let path = dir.path().join("tensors.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn optimizer_requires_every_gradient() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::zeros(&[2]));
    let mut opt = Optimizer::new(OptimConfig::sgd(0.1, 0.9));
    let err = opt.step(&mut store, &["a".into()], &BTreeMap::new());
    assert!(matches!(err, Err(AlignError::MissingGradient(n)) if n == "a"));
    // momentum accumulates across steps
    let g = BTreeMap::from([("a".to_string(), vec![1.0, 0.0])]);
    opt.step(&mut store, &["a".into()], &g).unwrap();
    opt.step(&mut store, &["a".into()], &g).unwrap();
    assert!((store.get("a").unwrap().data()[0] + 0.1 * (1.0 + 1.9)).abs() < 1e-15);
    assert_eq!(opt.steps(), 2);
}

#[test]
fn uniform_attention_mass_is_the_area_ratio() {
    let (h, w) = (4, 6);
    let row = vec![1.0 / 24.0; 24];
    for b in [
        Box2D::new(3.0, 5.0, 40.0, 30.0, 0).unwrap(),
        Box2D::new(0.0, 0.0, 48.0, 32.0, 0).unwrap(),
        Box2D::new(10.5, 7.25, 11.0, 31.0, 0).unwrap(),
    ] {
        let m = mass_in_box(&row, h, w, (48, 32), &b);
        assert!((m - b.area() / (48.0 * 32.0)).abs() < 1e-15);
    }
}

#[test]
fn pgm_export_spans_the_full_range() {
    let img = pgm16(&[0.1, 0.5, 0.3, 0.9], 2, 2);
    let header = b"P5\n2 2\n65535\n";
    assert_eq!(&img[..header.len()], header);
    let px: Vec<u16> = img[header.len()..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    assert_eq!(px, vec![0, 32768, 16384, 65535]);
    assert_eq!(*px.iter().max().unwrap(), 65535);
}

#[test]
fn align_dump_writes_maps_and_rejects_point_projection() {
    let s = micro_scene(3).unwrap();
    let model = Model::new(full_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dump = dump_align_map(&model, &s, dir.path(), None, 2, 0).unwrap();
    assert!(!dump.voxels.is_empty());
    for v in &dump.voxels {
        assert!(dir.path().join(&v.file).exists());
        assert!((0.0..=1.0 + 1e-12).contains(&v.attention_mass));
    }
    assert!(dir.path().join("align_stats.json").exists());
    let pp = Model::new(RunConfig {
        fusion: FusionStrategy::PointProj,
        ..full_config()
    })
    .unwrap();
    assert!(matches!(
        dump_align_map(&pp, &s, dir.path(), None, 2, 0),
        Err(AlignError::UnsupportedDiagnostic(_))
    ));
}

#[test]
fn ablation_rows_and_table() {
    let base = full_config();
    let labels: Vec<String> = rows(&base, Axis::Components).into_iter().map(|r| r.0).collect();
    assert_eq!(labels, ["baseline", "+cafa", "+cafa+scfi", "+all"]);
    let losses: Vec<ScfiVariant> = rows(&base, Axis::Loss).into_iter().map(|r| r.1.scfi).collect();
    assert_eq!(losses, [ScfiVariant::Nce, ScfiVariant::Infonce, ScfiVariant::CePos, ScfiVariant::NcsPos]);
    let cfg = RunConfig { steps: 2, ..base };
    let dir = tempfile::tempdir().unwrap();
    let table = ablate(&cfg, Axis::Components, &[0, 1, 2], &scenes(3, 0), &scenes(2, 50), Some(dir.path())).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.runs.len() == 3 && r.runs.iter().all(|s| s.finite)));
    assert!(table.rows[0].mean_attention_mass.is_none());
    assert!(table.rows[1].mean_attention_mass.is_some());
    let text = std::fs::read_to_string(dir.path().join("table.json")).unwrap();
    let back: autoalign::ablate::AblationTable = serde_json::from_str(&text).unwrap();
    assert_eq!(back, table);
    write_table(&table, dir.path()).unwrap();
}
