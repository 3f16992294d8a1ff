use mexflow::checkpoint::Checkpoint;
use mexflow::conditioner::ConditionerConfig;
use mexflow::data::{load, train_test_split, Dataset, DatasetKind, DatasetSpec};
use mexflow::model::{CouplingKind, ModelConfig};
use mexflow::optim::{OptimConfig, Optimizer};
use mexflow::params::ParamStore;
use mexflow::rng::FlowRng;
use mexflow::train::{check_model_config, evaluate, train, MetricsWriter, RunConfig, Session, TrainReport};
use mexflow::{DenseArray, Error};
use proptest::prelude::*;

fn small_run(epochs: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            depth: 2,
            net: ConditionerConfig {
                blocks: 1,
                hidden: 8,
                init_std: 0.1,
            },
            ..ModelConfig::points()
        },
        epochs,
        batch_size: 50,
        seed: 5,
        deterministic: true,
        ..RunConfig::default()
    }
}

fn moons(count: usize, seed: u64) -> (Dataset, Dataset) {
    let d = load(&DatasetSpec::generated(DatasetKind::Moons, seed, count)).unwrap();
    train_test_split(&d, seed)
}

fn run(session: &mut Session, tr: &Dataset, te: &Dataset) -> (mexflow::Result<TrainReport>, String) {
    let mut w = MetricsWriter::new(Vec::new(), &session.run.to_map()).unwrap();
    let report = train(session, tr, te, &mut w, None);
    (report, String::from_utf8(w.into_inner()).unwrap())
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn metrics_start_with_config_echo_and_baseline_row() {
    let (tr, te) = moons(400, 1);
    let mut s = Session::new(small_run(2)).unwrap();
    let (report, csv) = run(&mut s, &tr, &te);
    let report = report.unwrap();
    assert!(csv.starts_with("# "));
    assert!(csv.contains("# coupling = matexp\n"));
    assert!(csv.contains("\nepoch,step,nll_nats,bpd,grad_norm,retries,u,wall_ms\n"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("0,0,"));
    assert!(rows[2].starts_with("2,16,"), "{}", rows[2]);
    assert_eq!(report.rows.last().unwrap().nll_nats, report.last.nll_mean);
}

#[test]
fn evaluation_reproduces_the_logged_metric() {
    let (tr, te) = moons(400, 2);
    let mut s = Session::new(small_run(2)).unwrap();
    let report = run(&mut s, &tr, &te).0.unwrap();
    let again = evaluate(&s, &te, s.run.seed).unwrap();
    assert_eq!(again.nll_mean.to_bits(), report.last.nll_mean.to_bits());
}

#[test]
fn identity_model_on_unit_gaussian_matches_entropy() {
    let mut rng = FlowRng::seed(3);
    let x = DenseArray::new(&[40000, 1, 1, 2], rng.normals(80000)).unwrap();
    let data = Dataset { x, levels: None };
    let (tr, te) = train_test_split(&data, 3);
    // A large first batch keeps the actnorm estimate close to the identity.
    let cfg = RunConfig {
        batch_size: 4000,
        ..small_run(3)
    };
    let mut s = Session::new(cfg).unwrap();
    let report = run(&mut s, &tr, &te).0.unwrap();
    let entropy = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!(
        (report.initial.nll_mean - entropy).abs() / entropy < 0.01,
        "{}",
        report.initial.nll_mean
    );
    let tail: f64 = report.rows.iter().rev().take(2).map(|r| r.nll_nats).sum::<f64>() / 2.0;
    assert!(tail <= report.initial.nll_mean + 0.02, "smoothed NLL rose to {tail}");
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let (tr, te) = moons(300, 4);
    let go = || {
        let mut s = Session::new(small_run(2)).unwrap();
        let (_, csv) = run(&mut s, &tr, &te);
        (csv, s.to_checkpoint().to_bytes())
    };
    let (a_csv, a_ck) = go();
    let (b_csv, b_ck) = go();
    assert_eq!(a_csv, b_csv);
    assert_eq!(a_ck, b_ck);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (tr, te) = moons(300, 5);
    let mut s = Session::new(small_run(1)).unwrap();
    run(&mut s, &tr, &te).0.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mef");
    s.save(&path).unwrap();
    let back = Session::load(&path).unwrap();
    assert_eq!(back.run, s.run);
    assert_eq!(back.epoch, 1);
    assert_eq!(back.optim, s.optim);
    assert_eq!(back.standardizer, s.standardizer);
    for id in s.params.ids() {
        let bits = |p: &ParamStore| p.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s.params), bits(&back.params), "{}", s.params.name(id));
    }
}

#[test]
fn resumed_run_continues_where_it_stopped() {
    let (tr, te) = moons(300, 6);
    let mut full = Session::new(small_run(4)).unwrap();
    let full_rows = run(&mut full, &tr, &te).0.unwrap().rows;

    let mut first = Session::new(small_run(2)).unwrap();
    run(&mut first, &tr, &te).0.unwrap();
    let mut ck = first.to_checkpoint();
    ck.config.set("epochs", 4);
    let mut resumed = Session::from_checkpoint(&ck).unwrap();
    let rest = run(&mut resumed, &tr, &te).0.unwrap().rows;

    assert_eq!(rest.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![3, 4]);
    assert_eq!(rest[0].step, full_rows[2].step + 6);
    assert_eq!(&rest[..], &full_rows[3..]);
}

#[test]
fn mismatched_coupling_is_reported() {
    let s = Session::new(small_run(1)).unwrap();
    let ck = s.to_checkpoint();
    let mut affine = s.run.model.clone();
    affine.coupling = CouplingKind::Affine;
    match check_model_config(&ck, &affine) {
        Err(Error::ConfigMismatch(msg)) => assert!(
            msg.contains("coupling: checkpoint has matexp, config has affine"),
            "{msg}"
        ),
        other => panic!("expected a mismatch, got {other:?}"),
    }
    assert!(check_model_config(&ck, &s.run.model).is_ok());
}

#[test]
fn truncated_checkpoint_is_rejected_with_offset() {
    let bytes = Session::new(small_run(1)).unwrap().to_checkpoint().to_bytes();
    let e = Checkpoint::from_bytes(&bytes[..bytes.len() - 5], "ck").unwrap_err();
    assert!(matches!(e, Error::Format { offset, .. } if offset > 0));
}

#[test]
fn forced_divergence_retries_once_with_halved_stabilizers() {
    let (tr, te) = moons(300, 7);
    let mut cfg = small_run(1);
    cfg.inject_divergence_epoch = Some(1);
    let mut s = Session::new(cfg.clone()).unwrap();
    let (report, csv) = run(&mut s, &tr, &te);
    let report = report.unwrap();
    assert_eq!(report.retries, 1);
    let last = report.rows.last().unwrap();
    assert_eq!((last.epoch, last.retries, last.u), (1, 1, 0.5));
    assert!(data_rows(&csv)[1].ends_with(",1,0.5,0"));

    // Restoring and halving must leave the run exactly where a fresh run
    // built with u = 0.5 would be.
    let mut reference_cfg = small_run(1);
    reference_cfg.model.u_init = 0.5;
    let mut reference = Session::new(reference_cfg).unwrap();
    let reference_rows = run(&mut reference, &tr, &te).0.unwrap().rows;
    assert_eq!(reference_rows[1].nll_nats, last.nll_nats);
    for id in s.params.ids() {
        assert_eq!(s.params.get(id), reference.params.get(id), "{}", s.params.name(id));
    }
}

#[test]
fn retries_halve_exactly_and_then_give_up() {
    let (tr, te) = moons(200, 8);
    let mut cfg = small_run(2);
    cfg.inject_divergence_epoch = Some(2);
    cfg.inject_divergence_times = 10;
    cfg.max_retries = 3;
    assert_eq!(cfg.u_after(3), 0.125);
    let mut s = Session::new(cfg).unwrap();
    let (report, csv) = run(&mut s, &tr, &te);
    assert!(matches!(report, Err(Error::RetriesExhausted { retries: 3 })));
    assert_eq!(data_rows(&csv).len(), 2, "epochs 0 and 1 stay logged");
    // The restored epoch-start state carries the third halving.
    for st in s.model.stabilizers() {
        assert_eq!(s.params.get(st.u1).item(), 0.125);
        assert_eq!(s.params.get(st.u2).item(), 0.125);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_adamax_accumulator_never_decreases(grads in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
        let mut p = ParamStore::new();
        let id = p.add("w", DenseArray::scalar(0.0));
        let mut opt = Optimizer::new(OptimConfig::default(), &p);
        let mut prev = 0.0;
        for (t, g) in grads.iter().enumerate() {
            opt.step(&mut p, &[(id, DenseArray::scalar(*g))]).unwrap();
            let u = opt.export(&p).into_iter().find(|(n, _)| n == "optim.s/w").unwrap().1.item();
            prop_assert!(u >= 0.0);
            prop_assert!(u >= prev * 0.999 - 1e-15);
            prop_assert!(u >= g.abs());
            prop_assert_eq!(opt.step_count(), t as u64 + 1);
            prev = u;
        }
        // A zero gradient decays the accumulator by exactly β₂.
        let before = prev;
        opt.step(&mut p, &[(id, DenseArray::scalar(0.0))]).unwrap();
        let u = opt.export(&p).into_iter().find(|(n, _)| n == "optim.s/w").unwrap().1.item();
        prop_assert_eq!(u, 0.999 * before);
    }
}
