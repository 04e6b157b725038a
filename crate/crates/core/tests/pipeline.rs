use ara_core::attacks::{
    cos_matching, l2_matching, public_model_attack, random_guess, smoothed_prior, stats_attack,
    AttackConfig, AttackProblem, Heuristic, LabelInfo, PublicModelConfig,
};
use ara_core::dataio::{
    split, synth_purchase_like, AttributeCodebook, Dataset, MaskedRecords, SplitSpec, SynthSpec,
};
use ara_core::fedsim::{fedavg, resolve_window, run_federation, FedConfig, Federation, WindowName};
use ara_core::mia::{mia_then_ara, MiaProblem};
use ara_core::nnmodel::{MlpConfig, ParamVector};
use proptest::prelude::*;

struct Planted {
    ds: Dataset,
    victim: Dataset,
    others: Vec<Dataset>,
    public: Dataset,
}

fn planted(seed: u64, n: usize, attributes: usize, victim_size: usize, others: usize) -> Planted {
    let ds = synth_purchase_like(&SynthSpec {
        n,
        attributes,
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let sp = split(
        ds.len(),
        &SplitSpec {
            victim_size,
            seed,
            ..SplitSpec::default()
        },
    )
    .unwrap();
    let victim = ds.subset(&sp.victim).unwrap();
    let others = sp
        .other_participants(others, victim_size, seed)
        .unwrap()
        .iter()
        .map(|idx| ds.subset(idx).unwrap())
        .collect();
    let public = ds.subset(&sp.public).unwrap();
    Planted {
        ds,
        victim,
        others,
        public,
    }
}

fn federate(p: &Planted, isolate: bool, rounds: usize, seed: u64) -> Federation {
    let mut parts = vec![p.victim.clone()];
    parts.extend(p.others.iter().cloned());
    let model = MlpConfig::new(p.ds.width(), vec![32], p.ds.num_classes(), seed);
    let cfg = FedConfig {
        participants: parts.len(),
        isolate,
        rounds,
        seed,
        ..FedConfig::default()
    };
    run_federation(&cfg, &model, &parts, 0).unwrap()
}

fn prior_of(public: &Dataset, cb: &AttributeCodebook) -> Vec<f64> {
    smoothed_prior(&cb.truth_indices(public).unwrap(), cb.k())
}

#[test]
fn isolated_victim_ignores_other_participants() {
    let p = planted(1, 1000, 12, 40, 2);
    let base = federate(&p, true, 6, 1);
    let mut changed = Planted {
        ds: p.ds.clone(),
        victim: p.victim.clone(),
        others: p.others.clone(),
        public: p.public.clone(),
    };
    let flipped: Vec<f64> = changed.others[0].column(3).iter().map(|v| 1.0 - v).collect();
    changed.others[0] = changed.others[0].with_column(3, &flipped);
    let perturbed = federate(&changed, true, 6, 1);
    for (a, b) in base.store.snapshots().iter().zip(perturbed.store.snapshots()) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.gradient, b.gradient);
    }
    assert_ne!(base.global, perturbed.global);

    let shared = federate(&p, false, 6, 1);
    let shared_perturbed = federate(&changed, false, 6, 1);
    assert_eq!(shared.store.snapshots()[0].gradient, shared_perturbed.store.snapshots()[0].gradient);
    assert_ne!(shared.store.snapshots()[1].gradient, shared_perturbed.store.snapshots()[1].gradient);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fedavg_ignores_participant_order(seed in 0u64..1000, perm in Just(()).prop_perturb(|_, mut rng| {
        let mut v: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            let j = (rng.next_u32() as usize) % (i + 1);
            v.swap(i, j);
        }
        v
    })) {
        let models: Vec<ParamVector> = (0..5)
            .map(|i| ParamVector::init(&MlpConfig::new(4, vec![3], 2, seed * 10 + i)).unwrap())
            .collect();
        let sizes = vec![7, 50, 3, 21, 13];
        let a = fedavg(&models, &sizes).unwrap();
        let pm: Vec<ParamVector> = perm.iter().map(|&i| models[i].clone()).collect();
        let ps: Vec<usize> = perm.iter().map(|&i| sizes[i]).collect();
        let b = fedavg(&pm, &ps).unwrap();
        prop_assert_eq!(a.flatten(), b.flatten());
    }
}

fn problem<'a>(
    records: &'a MaskedRecords,
    labels: &[usize],
    cb: &'a AttributeCodebook,
    fed: &'a Federation,
    prior: Option<Vec<f64>>,
) -> AttackProblem<'a> {
    AttackProblem {
        records,
        labels: LabelInfo::Known {
            labels: labels.to_vec(),
        },
        codebook: cb,
        store: &fed.store,
        window: resolve_window(&fed.store, WindowName::Pre5).unwrap(),
        prior,
        config: AttackConfig {
            iterations: 400,
            ..AttackConfig::default()
        },
    }
}

#[test]
fn cosine_attack_is_gradient_scale_invariant() {
    let p = planted(2, 1000, 12, 30, 0);
    let fed = federate(&p, true, 5, 2);
    let cb = AttributeCodebook::binary(0);
    let records = MaskedRecords::from_dataset(&p.victim, 0).unwrap();
    let prior = Some(prior_of(&p.public, &cb));
    let base = cos_matching(&problem(&records, p.victim.labels(), &cb, &fed, prior.clone())).unwrap();
    for c in [1e-3, 7.5, 1e3] {
        let scaled = Federation {
            store: fed.store.scaled(c),
            global: fed.global.clone(),
        };
        let res = cos_matching(&problem(&records, p.victim.labels(), &cb, &scaled, prior.clone())).unwrap();
        assert_eq!(res.predictions, base.predictions, "scale {c}");
    }
}

#[test]
fn l2_attack_is_record_permutation_equivariant() {
    let p = planted(3, 1000, 12, 24, 0);
    let fed = federate(&p, true, 5, 3);
    let cb = AttributeCodebook::binary(0);
    let prior = Some(prior_of(&p.public, &cb));
    let records = MaskedRecords::from_dataset(&p.victim, 0).unwrap();
    let base = l2_matching(&problem(&records, p.victim.labels(), &cb, &fed, prior.clone())).unwrap();
    let perm: Vec<usize> = (0..records.len()).rev().collect();
    let shuffled = records.subset(&perm);
    let labels: Vec<usize> = perm.iter().map(|&i| p.victim.labels()[i]).collect();
    let res = l2_matching(&problem(&shuffled, &labels, &cb, &fed, prior)).unwrap();
    let expected: Vec<usize> = perm.iter().map(|&i| base.predictions[i]).collect();
    assert_eq!(res.predictions, expected);
}

#[test]
fn attacks_never_read_the_sensitive_column() {
    let p = planted(4, 1000, 12, 30, 0);
    let fed = federate(&p, true, 5, 4);
    let cb = AttributeCodebook::binary(0);
    let prior = Some(prior_of(&p.public, &cb));
    let sentinel = p.victim.with_column(0, &vec![-12345.0; p.victim.len()]);
    let honest = MaskedRecords::from_dataset(&p.victim, 0).unwrap();
    let blinded = MaskedRecords::from_dataset(&sentinel, 0).unwrap();
    let a = cos_matching(&problem(&honest, p.victim.labels(), &cb, &fed, prior.clone())).unwrap();
    let b = cos_matching(&problem(&blinded, p.victim.labels(), &cb, &fed, prior.clone())).unwrap();
    assert!(a.same_outcome(&b));
    let a = l2_matching(&problem(&honest, p.victim.labels(), &cb, &fed, prior.clone())).unwrap();
    let b = l2_matching(&problem(&blinded, p.victim.labels(), &cb, &fed, prior)).unwrap();
    assert!(a.same_outcome(&b));
    let window = resolve_window(&fed.store, WindowName::All).unwrap();
    let a = stats_attack(&fed.store, &honest, &cb, p.victim.labels(), &window, &Heuristic::ALL).unwrap();
    let b = stats_attack(&fed.store, &blinded, &cb, p.victim.labels(), &window, &Heuristic::ALL).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.same_outcome(y));
    }
}

fn small_public_model() -> PublicModelConfig {
    let mut cfg = PublicModelConfig::default();
    cfg.hidden_dims = vec![16];
    cfg.train.epochs = 150;
    cfg.train.lr = 0.05;
    cfg
}

#[test]
fn public_attack_learns_a_dependent_attribute() {
    let p = planted(5, 2000, 8, 50, 0);
    // Make attribute 0 the XOR-free copy of attribute 1, so it is predictable.
    let copy = |d: &Dataset| d.with_column(0, &d.column(1));
    let public = copy(&p.public);
    let targets = copy(&p.ds.subset(&(0..400).collect::<Vec<_>>()).unwrap());
    let cb = AttributeCodebook::binary(0);
    let mut res = public_model_attack(
        &MaskedRecords::from_dataset(&public, 0).unwrap(),
        &cb.truth_indices(&public).unwrap(),
        2,
        &MaskedRecords::from_dataset(&targets, 0).unwrap(),
        &small_public_model(),
    )
    .unwrap();
    assert!(res.score(&cb.truth_indices(&targets).unwrap()) > 0.95);
}

#[test]
fn public_attack_is_near_chance_on_an_independent_attribute() {
    let p = planted(6, 6000, 8, 50, 0);
    let cb = AttributeCodebook::binary(0);
    let targets = p.ds.subset(&(0..2000).collect::<Vec<_>>()).unwrap();
    let mut res = public_model_attack(
        &MaskedRecords::from_dataset(&p.public, 0).unwrap(),
        &cb.truth_indices(&p.public).unwrap(),
        2,
        &MaskedRecords::from_dataset(&targets, 0).unwrap(),
        &small_public_model(),
    )
    .unwrap();
    let acc = res.score(&cb.truth_indices(&targets).unwrap());
    assert!((0.45..=0.55).contains(&acc), "accuracy {acc}");
}

#[test]
fn final_loss_heuristic_picks_the_truth_on_an_overfit_toy_model() {
    // Pairs of records identical except for the sensitive bit, with different
    // labels, so a memorizing model must rely on that bit.
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for g in 0..6 {
        let rest: Vec<f64> = (0..5).map(|j| f64::from(u8::from((g >> (j % 3)) & 1 == 1 || j == g % 5))).collect();
        for s in [0.0, 1.0] {
            let mut r = vec![s];
            r.extend_from_slice(&rest);
            rows.push(r);
            labels.push(usize::from(s == 1.0) ^ (g % 2));
        }
    }
    let victim = Dataset::new(ara_core::autodiff::Tensor::from_rows(&rows).unwrap(), labels, 2).unwrap();
    let model = MlpConfig::new(6, vec![64], 2, 7);
    let cfg = FedConfig {
        rounds: 100,
        lr: 0.5,
        seed: 7,
        ..FedConfig::default()
    };
    let fed = run_federation(&cfg, &model, &[victim.clone()], 0).unwrap();
    let cb = AttributeCodebook::binary(0);
    let records = MaskedRecords::from_dataset(&victim, 0).unwrap();
    let truth = cb.truth_indices(&victim).unwrap();
    let window = resolve_window(&fed.store, WindowName::All).unwrap();
    let mut res = stats_attack(&fed.store, &records, &cb, victim.labels(), &window, &[Heuristic::FinalLoss])
        .unwrap()
        .remove(0);
    assert_eq!(res.score(&truth), 1.0);
    let random = random_guess(2, truth.len(), 7).score(&truth);
    assert!(random < 1.0);
}

#[test]
fn mia_pipeline_matches_a_direct_run_on_predicted_members() {
    let p = planted(8, 2000, 16, 40, 0);
    let fed = federate(&p, true, 20, 8);
    let cb = AttributeCodebook::binary(0);
    let outsiders = p.public.subset(&(0..40).collect::<Vec<_>>()).unwrap();
    let pool = Dataset::concat(&[&p.victim, &outsiders]).unwrap();
    let records = MaskedRecords::from_dataset(&pool, 0).unwrap();
    let prior = Some(prior_of(&p.public, &cb));
    let config = AttackConfig {
        iterations: 300,
        ..AttackConfig::default()
    };
    let mia = MiaProblem {
        pool: &records,
        labels: pool.labels(),
        codebook: &cb,
        store: &fed.store,
        feature_window: resolve_window(&fed.store, WindowName::All).unwrap(),
        attack_window: resolve_window(&fed.store, WindowName::Pre5).unwrap(),
        prior: prior.clone(),
        config: config.clone(),
    };
    let out = mia_then_ara(&mia).unwrap();
    assert!(!out.members.is_empty());
    let members = records.subset(&out.members);
    let labels: Vec<usize> = out.members.iter().map(|&i| pool.labels()[i]).collect();
    let mut direct = problem(&members, &labels, &cb, &fed, prior);
    direct.config = config;
    let direct = cos_matching(&direct).unwrap();
    assert!(out.ara.same_outcome(&direct));
}
