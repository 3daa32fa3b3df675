use entangle_core::harness::data::{gen_dataset_sized, permute_sequences};
use entangle_core::harness::train::{sweep, train_full};
use entangle_core::harness::{train, ExperimentConfig, RunStatus, Task};

fn cfg(text: &str) -> ExperimentConfig {
    text.parse().unwrap()
}

#[test]
fn res_mlp_solves_spirals() {
    let c = cfg("[experiment]\ntask = spiral2d\nmodel = res_mlp\ndepth = 4\nwidth = 16\nepochs = 30\n\
                 [entanglement]\nkind = dense\ngamma = 0\n[optimizer]\nname = adam\nlr = 0.001\n");
    // seed 1's test split has a Bayes-optimal accuracy of 0.974
    let m = train(&c, 1).unwrap();
    assert!(m.succeeded(), "{:?}", m.status);
    let last = m.epochs.last().unwrap();
    assert!(last.test_acc >= 0.95, "final test accuracy {}", last.test_acc);
    assert!(m.entanglement_unchanged);
}

#[test]
fn zero_epochs_records_only_the_initial_evaluation() {
    let c = cfg("[experiment]\ntask = spiral2d\nmodel = res_mlp\nepochs = 0\ntrain_size = 50\ntest_size = 20\n");
    let m = train(&c, 1).unwrap();
    assert_eq!(m.epochs.len(), 1);
    assert_eq!(m.epochs[0].epoch, 0);
    assert_eq!(m.to_csv().lines().count(), 2);
}

#[test]
fn identity_and_dense_gamma_zero_cells_match_per_seed() {
    let c = cfg("[experiment]\ntask = spiral2d\nmodel = res_mlp\nwidth = 8\nepochs = 3\nseeds = 0,1\n\
                 train_size = 200\ntest_size = 100\n\
                 [sweep]\nentanglement = identity\nentanglement = kind=dense gamma=0\n");
    let r = sweep(&c).unwrap();
    assert_eq!(r.cells.len(), 4);
    for seed_pos in 0..2 {
        let a = &r.cells[seed_pos].metrics;
        let b = &r.cells[2 + seed_pos].metrics;
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.to_csv(), b.to_csv());
    }
    assert_eq!(r.summary[0].mean_acc, r.summary[1].mean_acc);
}

#[test]
fn sweep_counts_runs_and_keeps_duplicates() {
    let base = "[experiment]\ntask = spiral2d\nmodel = res_mlp\nwidth = 4\nepochs = 1\n\
                train_size = 40\ntest_size = 20\nseeds = 0,1,2\n";
    let r = sweep(&cfg(&format!("{base}[sweep]\nentanglement = kind=dense gamma=0.5\n"))).unwrap();
    assert_eq!(r.cells.len(), 3);
    assert_eq!(r.summary.len(), 1);
    assert_eq!(r.summary[0].n_seeds, 3);

    let dup = format!("{base}[sweep]\nentanglement = orthogonal\nentanglement = orthogonal\n");
    let r = sweep(&cfg(&dup)).unwrap();
    assert_eq!(r.summary.len(), 2);
    assert_eq!(r.summary[0], r.summary[1]);
    assert_eq!(r.summary_csv().lines().count(), 3);
}

#[test]
fn divergence_is_recorded_not_raised() {
    let c = cfg("[experiment]\ntask = spiral2d\nmodel = res_mlp\ndepth = 3\nwidth = 8\nepochs = 3\n\
                 train_size = 100\ntest_size = 50\nseeds = 0,1\n\
                 [optimizer]\nname = sgd\nlr = 1e6\nmomentum = 0.9\nclip_norm = 0\n\
                 [sweep]\nentanglement = kind=dense gamma=0.1\n");
    let r = sweep(&c).unwrap();
    assert!(r.cells.iter().all(|c| matches!(c.metrics.status, RunStatus::Diverged { .. })));
    assert_eq!(r.summary[0].failures, 2);
    assert!(r.summary[0].mean_acc.is_nan());
    assert!(r.summary_csv().lines().nth(1).unwrap().contains(",NA,NA,2,2"));
}

#[test]
fn runs_are_deterministic_and_seed_dependent() {
    let c = cfg("[experiment]\ntask = digits_lite\nmodel = res_cnn\ndepth = 1\nwidth = 4\nepochs = 1\n\
                 train_size = 64\ntest_size = 32\n\
                 [entanglement]\nkind = channel_spatial\ngamma = 0.5\nkernel_size = 3\n");
    let a = train(&c, 5).unwrap();
    let b = train(&c, 5).unwrap();
    let other = train(&c, 6).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_ne!(a.to_csv(), other.to_csv());
    assert!(a.entanglement_unchanged);
}

#[test]
fn every_model_family_trains_a_step() {
    for (task, model, kind) in [
        ("digits_lite", "transformer", "kind=spatial gamma=0.2 k=3"),
        ("digits_lite", "transformer", "orthogonal"),
        ("seq_pixel", "lstm", "kind=dense gamma=0.3"),
        ("permuted_seq_pixel", "lstm", "orthogonal"),
        ("copy_memory", "lstm", "none"),
        ("digits_lite", "res_mlp", "kind=dense gamma=1"),
        ("digits_lite", "res_cnn", "orthogonal_channel"),
    ] {
        let spec: entangle_core::EntanglementSpec = kind.parse().unwrap();
        let c = cfg(&format!(
            "[experiment]\ntask = {task}\nmodel = {model}\nwidth = 8\nepochs = 1\nbatch_size = 8\n\
             train_size = 16\ntest_size = 8\n[sweep]\nentanglement = {spec}\n"
        ));
        let c = c.with_entanglement(spec);
        let run = train_full(&c, 0).unwrap();
        assert!(run.metrics.succeeded(), "{task}/{model}/{kind}: {:?}", run.metrics.status);
        assert_eq!(run.metrics.epochs.len(), 2);
        assert!(run.metrics.entanglement_unchanged);
        for e in &run.metrics.epochs {
            assert!(e.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&e.test_acc));
        }
    }
}

#[test]
fn lstm_modes_give_different_runs() {
    let base = "[experiment]\ntask = seq_pixel\nmodel = lstm\nwidth = 6\nepochs = 1\nbatch_size = 8\n\
                train_size = 16\ntest_size = 8\n[entanglement]\nkind = dense\ngamma = 0.5\n";
    let runs: Vec<String> = ["entangle_then_gate", "gate_then_entangle", "literal"]
        .iter()
        .map(|m| {
            let text = base.replace("epochs = 1", &format!("epochs = 1\nlstm_mode = {m}"));
            train(&cfg(&text), 0).unwrap().to_csv()
        })
        .collect();
    assert_ne!(runs[0], runs[1]);
    assert_ne!(runs[0], runs[2]);
}

#[test]
fn unsupported_model_task_pairs_are_rejected() {
    for (task, model) in [("spiral2d", "res_cnn"), ("copy_memory", "res_mlp"), ("digits_lite", "lstm")] {
        let text = format!("[experiment]\ntask = {task}\nmodel = {model}\n");
        let err = text.parse::<ExperimentConfig>().and_then(|c| train(&c, 0).map(|_| ()));
        assert!(err.is_err(), "{task}/{model}");
    }
}

#[test]
fn permuted_pixels_are_a_fixed_shuffle_of_the_plain_sequences() {
    let (plain, _) = gen_dataset_sized(Task::SeqPixel, 9, 4, 2).unwrap();
    let (perm, _) = gen_dataset_sized(Task::PermutedSeqPixel, 9, 4, 2).unwrap();
    assert_eq!(plain.targets, perm.targets);
    assert_ne!(plain.inputs, perm.inputs);
    let identity: Vec<usize> = (0..196).collect();
    assert_eq!(permute_sequences(&plain, &identity).unwrap(), plain);
    let mut a: Vec<u64> = plain.inputs.data()[..196].iter().map(|v| v.to_bits()).collect();
    let mut b: Vec<u64> = perm.inputs.data()[..196].iter().map(|v| v.to_bits()).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}
