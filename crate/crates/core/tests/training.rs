use quitlab::experiment::{run_experiment, ExperimentConfig};
use quitlab::LossKind;

/// Early stopping: no run of non-improving epochs exceeds the patience, the
/// run stops exactly when one reaches it, and the checkpoint is the first
/// epoch with the best validation score.
#[test]
fn early_stopping_and_best_checkpoint_invariants() {
    for (seed, loss, lr0, patience) in [
        (11, LossKind::QuitTrihard, 0.2, 3),
        (12, LossKind::Trihard, 0.05, 2),
        (13, LossKind::Msml, 0.5, 4),
        (14, LossKind::QuitQuad, 1e-3, 1),
    ] {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.dataset.city.num_places = 20;
        cfg.train.loss = loss;
        cfg.train.lr0 = lr0;
        cfg.train.early_stop_patience = patience;
        cfg.train.max_epochs = 30;
        let run = run_experiment(&cfg).unwrap();
        let log = &run.train.log;

        let mut best = f64::NEG_INFINITY;
        let mut best_at = 0;
        let mut streak = 0;
        for (i, row) in log.iter().enumerate() {
            if row.val_recall1 > best {
                best = row.val_recall1;
                best_at = i;
                streak = 0;
            } else {
                streak += 1;
            }
            assert!(
                streak <= patience,
                "seed {seed}: {streak} stale epochs at row {i}"
            );
        }
        assert_eq!(run.train.stopped_early, streak == patience, "seed {seed}");
        if !run.train.stopped_early {
            assert_eq!(log.len(), cfg.train.max_epochs, "seed {seed}");
        }
        assert_eq!(run.checkpoint().epoch, log[best_at].epoch, "seed {seed}");
        assert_eq!(run.checkpoint().best_val_recall1, best, "seed {seed}");
    }
}
