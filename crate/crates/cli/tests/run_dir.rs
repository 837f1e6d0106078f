mod common;

use exagree_cli::pipeline::{self, SynthOptions};
use exagree_cli::run::{LockGuard, MANIFEST};
use exagree_cli::{CliError, RunDir, Stage};
use exagree_core::models::TrainConfig;
use exagree_core::RashomonConfig;

fn synth(root: &std::path::Path) -> RunDir {
    let opts = SynthOptions {
        n: 600,
        p: 6,
        ..Default::default()
    };
    pipeline::synth(root, &opts, false).unwrap()
}

#[test]
fn save_then_load_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("r");
    let mut run = synth(&root);
    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 2).unwrap();
    let on_disk = std::fs::read(root.join(MANIFEST)).unwrap();
    let reopened = RunDir::open(&root).unwrap();
    assert_eq!(reopened.manifest, run.manifest);
    assert_eq!(reopened.manifest.to_bytes().unwrap(), on_disk);
    let mut again = reopened;
    std::thread::sleep(std::time::Duration::from_millis(5));
    again.save().unwrap();
    assert_eq!(std::fs::read(root.join(MANIFEST)).unwrap(), on_disk);
}

#[test]
fn corrupted_artifact_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("r");
    let mut run = synth(&root);
    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 2).unwrap();
    pipeline::sample(
        &mut run,
        RashomonConfig {
            n_samples: 30,
            ..Default::default()
        },
    )
    .unwrap();
    let path = root.join("rashomon/attributions.csv");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    std::fs::write(&path, bytes).unwrap();
    match RunDir::open(&root) {
        Err(e @ CliError::HashMismatch { .. }) => {
            assert!(e.to_string().contains("rashomon/attributions.csv"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("expected a hash mismatch, got {:?}", other.map(|_| ())),
    }
    assert!(RunDir::open_unverified(&root).is_ok());
}

#[test]
fn stages_are_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("r");
    let mut run = synth(&root);
    let err = pipeline::sample(&mut run, RashomonConfig::default()).unwrap_err();
    assert_eq!(err.to_string(), "reference stage missing");
    assert_eq!(err.exit_code(), 2);

    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 2).unwrap();
    pipeline::sample(
        &mut run,
        RashomonConfig {
            n_samples: 30,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(run.manifest.is_complete(Stage::Rashomon));
    let err = pipeline::search(&mut run, None, Default::default(), &|_, _| {}).unwrap_err();
    assert_eq!(err.to_string(), "dman stage missing");

    // Redoing an earlier stage invalidates everything after it.
    pipeline::train_reference(&mut run, TrainConfig::logistic(1), 0, 2).unwrap();
    assert!(!run.manifest.is_complete(Stage::Rashomon));
    assert_eq!(RunDir::open(&root).unwrap().manifest.first_missing(&Stage::ALL), Some(Stage::Rashomon));
}

#[test]
fn held_run_lock_is_busy() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("r");
    let mut run = synth(&root);
    let guard = run.lock().unwrap();
    let err = pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 2).unwrap_err();
    assert!(matches!(err, CliError::Busy(_)), "{err}");
    drop(guard);
    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 2).unwrap();

    let lock = dir.path().join("search.lock");
    let first = LockGuard::acquire(&lock, "one").unwrap();
    assert!(matches!(LockGuard::acquire(&lock, "two"), Err(CliError::Busy(_))));
    drop(first);
    assert!(!lock.exists());
}

#[test]
fn create_refuses_an_existing_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("r");
    synth(&root);
    let opts = SynthOptions {
        n: 600,
        p: 6,
        ..Default::default()
    };
    assert!(pipeline::synth(&root, &opts, false).is_err());
    assert!(pipeline::synth(&root, &opts, true).is_ok());
}

#[test]
fn atomic_writes_leave_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("r");
    let mut run = synth(&root);
    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 2).unwrap();
    let mut stack = vec![root.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            assert!(!name.starts_with('.') && !name.ends_with(".lock"), "leftover {}", p.display());
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
}
