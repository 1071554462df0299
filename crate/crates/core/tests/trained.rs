//! Properties that only show on a trained spiral denoiser. The model is
//! trained once per test binary with the default experiment settings.

use std::sync::OnceLock;

use ldul::attacks::diffpure;
use ldul::lab::{ExperimentConfig, ExperimentKind, Session};
use ldul::metrics::mmd;
use ldul::rng::Stream;
use ldul::tensor::Tensor;

fn session() -> &'static Session {
    static S: OnceLock<(tempfile::TempDir, Session)> = OnceLock::new();
    let (_, s) = S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::for_experiment(ExperimentKind::Main);
        cfg.output = dir.path().to_path_buf();
        let s = Session::open(cfg).unwrap();
        (dir, s)
    });
    s
}

#[test]
fn purification_erodes_a_fixed_perturbation() {
    let s = session();
    let x = Tensor::cat_rows(&s.dataset.identities.iter().map(|i| i.samples.clone()).collect::<Vec<_>>()).unwrap();
    let mut rng = Stream::new(17);
    let delta = Tensor::new(x.shape().to_vec(), rng.normals(x.len())).unwrap().scale(0.05);
    let shifted = x.add(&delta).unwrap();
    let ts = [5usize, 10, 25, 50, 100];
    let gaps: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let a = diffpure(&s.model, &s.dm, &shifted, t, &s.schedule, 3).unwrap();
            let b = diffpure(&s.model, &s.dm, &x, t, &s.schedule, 3).unwrap();
            a.sub(&b).unwrap().norm2()
        })
        .collect();
    let injected = delta.norm2();
    let last = *gaps.last().unwrap();
    assert!(gaps.iter().all(|&g| g >= last), "gaps {gaps:?}");
    assert!(last < 0.5 * injected, "gap {last} vs injected {injected}");
}

#[test]
fn clean_personalization_separates_identities() {
    let s = session();
    let bw = s.cfg.eval.bandwidth;
    let ids = &s.dataset.identities;
    let (mut separated, mut total) = (0, 0);
    let mut weak_controls = Vec::new();
    for seed in [0u64, 1] {
        let baseline = s.baseline(seed).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let (_, gens) = s.personalize_and_generate(i, &id.samples, seed).unwrap();
            let clean = baseline.scorer.score(&id.id, seed, &gens, &id.reference).unwrap();
            assert_eq!(clean, 1.0);
            // Control: the same personalization fed a neighbouring identity's samples.
            let other = &ids[(i + 1) % ids.len()];
            let (_, swapped) = s.personalize_and_generate(i, &other.samples, seed).unwrap();
            let control = baseline.scorer.score(&id.id, seed, &swapped, &id.reference).unwrap();
            if clean > 0.5 * control {
                weak_controls.push((seed, i, control));
            }
            let own = mmd(&gens, &id.reference, bw).unwrap();
            let others_farther = ids
                .iter()
                .filter(|o| o.id != id.id)
                .all(|o| mmd(&gens, &o.reference, bw).unwrap() > own);
            separated += usize::from(others_farther);
            total += 1;
        }
    }
    assert!(5 * separated >= 4 * total, "{separated}/{total} identities separated");
    assert!(weak_controls.is_empty(), "controls within 2x of clean: {weak_controls:?}");
}
