use pml_core::likelihood::log_likelihood;
use pml_core::loss::{l2_level, total_loss};
use pml_core::rng::{derive_seed, SplitMix64};
use pml_core::sample::random_batch;
use pml_core::{DensityMap, ResolutionSet};

#[test]
fn inserting_a_sub_level_never_lowers_the_likelihood() {
    for t in 0..100u64 {
        let mut rng = SplitMix64::new(derive_seed(21, &[t]));
        let top = 4 + rng.below(3) as usize;
        let (p, g) = random_batch(&mut rng, top, 2);
        let nk = 1 + rng.below((top - 1) as u64) as usize;
        let mut levels = vec![nk, top];
        let base = log_likelihood(&p, &g, &ResolutionSet::new(levels.clone()).unwrap(), 1e-12).unwrap();
        let mut current = base.loglik;
        // add the missing levels below nk in random order
        let mut missing: Vec<usize> = (0..nk).collect();
        rng.shuffle(&mut missing);
        for m in missing {
            levels.push(m);
            levels.sort_unstable();
            let next = log_likelihood(&p, &g, &ResolutionSet::new(levels.clone()).unwrap(), 1e-12)
                .unwrap()
                .loglik;
            assert!(next >= current - 1e-9 * current.abs().max(1.0), "trial {t}: {current} -> {next}");
            current = next;
        }
    }
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

#[test]
fn single_level_loss_has_the_l2_minimiser() {
    for t in 0..20u64 {
        let mut rng = SplitMix64::new(derive_seed(22, &[t]));
        let level = 2 + rng.below(3) as usize;
        let (_, gts) = random_batch(&mut rng, level, 2);
        let dirs: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| g.data().iter().map(|_| rng.uniform_range(-1.0, 1.0)).collect())
            .collect();
        let target = rng.uniform_range(-1.0, 1.0);
        let grid: Vec<f64> = (0..=80).map(|i| -2.0 + 0.05 * i as f64).collect();
        let mut pml = Vec::new();
        let mut plain = Vec::new();
        for &s in &grid {
            let preds: Vec<DensityMap> = gts
                .iter()
                .zip(&dirs)
                .map(|(g, d)| {
                    let v = g.data().iter().zip(d).map(|(a, b)| a + (s - target) * b).collect();
                    DensityMap::new(level, v).unwrap()
                })
                .collect();
            pml.push(total_loss(&preds, &gts, 0, 1e-12).unwrap().total);
            plain.push(l2_level(&preds, &gts, 0).unwrap() + l2_level(&preds, &gts, level).unwrap());
        }
        assert_eq!(argmin(&pml), argmin(&plain), "trial {t}");
    }
}
