use proptest::prelude::*;
use vitprune::attention::token_mask;
use vitprune::data::{split, synth_generate, SplitProtocol, SynthConfig};
use vitprune::depgraph::{DependencyGraph, Site};
use vitprune::experiment::ExperimentConfig;
use vitprune::importance::{Criterion, ImportanceScore, ScoreTable};
use vitprune::metrics::label_rank;
use vitprune::model::{param_count, ModelConfig};
use vitprune::pruner::{plan_prune, PruneSpec};
use vitprune::Error;

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 1usize..5, 1usize..4, 2usize..9, prop::sample::select(vec![8usize, 16, 32]))
        .prop_map(|(layers, heads, dh, mlp, embed)| ModelConfig::uniform(16, 3, 4, embed, layers, heads, dh * 2, mlp * 4, 5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(epochs in 0usize..100, lr in 1e-6f64..1.0, ratios in prop::collection::vec(0.01f64..0.99, 1..4), seed in any::<u64>()) {
        let mut c = ExperimentConfig::default();
        c.train.max_epochs = epochs;
        c.finetune.optimizer.lr = lr;
        c.prune.ratios = ratios;
        c.init_seed = seed;
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn plan_meets_ratio_with_exact_accounting(
        cfg in small_config(),
        ratio in 0.0f64..0.9,
        seed in any::<u64>(),
        all_sites in any::<bool>(),
    ) {
        let graph = DependencyGraph::from_config(&cfg).unwrap();
        let sites: Vec<Site> = if all_sites { Site::ALL.to_vec() } else { vec![Site::AttnHead, Site::MlpChannel] };
        let mut state = seed;
        let scores = ScoreTable {
            scores: graph.groups(&sites).into_iter().map(|g| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let id = g.id();
                (id, ImportanceScore { group: id, criterion: Criterion::Random, value: (state >> 11) as f64, calibration: 0 })
            }).collect(),
        };
        let mut spec = PruneSpec::new(ratio, Criterion::Random, &sites);
        spec.min_widths.embed = 2;
        match plan_prune(&graph, &scores, &spec) {
            Ok(plan) => {
                prop_assert!(plan.removed_fraction() >= ratio - 1e-12);
                prop_assert_eq!(param_count(&plan.target), param_count(&cfg) - plan.removed_params);
                prop_assert!(plan.target.num_heads.iter().all(|&h| h >= 1));
                prop_assert!(plan.target.mlp_hidden.iter().all(|&m| m >= 1));
                prop_assert!(plan.target.embed_dim >= 2.min(cfg.embed_dim));
                // the threshold is the largest removed score
                let max_removed = plan.removed.iter().map(|r| r.score).fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
                prop_assert_eq!(plan.threshold, max_removed);
            }
            Err(Error::RatioUnreachable { reached, .. }) => prop_assert!(reached < ratio),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn token_mask_covers_and_keeps_ties(weights in prop::collection::vec(0u32..20, 1..40), coverage in 0.05f64..1.0) {
        let total: u32 = weights.iter().sum();
        prop_assume!(total > 0);
        let sal: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();
        let mask = token_mask(&sal, coverage);
        let covered: f64 = sal.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| s).sum();
        prop_assert!(covered >= coverage - 1e-9);
        let min_kept = sal.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        for (s, &m) in sal.iter().zip(&mask) {
            if *s > min_kept {
                prop_assert!(m);
            }
        }
    }

    #[test]
    fn label_rank_is_consistent(logits in prop::collection::vec(-5.0f64..5.0, 2..12), label_seed in any::<usize>()) {
        let label = label_seed % logits.len();
        let rank = label_rank(&logits, label);
        let strictly_above = logits.iter().filter(|&&l| l > logits[label]).count();
        prop_assert!(rank >= strictly_above);
        prop_assert!(rank < logits.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pooled_split_partitions_every_domain(per in 1usize..12, classes in 2usize..5, seed in any::<u64>()) {
        let ds = synth_generate(&SynthConfig { classes, domains: 2, images_per_class: per, image_size: 8 }, 0).unwrap();
        let s = match split(&ds, &SplitProtocol::pooled(seed)) {
            Ok(s) => s,
            Err(Error::InvalidDataset(_)) => return Err(TestCaseError::reject("too small to split")),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        for d in 0..2 {
            let n = ds.domain_samples(d).len();
            let pool = (n as f64 * 0.8).round() as usize;
            let test = s.test.iter().filter(|&&i| ds.samples[i].domain == d).count();
            prop_assert_eq!(test, n - pool);
        }
        prop_assert_eq!(&s, &split(&ds, &SplitProtocol::pooled(seed)).unwrap());
    }
}
