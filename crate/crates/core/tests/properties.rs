use olora::adapters::{
    AdaLoraAdapter, Adapter, AdapterStack, LinearLayer, LoraAdapter, StackRecord,
};
use olora::continual::{forgetting_report, Method, StageDiagnostics, StageResult};
use olora::model::{task_loss, Batch, BlockConfig, ParamCount, ToyModel};
use olora::rank_alloc::{apply_budget_with_scores, BudgetSchedule};
use olora::regularizers::{combined_loss, orth_loss_value, LossBreakdown, LossMode};
use olora::rng;
use olora::tensor::{Matrix, Tape};
use proptest::prelude::*;

fn randn(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    Matrix::randn(rows, cols, std, &mut rng::stream(seed, &[]))
}

/// A random adapter with nonzero factors and, for AdaLoRA, a random mask.
fn random_adapter(d1: usize, d2: usize, r: usize, adalora: bool, seed: u64) -> Adapter {
    let a = randn(d1, r, 0.7, seed);
    let b = randn(r, d2, 0.7, seed + 1);
    if adalora {
        let lambda = randn(1, r, 1.0, seed + 2).into_data();
        let mut ad = AdaLoraAdapter::from_factors(a, &lambda, b).unwrap();
        for (k, m) in ad.mask.iter_mut().enumerate() {
            *m = (seed >> k) & 1 == 0;
        }
        Adapter::AdaLora(ad)
    } else {
        Adapter::Lora(LoraAdapter::from_factors(a, b).unwrap())
    }
}

fn layer_with_stack(d1: usize, d2: usize, kinds: &[(usize, bool)], seed: u64) -> LinearLayer {
    let mut layer =
        LinearLayer::new(randn(d1, d2, 1.0, seed), randn(1, d2, 1.0, seed + 7)).unwrap();
    for (i, (r, ada)) in kinds.iter().enumerate() {
        let r = (*r).min(d1.min(d2));
        let ad = random_adapter(
            d1,
            d2,
            r,
            *ada,
            seed.wrapping_mul(31).wrapping_add(i as u64 * 101),
        );
        layer.stack.freeze_and_extend(ad).unwrap();
    }
    layer
}

fn stage(stage: usize, losses: Vec<f64>) -> StageResult {
    StageResult {
        stage,
        method: Method::OLora,
        steps: 1,
        lr: 1e-3,
        eval_losses: losses,
        params: ParamCount {
            trainable: 0,
            total: 1,
            fraction: 0.0,
        },
        final_loss: LossBreakdown::default(),
        diagnostics: StageDiagnostics::default(),
        wall_clock_secs: 0.0,
        trace: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapted_forward_matches_merged_weight(
        d1 in 2usize..10,
        d2 in 2usize..10,
        n in 1usize..5,
        kinds in prop::collection::vec((1usize..5, any::<bool>()), 0..4),
        seed in 0u64..1 << 48,
    ) {
        let layer = layer_with_stack(d1, d2, &kinds, seed);
        let x = randn(n, d1, 1.0, seed ^ 0x55);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = layer.adapted_forward(&mut tape, xv).unwrap();
        let merged = layer.merged();
        let mut tape2 = Tape::new();
        let xv2 = tape2.constant(x);
        let ym = merged.base_forward(&mut tape2, xv2).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(tape2.value(ym)).unwrap() <= 1e-10);
    }

    #[test]
    fn masked_triplets_do_not_affect_output(
        d in 3usize..8,
        r in 2usize..4,
        seed in 0u64..1 << 48,
        noise in -5.0f64..5.0,
    ) {
        let mut layer = layer_with_stack(d, d, &[], seed);
        let Adapter::AdaLora(mut ad) = random_adapter(d, d, r, true, seed) else { unreachable!() };
        ad.mask[0] = false;
        layer.stack.freeze_and_extend(Adapter::AdaLora(ad)).unwrap();
        let x = randn(3, d, 1.0, seed ^ 9);
        let out = |l: &LinearLayer| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = l.adapted_forward(&mut tape, xv).unwrap();
            tape.value(y).clone()
        };
        let before = out(&layer);
        let mut perturbed = layer.clone();
        let ad = perturbed.stack.active_mut().unwrap().as_adalora_mut().unwrap();
        let l0 = ad.lambda.value().get(0, 0);
        ad.lambda.value_mut().set(0, 0, l0 + noise);
        for i in 0..d {
            let v = ad.a.value().get(i, 0);
            ad.a.value_mut().set(i, 0, v * 3.0 + noise);
            let w = ad.b.value().get(0, i);
            ad.b.value_mut().set(0, i, w - noise);
        }
        prop_assert_eq!(before, out(&perturbed));
    }

    #[test]
    fn budget_masks_exactly_budget_triplets(
        ranks in prop::collection::vec(1usize..6, 1..6),
        seed in 0u64..1 << 48,
        frac in 0.0f64..=1.0,
    ) {
        let mut adapters: Vec<AdaLoraAdapter> = ranks
            .iter()
            .enumerate()
            .map(|(j, r)| AdaLoraAdapter::init(6, 6, *r, seed.wrapping_add(j as u64)).unwrap())
            .collect();
        let total: usize = ranks.iter().sum();
        let budget = (frac * total as f64).floor() as usize;
        let scores: Vec<Vec<f64>> = ranks
            .iter()
            .enumerate()
            .map(|(j, r)| randn(1, *r, 1.0, seed ^ j as u64).into_data())
            .collect();
        let mut refs: Vec<&mut AdaLoraAdapter> = adapters.iter_mut().collect();
        apply_budget_with_scores(&mut refs, &scores, budget).unwrap();
        let active: usize = adapters.iter().map(AdaLoraAdapter::active_rank).sum();
        prop_assert_eq!(active, budget);
        // every kept score is at least every dropped score
        let mut kept = f64::INFINITY;
        let mut dropped = f64::NEG_INFINITY;
        for (ad, sc) in adapters.iter().zip(&scores) {
            for (m, s) in ad.mask.iter().zip(sc) {
                if *m { kept = kept.min(*s) } else { dropped = dropped.max(*s) }
            }
        }
        prop_assert!(kept >= dropped);
    }

    #[test]
    fn budget_schedule_is_monotone_with_exact_endpoints(
        r_target in 1usize..10,
        extra in 0usize..10,
        total in 1usize..400,
        warm in 0.0f64..0.5,
        span in 0.0f64..0.5,
        n in 1usize..20,
    ) {
        let r_init = r_target + extra;
        let s = BudgetSchedule::from_fractions(r_init, r_target, total, warm, warm + span, n).unwrap();
        prop_assert_eq!(s.budget_at(0).unwrap(), if s.warmup_steps == 0 && s.decay_end_step == 0 { n * r_target } else { n * r_init });
        prop_assert_eq!(s.budget_at(total).unwrap(), n * r_target);
        let mut prev = usize::MAX;
        for t in 0..=total {
            let b = s.budget_at(t).unwrap();
            prop_assert!(b <= prev);
            prop_assert!((n * r_target..=n * r_init).contains(&b));
            prev = b;
        }
    }

    #[test]
    fn orth_loss_is_symmetric_and_nonnegative(
        d in 2usize..10,
        r1 in 1usize..4,
        r2 in 1usize..4,
        seed in 0u64..1 << 48,
    ) {
        let a = randn(d, r1, 1.0, seed);
        let b = randn(d, r2, 1.0, seed + 1);
        let ab = orth_loss_value(&a, &b).unwrap();
        let ba = orth_loss_value(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
    }

    #[test]
    fn orth_loss_vanishes_on_disjoint_supports(
        half in 1usize..5,
        seed in 0u64..1 << 48,
    ) {
        let d = 2 * half;
        let mut a = randn(d, 2, 1.0, seed);
        let mut b = randn(d, 2, 1.0, seed + 1);
        for i in 0..half {
            for c in 0..2 {
                a.set(half + i, c, 0.0);
                b.set(i, c, 0.0);
            }
        }
        prop_assert_eq!(orth_loss_value(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn combined_loss_is_the_weighted_sum_of_its_terms(
        l1 in 0.0f64..2.0,
        l2 in 0.0f64..2.0,
        seed in 0u64..1 << 48,
        adalora in any::<bool>(),
    ) {
        let mut stack = AdapterStack::new(5, 4);
        stack.freeze_and_extend(random_adapter(5, 4, 2, adalora, seed)).unwrap();
        stack.freeze_and_extend(random_adapter(5, 4, 2, adalora, seed + 99)).unwrap();
        let mode = if adalora { LossMode::OAdaLora } else { LossMode::OLora };
        let mut tape = Tape::new();
        let task = tape.constant(Matrix::filled(1, 1, 0.75));
        let (total, br) = combined_loss(&mut tape, task, [&stack], l1, l2, mode).unwrap();
        let expect = 0.75 + l1 * br.orth_loss + l2 * br.adalora_reg;
        prop_assert!((tape.scalar(total) - expect).abs() <= 1e-12 * (1.0 + expect));
        prop_assert!((br.total - expect).abs() <= 1e-12 * (1.0 + expect));
        prop_assert_eq!(br.adalora_reg == 0.0, !adalora);
    }

    #[test]
    fn stack_record_roundtrip_is_exact(
        kinds in prop::collection::vec((1usize..4, any::<bool>()), 1..4),
        seed in 0u64..1 << 48,
    ) {
        let layer = layer_with_stack(5, 6, &kinds, seed);
        let json = serde_json::to_string(&StackRecord::from_stack("w", &layer.stack)).unwrap();
        let back: StackRecord = serde_json::from_str(&json).unwrap();
        let stack = back.to_stack().unwrap();
        prop_assert_eq!(stack.delta_sum(), layer.stack.delta_sum());
        let sums = |s: &AdapterStack| s.iter().map(Adapter::checksum).collect::<Vec<_>>();
        prop_assert_eq!(sums(&stack), sums(&layer.stack));
    }

    #[test]
    fn freezing_a_new_adapter_keeps_earlier_ones_bitwise(
        kinds in prop::collection::vec((1usize..4, any::<bool>()), 1..4),
        seed in 0u64..1 << 48,
    ) {
        let mut layer = layer_with_stack(6, 6, &kinds, seed);
        let before: Vec<u64> = layer.stack.iter().map(Adapter::checksum).collect();
        layer.stack.freeze_and_extend(random_adapter(6, 6, 2, false, seed ^ 3)).unwrap();
        let after: Vec<u64> = layer.stack.frozen().iter().map(Adapter::checksum).collect();
        prop_assert_eq!(before, after);
        prop_assert!(layer.stack.frozen().iter().all(|a| !a.is_trainable()));
    }

    #[test]
    fn forgetting_is_final_row_minus_diagonal(
        matrix in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 3), 3),
    ) {
        let results: Vec<StageResult> = matrix.iter().enumerate().map(|(i, r)| stage(i, r.clone())).collect();
        let rep = forgetting_report(&results).unwrap();
        prop_assert_eq!(rep.per_task.len(), 2);
        for (n, f) in rep.per_task.iter().enumerate() {
            prop_assert_eq!(*f, matrix[2][n] - matrix[n][n]);
        }
        prop_assert_eq!(rep.final_new_task_loss, matrix[2][2]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_a_batch_permutes_per_example_losses(
        seed in 0u64..1 << 48,
        n in 2usize..6,
        rot in 1usize..5,
    ) {
        let cfg = BlockConfig { model_dim: 8, ff_dim: 16, output_dim: 3, ..BlockConfig::default() };
        let model = ToyModel::new(cfg, seed).unwrap();
        let seq = 3;
        let tokens = randn(n * seq, 8, 1.0, seed ^ 1);
        let targets = randn(n, 3, 1.0, seed ^ 2);
        let batch = Batch::new(tokens, seq).unwrap();
        let per_example = |b: &Batch, t: &Matrix| -> Vec<f64> {
            (0..n).map(|i| {
                let mut tape = Tape::new();
                let pred = model.forward(&mut tape, &b.slice(i, 1).unwrap()).unwrap();
                let l = task_loss(&mut tape, pred, &t.slice_rows(i, 1).unwrap()).unwrap();
                tape.scalar(l)
            }).collect()
        };
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let parts: Vec<Batch> = order.iter().map(|&i| batch.slice(i, 1).unwrap()).collect();
        let refs: Vec<&Batch> = parts.iter().collect();
        let permuted = Batch::concat(&refs).unwrap();
        let rows: Vec<Matrix> = order.iter().map(|&i| targets.slice_rows(i, 1).unwrap()).collect();
        let row_refs: Vec<&Matrix> = rows.iter().collect();
        let permuted_targets = Matrix::concat_rows(&row_refs).unwrap();

        let base = per_example(&batch, &targets);
        let perm = per_example(&permuted, &permuted_targets);
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(perm[j], base[i]);
        }
        // whole-batch predictions are row-permuted too
        let full = model.predict(&batch).unwrap();
        let full_perm = model.predict(&permuted).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert!((0..3).all(|c| (full.get(i, c) - full_perm.get(j, c)).abs() <= 1e-12));
        }
    }
}
