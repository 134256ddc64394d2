mod common;

use proptest::prelude::*;
use s3ld::cli::RunConfig;
use s3ld::eval::{
    abx_score, greedy_ctc_decode, levenshtein, token_error_rate, utterance_error_rate, AbxInstance, EvalPair,
    FrameDistance,
};
use s3ld::objectives::{contrastive_loss, kmeans_assign, kmeans_fit, sample_distractors, DistractorPolicy};
use s3ld::tensor::{Graph, Tensor};
use s3ld::trainer::{ema_update, plan_batches, plan_fixed, Checkpoint};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, cols), rows)
}

fn partitions(ids: impl Iterator<Item = usize>, n: usize) -> bool {
    let mut seen = vec![0usize; n];
    for i in ids {
        seen[i] += 1;
    }
    seen.iter().all(|&c| c == 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dynamic_plan_respects_budget_and_partitions(
        frames in prop::collection::vec(1usize..400, 1..300),
        budget in 50usize..1200,
        seed in any::<u64>(),
    ) {
        let plan = plan_batches(&frames, budget, seed).unwrap();
        for b in &plan.batches {
            prop_assert!(b.real_frames() <= budget);
            for (&id, &f) in b.ids.iter().zip(&b.frames) {
                prop_assert_eq!(f, frames[id].min(budget));
            }
        }
        prop_assert!(partitions(plan.batches.iter().flat_map(|b| b.ids.iter().copied()), frames.len()));
        prop_assert_eq!(plan, plan_batches(&frames, budget, seed).unwrap());
    }

    #[test]
    fn fixed_plan_partitions(frames in prop::collection::vec(1usize..400, 1..200), per in 1usize..20, seed in any::<u64>()) {
        let plan = plan_fixed(&frames, per, seed).unwrap();
        prop_assert!(plan.batches.iter().all(|b| b.ids.len() <= per));
        prop_assert!(partitions(plan.batches.iter().flat_map(|b| b.ids.iter().copied()), frames.len()));
    }

    #[test]
    fn ema_stays_between_teacher_and_student(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
        alpha in 0.0f64..=1.0,
    ) {
        let (t0, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut teacher = vec![Tensor::new(vec![t0.len()], t0.clone()).unwrap()];
        let student = vec![Tensor::new(vec![s.len()], s.clone()).unwrap()];
        ema_update(&mut teacher, &student, alpha).unwrap();
        for ((&a, &b), &v) in t0.iter().zip(&s).zip(teacher[0].data()) {
            prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn levenshtein_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..12),
        b in prop::collection::vec(0u8..4, 0..12),
        c in prop::collection::vec(0u8..4, 0..12),
    ) {
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert!(levenshtein(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn error_rates_are_bounded(items in prop::collection::vec(
        (prop::collection::vec(1usize..5, 0..8), prop::collection::vec(1usize..5, 1..8)), 1..10)
    ) {
        let pairs: Vec<EvalPair> = items.into_iter().map(|(h, r)| EvalPair::new(h, r)).collect();
        let ter = token_error_rate(&pairs).unwrap();
        let uer = utterance_error_rate(&pairs).unwrap();
        prop_assert!(ter >= 0.0);
        prop_assert!((0.0..=1.0).contains(&uer));
        if ter == 0.0 {
            prop_assert_eq!(uer, 0.0);
        }
    }

    #[test]
    fn softmax_rows_and_columns_sum_to_one(x in matrix(4, 6)) {
        let mut g = Graph::<f64>::inference();
        let v = g.constant(Tensor::from_rows(&x).unwrap());
        let by_row = g.softmax(v, 1).unwrap();
        let by_col = g.softmax(v, 0).unwrap();
        let (r, c) = (g.value(by_row).clone(), g.value(by_col).clone());
        for i in 0..4 {
            prop_assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for j in 0..6 {
            prop_assert!(((0..4).map(|i| c.at(i, j)).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(r.data().iter().chain(c.data()).all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn greedy_decode_ignores_row_shifts(x in matrix(8, 4), shifts in prop::collection::vec(-5.0f64..5.0, 8)) {
        let a = Tensor::from_rows(&x).unwrap();
        let shifted: Vec<Vec<f64>> = x.iter().zip(&shifts).map(|(r, s)| r.iter().map(|v| 2.0 * v + s).collect()).collect();
        let b = Tensor::from_rows(&shifted).unwrap();
        prop_assert_eq!(greedy_ctc_decode(&a).unwrap(), greedy_ctc_decode(&b).unwrap());
    }

    #[test]
    fn abx_swap_complements(triples in prop::collection::vec((matrix(3, 3), matrix(2, 3), matrix(3, 3)), 1..6)) {
        let t = |rows: &Vec<Vec<f64>>| Tensor::from_rows(rows).unwrap();
        let inst: Vec<AbxInstance> = triples
            .iter()
            .map(|(a, b, x)| AbxInstance { a: t(a), b: t(b), x: t(x), cat_a: 0, cat_b: 1 })
            .collect();
        let swapped: Vec<AbxInstance> = triples
            .iter()
            .map(|(a, b, x)| AbxInstance { a: t(b), b: t(a), x: t(x), cat_a: 1, cat_b: 0 })
            .collect();
        let s = abx_score(&inst, FrameDistance::Angular).unwrap();
        let w = abx_score(&swapped, FrameDistance::Angular).unwrap();
        prop_assert!((s + w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_ignores_frame_scale(
        z in matrix(5, 4),
        zt in matrix(5, 4),
        scales in prop::collection::vec((0.1f64..10.0, 0.1f64..10.0), 5),
    ) {
        prop_assume!(z.iter().chain(&zt).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let d = sample_distractors(5, DistractorPolicy::InUtteranceAll).unwrap();
        let loss = |z: &[Vec<f64>], zt: &[Vec<f64>]| {
            let mut g = Graph::<f64>::inference();
            let v = g.constant(Tensor::from_rows(z).unwrap());
            let l = contrastive_loss(&mut g, v, &Tensor::from_rows(zt).unwrap(), 0.1, &d).unwrap();
            g.value(l).data()[0]
        };
        let zs: Vec<Vec<f64>> = z.iter().zip(&scales).map(|(r, (a, _))| r.iter().map(|v| v * a).collect()).collect();
        let zts: Vec<Vec<f64>> = zt.iter().zip(&scales).map(|(r, (_, b))| r.iter().map(|v| v * b).collect()).collect();
        let (l0, l1) = (loss(&z, &zt), loss(&zs, &zts));
        prop_assert!((l0 - l1).abs() <= 1e-6 * l0.abs().max(1e-12));
    }

    #[test]
    fn kmeans_inertia_never_rises_and_assignment_is_nearest(
        pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 6..60),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let m = kmeans_fit(&pts, k, 30, seed).unwrap();
        prop_assert!(m.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert!(m.centroids.iter().flatten().all(|v| v.is_finite()));
        let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        for (p, &l) in pts.iter().zip(&kmeans_assign(&pts, &m).unwrap()) {
            prop_assert!(m.centroids.iter().all(|c| d2(p, &m.centroids[l]) <= d2(p, c)));
        }
    }

    #[test]
    fn checkpoint_round_trips_and_detects_flips(
        meta in prop::collection::btree_map("[a-z_.]{1,8}", "[ -~]{0,16}", 0..6),
        arrays in prop::collection::vec(
            ("[a-z/._]{1,12}", prop::collection::vec(1usize..4, 1..3), any::<u64>()), 0..4),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut ck = Checkpoint::new("conv 8 3 2\n");
        for (k, v) in &meta {
            ck.set(k, v.trim());
        }
        for (name, shape, s) in &arrays {
            let mut r = common::rng(*s);
            ck.push(name.clone(), common::uniform(&mut r, shape, -1e3, 1e3).cast());
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x20;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
        prop_assert!(Checkpoint::from_bytes(&bytes[..i]).is_err());
    }

    #[test]
    fn config_text_round_trips(edits in prop::collection::vec((any::<prop::sample::Index>(), "[A-Za-z0-9._+-]{1,10}"), 0..8)) {
        let mut rc = RunConfig::default();
        let keys: Vec<String> = rc.iter().map(|(k, _)| k.to_string()).collect();
        for (i, v) in &edits {
            rc.set(&keys[i.index(keys.len())], v).unwrap();
        }
        let mut back = RunConfig::default();
        back.apply_text(&rc.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), rc.to_text());
    }
}
