use elf::gradcheck::{micro_network, relative_error, standard_suite, TOLERANCE};
use elf::exit::elf_loss;
use elf::layers::{softmax, softmax_row};
use elf::losses::{ClassWeights, ExitLoss};
use elf::Tensor;
use proptest::prelude::*;

#[test]
fn every_gradient_matches_finite_differences() {
    let checks = standard_suite().unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "failed checks: {failed:#?}");
    assert!(checks.iter().any(|c| c.name.starts_with("elf ")));
    for c in &checks {
        assert!(c.relative_error.is_finite());
        assert!(c.relative_error < TOLERANCE);
    }
}

#[test]
fn micro_network_mixes_exits() {
    let (net, x, labels, policy) = micro_network().unwrap();
    assert_eq!(net.exits(), 2);
    let logits = net.infer_all(&x).unwrap();
    let w = ClassWeights::uniform(2);
    let exits: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let rows: Vec<&[f64]> = logits.iter().map(|z| z.item(b)).collect();
            elf_loss(&rows, y, &ExitLoss::CrossEntropy, &w, &policy).unwrap().trace.exit
        })
        .collect();
    assert!(exits.contains(&1) && exits.contains(&2), "{exits:?}");
}

#[test]
fn relative_error_edge_cases() {
    assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    assert_eq!(relative_error(&[1.0], &[1.0]), 0.0);
    assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax_row(&z);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(
        z in prop::collection::vec(-20.0f64..20.0, 2..10),
        shift in -100.0f64..100.0,
    ) {
        let a = softmax_row(&z);
        let b = softmax_row(&z.iter().map(|v| v + shift).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_preserves_order(z in prop::collection::vec(-30.0f64..30.0, 2..10)) {
        let p = softmax_row(&z);
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] > z[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn batched_softmax_matches_rows(rows in 1usize..5, z in prop::collection::vec(-10.0f64..10.0, 12)) {
        let cols = 12 / 3;
        let data = z[..cols * rows.min(3)].to_vec();
        let n = data.len() / cols;
        let t = Tensor::new(vec![n, cols], data.clone()).unwrap();
        let out = softmax(&t).unwrap();
        for r in 0..n {
            prop_assert_eq!(out.item(r).to_vec(), softmax_row(&data[r * cols..(r + 1) * cols]));
        }
    }
}
