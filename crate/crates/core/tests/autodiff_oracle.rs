//! Random-graph gradient check against central finite differences.

mod common;

use common::graphs::sweep;
use semantic_autoencoder::autodiff::{Tape, Tensor};

#[test]
fn random_graphs_match_finite_differences() {
    let s = sweep(120);
    assert_eq!(s.failure, None, "first graph over 1e-4");
    assert!(s.all_kinds_covered, "every primitive exercised");
    eprintln!("worst relative error over {} graphs: {:.3e}", s.trials, s.worst);
}

#[test]
fn hand_derived_gradients() {
    // d/dx sum(x ⊙ x) = 2x
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let root = tape.sum(sq).unwrap();
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);

    // d/dx sum(x) = 1
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 3.0]).unwrap(), true);
    let root = tape.sum(x).unwrap();
    assert_eq!(tape.backward(root).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    // d/dx (x · SG(x)) = SG(x) = 3 at x = 3
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let sg = tape.stop_gradient(x);
    let root = tape.mul(x, sg).unwrap();
    assert_eq!(tape.backward(root).unwrap().get(x).unwrap(), &[3.0]);
}
