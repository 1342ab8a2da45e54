//! Fixtures shared by the criterion benchmarks in `benches/`.

use nalgebra::{DMatrix, DVector};
use spreadqp::experiment::simulate;
use spreadqp::reference::build_reference;
use spreadqp::sim::ModelKind;
use spreadqp::{ModelParams, QpProblem, ReferenceBundle, ReferenceSpec, SimConfig, State, Strategy};

pub struct Fixture {
    pub params: ModelParams,
    pub refs: ReferenceBundle,
    /// Free flight shortly before the first impact.
    pub approach: State,
    pub approach_t: f64,
    /// Both contacts closed, well into the post-impact phase.
    pub pressed: State,
    pub pressed_t: f64,
}

impl Fixture {
    /// States taken from a default rigid run.
    pub fn new() -> Self {
        let params = ModelParams::default();
        let refs = build_reference(&params, &ReferenceSpec::default()).expect("default reference");
        let log = simulate(ModelKind::Rigid, &params, &SimConfig::default(), &refs, Strategy::RsIntermediate).expect("default run");
        let at = |t: f64| {
            let s = log.samples.iter().find(|s| s.t >= t).expect("sample in range");
            (State::new(s.q, s.qdot), s.t)
        };
        let (approach, approach_t) = at(0.98);
        let (pressed, pressed_t) = at(1.2);
        Fixture { params, refs, approach, approach_t, pressed, pressed_t }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}

/// A strictly convex QP of the controller's size with `m` active-capable bounds.
pub fn box_qp(n: usize, m: usize) -> QpProblem {
    let h = DMatrix::from_fn(n, n, |r, c| if r == c { 2.0 + r as f64 } else { 0.1 / (1.0 + (r + c) as f64) });
    let f = DVector::from_fn(n, |r, _| if r % 2 == 0 { -4.0 } else { 3.0 });
    let mut a = DMatrix::zeros(m, n);
    for i in 0..m {
        a[(i, i % n)] = 1.0;
    }
    let b = DVector::from_element(m, 0.5);
    QpProblem::new(h, f).with_inequalities(a, b)
}
