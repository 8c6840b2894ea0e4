//! The task checkers on hand-built trajectories: a stacking result just
//! inside and just outside the tolerance.

use hilearn::geometry::Pose;
use hilearn::simworld::{check_success, Family, Goal, TaskSpec};
use hilearn::trajectory::{Demonstration, Observation};

/// Final frame with every block at its slot, the first one pushed `offset`
/// metres sideways.
fn stacking_final(spec: &TaskSpec, offset: f64) -> Demonstration {
    let Goal::Stack { base, slots } = &spec.goal else { unreachable!() };
    let mut world = spec.initial_state(0).poses;
    for (i, (b, slot)) in slots.iter().enumerate() {
        let shift = if i == 0 { offset } else { 0.0 };
        world[*b] = world[*base].compose(&Pose::from_translation(shift, 0.0, 0.0)).compose(slot);
    }
    Demonstration::new(spec.family.name(), spec.object_labels(), vec![Observation::from_world(0.0, &world)])
}

fn main() {
    let spec = TaskSpec::new(Family::StackingA);
    let tol = spec.tolerances.stack_tolerance;
    for factor in [0.0, 0.5, 0.9, 1.1, 2.0] {
        let r = check_success(&spec, &stacking_final(&spec, factor * tol));
        println!("offset {:.1} x tolerance: success={} ({})", factor, r.success, r.summary());
    }
}
