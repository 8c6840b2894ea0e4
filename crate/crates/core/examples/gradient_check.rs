//! Central finite differences against the hand-written backward passes of
//! a dense layer and an LSTM step.

use hilearn::neural::{Dense, LstmCell, LstmState, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "d", 5, 4, false, &mut rng);
    let lstm = LstmCell::new(&mut store, "l", 4, 3, &mut rng);
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let state = LstmState {
        hidden: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
        cell: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };

    // scalar objective: sum of the next hidden state and cell state
    let objective = |store: &ParamStore| {
        let y = dense.forward(store, &x).unwrap();
        let (next, _) = lstm.step(store, &state, &y).unwrap();
        next.hidden.iter().sum::<f64>() + next.cell.iter().sum::<f64>()
    };

    let y = dense.forward(&store, &x).unwrap();
    let (_, cache) = lstm.step(&store, &state, &y).unwrap();
    let mut grads = store.zero_grads();
    let (dy, _, _) = lstm.backward(&store, &cache, &[1.0; 3], &[1.0; 3], &mut grads);
    dense.backward(&store, &x, &y, &dy, &mut grads);

    let eps = 1e-6;
    let ids: Vec<_> = store.params().iter().map(|p| (p.name.clone(), store.id(&p.name).unwrap(), p.value.len())).collect();
    for (name, id, len) in ids {
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let orig = store.value(id)[i];
            store.value_mut(id)[i] = orig + eps;
            let up = objective(&store);
            store.value_mut(id)[i] = orig - eps;
            let down = objective(&store);
            store.value_mut(id)[i] = orig;
            worst = worst.max(rel_err(grads.get(id)[i], (up - down) / (2.0 * eps)));
        }
        println!("{name:<4} {len:>3} entries, worst relative error {worst:.2e}");
    }
}
