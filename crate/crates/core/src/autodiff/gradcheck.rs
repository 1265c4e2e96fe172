use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Central finite-difference check of parameter adjoints, in float64.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Coordinates sampled per parameter (all of them if the parameter is smaller).
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-4,
            samples: 32,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn new(h: f64, samples: usize, seed: u64) -> Self {
        GradCheck { h, samples, seed }
    }

    fn loss<F>(store: &ParamStore<f64>, build: &F) -> f64
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let mut g = Graph::new();
        let root = build(&mut g, store);
        g.value(root).item()
    }

    /// Adjoints of every parameter, as one flat vector per parameter.
    pub fn analytic<F>(store: &ParamStore<f64>, build: &F) -> Vec<Vec<f64>>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let mut g = Graph::new();
        let root = build(&mut g, store);
        let grads = g.backward(root);
        let mut s = store.clone();
        s.zero_grad();
        grads.accumulate_into(&g, &mut s);
        s.iter().map(|p| p.grad.clone()).collect()
    }

    /// Checks the adjoint of one parameter computed by backward.
    pub fn check<F>(&self, store: &ParamStore<f64>, id: ParamId, build: &F) -> GradCheckReport
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let analytic = Self::analytic(store, build);
        self.compare(store, id, &analytic[id.0], build)
    }

    /// Checks every parameter in the store.
    pub fn check_all<F>(&self, store: &ParamStore<f64>, build: &F) -> Vec<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let analytic = Self::analytic(store, build);
        store
            .ids()
            .map(|id| self.compare(store, id, &analytic[id.0], build))
            .collect()
    }

    /// Compares a supplied adjoint against finite differences. Exposed so the
    /// harness itself can be tested with corrupted adjoints.
    pub fn compare<F>(&self, store: &ParamStore<f64>, id: ParamId, analytic: &[f64], build: &F) -> GradCheckReport
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    {
        let n = store.get(id).len();
        assert_eq!(
            analytic.len(),
            n,
            "analytic gradient length mismatch for {}",
            store.get(id).name
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (id.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let coords: Vec<usize> = if n <= self.samples {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, self.samples).into_vec()
        };
        let mut s = store.clone();
        let mut report = GradCheckReport {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: coords.len(),
        };
        for &i in &coords {
            let x0 = store.get(id).value[i];
            s.get_mut(id).value[i] = x0 + self.h;
            let lp = Self::loss(&s, build);
            s.get_mut(id).value[i] = x0 - self.h;
            let lm = Self::loss(&s, build);
            s.get_mut(id).value[i] = x0;
            let num = (lp - lm) / (2.0 * self.h);
            let err = relative_error(analytic[i], num);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst_index = i;
                report.analytic = analytic[i];
                report.numeric = num;
            }
        }
        report
    }
}
