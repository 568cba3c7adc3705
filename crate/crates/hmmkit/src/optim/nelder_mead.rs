//! Downhill simplex method with the standard coefficients (reflection 1,
//! expansion 2, contraction 0.5, shrink 0.5). The state is resumable so the
//! hybrid scheme can checkpoint a single trajectory at increasing budgets.

use super::problem::{norm2, Problem};

pub(crate) struct SimplexState {
    verts: Vec<Vec<f64>>,
    fvals: Vec<f64>,
}

impl SimplexState {
    /// Initial simplex: `x0` plus per-coordinate steps of `0.05·max(1,|x0_i|)`.
    /// `None` when the objective is not finite at `x0`.
    pub fn init(prob: &Problem, x0: &[f64]) -> Option<Self> {
        let f0 = prob.eval(x0)?;
        let n = x0.len();
        let mut verts = Vec::with_capacity(n + 1);
        let mut fvals = Vec::with_capacity(n + 1);
        verts.push(x0.to_vec());
        fvals.push(f0);
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += 0.05 * x0[i].abs().max(1.0);
            // a non-finite vertex joins as +inf and is displaced immediately
            let fv = prob.eval(&v).unwrap_or(f64::INFINITY);
            verts.push(v);
            fvals.push(fv);
        }
        let mut state = SimplexState { verts, fvals };
        state.order();
        Some(state)
    }

    fn order(&mut self) {
        let mut idx: Vec<usize> = (0..self.fvals.len()).collect();
        idx.sort_by(|&a, &b| {
            self.fvals[a]
                .partial_cmp(&self.fvals[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        self.verts = idx.iter().map(|&i| self.verts[i].clone()).collect();
        self.fvals = idx.iter().map(|&i| self.fvals[i]).collect();
    }

    pub fn best(&self) -> (&[f64], f64) {
        (&self.verts[0], self.fvals[0])
    }

    /// Max distance from the best vertex to any other.
    pub fn diameter(&self) -> f64 {
        let best = &self.verts[0];
        self.verts[1..]
            .iter()
            .map(|v| {
                norm2(
                    &v.iter()
                        .zip(best.iter())
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>(),
                )
            })
            .fold(0.0, f64::max)
    }

    pub fn f_spread(&self) -> f64 {
        self.fvals[self.fvals.len() - 1] - self.fvals[0]
    }

    /// One simplex operation (reflection / expansion / contraction / shrink).
    pub fn step(&mut self, prob: &Problem) {
        let n = self.verts[0].len();
        let worst = n;
        let centroid: Vec<f64> = (0..n)
            .map(|d| self.verts[..worst].iter().map(|v| v[d]).sum::<f64>() / worst as f64)
            .collect();
        let point_at = |coef: f64| -> Vec<f64> {
            (0..n)
                .map(|d| centroid[d] + coef * (centroid[d] - self.verts[worst][d]))
                .collect()
        };
        let eval = |v: &[f64]| prob.eval(v).unwrap_or(f64::INFINITY);

        let refl = point_at(1.0);
        let f_refl = eval(&refl);
        if f_refl < self.fvals[0] {
            let exp = point_at(2.0);
            let f_exp = eval(&exp);
            if f_exp < f_refl {
                self.replace_worst(exp, f_exp);
            } else {
                self.replace_worst(refl, f_refl);
            }
        } else if f_refl < self.fvals[worst - 1] {
            self.replace_worst(refl, f_refl);
        } else {
            // contraction: outside if the reflection improved on the worst
            let (cand, f_cand) = if f_refl < self.fvals[worst] {
                let c = point_at(0.5);
                let fc = eval(&c);
                (c, fc)
            } else {
                let c = point_at(-0.5);
                let fc = eval(&c);
                (c, fc)
            };
            if f_cand < self.fvals[worst].min(f_refl) {
                self.replace_worst(cand, f_cand);
            } else {
                // shrink toward the best vertex
                for k in 1..=worst {
                    let v: Vec<f64> = (0..n)
                        .map(|d| self.verts[0][d] + 0.5 * (self.verts[k][d] - self.verts[0][d]))
                        .collect();
                    self.fvals[k] = eval(&v);
                    self.verts[k] = v;
                }
                self.order();
            }
        }
    }

    fn replace_worst(&mut self, v: Vec<f64>, f: f64) {
        let worst = self.verts.len() - 1;
        self.verts[worst] = v;
        self.fvals[worst] = f;
        self.order();
    }
}
