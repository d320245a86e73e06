//! Functionals of the simulated pair (state path, driver path).

use crate::grid::Path;

/// A measurable functional of the pair. Implementations must be pure.
pub trait PathFunctional: Sync {
    fn eval(&self, x: &Path, beta: &Path) -> f64;

    /// Gradient with respect to the state nodes (flat, stride `x.dim()`),
    /// for functionals that declare themselves differentiable in the state.
    /// Required by pathwise optimization; `None` disables that mode.
    fn state_gradient(&self, _x: &Path, _beta: &Path) -> Option<Vec<f64>> {
        None
    }
}

impl<F> PathFunctional for F
where
    F: Fn(&Path, &Path) -> f64 + Sync,
{
    fn eval(&self, x: &Path, beta: &Path) -> f64 {
        self(x, beta)
    }
}

/// Which component of the pair a terminal functional reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    State,
    Driver,
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl PathFunctional for Constant {
    fn eval(&self, _x: &Path, _beta: &Path) -> f64 {
        self.0
    }

    fn state_gradient(&self, x: &Path, _beta: &Path) -> Option<Vec<f64>> {
        Some(vec![0.0; x.values().len()])
    }
}

/// `lambda * w_coord(1)` on the chosen component.
#[derive(Debug, Clone, Copy)]
pub struct TerminalLinear {
    pub lambda: f64,
    pub component: Component,
    pub coord: usize,
}

impl TerminalLinear {
    pub fn state(lambda: f64) -> Self {
        TerminalLinear {
            lambda,
            component: Component::State,
            coord: 0,
        }
    }

    pub fn driver(lambda: f64) -> Self {
        TerminalLinear {
            lambda,
            component: Component::Driver,
            coord: 0,
        }
    }
}

impl PathFunctional for TerminalLinear {
    fn eval(&self, x: &Path, beta: &Path) -> f64 {
        let w = match self.component {
            Component::State => x,
            Component::Driver => beta,
        };
        self.lambda * w.terminal()[self.coord]
    }

    fn state_gradient(&self, x: &Path, _beta: &Path) -> Option<Vec<f64>> {
        if self.component != Component::State {
            return None;
        }
        let mut g = vec![0.0; x.values().len()];
        let n = x.grid().n_steps();
        g[n * x.dim() + self.coord] = self.lambda;
        Some(g)
    }
}

/// `lambda * w_coord(1)^2` on the chosen component.
#[derive(Debug, Clone, Copy)]
pub struct TerminalQuadratic {
    pub lambda: f64,
    pub component: Component,
    pub coord: usize,
}

impl TerminalQuadratic {
    pub fn state(lambda: f64) -> Self {
        TerminalQuadratic {
            lambda,
            component: Component::State,
            coord: 0,
        }
    }

    pub fn driver(lambda: f64) -> Self {
        TerminalQuadratic {
            lambda,
            component: Component::Driver,
            coord: 0,
        }
    }
}

impl PathFunctional for TerminalQuadratic {
    fn eval(&self, x: &Path, beta: &Path) -> f64 {
        let w = match self.component {
            Component::State => x,
            Component::Driver => beta,
        };
        let v = w.terminal()[self.coord];
        self.lambda * v * v
    }

    fn state_gradient(&self, x: &Path, _beta: &Path) -> Option<Vec<f64>> {
        if self.component != Component::State {
            return None;
        }
        let mut g = vec![0.0; x.values().len()];
        let n = x.grid().n_steps();
        g[n * x.dim() + self.coord] = 2.0 * self.lambda * x.terminal()[self.coord];
        Some(g)
    }
}

/// `lambda * sum_k |x(t_k)|^2 dt` over interior-left nodes (a left-endpoint
/// quadrature of the running squared norm of the state).
#[derive(Debug, Clone, Copy)]
pub struct RunningQuadratic {
    pub lambda: f64,
}

impl PathFunctional for RunningQuadratic {
    fn eval(&self, x: &Path, _beta: &Path) -> f64 {
        let dt = x.grid().dt();
        let n = x.grid().n_steps();
        let mut acc = 0.0;
        for k in 0..n {
            acc += x.node(k).iter().map(|v| v * v).sum::<f64>() * dt;
        }
        self.lambda * acc
    }

    fn state_gradient(&self, x: &Path, _beta: &Path) -> Option<Vec<f64>> {
        let dt = x.grid().dt();
        let n = x.grid().n_steps();
        let dim = x.dim();
        let mut g = vec![0.0; x.values().len()];
        for k in 0..n {
            for i in 0..dim {
                g[k * dim + i] = 2.0 * self.lambda * x.node(k)[i] * dt;
            }
        }
        Some(g)
    }
}
