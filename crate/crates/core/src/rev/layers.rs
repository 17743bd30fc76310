/// Parameters of a depth-`L` stack: one bundle per layer, or a single
/// bundle reused by every layer (weight tying).
#[derive(Debug)]
pub enum Layers<'a, P> {
    Distinct(&'a [P]),
    Tied { params: &'a P, depth: usize },
}

impl<'a, P> Layers<'a, P> {
    pub fn depth(&self) -> usize {
        match self {
            Layers::Distinct(ps) => ps.len(),
            Layers::Tied { depth, .. } => *depth,
        }
    }

    pub fn get(&self, layer: usize) -> &'a P {
        match self {
            Layers::Distinct(ps) => &ps[layer],
            Layers::Tied { params, .. } => params,
        }
    }

    /// Index of the gradient bundle that layer `layer` accumulates into.
    pub fn slot(&self, layer: usize) -> usize {
        match self {
            Layers::Distinct(_) => layer,
            Layers::Tied { .. } => 0,
        }
    }

    pub fn num_bundles(&self) -> usize {
        match self {
            Layers::Distinct(ps) => ps.len(),
            Layers::Tied { .. } => 1,
        }
    }
}

impl<P> Clone for Layers<'_, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<P> Copy for Layers<'_, P> {}
