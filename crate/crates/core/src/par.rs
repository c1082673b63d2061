//! Data-parallel helpers. Results always come back in input order, and
//! reductions fold left to right, so parallel and sequential runs are
//! bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    /// Rayon's global pool. Only available with the `parallel` feature.
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Mode {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Mode::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Mode::Sequential
        }
    }
}

pub fn map_with<T, R, F>(mode: Mode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        Mode::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Mode::Parallel => items.par_iter().map(f).collect(),
    }
}

/// Maps `f` over `items` in the default mode, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_with(Mode::default(), items, f)
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<usize> = (0..1000).collect();
        let doubled: Vec<usize> = v.iter().map(|x| x * 2).collect();
        assert_eq!(map(&v, |x| x * 2), doubled);
        assert_eq!(map_with(Mode::Sequential, &v, |x| x * 2), doubled);
    }
}
