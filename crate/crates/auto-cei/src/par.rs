//! Bounded, order-preserving parallel map.
//!
//! Results come back in input order regardless of worker count, which keeps
//! downstream float reductions and serialised artifacts bit-identical at any
//! parallelism.

use rayon::prelude::*;

pub fn try_map<T, R, F>(width: usize, items: &[T], f: F) -> crate::Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> crate::Result<R> + Sync + Send,
{
    if width <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(width)
        .build()
        .expect("building a rayon pool with a positive thread count");
    pool.install(|| {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect::<crate::Result<Vec<R>>>()
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_is_input_order_at_any_width() {
        let items: Vec<u64> = (0..100).collect();
        let seq = super::try_map(1, &items, |i, v| Ok(i as u64 * 1000 + v)).unwrap();
        let par = super::try_map(8, &items, |i, v| Ok(i as u64 * 1000 + v)).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn first_error_surfaces() {
        let items: Vec<u64> = (0..10).collect();
        let res =
            super::try_map(
                4,
                &items,
                |_, v| {
                    if *v == 3 {
                        Err(crate::Error::EmptyBatch)
                    } else {
                        Ok(*v)
                    }
                },
            );
        assert!(res.is_err());
    }
}
