//! Batch splitting, device placement, class partitioning and the worker map
//! used to spread per-network work across logical devices.

use std::ops::Range;

use ndarray::s;

use crate::error::{Error, Result};
use crate::net::Matrix;

/// Device (1-based) hosting item `i` (1-based) among `n` devices:
/// `(i - 1 mod n) + 1`.
pub fn device_assignment(i: usize, n: usize) -> Result<usize> {
    if i == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("device_assignment needs i >= 1 and n >= 1, got i={i}, n={n}")));
    }
    Ok((i - 1) % n + 1)
}

/// Splits `rows` into `parts` equal contiguous ranges.
pub fn split_ranges(rows: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 {
        return Err(Error::InvalidArgument("cannot split into zero parts".into()));
    }
    if rows % parts != 0 {
        return Err(Error::InvalidArgument(format!("batch of {rows} rows is not divisible into {parts} parts")));
    }
    let m = rows / parts;
    Ok((0..parts).map(|j| j * m..(j + 1) * m).collect())
}

/// Partitions each generator's batch into `n_d` equal parts; `out[j][i]` is
/// part `j` of generator `i`'s batch, routed to critic `j`.
pub fn split_batches(per_generator: &[Matrix], n_d: usize) -> Result<Vec<Vec<Matrix>>> {
    let ranges = per_generator
        .iter()
        .map(|x| split_ranges(x.nrows(), n_d))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n_d)
        .map(|j| {
            per_generator
                .iter()
                .zip(&ranges)
                .map(|(x, r)| x.slice(s![r[j].clone(), ..]).to_owned())
                .collect()
        })
        .collect())
}

/// Classes (1-based) assigned to each generator. With `n_g <= k` the classes
/// are tiled contiguously, `k / n_g` per generator; with `n_g > k` generator
/// `g` gets class `((g - 1) mod k) + 1`.
pub fn class_partition(k: usize, n_g: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n_g == 0 {
        return Err(Error::InvalidArgument("class_partition needs K >= 1 and n_G >= 1".into()));
    }
    if n_g > k {
        return Ok((0..n_g).map(|g| vec![g % k + 1]).collect());
    }
    if k % n_g != 0 {
        return Err(Error::InvalidArgument(format!("{k} classes cannot be split evenly among {n_g} generators")));
    }
    let per = k / n_g;
    Ok((0..n_g).map(|g| (g * per + 1..=(g + 1) * per).collect()).collect())
}

/// Maps work items onto `count` logical devices with [`device_assignment`].
/// Each device runs its items on its own thread; results come back in item
/// order so reductions are identical to the single-worker path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Workers {
    count: usize,
}

impl Workers {
    pub fn new(count: usize) -> Self {
        Self { count: count.max(1) }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Items (0-based) owned by `device` (1-based) out of `n`.
    pub fn items_on(&self, device: usize, n: usize) -> Vec<usize> {
        (0..n).filter(|&i| (i % self.count) + 1 == device).collect()
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        if self.count == 1 || n <= 1 {
            return (0..n).map(f).collect();
        }
        let f = &f;
        let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (1..=self.count.min(n))
                .map(|device| {
                    let items = self.items_on(device, n);
                    scope.spawn(move || items.into_iter().map(|i| (i, f(i))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, v) in h.join().expect("worker panicked") {
                    slots[i] = Some(v);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every item computed")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn device_examples() {
        assert_eq!(device_assignment(1, 5).unwrap(), 1);
        assert_eq!(device_assignment(6, 5).unwrap(), 1);
        assert_eq!(device_assignment(5, 5).unwrap(), 5);
        assert!(device_assignment(0, 5).is_err());
        assert!(device_assignment(1, 0).is_err());
        let mut hosted = [0; 5];
        for i in 1..=10 {
            hosted[device_assignment(i, 5).unwrap() - 1] += 1;
        }
        assert_eq!(hosted, [2; 5]);
    }

    #[test]
    fn split_examples() {
        let x = Matrix::from_shape_fn((50, 2), |(r, c)| (r * 2 + c) as f64);
        let routed = split_batches(std::slice::from_ref(&x), 5).unwrap();
        assert_eq!(routed.len(), 5);
        let mut rows: Vec<f64> = routed.iter().flat_map(|p| p[0].column(0).to_vec()).collect();
        assert!(routed.iter().all(|p| p[0].nrows() == 10));
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, x.column(0).to_vec());
        let ident = split_batches(std::slice::from_ref(&x), 1).unwrap();
        assert_eq!(ident[0][0], x);
        assert!(split_batches(&[x], 3).is_err());
    }

    #[test]
    fn class_partition_examples() {
        let p = class_partition(10, 10).unwrap();
        assert!(p.iter().enumerate().all(|(g, c)| c == &vec![g + 1]));
        assert_eq!(class_partition(10, 5).unwrap()[1], vec![3, 4]);
        let cyc = class_partition(3, 6).unwrap();
        assert_eq!(cyc[0], vec![1]);
        assert_eq!(cyc[3], vec![1]);
        assert_eq!(cyc[5], vec![3]);
        assert!(class_partition(10, 4).is_err());
        assert_eq!(class_partition(4, 1).unwrap(), vec![vec![1, 2, 3, 4]]);
    }

    #[test]
    fn worker_map_preserves_order() {
        for count in 1..6 {
            let out = Workers::new(count).map(11, |i| i * i);
            assert_eq!(out, (0..11).map(|i| i * i).collect::<Vec<_>>());
        }
    }
}
