//! Thread-pool execution of devices and experiment jobs.

use anyhow::Result;
use rayon::prelude::*;

use fedbilevel_core::federation::{DeviceExecutor, DeviceState};

/// Steps devices concurrently on the current rayon pool.
#[derive(Clone, Copy, Debug, Default)]
pub struct Parallel;

impl DeviceExecutor for Parallel {
    fn for_each_device(
        &self,
        devices: &mut [DeviceState],
        step: &(dyn Fn(&mut DeviceState) -> fedbilevel_core::Result<()> + Sync),
    ) -> fedbilevel_core::Result<()> {
        if devices.len() < 2 {
            return devices.iter_mut().try_for_each(step);
        }
        let results: Vec<_> = devices.par_iter_mut().map(step).collect();
        // first error in device order
        results.into_iter().collect()
    }
}

/// A fixed-size worker pool. Results never depend on its size.
pub struct Workers {
    pool: rayon::ThreadPool,
}

impl Workers {
    /// `0` picks the number of available cores.
    pub fn new(count: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(count).build()?;
        Ok(Self { pool })
    }

    pub fn count(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Evaluates `job` on every input and returns outputs in input order.
    pub fn map<T, U, F>(&self, inputs: &[T], job: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync,
    {
        self.pool.install(|| inputs.par_iter().map(&job).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedbilevel_core::numerics::RandomStream;
    use fedbilevel_core::{Error, Vector};

    fn devices(n: usize) -> Vec<DeviceState> {
        (0..n)
            .map(|k| DeviceState {
                device_id: k,
                x: Vector::zeros(1),
                y: Vector::zeros(1),
                est: None,
                stream: RandomStream::new(0, k as u64),
            })
            .collect()
    }

    #[test]
    fn lowest_failing_device_wins() {
        let workers = Workers::new(4).unwrap();
        let mut ds = devices(16);
        let err = workers
            .pool
            .install(|| {
                Parallel.for_each_device(&mut ds, &|d| {
                    if d.device_id % 5 == 3 {
                        Err(Error::MissingPreviousIterate)
                    } else {
                        d.x[0] = d.device_id as f64;
                        Ok(())
                    }
                })
            })
            .unwrap_err();
        assert_eq!(err, Error::MissingPreviousIterate);
        assert_eq!(ds[15].x[0], 15.0);
    }

    #[test]
    fn map_keeps_input_order() {
        let workers = Workers::new(3).unwrap();
        let out = workers.map(&(0..100).collect::<Vec<u64>>(), |v| v * v);
        assert_eq!(out, (0..100).map(|v| v * v).collect::<Vec<_>>());
    }
}
