//! Latency proxy: block transfers cost a fixed number of ticks per channel
//! and channels run in parallel; MAC checks on the read path wait for a
//! free engine, write-side MACs do not.

use crate::crypto::MacUnitPool;

#[derive(Debug, Clone)]
pub struct Clock {
    now: u64,
    block_ticks: u64,
    batch: Vec<u64>,
    critical: u64,
    background: u64,
    pool: MacUnitPool,
}

impl Clock {
    pub fn new(channels: usize, block_ticks: u64, mac_units: usize, mac_latency: u64) -> Self {
        Clock { now: 0, block_ticks, batch: vec![0; channels], critical: 0, background: 0, pool: MacUnitPool::new(mac_units, mac_latency) }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn transfer(&mut self, channel: u32) {
        self.batch[channel as usize] += 1;
    }

    /// A MAC the current batch must wait for.
    pub fn critical_mac(&mut self) {
        self.critical += 1;
    }

    pub fn background_mac(&mut self) {
        self.background += 1;
    }

    /// Ends a phase: transfers complete, then queued MACs are issued.
    pub fn flush(&mut self) {
        let busiest = self.batch.iter().copied().max().unwrap_or(0);
        self.now += busiest * self.block_ticks;
        self.batch.iter_mut().for_each(|b| *b = 0);
        let mut done = self.now;
        for _ in 0..self.critical {
            done = done.max(self.pool.submit(self.now));
        }
        for _ in 0..self.background {
            self.pool.submit(self.now);
        }
        self.now = done;
        self.critical = 0;
        self.background = 0;
    }

    pub fn mac_submissions(&self) -> u64 {
        self.pool.submissions()
    }

    pub fn mac_queue_wait(&self) -> u64 {
        self.pool.queue_wait()
    }
}
