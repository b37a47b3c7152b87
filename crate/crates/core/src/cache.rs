//! Single-level set-associative data cache with LRU replacement.
//!
//! Lines filled by squashed speculative loads stay cached; that is the
//! covert channel every scenario decodes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_HIT_LATENCY: u64 = 4;
pub const DEFAULT_MISS_LATENCY: u64 = 300;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("cache sets must be a non-zero power of two, got {0}")]
    Sets(usize),
    #[error("cache ways must be non-zero")]
    Ways,
    #[error("line size must be a non-zero power of two, got {0}")]
    LineSize(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheGeometry {
    pub sets: usize,
    pub ways: usize,
    pub line_size: usize,
}

impl Default for CacheGeometry {
    fn default() -> Self {
        CacheGeometry {
            sets: 64,
            ways: 8,
            line_size: 64,
        }
    }
}

impl CacheGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.sets == 0 || !self.sets.is_power_of_two() {
            return Err(GeometryError::Sets(self.sets));
        }
        if self.ways == 0 {
            return Err(GeometryError::Ways);
        }
        if self.line_size == 0 || !self.line_size.is_power_of_two() {
            return Err(GeometryError::LineSize(self.line_size));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.sets * self.ways * self.line_size
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.line_size as u64
    }

    pub fn set_of(&self, addr: u64) -> usize {
        (self.line_of(addr) % self.sets as u64) as usize
    }

    fn tag_of(&self, addr: u64) -> u64 {
        self.line_of(addr) / self.sets as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheTiming {
    pub hit_latency: u64,
    pub miss_latency: u64,
    /// Uniform +/-10% on miss latency, drawn from the machine seed.
    pub jitter: bool,
}

impl Default for CacheTiming {
    fn default() -> Self {
        CacheTiming {
            hit_latency: DEFAULT_HIT_LATENCY,
            miss_latency: DEFAULT_MISS_LATENCY,
            jitter: false,
        }
    }
}

impl CacheTiming {
    /// Receiver threshold halfway between hit and miss.
    pub fn default_threshold(&self) -> u64 {
        (self.hit_latency + self.miss_latency) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessResult {
    pub hit: bool,
    pub latency: u64,
}

/// Tag store. Each set keeps its tags most-recently-used first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheState {
    geometry: CacheGeometry,
    sets: Vec<Vec<u64>>,
}

impl CacheState {
    pub fn new(geometry: CacheGeometry) -> Result<Self, GeometryError> {
        geometry.validate()?;
        Ok(CacheState {
            geometry,
            sets: vec![Vec::with_capacity(geometry.ways); geometry.sets],
        })
    }

    pub fn geometry(&self) -> CacheGeometry {
        self.geometry
    }

    /// Touches the line holding `addr`; returns whether it was present.
    /// On a miss the least recently used way of the set is evicted.
    pub fn touch(&mut self, addr: u64) -> bool {
        let tag = self.geometry.tag_of(addr);
        let ways = self.geometry.ways;
        let set = &mut self.sets[self.geometry.set_of(addr)];
        match set.iter().position(|&t| t == tag) {
            Some(i) => {
                let t = set.remove(i);
                set.insert(0, t);
                true
            }
            None => {
                if set.len() == ways {
                    set.pop();
                }
                set.insert(0, tag);
                false
            }
        }
    }

    /// Timed access. Jitter, when enabled, is drawn from `rng`.
    pub fn access(
        &mut self,
        addr: u64,
        timing: &CacheTiming,
        rng: &mut ChaCha8Rng,
    ) -> AccessResult {
        let hit = self.touch(addr);
        let latency = if hit {
            timing.hit_latency
        } else if timing.jitter {
            let spread = (timing.miss_latency / 10) as i64;
            let delta = rng.gen_range(-spread..=spread);
            (timing.miss_latency as i64 + delta).max(0) as u64
        } else {
            timing.miss_latency
        };
        AccessResult { hit, latency }
    }

    pub fn flush_line(&mut self, addr: u64) {
        let tag = self.geometry.tag_of(addr);
        let set = &mut self.sets[self.geometry.set_of(addr)];
        set.retain(|&t| t != tag);
    }

    pub fn is_cached(&self, addr: u64) -> bool {
        let tag = self.geometry.tag_of(addr);
        self.sets[self.geometry.set_of(addr)].contains(&tag)
    }

    /// Tags of one set, most recently used first.
    pub fn set_contents(&self, set: usize) -> &[u64] {
        &self.sets[set]
    }

    pub fn clear(&mut self) {
        self.sets.iter_mut().for_each(Vec::clear);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn cold_then_warm() {
        let mut c = CacheState::new(CacheGeometry::default()).unwrap();
        let t = CacheTiming::default();
        let mut r = rng();
        assert_eq!(
            c.access(0x1234, &t, &mut r),
            AccessResult {
                hit: false,
                latency: 300
            }
        );
        assert_eq!(
            c.access(0x1234, &t, &mut r),
            AccessResult {
                hit: true,
                latency: 4
            }
        );
    }

    #[test]
    fn flush_then_miss() {
        let mut c = CacheState::new(CacheGeometry::default()).unwrap();
        c.touch(0x40);
        c.flush_line(0x40);
        assert!(!c.is_cached(0x40));
        assert!(!c.touch(0x40));
    }

    #[test]
    fn flush_uncached_is_noop() {
        let mut c = CacheState::new(CacheGeometry::default()).unwrap();
        c.touch(0x80);
        let before = c.clone();
        c.flush_line(0x4000);
        assert_eq!(c, before);
    }

    #[test]
    fn flush_leaves_same_set_neighbour() {
        let g = CacheGeometry::default();
        let mut c = CacheState::new(g).unwrap();
        let a = 0x1000;
        let b = a + (g.sets * g.line_size) as u64;
        assert_eq!(g.set_of(a), g.set_of(b));
        c.touch(a);
        c.touch(b);
        c.flush_line(a);
        assert!(!c.is_cached(a));
        assert!(c.is_cached(b));
    }

    #[test]
    fn two_way_lru_eviction() {
        let g = CacheGeometry {
            sets: 4,
            ways: 2,
            line_size: 64,
        };
        let mut c = CacheState::new(g).unwrap();
        let stride = (g.sets * g.line_size) as u64;
        let (a, b, d) = (0, stride, 2 * stride);
        c.touch(a);
        c.touch(b);
        c.touch(d);
        assert!(!c.is_cached(a));
        assert!(!c.touch(a));
    }

    #[test]
    fn line_granularity() {
        let mut c = CacheState::new(CacheGeometry::default()).unwrap();
        assert!(!c.is_cached(0x200));
        c.touch(0x200);
        assert!(c.is_cached(0x200));
        assert!(c.is_cached(0x23f));
        assert!(!c.is_cached(0x240));
    }

    #[test]
    fn geometry_validation() {
        let bad = CacheGeometry {
            sets: 48,
            ..CacheGeometry::default()
        };
        assert_eq!(CacheState::new(bad).unwrap_err(), GeometryError::Sets(48));
        let bad = CacheGeometry {
            line_size: 60,
            ..CacheGeometry::default()
        };
        assert_eq!(
            CacheState::new(bad).unwrap_err(),
            GeometryError::LineSize(60)
        );
        let bad = CacheGeometry {
            ways: 0,
            ..CacheGeometry::default()
        };
        assert_eq!(CacheState::new(bad).unwrap_err(), GeometryError::Ways);
        assert_eq!(CacheGeometry::default().capacity(), 64 * 8 * 64);
    }

    #[test]
    fn jitter_only_on_misses_and_bounded() {
        let mut c = CacheState::new(CacheGeometry::default()).unwrap();
        let t = CacheTiming {
            jitter: true,
            ..CacheTiming::default()
        };
        let mut r = rng();
        for i in 0..500u64 {
            let addr = i * 4096 * 64;
            let miss = c.access(addr, &t, &mut r);
            assert!(!miss.hit);
            assert!((270..=330).contains(&miss.latency));
            let hit = c.access(addr, &t, &mut r);
            assert_eq!(hit.latency, 4);
        }
    }
}
