//! A bounded set of keyed entries with least-recently-used replacement.
//!
//! Used for every associative structure in the simulator: TLB sets, cache
//! sets and page-walk cache levels. Small sets are a linear array scanned on
//! every probe; large (typically fully associative) sets keep a hash index
//! and an ordered recency index so that probes stay logarithmic.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

/// Sets at or below this capacity use the linear-scan representation.
const SMALL_CAPACITY: usize = 32;

#[derive(Debug, Clone)]
struct Slot<K, V> {
    key: K,
    stamp: u64,
    value: V,
}

#[derive(Debug, Clone)]
enum Store<K, V> {
    Small(Vec<Slot<K, V>>),
    Large {
        map: HashMap<K, (u64, V)>,
        order: BTreeMap<u64, K>,
    },
}

#[derive(Debug, Clone)]
pub struct LruSet<K, V> {
    capacity: usize,
    clock: u64,
    store: Store<K, V>,
}

impl<K: Hash + Eq + Clone, V> LruSet<K, V> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "LRU set needs at least one way");
        let store = if capacity <= SMALL_CAPACITY {
            Store::Small(Vec::with_capacity(capacity))
        } else {
            Store::Large {
                map: HashMap::new(),
                order: BTreeMap::new(),
            }
        };
        Self {
            capacity,
            clock: 0,
            store,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        match &self.store {
            Store::Small(slots) => slots.len(),
            Store::Large { map, .. } => map.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Looks up `key` and marks it most recently used.
    pub fn get_mut(&mut self, key: &K) -> Option<&mut V> {
        let stamp = self.tick();
        match &mut self.store {
            Store::Small(slots) => slots.iter_mut().find(|s| &s.key == key).map(|s| {
                s.stamp = stamp;
                &mut s.value
            }),
            Store::Large { map, order } => {
                let (old, value) = map.get_mut(key)?;
                order.remove(old);
                order.insert(stamp, key.clone());
                *old = stamp;
                Some(value)
            }
        }
    }

    /// Looks up `key` without touching recency.
    pub fn peek(&self, key: &K) -> Option<&V> {
        match &self.store {
            Store::Small(slots) => slots.iter().find(|s| &s.key == key).map(|s| &s.value),
            Store::Large { map, .. } => map.get(key).map(|(_, v)| v),
        }
    }

    pub fn contains(&self, key: &K) -> bool {
        self.peek(key).is_some()
    }

    /// Inserts or refreshes `key` as most recently used. Returns the victim
    /// when a new key displaces the least recently used one.
    pub fn insert(&mut self, key: K, value: V) -> Option<(K, V)> {
        let stamp = self.tick();
        let capacity = self.capacity;
        match &mut self.store {
            Store::Small(slots) => {
                if let Some(slot) = slots.iter_mut().find(|s| s.key == key) {
                    slot.stamp = stamp;
                    slot.value = value;
                    return None;
                }
                let slot = Slot { key, stamp, value };
                if slots.len() < capacity {
                    slots.push(slot);
                    return None;
                }
                let (victim, _) = slots
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, s)| s.stamp)
                    .expect("full set is non-empty");
                let old = std::mem::replace(&mut slots[victim], slot);
                Some((old.key, old.value))
            }
            Store::Large { map, order } => {
                if let Some((old, v)) = map.get_mut(&key) {
                    order.remove(old);
                    order.insert(stamp, key);
                    *old = stamp;
                    *v = value;
                    return None;
                }
                let evicted = if map.len() >= capacity {
                    let (_, victim) = order.pop_first().expect("full set is non-empty");
                    let (_, v) = map.remove(&victim).expect("recency index out of sync");
                    Some((victim, v))
                } else {
                    None
                };
                order.insert(stamp, key.clone());
                map.insert(key, (stamp, value));
                evicted
            }
        }
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        match &mut self.store {
            Store::Small(slots) => {
                let pos = slots.iter().position(|s| &s.key == key)?;
                Some(slots.swap_remove(pos).value)
            }
            Store::Large { map, order } => {
                let (stamp, v) = map.remove(key)?;
                order.remove(&stamp);
                Some(v)
            }
        }
    }

    /// Keeps only entries for which `keep` returns true; returns the removed keys.
    pub fn retain(&mut self, mut keep: impl FnMut(&K, &V) -> bool) -> Vec<K> {
        let mut removed = Vec::new();
        match &mut self.store {
            Store::Small(slots) => slots.retain(|s| {
                let k = keep(&s.key, &s.value);
                if !k {
                    removed.push(s.key.clone());
                }
                k
            }),
            Store::Large { map, order } => {
                map.retain(|key, (stamp, v)| {
                    let k = keep(key, v);
                    if !k {
                        order.remove(stamp);
                        removed.push(key.clone());
                    }
                    k
                });
            }
        }
        removed
    }

    pub fn clear(&mut self) {
        match &mut self.store {
            Store::Small(slots) => slots.clear(),
            Store::Large { map, order } => {
                map.clear();
                order.clear();
            }
        }
    }

    /// Entries from least to most recently used.
    pub fn iter_lru(&self) -> Vec<(&K, &V)> {
        match &self.store {
            Store::Small(slots) => {
                let mut v: Vec<_> = slots.iter().collect();
                v.sort_by_key(|s| s.stamp);
                v.into_iter().map(|s| (&s.key, &s.value)).collect()
            }
            Store::Large { map, order } => order
                .values()
                .map(|k| {
                    let (_, v) = &map[k];
                    (k, v)
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(capacity: usize) {
        let mut set = LruSet::new(capacity);
        for k in 0..capacity as u64 {
            assert!(set.insert(k, k * 10).is_none());
        }
        // touch 0 so 1 becomes the victim
        assert_eq!(set.get_mut(&0).copied(), Some(0));
        let victim = set.insert(1_000_000, 1);
        assert_eq!(victim, Some((1, 10)));
        assert!(set.contains(&0));
        assert!(!set.contains(&1));
        assert_eq!(set.len(), capacity);
        assert_eq!(set.remove(&0), Some(0));
        assert_eq!(set.len(), capacity - 1);
        let removed = set.retain(|k, _| *k != 1_000_000);
        assert_eq!(removed, vec![1_000_000]);
        let order: Vec<u64> = set.iter_lru().into_iter().map(|(k, _)| *k).collect();
        let expected: Vec<u64> = (2..capacity as u64).collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn small_and_large_sets_agree() {
        run(4);
        run(SMALL_CAPACITY);
        run(SMALL_CAPACITY + 1);
        run(1024);
    }

    #[test]
    fn reinsert_refreshes_without_eviction() {
        let mut set = LruSet::new(2);
        set.insert('a', 1);
        set.insert('b', 2);
        assert!(set.insert('a', 3).is_none());
        assert_eq!(set.insert('c', 4), Some(('b', 2)));
        assert_eq!(set.peek(&'a'), Some(&3));
    }
}
