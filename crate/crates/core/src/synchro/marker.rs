//! Separation of public marker bits from private key-basis bits.

use crate::linksim::source::{marker_bit, MarkerSchedule};

use super::SyncError;

/// One sifted key-basis detection as seen by Bob after the basis reveal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyBasisItem {
    pub slot: u64,
    /// Alice's ordinal of this slot among key-basis slots.
    pub key_index: u64,
    pub bit: bool,
}

/// A detected marker with its public expected value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerObservation {
    pub slot: u64,
    pub number: u64,
    pub expected: bool,
    pub observed: bool,
}

impl MarkerObservation {
    pub fn is_error(&self) -> bool {
        self.expected != self.observed
    }
}

/// Splits a slot-ordered key-basis stream into marker observations and
/// private items.
pub fn marker_extract(
    items: &[KeyBasisItem],
    schedule: MarkerSchedule,
    marker_seed: u64,
) -> Result<(Vec<MarkerObservation>, Vec<KeyBasisItem>), SyncError> {
    let mut markers = Vec::new();
    let mut private = Vec::new();
    let mut last: Option<(u64, u64)> = None;
    for &it in items {
        if let Some((slot, key)) = last {
            // key-basis ordinals must advance with the slots
            if it.slot <= slot || it.key_index <= key || it.key_index - key > it.slot - slot {
                return Err(SyncError::ScheduleMismatch {
                    slot: it.slot,
                    key_index: it.key_index,
                });
            }
        }
        last = Some((it.slot, it.key_index));
        match schedule.marker_number(it.key_index) {
            Some(number) => markers.push(MarkerObservation {
                slot: it.slot,
                number,
                expected: marker_bit(marker_seed, number),
                observed: it.bit,
            }),
            None => private.push(it),
        }
    }
    Ok((markers, private))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> MarkerSchedule {
        MarkerSchedule { period: 36, group: 4 }
    }

    #[test]
    fn forty_slots_split_36_4() {
        let items: Vec<KeyBasisItem> = (0..40)
            .map(|k| KeyBasisItem {
                slot: 3 * k,
                key_index: k,
                bit: false,
            })
            .collect();
        let (m, p) = marker_extract(&items, sched(), 1).unwrap();
        assert_eq!((m.len(), p.len()), (4, 36));
        assert_eq!(m.iter().map(|o| o.number).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!((sched().overhead() - 0.10).abs() < 1e-12);
    }

    #[test]
    fn empty_stream() {
        let (m, p) = marker_extract(&[], sched(), 1).unwrap();
        assert!(m.is_empty() && p.is_empty());
    }

    #[test]
    fn partition_is_exact() {
        let items: Vec<KeyBasisItem> = (0..1000)
            .map(|k| KeyBasisItem {
                slot: 10 + 2 * k,
                key_index: k + k / 7,
                bit: k % 3 == 0,
            })
            .collect();
        let (m, p) = marker_extract(&items, sched(), 5).unwrap();
        assert_eq!(m.len() + p.len(), items.len());
        let mut slots: Vec<u64> = m.iter().map(|o| o.slot).chain(p.iter().map(|i| i.slot)).collect();
        slots.sort_unstable();
        assert_eq!(slots, items.iter().map(|i| i.slot).collect::<Vec<_>>());
    }

    #[test]
    fn inconsistent_ordinals_rejected() {
        let items = [
            KeyBasisItem { slot: 5, key_index: 3, bit: true },
            KeyBasisItem { slot: 6, key_index: 9, bit: true },
        ];
        assert!(matches!(
            marker_extract(&items, sched(), 0),
            Err(SyncError::ScheduleMismatch { .. })
        ));
    }
}
