use std::ops::Range;
use std::time::Duration;

use ltp::receiver::{CloseState, CriticalLayout, ReassemblyState, ReceiverConfig};
use ltp::sender::{FlowSendState, SenderConfig};
use ltp::wire::{Importance, Packet, Registration, SeqId, MTU};
use ltp::Timestamp;
use proptest::prelude::*;

/// The segment cap is the largest multiple of 4 that fits in one datagram
/// after the IPv4, UDP and LTP headers; segments are that cap floored to a
/// whole number of elements.
fn oracle_seg_len(element_size: usize) -> usize {
    let room = MTU - 20 - 8 - 9;
    let cap = room - room % 4;
    cap - cap % element_size
}

/// Walks the segments in order and writes each delivered one at its offset.
fn oracle_reassemble(data: &[u8], element_size: usize, lost: &[bool]) -> Vec<u8> {
    let seg = oracle_seg_len(element_size);
    let mut out = Vec::with_capacity(data.len());
    for (i, chunk) in data.chunks(seg).enumerate() {
        if lost[i] {
            out.extend(std::iter::repeat_n(0u8, chunk.len()));
        } else {
            out.extend_from_slice(chunk);
        }
    }
    out
}

fn zero_runs(buf: &[u8]) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < buf.len() {
        if buf[i] == 0 {
            let start = i;
            while i < buf.len() && buf[i] == 0 {
                i += 1;
            }
            runs.push(start..i);
        } else {
            i += 1;
        }
    }
    runs
}

/// Sends every segment not marked lost, then closes the flow at its deadline.
fn deliver(data: &[u8], element_size: usize, lost: &dyn Fn(usize) -> bool) -> (Vec<u8>, Vec<bool>) {
    let sender =
        FlowSendState::segment_buffer(1, data.to_vec(), element_size, &[], &SenderConfig::default(), Timestamp::ZERO)
            .unwrap();
    let segs = sender.segments();
    let config = ReceiverConfig {
        element_size,
        // Nothing may close before every packet below has been offered.
        lt_threshold: Duration::from_millis(1),
        deadline: Some(Duration::from_millis(1)),
        critical: CriticalLayout::None,
        ..ReceiverConfig::default()
    };
    let reg = Registration { segments: segs.len() as u32, total_bytes: data.len() as u32 };
    let mut rx = ReassemblyState::register(1, reg, config, Timestamp::ZERO).unwrap();
    let mut mask = Vec::new();
    for (i, s) in segs.iter().enumerate() {
        let drop = lost(i);
        mask.push(drop);
        if !drop {
            let p = Packet::data(1, SeqId::new(i as u32).unwrap(), Importance::NotCritical, data[s.range.clone()].to_vec(), Default::default());
            rx.on_packet(&p, Timestamp::ZERO).unwrap();
        }
    }
    let at = Timestamp::ZERO + Duration::from_millis(1);
    assert!(matches!(rx.poll_close(at), CloseState::Close(_)));
    (rx.reassemble().unwrap(), mask)
}

fn nonzero_data(len: usize) -> Vec<u8> {
    (0..len).map(|i| 1 + (i % 251) as u8).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn bubbles_are_element_aligned(
        element_size in prop_oneof![Just(2usize), Just(4), Just(8)],
        elements in 1usize..6000,
        pattern in proptest::collection::vec(any::<bool>(), 1..40),
    ) {
        let data = nonzero_data(elements * element_size);
        let (out, mask) = deliver(&data, element_size, &|i| pattern[i % pattern.len()]);
        prop_assert_eq!(out.len(), data.len());
        for r in zero_runs(&out) {
            prop_assert_eq!(r.start % element_size, 0, "gap {:?}", r);
            prop_assert_eq!(r.end % element_size, 0, "gap {:?}", r);
        }
        prop_assert_eq!(out, oracle_reassemble(&data, element_size, &mask));
    }
}

#[test]
fn two_missing_segments_of_a_float_buffer() {
    let data = nonzero_data(12_000);
    let (out, mask) = deliver(&data, 4, &|i| i == 3 || i == 7);
    assert_eq!(mask.len(), 9);
    let seg = oracle_seg_len(4);
    assert_eq!(seg, 1460);
    let expect = vec![3 * seg..4 * seg, 7 * seg..8 * seg];
    assert_eq!(expect, vec![4380..5840, 10220..11680]);
    assert_eq!(zero_runs(&out), expect);
    assert_eq!(out, oracle_reassemble(&data, 4, &mask));
}

#[test]
fn lossless_reassembly_is_identity() {
    for es in [1, 2, 4, 8] {
        let data = nonzero_data(es * 3001);
        let (out, _) = deliver(&data, es, &|_| false);
        assert_eq!(out, data);
    }
}

