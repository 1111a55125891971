use ltp::wire::{
    decode_header, encode_header, Importance, Packet, PacketHeader, PacketType, Q12, Registration, SeqId, HEADER_LEN,
    MAX_DATAGRAM, MAX_SEGMENT_BYTES,
};
use proptest::prelude::*;

/// Packs the fields MSB first as a string of bits, then cuts it into bytes.
fn oracle_encode(h: &PacketHeader) -> Vec<u8> {
    let imp = if h.importance.is_critical() { 0b11 } else { 0b00 };
    let ty = match h.ptype {
        PacketType::Registration => 0,
        PacketType::Data => 1,
        PacketType::Ack => 2,
        PacketType::End => 3,
    };
    let mut bits = String::new();
    for (v, w) in [
        (u64::from(h.flow_id), 16),
        (u64::from(h.seq_id.get()), 24),
        (imp, 2),
        (ty, 2),
        (u64::from(h.rtprop_q.get()), 12),
        (u64::from(h.btlbw_q.get()), 12),
        (0, 4),
    ] {
        bits.push_str(&format!("{v:0w$b}"));
    }
    assert_eq!(bits.len(), 72);
    bits.as_bytes().chunks(8).map(|c| u8::from_str_radix(std::str::from_utf8(c).unwrap(), 2).unwrap()).collect()
}

fn header() -> impl Strategy<Value = PacketHeader> {
    (
        any::<u16>(),
        0u32..(1 << 24),
        prop_oneof![Just(Importance::NotCritical), Just(Importance::Critical)],
        prop_oneof![
            Just(PacketType::Registration),
            Just(PacketType::Data),
            Just(PacketType::Ack),
            Just(PacketType::End)
        ],
        0u16..4096,
        0u16..4096,
    )
        .prop_map(|(flow_id, seq, importance, ptype, rt, bw)| PacketHeader {
            flow_id,
            seq_id: SeqId::new(seq).unwrap(),
            importance,
            ptype,
            rtprop_q: Q12::new(rt).unwrap(),
            btlbw_q: Q12::new(bw).unwrap(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn header_roundtrips_and_matches_bit_oracle(h in header()) {
        let bytes = encode_header(&h);
        prop_assert_eq!(bytes.len(), HEADER_LEN);
        prop_assert_eq!(bytes.to_vec(), oracle_encode(&h));
        prop_assert_eq!(decode_header(&bytes).unwrap(), h);
    }

    #[test]
    fn arbitrary_bytes_decode_or_reject(bytes in proptest::array::uniform9(any::<u8>())) {
        let imp = (bytes[5] >> 6) & 0b11;
        let pad = bytes[8] & 0xF;
        match decode_header(&bytes) {
            Ok(h) => {
                prop_assert!(imp == 0 || imp == 3);
                prop_assert_eq!(pad, 0);
                prop_assert_eq!(encode_header(&h), bytes);
            }
            Err(_) => prop_assert!(imp == 1 || imp == 2 || pad != 0),
        }
    }

    #[test]
    fn data_packets_roundtrip(flow in any::<u16>(), seq in 0u32..1000, len in 1usize..=MAX_SEGMENT_BYTES) {
        let payload: Vec<u8> = (0..len).map(|i| (i * 7 + seq as usize) as u8).collect();
        let cc = (Q12::new(10).unwrap(), Q12::new(1000).unwrap());
        let p = Packet::data(flow, SeqId::new(seq).unwrap(), Importance::NotCritical, payload, cc);
        let wire = p.encode();
        prop_assert_eq!(wire.len(), HEADER_LEN + len);
        prop_assert!(wire.len() <= MAX_DATAGRAM);
        prop_assert_eq!(Packet::decode(&wire).unwrap(), p);
    }
}

#[test]
fn control_packets_have_fixed_sizes() {
    let cc = (Q12::ZERO, Q12::ZERO);
    let reg = Packet::registration(3, Registration { segments: 9, total_bytes: 12_000 }, cc);
    assert_eq!(reg.encode().len(), HEADER_LEN + 8);
    assert_eq!(Packet::decode(&reg.encode()).unwrap().registration_payload().unwrap().total_bytes, 12_000);
    assert_eq!(Packet::ack(3, SeqId::new(5).unwrap()).encode().len(), HEADER_LEN);
    assert_eq!(Packet::end(3, cc).encode().len(), HEADER_LEN);
}
