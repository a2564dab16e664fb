//! One behavioural suite, run against both the simulated-DMA and the
//! loopback-TCP transports.

use std::time::{Duration, Instant};

use pageguard::{DmaConfig, Error, Rank, SimWorld, Source, Tag, TcpWorld, Transport};
use proptest::prelude::*;

const WORLD: usize = 3;

fn wait_probe<T: Transport>(t: &T, src: Source, tag: Tag) -> bool {
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline {
        if t.probe(src, tag) {
            return true;
        }
        t.wait_incoming(Duration::from_millis(10));
    }
    false
}

fn probe_and_recv<T: Transport>(comms: &[T]) {
    let (a, b) = (&comms[0], &comms[1]);
    assert!(!b.probe(Source::ANY, Tag(7)));

    let h = a.send_owned(Rank(1), Tag(7), vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    h.wait();
    assert!(a.test(&h).unwrap());
    assert!(wait_probe(b, Source::ANY, Tag(7)));
    assert!(b.probe(Source::rank(Rank(0)), Tag(7)));
    assert!(!b.probe(Source::ANY, Tag(8)));
    assert!(!b.probe(Source::rank(Rank(2)), Tag(7)));

    let mut small = [0u8; 4];
    match b.recv(Source::ANY, Tag(7), &mut small) {
        Err(Error::Truncated { required, available }) => assert_eq!((required, available), (8, 4)),
        other => panic!("expected a size error, got {other:?}"),
    }
    assert!(b.probe(Source::ANY, Tag(7)), "a failed recv keeps the message");

    let mut big = [0u8; 1024];
    let st = b.recv(Source::ANY, Tag(7), &mut big).unwrap();
    assert_eq!((st.len, st.source, st.tag), (8, Rank(0), Tag(7)));
    assert_eq!(&big[..8], &[1, 2, 3, 4, 5, 6, 7, 8]);
    assert!(!b.probe(Source::ANY, Tag(7)));
    assert!(a.test(&h).unwrap(), "completion is monotone");

    let report = a.corruption_report(&h).unwrap();
    assert!(!report.corrupted);
    assert_eq!(report.snapshot_checksum, report.observed_checksum);
}

fn zero_copy_send<T: Transport>(comms: &[T]) {
    let buf: Vec<u8> = (0..20_000u32).map(|i| (i % 251) as u8).collect();
    // SAFETY: `buf` outlives the wait below.
    let h = unsafe { comms[2].isend(Rank(0), Tag(3), &buf[..]).unwrap() };
    h.wait();
    assert_eq!(h.bytes_sent(), buf.len());
    let (last_read, completed) = h.audit_times().unwrap();
    assert!(last_read <= completed);
    let mut out = vec![0u8; buf.len()];
    assert!(wait_probe(&comms[0], Source::rank(Rank(2)), Tag(3)));
    comms[0].recv(Source::rank(Rank(2)), Tag(3), &mut out).unwrap();
    assert_eq!(out, buf);
    assert!(!comms[2].corruption_report(&h).unwrap().corrupted);
}

fn unknown_destination<T: Transport>(comms: &[T]) {
    assert!(matches!(
        comms[0].send_owned(Rank(WORLD as u32), Tag(0), vec![1]),
        Err(Error::UnknownDestination { .. })
    ));
}

/// Messages from several senders on several tags; each (src, tag) stream
/// must come out in send order whatever order the receiver asks in.
fn fifo<T: Transport>(comms: &[T], batch: &[(usize, u32)], pick: &[usize]) -> Result<(), TestCaseError> {
    let mut handles = Vec::new();
    for (seq, &(src, tag)) in batch.iter().enumerate() {
        let mut payload = (seq as u32).to_le_bytes().to_vec();
        payload.resize(4 + seq % 13, 0xaa);
        handles.push(comms[src].send_owned(Rank(0), Tag(tag), payload).unwrap());
    }
    for h in &handles {
        h.wait();
    }
    let mut streams: Vec<((usize, u32), Vec<u32>)> = Vec::new();
    for (seq, &key) in batch.iter().enumerate() {
        match streams.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(seq as u32),
            None => streams.push((key, vec![seq as u32])),
        }
    }
    let mut cursor = vec![0usize; streams.len()];
    let mut remaining = batch.len();
    let mut pick = pick.iter().cycle();
    let mut buf = [0u8; 64];
    while remaining > 0 {
        let mut i = pick.next().unwrap() % streams.len();
        while cursor[i] == streams[i].1.len() {
            i = (i + 1) % streams.len();
        }
        let ((src, tag), seqs) = &streams[i];
        let st = comms[0].recv(Source::rank(Rank(*src as u32)), Tag(*tag), &mut buf).unwrap();
        let got = u32::from_le_bytes(buf[..4].try_into().unwrap());
        prop_assert_eq!(got, seqs[cursor[i]]);
        prop_assert_eq!(st.len, 4 + got as usize % 13);
        cursor[i] += 1;
        remaining -= 1;
    }
    for tag in 0..3 {
        prop_assert!(!comms[0].probe(Source::ANY, Tag(tag)));
    }
    Ok(())
}

fn batch() -> impl Strategy<Value = (Vec<(usize, u32)>, Vec<usize>)> {
    (
        proptest::collection::vec((1usize..WORLD, 0u32..3), 1..40),
        proptest::collection::vec(any::<usize>(), 1..16),
    )
}

fn sim() -> SimWorld {
    SimWorld::new(WORLD, DmaConfig::new(256, Duration::from_micros(20)).unwrap()).unwrap()
}

fn tcp() -> TcpWorld {
    TcpWorld::loopback(WORLD, DmaConfig::new(256, Duration::ZERO).unwrap()).unwrap()
}

#[test]
fn sim_probe_and_recv() {
    probe_and_recv(&sim().comms());
}

#[test]
fn tcp_probe_and_recv() {
    probe_and_recv(&tcp().comms());
}

#[test]
fn sim_zero_copy_send() {
    zero_copy_send(&sim().comms());
}

#[test]
fn tcp_zero_copy_send() {
    zero_copy_send(&tcp().comms());
}

#[test]
fn sim_unknown_destination() {
    unknown_destination(&sim().comms());
}

#[test]
fn tcp_unknown_destination() {
    unknown_destination(&tcp().comms());
}

#[test]
fn stale_handles_are_rejected_by_other_worlds() {
    let (s, t) = (sim(), tcp());
    let h = s.comm(Rank(0)).send_owned(Rank(1), Tag(0), vec![1]).unwrap();
    h.wait();
    assert!(matches!(t.comm(Rank(0)).test(&h), Err(Error::StaleHandle)));
    let h = t.comm(Rank(0)).send_owned(Rank(1), Tag(0), vec![1]).unwrap();
    h.wait();
    assert!(matches!(s.comm(Rank(0)).test(&h), Err(Error::StaleHandle)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sim_fifo_per_source_and_tag((b, pick) in batch()) {
        let world = sim();
        fifo(&world.comms(), &b, &pick)?;
    }

    #[test]
    fn tcp_fifo_per_source_and_tag((b, pick) in batch()) {
        let world = tcp();
        fifo(&world.comms(), &b, &pick)?;
    }
}
