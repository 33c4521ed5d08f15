use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, SystemTime};

use flowpipe::ipc::{Clock, IpcError, Locator, ManualClock, Method, Stage, StageConfig};
use flowpipe::{Codec, Value};

fn stage(dir: &std::path::Path) -> Stage {
    Stage::new(StageConfig { root: dir.to_owned(), ..StageConfig::default() })
}

fn blob(n: usize, seed: u64) -> Vec<u8> {
    let mut x = seed | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

const METHODS: [Method; 3] = [Method::Socket, Method::Pipe, Method::File];

#[test]
fn ten_mebibytes_cross_by_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let st = stage(dir.path());
    let data = blob(10 << 20, 7);
    for method in METHODS {
        for codec in [Codec::BinV1, Codec::TextV1] {
            let loc = st.dump_item(&Value::Bytes(data.clone()), method, codec).unwrap();
            let in_band = loc.to_value().encoded_len();
            assert!(in_band <= 1024, "{method} locator is {in_band} bytes");
            let consumer = stage(dir.path());
            let back = Locator::from_value(&loc.to_value()).unwrap();
            let got = consumer.load_item(&back).unwrap();
            let got = got.as_bytes().unwrap();
            assert_eq!(fnv1a(got), fnv1a(&data), "{method} {codec:?}");
            assert_eq!(got, &data[..]);
        }
    }
    assert_eq!(st.staged_count(), 0);
}

#[test]
fn exactly_one_of_eight_concurrent_loads_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let producer = stage(dir.path());
    for method in METHODS {
        for round in 0..5 {
            let loc = producer.dump_item(&Value::Int(round), method, Codec::BinV1).unwrap();
            let barrier = Arc::new(Barrier::new(8));
            let handles: Vec<_> = (0..8)
                .map(|_| {
                    let (loc, barrier, root) = (loc.clone(), barrier.clone(), dir.path().to_owned());
                    thread::spawn(move || {
                        let consumer = Stage::new(StageConfig {
                            root,
                            transport_timeout: Duration::from_secs(2),
                            ..StageConfig::default()
                        });
                        barrier.wait();
                        consumer.load_item(&loc)
                    })
                })
                .collect();
            let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
            let ok: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
            assert_eq!(ok, [&Value::Int(round)], "{method}: {results:?}");
        }
    }
}

#[test]
fn same_process_second_redemption_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let st = stage(dir.path());
    for method in METHODS {
        let loc = st.dump_item(&Value::from("x"), method, Codec::TextV1).unwrap();
        assert_eq!(st.load_item(&loc).unwrap(), Value::from("x"));
        assert_eq!(st.load_item(&loc), Err(IpcError::AlreadyRedeemed));
    }
}

#[test]
fn staged_resources_do_not_leak() {
    let dir = tempfile::tempdir().unwrap();
    let st = stage(dir.path());
    for method in METHODS {
        for i in 0..20 {
            let loc = st.dump_item(&Value::Int(i), method, Codec::BinV1).unwrap();
            st.load_item(&loc).unwrap();
        }
    }
    thread::sleep(Duration::from_millis(50));
    st.reap_expired(SystemTime::now());
    assert_eq!(st.staged_count(), 0);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn unredeemed_items_expire() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(SystemTime::now());
    let config = StageConfig { root: dir.path().to_owned(), expiry: Duration::from_secs(5), ..StageConfig::default() };
    let st = Stage::with_clock(config, Arc::new(clock.clone()));
    let locs: Vec<_> = METHODS.iter().map(|&m| st.dump_item(&Value::Int(1), m, Codec::BinV1).unwrap()).collect();
    assert_eq!(st.staged_count(), 3);
    clock.advance(Duration::from_secs(6));
    assert_eq!(st.reap_expired(clock.now()), 3);
    assert_eq!(st.staged_count(), 0);
    for loc in &locs {
        assert_eq!(st.load_item(loc), Err(IpcError::Expired));
    }
}

#[test]
fn reserved_methods_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let st = stage(dir.path());
    for m in [Method::Shm, Method::Database] {
        assert!(matches!(st.dump_item(&Value::Null, m, Codec::BinV1), Err(IpcError::UnsupportedMethod(_))));
    }
}
