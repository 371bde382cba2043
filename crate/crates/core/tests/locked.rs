use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::Instant;

use mcomm::locked::{read_lock, write_lock, RwGuardedQueue};
use mcomm::nbb::{InsertError, NonBlockingBuffer, ReadError};
use proptest::prelude::*;

proptest! {
    #[test]
    fn same_answers_as_the_lock_free_buffer(ops in prop::collection::vec(any::<bool>(), 0..300), cap_log in 0u32..5) {
        let cap = 1usize << cap_log;
        let locked = RwGuardedQueue::new(cap);
        let free = NonBlockingBuffer::new(cap);
        for (i, insert) in ops.into_iter().enumerate() {
            if insert {
                let a = locked.locked_insert(i as u64);
                let b = free.insert_item(i as u64);
                prop_assert_eq!(a, b);
                prop_assert_ne!(a, Err(InsertError::FullButConsumerReading));
            } else {
                let a = locked.locked_read();
                let b = free.read_item();
                prop_assert_eq!(a, b);
                prop_assert_ne!(a, Err(ReadError::EmptyButProducerInserting));
            }
            prop_assert_eq!(locked.occupancy(), free.occupancy());
        }
    }
}

#[test]
fn writers_on_distinct_queues_are_serialized() {
    const ROUNDS: usize = 20_000;
    let queues = [Arc::new(RwGuardedQueue::new(4)), Arc::new(RwGuardedQueue::new(4))];
    let origin = Instant::now();
    let spans = Arc::new(Mutex::new(Vec::with_capacity(2 * ROUNDS)));
    let barrier = Arc::new(Barrier::new(2));
    let handles: Vec<_> = queues
        .iter()
        .cloned()
        .map(|q| {
            let (spans, barrier) = (spans.clone(), barrier.clone());
            thread::spawn(move || {
                let mut mine = Vec::with_capacity(ROUNDS);
                barrier.wait();
                for i in 0..ROUNDS {
                    let guard = write_lock();
                    let enter = origin.elapsed().as_nanos();
                    if q.insert_under(&guard, i as u64).is_err() {
                        q.with(&guard, |items| items.clear());
                    }
                    let exit = origin.elapsed().as_nanos();
                    drop(guard);
                    mine.push((enter, exit));
                }
                spans.lock().unwrap().extend(mine);
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let mut spans = spans.lock().unwrap().clone();
    spans.sort_unstable();
    for w in spans.windows(2) {
        assert!(w[0].1 <= w[1].0, "overlapping writes {:?} and {:?}", w[0], w[1]);
    }
}

#[test]
fn readers_share_and_exclude_writers() {
    let r1 = read_lock();
    let r2 = read_lock();
    let entered = Arc::new(Mutex::new(false));
    let writer = {
        let entered = entered.clone();
        thread::spawn(move || {
            let _w = write_lock();
            *entered.lock().unwrap() = true;
        })
    };
    thread::sleep(std::time::Duration::from_millis(20));
    assert!(!*entered.lock().unwrap());
    drop(r1);
    drop(r2);
    writer.join().unwrap();
    assert!(*entered.lock().unwrap());
}
