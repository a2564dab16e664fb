//! Randomized register/complete/release/lookup sequences checked against a
//! brute-force interval scan.

use std::cell::RefCell;
use std::collections::BTreeSet;

use pageguard::registry::Protector;
use pageguard::{BufferDesc, CompletionHandle, Error, GuardedOp, OpId, PageGeometry, PageRange, RegionRegistry, RegistryConfig};
use proptest::prelude::*;

const PS: usize = 4096;
const BASE: usize = 0x4000_0000;
const PAGES: usize = 24;

#[derive(Debug, Clone)]
enum Step {
    Register { offset: usize, len: usize },
    Complete(usize),
    Release(usize),
    Lookup(usize),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        3 => (0..PAGES * PS, 1..4 * PS).prop_map(|(offset, len)| Step::Register { offset, len }),
        2 => any::<usize>().prop_map(Step::Complete),
        2 => any::<usize>().prop_map(Step::Release),
        2 => (0..(PAGES + 5) * PS).prop_map(Step::Lookup),
    ]
}

struct Model {
    id: OpId,
    handle: CompletionHandle,
    start: usize,
    end: usize,
    released: bool,
}

impl Model {
    // Interval overlap of the buffer with page `p`, nothing derived from the
    // registry's own alignment code.
    fn covers(&self, p: usize) -> bool {
        let (lo, hi) = (p * PS, (p + 1) * PS);
        self.start < hi && lo < self.end
    }

    fn live(&self) -> bool {
        !self.released
    }

    fn in_flight(&self) -> bool {
        !self.released && !self.handle.is_complete()
    }
}

#[derive(Default)]
struct Recorder {
    protected: RefCell<BTreeSet<usize>>,
}

impl Protector for Recorder {
    fn protect(&self, r: PageRange) -> pageguard::Result<()> {
        self.protected.borrow_mut().extend(r.start() / PS..r.end() / PS);
        Ok(())
    }

    fn unprotect(&self, r: PageRange) -> pageguard::Result<()> {
        let mut set = self.protected.borrow_mut();
        for p in r.start() / PS..r.end() / PS {
            set.remove(&p);
        }
        Ok(())
    }
}

fn pages_touched() -> impl Iterator<Item = usize> {
    BASE / PS..BASE / PS + PAGES + 5
}

fn check(reg: &RegionRegistry, ops: &[Model], rec: &Recorder) -> Result<(), TestCaseError> {
    for p in pages_touched() {
        let expected = ops.iter().filter(|o| o.live() && o.covers(p)).count();
        prop_assert_eq!(reg.refcount(p) as usize, expected, "refcount of page {:#x}", p * PS);
        prop_assert_eq!(rec.protected.borrow().contains(&p), expected > 0, "protection of page {:#x}", p * PS);
    }
    Ok(())
}

fn run(steps: Vec<Step>) -> Result<(), TestCaseError> {
    let geom = PageGeometry::new(PS).unwrap();
    let reg = RegionRegistry::new(
        RegistryConfig {
            op_capacity: 16,
            page_capacity: 64,
        },
        geom,
    )
    .unwrap();
    let rec = Recorder::default();
    let mut ops: Vec<Model> = Vec::new();

    for s in steps {
        match s {
            Step::Register { offset, len } => {
                let start = BASE + offset;
                let handle = CompletionHandle::detached(len);
                let buf = BufferDesc::new(start, len).unwrap();
                let op = GuardedOp::new(handle.clone(), buf, geom);
                let id = op.id;
                let live = ops.iter().filter(|o| o.live()).count();
                match reg.reserve() {
                    Ok(r) => {
                        reg.commit(r, op, &rec).unwrap();
                        ops.push(Model {
                            id,
                            handle,
                            start,
                            end: start + len,
                            released: false,
                        });
                    }
                    Err(Error::CapacityExhausted { .. }) => prop_assert_eq!(live, 16),
                    Err(e) => return Err(TestCaseError::fail(format!("reserve: {e}"))),
                }
            }
            Step::Complete(i) if !ops.is_empty() => {
                let o = &ops[i % ops.len()];
                if !o.handle.is_complete() {
                    o.handle.complete(0);
                }
            }
            Step::Release(i) if !ops.is_empty() => {
                let i = i % ops.len();
                let o = &ops[i];
                let result = reg.release_with(o.id, &rec);
                if o.released {
                    prop_assert!(matches!(result, Err(Error::UnknownOp(_))));
                } else if !o.handle.is_complete() {
                    prop_assert!(matches!(result, Err(Error::StillInFlight(_))));
                } else {
                    let freed = result.unwrap().freed_pages;
                    ops[i].released = true;
                    let expected: Vec<usize> = pages_touched()
                        .filter(|&p| ops[i].covers(p) && !ops.iter().any(|o| o.live() && o.covers(p)))
                        .collect();
                    prop_assert_eq!(freed, expected);
                }
            }
            Step::Lookup(offset) => {
                let addr = BASE + offset;
                let p = addr / PS;
                let expected = ops.iter().find(|o| o.in_flight() && o.covers(p)).map(|o| o.id);
                let got = reg.lookup(addr).map(|r| r.id());
                prop_assert_eq!(got, expected, "lookup {:#x}", addr);
            }
            _ => {}
        }
        check(&reg, &ops, &rec)?;
    }

    for o in ops.iter_mut().filter(|o| !o.released) {
        if !o.handle.is_complete() {
            o.handle.complete(0);
        }
        reg.release_with(o.id, &rec).unwrap();
        o.released = true;
    }
    check(&reg, &ops, &rec)?;
    prop_assert_eq!(reg.guarded_pages(), 0);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn refcounts_match_interval_scan(steps in proptest::collection::vec(step(), 1..40)) {
        run(steps)?;
    }
}

proptest! {
    #[test]
    fn every_address_in_range_resolves(shift in 12u32..17, offset in 0usize..1 << 20, len in 1usize..1 << 18, probe in 0.0f64..1.0) {
        let geom = PageGeometry::new(1 << shift).unwrap();
        let reg = RegionRegistry::new(RegistryConfig { op_capacity: 4, page_capacity: 512 }, geom).unwrap();
        let buf = BufferDesc::new(BASE + offset, len).unwrap();
        let op = GuardedOp::new(CompletionHandle::detached(len), buf, geom);
        let range = op.range;
        let id = reg.register(op).unwrap();
        let addr = range.start() + ((range.len() - 1) as f64 * probe) as usize;
        prop_assert_eq!(reg.lookup(addr).map(|r| r.id()), Some(id));
        prop_assert!(reg.lookup(range.start().wrapping_sub(1)).is_none());
        prop_assert!(reg.lookup(range.end()).is_none());
    }
}
