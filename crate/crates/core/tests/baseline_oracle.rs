mod common;

use common::{PathOracle, Txn, LINE};
use mgx_core::baseline::{BaselineConfig, BaselineMee};
use mgx_core::crypto::KeyPair;
use mgx_core::dram::{AccessClass, AccessOp};
use mgx_core::EngineMode;
use proptest::prelude::*;
use rand::SeedableRng;

fn engine(region: u64, cache: u64, mode: EngineMode) -> BaselineMee {
    let cfg = BaselineConfig {
        region_bytes: region,
        cache_bytes: cache,
        ..Default::default()
    };
    let keys = KeyPair::generate(&mut rand_chacha::ChaCha20Rng::seed_from_u64(5));
    BaselineMee::new(cfg, mode, &keys).unwrap().keep_log(true)
}

fn txns(e: &BaselineMee) -> Vec<Txn> {
    e.dram()
        .log()
        .iter()
        .map(|r| (r.op, r.class, r.addr, r.len))
        .collect()
}

#[test]
fn level_counts() {
    for (mb, levels) in [(128u64, 6), (1024, 7), (8192, 8)] {
        let o = PathOracle::new(0, mb << 20, 8, 4096);
        assert_eq!(o.levels(), levels);
        assert_eq!(
            engine(mb << 20, 4096, EngineMode::Accounting)
                .geometry()
                .levels(),
            levels
        );
    }
}

#[test]
fn first_write_walks_the_whole_path() {
    let mut e = engine(128 << 20, 4096, EngineMode::Functional);
    let recs = e.bl_write(0x1000, &[7; 64]).unwrap();
    let mut o = PathOracle::new(0, 128 << 20, 8, 4096);
    o.write_block(0x1000);
    let got: Vec<Txn> = recs
        .iter()
        .map(|r| (r.op, r.class, r.addr, r.len))
        .collect();
    assert_eq!(got, o.log);
    // Leaf, five tree levels, the MAC line, then the data.
    let classes: Vec<AccessClass> = got.iter().map(|t| t.1).collect();
    assert_eq!(
        classes,
        [
            AccessClass::VnLine,
            AccessClass::TreeNode,
            AccessClass::TreeNode,
            AccessClass::TreeNode,
            AccessClass::TreeNode,
            AccessClass::TreeNode,
            AccessClass::MacLine,
            AccessClass::Data
        ]
    );
    let warm = e.bl_write(0x1000, &[8; 64]).unwrap();
    assert_eq!(warm.len(), 1);
    assert_eq!(warm[0].class, AccessClass::Data);
}

#[test]
fn outside_region_is_plain() {
    let mut e = engine(128 << 20, 4096, EngineMode::Functional);
    let recs = e.bl_write(200 << 20, &[1; 64]).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(
        (recs[0].op, recs[0].class),
        (AccessOp::Write, AccessClass::Data)
    );
}

#[test]
fn streaming_matches_oracle_small_cache() {
    let mut e = engine(1 << 30, 1024, EngineMode::Accounting);
    let mut o = PathOracle::new(0, 1 << 30, 8, 1024);
    let n = 1 << 20;
    e.write_range(0, n, None).unwrap();
    (0..n)
        .step_by(LINE as usize)
        .for_each(|pa| o.write_block(pa));
    e.read_range(0, n, None).unwrap();
    (0..n)
        .step_by(LINE as usize)
        .for_each(|pa| o.read_block(pa));
    e.flush().unwrap();
    o.flush();
    assert_eq!(txns(&e), o.log);
}

#[test]
fn flush_cleans_and_preserves_contents() {
    let mut e = engine(128 << 20, 1024, EngineMode::Functional);
    for i in 0..64u64 {
        e.bl_write(i * 4096, &[i as u8; 64]).unwrap();
    }
    e.flush().unwrap();
    assert!(e.cache().entries().all(|l| !l.dirty));
    let before = e.dram().log().len();
    e.flush().unwrap();
    assert_eq!(e.dram().log().len(), before);
    for i in 0..64u64 {
        assert_eq!(e.bl_read(i * 4096).unwrap().0, [i as u8; 64]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random block reads and writes in a small hot set stress evictions
    /// with dirty counter lines whose parents are not resident.
    #[test]
    fn random_accesses_match_oracle(
        ops in prop::collection::vec((0u8..9, 0u64..4096), 1..400),
        cache_lines in 4u64..24,
        spread in 1u64..64,
    ) {
        let region = 128 << 20;
        let mut e = engine(region, cache_lines * LINE, EngineMode::Accounting);
        let mut o = PathOracle::new(0, region, 8, cache_lines * LINE);
        for (op, b) in ops {
            let pa = (b * spread * 8 * LINE) % region;
            match op {
                0 => {
                    e.flush().unwrap();
                    o.flush();
                }
                1..=4 => {
                    e.write_range(pa, LINE, None).unwrap();
                    o.write_block(pa);
                }
                _ => {
                    e.read_range(pa, LINE, None).unwrap();
                    o.read_block(pa);
                }
            }
        }
        e.flush().unwrap();
        o.flush();
        prop_assert_eq!(txns(&e), o.log);
    }

    #[test]
    fn larger_caches_never_add_metadata(
        ops in prop::collection::vec((any::<bool>(), 0u64..2048), 1..300),
    ) {
        let meta = |cache: u64| {
            let mut e = engine(128 << 20, cache, EngineMode::Accounting);
            for &(w, b) in &ops {
                let pa = b * 8 * LINE * 3;
                if w { e.write_range(pa, LINE, None).unwrap() } else { e.read_range(pa, LINE, None).unwrap() }
            }
            // Flush-insensitive comparison: count read fills only.
            e.dram().log().iter().filter(|r| r.class.is_meta() && r.op == AccessOp::Read).count()
        };
        let (a, b, c) = (meta(1024), meta(4096), meta(8192));
        prop_assert!(b <= a && c <= b, "{} {} {}", a, b, c);
    }
}
