//! Timing-sensitive, so it lives alone in its own test binary.

use fm_core::bench::{bench_generation, standard_variants, BenchOptions};

#[test]
fn fm_latency_is_flat_and_attention_grows() {
    let opts = BenchOptions::default();
    let variants = standard_variants(64, 256, 2, opts.prompt_len + opts.gen_len, 0).unwrap();
    let report = bench_generation(&variants, &opts).unwrap();
    println!("{}", report.to_tsv());

    for name in ["fm_dense", "fm_sparse"] {
        let v = report.variant(name).unwrap();
        let ratio = v.latency_ratio(64, 4096).unwrap();
        assert!((0.9..=1.1).contains(&ratio), "{name} latency ratio {ratio:.3}");
        assert_eq!(v.probe(64).unwrap().state_bytes, v.probe(4096).unwrap().state_bytes);
    }
    let dense = report.variant("fm_dense").unwrap();
    let sparse = report.variant("fm_sparse").unwrap();
    assert_eq!((dense.k, sparse.k), (256, 64));
    assert_eq!(dense.rows_written, 4 * sparse.rows_written);

    let att = report.variant("attention").unwrap();
    assert!(att.latency_ratio(64, 4096).unwrap() > 1.0);
    let grown = att.probe(4096).unwrap().state_bytes - att.probe(64).unwrap().state_bytes;
    assert_eq!(grown, (4096 - 64) * 2 * 2 * 64 * std::mem::size_of::<f32>());
}
