#![no_main]
use libfuzzer_sys::fuzz_target;
use pcvault_core::metrics::parse_report_csv;
use pcvault_harness::bench::parse_bench_csv;
use pcvault_harness::experiment::parse_summary_csv;
use pcvault_harness::procstat::{parse_cpu_csv, parse_stat_ticks};
use pcvault_net::cache::parse_access_log;
use pcvault_net::client::{parse_frames_csv, parse_stalls_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_access_log(text);
    let _ = parse_frames_csv(text);
    let _ = parse_stalls_csv(text);
    let _ = parse_bench_csv(text);
    let _ = parse_summary_csv(text);
    let _ = parse_cpu_csv(text);
    let _ = parse_report_csv(text);
    let _ = parse_stat_ticks(text);
});
