#![no_main]
use libfuzzer_sys::fuzz_target;
use unicross::metrics::ScoreReport;

// Input: candidate lines, a NUL byte, reference lines.
fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let Some((cands, refs)) = text.split_once('\0') else {
        return;
    };
    let cands: Vec<String> = cands.lines().map(str::to_string).collect();
    let refs: Vec<String> = refs.lines().map(str::to_string).collect();
    let ids: Vec<String> = (0..cands.len()).map(|i| i.to_string()).collect();
    if let Ok(report) = ScoreReport::compute(&ids, &cands, &refs) {
        for (_, v) in report.rows() {
            assert!((0.0..=1.0 + 1e-9).contains(&v), "score {v} out of range");
        }
    }
});
