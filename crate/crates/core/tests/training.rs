use come_core::predictor::{train, write_trace_csv, TrainConfig};
use come_core::synth::Workload;
use come_core::PatchGrid;

#[test]
fn distillation_converges_on_linear_teacher() {
    let wl = Workload::smooth(PatchGrid::new(8, 8), 8, 1);
    let cfg = TrainConfig { latent: 16, ..TrainConfig::default() };
    let out = train(&wl, &cfg).unwrap();
    assert_eq!(out.trace.len(), cfg.steps + 1);
    assert!(out.final_loss() < 0.1 * out.initial_loss(), "{} vs {}", out.final_loss(), out.initial_loss());
    assert!(out.final_iou().unwrap() > 0.8);

    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &out.trace).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), cfg.steps + 2);
}
