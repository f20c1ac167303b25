use std::collections::BTreeMap;

use bkd_core::analysis::{
    aggregate_attention, attribution_maps, conv_macs, cosine, count_macs, count_params, default_metrics, probe_targets,
    probe_variant, sensitivity_analysis, Granularity, ProbeKind,
};
use bkd_core::compression::{apply_plan, preset_plan, Preset};
use bkd_core::config::{AttentionHeads, StandardLayout};
use bkd_core::data::{generate_synthetic, DatasetManifest};
use bkd_core::diffusion::{SamplerConfig, StepCapture};
use bkd_core::distill::{EvalSet, Pipeline, ScheduleSpec};
use bkd_core::unet::CrossAttnCapture;
use bkd_core::{BlockPath, Error, UNetConfig};
use candle_core::{Device, Tensor};

#[test]
fn fullsize_parameter_totals() {
    let v1 = UNetConfig::fullsize_v1();
    let m = |cfg: &UNetConfig| count_params(cfg).unwrap().total_params() as f64 / 1e6;
    assert!((m(&v1) - 859.52).abs() < 0.01, "{}", m(&v1));
    let mut no_mid = v1.clone();
    no_mid.mid_blocks.clear();
    assert!((m(&no_mid) - 762.48).abs() < 0.01, "{}", m(&no_mid));
    for (preset, expected) in [(Preset::Base, 579.0), (Preset::Small, 482.0), (Preset::Tiny, 323.0)] {
        let (s, _) = apply_plan(&v1, &preset_plan(preset, &v1).unwrap()).unwrap();
        assert!((m(&s) - expected).abs() / expected < 0.01, "{preset}: {}", m(&s));
    }
}

#[test]
fn fullsize_mac_totals_and_reductions() {
    let v1 = UNetConfig::fullsize_v1();
    let base = count_macs(&v1, (64, 64)).unwrap();
    let g = base.total_macs() as f64 / 1e9;
    assert!((g - 339.0).abs() / 339.0 < 0.10, "{g}");
    for (preset, expected) in [(Preset::Base, -0.339), (Preset::Small, -0.357), (Preset::Tiny, -0.395)] {
        let (s, _) = apply_plan(&v1, &preset_plan(preset, &v1).unwrap()).unwrap();
        let r = count_macs(&s, (64, 64)).unwrap().total_macs() as f64 / base.total_macs() as f64 - 1.0;
        assert!((r - expected).abs() < 0.01, "{preset}: {r}");
    }
    assert!(base.total_attn_macs() > 0);
    assert_eq!(base.macs_with_attention(), base.total_macs() + base.total_attn_macs());
}

#[test]
fn single_layer_oracles() {
    // 3x3 conv 320 -> 320: 9 * 320 * 320 weights + 320 biases
    let mut cfg = UNetConfig::fullsize_v1();
    cfg.in_channels = 320;
    assert_eq!(count_params(&cfg).unwrap().row("conv_in").unwrap().params, 921_920);
    for c in [1u64, 7, 320] {
        assert_eq!(conv_macs(1, c, c, 1, 1), c * c);
    }
    let r = count_macs(&cfg, (64, 64)).unwrap();
    assert_eq!(r.row("conv_in").unwrap().macs, 9 * 320 * 320 * 64 * 64);
}

#[test]
fn multi_step_cost_is_linear() {
    let r = count_macs(&UNetConfig::toy(), (16, 16)).unwrap();
    assert_eq!(r.steps_macs(25), 25 * r.total_macs());
    assert_eq!(r.steps_macs(1), r.total_macs());
    assert!(r.to_csv().unwrap().lines().count() > r.rows.len());
}

#[test]
fn compute_counts_never_increase_under_presets() {
    for cfg in [UNetConfig::toy(), UNetConfig::fullsize_v1(), UNetConfig::fullsize_v2()] {
        let hw = if cfg.stage_channels[0] == 320 { (64, 64) } else { (16, 16) };
        let mut last = (count_params(&cfg).unwrap().total_params(), count_macs(&cfg, hw).unwrap().total_macs());
        for preset in [Preset::Base, Preset::Small, Preset::Tiny] {
            let (s, _) = apply_plan(&cfg, &preset_plan(preset, &cfg).unwrap()).unwrap();
            let now = (count_params(&s).unwrap().total_params(), count_macs(&s, hw).unwrap().total_macs());
            assert!(now.0 < last.0 && now.1 < last.1, "{preset}");
            last = now;
        }
    }
}

fn micro_rgb() -> UNetConfig {
    UNetConfig::standard(StandardLayout {
        stage_channels: vec![8, 16],
        stage_attention: vec![true, false],
        layers_per_stage: 2,
        attention_heads: AttentionHeads::Uniform(2),
        context_dim: 8,
        context_len: 8,
        norm_groups: 4,
        time_embed_dim: 16,
        latent_channels: 3,
    })
}

fn setup() -> (Pipeline, EvalSet) {
    let data = generate_synthetic(&DatasetManifest::synthetic(1, 24, 8)).unwrap();
    let schedule = ScheduleSpec::linear(100).build().unwrap();
    let p = Pipeline::new(&micro_rgb(), data.manifest.vocabulary.clone(), schedule, data.manifest.codec, 4).unwrap();
    let eval = EvalSet::from_dataset(&data, 4, 3, &p.schedule, &p).unwrap();
    (p, eval)
}

#[test]
fn sensitivity_covers_every_target_and_keeps_teacher() {
    let (teacher, eval) = setup();
    let before = teacher.unet.params().fingerprint().unwrap();
    let metric = default_metrics(&teacher, &eval);
    for g in [Granularity::Block, Granularity::Group] {
        let report = sensitivity_analysis(&teacher, g, &metric).unwrap();
        let targets = probe_targets(teacher.unet.config(), g);
        assert_eq!(report.rows.len(), targets.len());
        for (row, (name, _)) in report.rows.iter().zip(&targets) {
            assert_eq!(&row.target, name);
            assert!(row.error.is_none(), "{:?}", row.error);
            assert_eq!(row.scores.keys().collect::<Vec<_>>(), vec!["denoise_loss", "teacher_mse"]);
            assert!(row.scores.values().all(|v| v.is_finite()));
        }
        assert_eq!(report.baseline["teacher_mse"], 0.0);
        assert_eq!(report.ranked("teacher_mse").len(), report.rows.len());
    }
    let block = sensitivity_analysis(&teacher, Granularity::Block, &metric).unwrap();
    let removable = teacher.unet.config().blocks().filter(|(_, s)| s.removable).count();
    assert_eq!(block.rows.len(), removable);
    assert!(block.rows.iter().any(|r| r.kind == ProbeKind::Removal));
    assert!(block.rows.iter().any(|r| r.kind == ProbeKind::ChannelInterp));
    assert_eq!(teacher.unet.params().fingerprint().unwrap(), before);
}

#[test]
fn empty_probe_reproduces_the_baseline() {
    let (teacher, eval) = setup();
    let metric = default_metrics(&teacher, &eval);
    let variant = probe_variant(&teacher, &[]).unwrap();
    assert_eq!(metric(&variant).unwrap(), metric(&teacher).unwrap());
}

#[test]
fn failing_probe_is_recorded_not_fatal() {
    let (teacher, _) = setup();
    let calls = std::cell::Cell::new(0);
    let metric = |_: &Pipeline| -> bkd_core::Result<BTreeMap<String, f64>> {
        calls.set(calls.get() + 1);
        if calls.get() == 2 {
            Err(Error::Domain("probe failure".into()))
        } else {
            Ok(BTreeMap::from([("m".to_string(), 1.0)]))
        }
    };
    let report = sensitivity_analysis(&teacher, Granularity::Group, &metric).unwrap();
    assert_eq!(report.rows.iter().filter(|r| r.error.is_some()).count(), 1);
    assert!(report.rows[0].error.is_some());
    assert!(report.rows[1..].iter().all(|r| r.deltas["m"] == 0.0));
}

fn capture(probs: Vec<f32>, heads: usize, h: usize, w: usize, l: usize) -> CrossAttnCapture {
    CrossAttnCapture {
        path: BlockPath::down(0, 1),
        height: h,
        width: w,
        probs: Tensor::from_vec(probs, (1, heads, h * w, l), &Device::Cpu).unwrap(),
    }
}

#[test]
fn uniform_attention_gives_flat_maps() {
    let l = 4;
    let step = StepCapture { step: 0, timestep: 10, layers: vec![capture(vec![0.25; 2 * 16 * l], 2, 4, 4, l)] };
    let (h, w, maps) = aggregate_attention(&[step], 0, 3).unwrap();
    assert_eq!((h, w, maps.len()), (4, 4, 3));
    assert!(maps.iter().flatten().all(|v| (v - 0.25).abs() < 1e-7));
}

#[test]
fn aggregation_ignores_step_and_layer_order() {
    let mk = || {
        let t = Tensor::rand(0f32, 1.0, (1, 2, 4, 3), &Device::Cpu).unwrap();
        let t = (&t / t.sum_keepdim(3).unwrap().broadcast_as(t.dims()).unwrap()).unwrap();
        let big = Tensor::rand(0f32, 1.0, (1, 2, 16, 3), &Device::Cpu).unwrap();
        let big = (&big / big.sum_keepdim(3).unwrap().broadcast_as(big.dims()).unwrap()).unwrap();
        vec![
            CrossAttnCapture { path: BlockPath::down(0, 1), height: 4, width: 4, probs: big },
            CrossAttnCapture { path: BlockPath::down(1, 1), height: 2, width: 2, probs: t },
        ]
    };
    let steps: Vec<StepCapture> =
        (0..3).map(|i| StepCapture { step: i, timestep: 90 - 30 * i as u32, layers: mk() }).collect();
    let (_, _, a) = aggregate_attention(&steps, 0, 3).unwrap();
    let mut shuffled: Vec<StepCapture> = steps.iter().rev().cloned().collect();
    shuffled.iter_mut().for_each(|s| s.layers.reverse());
    let (h, w, b) = aggregate_attention(&shuffled, 0, 3).unwrap();
    assert_eq!((h, w), (4, 4));
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() < 1e-6);
    }
    // probabilities over the kept tokens sum to one at every position
    for p in 0..16 {
        let s: f32 = a.iter().map(|m| m[p]).sum();
        assert!((s - 1.0).abs() < 1e-5, "{s}");
    }
}

#[test]
fn attribution_from_a_pipeline() {
    let (p, _) = setup();
    let cfg = SamplerConfig { steps: 3, ..Default::default() };
    assert!(matches!(attribution_maps(&p, "", &cfg, 8), Err(Error::Domain(_))));
    let maps = attribution_maps(&p, "a red circle", &cfg, 8).unwrap();
    assert_eq!(maps.tokens.len(), maps.maps.len());
    assert!(!maps.tokens.is_empty());
    assert!(maps.maps.iter().all(|m| m.len() == maps.height * maps.width && m.iter().all(|v| *v >= 0.0)));
    assert!((maps.mean_cosine_to(&maps).unwrap() - 1.0).abs() < 1e-9);
    let again = attribution_maps(&p, "a red circle", &cfg, 8).unwrap();
    assert_eq!(maps.maps, again.maps);
    assert!(maps.normalized().iter().all(|m| m.iter().all(|v| *v <= 1.0)));
    let dir = tempfile::tempdir().unwrap();
    let files = maps.write(dir.path(), "attr", "png").unwrap();
    assert_eq!(files.len(), maps.tokens.len());
}

#[test]
fn cosine_edge_cases() {
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
    assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
}
