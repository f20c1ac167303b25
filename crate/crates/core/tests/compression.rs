use std::collections::{BTreeMap, BTreeSet};

use bkd_core::analysis::{count_macs, count_params};
use bkd_core::compression::{
    apply_plan, compress, preset_plan, reinsert, removed_weights, CompressionPlan, Preset,
};
use bkd_core::{BlockPath, Context, Error, StageKind, UNet, UNetConfig};
use candle_core::{Device, Tensor};
use proptest::prelude::*;

fn inputs(cfg: &UNetConfig, b: usize, hw: usize) -> (Tensor, Vec<u32>, Context) {
    let dev = Device::Cpu;
    let z = Tensor::randn(0f32, 1.0, (b, cfg.in_channels, hw, hw), &dev).unwrap();
    let emb = Tensor::randn(0f32, 1.0, (b, cfg.context_len, cfg.context_dim), &dev).unwrap();
    let t = (0..b as u32).map(|i| 1 + 97 * i).collect();
    (z, t, Context { embedding: emb, key_bias: None })
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect()
}

/// Plan dropping the second layer of the chosen down and up stages.
fn layer_plan(cfg: &UNetConfig, down: &[bool], up: &[bool], mid: bool, innermost: bool) -> CompressionPlan {
    let mut removals = BTreeSet::new();
    for (stage, mask) in [(StageKind::Down, down), (StageKind::Up, up)] {
        for (i, &on) in mask.iter().enumerate() {
            if on {
                let layers = cfg.stage_layers(stage, i);
                removals.extend(layers[1].iter().map(|&b| BlockPath::new(stage, i, b)));
            }
        }
    }
    CompressionPlan {
        removals,
        remove_mid_stage: mid,
        remove_innermost_stages: innermost,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn valid_plans_keep_shapes_skips_and_taps(
        down in proptest::collection::vec(any::<bool>(), 4),
        up in proptest::collection::vec(any::<bool>(), 4),
        mid in any::<bool>(),
        innermost in any::<bool>(),
    ) {
        let teacher_cfg = UNetConfig::toy();
        let plan = layer_plan(&teacher_cfg, &down, &up, mid, innermost && mid);
        let (student_cfg, _) = match apply_plan(&teacher_cfg, &plan) {
            Ok(v) => v,
            Err(e) => {
                prop_assert!(matches!(e, Error::Structure { .. } | Error::Plan(_)), "{e}");
                return Ok(());
            }
        };
        let walk = student_cfg.check().unwrap();
        prop_assert_eq!(walk.skips_pushed, walk.skips_popped);

        let teacher_walk = teacher_cfg.walk().unwrap();
        for tap in &walk.taps {
            let t = teacher_walk.taps.iter().find(|t| t.tap_id == tap.tap_id);
            prop_assert!(t.is_some(), "student tap {} missing in teacher", tap.tap_id);
            let t = t.unwrap();
            prop_assert_eq!((t.channels, t.scale), (tap.channels, tap.scale));
        }

        let tp = count_params(&teacher_cfg).unwrap().total_params();
        let sp = count_params(&student_cfg).unwrap().total_params();
        prop_assert!(sp <= tp);
        let tm = count_macs(&teacher_cfg, (16, 16)).unwrap().total_macs();
        let sm = count_macs(&student_cfg, (16, 16)).unwrap().total_macs();
        prop_assert!(sm <= tm);

        let student = UNet::build(&student_cfg, 3).unwrap();
        let (z, t, ctx) = inputs(&student_cfg, 1, 16);
        let (eps, taps) = student.forward(&z, &t, &ctx).unwrap();
        prop_assert_eq!(eps.dims(), z.dims());
        for (id, shape) in walk.tap_shapes(16, 16) {
            prop_assert_eq!(taps.get(&id).unwrap().dims(), &[1, shape[0], shape[1], shape[2]][..]);
        }
    }
}

#[test]
fn presets_are_valid_mirrored_plans() {
    let cfg = UNetConfig::toy();
    for preset in [Preset::Base, Preset::Small, Preset::Tiny] {
        let plan = preset_plan(preset, &cfg).unwrap();
        let mid = preset != Preset::Base;
        let tiny = preset == Preset::Tiny;
        assert_eq!(plan.removals, layer_plan(&cfg, &[true; 4], &[true; 4], mid, tiny).removals);
        apply_plan(&cfg, &plan).unwrap();
    }
}

#[test]
fn every_preset_inherits_every_student_tensor() {
    let teacher = UNet::build(&UNetConfig::toy(), 5).unwrap();
    for preset in [Preset::Base, Preset::Small, Preset::Tiny] {
        let plan = preset_plan(preset, teacher.config()).unwrap();
        let (student, map) = compress(&teacher, &plan).unwrap();
        assert_eq!(map.coverage(&student), 1.0, "{preset}");
        let teacher_vals: BTreeMap<String, Vec<f64>> = teacher.params().flat_values().unwrap().into_iter().collect();
        for (s_name, values) in student.params().flat_values().unwrap() {
            let t_name = &map.params[&s_name];
            assert_eq!(&teacher_vals[t_name], &values, "{preset}: {s_name} <- {t_name}");
        }
    }
}

#[test]
fn fullsize_presets_cover_every_tensor() {
    use bkd_core::unet::layout::parameter_layout;
    for cfg in [UNetConfig::fullsize_v1(), UNetConfig::fullsize_v2()] {
        let teacher_shapes: BTreeMap<String, Vec<usize>> =
            parameter_layout(&cfg).unwrap().into_iter().collect();
        for preset in [Preset::Base, Preset::Small, Preset::Tiny] {
            let (student_cfg, map) = apply_plan(&cfg, &preset_plan(preset, &cfg).unwrap()).unwrap();
            for (name, shape) in parameter_layout(&student_cfg).unwrap() {
                let src = map.params.get(&name).unwrap_or_else(|| panic!("{preset}: {name} has no source"));
                assert_eq!(teacher_shapes[src], shape, "{preset}: {name}");
            }
        }
    }
}

fn assert_round_trip(teacher: &UNet, plan: &CompressionPlan, z: &Tensor, t: &[u32], ctx: &Context) {
    let (student, map) = compress(teacher, plan).unwrap();
    let removed = removed_weights(teacher, &map).unwrap();
    let rebuilt = reinsert(&student, teacher.config(), &map, &removed).unwrap();
    assert_eq!(rebuilt.params().fingerprint().unwrap(), teacher.params().fingerprint().unwrap());
    let (a, _) = teacher.forward(z, t, ctx).unwrap();
    let (b, _) = rebuilt.forward(z, t, ctx).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn remove_then_reinsert_restores_teacher_outputs() {
    let cfg = UNetConfig::toy();
    let teacher = UNet::build(&cfg, 11).unwrap();
    let (z, t, ctx) = inputs(&cfg, 2, 16);
    for preset in [Preset::Base, Preset::Small, Preset::Tiny] {
        assert_round_trip(&teacher, &preset_plan(preset, &cfg).unwrap(), &z, &t, &ctx);
    }
    let mut tried = 0;
    for (path, spec) in cfg.blocks() {
        if !spec.removable {
            continue;
        }
        let plan = CompressionPlan { removals: BTreeSet::from([path]), ..Default::default() };
        if apply_plan(&cfg, &plan).is_ok() {
            assert_round_trip(&teacher, &plan, &z, &t, &ctx);
            tried += 1;
        }
    }
    assert!(tried > 0);
}

#[test]
fn fullsize_preset_sizes() {
    let v1 = UNetConfig::fullsize_v1();
    let total = |cfg: &UNetConfig| count_params(cfg).unwrap().total_params() as f64 / 1e6;
    assert!((total(&v1) - 859.52).abs() < 0.01);
    let expect = [(Preset::Base, 579.38), (Preset::Small, 482.35), (Preset::Tiny, 323.38)];
    for (preset, m) in expect {
        let (s, _) = apply_plan(&v1, &preset_plan(preset, &v1).unwrap()).unwrap();
        assert!((total(&s) - m).abs() < 0.01, "{preset}: {}", total(&s));
    }
}
