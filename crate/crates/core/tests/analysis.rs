use tam_core::analysis::complexity::{analyze, arch_names, count_flops, named_config, params_of, ARCHS};
use tam_core::analysis::dump::{dump_kernels, resolve_layers, CSV_HEADER};
use tam_core::arch::{describe_at, NetConfig, TemporalModuleKind};
use tam_core::blocks::build_network;
use tam_core::synth::{generate, DatasetSpec, Split};

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want
}

#[test]
fn resnet50_parameter_counts() {
    for (arch, millions) in [("c2d-r50", 24.33), ("tanet-r50", 25.59), ("c2d-tconv-r50", 28.10), ("i3d3x1x1-r50", 32.99)] {
        let c = analyze(arch, 8, 256).unwrap();
        assert!(within(c.params_m, millions, 0.005), "{arch}: {} M vs {millions} M", c.params_m);
    }
}

#[test]
fn resnet50_flops_at_eight_frames() {
    for (arch, g) in [("c2d-r50", 42.95), ("tanet-r50", 43.02), ("c2d-tconv-r50", 53.02), ("i3d3x1x1-r50", 62.55)] {
        let c = analyze(arch, 8, 256).unwrap();
        assert!(within(c.gflops, g, 0.05), "{arch}: {} G vs {g} G", c.gflops);
    }
    let base = analyze("c2d-r50", 8, 256).unwrap().flops as f64;
    let tam = analyze("tanet-r50", 8, 256).unwrap().flops as f64;
    assert!(tam > base && (tam - base) / base < 0.005);
}

#[test]
fn toy_counts_match_allocated_parameters() {
    for name in arch_names().into_iter().filter(|n| n.starts_with("toy-")) {
        let cfg = named_config(name, 8).unwrap();
        let model = build_network::<f32>(&cfg, 0).unwrap();
        assert_eq!(params_of(&cfg).unwrap(), model.params.num_trainable(), "{name}");
    }
}

#[test]
fn convolutional_flops_scale_linearly_with_frames() {
    for &(name, kind) in ARCHS {
        if kind.uses_tam() {
            continue;
        }
        let at = |t| count_flops(&describe_at(&named_config(name, t).unwrap(), t, 224, 224).unwrap());
        assert_eq!(at(16), 2 * at(8), "{name}");
    }
}

#[test]
fn adaptive_module_flops_are_nearly_linear_in_frames() {
    // The global branch adds a term quadratic in T; it stays negligible.
    let a = analyze("tanet-r50", 8, 224).unwrap().flops as f64;
    let b = analyze("tanet-r50", 16, 224).unwrap().flops as f64;
    assert!(within(b, 2.0 * a, 1e-3));
}

fn probe_data() -> tam_core::synth::Dataset {
    let spec = DatasetSpec { train_count: 8, val_count: 12, ..DatasetSpec::default() };
    generate(&spec, Split::Val).unwrap()
}

#[test]
fn fixed_channelwise_kernels_never_vary_across_videos() {
    let mut cfg = NetConfig::toy(TemporalModuleKind::ChannelwiseTConv);
    cfg.channelwise_init = tam_core::arch::ChannelwiseInit::Shift;
    let model = build_network::<f32>(&cfg, 0).unwrap();
    let dump = dump_kernels(&model, &probe_data(), &["stage1.last".to_string()], 5).unwrap();
    let s = &dump.summarize()[0];
    assert_eq!(s.videos, 12);
    assert!(s.cross_video_std.iter().all(|&v| v == 0.0));
    assert_eq!(s.varying_channel_fraction, 0.0);
}

#[test]
fn adaptive_kernels_vary_across_videos_even_untrained() {
    let model = build_network::<f32>(&NetConfig::toy(TemporalModuleKind::Tam), 0).unwrap();
    let dump = dump_kernels(&model, &probe_data(), &["last".to_string()], 5).unwrap();
    let s = &dump.summarize()[0];
    assert_eq!(s.channels, s.cross_video_std.len());
    assert!(s.varying_channel_fraction >= 0.5, "{}", s.varying_channel_fraction);
    let mut csv = Vec::new();
    dump.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with(CSV_HEADER));
    assert!(text.contains(",v,"));
}

#[test]
fn selectors_reject_layers_without_kernels() {
    let model = build_network::<f32>(&NetConfig::toy(TemporalModuleKind::None), 0).unwrap();
    assert!(resolve_layers(&model, &["last".to_string()]).is_err());
    let tanet = build_network::<f32>(&NetConfig::toy(TemporalModuleKind::Tam), 0).unwrap();
    assert!(resolve_layers(&tanet, &["stage0.block0.conv1".to_string()]).is_err());
    assert_eq!(resolve_layers(&tanet, &["last".to_string()]).unwrap(), vec![tanet.temporal_layer_names().pop().unwrap()]);
}
