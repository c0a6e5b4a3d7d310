use soh_core::eval::{embedder_source, DatasetSplit};
use soh_core::model::Model;
use soh_core::parallel::Exec;
use soh_core::preprocess::{build_model_input, preprocess_records, SmoothingParams};
use soh_core::synth::{generate_all, SynthSpec};
use soh_core::{ModelConfig, Variant};

fn setup(variant: Variant) -> (Model, Vec<soh_core::record::BatteryRecord>) {
    let cfg = ModelConfig { s_cycles: 12, ..ModelConfig::desk() }.with_variant(variant);
    let spec = SynthSpec { n_conditions: 3, batteries_per_condition: 1, ..Default::default() };
    let records: Vec<_> = generate_all(&spec, Exec::Parallel).into_iter().map(|(r, _)| r).collect();
    let kept = preprocess_records(&records, &cfg, &SmoothingParams::default(), None, Exec::Parallel).kept;
    let split = DatasetSplit { train: kept, ..Default::default() };
    (Model::new(cfg.clone(), embedder_source(&cfg, &split, None)).unwrap(), records)
}

#[test]
fn cycles_beyond_s_do_not_change_the_forecast() {
    for v in [Variant::Full, Variant::NoSocView] {
        let (model, records) = setup(v);
        let s = model.config.s_cycles;
        let r = &records[0];
        let mut scrambled = r.clone();
        for c in scrambled.cycles.iter_mut().skip(s) {
            c.voltage.iter_mut().for_each(|x| *x += 0.3);
            c.current.iter_mut().for_each(|x| *x *= 0.7);
        }
        let predict = |rec: &soh_core::record::BatteryRecord| {
            let input = build_model_input(rec, s, &model.config).unwrap();
            let prep = model.prepare_input(&rec.battery_id, &input, &rec.condition).unwrap();
            model.predict(&prep).unwrap().y_norm
        };
        assert_eq!(predict(r), predict(&scrambled), "{v}");
    }
}

#[test]
fn padded_temporal_tokens_get_no_attention() {
    let (model, records) = setup(Variant::Full);
    let cfg = &model.config;
    let r = &records[1];
    let input = build_model_input(r, cfg.s_cycles, cfg).unwrap();
    let prep = model.prepare_input(&r.battery_id, &input, &r.condition).unwrap();
    let pred = model.predict(&prep).unwrap();
    assert_eq!(pred.cross_attention.len(), cfg.decoder_layers);
    for a in &pred.cross_attention {
        assert_eq!(a.ncols(), cfg.n_tokens());
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().skip(cfg.s_cycles).take(cfg.s_max - cfg.s_cycles).all(|w| *w == 0.0));
        }
    }
}

#[test]
fn no_socview_drops_the_soc_tokens_and_their_parameters() {
    let (full, _) = setup(Variant::Full);
    let (bare, _) = setup(Variant::NoSocView);
    assert_eq!(bare.config.n_tokens(), bare.config.s_max);
    let conv = |m: &Model| m.params.names().iter().filter(|n| n.contains("soc")).count();
    assert!(conv(&full) > 0);
    assert_eq!(conv(&bare), 0);
    assert!(bare.params.len() < full.params.len());
}
