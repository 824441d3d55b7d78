// Desk-scale tuning sweeps for the overfit and probe-sanity criteria.
use channel_mae::chansynth::{generate_records, SystemConfig};
use channel_mae::downstream::*;
use channel_mae::model::{ModelConfig, ModelParams, TokenGeometry};
use channel_mae::objectives::LossConfig;
use channel_mae::patchpipe::PatchConfig;
use channel_mae::trainer::*;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "overfit".into());
    match which.as_str() {
        "overfit" => overfit_sweep(),
        "probe" => probe_sweep(),
        _ => eprintln!("unknown sweep"),
    }
}

fn overfit_sweep() {
    let sys = SystemConfig { n_antennas: 16, n_subcarriers: 32, n_scenarios: 2, ..SystemConfig::default() };
    let records = generate_records(8, &sys, 21, 0).unwrap();
    let ds = dataset_from_records(records, 16, 32, &[1.0]).unwrap();
    let mc = ModelConfig { d_e: 32, l_enc: 2, l_dec: 2, m_enc: 4, m_dec: 4, d_c: 16, contrastive_enabled: false };
    let pc = PatchConfig { patch_rows: 1, patch_cols: 16 };
    for (lr_max, lr_min) in [(1e-3, 1e-5), (3e-3, 3e-5), (3e-3, 3e-4), (5e-3, 5e-4), (1e-2, 1e-3)] {
        let tc = TrainConfig {
            epochs: 2000, batch_size: 8, lr_max, lr_min, seed: 99, mask_ratio: 0.6,
            split_ratios: vec![1.0], ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        match pretrain(&ds, &mc, &pc, &tc, None) {
            Ok(out) => {
                let initial = out.initial_train_recon;
                let last = out.log.last().unwrap().train_recon;
                // Mean of last 10 epochs for stability reporting.
                let tail: f64 = out.log.iter().rev().take(10).map(|l| l.train_recon).sum::<f64>() / 10.0;
                println!("lr {lr_max:.0e}->{lr_min:.0e}: init {initial:.3e} last {last:.3e} tail10 {tail:.3e} ratio {:.0}x ({:.0}s)",
                    initial / last, t0.elapsed().as_secs_f64());
            }
            Err(e) => println!("lr {lr_max:.0e}->{lr_min:.0e}: ERROR {e}"),
        }
    }
}

fn probe_sweep() {
    let (mc, pc) = (
        ModelConfig { d_e: 32, l_enc: 2, l_dec: 1, m_enc: 4, m_dec: 4, d_c: 16, contrastive_enabled: false },
        PatchConfig { patch_rows: 1, patch_cols: 16 },
    );
    let sys = SystemConfig { n_antennas: 8, n_subcarriers: 16, ..SystemConfig::default() };
    let records = generate_records(512, &sys, 41, 0).unwrap();
    let ds = dataset_from_records(records, 8, 16, &[0.8, 0.2]).unwrap();

    let down_sys = SystemConfig { n_antennas: 8, n_subcarriers: 16, scenario_base: 100, ..SystemConfig::default() };
    let down = generate_records(4096, &down_sys, 77, 0).unwrap();
    let dds = dataset_from_records(down, 8, 16, &[0.7, 0.2, 0.1]).unwrap();

    let tc = TrainConfig { epochs: 60, batch_size: 32, lr_max: 1e-3, lr_min: 1e-5, seed: 11, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let wimae = pretrain(&ds, &mc, &pc, &tc, None).unwrap();
    println!("wimae trained in {:.0}s; final val recon {:?}", t0.elapsed().as_secs_f64(), wimae.final_val_recon);

    let mut mcc = mc.clone();
    mcc.contrastive_enabled = true;
    let mut warm = wimae.params.clone();
    warm.contrastive = Some(channel_mae::model::init_contrastive_head(&mcc, 4242));
    let ctc = TrainConfig { epochs: 78, batch_size: 16, lr_max: 3e-4, lr_min: 3e-6, seed: 12, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let contra = pretrain_contrastive(&ds, &mcc, &pc, &ctc, &LossConfig::default(), warm).unwrap();
    println!("contra trained in {:.0}s; final val recon {:?}", t0.elapsed().as_secs_f64(), contra.final_val_recon);

    let geo = TokenGeometry::derive(&pc, 8, 16).unwrap();
    let random = ModelParams::init(&mc, &geo, 31337).unwrap();

    for (name, params, model) in [
        ("random ", &random, &mc),
        ("wimae  ", &wimae.params, &mc),
        ("contra ", &contra.params, &mcc),
    ] {
        let src = FeatureSource::Encoder { params, model };
        let pd = build_probe_dataset(&dds, &pc, &src, Task::Beam { codebook_size: 16 }, &[0.7, 0.2, 0.1], 0).unwrap();
        let train = budget_subset(&pd.splits[0], 1.0, 17).unwrap();
        let mut cfgp = ProbeConfig::beam();
        cfgp.seed = 17;
        let clf = linear_probe(&pd, &train, &pd.splits[1], &cfgp).unwrap();
        let lines = beam_metrics(&clf, &pd, &pd.splits[2], name, 16, 1.0);
        println!("{name} top1 {:.4} top3 {:.4}", lines[0].value, lines[1].value);
    }
}
