use rhawk_core::dataset::{split, SplitSpec};
use rhawk_core::hawkes::{simulate_dataset, HawkesParams};
use rhawk_core::model::ModelConfig;
use rhawk_core::train::{TrainConfig, TrainState};

fn main() {
    let mut gamma = vec![vec![1.2; 4]; 4];
    gamma[3][2] = 2.0;
    let params = HawkesParams::new(
        vec![0.30, 0.20, 0.03, 0.01],
        vec![
            vec![0.0, 0.8, 0.0, 0.8],
            vec![0.8, 0.0, 0.0, 0.0],
            vec![0.2, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 4.0, 0.0],
        ],
        gamma,
    ).unwrap();
    let (data, _) = simulate_dataset(&params, 12.0, 1200, 2024).unwrap();
    let spec = SplitSpec { train_frac: 0.76, val_frac: 0.1, test_frac: 0.1, clean_frac: 0.04, seed: 7 };
    let parts = split(&data, &spec).unwrap();
    let (mut noisy, _) = rhawk_core::noise::corrupt(&parts.train, &rhawk_core::noise::NoiseSpec {
        kind: rhawk_core::noise::NoiseKind::Uniform, p: 0.3, time_p: 0.3, time_sigma: 0.8, seed: 42,
    }).unwrap();
    noisy.max_gap = Some(noisy.observed_max_gap());
    let use_overparam = std::env::var("OP").map(|v| v == "1").unwrap_or(true);
    let cfg = TrainConfig {
        batch_size: 16, lr: 0.01, epochs: 1, seed: 11,
        tau_m: 3.0, tau_n: 3.0,
        use_gce: true, use_overparam, use_reweight: true,
        gce_warmup_epochs: 8,
        reweight_lr: 1e-3,
        model: ModelConfig {
            num_types: 4, embed_dim: 16, attention_heads: 4, attention_layers: 2,
            mlp_layers: 3, hidden_size: 16, dropout_rate: 0.1,
        },
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(cfg, noisy.max_gap.unwrap()).unwrap();
    state.init_over_params(&noisy);
    for epoch in 0..12 {
        let st = state.train_epoch(&noisy, &parts.clean).unwrap();
        let ev = state.evaluate(&parts.val).unwrap();
        // per-class F1 on val
        let k = 4;
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for seq in &parts.val.sequences {
            if seq.len() < 2 { continue; }
            let f = state.model.forward(seq, None).unwrap();
            let logits = f.logits.values();
            for pos in 0..seq.len() - 1 {
                let row = &logits[pos * k..(pos + 1) * k];
                let mut arg = 0;
                for (i, &x) in row.iter().enumerate() { if x > row[arg] { arg = i; } }
                preds.push(arg);
                truths.push(seq.events[pos + 1].mark);
            }
        }
        let mut pc = [0.0f64; 4];
        for c in 0..4 {
            let tp = preds.iter().zip(&truths).filter(|(p, t)| **p == c && **t == c).count() as f64;
            let fp = preds.iter().zip(&truths).filter(|(p, t)| **p == c && **t != c).count() as f64;
            let fn_ = preds.iter().zip(&truths).filter(|(p, t)| **p != c && **t == c).count() as f64;
            let d = 2.0 * tp + fp + fn_;
            pc[c] = if d > 0.0 { 2.0 * tp / d } else { 0.0 };
        }
        let (mm, nn) = state.over_params.max_abs();
        println!(
            "ep {epoch:2} lv {:.4} lt {:.4} sv {:.3} st {:.3} | val f1 {:.3} pc {:.2?} | |m| {:.3} |n| {:.3} clip {}",
            st.loss_v, st.loss_t, st.sigma_v, st.sigma_t, ev.f1, pc, mm, nn, state.clip_events
        );
    }
}
