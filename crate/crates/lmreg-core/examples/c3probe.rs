// criterion-3 dry run: 32-cube synthetic recovery with the default model
fn main() {
    use lmreg_core::eval::*;
    use lmreg_core::model::*;
    use lmreg_core::synth::*;
    use lmreg_core::train::*;
    use std::time::Instant;

    let scfg = SynthConfig::default();
    let pairs: Vec<SynthPair> = (0..20).map(|i| gen_pair(&scfg, i).unwrap()).collect();
    let train_pairs: Vec<RegPair> = pairs[..16]
        .iter()
        .map(|p| RegPair { moving: p.moving.clone(), fixed: p.fixed.clone() })
        .collect();

    let eval_heldout = |model: &RegModel| -> (f64, f64, f64, f32) {
        let mut reg = 0.0;
        let mut unreg = 0.0;
        let mut folds: f64 = 0.0;
        let mut maxu: f32 = 0.0;
        for p in &pairs[16..] {
            let (field, _) = model.register_pair(&p.moving, &p.fixed).unwrap();
            maxu = maxu.max(field.max_abs());
            let r = evaluate_field(&field, &p.seg_moving, &p.seg_fixed, 0.0).unwrap();
            let zero = lmreg_core::volume::DisplacementField::zeros(p.moving.geometry);
            let u = evaluate_field(&zero, &p.seg_moving, &p.seg_fixed, 0.0).unwrap();
            reg += r.mean_dice;
            unreg += u.mean_dice;
            folds = folds.max(r.pct_nonpos_jacobian);
        }
        (reg / 4.0, unreg / 4.0, folds, maxu)
    };

    let mcfg = ModelConfig { cascade_steps: 3, ..ModelConfig::default() };
    let mut model = RegModel::new(mcfg, 7).unwrap();
    let t0 = Instant::now();
    for chunk in 0..5 {
        let tcfg = TrainConfig { steps: 100, phase: TrainPhase::CascadeStep(1), ..TrainConfig::default() };
        let rec = train(&mut model, &train_pairs, &tcfg).unwrap();
        let (reg, unreg, folds, maxu) = eval_heldout(&model);
        println!(
            "steps {:4}: loss {:.5} sim {:.5} | dice {:.3} (unreg {:.3}, gain {:+.3}) maxfold {:.3}% max|u| {:.2} | {:.1} min",
            (chunk + 1) * 100,
            rec.final_loss,
            rec.trace.last().unwrap().sim,
            reg, unreg, reg - unreg, folds, maxu,
            t0.elapsed().as_secs_f64() / 60.0
        );
    }
}
