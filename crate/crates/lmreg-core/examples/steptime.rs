fn main() {
    use lmreg_core::model::*;
    use lmreg_core::synth::*;
    use lmreg_core::train::*;
    use std::time::Instant;
    let scfg = SynthConfig { size: [32,32,32], count: 2, seed: 7, max_disp: 4.0, smooth_sigma: 4.0, n_shapes: 4 };
    let pairs: Vec<RegPair> = (0..2).map(|i| {
        let p = gen_pair(&scfg, i).unwrap();
        RegPair { moving: p.moving, fixed: p.fixed }
    }).collect();
    let cfg = ModelConfig { input_dims: [32,32,32], cascade_steps: 3, ..ModelConfig::default() };
    let mut model = RegModel::new(cfg, 7).unwrap();
    for phase in [TrainPhase::CascadeStep(1), TrainPhase::CascadeStep(2), TrainPhase::CascadeStep(3)] {
        let tcfg = TrainConfig { steps: 4, phase, ..TrainConfig::default() };
        let t0 = Instant::now();
        train(&mut model, &pairs, &tcfg).unwrap();
        println!("{phase}: {:.2} s/step", t0.elapsed().as_secs_f64() / 4.0);
    }
    // inference timing
    let t0 = Instant::now();
    let _ = model.register_pair(&pairs[0].moving, &pairs[0].fixed).unwrap();
    println!("inference (3 steps): {:.2} s", t0.elapsed().as_secs_f64());
}
