fn main() {
    use lmreg_core::diff::Graph;
    use lmreg_core::model::*;
    use lmreg_core::synth::*;
    let scfg = SynthConfig::default();
    let p = gen_pair(&scfg, 0).unwrap();
    let mcfg = ModelConfig { cascade_steps: 1, ..ModelConfig::default() };
    let model = RegModel::new(mcfg, 7).unwrap();
    let mut g = Graph::new();
    let mask = model.inference_mask();
    let out = model.forward(&mut g, &mask, &p.moving, &p.fixed, 1).unwrap();
    let rms = |v: &[f32]| (v.iter().map(|x| (x * x) as f64).sum::<f64>() / v.len() as f64).sqrt();
    println!("tokens y rms: {:.3}", rms(g.data(out.tokens)));
    for i in 0..4 {
        println!(
            "stage {}: token_features rms {:.3}  fusion out rms {:.3}",
            i + 1,
            rms(g.data(out.steps[0].token_features[i])),
            rms(g.data(out.steps[0].features[i])),
        );
    }
    let (em, ef) = model.encode_pair(&mut g, &p.moving, &p.fixed).unwrap();
    for l in 0..4 {
        println!("enc level {}: moving rms {:.3} fixed rms {:.3}", l + 1, rms(g.data(em[l])), rms(g.data(ef[l])));
    }
}
