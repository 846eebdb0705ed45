//! Gumbel-max sampling reproduces softmax probabilities; the relaxation
//! sharpens towards the same one-hot as the temperature falls.

use argmaxgrad::gumbel::{gumbel_max_sample, gumbel_softmax_relax, GumbelDraw, NoiseStream};

fn main() -> argmaxgrad::Result<()> {
    let logits = [1.0, 0.0, -0.5, 2.0, 0.3];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let mut noise = NoiseStream::new(42, 0);
    let draws = 200_000;
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        let g = GumbelDraw::sample(1, 5, &mut noise);
        counts[gumbel_max_sample(&logits, g.row(0))?] += 1;
    }
    println!("state  softmax  empirical");
    for (i, c) in counts.iter().enumerate() {
        println!("{i:>5}  {:.4}   {:.4}", logits[i].exp() / z, *c as f64 / draws as f64);
    }

    let g = GumbelDraw::sample(1, 5, &mut noise);
    println!("argmax of this draw: {}", gumbel_max_sample(&logits, g.row(0))?);
    for tau in [2.0, 0.5, 0.1, 0.01] {
        let y = gumbel_softmax_relax(&logits, g.row(0), tau)?;
        let shown: Vec<String> = y.iter().map(|v| format!("{v:.3}")).collect();
        println!("tau {tau:<5} relaxed [{}]", shown.join(", "));
    }
    Ok(())
}
