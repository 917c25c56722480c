//! The forward process: ᾱ over time and empirical moments of x_t.

use videobooth::diffusion::{forward_noise, NoiseSchedule, ScheduleConfig};
use videobooth::{RngStream, Tensor};

fn main() -> videobooth::Result<()> {
    let s = NoiseSchedule::from_config(&ScheduleConfig::default())?;
    let x0 = Tensor::<f64>::from_f64([1], &[1.0])?;
    let mut rng = RngStream::new(0);
    println!("{:>4} {:>8} {:>9} {:>9} {:>9} {:>9}", "t", "ᾱ", "mean", "√ᾱ·x0", "var", "1-ᾱ");
    for t in [1, 10, 25, 50, 75, s.steps()] {
        let ab = s.alpha_bar_at(t)?;
        let draws: Vec<f64> = (0..20_000)
            .map(|_| forward_noise(&s, &x0, t, &rng.normal_tensor(vec![1])).map(|x| x.data()[0]))
            .collect::<videobooth::Result<_>>()?;
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        println!("{t:>4} {ab:>8.4} {mean:>9.4} {:>9.4} {var:>9.4} {:>9.4}", ab.sqrt(), 1.0 - ab);
    }
    Ok(())
}
