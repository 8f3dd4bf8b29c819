use wavemask_core::trainer::*;
use wavemask_core::tensor::Tensor;
use wavemask_core::rng::Rng;

// Variant dataset: weak smooth field + strong checkerboard patch.
fn variant(rng: &mut Rng, n: usize, size: usize, smooth_amp: f64, checker_amp: f64) -> Vec<Tensor> {
    let half = size / 2;
    let mut out = Vec::new();
    for _ in 0..n {
        let mut field = vec![0.0f64; size * size];
        for _ in 0..2 {
            let amp = rng.uniform(0.5 * smooth_amp, smooth_amp);
            let kx = (1 + rng.next_below(2)) as f64;
            let ky = (1 + rng.next_below(2)) as f64;
            for y in 0..size {
                let fy = (std::f64::consts::PI * ky * (y as f64 + 0.5) / size as f64).cos();
                for x in 0..size {
                    let fx = (std::f64::consts::PI * kx * (x as f64 + 0.5) / size as f64).cos();
                    field[y * size + x] += amp * fy * fx;
                }
            }
        }
        let q = rng.next_below(4);
        let amp = rng.uniform(0.9 * checker_amp, checker_amp);
        let r0 = (q / 2) * half;
        let c0 = (q % 2) * half;
        for y in r0..r0 + half {
            for x in c0..c0 + half {
                let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                field[y * size + x] += amp * sign;
            }
        }
        out.push(Tensor::new(vec![1, size, size], field).unwrap());
    }
    out
}

fn run(label: &str, ds: &[Tensor], steps: usize, lr: f64) {
    let cfg = TrainConfig { steps, learning_rate: lr, ..TrainConfig::default() };
    let (_, log) = train_flow(&cfg, ds).unwrap();
    let t: Vec<f64> = log.steps.iter().map(|r| r.total).collect();
    let k = 50.min(t.len()/2);
    let head: f64 = t[..k].iter().sum::<f64>() / k as f64;
    let tail: f64 = t[t.len()-k..].iter().sum::<f64>() / k as f64;
    println!("{label}: steps {steps} lr {lr}: init {:.3} final {:.3} ratio {:.3} | head{k} {:.3} tail{k} {:.3} mratio {:.3}",
        t[0], t[t.len()-1], t[t.len()-1]/t[0], head, tail, tail/head);
}

fn main() {
    // Baseline dataset, longer runs to see if it's speed or ceiling.
    let base = DemoConfig::default().build_dataset().unwrap();
    run("base  2k", &base.samples, 2000, 1e-2);
    run("base 20k", &base.samples, 20000, 1e-2);
    run("base 20k lr5e-2", &base.samples, 20000, 5e-2);

    // Bimodal variants.
    for (sa, ca) in [(0.3, 2.0), (0.2, 2.5), (0.5, 2.0)] {
        let mut rng = Rng::new(0);
        let ds = variant(&mut rng, 8, 16, sa, ca);
        run(&format!("smooth{sa}/checker{ca}  2k"), &ds, 2000, 1e-2);
        run(&format!("smooth{sa}/checker{ca} 20k"), &ds, 20000, 1e-2);
    }
}
