// Scratch calibration probe (deleted before finalizing).
use ancm::dynamics::{CartPole, DomainBox, SystemBounds};
use ancm::synthesis::{sample_ancm_metric, sample_ancm_metric_warm, GridSpec, SynthesisConfig};
use nalgebra::{DMatrix, DVector};

fn main() {
    let cp = CartPole::default();
    let th = DVector::from_column_slice(&[4.0, 0.0016, 1.0]);
    let bounds = SystemBounds { b_bar: 1.8, rho_bar: 1.0, d_bar: 0.15 };
    let domain = DomainBox::symmetric(&[1.0, 0.45, 1.5, 1.5]);
    let psys = cp.parametric(bounds, domain.clone());
    let origin = DVector::zeros(4);
    let corner = DVector::from_column_slice(&[1.0, 0.45, 1.5, 1.5]);
    let grid = GridSpec {
        x_box: domain.clone(), x_counts: vec![1,1,1,1],
        xd_box: domain.clone(), xd_counts: vec![1,1,1,1],
        th_box: None, th_counts: vec![],
    };
    let mut cfg = SynthesisConfig::new(1.0, DMatrix::identity(1, 1), grid.clone(), 0.15);
    cfg.nu_cap = 1000.0;

    let t0 = std::time::Instant::now();
    let s0 = sample_ancm_metric(&psys, &cfg, &corner, &origin, &th).unwrap();
    println!("cold sample: {:?} chi={:.1} nu={:.1}", t0.elapsed(), s0.chi, s0.nu);

    let mut warm = None;
    let _ = sample_ancm_metric_warm(&psys, &cfg, &corner, &origin, &th, &mut warm).unwrap();
    let t0 = std::time::Instant::now();
    let n_steps = 200;
    for k in 0..n_steps {
        let f = k as f64 / n_steps as f64;
        let x = &corner * (1.0 - f * 0.3);
        match sample_ancm_metric_warm(&psys, &cfg, &x, &origin, &th, &mut warm) { Ok(_) => {}, Err(e) => { println!("step {k}: {e}"); warm = None; } }
    }
    println!("warm-path per-sample: {:?}", t0.elapsed() / n_steps);

    // dataset-shaped cold loop
    let t0 = std::time::Instant::now();
    let pts = grid.x_box.lattice(&[2,2,2,2]);
    for x in &pts {
        let _ = sample_ancm_metric(&psys, &cfg, x, &origin, &th).unwrap();
    }
    println!("cold per-sample over {} pts: {:?}", pts.len(), t0.elapsed() / pts.len() as u32);
}
