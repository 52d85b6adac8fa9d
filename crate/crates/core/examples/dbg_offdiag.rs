use dispersim::detectors::Cutoff2P;
use dispersim::dynamics::*;
use dispersim::grid::*;
use num_complex::Complex64 as C;

fn main() {
    let g = make_grid(1, 64, 32.0).unwrap();
    let eng = Propagator2P::new(&g, 1.0).unwrap();
    let bound = (2.0 / 3.0) * g.p_max();
    let mut f = Field::<2>::from_fn(&g, Space::Momentum, |p| {
        let win = dispersim::bump::bump(p[0] / bound) * dispersim::bump::bump(p[1] / bound);
        let prof = (-(p[0] - 0.9).powi(2) - (p[1] + 0.9).powi(2)).exp();
        let phase = -p[0] * (-2.0) - p[1] * 2.0;
        C::from_polar(win * prof, phase)
    });
    let n = f.l2_norm();
    f.scale(1.0 / n);
    let f = fourier_inverse(&f);
    let v = PotentialSpec::Gaussian { coupling: 0.7, width: 0.5 };
    let cfg = EvolutionConfig {
        t_start: 1.0, t_end: 10.0, dt: 0.25,
        schedule: SnapshotSchedule { log_count: 4, linear: vec![10.0], dyadic: false },
        wraparound_tolerance: 1e-3,
        ..Default::default()
    };
    let traj = eng.run(&f, &SourceModel::PairPotential(v.clone()), &cfg, &mut []).unwrap();
    let ht = Cutoff2P::diagonal_clearing(0.0, 5.0, 0.4, 0.1, 0.5).unwrap();
    let t = 10.0;
    let r = source_at(&eng, &traj, t).unwrap();
    let samples = ht.samples(&g, t).unwrap();
    let mut best = (0usize, 0.0f64);
    for (i, (rv, s)) in r.values.iter().zip(&samples).enumerate() {
        let m = rv.norm() * s;
        if m > best.1 { best = (i, m); }
    }
    let (i, m) = best;
    let (j1, j2) = (i / 64, i % 64);
    let (x1, x2) = (g.x_at(j1), g.x_at(j2));
    let u = traj.snapshot_at(t).unwrap();
    println!("argmax at (x1,x2)=({x1},{x2}) rel={} |Hr|={m:.3e} |u|={:.3e} H={:.3e}",
        x1 - x2, u.values[i].norm(), samples[i]);
}
