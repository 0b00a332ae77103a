use otbump::estimators::normal_quantile;
use otbump::rng::{open_unit, stream_rng};
use otbump::transport::{fit_split, BandwidthGrids};

fn main() {
    for seed in [201u64, 301, 401] {
        let n = 50_000;
        let mut rng = stream_rng(seed, 0);
        let events: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let m = normal_quantile(open_unit(&mut rng));
                (m + normal_quantile(open_unit(&mut rng)), m)
            })
            .collect();
        for (hz, hm) in [(0.05, 0.1), (0.08, 0.15), (0.12, 0.2), (0.2, 0.25)] {
            let grids = BandwidthGrids {
                h_z: vec![hz],
                h_m: vec![hm],
                relative: false,
                lscv_subsample: None,
            };
            let map = fit_split(&events, &[], &grids).unwrap();
            let (m_lo, m_hi) = (normal_quantile(0.1), normal_quantile(0.9));
            let s = 2f64.sqrt();
            let (z_lo, z_hi) = (s * m_lo, s * m_hi);
            let mut max_err: f64 = 0.0;
            for i in 0..20 {
                let z = z_lo + (z_hi - z_lo) * i as f64 / 19.0;
                for j in 0..20 {
                    let m = m_lo + (m_hi - m_lo) * j as f64 / 19.0;
                    max_err = max_err.max((map.transport(z, m) - s * (z - m)).abs());
                }
            }
            print!(" (hz={hz},hm={hm}): {max_err:.3}");
        }
        println!("  [seed {seed}]");
    }
}
