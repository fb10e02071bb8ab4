use rhawk_core::hawkes::{simulate_dataset, HawkesParams};

fn main() {
    let params = HawkesParams::new(
        vec![0.30, 0.20, 0.03, 0.01],
        vec![
            vec![0.0, 0.8, 0.0, 0.8],
            vec![0.8, 0.0, 0.0, 0.0],
            vec![0.2, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 4.0, 0.0],
        ],
        {
            let mut g = vec![vec![1.2; 4]; 4];
            g[3][2] = 2.0;
            g
        },
    )
    .unwrap();
    println!("radius {:.3}", params.branching_radius());
    let (d, _) = simulate_dataset(&params, 16.0, 300, 5).unwrap();
    let mut counts = [0usize; 4];
    let mut after2 = [0usize; 4];
    for seq in &d.sequences {
        for w in seq.events.windows(2) {
            if w[0].mark == 2 {
                after2[w[1].mark] += 1;
            }
        }
        for e in &seq.events {
            counts[e.mark] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    println!("mean len {:.1}", total as f64 / d.len() as f64);
    println!("class shares: {:?}", counts.map(|c| (c as f64 / total as f64 * 100.0).round()));
    let t2: usize = after2.iter().sum();
    println!("next-after-2 distribution: {:?}", after2.map(|c| (c as f64 / t2 as f64 * 100.0).round()));
}
