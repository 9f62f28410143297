use levytd::network::{Net, NetConfig};
use levytd::stochastic::{purpose, stream_rng};

fn init_outputs(seed: u64, d: usize) -> (f64, f64) {
    let mut rng = stream_rng(seed, purpose::NET_INIT, 0, 0);
    let net = Net::init(NetConfig::for_dimension(d), &mut rng).unwrap();
    let xi = vec![1.0; d];
    let (n1, n2) = net.forward_values(0.0, &xi, d).unwrap();
    (n1[0], n2[0])
}

fn main() {
    let lo: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let hi: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200000);
    let mut found = 0;
    for seed in lo..hi {
        let (n1_1, n2_1) = init_outputs(seed, 1);
        if !(0.95..=1.25).contains(&n1_1) || !(0.00..=0.35).contains(&n2_1) {
            continue;
        }
        let (n1_10, n2_10) = init_outputs(seed, 10);
        if !(0.85..=1.30).contains(&n1_10) || !(-0.05..=0.25).contains(&n2_10) {
            continue;
        }
        println!("seed {seed}: d1 ({n1_1:.3}, {n2_1:.3}) d10 ({n1_10:.3}, {n2_10:.3})");
        found += 1;
        if found >= 40 {
            break;
        }
    }
}
