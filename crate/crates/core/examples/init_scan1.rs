use levytd::network::{Net, NetConfig};
use levytd::stochastic::{purpose, stream_rng};

fn main() {
    let mut found = 0;
    for seed in 0u64..200000 {
        let mut rng = stream_rng(seed, purpose::NET_INIT, 0, 0);
        let net = Net::init(NetConfig::for_dimension(1), &mut rng).unwrap();
        let (n1, n2) = net.forward_values(0.0, &[1.0], 1).unwrap();
        if (0.95..=1.25).contains(&n1[0]) && (0.0..=0.35).contains(&n2[0]) {
            println!("seed {seed}: d1 ({:.3}, {:.3})", n1[0], n2[0]);
            found += 1;
            if found >= 12 { break; }
        }
    }
}
