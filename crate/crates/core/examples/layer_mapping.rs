//! Prints each built-in layer mapping for a student of M layers and a
//! teacher of N.
//!
//!     cargo run --example layer_mapping -- 4 12

use layerdistill::mapping::Strategy;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (m, n) = match args[..] {
        [m, n] => (m, n),
        _ => (4, 12),
    };
    println!("g(m) for m = 0..={}  (0 is the embedding layer, {} the prediction layer)", m + 1, m + 1);
    for s in Strategy::ALL {
        match s.build(m, n) {
            Ok(map) => println!("{:>8}: {:?}", s.name(), map.table()),
            Err(e) => println!("{:>8}: {e}", s.name()),
        }
    }
}
