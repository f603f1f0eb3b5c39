//! Community detection on generated networks: trained embeddings against
//! the spectral baseline.
//!
//! `cargo run --release -p elsm --example synthetic -- <train-config.json> [first-seed] [networks]`

use std::time::Instant;

use elsm::eval::{community_pipeline, spectral_pipeline};
use elsm::trainer::{train, TrainConfig};
use elsm::{generate_network, HyperParams};

fn main() -> elsm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let Some(path) = args.get(1) else {
        eprintln!("usage: synthetic <train-config.json> [first-seed] [networks]");
        std::process::exit(2);
    };
    let base: TrainConfig = elsm::io::read_json(std::path::Path::new(path))?;
    let first: u64 = args.get(2).map_or(0, |s| s.parse().expect("first seed"));
    let networks: u64 = args.get(3).map_or(10, |s| s.parse().expect("network count"));
    let hp = HyperParams::synthetic_benchmark();

    let (mut nmi, mut q, mut snmi, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for seed in first..first + networks {
        let start = Instant::now();
        let net = generate_network(&hp, seed)?.network;
        let cfg = TrainConfig { seed, ..base.clone() };
        let model = train(&net, &cfg)?;
        let r = community_pipeline(&model.state.nu, &net, 2, 10, seed)?;
        let s = spectral_pipeline(&net, 2, 10, seed)?;
        let (rn, sn) = (r.avg_nmi.unwrap_or(1.0), s.avg_nmi.unwrap_or(1.0));
        println!(
            "seed {seed}: model nmi {rn:.3} q {:.3} | spectral nmi {sn:.3} q {:.3} | {:.1}s",
            r.avg_modularity,
            s.avg_modularity,
            start.elapsed().as_secs_f64()
        );
        nmi += rn;
        q += r.avg_modularity;
        snmi += sn;
        sq += s.avg_modularity;
    }
    let m = networks as f64;
    println!(
        "mean: model nmi {:.3} q {:.3} | spectral nmi {:.3} q {:.3}",
        nmi / m,
        q / m,
        snmi / m,
        sq / m
    );
    Ok(())
}
