// criterion-4 probe: cosine lr squeeze
use ofelab::archsearch::{collect_corpus, test_loss};
use ofelab::envs::make_env;
use ofelab::extractors::{ArchSpec, Connectivity, OfeExtractor};
use ofelab::replay::{sample_growth_limited, Batch};
use ofelab::rng::{substream, Stream};

fn run(seed: u64, lr0: f64, flat: usize) -> f64 {
    let mut env = make_env("linsys").unwrap();
    let corpus = collect_corpus(env.as_mut(), 10_000, 2_000, 0).unwrap();
    let spec = ArchSpec::new(Connectivity::Densenet, 2, 32, gradkit::Activation::Swish, false, 4, 2);
    let mut ext = OfeExtractor::build(spec, seed, lr0).unwrap();
    let mut rng = substream(seed, Stream::ReplayAux, 1);
    let total = 5000usize;
    for step in 1..=total {
        if step > flat {
            let p = (step - flat) as f64 / (total - flat) as f64;
            let lr = lr0 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()).max(1e-4);
            ext.set_aux_lr(lr);
        }
        let picks = sample_growth_limited(&corpus.train, step, 256, &mut rng).unwrap();
        ext.train_step(&Batch::from_transitions(&picks)).unwrap();
    }
    test_loss(&mut ext, &corpus.test).unwrap()
}

fn main() {
    for (lr0, flat) in [(1e-2, 2000usize), (1e-2, 1000), (6e-3, 1000), (1.5e-2, 2000)] {
        let mut worst: f64 = 0.0;
        for seed in [7u64, 11, 42, 123, 2024] {
            let tl = run(seed, lr0, flat);
            worst = worst.max(tl);
        }
        println!("lr0={lr0:.1e} flat={flat}: worst of 5 seeds = {worst:.3e}");
    }
}
