mod common;

use common::rng;
use rand::Rng;
use volseg::net::{encode_checkpoint, Net};
use volseg::train::run::log_csv;
use volseg::train::{train_run, RunConfig};
use volseg::volgrid::{decode_vvf, encode_vvf, Dims, Dtype, Spacing, Volume};

fn tiny(iterations: u64, seed: u64) -> RunConfig {
    let text = format!(
        "seed = {seed}\niterations = {iterations}\ngrid = 16\nradius = 1.5,2.5\nwidths = 2,2,4\ngrowth = 2\n\
         train_cases = 2\nval_cases = 1\nval_every = 2\nlr = 0.01\n"
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn same_config_and_seed_give_identical_runs() {
    let a = train_run(&tiny(4, 3)).unwrap();
    let b = train_run(&tiny(4, 3)).unwrap();
    assert_eq!(a.checkpoint(), b.checkpoint());
    assert_eq!(log_csv(&a.log), log_csv(&b.log));
    assert_eq!(a.log.len(), 4);
    let c = train_run(&tiny(4, 4)).unwrap();
    assert_ne!(a.checkpoint(), c.checkpoint());
}

#[test]
fn zero_iterations_leave_the_initialisation() {
    let cfg = tiny(0, 8);
    let out = train_run(&cfg).unwrap();
    assert!(out.log.is_empty());
    let init = Net::<f32>::new(cfg.net.clone(), cfg.seed).unwrap();
    assert_eq!(out.checkpoint(), encode_checkpoint(&init));
}

fn random_volume(r: &mut impl Rng, binary: bool) -> Volume {
    let d = Dims::new(r.gen_range(1..=9), r.gen_range(1..=9), r.gen_range(1..=9));
    let s = Spacing::new(r.gen_range(0.1..4.0), r.gen_range(0.1..4.0), r.gen_range(0.1..4.0)).unwrap();
    let data = (0..d.len())
        .map(|_| if binary { r.gen_range(0..2) as f32 } else { f32::from_bits(r.gen_range(0..0x7f00_0000)) * if r.gen() { 1.0 } else { -1.0 } })
        .collect();
    Volume::new(d, s, data).unwrap()
}

#[test]
fn vvf_round_trip_is_byte_identical() {
    let mut r = rng(77);
    for i in 0..1000 {
        let binary = i % 2 == 0;
        let dtype = if binary { Dtype::U8 } else { Dtype::F32 };
        let v = random_volume(&mut r, binary);
        let bytes = encode_vvf(&v, dtype).unwrap();
        let back = decode_vvf(&bytes).unwrap();
        assert_eq!(back, v, "volume {i}");
        assert_eq!(encode_vvf(&back, dtype).unwrap(), bytes, "volume {i}");
    }
}
