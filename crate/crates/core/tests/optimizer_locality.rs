mod common;

use batchwise_dropout::dropout::Rng;
use batchwise_dropout::netconv::{ConvNet, ConvNetSpec};
use batchwise_dropout::netfc::{FcNet, NetSpec};
use common::check_locality;
use proptest::prelude::*;

fn fc_spec() -> impl Strategy<Value = NetSpec> {
    (prop::collection::vec(1usize..10, 2..6), any::<u64>()).prop_map(|(widths, s)| {
        let mut rng = Rng::new(s, 0);
        let drop = (0..widths.len() - 1).map(|_| [0.0, 0.2, 0.5, 0.8][rng.below(0, 4)]).collect();
        NetSpec::new(widths, drop).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fully_connected_updates_stay_in_the_submatrix(spec in fc_spec(), seed in any::<u64>(), steps in 1usize..4) {
        let r = check_locality(FcNet::<f64>::new(spec, seed).unwrap(), seed, steps);
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn convolutional_updates_stay_in_the_submatrix(p in prop::sample::select(vec![25u32, 50, 75]), seed in any::<u64>()) {
        let spec = ConvNetSpec::parse(&format!("4C3-MP2-{p}%-3C2-{p}%-6N-{p}%-5N"), 2, 10).unwrap();
        let r = check_locality(ConvNet::<f64>::new(spec, seed).unwrap(), seed, 2);
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}
