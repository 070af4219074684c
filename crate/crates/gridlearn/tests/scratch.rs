use gridlearn::case::load_bundled;
use gridlearn::datagen::{generate, SamplerConfig};
use gridlearn::ensemble::{BagConfig, BoostConfig};
use gridlearn::eval::{compare_methods_median, Family, Method, SplitKind};
use gridlearn::linmodel::DesignFactorization;

#[test]
#[ignore]
fn diag() {
    let seeds = [101u64, 102, 103, 104, 105];
    for (name, size) in [("case5", 175usize), ("case57", 250), ("case118", 400)] {
        let case = load_bundled(name).unwrap();

        let sc = SamplerConfig::new(2 * size, 101);
        let ds = generate(&case, &sc).unwrap();
        let fac = DesignFactorization::new(&ds.features).unwrap();
        let s1 = fac.top_singular_value();
        println!("{name}: sigma1={s1:.3e} rank={}", fac.rank());

        for frac in [0.0f64, 1e-12, 1e-10, 1e-8, 1e-6] {
            let mut boost = BoostConfig::constant(200, 0.1);
            boost.ridge_lambda = frac * s1 * s1;
            let sampler = SamplerConfig::new(2 * size, 0);
            let bag = BagConfig::new(50, 0);
            let t0 = std::time::Instant::now();
            let rep = compare_methods_median(&case, &sampler, &boost, &bag, &seeds).unwrap();
            for family in [Family::BusP, Family::BusQ] {
                let pr = rep.get(Method::Pr, family, SplitKind::Test).unwrap();
                let prtr = rep.get(Method::Pr, family, SplitKind::Train).unwrap();
                let gb = rep.get(Method::Gb, family, SplitKind::Test).unwrap();
                let bg = rep.get(Method::Bagging, family, SplitKind::Test).unwrap();
                let ok = gb < bg && bg < pr;
                println!(
                    "{name} f={frac:.0e} {:8}: PRtr {prtr:.2e} PR {pr:.3e}  GB {gb:.3e}  Bag {bg:.3e}  GB<Bag<PR: {ok}  ({:.1}s)",
                    family.label(),
                    t0.elapsed().as_secs_f64()
                );
            }
        }
    }
}
